// Writes the synthetic sample corpus committed under data/.
use duat_core::synthetic;
use std::fs;

fn main() {
    let raw = synthetic::separable(40, 11);
    fs::write("data/synthetic40.texts.txt", &raw.texts).unwrap();
    fs::write("data/synthetic40.meta.tsv", &raw.meta).unwrap();
    println!("wrote data/synthetic40.{{texts.txt,meta.tsv}}");
}
