//! Heterogeneous word/document graph: sliding-window co-occurrence
//! statistics, PMI word–word edges, TF-IDF document–word edges, a binary
//! on-disk format, and fixed-fanout k-hop neighborhood sampling.
//!
//! Node ids place documents first (`0..n_docs`) and vocabulary words after
//! (`n_docs..n_docs+n_words`). The adjacency is kept as a per-node neighbor
//! index rather than a matrix.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::Corpus;

pub const GRAPH_MAGIC: &[u8; 8] = b"DUATGRF1";
pub const GRAPH_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a graph file (bad magic)")]
    BadMagic,
    #[error("unsupported graph version {0}")]
    Version(u32),
    #[error("truncated graph file")]
    Truncated,
    #[error("graph checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed graph file: {0}")]
    Malformed(String),
}

/// Sliding-window co-occurrence counts over the corpus.
///
/// `window_count(i)` counts windows containing word `i` at least once
/// (presence, not multiplicity), so `p(i) = W(i)/W` never exceeds one.
#[derive(Clone, Debug)]
pub struct CooccurrenceStats {
    total_windows: u64,
    word_windows: Vec<u64>,
    pair_windows: HashMap<(u32, u32), u64>,
    window_size: usize,
}

impl CooccurrenceStats {
    pub fn total_windows(&self) -> u64 {
        self.total_windows
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn window_count(&self, word: u32) -> u64 {
        self.word_windows[word as usize]
    }

    pub fn pair_count(&self, i: u32, j: u32) -> u64 {
        let key = if i <= j { (i, j) } else { (j, i) };
        self.pair_windows.get(&key).copied().unwrap_or(0)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32, u64)> + '_ {
        self.pair_windows.iter().map(|(&(i, j), &c)| (i, j, c))
    }
}

/// Slide a window over each document independently and count word and
/// pair appearances. A document of length `L` contributes
/// `max(1, L − window_size + 1)` windows.
pub fn collect_window_stats(corpus: &Corpus, window_size: usize) -> CooccurrenceStats {
    assert!(window_size >= 1, "window_size must be at least 1");
    let n_words = corpus.vocabulary.len();
    let mut stats = CooccurrenceStats {
        total_windows: 0,
        word_windows: vec![0; n_words],
        pair_windows: HashMap::new(),
        window_size,
    };
    let mut distinct: Vec<u32> = Vec::with_capacity(window_size);
    for doc in &corpus.documents {
        let ids: Vec<u32> = doc
            .tokens
            .iter()
            .map(|t| corpus.vocabulary.id(t).expect("token outside vocabulary"))
            .collect();
        let n_windows = if ids.len() > window_size {
            ids.len() - window_size + 1
        } else {
            1
        };
        for start in 0..n_windows {
            let end = (start + window_size).min(ids.len());
            stats.total_windows += 1;
            distinct.clear();
            distinct.extend_from_slice(&ids[start..end]);
            distinct.sort_unstable();
            distinct.dedup();
            for (a, &wi) in distinct.iter().enumerate() {
                stats.word_windows[wi as usize] += 1;
                for &wj in &distinct[a + 1..] {
                    *stats.pair_windows.entry((wi, wj)).or_insert(0) += 1;
                }
            }
        }
    }
    stats
}

/// Pointwise mutual information `ln(p(i,j) / (p(i)p(j)))`, or `None` when
/// the pair never co-occurs. Symmetric in its arguments.
pub fn pmi(stats: &CooccurrenceStats, i: u32, j: u32) -> Option<f64> {
    assert_ne!(i, j, "pmi requires distinct words");
    let wij = stats.pair_count(i, j);
    if wij == 0 {
        return None;
    }
    let w = stats.total_windows as f64;
    let pij = wij as f64 / w;
    let pi = stats.window_count(i) as f64 / w;
    let pj = stats.window_count(j) as f64 / w;
    Some((pij / (pi * pj)).ln())
}

/// `count(word in doc) · ln(|D| / df(word))`; zero when the word does not
/// appear in the document.
pub fn tf_idf(corpus: &Corpus, doc_id: usize, word: u32) -> f64 {
    let n = corpus.documents[doc_id]
        .tokens
        .iter()
        .filter(|t| corpus.vocabulary.id(t) == Some(word))
        .count();
    if n == 0 {
        return 0.0;
    }
    let df = corpus.vocabulary.doc_freq(word) as f64;
    let idf = (corpus.n_docs() as f64 / df).ln();
    n as f64 * idf
}

/// The heterogeneous text graph held as a neighbor index.
///
/// Every node carries a unit self-loop. Word–word entries hold PMI and
/// exist only when PMI is strictly positive; document–word entries hold
/// TF-IDF and exist only when the word occurs in the document. Edges are
/// stored symmetrically and each neighbor list is sorted by node id.
#[derive(Clone, Debug, PartialEq)]
pub struct TextGraph {
    n_docs: usize,
    n_words: usize,
    neighbors: Vec<Vec<(u32, f64)>>,
}

impl TextGraph {
    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn n_words(&self) -> usize {
        self.n_words
    }

    pub fn n_nodes(&self) -> usize {
        self.n_docs + self.n_words
    }

    pub fn neighbors(&self, node: u32) -> &[(u32, f64)] {
        &self.neighbors[node as usize]
    }

    /// Global node id of a vocabulary word.
    pub fn word_node(&self, word: u32) -> u32 {
        (self.n_docs + word as usize) as u32
    }

    pub fn edge_weight(&self, from: u32, to: u32) -> Option<f64> {
        self.neighbors[from as usize]
            .binary_search_by_key(&to, |&(id, _)| id)
            .ok()
            .map(|idx| self.neighbors[from as usize][idx].1)
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }
}

/// Assemble the graph from the corpus and its window statistics.
pub fn build_graph(corpus: &Corpus, stats: &CooccurrenceStats) -> TextGraph {
    let n_docs = corpus.n_docs();
    let n_words = corpus.vocabulary.len();
    let n = n_docs + n_words;
    let mut neighbors: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];

    for (node, list) in neighbors.iter_mut().enumerate() {
        list.push((node as u32, 1.0));
    }

    for (i, j, _) in stats.pairs() {
        if let Some(v) = pmi(stats, i, j) {
            if v > 0.0 {
                let (ni, nj) = ((n_docs + i as usize) as u32, (n_docs + j as usize) as u32);
                neighbors[ni as usize].push((nj, v));
                neighbors[nj as usize].push((ni, v));
            }
        }
    }

    for doc in &corpus.documents {
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for tok in &doc.tokens {
            let w = corpus.vocabulary.id(tok).expect("token outside vocabulary");
            *counts.entry(w).or_insert(0) += 1;
        }
        let mut words: Vec<u32> = counts.keys().copied().collect();
        words.sort_unstable();
        for w in words {
            let n_occ = counts[&w] as f64;
            let df = corpus.vocabulary.doc_freq(w) as f64;
            let idf = (n_docs as f64 / df).ln();
            let weight = n_occ * idf;
            if weight > 0.0 {
                let wn = (n_docs + w as usize) as u32;
                neighbors[doc.id].push((wn, weight));
                neighbors[wn as usize].push((doc.id as u32, weight));
            }
        }
    }

    for list in &mut neighbors {
        list.sort_unstable_by_key(|&(id, _)| id);
    }

    TextGraph {
        n_docs,
        n_words,
        neighbors,
    }
}

/// Fixed-fanout sampled neighborhoods around a set of center nodes.
///
/// For each center, `hop_list(c, k)` holds exactly `fanout^k` node ids
/// drawn uniformly with replacement from the previous hop's neighbor
/// lists (hop 0 is the center itself). `hop_weights` carries the index
/// weight of the edge each draw traversed.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSubgraph {
    centers: Vec<u32>,
    fanout: usize,
    k: usize,
    seed: u64,
    /// hops[center][k-1] lists sampled ids, length fanout^k.
    hops: Vec<Vec<Vec<u32>>>,
    weights: Vec<Vec<Vec<f64>>>,
}

impl SampledSubgraph {
    /// Assemble a subgraph from explicit hop lists, validating shapes.
    /// `hops[center][k-1]` must hold exactly `fanout^k` ids with matching
    /// edge weights.
    pub fn from_parts(
        centers: Vec<u32>,
        fanout: usize,
        seed: u64,
        hops: Vec<Vec<Vec<u32>>>,
        weights: Vec<Vec<Vec<f64>>>,
    ) -> Self {
        assert_eq!(hops.len(), centers.len());
        assert_eq!(weights.len(), centers.len());
        let k = hops.first().map(Vec::len).unwrap_or(0);
        for (per_ids, per_ws) in hops.iter().zip(&weights) {
            assert_eq!(per_ids.len(), k);
            assert_eq!(per_ws.len(), k);
            for (hop, (ids, ws)) in per_ids.iter().zip(per_ws).enumerate() {
                let expect = fanout.pow(hop as u32 + 1);
                assert_eq!(ids.len(), expect, "hop {} list length", hop + 1);
                assert_eq!(ws.len(), expect, "hop {} weight length", hop + 1);
            }
        }
        SampledSubgraph {
            centers,
            fanout,
            k,
            seed,
            hops,
            weights,
        }
    }

    pub fn centers(&self) -> &[u32] {
        &self.centers
    }

    pub fn fanout(&self) -> usize {
        self.fanout
    }

    pub fn hop_count(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hop_list(&self, center_idx: usize, k: usize) -> &[u32] {
        &self.hops[center_idx][k - 1]
    }

    pub fn hop_weights(&self, center_idx: usize, k: usize) -> &[f64] {
        &self.weights[center_idx][k - 1]
    }

    /// All distinct node ids in the subgraph (centers plus every sampled
    /// hop), ascending.
    pub fn distinct_nodes(&self) -> Vec<u32> {
        let mut all: Vec<u32> = self.centers.clone();
        for per_center in &self.hops {
            for hop in per_center {
                all.extend_from_slice(hop);
            }
        }
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// Sample k-hop neighborhoods with a fixed fanout, uniformly with
/// replacement, deterministically from `seed`.
pub fn sample_k_hop(
    graph: &TextGraph,
    centers: &[u32],
    fanout: usize,
    k: usize,
    seed: u64,
) -> SampledSubgraph {
    sample_k_hop_capped(graph, centers, fanout, k, seed, None)
}

/// [`sample_k_hop`] with an optional cap on the number of distinct nodes
/// materialized. Once the cap is reached, a draw that would introduce a
/// new node falls back to the node it was drawn from (always legal: every
/// node neighbors itself through its self-loop).
pub fn sample_k_hop_capped(
    graph: &TextGraph,
    centers: &[u32],
    fanout: usize,
    k: usize,
    seed: u64,
    max_distinct: Option<usize>,
) -> SampledSubgraph {
    assert!(fanout >= 1, "fanout must be at least 1");
    assert!((1..=3).contains(&k), "hop count must be in 1..=3");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut distinct: std::collections::HashSet<u32> = centers.iter().copied().collect();

    let mut hops = Vec::with_capacity(centers.len());
    let mut weights = Vec::with_capacity(centers.len());
    for &center in centers {
        assert!(
            (center as usize) < graph.n_nodes(),
            "center {center} outside graph"
        );
        let mut per_center_ids: Vec<Vec<u32>> = Vec::with_capacity(k);
        let mut per_center_ws: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut frontier: Vec<u32> = vec![center];
        for _ in 0..k {
            let mut ids = Vec::with_capacity(frontier.len() * fanout);
            let mut ws = Vec::with_capacity(frontier.len() * fanout);
            for &parent in &frontier {
                let nbrs = graph.neighbors(parent);
                for _ in 0..fanout {
                    let (mut id, mut w) = nbrs[rng.gen_range(0..nbrs.len())];
                    if let Some(cap) = max_distinct {
                        if !distinct.contains(&id) && distinct.len() >= cap {
                            // Stop expanding: reuse the parent via its self-loop.
                            id = parent;
                            w = graph.edge_weight(parent, parent).unwrap_or(1.0);
                        }
                    }
                    distinct.insert(id);
                    ids.push(id);
                    ws.push(w);
                }
            }
            frontier = ids.clone();
            per_center_ids.push(ids);
            per_center_ws.push(ws);
        }
        hops.push(per_center_ids);
        weights.push(per_center_ws);
    }

    SampledSubgraph {
        centers: centers.to_vec(),
        fanout,
        k,
        seed,
        hops,
        weights,
    }
}

struct CrcWriter<W: Write> {
    inner: W,
    hasher: crc32fast::Hasher,
}

impl<W: Write> CrcWriter<W> {
    fn write_all(&mut self, buf: &[u8]) -> io::Result<()> {
        self.hasher.update(buf);
        self.inner.write_all(buf)
    }
}

/// Write the little-endian binary graph format: magic, version, counts,
/// per-node neighbor lists as `(u32 id, f32 weight)` pairs, CRC32 trailer.
pub fn write_graph<W: Write>(graph: &TextGraph, writer: W) -> Result<(), GraphError> {
    let mut w = CrcWriter {
        inner: writer,
        hasher: crc32fast::Hasher::new(),
    };
    w.write_all(GRAPH_MAGIC)?;
    w.write_all(&GRAPH_VERSION.to_le_bytes())?;
    w.write_all(&(graph.n_docs as u64).to_le_bytes())?;
    w.write_all(&(graph.n_words as u64).to_le_bytes())?;
    for list in &graph.neighbors {
        w.write_all(&(list.len() as u32).to_le_bytes())?;
        for &(id, weight) in list {
            w.write_all(&id.to_le_bytes())?;
            w.write_all(&(weight as f32).to_le_bytes())?;
        }
    }
    let crc = w.hasher.clone().finalize();
    w.inner.write_all(&crc.to_le_bytes())?;
    w.inner.flush()?;
    Ok(())
}

pub fn read_graph<R: Read>(reader: R) -> Result<TextGraph, GraphError> {
    struct CrcReader<R: Read> {
        inner: R,
        hasher: crc32fast::Hasher,
    }
    impl<R: Read> CrcReader<R> {
        fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), GraphError> {
            match self.inner.read_exact(buf) {
                Ok(()) => {
                    self.hasher.update(buf);
                    Ok(())
                }
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(GraphError::Truncated),
                Err(e) => Err(e.into()),
            }
        }
    }

    let mut r = CrcReader {
        inner: reader,
        hasher: crc32fast::Hasher::new(),
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != GRAPH_MAGIC {
        return Err(GraphError::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != GRAPH_VERSION {
        return Err(GraphError::Version(version));
    }
    r.read_exact(&mut u64buf)?;
    let n_docs = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u64buf)?;
    let n_words = u64::from_le_bytes(u64buf) as usize;
    let n = n_docs
        .checked_add(n_words)
        .ok_or_else(|| GraphError::Malformed("node count overflow".into()))?;

    let mut neighbors = Vec::with_capacity(n);
    for node in 0..n {
        r.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        if count > n {
            return Err(GraphError::Malformed(format!(
                "node {node} claims {count} neighbors in a {n}-node graph"
            )));
        }
        let mut list = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut u32buf)?;
            let id = u32::from_le_bytes(u32buf);
            if id as usize >= n {
                return Err(GraphError::Malformed(format!(
                    "neighbor id {id} outside {n}-node graph"
                )));
            }
            let mut f32buf = [0u8; 4];
            r.read_exact(&mut f32buf)?;
            list.push((id, f32::from_le_bytes(f32buf) as f64));
        }
        neighbors.push(list);
    }

    let computed = r.hasher.clone().finalize();
    let mut trailer = [0u8; 4];
    match r.inner.read_exact(&mut trailer) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(GraphError::Truncated),
        Err(e) => return Err(e.into()),
    }
    let stored = u32::from_le_bytes(trailer);
    if stored != computed {
        return Err(GraphError::Checksum { stored, computed });
    }

    Ok(TextGraph {
        n_docs,
        n_words,
        neighbors,
    })
}

pub fn save_graph(graph: &TextGraph, path: &Path) -> Result<(), GraphError> {
    write_graph(graph, BufWriter::new(File::create(path)?))
}

pub fn load_graph(path: &Path) -> Result<TextGraph, GraphError> {
    read_graph(BufReader::new(File::open(path)?))
}
