//! Minimal reverse-mode differentiation core: dense tensors, a tape over a
//! fixed primitive catalog, a finite-difference gradient checker, and
//! binary parameter checkpoints.

mod checkpoint;
mod tape;
mod tensor;

pub use checkpoint::{
    load_params, read_params, save_params, write_params, CheckpointError, CHECKPOINT_VERSION,
};
pub use tape::{grad_check, Grad, Gradients, ParamId, ParamStore, RowGrad, Tape, ValueId};
pub use tensor::{row_softmax, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with(entries: &[(&str, &[usize], &[f64])]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = entries
            .iter()
            .map(|(name, shape, data)| store.add(name, Tensor::from_vec(shape, data.to_vec())))
            .collect();
        (store, ids)
    }

    #[test]
    fn elu_matches_definition() {
        let store = ParamStore::new();
        let mut tape = Tape::eval(&store);
        let x = tape.input(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]));
        let y = tape.elu(x);
        let got = tape.value(y).data().to_vec();
        assert!((got[0] - ((-1.0f64).exp() - 1.0)).abs() < 1e-12);
        assert!((got[0] - (-0.6321)).abs() < 1e-4);
        assert_eq!(got[1], 0.0);
        assert_eq!(got[2], 2.0);
    }

    #[test]
    fn leaky_relu_matches_definition() {
        let store = ParamStore::new();
        let mut tape = Tape::eval(&store);
        let x = tape.input(Tensor::from_vec(&[2], vec![-2.0, 3.0]));
        let y = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(y).data(), &[-0.4, 3.0]);
    }

    #[test]
    fn masked_softmax_singleton_is_one() {
        let store = ParamStore::new();
        let mut tape = Tape::eval(&store);
        let x = tape.input(Tensor::from_vec(&[1], vec![-7.3]));
        let y = tape.masked_softmax(x, &[0, 1]);
        assert_eq!(tape.value(y).data(), &[1.0]);
    }

    #[test]
    fn masked_softmax_segments_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let store = ParamStore::new();
            let mut tape = Tape::eval(&store);
            let a = rng.gen_range(1..6);
            let b = rng.gen_range(1..6);
            let data: Vec<f64> = (0..a + b).map(|_| rng.gen_range(-1e6..1e6)).collect();
            let x = tape.input(Tensor::from_vec(&[a + b], data));
            let y = tape.masked_softmax(x, &[0, a, a + b]);
            let v = tape.value(y).data();
            let s1: f64 = v[..a].iter().sum();
            let s2: f64 = v[a..].iter().sum();
            assert!((s1 - 1.0).abs() < 1e-9);
            assert!((s2 - 1.0).abs() < 1e-9);
            assert!(v.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn affine_gradient_matches_hand_formula() {
        // y = x·w summed: dL/dw = xᵀ·g with g = 1.
        let (mut store, ids) = store_with(&[
            ("w", &[2, 2], &[1.0, 2.0, 3.0, 4.0]),
            ("b", &[2], &[0.5, -0.5]),
        ]);
        let x_data = [2.0, -1.0, 0.5, 3.0];
        let grads = {
            let mut tape = Tape::eval(&store);
            let x = tape.input(Tensor::from_vec(&[2, 2], x_data.to_vec()));
            let w = tape.param(ids[0]);
            let b = tape.param(ids[1]);
            let y = tape.affine(x, w, b);
            // Reduce to scalar: 1ᵀ·y·1.
            let col = tape.input(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]));
            let flat = tape.matmul(y, col);
            let row = tape.input(Tensor::from_vec(&[1, 2], vec![1.0, 1.0]));
            let s = tape.matmul(row, flat);
            tape.backward(s)
        };
        // dW[p][q] = Σ_i x[i][p]; x columns sum: col0 = 2+0.5, col1 = -1+3.
        let dw = grads.dense(ids[0], &[2, 2]);
        assert_eq!(dw.data(), &[2.5, 2.5, 2.0, 2.0]);
        let db = grads.dense(ids[1], &[2]);
        assert_eq!(db.data(), &[2.0, 2.0]);
        // Check against the finite-difference oracle too.
        let err = grad_check(&mut store, 1e-5, |tape| {
            let x = tape.input(Tensor::from_vec(&[2, 2], x_data.to_vec()));
            let w = tape.param(ParamId(0));
            let b = tape.param(ParamId(1));
            let y = tape.affine(x, w, b);
            let col = tape.input(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]));
            let flat = tape.matmul(y, col);
            let row = tape.input(Tensor::from_vec(&[1, 2], vec![1.0, 1.0]));
            tape.matmul(row, flat)
        });
        assert!(err < 1e-6, "affine grad error {err}");
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let (store, ids) = store_with(&[("w", &[4], &[1.0, -2.0, 3.0, -4.0])]);
        let mut tape = Tape::eval(&store);
        let w = tape.param(ids[0]);
        let y = tape.dropout(w, 0.5);
        assert_eq!(y, w, "eval-mode dropout must pass the node through");
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 3.0, -4.0]);
    }

    #[test]
    fn dropout_train_mode_scales_and_is_seeded() {
        let (store, ids) = store_with(&[("w", &[1000], &[1.0; 1000])]);
        let run = |seed: u64| {
            let mut tape = Tape::new(&store, true, seed);
            let w = tape.param(ids[0]);
            let y = tape.dropout(w, 0.3);
            tape.value(y).data().to_vec()
        };
        let a = run(42);
        let b = run(42);
        assert_eq!(a, b, "same dropout seed must give the same mask");
        let keep_scale = 1.0 / 0.7;
        assert!(a.iter().all(|&v| v == 0.0 || (v - keep_scale).abs() < 1e-12));
        let kept = a.iter().filter(|&&v| v != 0.0).count();
        assert!((500..900).contains(&kept), "kept {kept} of 1000 at p=0.3");
    }

    #[test]
    fn cross_entropy_one_hot_correct_is_zero() {
        let store = ParamStore::new();
        let mut tape = Tape::eval(&store);
        // Very peaked logits approximate a one-hot distribution.
        let logits = tape.input(Tensor::from_vec(&[2, 3], vec![
            100.0, 0.0, 0.0, //
            0.0, 0.0, 100.0,
        ]));
        let loss = tape.cross_entropy(logits, &[0, 2], &[true, true]);
        assert!(tape.value(loss).item() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_is_n_ln_f() {
        let store = ParamStore::new();
        let mut tape = Tape::eval(&store);
        let logits = tape.input(Tensor::zeros(&[3, 4]));
        let loss = tape.cross_entropy(logits, &[1, 2, 0], &[true, true, true]);
        assert!((tape.value(loss).item() - 3.0 * 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "empty mask")]
    fn cross_entropy_empty_mask_panics() {
        let store = ParamStore::new();
        let mut tape = Tape::eval(&store);
        let logits = tape.input(Tensor::zeros(&[2, 2]));
        let _ = tape.cross_entropy(logits, &[0, 1], &[false, false]);
    }

    #[test]
    fn l2_penalty_value_and_grad() {
        let (mut store, _) = store_with(&[("theta", &[1], &[2.0])]);
        {
            let mut tape = Tape::eval(&store);
            let theta = tape.param(ParamId(0));
            let pen = tape.l2_penalty(&[theta], 0.5);
            assert_eq!(tape.value(pen).item(), 2.0);
        }
        let err = grad_check(&mut store, 1e-5, |tape| {
            let theta = tape.param(ParamId(0));
            tape.l2_penalty(&[theta], 0.5)
        });
        assert!(err < 1e-8, "l2 grad error {err}");
    }

    #[test]
    fn gather_rows_accumulates_sparse_row_grads() {
        let (store, ids) = store_with(&[(
            "table",
            &[4, 2],
            &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
        )]);
        let mut tape = Tape::eval(&store);
        let t = tape.param(ids[0]);
        let g = tape.gather_rows(t, &[1, 1, 3]);
        let col = tape.input(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]));
        let flat = tape.matmul(g, col);
        let row = tape.input(Tensor::from_vec(&[1, 3], vec![1.0, 1.0, 1.0]));
        let s = tape.matmul(row, flat);
        let grads = tape.backward(s);
        match grads.get(ids[0]) {
            Some(Grad::Rows(r)) => {
                assert_eq!(r.row_ids(), &[1, 3]);
                assert_eq!(r.row(1).unwrap(), &[2.0, 2.0]);
                assert_eq!(r.row(3).unwrap(), &[1.0, 1.0]);
                assert!(r.row(0).is_none());
            }
            other => panic!("expected row grads, got {other:?}"),
        }
    }

    #[test]
    #[should_panic(expected = "backward called twice")]
    fn double_backward_panics() {
        let (store, ids) = store_with(&[("w", &[1], &[1.0])]);
        let mut tape = Tape::eval(&store);
        let w = tape.param(ids[0]);
        let y = tape.scale(w, 2.0);
        let _ = tape.backward(y);
        let _ = tape.backward(y);
    }

    #[test]
    #[should_panic(expected = "no forward steps")]
    fn backward_without_forward_panics() {
        let (store, ids) = store_with(&[("w", &[1], &[1.0])]);
        let mut tape = Tape::eval(&store);
        let w = tape.param(ids[0]);
        let _ = tape.backward(w);
    }

    #[test]
    fn grad_check_zero_params_is_vacuous_zero() {
        let mut store = ParamStore::new();
        let err = grad_check(&mut store, 1e-4, |tape| {
            let x = tape.input(Tensor::from_vec(&[2], vec![1.0, 2.0]));
            let y = tape.elu(x);
            let row = tape.input(Tensor::from_vec(&[1, 2], vec![1.0, 1.0]));
            let col = tape.input(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]));
            let m = tape.matvec(row, y);
            let _ = col;
            m
        });
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_catches_corrupted_gradient() {
        // Sanity-check the checker itself: compare a corrupted analytic
        // gradient against central differences by hand.
        let (mut store, ids) = store_with(&[("w", &[2], &[0.3, -0.7])]);
        let build = |tape: &mut Tape| -> ValueId {
            let w = tape.param(ids[0]);
            let y = tape.elu(w);
            let row = tape.input(Tensor::from_vec(&[1, 2], vec![1.0, 1.0]));
            tape.matvec(row, y)
        };
        let analytic = {
            let mut tape = Tape::eval(&store);
            let out = build(&mut tape);
            tape.backward(out)
        };
        let mut corrupted = analytic.dense(ids[0], &[2]);
        corrupted.data_mut()[0] += 0.1;
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..2 {
            let orig = store.get(ids[0]).data()[i];
            store.get_mut(ids[0]).data_mut()[i] = orig + eps;
            let plus = {
                let mut tape = Tape::eval(&store);
                let out = build(&mut tape);
                tape.value(out).item()
            };
            store.get_mut(ids[0]).data_mut()[i] = orig - eps;
            let minus = {
                let mut tape = Tape::eval(&store);
                let out = build(&mut tape);
                tape.value(out).item()
            };
            store.get_mut(ids[0]).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = corrupted.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
        }
        assert!(worst > 1e-2, "corrupted gradient must be flagged, got {worst}");
    }

    /// Central differences across the whole primitive catalog on randomized
    /// small shapes.
    #[test]
    fn catalog_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let m = rng.gen_range(2..5);
            let k = rng.gen_range(2..5);
            let n = rng.gen_range(2..4);
            let mut store = ParamStore::new();
            let rnd = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> {
                (0..len).map(|_| rng.gen_range(-1.5..1.5)).collect()
            };
            let a = store.add("a", Tensor::from_vec(&[m, k], rnd(&mut rng, m * k)));
            let b = store.add("b", Tensor::from_vec(&[k, n], rnd(&mut rng, k * n)));
            let bias = store.add("bias", Tensor::from_vec(&[n], rnd(&mut rng, n)));
            let vvec = store.add("v", Tensor::from_vec(&[n], rnd(&mut rng, n)));
            let table = store.add("table", Tensor::from_vec(&[3, n], rnd(&mut rng, 3 * n)));
            let slope = 0.2;
            let seg = vec![0usize, m, 2 * m];
            let ids: Vec<u32> = (0..2 * m).map(|i| (i % 3) as u32).collect();
            let targets: Vec<usize> = (0..2 * m).map(|i| i % n).collect();
            let mask: Vec<bool> = (0..2 * m).map(|i| i % 3 != 2).collect();
            let logit_ids: Vec<u32> = (0..2 * m as u32).map(|i| i % 2).collect();
            let fixed_weights: Vec<f64> = rnd(&mut rng, 2 * n);
            let err = grad_check(&mut store, 1e-5, |tape| {
                let av = tape.param(a);
                let bv = tape.param(b);
                let biasv = tape.param(bias);
                let vv = tape.param(vvec);
                let tablev = tape.param(table);
                let y = tape.affine(av, bv, biasv); // [m, n]
                let y = tape.elu(y);
                let y2 = tape.matmul(av, bv); // [m, n]
                let y2 = tape.leaky_relu(y2, slope);
                let half = tape.scale(y2, 0.5);
                let both = tape.add(y, half); // [m, n]
                let rows = tape.gather_rows(tablev, &ids); // [2m, n]
                let cat = tape.concat_cols(&[rows, rows]); // [2m, 2n]
                let vflat = tape.input(Tensor::from_vec(&[2 * n], fixed_weights.clone()));
                let scores = {
                    let s0 = tape.matvec(cat, vflat); // [2m], constant weights
                    let s1 = tape.matvec(rows, vv); // [2m], through the param
                    let s = tape.add(s0, s1);
                    tape.leaky_relu(s, slope)
                };
                let alpha = tape.masked_softmax(scores, &seg);
                let mixed = tape.segment_weighted_sum(alpha, rows, &seg); // [2, n]
                let wsum = tape.weighted_sum(&[mixed, mixed], &[0.7, 0.3]);
                let top = tape.gather_rows(both, &[0, 1]);
                let pooled = tape.add(wsum, top); // [2, n]
                let logits = tape.gather_rows(pooled, &logit_ids); // [2m, n]
                let ce = tape.cross_entropy(logits, &targets, &mask);
                let pen = tape.l2_penalty(&[av, bv, tablev], 1e-2);
                tape.add(ce, pen)
            });
            assert!(err < 1e-4, "trial {trial}: catalog grad error {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add_uniform("w1", &[3, 4], 3, 4, &mut rng);
        store.add_uniform("w2", &[5], 5, 1, &mut rng);
        store.add_zeros("b", &[4]);

        let mut bytes = Vec::new();
        write_params(&store, &mut bytes).unwrap();
        let loaded = read_params(&bytes[..]).unwrap();
        assert_eq!(loaded.len(), store.len());
        for pid in store.ids() {
            let orig = store.get(pid);
            let got = loaded.get(loaded.find(store.name(pid)).unwrap());
            assert_eq!(orig.shape(), got.shape());
            for (a, b) in orig.data().iter().zip(got.data()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }

        // Truncation.
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            read_params(cut),
            Err(CheckpointError::Truncated)
        ));

        // Bit flip breaks the checksum.
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(
            read_params(&flipped[..]),
            Err(CheckpointError::Checksum { .. })
        ));
    }
}
