//! Classical momentum with L2 regularization, applied lazily per row.
//!
//! The update is `v ← μ·v + g` then `θ ← θ − lr·v`, where `g` is the
//! cross-entropy gradient plus the `2λθ` regularization term. Rows a batch
//! never touches evolve by the fixed linear recurrence
//!
//! ```text
//! [θ']   [1 − 2λ·lr   −lr·μ] [θ]
//! [v'] = [   2λ          μ ] [v]
//! ```
//!
//! so skipped steps collapse into one 2×2 matrix power, computed by
//! repeated squaring. Rows are caught up right before they are read or
//! stepped; [`LazyMomentum::sync`] settles every row (call it before
//! evaluating or checkpointing). With every row touched every step this
//! reduces exactly to the eager update; with sparse touches it matches up
//! to the rounding difference between `μ^Δ` formed by squaring and by
//! sequential multiplication.

use std::collections::HashMap;

use crate::engine::{Grad, Gradients, ParamId, ParamStore, Tensor};

/// `v ← μ·v + g`, `θ ← θ − lr·v` applied densely, in place.
///
/// The eager reference update; the lazy optimizer must agree with a loop
/// of these (with the regularization term folded into `g` by the caller).
pub fn momentum_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    mu: f64,
) {
    assert_eq!(params.len(), grads.len(), "params/grads arity mismatch");
    assert_eq!(params.len(), velocity.len(), "params/velocity arity mismatch");
    for ((theta, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        assert_eq!(theta.shape(), g.shape(), "gradient shape mismatch");
        assert_eq!(theta.shape(), v.shape(), "velocity shape mismatch");
        for ((t, &gv), vv) in theta
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut().iter_mut())
        {
            *vv = mu * *vv + gv;
            *t -= lr * *vv;
        }
    }
}

type Mat2 = [f64; 4]; // row-major [[a, b], [c, d]] acting on [θ, v]

fn mat_mul(x: Mat2, y: Mat2) -> Mat2 {
    [
        x[0] * y[0] + x[1] * y[2],
        x[0] * y[1] + x[1] * y[3],
        x[2] * y[0] + x[3] * y[2],
        x[2] * y[1] + x[3] * y[3],
    ]
}

fn mat_pow(m: Mat2, mut n: u64) -> Mat2 {
    let mut result: Mat2 = [1.0, 0.0, 0.0, 1.0];
    let mut base = m;
    while n > 0 {
        if n & 1 == 1 {
            result = mat_mul(base, result);
        }
        base = mat_mul(base, base);
        n >>= 1;
    }
    result
}

struct ParamState {
    velocity: Tensor,
    /// Step each row was last settled at; rows follow the tensor's first
    /// dimension (1-D tensors are a single row).
    row_step: Vec<u64>,
}

pub struct LazyMomentum {
    lr: f64,
    mu: f64,
    lambda: f64,
    step: u64,
    states: Vec<ParamState>,
    decay: Mat2,
}

impl LazyMomentum {
    pub fn new(store: &ParamStore, lr: f64, mu: f64, lambda: f64) -> Self {
        let states = store
            .ids()
            .map(|pid| {
                let t = store.get(pid);
                ParamState {
                    velocity: Tensor::zeros(t.shape()),
                    row_step: vec![0; t.rows()],
                }
            })
            .collect();
        LazyMomentum {
            lr,
            mu,
            lambda,
            step: 0,
            states,
            decay: [
                1.0 - 2.0 * lambda * lr,
                -lr * mu,
                2.0 * lambda,
                mu,
            ],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn catch_up_row(
        state: &mut ParamState,
        theta: &mut Tensor,
        row: usize,
        to: u64,
        decay: Mat2,
        cache: &mut HashMap<u64, Mat2>,
    ) {
        let delta = to - state.row_step[row];
        if delta == 0 {
            return;
        }
        let m = *cache.entry(delta).or_insert_with(|| mat_pow(decay, delta));
        let trow = theta.row_mut(row);
        let vrow = state.velocity.row_mut(row);
        for (t, v) in trow.iter_mut().zip(vrow.iter_mut()) {
            let (nt, nv) = (m[0] * *t + m[1] * *v, m[2] * *t + m[3] * *v);
            *t = nt;
            *v = nv;
        }
        state.row_step[row] = to;
    }

    /// Settle the given rows of one parameter so a forward pass reads
    /// current values.
    pub fn prepare_rows(&mut self, store: &mut ParamStore, pid: ParamId, rows: &[u32]) {
        let state = &mut self.states[pid.0];
        let theta = store.get_mut(pid);
        let mut cache = HashMap::new();
        for &r in rows {
            Self::catch_up_row(state, theta, r as usize, self.step, self.decay, &mut cache);
        }
    }

    /// Settle every row of every parameter to the current step.
    pub fn sync(&mut self, store: &mut ParamStore) {
        let mut cache = HashMap::new();
        for pid in store.ids() {
            let state = &mut self.states[pid.0];
            let theta = store.get_mut(pid);
            for r in 0..state.row_step.len() {
                Self::catch_up_row(state, theta, r, self.step, self.decay, &mut cache);
            }
        }
    }

    /// One momentum step from a backward pass's gradients. Rows without a
    /// gradient stay lazily pending; rows with one are settled first, then
    /// stepped with `g + 2λθ`.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let before = self.step;
        let now = self.step + 1;
        let mut cache = HashMap::new();
        for pid in store.ids() {
            let state = &mut self.states[pid.0];
            match grads.get(pid) {
                None => {}
                Some(Grad::Dense(g)) => {
                    let theta = store.get_mut(pid);
                    assert_eq!(theta.shape(), g.shape(), "gradient shape mismatch");
                    for r in 0..state.row_step.len() {
                        Self::catch_up_row(state, theta, r, before, self.decay, &mut cache);
                        state.row_step[r] = now;
                    }
                    for ((t, &gv), v) in theta
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(state.velocity.data_mut().iter_mut())
                    {
                        *v = self.mu * *v + gv + 2.0 * self.lambda * *t;
                        *t -= self.lr * *v;
                    }
                }
                Some(Grad::Rows(rg)) => {
                    let theta = store.get_mut(pid);
                    assert_eq!(rg.width(), theta.cols(), "row gradient width mismatch");
                    for (row, gvals) in rg.iter() {
                        let r = row as usize;
                        Self::catch_up_row(state, theta, r, before, self.decay, &mut cache);
                        state.row_step[r] = now;
                        let trow = theta.row_mut(r);
                        let vrow = state.velocity.row_mut(r);
                        for ((t, &gv), v) in trow.iter_mut().zip(gvals).zip(vrow.iter_mut()) {
                            *v = self.mu * *v + gv + 2.0 * self.lambda * *t;
                            *t -= self.lr * *v;
                        }
                    }
                }
            }
        }
        self.step = now;
    }
}
