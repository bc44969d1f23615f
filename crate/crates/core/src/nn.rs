//! Shared neural building blocks: linear layers, affine layer norm, and
//! multi-head attention over batched token sets.

use crate::autodiff::{Graph, NodeId, Scalar};
use crate::params::{ones, xavier_uniform, zeros, ParamId, ParamStore};
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn init<F: Scalar>(
        ps: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = ps.register(
            &format!("{name}.w"),
            xavier_uniform(rng, d_in, d_out, &[d_in, d_out]),
        );
        let b = ps.register(&format!("{name}.b"), zeros(&[d_out]));
        LinearParams { w, b }
    }

    /// Zero-initialized weights and bias (identity-at-init heads, gates).
    pub fn init_zero<F: Scalar>(
        ps: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = ps.register(&format!("{name}.w"), zeros(&[d_in, d_out]));
        let b = ps.register(&format!("{name}.b"), zeros(&[d_out]));
        LinearParams { w, b }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, x: NodeId) -> NodeId {
        let w = ps.node(g, self.w);
        let b = ps.node(g, self.b);
        let y = g.matmul_last(x, w);
        g.add_bcast_last(y, b)
    }
}

/// Layer norm with learned per-feature scale and shift.
#[derive(Debug, Clone, Copy)]
pub struct LnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LnParams {
    pub fn init<F: Scalar>(ps: &mut ParamStore<F>, name: &str, d: usize) -> Self {
        let gamma = ps.register(&format!("{name}.g"), ones(&[d]));
        let beta = ps.register(&format!("{name}.b"), zeros(&[d]));
        LnParams { gamma, beta }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, x: NodeId) -> NodeId {
        let n = g.layer_norm_last(x, LN_EPS);
        let gm = ps.node(g, self.gamma);
        let bt = ps.node(g, self.beta);
        let scaled = g.mul_bcast_last(n, gm);
        g.add_bcast_last(scaled, bt)
    }
}

/// Two-layer feed-forward with GELU.
#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl FfnParams {
    pub fn init<F: Scalar>(
        ps: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        hidden: usize,
    ) -> Self {
        FfnParams {
            fc1: LinearParams::init(ps, rng, &format!("{name}.fc1"), d, hidden),
            fc2: LinearParams::init(ps, rng, &format!("{name}.fc2"), hidden, d),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, x: NodeId) -> NodeId {
        let h = self.fc1.forward(g, ps, x);
        let h = g.gelu(h);
        self.fc2.forward(g, ps, h)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone, Copy)]
pub struct MhaParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
}

impl MhaParams {
    pub fn init<F: Scalar>(
        ps: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
    ) -> Self {
        MhaParams {
            q: LinearParams::init(ps, rng, &format!("{name}.q"), d, d),
            k: LinearParams::init(ps, rng, &format!("{name}.k"), d, d),
            v: LinearParams::init(ps, rng, &format!("{name}.v"), d, d),
            o: LinearParams::init(ps, rng, &format!("{name}.o"), d, d),
        }
    }

    /// Attention from `q_in` `(B, n, D)` over `kv_in` `(B, m, D)`.
    ///
    /// `logit_bias`, when present, is a learned `(n, m)` node added to every
    /// batch element's logits. `mask`, when present, is a constant
    /// `(B·heads, n, m)` additive array (0 or large negative).
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        q_in: NodeId,
        kv_in: NodeId,
        heads: usize,
        logit_bias: Option<NodeId>,
        mask: Option<&ArrayD<F>>,
    ) -> NodeId {
        let (b, n, d) = {
            let s = g.shape(q_in);
            (s[0], s[1], s[2])
        };
        let m = g.shape(kv_in)[1];
        assert_eq!(d % heads, 0, "feature dim {d} not divisible by {heads} heads");
        let dh = d / heads;

        let split = |g: &mut Graph<F>, x: NodeId, len: usize| -> NodeId {
            let r = g.reshape(x, &[b, len, heads, dh]);
            let p = g.permute(r, &[0, 2, 1, 3]);
            g.reshape(p, &[b * heads, len, dh])
        };
        let q = self.q.forward(g, ps, q_in);
        let q = split(g, q, n);
        let k = self.k.forward(g, ps, kv_in);
        let k = split(g, k, m);
        let v = self.v.forward(g, ps, kv_in);
        let v = split(g, v, m);

        let scores = g.bmm_nt(q, k);
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut scores = g.scale(scores, scale);
        if let Some(bias) = logit_bias {
            scores = g.add_bcast0(scores, bias);
        }
        if let Some(mask) = mask {
            scores = g.add_const(scores, mask);
        }
        let attn = g.softmax_last(scores);
        let ctx = g.bmm(attn, v);
        let ctx = g.reshape(ctx, &[b, heads, n, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[b, n, d]);
        self.o.forward(g, ps, ctx)
    }

    /// As [`MhaParams::forward`] but also returns the attention weights
    /// node (`(B·heads, n, m)`, rows summing to 1).
    pub fn forward_with_weights<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        q_in: NodeId,
        kv_in: NodeId,
        heads: usize,
        logit_bias: Option<NodeId>,
        mask: Option<&ArrayD<F>>,
    ) -> (NodeId, NodeId) {
        let (b, n, d) = {
            let s = g.shape(q_in);
            (s[0], s[1], s[2])
        };
        let m = g.shape(kv_in)[1];
        let dh = d / heads;
        let split = |g: &mut Graph<F>, x: NodeId, len: usize| -> NodeId {
            let r = g.reshape(x, &[b, len, heads, dh]);
            let p = g.permute(r, &[0, 2, 1, 3]);
            g.reshape(p, &[b * heads, len, dh])
        };
        let q = self.q.forward(g, ps, q_in);
        let q = split(g, q, n);
        let k = self.k.forward(g, ps, kv_in);
        let k = split(g, k, m);
        let v = self.v.forward(g, ps, kv_in);
        let v = split(g, v, m);
        let scores = g.bmm_nt(q, k);
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut scores = g.scale(scores, scale);
        if let Some(bias) = logit_bias {
            scores = g.add_bcast0(scores, bias);
        }
        if let Some(mask) = mask {
            scores = g.add_const(scores, mask);
        }
        let attn = g.softmax_last(scores);
        let ctx = g.bmm(attn, v);
        let ctx = g.reshape(ctx, &[b, heads, n, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[b, n, d]);
        (self.o.forward(g, ps, ctx), attn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_inputs;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};

    #[test]
    fn linear_matches_manual_product() {
        let mut ps: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = LinearParams::init(&mut ps, &mut rng, "t", 3, 2);
        let mut g = Graph::new();
        let x = g.leaf(ndarray::arr2(&[[1.0, 2.0, 3.0]]).into_dyn());
        let y = lin.forward(&mut g, &ps, x);
        let w = ps.value(lin.w);
        let manual: Vec<f64> = (0..2)
            .map(|j| (0..3).map(|i| ndarray::arr2(&[[1.0, 2.0, 3.0]])[[0, i]] * w[[i, j]]).sum())
            .collect();
        for (a, b) in g.value(y).iter().zip(manual) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut ps: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mha = MhaParams::init(&mut ps, &mut rng, "attn", 8);
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 5 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = g.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 5, 8]), data).unwrap());
        let (_, attn) = mha.forward_with_weights(&mut g, &ps, x, x, 2, None, None);
        let w = g.value(attn);
        for row in w.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_tokens_give_uniform_attention() {
        let mut ps: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mha = MhaParams::init(&mut ps, &mut rng, "attn", 8);
        let mut g = Graph::new();
        let one_token: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data: Vec<f64> = one_token.iter().cycle().take(6 * 8).copied().collect();
        let x = g.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 6, 8]), data).unwrap());
        let (_, attn) = mha.forward_with_weights(&mut g, &ps, x, x, 2, None, None);
        for &w in g.value(attn).iter() {
            assert!((w - 1.0 / 6.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_value_projection_outputs_zero() {
        let mut ps: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MhaParams::init(&mut ps, &mut rng, "attn", 8);
        ps.set(mha.v.w, ArrayD::zeros(ps.value(mha.v.w).raw_dim()));
        ps.set(mha.v.b, ArrayD::zeros(IxDyn(&[8])));
        let mut g = Graph::new();
        let data: Vec<f64> = (0..3 * 4 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = g.leaf(ArrayD::from_shape_vec(IxDyn(&[3, 4, 8]), data).unwrap());
        let out = mha.forward(&mut g, &ps, x, x, 2, None, None);
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mha_gradients_match_finite_differences() {
        // check input gradients through the full attention composite
        let mut ps: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mha = MhaParams::init(&mut ps, &mut rng, "attn", 4);
        let data: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let input = ArrayD::from_shape_vec(IxDyn(&[2, 3, 4]), data).unwrap();
        let report = check_inputs(
            &|g, xs| {
                let y = mha.forward(g, &ps, xs[0], xs[0], 2, None, None);
                g.mean_all(y)
            },
            &[input],
            1e-5,
        );
        assert!(report.max_rel_err < 1e-6, "err {}", report.max_rel_err);
    }
}
