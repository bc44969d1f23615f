//! Condition-modulated dense decoding.
//!
//! Spatial feature tokens are fused with the condition vector through
//! adaptive layer normalization: per block, a zero-initialized projection
//! of the condition regresses scale/shift/gate vectors, so every block is
//! the identity at initialization and the conditioning pathway grows in
//! during training. A linear head emits one logit per token, reshaped and
//! bilinearly upsampled to the annotation frame geometry.
//!
//! The cross-attention variant replaces modulation with attention from
//! feature tokens to a small set of projected condition tokens.

use crate::autodiff::{Graph, NodeId, Scalar};
use crate::encoder::FeatureMap;
use crate::error::{CoreError, Result};
use crate::nn::{FfnParams, LinearParams, LnParams, MhaParams, LN_EPS};
use crate::params::{normal_init, ParamId, ParamStore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Token width of the decoder.
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub cond_dim: usize,
    /// Residual gates regressed from the condition (adaLN-Zero).
    pub use_gating: bool,
    /// Modulate once more before the head.
    pub final_modulation: bool,
    /// Condition tokens for the cross-attention variant.
    pub cond_tokens: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            dim: 64,
            depth: 2,
            heads: 2,
            ffn_mult: 4,
            cond_dim: 64,
            use_gating: true,
            final_modulation: true,
            cond_tokens: 4,
        }
    }
}

/// `LayerNorm(x) ⊙ (1 + γ) + β` per token; normalization is affine-free,
/// the affine lives entirely in (γ, β).
pub fn modulate<F: Scalar>(g: &mut Graph<F>, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
    let n = g.layer_norm_last(x, LN_EPS);
    let scale = g.add_scalar(gamma, F::one());
    let scaled = g.mul_bcast_last(n, scale);
    g.add_bcast_last(scaled, beta)
}

/// SiLU + linear regression of `rows` modulation vectors from the condition.
fn cond_rows<F: Scalar>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    lin: &LinearParams,
    cond: NodeId,
    rows: usize,
    d: usize,
) -> NodeId {
    let dc = g.shape(cond)[0];
    let s = g.silu(cond);
    let s2 = g.reshape(s, &[1, dc]);
    let m = lin.forward(g, ps, s2);
    g.reshape(m, &[rows, d])
}

pub struct AdaLnBlockParams {
    /// Zero-initialized: condition -> (γ1, β1, g1, γ2, β2, g2).
    pub cond_mlp: LinearParams,
    pub attn: MhaParams,
    pub ffn: FfnParams,
}

pub struct AdaLnDecoderParams {
    cfg: DecoderConfig,
    in_proj: LinearParams,
    pos: ParamId,
    blocks: Vec<AdaLnBlockParams>,
    /// Zero-initialized: condition -> (γf, βf).
    final_mod: LinearParams,
    head: LinearParams,
    n_tokens: usize,
}

impl AdaLnDecoderParams {
    pub fn init<F: Scalar>(
        ps: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        cfg: DecoderConfig,
        feat_dim: usize,
        grid_h: usize,
        grid_w: usize,
    ) -> Self {
        let d = cfg.dim;
        let n_tokens = grid_h * grid_w;
        let in_proj = LinearParams::init(ps, rng, "dec.in", feat_dim, d);
        let pos = ps.register("dec.pos", normal_init(rng, 0.02, &[n_tokens, d]));
        let blocks = (0..cfg.depth)
            .map(|bi| AdaLnBlockParams {
                cond_mlp: LinearParams::init_zero(
                    ps,
                    &format!("dec.b{bi}.cond_mlp"),
                    cfg.cond_dim,
                    6 * d,
                ),
                attn: MhaParams::init(ps, rng, &format!("dec.b{bi}.attn"), d),
                ffn: FfnParams::init(ps, rng, &format!("dec.b{bi}.ffn"), d, d * cfg.ffn_mult),
            })
            .collect();
        let final_mod = LinearParams::init_zero(ps, "dec.final_mod", cfg.cond_dim, 2 * d);
        let head = LinearParams::init_zero(ps, "dec.head", d, 1);
        AdaLnDecoderParams {
            cfg,
            in_proj,
            pos,
            blocks,
            final_mod,
            head,
            n_tokens,
        }
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Per-pixel logits at `(out_h, out_w)`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        features: &FeatureMap,
        cond: NodeId,
        out_h: usize,
        out_w: usize,
    ) -> Result<NodeId> {
        if g.shape(cond) != [self.cfg.cond_dim] {
            return Err(CoreError::config(format!(
                "condition dimension {:?} does not match decoder cond_dim {}",
                g.shape(cond),
                self.cfg.cond_dim
            )));
        }
        let n = features.h * features.w;
        if n != self.n_tokens {
            return Err(CoreError::config(format!(
                "feature grid {}x{} does not match decoder token count {}",
                features.h, features.w, self.n_tokens
            )));
        }
        let d = self.cfg.dim;
        let flat = g.reshape(features.node, &[n, features.dim]);
        let mut x = self.in_proj.forward(g, ps, flat);
        let pos = ps.node(g, self.pos);
        x = g.add(x, pos);

        for (bi, block) in self.blocks.iter().enumerate() {
            let m = cond_rows(g, ps, &block.cond_mlp, cond, 6, d);
            let gamma1 = g.row(m, 0);
            let beta1 = g.row(m, 1);
            let gate1 = g.row(m, 2);
            let gamma2 = g.row(m, 3);
            let beta2 = g.row(m, 4);
            let gate2 = g.row(m, 5);

            let h = modulate(g, x, gamma1, beta1);
            let h3 = g.reshape(h, &[1, n, d]);
            let attn = block
                .attn
                .forward(g, ps, h3, h3, self.cfg.heads, None, None);
            let attn = g.reshape(attn, &[n, d]);
            let contribution = if self.cfg.use_gating {
                g.mul_bcast_last(attn, gate1)
            } else {
                attn
            };
            x = g.add(x, contribution);

            let h2 = modulate(g, x, gamma2, beta2);
            let f = block.ffn.forward(g, ps, h2);
            let contribution = if self.cfg.use_gating {
                g.mul_bcast_last(f, gate2)
            } else {
                f
            };
            x = g.add(x, contribution);
            if !g.all_finite(x) {
                return Err(CoreError::numeric(format!(
                    "non-finite activations after decoder block {bi}"
                )));
            }
        }

        let pre_head = if self.cfg.final_modulation {
            let m = cond_rows(g, ps, &self.final_mod, cond, 2, d);
            let gamma = g.row(m, 0);
            let beta = g.row(m, 1);
            modulate(g, x, gamma, beta)
        } else {
            g.layer_norm_last(x, LN_EPS)
        };
        let logits = self.head.forward(g, ps, pre_head);
        let grid = g.reshape(logits, &[features.h, features.w]);
        Ok(g.upsample_bilinear2d(grid, out_h, out_w))
    }
}

pub struct XattnBlockParams {
    pub ln1: LnParams,
    pub self_attn: MhaParams,
    pub ln2: LnParams,
    pub cross_attn: MhaParams,
    pub ln3: LnParams,
    pub ffn: FfnParams,
}

/// Ablation decoder: conditioning enters via cross-attention from feature
/// tokens (queries) to projected condition tokens (keys/values).
pub struct XattnDecoderParams {
    cfg: DecoderConfig,
    in_proj: LinearParams,
    pos: ParamId,
    cond_proj: LinearParams,
    blocks: Vec<XattnBlockParams>,
    final_ln: LnParams,
    head: LinearParams,
    n_tokens: usize,
}

impl XattnDecoderParams {
    pub fn init<F: Scalar>(
        ps: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        cfg: DecoderConfig,
        feat_dim: usize,
        grid_h: usize,
        grid_w: usize,
    ) -> Self {
        let d = cfg.dim;
        let n_tokens = grid_h * grid_w;
        let in_proj = LinearParams::init(ps, rng, "dec.in", feat_dim, d);
        let pos = ps.register("dec.pos", normal_init(rng, 0.02, &[n_tokens, d]));
        let cond_proj = LinearParams::init(
            ps,
            rng,
            "dec.cond_proj",
            cfg.cond_dim,
            cfg.cond_tokens * d,
        );
        let blocks = (0..cfg.depth)
            .map(|bi| {
                let name = format!("dec.b{bi}");
                XattnBlockParams {
                    ln1: LnParams::init(ps, &format!("{name}.ln1"), d),
                    self_attn: MhaParams::init(ps, rng, &format!("{name}.self"), d),
                    ln2: LnParams::init(ps, &format!("{name}.ln2"), d),
                    cross_attn: MhaParams::init(ps, rng, &format!("{name}.cross"), d),
                    ln3: LnParams::init(ps, &format!("{name}.ln3"), d),
                    ffn: FfnParams::init(ps, rng, &format!("{name}.ffn"), d, d * cfg.ffn_mult),
                }
            })
            .collect();
        let final_ln = LnParams::init(ps, "dec.final_ln", d);
        let head = LinearParams::init_zero(ps, "dec.head", d, 1);
        XattnDecoderParams {
            cfg,
            in_proj,
            pos,
            cond_proj,
            blocks,
            final_ln,
            head,
            n_tokens,
        }
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        features: &FeatureMap,
        cond: NodeId,
        out_h: usize,
        out_w: usize,
    ) -> Result<NodeId> {
        if g.shape(cond) != [self.cfg.cond_dim] {
            return Err(CoreError::config(format!(
                "condition dimension {:?} does not match decoder cond_dim {}",
                g.shape(cond),
                self.cfg.cond_dim
            )));
        }
        let n = features.h * features.w;
        if n != self.n_tokens {
            return Err(CoreError::config(format!(
                "feature grid {}x{} does not match decoder token count {}",
                features.h, features.w, self.n_tokens
            )));
        }
        let d = self.cfg.dim;
        let k = self.cfg.cond_tokens;
        let dc = self.cfg.cond_dim;

        let c2 = g.reshape(cond, &[1, dc]);
        let ct = self.cond_proj.forward(g, ps, c2);
        let cond_tokens = g.reshape(ct, &[1, k, d]);

        let flat = g.reshape(features.node, &[n, features.dim]);
        let mut x = self.in_proj.forward(g, ps, flat);
        let pos = ps.node(g, self.pos);
        x = g.add(x, pos);

        for (bi, block) in self.blocks.iter().enumerate() {
            let h = block.ln1.forward(g, ps, x);
            let h3 = g.reshape(h, &[1, n, d]);
            let sa = block
                .self_attn
                .forward(g, ps, h3, h3, self.cfg.heads, None, None);
            let sa = g.reshape(sa, &[n, d]);
            x = g.add(x, sa);

            let h = block.ln2.forward(g, ps, x);
            let h3 = g.reshape(h, &[1, n, d]);
            let ca = block
                .cross_attn
                .forward(g, ps, h3, cond_tokens, self.cfg.heads, None, None);
            let ca = g.reshape(ca, &[n, d]);
            x = g.add(x, ca);

            let h = block.ln3.forward(g, ps, x);
            let f = block.ffn.forward(g, ps, h);
            x = g.add(x, f);
            if !g.all_finite(x) {
                return Err(CoreError::numeric(format!(
                    "non-finite activations after cross-attention decoder block {bi}"
                )));
            }
        }
        let h = self.final_ln.forward(g, ps, x);
        let logits = self.head.forward(g, ps, h);
        let grid = g.reshape(logits, &[features.h, features.w]);
        Ok(g.upsample_bilinear2d(grid, out_h, out_w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_inputs;
    use ndarray::{ArrayD, Dimension, IxDyn};
    use rand::{Rng, SeedableRng};

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn modulate_with_zero_gamma_beta_is_plain_layernorm() {
        let mut g: Graph<f64> = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = g.leaf(rand_arr(&[5, 8], &mut rng));
        let zero = g.leaf(ArrayD::zeros(IxDyn(&[8])));
        let m = modulate(&mut g, x, zero, zero);
        let ln = g.layer_norm_last(x, LN_EPS);
        assert_eq!(g.value(m), g.value(ln));
    }

    #[test]
    fn modulate_constant_tokens_broadcast_beta() {
        let mut g: Graph<f64> = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[3, 6]), 2.5));
        let gamma = g.leaf(rand_arr(&[6], &mut rng));
        let beta_arr = rand_arr(&[6], &mut rng);
        let beta = g.leaf(beta_arr.clone());
        let m = modulate(&mut g, x, gamma, beta);
        for token in g.value(m).rows() {
            for (v, b) in token.iter().zip(beta_arr.iter()) {
                assert!((v - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn modulate_inverse_recovers_zero_mean() {
        let mut g: Graph<f64> = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = g.leaf(rand_arr(&[4, 16], &mut rng));
        let gamma_arr = rand_arr(&[16], &mut rng).mapv(|v| v * 0.5);
        let beta_arr = rand_arr(&[16], &mut rng);
        let gamma = g.leaf(gamma_arr.clone());
        let beta = g.leaf(beta_arr.clone());
        let m = modulate(&mut g, x, gamma, beta);
        // per-token mean of (out - beta) / (1 + gamma) is the layernorm
        // output mean, which is 0
        for token in g.value(m).rows() {
            let mean: f64 = token
                .iter()
                .zip(beta_arr.iter())
                .zip(gamma_arr.iter())
                .map(|((v, b), gm)| (v - b) / (1.0 + gm))
                .sum::<f64>()
                / 16.0;
            assert!(mean.abs() < 1e-10, "token mean {mean}");
        }
    }

    fn tiny_setup(
        seed: u64,
        cfg: DecoderConfig,
    ) -> (ParamStore<f64>, AdaLnDecoderParams, ChaCha8Rng) {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dec = AdaLnDecoderParams::init(&mut ps, &mut rng, cfg, 16, 4, 4);
        (ps, dec, rng)
    }

    #[test]
    fn zero_init_gates_and_head_force_zero_logits() {
        let cfg = DecoderConfig {
            dim: 8,
            depth: 2,
            heads: 2,
            ffn_mult: 2,
            cond_dim: 8,
            ..DecoderConfig::default()
        };
        let (ps, dec, mut rng) = tiny_setup(3, cfg);
        let mut g = Graph::new();
        let feat = g.leaf(rand_arr(&[4, 4, 16], &mut rng));
        let fm = FeatureMap {
            node: feat,
            h: 4,
            w: 4,
            dim: 16,
        };
        let cond = g.leaf(rand_arr(&[8], &mut rng));
        let logits = dec.forward(&mut g, &ps, &fm, cond, 32, 32).unwrap();
        assert_eq!(g.shape(logits), &[32, 32]);
        assert!(g.value(logits).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blocks_are_identity_at_init() {
        // with zero-initialized condition projections, block output equals
        // the positional-embedded input tokens regardless of cond
        let cfg = DecoderConfig {
            dim: 8,
            depth: 3,
            heads: 2,
            ffn_mult: 2,
            cond_dim: 8,
            final_modulation: false,
            ..DecoderConfig::default()
        };
        let (ps, dec, mut rng) = tiny_setup(4, cfg);
        let mut g = Graph::new();
        let feat_arr = rand_arr(&[4, 4, 16], &mut rng);
        let feat = g.leaf(feat_arr.clone());
        let fm = FeatureMap {
            node: feat,
            h: 4,
            w: 4,
            dim: 16,
        };
        let cond_a = g.leaf(rand_arr(&[8], &mut rng));
        let cond_b = g.leaf(rand_arr(&[8], &mut rng));
        let la = dec.forward(&mut g, &ps, &fm, cond_a, 16, 16).unwrap();
        let lb = dec.forward(&mut g, &ps, &fm, cond_b, 16, 16).unwrap();
        // identical outputs for different conditions: conditioning is gated off
        assert_eq!(g.value(la), g.value(lb));
    }

    #[test]
    fn decoder_shape_contract() {
        let cfg = DecoderConfig {
            dim: 16,
            depth: 1,
            heads: 2,
            ffn_mult: 2,
            cond_dim: 12,
            ..DecoderConfig::default()
        };
        let mut ps: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dec = AdaLnDecoderParams::init(&mut ps, &mut rng, cfg, 64, 8, 8);
        let mut g = Graph::new();
        let feat = g.leaf(rand_arr(&[8, 8, 64], &mut rng));
        let fm = FeatureMap {
            node: feat,
            h: 8,
            w: 8,
            dim: 64,
        };
        let cond = g.leaf(rand_arr(&[12], &mut rng));
        let logits = dec.forward(&mut g, &ps, &fm, cond, 64, 64).unwrap();
        assert_eq!(g.shape(logits), &[64, 64]);
    }

    #[test]
    fn mean_logit_gradient_wrt_cond_matches_finite_differences() {
        let cfg = DecoderConfig {
            dim: 8,
            depth: 2,
            heads: 2,
            ffn_mult: 2,
            cond_dim: 6,
            ..DecoderConfig::default()
        };
        let mut ps: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut dec = AdaLnDecoderParams::init(&mut ps, &mut rng, cfg, 8, 3, 3);
        // non-zero modulation so the condition actually matters
        for block in &dec.blocks {
            let shape = ps.value(block.cond_mlp.w).raw_dim();
            let n: usize = shape.size();
            let w = ArrayD::from_shape_vec(
                shape,
                (0..n).map(|_| rng.random_range(-0.3..0.3)).collect::<Vec<f64>>(),
            )
            .unwrap();
            ps.set(block.cond_mlp.w, w);
        }
        {
            let shape = ps.value(dec.head.w).raw_dim();
            let n: usize = shape.size();
            ps.set(
                dec.head.w,
                ArrayD::from_shape_vec(
                    shape,
                    (0..n).map(|_| rng.random_range(-0.3..0.3)).collect::<Vec<f64>>(),
                )
                .unwrap(),
            );
        }
        dec.cfg.final_modulation = true;
        let feat_arr = rand_arr(&[3, 3, 8], &mut rng);
        let cond_arr = rand_arr(&[6], &mut rng);
        let ps_ref = &ps;
        let dec_ref = &dec;
        let feat_ref = &feat_arr;
        let report = check_inputs(
            &move |g, xs| {
                let feat = g.leaf(feat_ref.clone());
                let fm = FeatureMap {
                    node: feat,
                    h: 3,
                    w: 3,
                    dim: 8,
                };
                let logits = dec_ref.forward(g, ps_ref, &fm, xs[0], 12, 12).unwrap();
                g.mean_all(logits)
            },
            &[cond_arr],
            1e-5,
        );
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn xattn_decoder_shape_contract_and_zero_value_projection() {
        let cfg = DecoderConfig {
            dim: 8,
            depth: 2,
            heads: 2,
            ffn_mult: 2,
            cond_dim: 6,
            cond_tokens: 3,
            ..DecoderConfig::default()
        };
        let mut ps: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dec = XattnDecoderParams::init(&mut ps, &mut rng, cfg, 16, 4, 4);
        let mut g = Graph::new();
        let feat_arr = rand_arr(&[4, 4, 16], &mut rng);
        let feat = g.leaf(feat_arr.clone());
        let fm = FeatureMap {
            node: feat,
            h: 4,
            w: 4,
            dim: 16,
        };
        let cond = g.leaf(rand_arr(&[6], &mut rng));
        let logits = dec.forward(&mut g, &ps, &fm, cond, 32, 32).unwrap();
        assert_eq!(g.shape(logits), &[32, 32]);

        // zero the cross-attention value projections: different conditions
        // must no longer change the output
        for block in &dec.blocks {
            ps.set(
                block.cross_attn.v.w,
                ArrayD::zeros(ps.value(block.cross_attn.v.w).raw_dim()),
            );
            ps.set(
                block.cross_attn.v.b,
                ArrayD::zeros(ps.value(block.cross_attn.v.b).raw_dim()),
            );
        }
        let mut g = Graph::new();
        let feat = g.leaf(feat_arr.clone());
        let fm = FeatureMap {
            node: feat,
            h: 4,
            w: 4,
            dim: 16,
        };
        let ca = g.leaf(rand_arr(&[6], &mut rng));
        let cb = g.leaf(rand_arr(&[6], &mut rng));
        let la = dec.forward(&mut g, &ps, &fm, ca, 16, 16).unwrap();
        let lb = dec.forward(&mut g, &ps, &fm, cb, 16, 16).unwrap();
        assert_eq!(g.value(la), g.value(lb));
    }

    #[test]
    fn xattn_gradient_wrt_cond_matches_finite_differences() {
        let cfg = DecoderConfig {
            dim: 8,
            depth: 1,
            heads: 2,
            ffn_mult: 2,
            cond_dim: 5,
            cond_tokens: 2,
            ..DecoderConfig::default()
        };
        let mut ps: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dec = XattnDecoderParams::init(&mut ps, &mut rng, cfg, 8, 3, 3);
        {
            let shape = ps.value(dec.head.w).raw_dim();
            let n: usize = shape.size();
            ps.set(
                dec.head.w,
                ArrayD::from_shape_vec(
                    shape,
                    (0..n).map(|_| rng.random_range(-0.3..0.3)).collect::<Vec<f64>>(),
                )
                .unwrap(),
            );
        }
        let feat_arr = rand_arr(&[3, 3, 8], &mut rng);
        let cond_arr = rand_arr(&[5], &mut rng);
        let ps_ref = &ps;
        let dec_ref = &dec;
        let feat_ref = &feat_arr;
        let report = check_inputs(
            &move |g, xs| {
                let feat = g.leaf(feat_ref.clone());
                let fm = FeatureMap {
                    node: feat,
                    h: 3,
                    w: 3,
                    dim: 8,
                };
                let logits = dec_ref.forward(g, ps_ref, &fm, xs[0], 9, 9).unwrap();
                g.mean_all(logits)
            },
            &[cond_arr],
            1e-5,
        );
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst
        );
    }
}
