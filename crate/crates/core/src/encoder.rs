//! Temporal clip encoding: 3D patch embedding, window attention with
//! cyclically shifted window grids on alternating blocks, spatial patch
//! merging between stages, and temporal mean pooling down to a 2D feature
//! map. A 3D-convolutional residual encoder with the same output geometry
//! is provided as the alternative-backbone ablation.

use crate::autodiff::{Graph, NodeId, Scalar};
use crate::error::{CoreError, Result};
use crate::framestore::ClipFrames;
use crate::nn::{FfnParams, LinearParams, LnParams, MhaParams};
use crate::params::{xavier_uniform, zeros, ParamId, ParamStore};
use ndarray::{Array3, Array4, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A temporal window of frames feeding one prediction. The target frame
/// occupies the final slot; preceding slots step backwards by `stride`,
/// left-padded with frame 0 when history is short.
#[derive(Debug, Clone)]
pub struct ClipWindow<F: Scalar> {
    /// `(T, H, W, 3)` with values in [0, 1].
    pub frames: Array4<F>,
    /// Source frame index of each slot (non-decreasing).
    pub source_indices: Vec<usize>,
    pub stride: usize,
}

impl<F: Scalar> ClipWindow<F> {
    pub fn target_index(&self) -> usize {
        *self.source_indices.last().expect("window is non-empty")
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The frame indices `{t0 - (N-1)s, ..., t0 - s, t0}` with negative
/// positions replaced by frame 0.
pub fn window_indices(t0: usize, n: usize, stride: usize) -> Result<Vec<usize>> {
    if n < 1 || stride < 1 {
        return Err(CoreError::config(format!(
            "clip window needs N >= 1 and stride >= 1, got N={n} stride={stride}"
        )));
    }
    Ok((0..n)
        .map(|k| {
            let back = (n - 1 - k) * stride;
            t0.saturating_sub(back)
        })
        .collect())
}

/// Assemble a normalized clip window from raw frames.
pub fn build_clip_window<F: Scalar>(
    clip: &ClipFrames,
    t0: usize,
    n: usize,
    stride: usize,
) -> Result<ClipWindow<F>> {
    if t0 >= clip.frame_count() {
        return Err(CoreError::validation(format!(
            "target frame {t0} outside clip of {} frames",
            clip.frame_count()
        )));
    }
    let indices = window_indices(t0, n, stride)?;
    let (h, w) = (clip.height(), clip.width());
    let scale = F::from_f64(1.0 / 255.0);
    let mut frames = Array4::zeros((n, h, w, 3));
    for (slot, &src) in indices.iter().enumerate() {
        let frame = clip.data.index_axis(ndarray::Axis(0), src);
        frames
            .index_axis_mut(ndarray::Axis(0), slot)
            .assign(&frame.mapv(|v| F::from_f64(v as f64) * scale));
    }
    Ok(ClipWindow {
        frames,
        source_indices: indices,
        stride,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwinEncoderConfig {
    pub in_channels: usize,
    /// 3D patch size (t, h, w).
    pub patch: (usize, usize, usize),
    /// Width of the first stage; doubles at each patch merge.
    pub embed_dim: usize,
    /// Blocks per stage (alternating regular/shifted).
    pub depths: Vec<usize>,
    /// Attention heads per stage.
    pub heads: Vec<usize>,
    /// 3D attention window (t, h, w), clamped to the token grid.
    pub window: (usize, usize, usize),
}

impl Default for SwinEncoderConfig {
    fn default() -> Self {
        SwinEncoderConfig {
            in_channels: 3,
            patch: (2, 4, 4),
            embed_dim: 32,
            depths: vec![2, 2],
            heads: vec![2, 2],
            window: (2, 4, 4),
        }
    }
}

impl SwinEncoderConfig {
    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    /// Channel width of the final stage.
    pub fn out_dim(&self) -> usize {
        self.embed_dim << (self.stages() - 1)
    }

    /// Spatial reduction factor from frame pixels to output feature cells.
    pub fn spatial_reduction(&self) -> (usize, usize) {
        let f = 1usize << (self.stages() - 1);
        (self.patch.1 * f, self.patch.2 * f)
    }

    pub fn out_grid(&self, frame_h: usize, frame_w: usize) -> Result<(usize, usize)> {
        let (rh, rw) = self.spatial_reduction();
        if frame_h % rh != 0 || frame_w % rw != 0 {
            return Err(CoreError::config(format!(
                "frame {frame_h}x{frame_w} not divisible by total reduction {rh}x{rw}"
            )));
        }
        Ok((frame_h / rh, frame_w / rw))
    }
}

struct SwinBlockParams {
    ln1: LnParams,
    attn: MhaParams,
    /// Learned additive logit bias shared by all windows of the block.
    attn_bias: ParamId,
    ln2: LnParams,
    ffn: FfnParams,
    shifted: bool,
}

struct PatchMergeParams {
    ln: LnParams,
    reduce: LinearParams,
}

/// Parameters of the shifted-window encoder.
pub struct SwinEncoderParams {
    cfg: SwinEncoderConfig,
    patch_proj: LinearParams,
    patch_ln: LnParams,
    stages: Vec<Vec<SwinBlockParams>>,
    merges: Vec<PatchMergeParams>,
    final_ln: LnParams,
}

/// Encoded spatial features: a `(h, w, dim)` token grid node.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub node: NodeId,
    pub h: usize,
    pub w: usize,
    pub dim: usize,
}

fn effective_window(grid: usize, window: usize) -> usize {
    window.min(grid).max(1)
}

fn shift_for(grid: usize, window: usize) -> usize {
    // no shift when one window spans the whole axis
    if grid > window {
        window / 2
    } else {
        0
    }
}

/// Region labels for the shifted-window attention mask. Tokens whose
/// labels differ may not attend to each other after the cyclic shift.
fn shift_region_labels(grid: (usize, usize, usize), window: (usize, usize, usize), shift: (usize, usize, usize)) -> Array3<u32> {
    let seg = |size: usize, w: usize, s: usize, i: usize| -> u32 {
        if s == 0 {
            0
        } else if i < size - w {
            0
        } else if i < size - s {
            1
        } else {
            2
        }
    };
    let mut labels = Array3::zeros((grid.0, grid.1, grid.2));
    for t in 0..grid.0 {
        for y in 0..grid.1 {
            for x in 0..grid.2 {
                let lt = seg(grid.0, window.0, shift.0, t);
                let lh = seg(grid.1, window.1, shift.1, y);
                let lw = seg(grid.2, window.2, shift.2, x);
                labels[[t, y, x]] = (lt * 3 + lh) * 3 + lw;
            }
        }
    }
    labels
}

/// Additive attention mask `(n_windows * heads, win_len, win_len)` for a
/// shifted block; `None` when no axis actually shifts.
fn shifted_window_mask<F: Scalar>(
    grid: (usize, usize, usize),
    window: (usize, usize, usize),
    shift: (usize, usize, usize),
    heads: usize,
) -> Option<ArrayD<F>> {
    if shift == (0, 0, 0) {
        return None;
    }
    let labels = shift_region_labels(grid, window, shift);
    let (nt, nh, nw) = (grid.0 / window.0, grid.1 / window.1, grid.2 / window.2);
    let win_len = window.0 * window.1 * window.2;
    let n_win = nt * nh * nw;
    let mut window_labels = vec![0u32; n_win * win_len];
    for wt in 0..nt {
        for wh in 0..nh {
            for ww in 0..nw {
                let win = (wt * nh + wh) * nw + ww;
                let mut cursor = 0;
                for it in 0..window.0 {
                    for ih in 0..window.1 {
                        for iw in 0..window.2 {
                            window_labels[win * win_len + cursor] = labels[[
                                wt * window.0 + it,
                                wh * window.1 + ih,
                                ww * window.2 + iw,
                            ]];
                            cursor += 1;
                        }
                    }
                }
            }
        }
    }
    let neg = F::from_f64(-1e9);
    let mut mask = ArrayD::zeros(IxDyn(&[n_win * heads, win_len, win_len]));
    for win in 0..n_win {
        for i in 0..win_len {
            for j in 0..win_len {
                if window_labels[win * win_len + i] != window_labels[win * win_len + j] {
                    for h in 0..heads {
                        mask[[win * heads + h, i, j]] = neg;
                    }
                }
            }
        }
    }
    Some(mask)
}

/// Partition a `(T, H, W, D)` token grid into `(n_windows, win_len, D)`.
pub fn window_partition<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    window: (usize, usize, usize),
) -> NodeId {
    let s = g.shape(x).to_vec();
    let (t, h, w, d) = (s[0], s[1], s[2], s[3]);
    let (wt, wh, ww) = window;
    assert!(t % wt == 0 && h % wh == 0 && w % ww == 0, "grid/window mismatch");
    let r = g.reshape(x, &[t / wt, wt, h / wh, wh, w / ww, ww, d]);
    let p = g.permute(r, &[0, 2, 4, 1, 3, 5, 6]);
    g.reshape(p, &[(t / wt) * (h / wh) * (w / ww), wt * wh * ww, d])
}

/// Inverse of [`window_partition`].
pub fn window_unpartition<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    grid: (usize, usize, usize),
    window: (usize, usize, usize),
) -> NodeId {
    let d = g.shape(x)[2];
    let (t, h, w) = grid;
    let (wt, wh, ww) = window;
    let r = g.reshape(x, &[t / wt, h / wh, w / ww, wt, wh, ww, d]);
    let p = g.permute(r, &[0, 3, 1, 4, 2, 5, 6]);
    g.reshape(p, &[t, h, w, d])
}

/// Multi-head self-attention run independently inside each window of a
/// `(n_windows, win_len, D)` token set.
pub fn window_attention<F: Scalar>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    tokens: NodeId,
    attn: &MhaParams,
    attn_bias: Option<NodeId>,
    heads: usize,
    mask: Option<&ArrayD<F>>,
) -> NodeId {
    attn.forward(g, ps, tokens, tokens, heads, attn_bias, mask)
}

/// The learned `(win_len, win_len)` bias table is indexed by within-window
/// position; when the effective window is clamped below the configured one,
/// select the sub-table for the positions that remain.
fn effective_bias<F: Scalar>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    bias: ParamId,
    cfg_win: (usize, usize, usize),
    eff_win: (usize, usize, usize),
) -> NodeId {
    let full = ps.node(g, bias);
    if cfg_win == eff_win {
        return full;
    }
    let mut idx = Vec::with_capacity(eff_win.0 * eff_win.1 * eff_win.2);
    for it in 0..eff_win.0 {
        for ih in 0..eff_win.1 {
            for iw in 0..eff_win.2 {
                idx.push((it * cfg_win.1 + ih) * cfg_win.2 + iw);
            }
        }
    }
    let rows = g.index_rows(full, idx.clone());
    let rt = g.permute(rows, &[1, 0]);
    let cols = g.index_rows(rt, idx);
    g.permute(cols, &[1, 0])
}

impl SwinEncoderParams {
    pub fn init<F: Scalar>(
        ps: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        cfg: SwinEncoderConfig,
    ) -> Self {
        assert_eq!(cfg.depths.len(), cfg.heads.len(), "depths/heads arity");
        let patch_dim = cfg.patch.0 * cfg.patch.1 * cfg.patch.2 * cfg.in_channels;
        let patch_proj = LinearParams::init(ps, rng, "enc.patch", patch_dim, cfg.embed_dim);
        let patch_ln = LnParams::init(ps, "enc.patch_ln", cfg.embed_dim);
        let win_len = cfg.window.0 * cfg.window.1 * cfg.window.2;
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        let mut dim = cfg.embed_dim;
        for (si, (&depth, &_heads)) in cfg.depths.iter().zip(&cfg.heads).enumerate() {
            if si > 0 {
                let name = format!("enc.merge{si}");
                merges.push(PatchMergeParams {
                    ln: LnParams::init(ps, &format!("{name}.ln"), dim * 4),
                    reduce: LinearParams::init(ps, rng, &format!("{name}.reduce"), dim * 4, dim * 2),
                });
                dim *= 2;
            }
            let mut blocks = Vec::new();
            for bi in 0..depth {
                let name = format!("enc.s{si}.b{bi}");
                blocks.push(SwinBlockParams {
                    ln1: LnParams::init(ps, &format!("{name}.ln1"), dim),
                    attn: MhaParams::init(ps, rng, &format!("{name}.attn"), dim),
                    attn_bias: ps.register(
                        &format!("{name}.attn.bias"),
                        zeros(&[win_len, win_len]),
                    ),
                    ln2: LnParams::init(ps, &format!("{name}.ln2"), dim),
                    ffn: FfnParams::init(ps, rng, &format!("{name}.ffn"), dim, dim * 4),
                    shifted: bi % 2 == 1,
                });
            }
            stages.push(blocks);
        }
        let final_ln = LnParams::init(ps, "enc.final_ln", dim);
        SwinEncoderParams {
            cfg,
            patch_proj,
            patch_ln,
            stages,
            merges,
            final_ln,
        }
    }

    pub fn config(&self) -> &SwinEncoderConfig {
        &self.cfg
    }

    /// Encode a clip window into a `(H', W', dim)` feature grid.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        window: &ClipWindow<F>,
    ) -> Result<FeatureMap> {
        let frames = pad_frames_to_multiple(&window.frames, self.cfg.patch.0);
        let (t, h, w, c) = {
            let s = frames.shape();
            (s[0], s[1], s[2], s[3])
        };
        if c != self.cfg.in_channels {
            return Err(CoreError::config(format!(
                "expected {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        let (pt, ph, pw) = self.cfg.patch;
        if h % ph != 0 || w % pw != 0 {
            return Err(CoreError::config(format!(
                "frame {h}x{w} not divisible by patch {ph}x{pw}"
            )));
        }
        let mut grid = (t / pt, h / ph, w / pw);

        let x = g.leaf(frames.into_dyn());
        let r = g.reshape(x, &[grid.0, pt, grid.1, ph, grid.2, pw, c]);
        let p = g.permute(r, &[0, 2, 4, 1, 3, 5, 6]);
        let patches = g.reshape(p, &[grid.0 * grid.1 * grid.2, pt * ph * pw * c]);
        let mut tokens = self.patch_proj.forward(g, ps, patches);
        tokens = self.patch_ln.forward(g, ps, tokens);
        let mut x = g.reshape(tokens, &[grid.0, grid.1, grid.2, self.cfg.embed_dim]);
        let mut dim = self.cfg.embed_dim;

        for (si, blocks) in self.stages.iter().enumerate() {
            if si > 0 {
                x = self.patch_merge(g, ps, x, &self.merges[si - 1], grid)?;
                grid = (grid.0, grid.1 / 2, grid.2 / 2);
                dim *= 2;
            }
            let heads = self.cfg.heads[si];
            let win = (
                effective_window(grid.0, self.cfg.window.0),
                effective_window(grid.1, self.cfg.window.1),
                effective_window(grid.2, self.cfg.window.2),
            );
            if grid.0 % win.0 != 0 || grid.1 % win.1 != 0 || grid.2 % win.2 != 0 {
                return Err(CoreError::config(format!(
                    "stage {si}: token grid {grid:?} not divisible by window {win:?}"
                )));
            }
            for (bi, block) in blocks.iter().enumerate() {
                x = self.block_forward(g, ps, x, block, grid, win, heads)?;
                if !g.all_finite(x) {
                    return Err(CoreError::numeric(format!(
                        "non-finite activations after encoder stage {si} block {bi}"
                    )));
                }
            }
        }

        let pooled = g.mean_axis(x, 0);
        let out = self.final_ln.forward(g, ps, pooled);
        Ok(FeatureMap {
            node: out,
            h: grid.1,
            w: grid.2,
            dim,
        })
    }

    fn block_forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        x: NodeId,
        block: &SwinBlockParams,
        grid: (usize, usize, usize),
        win: (usize, usize, usize),
        heads: usize,
    ) -> Result<NodeId> {
        let shift = if block.shifted {
            (
                shift_for(grid.0, win.0),
                shift_for(grid.1, win.1),
                shift_for(grid.2, win.2),
            )
        } else {
            (0, 0, 0)
        };
        let mut h = block.ln1.forward(g, ps, x);
        if shift != (0, 0, 0) {
            h = g.roll(
                h,
                &[-(shift.0 as isize), -(shift.1 as isize), -(shift.2 as isize)],
            );
        }
        let windows = window_partition(g, h, win);
        let mask = shifted_window_mask::<F>(grid, win, shift, heads);
        let bias = effective_bias(g, ps, block.attn_bias, self.cfg.window, win);
        let attn_out = window_attention(
            g,
            ps,
            windows,
            &block.attn,
            Some(bias),
            heads,
            mask.as_ref(),
        );
        let mut merged = window_unpartition(g, attn_out, grid, win);
        if shift != (0, 0, 0) {
            merged = g.roll(
                merged,
                &[shift.0 as isize, shift.1 as isize, shift.2 as isize],
            );
        }
        let x = g.add(x, merged);
        let h2 = block.ln2.forward(g, ps, x);
        let f = block.ffn.forward(g, ps, h2);
        Ok(g.add(x, f))
    }

    /// 2x2 spatial merge: concatenate each 2x2 neighborhood's channels,
    /// normalize, and project 4C -> 2C.
    fn patch_merge<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        x: NodeId,
        merge: &PatchMergeParams,
        grid: (usize, usize, usize),
    ) -> Result<NodeId> {
        let (t, h, w) = grid;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(CoreError::config(format!(
                "cannot merge odd spatial grid {h}x{w}"
            )));
        }
        let d = g.shape(x)[3];
        let r = g.reshape(x, &[t, h / 2, 2, w / 2, 2, d]);
        let p = g.permute(r, &[0, 1, 3, 2, 4, 5]);
        let cat = g.reshape(p, &[t, h / 2, w / 2, 4 * d]);
        let n = merge.ln.forward(g, ps, cat);
        Ok(merge.reduce.forward(g, ps, n))
    }
}

/// Repeat the first slot until the temporal length is a multiple of `m`
/// (mirrors the repeat-first policy used for short histories).
pub fn pad_frames_to_multiple<F: Scalar>(frames: &Array4<F>, m: usize) -> Array4<F> {
    let t = frames.shape()[0];
    if t % m == 0 {
        return frames.clone();
    }
    let pad = m - (t % m);
    let s = frames.shape();
    let mut out = Array4::zeros((t + pad, s[1], s[2], s[3]));
    let first = frames.index_axis(ndarray::Axis(0), 0);
    for slot in 0..pad {
        out.index_axis_mut(ndarray::Axis(0), slot).assign(&first);
    }
    for slot in 0..t {
        out.index_axis_mut(ndarray::Axis(0), pad + slot)
            .assign(&frames.index_axis(ndarray::Axis(0), slot));
    }
    out
}

// ---------------------------------------------------------------------------
// Alternative backbone: 3D convolutional residual encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvEncoderConfig {
    pub in_channels: usize,
    /// Stem kernel/stride, matching the patch reduction of the windowed encoder.
    pub patch: (usize, usize, usize),
    pub embed_dim: usize,
    /// Residual blocks per stage (two stages, 2x spatial downsample between).
    pub blocks_per_stage: usize,
}

impl Default for ConvEncoderConfig {
    fn default() -> Self {
        ConvEncoderConfig {
            in_channels: 3,
            patch: (2, 4, 4),
            embed_dim: 32,
            blocks_per_stage: 1,
        }
    }
}

impl ConvEncoderConfig {
    pub fn out_dim(&self) -> usize {
        self.embed_dim * 2
    }
}

struct Conv3dParams {
    w: ParamId, // (kt*kh*kw*cin, cout)
    b: ParamId,
    kernel: (usize, usize, usize),
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
}

impl Conv3dParams {
    fn init<F: Scalar>(
        ps: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Self {
        let kvol = kernel.0 * kernel.1 * kernel.2;
        let w = ps.register(
            &format!("{name}.w"),
            xavier_uniform(rng, kvol * cin, cout, &[kvol * cin, cout]),
        );
        let b = ps.register(&format!("{name}.b"), zeros(&[cout]));
        Conv3dParams {
            w,
            b,
            kernel,
            stride,
            pad,
        }
    }

    /// im2col 3D convolution on a `(T, H, W, C)` grid.
    fn forward<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, x: NodeId) -> NodeId {
        let s = g.shape(x).to_vec();
        let (c,) = (s[3],);
        let padded = g.pad_zero(
            x,
            &[
                (self.pad.0, self.pad.0),
                (self.pad.1, self.pad.1),
                (self.pad.2, self.pad.2),
                (0, 0),
            ],
        );
        let ps_shape = g.shape(padded).to_vec();
        let (t, h, w) = (ps_shape[0], ps_shape[1], ps_shape[2]);
        let (kt, kh, kw) = self.kernel;
        let (st, sh, sw) = self.stride;
        let (ot, oh, ow) = ((t - kt) / st + 1, (h - kh) / sh + 1, (w - kw) / sw + 1);
        let rows = g.reshape(padded, &[t * h * w, c]);
        let mut indices = Vec::with_capacity(ot * oh * ow * kt * kh * kw);
        for vt in 0..ot {
            for vy in 0..oh {
                for vx in 0..ow {
                    for it in 0..kt {
                        for iy in 0..kh {
                            for ix in 0..kw {
                                let src_t = vt * st + it;
                                let src_y = vy * sh + iy;
                                let src_x = vx * sw + ix;
                                indices.push((src_t * h + src_y) * w + src_x);
                            }
                        }
                    }
                }
            }
        }
        let gathered = g.index_rows(rows, indices);
        let kvol = kt * kh * kw;
        let cols = g.reshape(gathered, &[ot * oh * ow, kvol * c]);
        let wp = ps.node(g, self.w);
        let bp = ps.node(g, self.b);
        let y = g.matmul_last(cols, wp);
        let y = g.add_bcast_last(y, bp);
        let cout = g.shape(y)[1];
        g.reshape(y, &[ot, oh, ow, cout])
    }
}

struct ConvResBlock {
    ln: LnParams,
    conv1: Conv3dParams,
    conv2: Conv3dParams,
}

/// Two-stage 3D convolutional residual encoder with the same output
/// geometry as the windowed encoder.
pub struct ConvEncoderParams {
    cfg: ConvEncoderConfig,
    stem: Conv3dParams,
    stage1: Vec<ConvResBlock>,
    down: Conv3dParams,
    stage2: Vec<ConvResBlock>,
    final_ln: LnParams,
}

impl ConvEncoderParams {
    pub fn init<F: Scalar>(
        ps: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        cfg: ConvEncoderConfig,
    ) -> Self {
        let d1 = cfg.embed_dim;
        let d2 = cfg.embed_dim * 2;
        let stem = Conv3dParams::init(
            ps,
            rng,
            "enc.stem",
            cfg.in_channels,
            d1,
            cfg.patch,
            cfg.patch,
            (0, 0, 0),
        );
        let res = |ps: &mut ParamStore<F>, rng: &mut ChaCha8Rng, name: &str, d: usize| ConvResBlock {
            ln: LnParams::init(ps, &format!("{name}.ln"), d),
            conv1: Conv3dParams::init(ps, rng, &format!("{name}.conv1"), d, d, (3, 3, 3), (1, 1, 1), (1, 1, 1)),
            conv2: Conv3dParams::init(ps, rng, &format!("{name}.conv2"), d, d, (3, 3, 3), (1, 1, 1), (1, 1, 1)),
        };
        let stage1 = (0..cfg.blocks_per_stage)
            .map(|i| res(ps, rng, &format!("enc.s0.res{i}"), d1))
            .collect();
        let down = Conv3dParams::init(
            ps,
            rng,
            "enc.down",
            d1,
            d2,
            (1, 2, 2),
            (1, 2, 2),
            (0, 0, 0),
        );
        let stage2 = (0..cfg.blocks_per_stage)
            .map(|i| res(ps, rng, &format!("enc.s1.res{i}"), d2))
            .collect();
        let final_ln = LnParams::init(ps, "enc.final_ln", d2);
        ConvEncoderParams {
            cfg,
            stem,
            stage1,
            down,
            stage2,
            final_ln,
        }
    }

    pub fn config(&self) -> &ConvEncoderConfig {
        &self.cfg
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        window: &ClipWindow<F>,
    ) -> Result<FeatureMap> {
        let frames = pad_frames_to_multiple(&window.frames, self.cfg.patch.0);
        let x = g.leaf(frames.into_dyn());
        let mut x = self.stem.forward(g, ps, x);
        x = g.gelu(x);
        for (i, blk) in self.stage1.iter().enumerate() {
            x = self.res_forward(g, ps, x, blk);
            if !g.all_finite(x) {
                return Err(CoreError::numeric(format!(
                    "non-finite activations after conv stage 0 block {i}"
                )));
            }
        }
        x = self.down.forward(g, ps, x);
        x = g.gelu(x);
        for (i, blk) in self.stage2.iter().enumerate() {
            x = self.res_forward(g, ps, x, blk);
            if !g.all_finite(x) {
                return Err(CoreError::numeric(format!(
                    "non-finite activations after conv stage 1 block {i}"
                )));
            }
        }
        let pooled = g.mean_axis(x, 0);
        let out = self.final_ln.forward(g, ps, pooled);
        let s = g.shape(out).to_vec();
        Ok(FeatureMap {
            node: out,
            h: s[0],
            w: s[1],
            dim: s[2],
        })
    }

    fn res_forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        x: NodeId,
        blk: &ConvResBlock,
    ) -> NodeId {
        let h = blk.ln.forward(g, ps, x);
        let h = blk.conv1.forward(g, ps, h);
        let h = g.gelu(h);
        let h = blk.conv2.forward(g, ps, h);
        g.add(x, h)
    }
}
