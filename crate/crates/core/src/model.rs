//! Full model assembly: condition encoder + temporal encoder + dense
//! decoder, with per-pixel sigmoid prediction at frame resolution.

use crate::autodiff::{Graph, NodeId, Scalar};
use crate::conditioning::{ConditioningMode, ConditioningParams, PromptTriplet, Vocabulary};
use crate::decoder::{AdaLnDecoderParams, DecoderConfig, XattnDecoderParams};
use crate::encoder::{
    ClipWindow, ConvEncoderConfig, ConvEncoderParams, FeatureMap, SwinEncoderConfig,
    SwinEncoderParams,
};
use crate::error::{CoreError, Result};
use crate::params::ParamStore;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Swin,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    AdaLn,
    CrossAttention,
}

/// Architecture hyperparameters. Serialized into every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frame_h: usize,
    pub frame_w: usize,
    /// Temporal window length fed to the encoder.
    pub window_n: usize,
    /// Frame stride between window slots.
    pub stride: usize,
    pub encoder: EncoderKind,
    pub swin: SwinEncoderConfig,
    pub conv: ConvEncoderConfig,
    pub decoder: DecoderKind,
    pub dec: DecoderConfig,
    pub conditioning: ConditioningMode,
    /// Per-slot embedding width of the condition encoder.
    pub token_dim: usize,
    pub vocab: Vocabulary,
    /// Target sigma rule: sigma = sigma_scale * sqrt(area/pi), floored.
    pub sigma_scale: f64,
    pub sigma_min: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frame_h: 64,
            frame_w: 64,
            window_n: 8,
            stride: 8,
            encoder: EncoderKind::Swin,
            swin: SwinEncoderConfig::default(),
            conv: ConvEncoderConfig::default(),
            decoder: DecoderKind::AdaLn,
            dec: DecoderConfig::default(),
            conditioning: ConditioningMode::Full,
            token_dim: 32,
            vocab: Vocabulary::six_pairs(),
            sigma_scale: 0.5,
            sigma_min: 1.0,
        }
    }
}

impl ModelConfig {
    /// Encoder output grid for the configured frame geometry.
    pub fn feature_grid(&self) -> Result<(usize, usize)> {
        match self.encoder {
            EncoderKind::Swin => self.swin.out_grid(self.frame_h, self.frame_w),
            EncoderKind::Conv => {
                let (pt, ph, pw) = (self.conv.patch.0, self.conv.patch.1, self.conv.patch.2);
                let _ = pt;
                if self.frame_h % (ph * 2) != 0 || self.frame_w % (pw * 2) != 0 {
                    return Err(CoreError::config(format!(
                        "frame {}x{} not divisible by conv reduction {}x{}",
                        self.frame_h,
                        self.frame_w,
                        ph * 2,
                        pw * 2
                    )));
                }
                Ok((self.frame_h / (ph * 2), self.frame_w / (pw * 2)))
            }
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self.encoder {
            EncoderKind::Swin => self.swin.out_dim(),
            EncoderKind::Conv => self.conv.out_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_grid()?;
        if self.dec.cond_dim == 0 || self.dec.dim == 0 {
            return Err(CoreError::config("decoder dims must be positive"));
        }
        if self.dec.dim % self.dec.heads != 0 {
            return Err(CoreError::config(format!(
                "decoder dim {} not divisible by {} heads",
                self.dec.dim, self.dec.heads
            )));
        }
        for (si, (&d, &h)) in self
            .swin
            .depths
            .iter()
            .zip(&self.swin.heads)
            .enumerate()
        {
            let dim = self.swin.embed_dim << si;
            if d == 0 {
                return Err(CoreError::config(format!("stage {si} has zero depth")));
            }
            if dim % h != 0 {
                return Err(CoreError::config(format!(
                    "stage {si} width {dim} not divisible by {h} heads"
                )));
            }
        }
        if self.window_n < 1 || self.stride < 1 {
            return Err(CoreError::config("window_n and stride must be >= 1"));
        }
        Ok(())
    }
}

enum EncoderParams {
    Swin(SwinEncoderParams),
    Conv(ConvEncoderParams),
}

enum DecoderParams {
    AdaLn(AdaLnDecoderParams),
    Xattn(XattnDecoderParams),
}

/// A configured model and its parameter tensors.
pub struct Model<F: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<F>,
    cond: ConditioningParams,
    encoder: EncoderParams,
    decoder: DecoderParams,
}

impl<F: Scalar> Model<F> {
    /// Initialize all parameters from a seed. Registration order is fixed,
    /// so (cfg, seed) fully determines every tensor.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cond = ConditioningParams::init(
            &mut params,
            &mut rng,
            &cfg.vocab,
            cfg.token_dim,
            cfg.dec.cond_dim,
        );
        let encoder = match cfg.encoder {
            EncoderKind::Swin => EncoderParams::Swin(SwinEncoderParams::init(
                &mut params,
                &mut rng,
                cfg.swin.clone(),
            )),
            EncoderKind::Conv => EncoderParams::Conv(ConvEncoderParams::init(
                &mut params,
                &mut rng,
                cfg.conv.clone(),
            )),
        };
        let (gh, gw) = cfg.feature_grid()?;
        let feat_dim = cfg.feature_dim();
        let decoder = match cfg.decoder {
            DecoderKind::AdaLn => DecoderParams::AdaLn(AdaLnDecoderParams::init(
                &mut params,
                &mut rng,
                cfg.dec.clone(),
                feat_dim,
                gh,
                gw,
            )),
            DecoderKind::CrossAttention => DecoderParams::Xattn(XattnDecoderParams::init(
                &mut params,
                &mut rng,
                cfg.dec.clone(),
                feat_dim,
                gh,
                gw,
            )),
        };
        Ok(Model {
            cfg: cfg.clone(),
            params,
            cond,
            encoder,
            decoder,
        })
    }

    pub fn conditioning(&self) -> &ConditioningParams {
        &self.cond
    }

    fn check_window(&self, window: &ClipWindow<F>) -> Result<()> {
        let s = window.frames.shape();
        if s[1] != self.cfg.frame_h || s[2] != self.cfg.frame_w {
            return Err(CoreError::config(format!(
                "clip geometry {}x{} does not match model frame geometry {}x{}",
                s[1], s[2], self.cfg.frame_h, self.cfg.frame_w
            )));
        }
        Ok(())
    }

    /// Condition node for a triplet under the configured ablation mode.
    pub fn encode_condition(
        &self,
        g: &mut Graph<F>,
        triplet: &PromptTriplet,
    ) -> Result<NodeId> {
        self.cond.encode(
            g,
            &self.params,
            &self.cfg.vocab,
            triplet,
            self.cfg.conditioning,
        )
    }

    /// Encoded spatial features of a clip window.
    pub fn encode_clip(&self, g: &mut Graph<F>, window: &ClipWindow<F>) -> Result<FeatureMap> {
        self.check_window(window)?;
        match &self.encoder {
            EncoderParams::Swin(e) => e.forward(g, &self.params, window),
            EncoderParams::Conv(e) => e.forward(g, &self.params, window),
        }
    }

    /// Per-pixel logits at annotation frame resolution.
    pub fn forward_logits(
        &self,
        g: &mut Graph<F>,
        window: &ClipWindow<F>,
        triplet: &PromptTriplet,
    ) -> Result<NodeId> {
        let cond = self.encode_condition(g, triplet)?;
        let features = self.encode_clip(g, window)?;
        match &self.decoder {
            DecoderParams::AdaLn(d) => d.forward(
                g,
                &self.params,
                &features,
                cond,
                self.cfg.frame_h,
                self.cfg.frame_w,
            ),
            DecoderParams::Xattn(d) => d.forward(
                g,
                &self.params,
                &features,
                cond,
                self.cfg.frame_h,
                self.cfg.frame_w,
            ),
        }
    }

    /// Probabilistic affordance heatmap in [0, 1].
    pub fn predict(&self, window: &ClipWindow<F>, triplet: &PromptTriplet) -> Result<Array2<F>> {
        let mut g = Graph::new();
        let logits = self.forward_logits(&mut g, window, triplet)?;
        let probs = g.sigmoid(logits);
        let v = g.value(probs);
        Ok(Array2::from_shape_vec(
            (self.cfg.frame_h, self.cfg.frame_w),
            v.iter().copied().collect(),
        )
        .expect("heatmap shape"))
    }

    /// Re-instantiate the same model at another element type (used for
    /// double-precision gradient checks of f32-trained parameters).
    pub fn convert<G: Scalar>(&self) -> Model<G> {
        let mut out = Model::<G>::init(&self.cfg, 0).expect("config already validated");
        for id in self.params.ids() {
            let name = self.params.name(id).to_string();
            let target = out.params.id(&name).expect("same registration order");
            out.params
                .set(target, self.params.value(id).mapv(|v| G::from_f64(v.into_f64())));
            out.params
                .set_trainable(target, self.params.is_trainable(id));
        }
        out
    }

    /// Overwrite parameter tensors by name from another store.
    pub fn load_values(&mut self, src: &ParamStore<F>) -> Result<()> {
        if src.len() != self.params.len() {
            return Err(CoreError::validation(format!(
                "parameter count mismatch: {} vs {}",
                src.len(),
                self.params.len()
            )));
        }
        for id in src.ids() {
            let name = src.name(id).to_string();
            let target = self.params.id(&name).ok_or_else(|| {
                CoreError::validation(format!("unknown parameter `{name}` in checkpoint"))
            })?;
            if self.params.value(target).shape() != src.value(id).shape() {
                return Err(CoreError::validation(format!(
                    "parameter `{name}` shape mismatch"
                )));
            }
            self.params.set(target, src.value(id).clone());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::build_clip_window;
    use crate::framestore::ClipFrames;
    use ndarray::Array4;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            frame_h: 32,
            frame_w: 32,
            window_n: 4,
            stride: 2,
            dec: DecoderConfig {
                dim: 16,
                depth: 1,
                heads: 2,
                ffn_mult: 2,
                cond_dim: 16,
                ..DecoderConfig::default()
            },
            token_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn random_clip(seed: u64, t: usize, h: usize, w: usize) -> ClipFrames {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<u8> = (0..t * h * w * 3).map(|_| rng.random_range(0..=255)).collect();
        ClipFrames::new(Array4::from_shape_vec((t, h, w, 3), data).unwrap())
    }

    #[test]
    fn zero_init_model_predicts_uniform_half() {
        // adaLN-Zero gates and the zero-initialized head force logits to 0
        let cfg = tiny_config();
        let model: Model<f64> = Model::init(&cfg, 0).unwrap();
        let clip = random_clip(1, 8, 32, 32);
        let window = build_clip_window(&clip, 5, cfg.window_n, cfg.stride).unwrap();
        let t = PromptTriplet::new("cholecystectomy", "hook", "dissect");
        let heatmap = model.predict(&window, &t).unwrap();
        assert!(heatmap.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn predictions_stay_in_unit_interval() {
        let cfg = tiny_config();
        let mut model: Model<f64> = Model::init(&cfg, 7).unwrap();
        // randomize the zero-initialized tensors so logits are non-trivial
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for id in model.params.ids().collect::<Vec<_>>() {
            if model.params.name(id).contains("cond_mlp") || model.params.name(id).contains("head")
            {
                let shape = model.params.value(id).shape().to_vec();
                let n: usize = shape.iter().product();
                let arr = ndarray::ArrayD::from_shape_vec(
                    ndarray::IxDyn(&shape),
                    (0..n).map(|_| rng.random_range(-0.5..0.5)).collect::<Vec<f64>>(),
                )
                .unwrap();
                model.params.set(id, arr);
            }
        }
        let clip = random_clip(2, 8, 32, 32);
        let window = build_clip_window(&clip, 7, cfg.window_n, cfg.stride).unwrap();
        let t = PromptTriplet::new("cholecystectomy", "grasper", "grasp");
        let heatmap = model.predict(&window, &t).unwrap();
        assert!(heatmap.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(heatmap.iter().any(|&v| v != 0.5));
    }

    #[test]
    fn geometry_mismatch_is_a_config_error() {
        let cfg = tiny_config();
        let model: Model<f64> = Model::init(&cfg, 0).unwrap();
        let clip = random_clip(3, 8, 64, 64);
        let window = build_clip_window::<f64>(&clip, 5, cfg.window_n, cfg.stride).unwrap();
        let t = PromptTriplet::new("cholecystectomy", "hook", "dissect");
        match model.predict(&window, &t) {
            Err(CoreError::Config(msg)) => assert!(msg.contains("64x64"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn convert_preserves_values_and_structure() {
        let cfg = tiny_config();
        let model: Model<f64> = Model::init(&cfg, 3).unwrap();
        let m32: Model<f32> = model.convert();
        assert_eq!(m32.params.len(), model.params.len());
        for id in model.params.ids() {
            let name = model.params.name(id);
            let t32 = m32.params.id(name).unwrap();
            let a = model.params.value(id);
            let b = m32.params.value(t32);
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f32, *y);
            }
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny_config();
        let a: Model<f32> = Model::init(&cfg, 42).unwrap();
        let b: Model<f32> = Model::init(&cfg, 42).unwrap();
        for id in a.params.ids() {
            assert_eq!(a.params.value(id), b.params.value(id));
        }
        let c: Model<f32> = Model::init(&cfg, 43).unwrap();
        let differs = a
            .params
            .ids()
            .any(|id| a.params.value(id) != c.params.value(id));
        assert!(differs);
    }
}
