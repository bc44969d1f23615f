//! Prompt triplets, the closed triplet vocabulary, and the condition
//! encoder that maps a (surgery, tool, action) triplet into the shared
//! embedding space.
//!
//! The encoder is a learned per-slot embedding table over the closed
//! vocabulary followed by a two-layer MLP projection. Ablation modes swap
//! the tool or action slot for a learned null token, or replace the whole
//! condition vector with a learned constant.

use crate::autodiff::{Graph, NodeId, Scalar};
use crate::error::{CoreError, Result};
use crate::params::{normal_init, xavier_uniform, zeros, ParamId, ParamStore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PromptTriplet {
    pub surgery: String,
    pub tool: String,
    pub action: String,
}

impl PromptTriplet {
    pub fn new(surgery: impl Into<String>, tool: impl Into<String>, action: impl Into<String>) -> Self {
        PromptTriplet {
            surgery: surgery.into(),
            tool: tool.into(),
            action: action.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.surgery.is_empty() || self.tool.is_empty() || self.action.is_empty() {
            return Err(CoreError::validation(
                "prompt triplet fields must be non-empty",
            ));
        }
        Ok(())
    }
}

/// Deterministic prompt rendering; the objective clause is part of the
/// fixed template.
pub fn render_prompt(t: &PromptTriplet) -> Result<String> {
    t.validate()?;
    Ok(format!(
        "surgery: {}; tool: {}; action: {}; objective: predict the safe tissue interaction region.",
        t.surgery, t.tool, t.action
    ))
}

/// Closed vocabulary: the ordered list of valid triplets plus per-slot
/// token lists (ordered by first appearance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub triplets: Vec<PromptTriplet>,
    pub surgeries: Vec<String>,
    pub tools: Vec<String>,
    pub actions: Vec<String>,
}

impl Vocabulary {
    pub fn from_triplets<I: IntoIterator<Item = PromptTriplet>>(iter: I) -> Self {
        let mut triplets: Vec<PromptTriplet> = Vec::new();
        let mut surgeries = Vec::new();
        let mut tools = Vec::new();
        let mut actions = Vec::new();
        for t in iter {
            if triplets.contains(&t) {
                continue;
            }
            if !surgeries.contains(&t.surgery) {
                surgeries.push(t.surgery.clone());
            }
            if !tools.contains(&t.tool) {
                tools.push(t.tool.clone());
            }
            if !actions.contains(&t.action) {
                actions.push(t.action.clone());
            }
            triplets.push(t);
        }
        Vocabulary {
            triplets,
            surgeries,
            tools,
            actions,
        }
    }

    /// The six cholecystectomy tool-action pairs.
    pub fn six_pairs() -> Self {
        let s = "cholecystectomy";
        Self::from_triplets([
            PromptTriplet::new(s, "hook", "dissect"),
            PromptTriplet::new(s, "grasper", "dissect"),
            PromptTriplet::new(s, "scissors", "dissect"),
            PromptTriplet::new(s, "grasper", "grasp"),
            PromptTriplet::new(s, "clipper", "clip"),
            PromptTriplet::new(s, "scissors", "cut"),
        ])
    }

    pub fn contains(&self, t: &PromptTriplet) -> bool {
        self.triplets.contains(t)
    }

    /// Per-slot indices for a triplet; unknown tokens name the known
    /// vocabulary in the error.
    pub fn slot_indices(&self, t: &PromptTriplet) -> Result<(usize, usize, usize)> {
        let find = |list: &[String], token: &str, slot: &str| -> Result<usize> {
            list.iter().position(|x| x == token).ok_or_else(|| {
                CoreError::validation(format!(
                    "unknown {slot} token `{token}`; known: [{}]",
                    list.join(", ")
                ))
            })
        };
        Ok((
            find(&self.surgeries, &t.surgery, "surgery")?,
            find(&self.tools, &t.tool, "tool")?,
            find(&self.actions, &t.action, "action")?,
        ))
    }

    /// One triplet per line, `surgery<TAB>tool<TAB>action`.
    pub fn save_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.triplets {
            writeln!(out, "{}\t{}\t{}", t.surgery, t.tool, t.action)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        let mut triplets = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(CoreError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: format!("expected 3 tab-separated fields, got {}", parts.len()),
                });
            }
            triplets.push(PromptTriplet::new(parts[0], parts[1], parts[2]));
        }
        Ok(Self::from_triplets(triplets))
    }
}

/// Which part of the condition pathway an ablation removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    Full,
    /// Whole condition vector replaced by a learned constant.
    NoLanguage,
    /// Tool slot replaced by the learned null token.
    NoTool,
    /// Action slot replaced by the learned null token.
    NoAction,
}

/// Learned tables and projection of the condition encoder. Each slot table
/// has one extra trailing row: the null token used by slot ablations.
pub struct ConditioningParams {
    pub surgery_table: ParamId,
    pub tool_table: ParamId,
    pub action_table: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    /// Learned constant vector for the no-language ablation.
    pub constant: ParamId,
    token_dim: usize,
    cond_dim: usize,
}

impl ConditioningParams {
    pub fn init<F: Scalar>(
        ps: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        vocab: &Vocabulary,
        token_dim: usize,
        cond_dim: usize,
    ) -> Self {
        let table = |rng: &mut ChaCha8Rng, n: usize| normal_init(rng, 0.02, &[n + 1, token_dim]);
        let surgery_table = ps.register("cond.surgery_table", table(rng, vocab.surgeries.len()));
        let tool_table = ps.register("cond.tool_table", table(rng, vocab.tools.len()));
        let action_table = ps.register("cond.action_table", table(rng, vocab.actions.len()));
        let d_in = 3 * token_dim;
        let mlp_w1 = ps.register(
            "cond.mlp_w1",
            xavier_uniform(rng, d_in, cond_dim, &[d_in, cond_dim]),
        );
        let mlp_b1 = ps.register("cond.mlp_b1", zeros(&[cond_dim]));
        let mlp_w2 = ps.register(
            "cond.mlp_w2",
            xavier_uniform(rng, cond_dim, cond_dim, &[cond_dim, cond_dim]),
        );
        let mlp_b2 = ps.register("cond.mlp_b2", zeros(&[cond_dim]));
        let constant = ps.register("cond.constant", normal_init(rng, 0.02, &[cond_dim]));
        ConditioningParams {
            surgery_table,
            tool_table,
            action_table,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            constant,
            token_dim,
            cond_dim,
        }
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    /// Encode a triplet into the shared space: concatenated slot embeddings
    /// through a two-layer GELU MLP. Deterministic given parameters.
    pub fn encode<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        vocab: &Vocabulary,
        triplet: &PromptTriplet,
        mode: ConditioningMode,
    ) -> Result<NodeId> {
        triplet.validate()?;
        if mode == ConditioningMode::NoLanguage {
            return Ok(ps.node(g, self.constant));
        }
        let (si, ti, ai) = vocab.slot_indices(triplet)?;
        let tool_row = if mode == ConditioningMode::NoTool {
            vocab.tools.len() // null token
        } else {
            ti
        };
        let action_row = if mode == ConditioningMode::NoAction {
            vocab.actions.len()
        } else {
            ai
        };
        let st = ps.node(g, self.surgery_table);
        let tt = ps.node(g, self.tool_table);
        let at = ps.node(g, self.action_table);
        let s = g.row(st, si);
        let t = g.row(tt, tool_row);
        let a = g.row(at, action_row);
        let cat = g.concat0(&[s, t, a]);
        let cat2 = g.reshape(cat, &[1, 3 * self.token_dim]);
        let w1 = ps.node(g, self.mlp_w1);
        let b1 = ps.node(g, self.mlp_b1);
        let h = g.matmul_last(cat2, w1);
        let h = g.add_bcast_last(h, b1);
        let h = g.gelu(h);
        let w2 = ps.node(g, self.mlp_w2);
        let b2 = ps.node(g, self.mlp_b2);
        let out = g.matmul_last(h, w2);
        let out = g.add_bcast_last(out, b2);
        Ok(g.reshape(out, &[self.cond_dim]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_param_gradients, relative_error};
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};

    fn setup(seed: u64) -> (ParamStore<f64>, ConditioningParams, Vocabulary) {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocabulary::six_pairs();
        let params = ConditioningParams::init(&mut ps, &mut rng, &vocab, 8, 16);
        (ps, params, vocab)
    }

    fn encode_values(
        ps: &ParamStore<f64>,
        params: &ConditioningParams,
        vocab: &Vocabulary,
        t: &PromptTriplet,
        mode: ConditioningMode,
    ) -> Vec<f64> {
        let mut g = Graph::new();
        let node = params.encode(&mut g, ps, vocab, t, mode).unwrap();
        g.value(node).iter().copied().collect()
    }

    #[test]
    fn prompt_template_is_exact() {
        let t = PromptTriplet::new("cholecystectomy", "hook", "dissect");
        assert_eq!(
            render_prompt(&t).unwrap(),
            "surgery: cholecystectomy; tool: hook; action: dissect; \
             objective: predict the safe tissue interaction region."
        );
    }

    #[test]
    fn prompt_is_deterministic_and_distinct_across_triplets() {
        let a = PromptTriplet::new("cholecystectomy", "clipper", "clip");
        let b = PromptTriplet::new("cholecystectomy", "scissors", "cut");
        assert_eq!(render_prompt(&a).unwrap(), render_prompt(&a).unwrap());
        assert_ne!(render_prompt(&a).unwrap(), render_prompt(&b).unwrap());
    }

    #[test]
    fn empty_prompt_field_errors() {
        let t = PromptTriplet::new("", "hook", "dissect");
        assert!(render_prompt(&t).is_err());
    }

    #[test]
    fn encode_is_deterministic() {
        let (ps, params, vocab) = setup(0);
        let t = PromptTriplet::new("cholecystectomy", "hook", "dissect");
        let a = encode_values(&ps, &params, &vocab, &t, ConditioningMode::Full);
        let b = encode_values(&ps, &params, &vocab, &t, ConditioningMode::Full);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_output_layer_forces_zero_vector() {
        let (mut ps, params, vocab) = setup(1);
        ps.set(params.mlp_w2, ArrayD::zeros(ps.value(params.mlp_w2).raw_dim()));
        ps.set(params.mlp_b2, ArrayD::zeros(ps.value(params.mlp_b2).raw_dim()));
        for t in &vocab.triplets {
            let v = encode_values(&ps, &params, &vocab, t, ConditioningMode::Full);
            assert!(v.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn triplets_differing_in_tool_encode_differently_at_seed_zero() {
        let (ps, params, vocab) = setup(0);
        let a = PromptTriplet::new("cholecystectomy", "hook", "dissect");
        let b = PromptTriplet::new("cholecystectomy", "grasper", "dissect");
        let va = encode_values(&ps, &params, &vocab, &a, ConditioningMode::Full);
        let vb = encode_values(&ps, &params, &vocab, &b, ConditioningMode::Full);
        assert!(va.iter().zip(&vb).any(|(x, y)| x != y));
    }

    #[test]
    fn six_pair_vocabulary_encodes_pairwise_distinct_at_seed_zero() {
        let (ps, params, vocab) = setup(0);
        let encoded: Vec<Vec<f64>> = vocab
            .triplets
            .iter()
            .map(|t| encode_values(&ps, &params, &vocab, t, ConditioningMode::Full))
            .collect();
        for i in 0..encoded.len() {
            for j in (i + 1)..encoded.len() {
                assert!(
                    encoded[i].iter().zip(&encoded[j]).any(|(x, y)| x != y),
                    "triplets {i} and {j} encode identically"
                );
            }
        }
    }

    #[test]
    fn no_tool_mode_makes_tool_slot_irrelevant() {
        let (ps, params, vocab) = setup(2);
        let a = PromptTriplet::new("cholecystectomy", "hook", "dissect");
        let b = PromptTriplet::new("cholecystectomy", "grasper", "dissect");
        let va = encode_values(&ps, &params, &vocab, &a, ConditioningMode::NoTool);
        let vb = encode_values(&ps, &params, &vocab, &b, ConditioningMode::NoTool);
        assert_eq!(va, vb);
    }

    #[test]
    fn no_language_mode_is_triplet_independent() {
        let (ps, params, vocab) = setup(3);
        let a = PromptTriplet::new("cholecystectomy", "hook", "dissect");
        let b = PromptTriplet::new("cholecystectomy", "scissors", "cut");
        let va = encode_values(&ps, &params, &vocab, &a, ConditioningMode::NoLanguage);
        let vb = encode_values(&ps, &params, &vocab, &b, ConditioningMode::NoLanguage);
        assert_eq!(va, vb);
    }

    #[test]
    fn unknown_token_error_lists_vocabulary() {
        let (ps, params, vocab) = setup(4);
        let t = PromptTriplet::new("cholecystectomy", "laser", "dissect");
        let mut g: Graph<f64> = Graph::new();
        let err = params
            .encode(&mut g, &ps, &vocab, &t, ConditioningMode::Full)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("laser") && msg.contains("hook"), "{msg}");
    }

    #[test]
    fn embedding_table_gradients_match_finite_differences() {
        let (mut ps, params, vocab) = setup(5);
        let t = PromptTriplet::new("cholecystectomy", "grasper", "grasp");
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let weights: Vec<f64> = (0..params.cond_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = ArrayD::from_shape_vec(ndarray::IxDyn(&[params.cond_dim()]), weights).unwrap();

        let run = |ps: &ParamStore<f64>| -> (f64, Graph<f64>, crate::autodiff::NodeId) {
            let mut g = Graph::new();
            let cond = params
                .encode(&mut g, ps, &vocab, &t, ConditioningMode::Full)
                .unwrap();
            let wn = g.leaf(w.clone());
            let prod = g.mul(cond, wn);
            let loss = g.sum_all(prod);
            let v = g.scalar_value(loss);
            (v, g, loss)
        };

        let (_, g, loss) = run(&ps);
        let grads = g.backward(loss);
        let mut analytic = std::collections::HashMap::new();
        for pid in [params.surgery_table, params.tool_table, params.action_table] {
            let node = g.tagged_node(pid.index()).unwrap();
            analytic.insert(
                pid,
                grads
                    .wrt(node)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(ps.value(pid).raw_dim())),
            );
        }

        let entries: Vec<(crate::params::ParamId, usize)> = analytic
            .keys()
            .flat_map(|&pid| (0..ps.value(pid).len()).map(move |i| (pid, i)))
            .collect();
        let analytic_fn = |pid: crate::params::ParamId, flat: usize| -> f64 {
            analytic[&pid].as_slice().unwrap()[flat]
        };
        let report = check_param_gradients(
            &mut ps,
            &entries,
            &analytic_fn,
            1e-6,
            &mut |ps: &ParamStore<f64>| run(ps).0,
        );
        assert!(
            report.max_rel_err < 1e-5,
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst
        );
        // sanity: the used rows actually received nonzero gradient
        assert!(relative_error(analytic_fn(params.tool_table, 0), 0.0) >= 0.0);
        let tool_grad = &analytic[&params.tool_table];
        assert!(tool_grad.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn vocabulary_tsv_round_trips() {
        let vocab = Vocabulary::six_pairs();
        let dir = std::env::temp_dir().join("afford_test_vocab");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.tsv");
        vocab.save_tsv(&path).unwrap();
        let loaded = Vocabulary::load_tsv(&path).unwrap();
        assert_eq!(loaded, vocab);
    }
}
