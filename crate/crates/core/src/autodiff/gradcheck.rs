//! Central finite-difference gradient checking.

use super::{Graph, NodeId, Scalar};
use crate::params::{ParamId, ParamStore};
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Human-readable location of the worst entry.
    pub worst: String,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            checked: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        }
    }

    fn update(&mut self, err: f64, label: impl FnOnce() -> String) {
        self.checked += 1;
        if err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = label();
        }
    }
}

/// Check gradients with respect to every entry of every input array.
///
/// `build` must construct the same scalar-valued computation each call;
/// inputs are bound as leaf nodes in order.
pub fn check_inputs(
    build: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    inputs: &[ArrayD<f64>],
    eps: f64,
) -> GradCheckReport {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let root = build(&mut g, &ids);
    let grads = g.backward(root);
    let analytic: Vec<ArrayD<f64>> = ids
        .iter()
        .map(|&id| {
            grads
                .wrt(id)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(g.value(id).raw_dim()))
        })
        .collect();

    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let root = build(&mut g, &ids);
        g.scalar_value(root)
    };

    let mut report = GradCheckReport::new();
    let mut xs: Vec<ArrayD<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        for flat in 0..inputs[i].len() {
            let orig = inputs[i].as_slice().unwrap()[flat];
            let h = eps * orig.abs().max(1.0);
            xs[i].as_slice_mut().unwrap()[flat] = orig + h;
            let fp = eval(&xs);
            xs[i].as_slice_mut().unwrap()[flat] = orig - h;
            let fm = eval(&xs);
            xs[i].as_slice_mut().unwrap()[flat] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let ad = analytic[i].as_slice().unwrap()[flat];
            report.update(relative_error(ad, fd), || format!("input {i} entry {flat}"));
        }
    }
    report
}

/// Uniformly sample `max(ceil(fraction * total), min_entries)` scalar
/// entries across all parameter tensors, without replacement.
pub fn sample_param_entries<F: Scalar>(
    store: &ParamStore<F>,
    fraction: f64,
    min_entries: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(ParamId, usize)> {
    let total = store.total_len();
    let k = ((total as f64 * fraction).ceil() as usize)
        .max(min_entries)
        .min(total);
    let chosen = rand::seq::index::sample(rng, total, k);
    let mut bounds: Vec<(ParamId, usize, usize)> = Vec::new(); // (id, start, len)
    let mut off = 0;
    for id in store.ids() {
        let len = store.value(id).len();
        bounds.push((id, off, len));
        off += len;
    }
    let mut out = Vec::with_capacity(k);
    for global in chosen.iter() {
        let (id, start, _) = bounds
            .iter()
            .rev()
            .find(|(_, s, l)| *s <= global && global < s + l)
            .copied()
            .expect("entry index in range");
        out.push((id, global - start));
    }
    out.sort_by_key(|(id, flat)| (id.index(), *flat));
    out
}

/// Compare analytic parameter gradients against central differences of a
/// forward-only loss evaluation. `analytic(id, flat)` is the autodiff
/// gradient entry; `loss` re-evaluates the objective for the current
/// parameter values.
pub fn check_param_gradients<F: Scalar>(
    store: &mut ParamStore<F>,
    entries: &[(ParamId, usize)],
    analytic: &dyn Fn(ParamId, usize) -> f64,
    eps: f64,
    loss: &mut dyn FnMut(&ParamStore<F>) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::new();
    for &(id, flat) in entries {
        let orig = store.entry(id, flat);
        let h = eps * orig.into_f64().abs().max(1.0);
        store.set_entry(id, flat, F::from_f64(orig.into_f64() + h));
        let fp = loss(store);
        store.set_entry(id, flat, F::from_f64(orig.into_f64() - h));
        let fm = loss(store);
        store.set_entry(id, flat, orig);
        let fd = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic(id, flat), fd);
        report.update(err, || format!("{}[{}]", store.name(id), flat));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::xavier_uniform;
    use rand::SeedableRng;

    #[test]
    fn sample_covers_requested_fraction() {
        let mut ps: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ps.register("a", xavier_uniform(&mut rng, 10, 10, &[10, 10]));
        ps.register("b", xavier_uniform(&mut rng, 10, 10, &[10, 10]));
        let sample = sample_param_entries(&ps, 0.05, 1, &mut rng);
        assert_eq!(sample.len(), 10);
        let unique: std::collections::HashSet<_> = sample.iter().collect();
        assert_eq!(unique.len(), sample.len());
    }

    #[test]
    fn param_check_catches_wrong_gradient() {
        let mut ps: ParamStore<f64> = ParamStore::new();
        let id = ps.register("w", ndarray::arr1(&[0.3f64, -0.7]).into_dyn());
        let entries: Vec<(ParamId, usize)> = vec![(id, 0), (id, 1)];
        // loss = sum(w^2), true grad = 2w; feed a deliberately wrong analytic grad
        let mut loss = |ps: &ParamStore<f64>| ps.value(id).iter().map(|x| x * x).sum::<f64>();
        let report = check_param_gradients(
            &mut ps,
            &entries,
            &(|_, _| 0.123f64),
            1e-6,
            &mut loss,
        );
        assert!(report.max_rel_err > 0.1);
        // and the correct analytic gradient passes
        let w0 = 0.3f64;
        let w1 = -0.7f64;
        let correct = move |_id: ParamId, flat: usize| if flat == 0 { 2.0 * w0 } else { 2.0 * w1 };
        let report = check_param_gradients(&mut ps, &entries, &correct, 1e-6, &mut loss);
        assert!(report.max_rel_err < 1e-8, "err {}", report.max_rel_err);
    }
}
