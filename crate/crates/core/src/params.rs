//! Named parameter tensors, seeded initialization, and AdamW.

use crate::autodiff::{Gradients, Graph, NodeId, Scalar};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::rc::Rc;

/// Handle to a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat store of named parameter tensors. Registration order is the
/// serialization order, so initialization and checkpoints are reproducible.
pub struct ParamStore<F: Scalar> {
    names: Vec<String>,
    values: Vec<Rc<ArrayD<F>>>,
    trainable: Vec<bool>,
    by_name: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: ArrayD<F>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(Rc::new(value));
        self.trainable.push(true);
        self.by_name.insert(name.to_string(), id.0);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar entries across all tensors.
    pub fn total_len(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn trainable_len(&self) -> usize {
        self.values
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(v, _)| v.len())
            .sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn rc(&self, id: ParamId) -> Rc<ArrayD<F>> {
        Rc::clone(&self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<F>) {
        assert_eq!(value.shape(), self.values[id.0].shape());
        self.values[id.0] = Rc::new(value);
    }

    pub fn entry(&self, id: ParamId, flat: usize) -> F {
        self.values[id.0].as_slice().expect("param layout")[flat]
    }

    pub fn set_entry(&mut self, id: ParamId, flat: usize, v: F) {
        let arr = Rc::make_mut(&mut self.values[id.0]);
        arr.as_slice_mut().expect("param layout")[flat] = v;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    /// Mark every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for i in 0..self.names.len() {
            if self.names[i].starts_with(prefix) {
                self.trainable[i] = trainable;
            }
        }
    }

    /// Leaf node for this parameter; repeated calls within one graph
    /// return the same node so the gradient accumulates.
    pub fn node(&self, g: &mut Graph<F>, id: ParamId) -> NodeId {
        g.leaf_tagged(self.rc(id), id.0)
    }

    /// Same tensors converted to another element type (used to run
    /// double-precision checks over parameters trained at f32).
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for i in 0..self.values.len() {
            let arr = self.values[i].mapv(|x| G::from_f64(x.into_f64()));
            let id = out.register(&self.names[i], arr);
            out.set_trainable(id, self.trainable[i]);
        }
        out
    }
}

/// Pull per-parameter gradients out of a finished backward pass.
pub fn collect_param_grads<F: Scalar>(
    g: &Graph<F>,
    grads: &mut Gradients<F>,
) -> HashMap<ParamId, ArrayD<F>> {
    let tagged: Vec<(usize, NodeId)> = g.tagged_nodes().collect();
    let mut out = HashMap::with_capacity(tagged.len());
    for (tag, node) in tagged {
        if let Some(ga) = grads.take(node) {
            out.insert(ParamId(tag), ga);
        }
    }
    out
}

/// Xavier/Glorot uniform init. Samples are drawn in f64 so the stream is
/// identical across element types.
pub fn xavier_uniform<F: Scalar>(
    rng: &mut ChaCha8Rng,
    fan_in: usize,
    fan_out: usize,
    shape: &[usize],
) -> ArrayD<F> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| F::from_f64(rng.random_range(-a..a)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Zero-mean normal init with the given standard deviation.
pub fn normal_init<F: Scalar>(rng: &mut ChaCha8Rng, std: f64, shape: &[usize]) -> ArrayD<F> {
    let n: usize = shape.iter().product();
    let dist = rand_distr::Normal::new(0.0f64, std).expect("normal std");
    let data: Vec<F> = (0..n)
        .map(|_| F::from_f64(rng.sample(dist)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(shape), F::one())
}

/// AdamW with decoupled weight decay.
///
/// A parameter with no gradient this step is treated as having a zero
/// gradient: moments decay and weight decay still applies. Frozen
/// parameters are untouched.
pub struct AdamW<F: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
    t: u64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(store: &ParamStore<F>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let m = store
            .ids()
            .map(|id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            m,
            v,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[ArrayD<F>], &[ArrayD<F>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, m: Vec<ArrayD<F>>, v: Vec<ArrayD<F>>, t: u64) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.m = m;
        self.v = v;
        self.t = t;
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &HashMap<ParamId, ArrayD<F>>,
        lr: f64,
    ) {
        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bc1 = F::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = F::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lrf = F::from_f64(lr);
        let epsf = F::from_f64(self.eps);
        let wdf = F::from_f64(self.weight_decay);
        for id in store.ids() {
            if !store.is_trainable(id) {
                continue;
            }
            let zero_grad;
            let g = match grads.get(&id) {
                Some(g) => g,
                None => {
                    zero_grad = ArrayD::zeros(store.value(id).raw_dim());
                    &zero_grad
                }
            };
            let m = &mut self.m[id.0];
            let vv = &mut self.v[id.0];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mi, &gi| {
                *mi = b1 * *mi + (one - b1) * gi;
            });
            ndarray::Zip::from(&mut *vv).and(g).for_each(|vi, &gi| {
                *vi = b2 * *vi + (one - b2) * gi * gi;
            });
            let mut value = store.rc(id);
            let arr = Rc::make_mut(&mut value);
            ndarray::Zip::from(&mut *arr)
                .and(&*m)
                .and(&*vv)
                .for_each(|p, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *p = *p - lrf * (mhat / (vhat.sqrt() + epsf) + wdf * *p);
                });
            store.values[id.0] = value;
        }
    }
}
