//! Tape operations. Each op computes its value eagerly and records a
//! backward closure producing one gradient per parent.
//!
//! All outputs (values and gradients) are owned, standard-layout arrays.

use super::{Graph, NodeId, Scalar};
use ndarray::{arr0, concatenate, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Slice};
use std::rc::Rc;

fn view2<F: Scalar>(a: &ArrayD<F>, m: usize, k: usize) -> ArrayView2<'_, F> {
    ArrayView2::from_shape((m, k), a.as_slice().expect("non-contiguous tape value"))
        .expect("view2: shape mismatch")
}

fn index2<F: Scalar>(a: &ArrayD<F>, i: usize) -> ArrayView2<'_, F> {
    a.view()
        .index_axis_move(Axis(0), i)
        .into_dimensionality::<Ix2>()
        .expect("index2: not 3-d")
}

fn rolled<F: Scalar>(a: &ArrayD<F>, shifts: &[isize]) -> ArrayD<F> {
    let mut cur = a.clone();
    for (axis, &s) in shifts.iter().enumerate() {
        let n = cur.shape()[axis] as isize;
        if n == 0 {
            continue;
        }
        let s = s.rem_euclid(n);
        if s == 0 {
            continue;
        }
        let split = n - s;
        let head = cur.slice_axis(Axis(axis), Slice::from(split..));
        let tail = cur.slice_axis(Axis(axis), Slice::from(..split));
        cur = concatenate(Axis(axis), &[head, tail]).expect("roll: concat");
    }
    cur.as_standard_layout().into_owned()
}

/// Sample positions and interpolation weight for bilinear resampling with
/// the half-pixel (align_corners = false) convention.
fn lerp_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let s = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
            let s = s.clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

fn stable_sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

impl<F: Scalar> Graph<F> {
    /// 0-dimensional constant.
    pub fn scalar(&mut self, v: F) -> NodeId {
        self.leaf(arr0(v).into_dyn())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let out = &*av + &*bv;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
        let out = &*av - &*bv;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g| vec![g.clone(), g.mapv(|x| -x)])),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let out = &*av * &*bv;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g * &*bv, g * &*av])),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let av = self.value_rc(a);
        let out = &*av * c;
        self.push(out, vec![a], Some(Box::new(move |g| vec![g * c])))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: F) -> NodeId {
        let av = self.value_rc(a);
        let out = av.mapv(|x| x + c);
        self.push(out, vec![a], Some(Box::new(|g| vec![g.clone()])))
    }

    /// Add a non-differentiated constant array of the same shape
    /// (attention masks and similar).
    pub fn add_const(&mut self, a: NodeId, c: &ArrayD<F>) -> NodeId {
        let av = self.value_rc(a);
        assert_eq!(av.shape(), c.shape(), "add_const: shape mismatch");
        let out = &*av + c;
        self.push(out, vec![a], Some(Box::new(|g| vec![g.clone()])))
    }

    /// `a + v` with `v` of shape `(d,)` broadcast over all leading axes of `a`.
    pub fn add_bcast_last(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let av = self.value_rc(a);
        let vv = self.value_rc(v);
        let d = *av.shape().last().expect("add_bcast_last: 0-d input");
        assert_eq!(vv.shape(), [d], "add_bcast_last: vector shape");
        let out = &*av + &*vv;
        self.push(
            out,
            vec![a, v],
            Some(Box::new(move |g| {
                let gs = g.as_slice().expect("grad layout");
                let mut acc = vec![F::zero(); d];
                for chunk in gs.chunks_exact(d) {
                    for (s, x) in acc.iter_mut().zip(chunk) {
                        *s = *s + *x;
                    }
                }
                vec![
                    g.clone(),
                    ArrayD::from_shape_vec(IxDyn(&[d]), acc).unwrap(),
                ]
            })),
        )
    }

    /// `a ⊙ v` with `v` of shape `(d,)` broadcast over all leading axes of `a`.
    pub fn mul_bcast_last(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let av = self.value_rc(a);
        let vv = self.value_rc(v);
        let d = *av.shape().last().expect("mul_bcast_last: 0-d input");
        assert_eq!(vv.shape(), [d], "mul_bcast_last: vector shape");
        let out = &*av * &*vv;
        self.push(
            out,
            vec![a, v],
            Some(Box::new(move |g| {
                let ga = g * &*vv;
                let gs = g.as_slice().expect("grad layout");
                let xs = av.as_slice().expect("value layout");
                let mut acc = vec![F::zero(); d];
                for (gc, xc) in gs.chunks_exact(d).zip(xs.chunks_exact(d)) {
                    for ((s, gi), xi) in acc.iter_mut().zip(gc).zip(xc) {
                        *s = *s + *gi * *xi;
                    }
                }
                vec![ga, ArrayD::from_shape_vec(IxDyn(&[d]), acc).unwrap()]
            })),
        )
    }

    /// `a + b` with `b` broadcast over the leading axes of `a`
    /// (trailing dims of `a` must equal the shape of `b`).
    pub fn add_bcast0(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        let bn = bv.ndim();
        assert!(av.ndim() >= bn && &av.shape()[av.ndim() - bn..] == bv.shape());
        let out = &*av + &*bv;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let mut gb = g.clone();
                while gb.ndim() > bn {
                    gb = gb.sum_axis(Axis(0));
                }
                vec![g.clone(), gb]
            })),
        )
    }

    /// `x · w` with `x` of shape `(..., k)` and `w` of shape `(k, n)`.
    pub fn matmul_last(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let xv = self.value_rc(x);
        let wv = self.value_rc(w);
        assert_eq!(wv.ndim(), 2, "matmul_last: weight must be 2-d");
        let k = wv.shape()[0];
        let n = wv.shape()[1];
        assert_eq!(*xv.shape().last().unwrap(), k, "matmul_last: inner dim");
        let m = xv.len() / k;
        let mut out_shape: Vec<usize> = xv.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let out2 = view2(&xv, m, k).dot(&view2(&wv, k, n));
        let out = out2
            .into_dyn()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&out_shape))
            .unwrap();
        let x_shape: Vec<usize> = xv.shape().to_vec();
        self.push(
            out,
            vec![x, w],
            Some(Box::new(move |g| {
                let g2 = view2(g, m, n);
                let x2 = view2(&xv, m, k);
                let w2 = view2(&wv, k, n);
                // dot can return column-major output in degenerate cases
                // (inner dimension 1); normalize before reshaping
                let gx = g2
                    .dot(&w2.t())
                    .into_dyn()
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&x_shape))
                    .unwrap();
                let gw = x2
                    .t()
                    .dot(&g2)
                    .into_dyn()
                    .as_standard_layout()
                    .into_owned();
                vec![gx, gw]
            })),
        )
    }

    /// Batched matrix product `(B, m, k) · (B, k, n) -> (B, m, n)`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        assert_eq!(av.ndim(), 3);
        assert_eq!(bv.ndim(), 3);
        let (nb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let n = bv.shape()[2];
        assert_eq!(bv.shape()[0], nb);
        assert_eq!(bv.shape()[1], k);
        let mut out = ArrayD::zeros(IxDyn(&[nb, m, n]));
        for i in 0..nb {
            let prod = index2(&av, i).dot(&index2(&bv, i));
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let mut ga = ArrayD::zeros(av.raw_dim());
                let mut gb = ArrayD::zeros(bv.raw_dim());
                for i in 0..nb {
                    let gi = index2(g, i);
                    ga.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&index2(&bv, i).t()));
                    gb.index_axis_mut(Axis(0), i)
                        .assign(&index2(&av, i).t().dot(&gi));
                }
                vec![ga, gb]
            })),
        )
    }

    /// Batched product against transposed right factor:
    /// `(B, m, k) · (B, n, k)ᵀ -> (B, m, n)`.
    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        assert_eq!(av.ndim(), 3);
        assert_eq!(bv.ndim(), 3);
        let (nb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let n = bv.shape()[1];
        assert_eq!(bv.shape()[0], nb);
        assert_eq!(bv.shape()[2], k);
        let mut out = ArrayD::zeros(IxDyn(&[nb, m, n]));
        for i in 0..nb {
            let prod = index2(&av, i).dot(&index2(&bv, i).t());
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let mut ga = ArrayD::zeros(av.raw_dim());
                let mut gb = ArrayD::zeros(bv.raw_dim());
                for i in 0..nb {
                    let gi = index2(g, i);
                    ga.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&index2(&bv, i)));
                    gb.index_axis_mut(Axis(0), i)
                        .assign(&gi.t().dot(&index2(&av, i)));
                }
                vec![ga, gb]
            })),
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let av = self.value_rc(a);
        let orig: Vec<usize> = av.shape().to_vec();
        let out = av
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![g.clone().into_shape_with_order(IxDyn(&orig)).unwrap()]
            })),
        )
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let av = self.value_rc(a);
        assert_eq!(axes.len(), av.ndim(), "permute: axes arity");
        let out = av
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .into_owned()]
            })),
        )
    }

    /// Cyclic shift along the leading axes; `shifts[i]` rolls axis `i`.
    pub fn roll(&mut self, a: NodeId, shifts: &[isize]) -> NodeId {
        let av = self.value_rc(a);
        assert!(shifts.len() <= av.ndim());
        let out = rolled(&av, shifts);
        let inverse: Vec<isize> = shifts.iter().map(|s| -s).collect();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![rolled(g, &inverse)])),
        )
    }

    /// Zero padding; `pads[i] = (before, after)` per axis.
    pub fn pad_zero(&mut self, a: NodeId, pads: &[(usize, usize)]) -> NodeId {
        let av = self.value_rc(a);
        assert_eq!(pads.len(), av.ndim(), "pad_zero: pads arity");
        let out_shape: Vec<usize> = av
            .shape()
            .iter()
            .zip(pads)
            .map(|(&d, &(b, e))| d + b + e)
            .collect();
        let mut out = ArrayD::zeros(IxDyn(&out_shape));
        let pads_owned: Vec<(usize, usize)> = pads.to_vec();
        {
            let mut interior = out.slice_each_axis_mut(|ax| {
                let (b, _) = pads_owned[ax.axis.index()];
                Slice::from(b as isize..(b + av.shape()[ax.axis.index()]) as isize)
            });
            interior.assign(&av);
        }
        let orig: Vec<usize> = av.shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let inner = g.slice_each_axis(|ax| {
                    let (b, _) = pads_owned[ax.axis.index()];
                    Slice::from(b as isize..(b + orig[ax.axis.index()]) as isize)
                });
                vec![inner.as_standard_layout().into_owned()]
            })),
        )
    }

    /// Concatenate along axis 0.
    pub fn concat0(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let values: Vec<Rc<ArrayD<F>>> = parts.iter().map(|&p| self.value_rc(p)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = concatenate(Axis(0), &views)
            .expect("concat0: shape mismatch")
            .as_standard_layout()
            .into_owned();
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g| {
                let mut grads = Vec::with_capacity(lens.len());
                let mut offset = 0isize;
                for &l in &lens {
                    let part = g.slice_axis(Axis(0), Slice::from(offset..offset + l as isize));
                    grads.push(part.as_standard_layout().into_owned());
                    offset += l as isize;
                }
                grads
            })),
        )
    }

    /// Select rows of a `(N, d)` matrix; duplicate indices accumulate
    /// gradient into the same row (embedding lookup, patch gathering).
    pub fn index_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let av = self.value_rc(a);
        assert_eq!(av.ndim(), 2, "index_rows: matrix input");
        let (n, d) = (av.shape()[0], av.shape()[1]);
        let m = indices.len();
        let src = av.as_slice().expect("value layout");
        let mut data = Vec::with_capacity(m * d);
        for &i in &indices {
            assert!(i < n, "index_rows: row {} out of {}", i, n);
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[m, d]), data).unwrap();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let gs = g.as_slice().expect("grad layout");
                let mut ga = vec![F::zero(); n * d];
                for (j, &i) in indices.iter().enumerate() {
                    let dst = &mut ga[i * d..(i + 1) * d];
                    for (s, x) in dst.iter_mut().zip(&gs[j * d..(j + 1) * d]) {
                        *s = *s + *x;
                    }
                }
                vec![ArrayD::from_shape_vec(IxDyn(&[n, d]), ga).unwrap()]
            })),
        )
    }

    /// Single row of a `(N, d)` matrix as a `(d,)` vector.
    pub fn row(&mut self, a: NodeId, i: usize) -> NodeId {
        let d = self.shape(a)[1];
        let r = self.index_rows(a, vec![i]);
        self.reshape(r, &[d])
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let av = self.value_rc(a);
        let s: F = av.iter().copied().sum();
        let shape = av.raw_dim();
        self.push(
            arr0(s).into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let gs = *g.iter().next().unwrap();
                vec![ArrayD::from_elem(shape.clone(), gs)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        let inv = F::one() / F::from_f64(n as f64);
        let s = self.sum_all(a);
        self.scale(s, inv)
    }

    /// Mean over one axis (the axis is removed from the shape).
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let av = self.value_rc(a);
        let n = av.shape()[axis];
        let inv = F::one() / F::from_f64(n as f64);
        let out = av.sum_axis(Axis(axis)) * inv;
        let full_shape = av.raw_dim();
        self.push(
            out.as_standard_layout().into_owned(),
            vec![a],
            Some(Box::new(move |g| {
                let expanded = g.clone().insert_axis(Axis(axis));
                let bcast = expanded
                    .broadcast(full_shape.clone())
                    .expect("mean_axis: broadcast")
                    .as_standard_layout()
                    .into_owned();
                vec![bcast * inv]
            })),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let av = self.value_rc(a);
        let d = *av.shape().last().expect("softmax_last: 0-d input");
        let src = av.as_slice().expect("value layout");
        let mut data = vec![F::zero(); src.len()];
        for (o, x) in data.chunks_exact_mut(d).zip(src.chunks_exact(d)) {
            let mx = x.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for (oi, &xi) in o.iter_mut().zip(x) {
                let e = (xi - mx).exp();
                *oi = e;
                sum = sum + e;
            }
            let inv = F::one() / sum;
            for oi in o.iter_mut() {
                *oi = *oi * inv;
            }
        }
        let out = ArrayD::from_shape_vec(av.raw_dim(), data).unwrap();
        let id = self.push(out, vec![a], None);
        let yv = self.value_rc(id);
        self.nodes[id.0].backward = Some(Box::new(move |g| {
            let ys = yv.as_slice().unwrap();
            let gs = g.as_slice().expect("grad layout");
            let mut gx = vec![F::zero(); ys.len()];
            for ((o, y), gy) in gx
                .chunks_exact_mut(d)
                .zip(ys.chunks_exact(d))
                .zip(gs.chunks_exact(d))
            {
                let mut dot = F::zero();
                for (yi, gi) in y.iter().zip(gy) {
                    dot = dot + *yi * *gi;
                }
                for ((oi, yi), gi) in o.iter_mut().zip(y).zip(gy) {
                    *oi = *yi * (*gi - dot);
                }
            }
            vec![ArrayD::from_shape_vec(IxDyn(yv.shape()), gx).unwrap()]
        }));
        id
    }

    /// Layer normalization over the last axis, without learned affine.
    /// Population variance plus `eps` under the square root.
    pub fn layer_norm_last(&mut self, a: NodeId, eps: f64) -> NodeId {
        let av = self.value_rc(a);
        let d = *av.shape().last().expect("layer_norm_last: 0-d input");
        let epsf = F::from_f64(eps);
        let invd = F::one() / F::from_f64(d as f64);
        let src = av.as_slice().expect("value layout");
        let lanes = src.len() / d;
        let mut data = vec![F::zero(); src.len()];
        let mut inv_stds = Vec::with_capacity(lanes);
        for (o, x) in data.chunks_exact_mut(d).zip(src.chunks_exact(d)) {
            let mut mean = F::zero();
            for &xi in x {
                mean = mean + xi;
            }
            mean = mean * invd;
            let mut var = F::zero();
            for &xi in x {
                let c = xi - mean;
                var = var + c * c;
            }
            var = var * invd;
            let inv_std = F::one() / (var + epsf).sqrt();
            inv_stds.push(inv_std);
            for (oi, &xi) in o.iter_mut().zip(x) {
                *oi = (xi - mean) * inv_std;
            }
        }
        let out = ArrayD::from_shape_vec(av.raw_dim(), data).unwrap();
        let id = self.push(out, vec![a], None);
        let xhat = self.value_rc(id);
        self.nodes[id.0].backward = Some(Box::new(move |g| {
            let hs = xhat.as_slice().unwrap();
            let gs = g.as_slice().expect("grad layout");
            let mut gx = vec![F::zero(); hs.len()];
            for (lane, ((o, h), gy)) in gx
                .chunks_exact_mut(d)
                .zip(hs.chunks_exact(d))
                .zip(gs.chunks_exact(d))
                .enumerate()
            {
                let inv_std = inv_stds[lane];
                let mut m1 = F::zero();
                let mut m2 = F::zero();
                for (hi, gi) in h.iter().zip(gy) {
                    m1 = m1 + *gi;
                    m2 = m2 + *gi * *hi;
                }
                m1 = m1 * invd;
                m2 = m2 * invd;
                for ((oi, hi), gi) in o.iter_mut().zip(h).zip(gy) {
                    *oi = inv_std * (*gi - m1 - *hi * m2);
                }
            }
            vec![ArrayD::from_shape_vec(IxDyn(xhat.shape()), gx).unwrap()]
        }));
        id
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let av = self.value_rc(a);
        let c = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let k = F::from_f64(0.044_715);
        let half = F::from_f64(0.5);
        let three = F::from_f64(3.0);
        let out = av.mapv(|x| {
            let u = c * (x + k * x * x * x);
            half * x * (F::one() + u.tanh())
        });
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let deriv = av.mapv(|x| {
                    let u = c * (x + k * x * x * x);
                    let t = u.tanh();
                    half * (F::one() + t)
                        + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x)
                });
                vec![g * &deriv]
            })),
        )
    }

    /// SiLU (x · sigmoid(x)).
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let av = self.value_rc(a);
        let out = av.mapv(|x| x * stable_sigmoid(x));
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let deriv = av.mapv(|x| {
                    let s = stable_sigmoid(x);
                    s * (F::one() + x * (F::one() - s))
                });
                vec![g * &deriv]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let av = self.value_rc(a);
        let out = av.mapv(stable_sigmoid);
        let id = self.push(out, vec![a], None);
        let yv = self.value_rc(id);
        self.nodes[id.0].backward = Some(Box::new(move |g| {
            let deriv = yv.mapv(|y| y * (F::one() - y));
            vec![g * &deriv]
        }));
        id
    }

    /// Bilinear resampling of a `(h, w)` grid to `(out_h, out_w)`,
    /// half-pixel coordinate convention (align_corners = false).
    pub fn upsample_bilinear2d(&mut self, a: NodeId, out_h: usize, out_w: usize) -> NodeId {
        let av = self.value_rc(a);
        assert_eq!(av.ndim(), 2, "upsample_bilinear2d: 2-d input");
        let (h, w) = (av.shape()[0], av.shape()[1]);
        let ty: Vec<(usize, usize, F)> = lerp_table(h, out_h)
            .into_iter()
            .map(|(i0, i1, t)| (i0, i1, F::from_f64(t)))
            .collect();
        let tx: Vec<(usize, usize, F)> = lerp_table(w, out_w)
            .into_iter()
            .map(|(i0, i1, t)| (i0, i1, F::from_f64(t)))
            .collect();
        let src = av.as_slice().expect("value layout");
        let mut data = vec![F::zero(); out_h * out_w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let a00 = src[y0 * w + x0];
                let a01 = src[y0 * w + x1];
                let a10 = src[y1 * w + x0];
                let a11 = src[y1 * w + x1];
                let top = a00 + (a01 - a00) * wx;
                let bot = a10 + (a11 - a10) * wx;
                data[oy * out_w + ox] = top + (bot - top) * wy;
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[out_h, out_w]), data).unwrap();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let gs = g.as_slice().expect("grad layout");
                let mut ga = vec![F::zero(); h * w];
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let gi = gs[oy * out_w + ox];
                        let one = F::one();
                        ga[y0 * w + x0] = ga[y0 * w + x0] + gi * (one - wy) * (one - wx);
                        ga[y0 * w + x1] = ga[y0 * w + x1] + gi * (one - wy) * wx;
                        ga[y1 * w + x0] = ga[y1 * w + x0] + gi * wy * (one - wx);
                        ga[y1 * w + x1] = ga[y1 * w + x1] + gi * wy * wx;
                    }
                }
                vec![ArrayD::from_shape_vec(IxDyn(&[h, w]), ga).unwrap()]
            })),
        )
    }

    /// Mean binary cross-entropy between logits and a constant target in
    /// [0, 1], in the numerically stable form
    /// `max(z, 0) - z·t + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits_mean(&mut self, z: NodeId, target: &ArrayD<F>) -> NodeId {
        let zv = self.value_rc(z);
        assert_eq!(zv.shape(), target.shape(), "bce: shape mismatch");
        let t = Rc::new(target.as_standard_layout().into_owned());
        let n = zv.len();
        let invn = F::one() / F::from_f64(n as f64);
        let mut total = F::zero();
        for (&zi, &ti) in zv.iter().zip(t.iter()) {
            total = total + zi.max(F::zero()) - zi * ti + (-zi.abs()).exp().ln_1p();
        }
        let out = arr0(total * invn).into_dyn();
        self.push(
            out,
            vec![z],
            Some(Box::new(move |g| {
                let gs = *g.iter().next().unwrap();
                let mut data = Vec::with_capacity(n);
                for (&zi, &ti) in zv.iter().zip(t.iter()) {
                    data.push(gs * (stable_sigmoid(zi) - ti) * invn);
                }
                vec![ArrayD::from_shape_vec(IxDyn(zv.shape()), data).unwrap()]
            })),
        )
    }

    /// Soft intersection-over-union between probabilities and a constant
    /// target: `Σ(p·t) / Σ(p + t − p·t)`. Caller guarantees `Σt > 0`.
    pub fn soft_iou(&mut self, p: NodeId, target: &ArrayD<F>) -> NodeId {
        let pv = self.value_rc(p);
        assert_eq!(pv.shape(), target.shape(), "soft_iou: shape mismatch");
        let t = Rc::new(target.as_standard_layout().into_owned());
        let mut inter = F::zero();
        let mut union = F::zero();
        for (&pi, &ti) in pv.iter().zip(t.iter()) {
            inter = inter + pi * ti;
            union = union + pi + ti - pi * ti;
        }
        let out = arr0(inter / union).into_dyn();
        self.push(
            out,
            vec![p],
            Some(Box::new(move |g| {
                let gs = *g.iter().next().unwrap();
                let d2 = union * union;
                let mut data = Vec::with_capacity(t.len());
                for &ti in t.iter() {
                    data.push(gs * (ti * union - inter * (F::one() - ti)) / d2);
                }
                vec![ArrayD::from_shape_vec(IxDyn(t.shape()), data).unwrap()]
            })),
        )
    }

    /// True when every entry of the node value is finite.
    pub fn all_finite(&self, a: NodeId) -> bool {
        self.value(a).iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check_inputs;
    use super::super::{Graph, NodeId};
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    fn check(
        build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
        shapes: &[&[usize]],
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<ArrayD<f64>> = shapes.iter().map(|s| rand_arr(s, &mut rng)).collect();
        let report = check_inputs(&build, &inputs, 1e-5);
        assert!(
            report.max_rel_err < 1e-6,
            "max relative error {} (checked {})",
            report.max_rel_err,
            report.checked
        );
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check(
            |g, xs| {
                let s = g.add(xs[0], xs[1]);
                let d = g.sub(s, xs[2]);
                let m = g.mul(d, xs[0]);
                let sc = g.scale(m, 0.7);
                let sh = g.add_scalar(sc, 0.3);
                g.mean_all(sh)
            },
            &[&[3, 4], &[3, 4], &[3, 4]],
            1,
        );
    }

    #[test]
    fn broadcast_ops_match_finite_differences() {
        check(
            |g, xs| {
                let a = g.add_bcast_last(xs[0], xs[1]);
                let b = g.mul_bcast_last(a, xs[2]);
                let c = g.add_bcast0(b, xs[3]);
                g.sum_all(c)
            },
            &[&[2, 3, 4], &[4], &[4], &[3, 4]],
            2,
        );
    }

    #[test]
    fn matmul_last_matches_finite_differences() {
        check(
            |g, xs| {
                let y = g.matmul_last(xs[0], xs[1]);
                g.mean_all(y)
            },
            &[&[2, 3, 4], &[4, 5]],
            3,
        );
    }

    #[test]
    fn bmm_variants_match_finite_differences() {
        check(
            |g, xs| {
                let y = g.bmm(xs[0], xs[1]);
                let z = g.bmm_nt(y, xs[2]);
                g.mean_all(z)
            },
            &[&[2, 3, 4], &[2, 4, 5], &[2, 6, 5]],
            4,
        );
    }

    #[test]
    fn shape_ops_match_finite_differences() {
        check(
            |g, xs| {
                let r = g.reshape(xs[0], &[4, 6]);
                let p = g.permute(r, &[1, 0]);
                let rolled = g.roll(p, &[2, -1]);
                let padded = g.pad_zero(rolled, &[(1, 0), (0, 2)]);
                g.mean_all(padded)
            },
            &[&[2, 3, 4]],
            5,
        );
    }

    #[test]
    fn concat_and_index_rows_match_finite_differences() {
        check(
            |g, xs| {
                let c = g.concat0(&[xs[0], xs[1]]);
                let sel = g.index_rows(c, vec![0, 2, 2, 4]);
                g.mean_all(sel)
            },
            &[&[3, 4], &[2, 4]],
            6,
        );
    }

    #[test]
    fn reductions_match_finite_differences() {
        check(
            |g, xs| {
                let m = g.mean_axis(xs[0], 1);
                let s = g.sum_all(m);
                let m2 = g.mean_all(xs[0]);
                let both = g.add(s, m2);
                g.scale(both, 0.5)
            },
            &[&[2, 3, 4]],
            7,
        );
    }

    #[test]
    fn activations_match_finite_differences() {
        check(
            |g, xs| {
                let a = g.gelu(xs[0]);
                let b = g.silu(a);
                let c = g.sigmoid(b);
                g.mean_all(c)
            },
            &[&[3, 5]],
            8,
        );
    }

    #[test]
    fn softmax_matches_finite_differences() {
        // project with a second input so the readout is not constant
        // (the mean of a softmax row is always 1/d)
        check(
            |g, xs| {
                let y = g.softmax_last(xs[0]);
                let w = g.mul(y, xs[1]);
                g.sum_all(w)
            },
            &[&[3, 5], &[3, 5]],
            8,
        );
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        check(
            |g, xs| {
                let y = g.layer_norm_last(xs[0], 1e-5);
                let w = g.mul(y, xs[1]);
                g.mean_all(w)
            },
            &[&[4, 6], &[4, 6]],
            9,
        );
    }

    #[test]
    fn upsample_matches_finite_differences() {
        check(
            |g, xs| {
                let y = g.upsample_bilinear2d(xs[0], 9, 11);
                g.mean_all(y)
            },
            &[&[4, 5]],
            10,
        );
    }

    #[test]
    fn loss_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let target = ArrayD::from_shape_vec(
            IxDyn(&[4, 4]),
            (0..16).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let t1 = target.clone();
        check(
            move |g, xs| {
                let bce = g.bce_with_logits_mean(xs[0], &t1);
                let p = g.sigmoid(xs[0]);
                let iou = g.soft_iou(p, &t1);
                let neg = g.scale(iou, -1.0);
                let loss_iou = g.add_scalar(neg, 1.0);
                g.add(bce, loss_iou)
            },
            &[&[4, 4]],
            12,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g: Graph<f64> = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = g.leaf(rand_arr(&[6, 8], &mut rng));
        let y = g.softmax_last(x);
        for lane in g.value(y).rows() {
            let s: f64 = lane.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tagged_leaf_accumulates_gradient_across_uses() {
        let mut g: Graph<f64> = Graph::new();
        let v = std::rc::Rc::new(ArrayD::from_elem(IxDyn(&[2]), 1.5));
        let a = g.leaf_tagged(v.clone(), 7);
        let b = g.leaf_tagged(v, 7);
        assert_eq!(a, b);
        let s = g.add(a, b);
        let loss = g.sum_all(s);
        let grads = g.backward(loss);
        let ga = grads.wrt(a).unwrap();
        assert_eq!(ga[[0]], 2.0);
    }

    #[test]
    fn roll_then_inverse_roll_is_identity() {
        let mut g: Graph<f64> = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let arr = rand_arr(&[3, 4, 5], &mut rng);
        let x = g.leaf(arr.clone());
        let r = g.roll(x, &[1, -2, 3]);
        let back = g.roll(r, &[-1, 2, -3]);
        assert_eq!(g.value(back), &arr);
    }

    #[test]
    fn upsample_preserves_corner_samples() {
        let mut g: Graph<f64> = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let arr = rand_arr(&[4, 4], &mut rng);
        let x = g.leaf(arr.clone());
        let y = g.upsample_bilinear2d(x, 16, 16);
        let v = g.value(y);
        assert_eq!(v[[0, 0]], arr[[0, 0]]);
        assert_eq!(v[[0, 15]], arr[[0, 3]]);
        assert_eq!(v[[15, 0]], arr[[3, 0]]);
        assert_eq!(v[[15, 15]], arr[[3, 3]]);
    }
}
