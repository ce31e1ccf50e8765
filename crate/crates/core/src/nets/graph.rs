//! Tape-based reverse-mode autodiff over `[N, C, D, H, W]` tensors.
//!
//! Every op computes its value eagerly when recorded. `backward` walks the
//! tape in reverse, skipping nodes that do not depend on a leaf created with
//! `requires_grad = true`.

use super::conv::{conv3d_backward, conv3d_forward};
use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A scalar-valued differentiable function of one or more graph tensors.
/// Loss terms implement this so their formulas live next to their
/// definitions rather than inside the engine.
pub trait ScalarObjective<T: Scalar> {
    fn value(&self, inputs: &[&Tensor<T>]) -> T;
    /// Gradient of the value w.r.t. each input (same shapes).
    fn gradient(&self, inputs: &[&Tensor<T>]) -> Vec<Tensor<T>>;
}

enum Op<T: Scalar> {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
    },
    Upsample2 {
        x: usize,
    },
    /// Zero-mean unit-variance normalization; `per_sample` selects instance
    /// (per sample and channel) over batch (per channel across samples).
    Normalize {
        x: usize,
        inv_std: Vec<T>,
        per_sample: bool,
    },
    AffineChannels {
        x: usize,
        scale: Vec<T>,
    },
    LeakyRelu {
        x: usize,
        slope: T,
    },
    Sigmoid {
        x: usize,
    },
    SoftmaxChannels {
        x: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    LogitClamped {
        x: usize,
        eps: T,
    },
    Objective {
        inputs: Vec<usize>,
        f: Box<dyn ScalarObjective<T>>,
    },
    WeightedSum {
        terms: Vec<(usize, T)>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Group statistics of a normalization op: per group (mean, biased variance).
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// New constant leaf holding a copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        assert_eq!(xs.len(), 5, "conv input must be [N, C, D, H, W]");
        assert_eq!(xs[1], ws[1], "conv input channels {} vs weight {:?}", xs[1], ws);
        let value = conv3d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
        );
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        self.push(
            value,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                stride,
            },
            &inputs,
        )
    }

    /// Nearest-neighbor ×2 upsampling on all three spatial axes.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (nc, d, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
        let mut out = Tensor::zeros(vec![s[0], s[1], 2 * d, 2 * h, 2 * w]);
        {
            let src = xv.data();
            let dst = out.data_mut();
            let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
            for c in 0..nc {
                for z in 0..od {
                    for y in 0..oh {
                        let srow = &src[((c * d + z / 2) * h + y / 2) * w..][..w];
                        let drow = &mut dst[((c * od + z) * oh + y) * ow..][..ow];
                        for xx in 0..ow {
                            drow[xx] = srow[xx / 2];
                        }
                    }
                }
            }
        }
        self.push(out, Op::Upsample2 { x: x.0 }, &[x.0])
    }

    fn normalize(&mut self, x: Var, eps: f64, per_sample: bool) -> (Var, NormStats<T>) {
        let xv = self.value(x);
        let s = xv.shape();
        let (n, c, sp) = (s[0], s[1], xv.spatial());
        let groups = if per_sample { n * c } else { c };
        let count = if per_sample { sp } else { n * sp };
        let mut mean = vec![T::zero(); groups];
        let mut var = vec![T::zero(); groups];
        let group_of = |ni: usize, ci: usize| if per_sample { ni * c + ci } else { ci };
        let data = xv.data();
        for ni in 0..n {
            for ci in 0..c {
                let g = group_of(ni, ci);
                let sum = data[(ni * c + ci) * sp..][..sp]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v);
                mean[g] = mean[g] + sum;
            }
        }
        let cnt = T::of(count as f64);
        mean.iter_mut().for_each(|m| *m = *m / cnt);
        for ni in 0..n {
            for ci in 0..c {
                let g = group_of(ni, ci);
                let m = mean[g];
                let ss = data[(ni * c + ci) * sp..][..sp]
                    .iter()
                    .fold(T::zero(), |a, &v| a + (v - m) * (v - m));
                var[g] = var[g] + ss;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / cnt);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let mut out = Tensor::zeros(s.to_vec());
        for ni in 0..n {
            for ci in 0..c {
                let g = group_of(ni, ci);
                let off = (ni * c + ci) * sp;
                for (o, &v) in out.data_mut()[off..off + sp].iter_mut().zip(&data[off..off + sp]) {
                    *o = (v - mean[g]) * inv_std[g];
                }
            }
        }
        let var_out = self.push(
            out,
            Op::Normalize {
                x: x.0,
                inv_std,
                per_sample,
            },
            &[x.0],
        );
        (var_out, NormStats { mean, var })
    }

    /// Per-sample, per-channel normalization (no affine).
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        self.normalize(x, eps, true).0
    }

    /// Per-channel normalization over batch and space; returns batch stats.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> (Var, NormStats<T>) {
        self.normalize(x, eps, false)
    }

    /// `y = (x - shift_c) · scale_c` with constant per-channel coefficients.
    pub fn affine_channels(&mut self, x: Var, shift: &[T], scale: &[T]) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (n, c, sp) = (s[0], s[1], xv.spatial());
        let mut out = xv.clone();
        for ni in 0..n {
            for ci in 0..c {
                out.data_mut()[(ni * c + ci) * sp..][..sp]
                    .iter_mut()
                    .for_each(|v| *v = (*v - shift[ci]) * scale[ci]);
            }
        }
        self.push(
            out,
            Op::AffineChannels {
                x: x.0,
                scale: scale.to_vec(),
            },
            &[x.0],
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::of(slope);
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = if *v > T::zero() { *v } else { *v * slope });
        self.push(out, Op::LeakyRelu { x: x.0, slope }, &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = T::one() / (T::one() + (-*v).exp()));
        self.push(out, Op::Sigmoid { x: x.0 }, &[x.0])
    }

    /// Softmax across the channel axis at each voxel.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (n, c, sp) = (s[0], s[1], xv.spatial());
        let mut out = xv.clone();
        let d = out.data_mut();
        for ni in 0..n {
            let base = ni * c * sp;
            for i in 0..sp {
                let mut m = T::neg_infinity();
                for k in 0..c {
                    m = m.max(d[base + k * sp + i]);
                }
                let mut z = T::zero();
                for k in 0..c {
                    let e = (d[base + k * sp + i] - m).exp();
                    d[base + k * sp + i] = e;
                    z = z + e;
                }
                for k in 0..c {
                    d[base + k * sp + i] = d[base + k * sp + i] / z;
                }
            }
        }
        self.push(out, Op::SoftmaxChannels { x: x.0 }, &[x.0])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        assert_eq!(sa[0], sb[0]);
        assert_eq!(&sa[2..], &sb[2..], "concat spatial mismatch");
        let n = sa[0];
        let (la, lb) = (av.len() / n, bv.len() / n);
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for ni in 0..n {
            data.extend_from_slice(&av.data()[ni * la..(ni + 1) * la]);
            data.extend_from_slice(&bv.data()[ni * lb..(ni + 1) * lb]);
        }
        let mut shape = sa.to_vec();
        shape[1] = sa[1] + sb[1];
        self.push(Tensor::new(shape, data), Op::Concat { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape());
        out.add_assign(self.value(b));
        self.push(out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// `ln(c / (1 - c))` with `c = clamp(x, eps, 1 - eps)`.
    pub fn logit_clamped(&mut self, x: Var, eps: f64) -> Var {
        let eps = T::of(eps);
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| {
            let c = v.max(eps).min(T::one() - eps);
            *v = (c / (T::one() - c)).ln();
        });
        self.push(out, Op::LogitClamped { x: x.0, eps }, &[x.0])
    }

    pub fn objective(&mut self, inputs: &[Var], f: Box<dyn ScalarObjective<T>>) -> Var {
        let value = {
            let refs: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
            f.value(&refs)
        };
        let idx: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        self.push(
            Tensor::scalar(value),
            Op::Objective {
                inputs: idx.clone(),
                f,
            },
            &idx,
        )
    }

    /// `Σ w_i · s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = T::zero();
        for (v, w) in terms {
            total = total + self.value(*v).item() * T::of(*w);
        }
        let idx: Vec<usize> = terms.iter().map(|(v, _)| v.0).collect();
        self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                terms: terms.iter().map(|(v, w)| (v.0, T::of(*w))).collect(),
            },
            &idx,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(
            self.value(root).shape().to_vec(),
            vec![T::one()],
        ));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let needs = |j: usize| self.nodes[j].requires_grad;
        let mut acc = |j: usize, g: Tensor<T>| match &mut grads[j] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, stride } => {
                let (gx, gw, gb) = conv3d_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    *stride,
                    gout,
                    needs(*x),
                    needs(*w),
                    b.is_some_and(needs),
                );
                if let Some(g) = gx {
                    acc(*x, g);
                }
                if let Some(g) = gw {
                    acc(*w, g);
                }
                if let (Some(b), Some(g)) = (b, gb) {
                    acc(*b, g);
                }
            }
            Op::Upsample2 { x } => {
                let s = self.nodes[*x].value.shape();
                let (nc, d, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
                let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
                let mut g = Tensor::zeros(s.to_vec());
                let src = gout.data();
                let dst = g.data_mut();
                for c in 0..nc {
                    for z in 0..od {
                        for y in 0..oh {
                            let srow = &src[((c * od + z) * oh + y) * ow..][..ow];
                            let base = ((c * d + z / 2) * h + y / 2) * w;
                            for xx in 0..ow {
                                dst[base + xx / 2] = dst[base + xx / 2] + srow[xx];
                            }
                        }
                    }
                }
                acc(*x, g);
            }
            Op::Normalize {
                x,
                inv_std,
                per_sample,
            } => {
                let y = &node.value;
                let s = y.shape();
                let (n, c, sp) = (s[0], s[1], y.spatial());
                let count = if *per_sample { sp } else { n * sp };
                let groups = inv_std.len();
                let group_of = |ni: usize, ci: usize| if *per_sample { ni * c + ci } else { ci };
                let mut mean_g = vec![T::zero(); groups];
                let mut mean_gy = vec![T::zero(); groups];
                for ni in 0..n {
                    for ci in 0..c {
                        let g = group_of(ni, ci);
                        let off = (ni * c + ci) * sp;
                        for k in off..off + sp {
                            mean_g[g] = mean_g[g] + gout.data()[k];
                            mean_gy[g] = mean_gy[g] + gout.data()[k] * y.data()[k];
                        }
                    }
                }
                let cnt = T::of(count as f64);
                let mut gx = Tensor::zeros(s.to_vec());
                for ni in 0..n {
                    for ci in 0..c {
                        let g = group_of(ni, ci);
                        let (mg, mgy) = (mean_g[g] / cnt, mean_gy[g] / cnt);
                        let off = (ni * c + ci) * sp;
                        for k in off..off + sp {
                            gx.data_mut()[k] =
                                inv_std[g] * (gout.data()[k] - mg - y.data()[k] * mgy);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::AffineChannels { x, scale } => {
                let s = gout.shape();
                let (n, c, sp) = (s[0], s[1], gout.spatial());
                let mut g = gout.clone();
                for ni in 0..n {
                    for ci in 0..c {
                        g.data_mut()[(ni * c + ci) * sp..][..sp]
                            .iter_mut()
                            .for_each(|v| *v = *v * scale[ci]);
                    }
                }
                acc(*x, g);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = &self.nodes[*x].value;
                let mut g = gout.clone();
                for (gv, &v) in g.data_mut().iter_mut().zip(xv.data()) {
                    if v <= T::zero() {
                        *gv = *gv * *slope;
                    }
                }
                acc(*x, g);
            }
            Op::Sigmoid { x } => {
                let mut g = gout.clone();
                for (gv, &y) in g.data_mut().iter_mut().zip(node.value.data()) {
                    *gv = *gv * y * (T::one() - y);
                }
                acc(*x, g);
            }
            Op::SoftmaxChannels { x } => {
                let y = &node.value;
                let s = y.shape();
                let (n, c, sp) = (s[0], s[1], y.spatial());
                let mut g = Tensor::zeros(s.to_vec());
                for ni in 0..n {
                    let base = ni * c * sp;
                    for i in 0..sp {
                        let mut dot = T::zero();
                        for k in 0..c {
                            dot = dot + gout.data()[base + k * sp + i] * y.data()[base + k * sp + i];
                        }
                        for k in 0..c {
                            let j = base + k * sp + i;
                            g.data_mut()[j] = y.data()[j] * (gout.data()[j] - dot);
                        }
                    }
                }
                acc(*x, g);
            }
            Op::Concat { a, b } => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let sb = self.nodes[*b].value.shape().to_vec();
                let n = sa[0];
                let la: usize = sa[1..].iter().product();
                let lb: usize = sb[1..].iter().product();
                if needs(*a) {
                    let mut d = Vec::with_capacity(n * la);
                    for ni in 0..n {
                        d.extend_from_slice(&gout.data()[ni * (la + lb)..][..la]);
                    }
                    acc(*a, Tensor::new(sa, d));
                }
                if needs(*b) {
                    let mut d = Vec::with_capacity(n * lb);
                    for ni in 0..n {
                        d.extend_from_slice(&gout.data()[ni * (la + lb) + la..][..lb]);
                    }
                    acc(*b, Tensor::new(sb, d));
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    acc(*a, gout.clone());
                }
                if needs(*b) {
                    acc(*b, gout.clone());
                }
            }
            Op::LogitClamped { x, eps } => {
                let xv = &self.nodes[*x].value;
                let mut g = gout.clone();
                for (gv, &v) in g.data_mut().iter_mut().zip(xv.data()) {
                    if v < *eps || v > T::one() - *eps {
                        *gv = T::zero();
                    } else {
                        *gv = *gv / (v * (T::one() - v));
                    }
                }
                acc(*x, g);
            }
            Op::Objective { inputs, f } => {
                let refs: Vec<&Tensor<T>> = inputs.iter().map(|&j| &self.nodes[j].value).collect();
                let scale = gout.item();
                for (j, mut g) in inputs.iter().zip(f.gradient(&refs)) {
                    if needs(*j) {
                        g.data_mut().iter_mut().for_each(|v| *v = *v * scale);
                        acc(*j, g);
                    }
                }
            }
            Op::WeightedSum { terms } => {
                for &(j, w) in terms {
                    if needs(j) {
                        acc(j, Tensor::new(vec![], vec![gout.item() * w]));
                    }
                }
            }
        }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
