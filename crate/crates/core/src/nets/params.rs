use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NormStats, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Named parameter tensors of one network, stored in `f32`.
/// Non-trainable entries hold running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub values: Vec<Tensor<f32>>,
    pub trainable: Vec<bool>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Adds every parameter to `g` as a leaf; trainable ones get gradients
    /// when `requires_grad` is set.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.values
            .iter()
            .zip(&self.trainable)
            .map(|(v, &t)| g.leaf(v.cast(), requires_grad && t))
            .collect()
    }

    /// Like [`bind`](Self::bind) but from externally supplied values.
    pub fn bind_values<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        values: &[Tensor<T>],
        requires_grad: bool,
    ) -> Vec<Var> {
        values
            .iter()
            .zip(&self.trainable)
            .map(|(v, &t)| g.leaf(v.clone(), requires_grad && t))
            .collect()
    }

    pub fn cast<T: Scalar>(&self) -> Vec<Tensor<T>> {
        self.values.iter().map(Tensor::cast).collect()
    }

    /// Raw little-endian bytes of every tensor in order.
    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 4);
        for v in &self.values {
            for x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Replaces values with `other`'s after checking names and shapes agree.
    pub fn load_from(&mut self, other: ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Shape("parameter names do not match architecture".into()));
        }
        for (a, b) in self.values.iter().zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "parameter shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        self.values = other.values;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Instance,
    Batch,
    None,
}

pub const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvIdx {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIdx {
    pub kind: Norm,
    /// Running mean / variance buffers (batch norm only).
    pub running: Option<(usize, usize)>,
}

/// Forward-pass context: training mode and batch-norm statistics produced
/// during the pass.
pub struct ForwardCtx<T> {
    pub train: bool,
    pub(crate) batch_stats: Vec<((usize, usize), NormStats<T>)>,
}

impl<T: Scalar> ForwardCtx<T> {
    pub fn train() -> Self {
        ForwardCtx {
            train: true,
            batch_stats: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            batch_stats: Vec::new(),
        }
    }

    /// Folds collected batch statistics into the running buffers.
    pub fn update_running_stats(&self, params: &mut ParamSet) {
        for ((mi, vi), stats) in &self.batch_stats {
            for (r, m) in params.values[*mi].data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * Scalar::as_f32(*m);
            }
            for (r, v) in params.values[*vi].data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * Scalar::as_f32(*v);
            }
        }
    }
}

pub(crate) struct ParamBuilder {
    set: ParamSet,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            set: ParamSet {
                names: Vec::new(),
                values: Vec::new(),
                trainable: Vec::new(),
            },
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, name: String, value: Tensor<f32>, trainable: bool) -> usize {
        self.set.names.push(name);
        self.set.values.push(value);
        self.set.trainable.push(trainable);
        self.set.values.len() - 1
    }

    /// He-normal weights scaled by `gain`, zero bias.
    pub fn conv(&mut self, name: &str, ci: usize, co: usize, k: usize, stride: usize, gain: f32) -> ConvIdx {
        let fan_in = (ci * k * k * k) as f32;
        let std = gain * (2.0 / fan_in).sqrt();
        let n = co * ci * k * k * k;
        let data: Vec<f32> = if std > 0.0 {
            let dist = Normal::new(0.0f32, std).expect("valid std");
            (0..n).map(|_| dist.sample(&mut self.rng)).collect()
        } else {
            vec![0.0; n]
        };
        let w = self.push(format!("{name}.weight"), Tensor::new(vec![co, ci, k, k, k], data), true);
        let b = self.push(format!("{name}.bias"), Tensor::zeros(vec![co]), true);
        ConvIdx { w, b, stride }
    }

    pub fn norm(&mut self, name: &str, kind: Norm, channels: usize) -> NormIdx {
        let running = (kind == Norm::Batch).then(|| {
            let m = self.push(format!("{name}.running_mean"), Tensor::zeros(vec![channels]), false);
            let v = self.push(
                format!("{name}.running_var"),
                Tensor::new(vec![channels], vec![1.0; channels]),
                false,
            );
            (m, v)
        });
        NormIdx { kind, running }
    }

    pub fn finish(self) -> ParamSet {
        self.set
    }
}

pub(crate) fn apply_conv<T: Scalar>(g: &mut Graph<T>, p: &[Var], c: ConvIdx, x: Var) -> Var {
    g.conv3d(x, p[c.w], Some(p[c.b]), c.stride)
}

pub(crate) fn apply_norm<T: Scalar>(
    g: &mut Graph<T>,
    p: &[Var],
    n: NormIdx,
    x: Var,
    ctx: &mut ForwardCtx<T>,
) -> Var {
    match n.kind {
        Norm::None => x,
        Norm::Instance => g.instance_norm(x, NORM_EPS),
        Norm::Batch => {
            let (mi, vi) = n.running.expect("batch norm buffers");
            if ctx.train {
                let (y, stats) = g.batch_norm(x, NORM_EPS);
                ctx.batch_stats.push(((mi, vi), stats));
                y
            } else {
                let mean = g.value(p[mi]).data().to_vec();
                let scale: Vec<T> = g
                    .value(p[vi])
                    .data()
                    .iter()
                    .map(|&v| T::one() / (v + T::of(NORM_EPS)).sqrt())
                    .collect();
                g.affine_channels(x, &mean, &scale)
            }
        }
    }
}
