use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{apply_conv, apply_norm, ConvIdx, ForwardCtx, Norm, NormIdx, ParamBuilder, ParamSet};
use super::tensor::{Scalar, Tensor};
use crate::data::Volume;
use crate::error::{Error, Result};

const SLOPE: f64 = 0.01;
/// Input clamp before the logit skip path.
pub const LOGIT_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub channels: usize,
    pub base_width: usize,
    pub downsampling: usize,
    pub residual_blocks: usize,
    pub norm: Norm,
    /// Init gain of the output convolution; 0 makes the untrained
    /// generator the identity on `[LOGIT_EPS, 1 - LOGIT_EPS]`.
    pub head_init_gain: f32,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            channels: 4,
            base_width: 8,
            downsampling: 2,
            residual_blocks: 4,
            norm: Norm::Instance,
            head_init_gain: 1.0,
        }
    }
}

struct Block {
    conv: ConvIdx,
    norm: NormIdx,
}

/// Encoder / residual / decoder translator. The network predicts a
/// residual in logit space: `y = sigmoid(logit(clamp(x)) + r(x))`, so the
/// output is bounded to (0, 1) and shape-preserving.
pub struct Generator {
    pub spec: GeneratorSpec,
    pub params: ParamSet,
    stem: Block,
    down: Vec<Block>,
    res: Vec<(Block, Block)>,
    up: Vec<Block>,
    head: ConvIdx,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        if spec.channels == 0 || spec.base_width == 0 {
            return Err(Error::InvalidArgument("generator widths must be positive".into()));
        }
        let mut b = ParamBuilder::new(seed);
        let w = |l: usize| spec.base_width << l;
        let block = |b: &mut ParamBuilder, name: &str, ci, co, stride| Block {
            conv: b.conv(name, ci, co, 3, stride, 1.0),
            norm: b.norm(&format!("{name}.norm"), spec.norm, co),
        };
        let stem = block(&mut b, "stem", spec.channels, w(0), 1);
        let down = (0..spec.downsampling)
            .map(|i| block(&mut b, &format!("down{i}"), w(i), w(i + 1), 2))
            .collect();
        let wr = w(spec.downsampling);
        let res = (0..spec.residual_blocks)
            .map(|i| {
                (
                    block(&mut b, &format!("res{i}.0"), wr, wr, 1),
                    block(&mut b, &format!("res{i}.1"), wr, wr, 1),
                )
            })
            .collect();
        let up = (0..spec.downsampling)
            .rev()
            .map(|i| block(&mut b, &format!("up{i}"), w(i + 1), w(i), 1))
            .collect();
        let head = b.conv("head", w(0), spec.channels, 3, 1, spec.head_init_gain);
        Ok(Generator {
            spec,
            params: b.finish(),
            stem,
            down,
            res,
            up,
            head,
        })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1] != self.spec.channels {
            return Err(Error::Shape(format!(
                "generator expects [N, {}, D, H, W], got {shape:?}",
                self.spec.channels
            )));
        }
        let div = 1 << self.spec.downsampling;
        if shape[2..].iter().any(|d| d % div != 0) {
            return Err(Error::Shape(format!(
                "spatial dims {:?} must be divisible by {div}",
                &shape[2..]
            )));
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Var> {
        self.check_input(g.value(x).shape())?;
        let run = |g: &mut Graph<T>, blk: &Block, h: Var, ctx: &mut ForwardCtx<T>, act: bool| {
            let h = apply_conv(g, p, blk.conv, h);
            let h = apply_norm(g, p, blk.norm, h, ctx);
            if act {
                g.leaky_relu(h, SLOPE)
            } else {
                h
            }
        };
        let mut h = run(g, &self.stem, x, ctx, true);
        for blk in &self.down {
            h = run(g, blk, h, ctx, true);
        }
        for (a, b) in &self.res {
            let r = run(g, a, h, ctx, true);
            let r = run(g, b, r, ctx, false);
            h = g.add(h, r);
        }
        for blk in &self.up {
            let u = g.upsample2(h);
            h = run(g, blk, u, ctx, true);
        }
        let r = apply_conv(g, p, self.head, h);
        let skip = g.logit_clamped(x, LOGIT_EPS);
        let z = g.add(skip, r);
        Ok(g.sigmoid(z))
    }

    pub fn translate_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g: Graph<f32> = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv, &mut ForwardCtx::eval())?;
        Ok(g.value(y).clone())
    }

    pub fn translate(&self, volume: &Volume) -> Result<Volume> {
        let out = self.translate_batch(&Tensor::from_volume(volume))?;
        let mut v = Volume::new(out.into_data(), volume.channels(), volume.dims())?;
        v.voxel_spacing = volume.voxel_spacing;
        v.channel_names = volume.channel_names.clone();
        Ok(v)
    }
}
