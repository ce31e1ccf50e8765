use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{apply_conv, apply_norm, ConvIdx, ForwardCtx, Norm, NormIdx, ParamBuilder, ParamSet};
use super::tensor::{Scalar, Tensor};
use crate::data::{voxel_count, Dims, ProbabilityMap, Volume, NUM_CLASSES};
use crate::error::{Error, Result};

const SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentorSpec {
    pub in_channels: usize,
    pub n_classes: usize,
    pub levels: usize,
    pub base_width: usize,
    pub norm: Norm,
}

impl Default for SegmentorSpec {
    fn default() -> Self {
        SegmentorSpec {
            in_channels: 4,
            n_classes: NUM_CLASSES,
            levels: 3,
            base_width: 8,
            norm: Norm::Instance,
        }
    }
}

impl SegmentorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::InvalidArgument("segmentor needs at least 2 levels".into()));
        }
        if self.in_channels == 0 || self.base_width == 0 || self.n_classes < 2 {
            return Err(Error::InvalidArgument("segmentor widths must be positive".into()));
        }
        Ok(())
    }

    pub fn check_input(&self, channels: usize, dims: Dims) -> Result<()> {
        if channels != self.in_channels {
            return Err(Error::Shape(format!(
                "segmentor expects {} input channels, got {channels}",
                self.in_channels
            )));
        }
        let div = 1 << (self.levels - 1);
        if dims.iter().any(|d| d % div != 0) {
            return Err(Error::Shape(format!(
                "spatial dims {dims:?} must be divisible by {div}"
            )));
        }
        Ok(())
    }
}

struct Block {
    conv: ConvIdx,
    norm: NormIdx,
}

/// 3-D U-Net: two conv blocks per level, strided-conv downsampling,
/// nearest upsampling with skip concatenation, 1×1×1 head and softmax.
pub struct Segmentor {
    pub spec: SegmentorSpec,
    pub params: ParamSet,
    enc: Vec<Vec<Block>>,
    dec: Vec<Vec<Block>>,
    head: ConvIdx,
}

impl Segmentor {
    pub fn new(spec: SegmentorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = ParamBuilder::new(seed);
        let width = |l: usize| spec.base_width << l;
        let block = |b: &mut ParamBuilder, name: String, ci, co, stride| Block {
            conv: b.conv(&name, ci, co, 3, stride, 1.0),
            norm: b.norm(&format!("{name}.norm"), spec.norm, co),
        };
        let mut enc = Vec::new();
        for l in 0..spec.levels {
            let (ci, stride) = if l == 0 {
                (spec.in_channels, 1)
            } else {
                (width(l - 1), 2)
            };
            enc.push(vec![
                block(&mut b, format!("enc{l}.0"), ci, width(l), stride),
                block(&mut b, format!("enc{l}.1"), width(l), width(l), 1),
            ]);
        }
        let mut dec = Vec::new();
        for l in (0..spec.levels - 1).rev() {
            dec.push(vec![
                block(&mut b, format!("dec{l}.0"), width(l + 1) + width(l), width(l), 1),
                block(&mut b, format!("dec{l}.1"), width(l), width(l), 1),
            ]);
        }
        let head = b.conv("head", width(0), spec.n_classes, 1, 1, 1.0);
        Ok(Segmentor {
            spec,
            params: b.finish(),
            enc,
            dec,
            head,
        })
    }

    /// Class logits before the softmax.
    pub fn logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Var> {
        let s = g.value(x).shape().to_vec();
        if s.len() != 5 {
            return Err(Error::Shape(format!("expected [N, C, D, H, W], got {s:?}")));
        }
        self.spec.check_input(s[1], [s[2], s[3], s[4]])?;
        let run = |g: &mut Graph<T>, blk: &Block, h: Var, ctx: &mut ForwardCtx<T>| {
            let h = apply_conv(g, p, blk.conv, h);
            let h = apply_norm(g, p, blk.norm, h, ctx);
            g.leaky_relu(h, SLOPE)
        };
        let mut skips = Vec::with_capacity(self.spec.levels);
        let mut h = x;
        for level in &self.enc {
            for blk in level {
                h = run(g, blk, h, ctx);
            }
            skips.push(h);
        }
        skips.pop();
        for level in &self.dec {
            let up = g.upsample2(h);
            let skip = skips.pop().expect("skip per decoder level");
            h = g.concat_channels(up, skip);
            for blk in level {
                h = run(g, blk, h, ctx);
            }
        }
        Ok(apply_conv(g, p, self.head, h))
    }

    /// Per-voxel class probabilities `[N, K, D, H, W]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Var> {
        let logits = self.logits(g, p, x, ctx)?;
        Ok(g.softmax_channels(logits))
    }

    /// Inference on a single volume.
    pub fn predict(&self, volume: &Volume) -> Result<ProbabilityMap> {
        self.spec.check_input(volume.channels(), volume.dims())?;
        let mut out = self.predict_batch(&Tensor::from_volume(volume))?;
        let data = std::mem::take(&mut out[0]);
        ProbabilityMap::new(data, volume.dims())
    }

    /// Inference on a batch; one flat `K×D×H×W` buffer per sample.
    pub fn predict_batch(&self, x: &Tensor<f32>) -> Result<Vec<Vec<f32>>> {
        let mut g: Graph<f32> = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv, &mut ForwardCtx::eval())?;
        let out = g.value(y);
        let n = out.shape()[0];
        let per = out.len() / n;
        Ok((0..n).map(|i| out.data()[i * per..(i + 1) * per].to_vec()).collect())
    }

    pub fn out_len(&self, dims: Dims) -> usize {
        self.spec.n_classes * voxel_count(dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(c: usize, dims: Dims, seed: u64) -> Volume {
        let n = c * voxel_count(dims);
        let data = (0..n)
            .map(|i| (((i as u64 + 1) * (seed + 7) * 2654435761) % 1000) as f32 / 999.0)
            .collect();
        Volume::new(data, c, dims).unwrap()
    }

    #[test]
    fn probabilities_normalized() {
        for norm in [Norm::None, Norm::Instance, Norm::Batch] {
            let seg = Segmentor::new(SegmentorSpec { norm, ..Default::default() }, 1).unwrap();
            let p = seg.predict(&input(4, [8, 8, 8], 2)).unwrap();
            assert_eq!(p.dims(), [8, 8, 8]);
        }
    }

    #[test]
    fn zero_head_gives_uniform() {
        let mut seg = Segmentor::new(SegmentorSpec::default(), 3).unwrap();
        let wi = seg.params.names.iter().position(|n| n == "head.weight").unwrap();
        seg.params.values[wi].data_mut().iter_mut().for_each(|v| *v = 0.0);
        let p = seg.predict(&input(4, [8, 8, 8], 1)).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn channel_mismatch_is_error() {
        let seg = Segmentor::new(
            SegmentorSpec {
                in_channels: 8,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert!(matches!(seg.predict(&input(4, [8, 8, 8], 0)), Err(Error::Shape(_))));
        let seg4 = Segmentor::new(SegmentorSpec::default(), 0).unwrap();
        assert!(matches!(seg4.predict(&input(4, [6, 8, 8], 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn levels_below_two_rejected() {
        assert!(Segmentor::new(SegmentorSpec { levels: 1, ..Default::default() }, 0).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let seg = Segmentor::new(SegmentorSpec::default(), 5).unwrap();
        let v = input(4, [8, 8, 8], 3);
        assert_eq!(seg.predict(&v).unwrap(), seg.predict(&v).unwrap());
    }
}
