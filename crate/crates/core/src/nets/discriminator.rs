use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{apply_conv, apply_norm, ConvIdx, ForwardCtx, Norm, NormIdx, ParamBuilder, ParamSet};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub base_width: usize,
    pub downsampling: usize,
    pub norm: Norm,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            in_channels: 4,
            base_width: 8,
            downsampling: 3,
            norm: Norm::Instance,
        }
    }
}

impl DiscriminatorSpec {
    /// Score-map spatial shape for an input of `dims`.
    pub fn output_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        dims.map(|mut d| {
            for _ in 0..self.downsampling {
                d = d.div_ceil(2);
            }
            d
        })
    }
}

/// Patch discriminator: `d` stride-2 convolutions (no norm on the first),
/// then a 3×3×3 score convolution and a sigmoid.
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    pub params: ParamSet,
    layers: Vec<(ConvIdx, Option<NormIdx>)>,
    head: ConvIdx,
}

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        if spec.in_channels == 0 || spec.base_width == 0 {
            return Err(Error::InvalidArgument("discriminator widths must be positive".into()));
        }
        let mut b = ParamBuilder::new(seed);
        let mut layers = Vec::new();
        let mut ci = spec.in_channels;
        for i in 0..spec.downsampling {
            let co = spec.base_width << i;
            let conv = b.conv(&format!("down{i}"), ci, co, 3, 2, 1.0);
            let norm = (i > 0).then(|| b.norm(&format!("down{i}.norm"), spec.norm, co));
            layers.push((conv, norm));
            ci = co;
        }
        let head = b.conv("head", ci, 1, 3, 1, 1.0);
        Ok(Discriminator {
            spec,
            params: b.finish(),
            layers,
            head,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Var> {
        let s = g.value(x).shape();
        if s.len() != 5 || s[1] != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects [N, {}, D, H, W], got {s:?}",
                self.spec.in_channels
            )));
        }
        let mut h = x;
        for (conv, norm) in &self.layers {
            h = apply_conv(g, p, *conv, h);
            if let Some(n) = norm {
                h = apply_norm(g, p, *n, h, ctx);
            }
            h = g.leaky_relu(h, SLOPE);
        }
        let logits = apply_conv(g, p, self.head, h);
        Ok(g.sigmoid(logits))
    }

    /// Patch score map `[N, 1, d', h', w']` with values in (0, 1).
    pub fn score(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g: Graph<f32> = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv, &mut ForwardCtx::eval())?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_shape_follows_striding() {
        let d = Discriminator::new(DiscriminatorSpec::default(), 0).unwrap();
        let x = Tensor::new(vec![1, 4, 24, 24, 24], vec![0.5; 4 * 24 * 24 * 24]);
        let s = d.score(&x).unwrap();
        assert_eq!(s.shape(), &[1, 1, 3, 3, 3]);
        assert_eq!(d.spec.output_dims([24, 24, 24]), [3, 3, 3]);
        assert_eq!(d.spec.output_dims([10, 9, 5]), [2, 2, 1]);
    }

    #[test]
    fn channel_mismatch() {
        let d = Discriminator::new(DiscriminatorSpec::default(), 0).unwrap();
        assert!(d.score(&Tensor::zeros(vec![1, 3, 8, 8, 8])).is_err());
    }
}
