//! Segmentation and domain-adaptation objectives.
//!
//! Each term exists twice: as a plain function on slices (used for
//! reporting and tests) and as a [`ScalarObjective`] usable inside a
//! [`Graph`]. Both share the same arithmetic.

use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, ProbabilityMap, Taxonomy, Volume};
use crate::error::{Error, Result};
use crate::nets::graph::{Graph, ScalarObjective, Var};
use crate::nets::params::{ForwardCtx, ParamSet};
use crate::nets::tensor::{Scalar, Tensor};
use crate::nets::{Discriminator, Generator, Segmentor};

pub const DICE_EPS: f64 = 1e-5;
pub const SCORE_CLAMP: f64 = 1e-7;

// ---------------------------------------------------------------- Dice

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiceLoss {
    pub eps: f64,
    pub include_background: bool,
}

impl Default for DiceLoss {
    fn default() -> Self {
        DiceLoss {
            eps: DICE_EPS,
            include_background: true,
        }
    }
}

impl DiceLoss {
    fn classes(&self, k: usize) -> std::ops::Range<usize> {
        if self.include_background {
            0..k
        } else {
            1..k
        }
    }

    /// Loss over `[N, K, ...]` predictions and one-hot truth of equal shape:
    /// one minus the mean per-sample, per-class soft Dice.
    fn eval<T: Scalar>(&self, shape: &[usize], pred: &[T], truth: &[T], grad: Option<&mut [T]>) -> f64 {
        let (n, k) = (shape[0], shape[1]);
        let s = pred.len() / (n * k);
        let classes = self.classes(k);
        let count = (n * classes.len()) as f64;
        let mut total = 0.0;
        let mut grad = grad;
        for b in 0..n {
            for c in classes.clone() {
                let off = (b * k + c) * s;
                let p = &pred[off..off + s];
                let g = &truth[off..off + s];
                let (mut i, mut pp, mut gg) = (0.0, 0.0, 0.0);
                for (&pv, &gv) in p.iter().zip(g) {
                    let (pv, gv) = (pv.as_f64(), gv.as_f64());
                    i += pv * gv;
                    pp += pv * pv;
                    gg += gv * gv;
                }
                let num = 2.0 * i + self.eps;
                let den = pp + gg + self.eps;
                total += num / den;
                if let Some(out) = grad.as_deref_mut() {
                    for (j, (&pv, &gv)) in p.iter().zip(g).enumerate() {
                        let d = 2.0 * gv.as_f64() / den - num * 2.0 * pv.as_f64() / (den * den);
                        out[off + j] = T::of(-d / count);
                    }
                }
            }
        }
        1.0 - total / count
    }
}

impl<T: Scalar> ScalarObjective<T> for DiceLoss {
    fn value(&self, inputs: &[&Tensor<T>]) -> T {
        T::of(self.eval(inputs[0].shape(), inputs[0].data(), inputs[1].data(), None))
    }

    fn gradient(&self, inputs: &[&Tensor<T>]) -> Vec<Tensor<T>> {
        let mut gp = Tensor::zeros(inputs[0].shape().to_vec());
        self.eval(inputs[0].shape(), inputs[0].data(), inputs[1].data(), Some(gp.data_mut()));
        vec![gp, Tensor::zeros(inputs[1].shape().to_vec())]
    }
}

/// Soft multi-class Dice loss of `pred` against `truth`, all classes
/// (background included) averaged.
pub fn multiclass_dice_loss(pred: &ProbabilityMap, truth: &LabelMap) -> Result<f64> {
    dice_loss_with(&DiceLoss::default(), pred, truth)
}

pub fn dice_loss_with(loss: &DiceLoss, pred: &ProbabilityMap, truth: &LabelMap) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    let onehot = truth.one_hot();
    let k = crate::data::NUM_CLASSES;
    let s = crate::data::voxel_count(pred.dims());
    Ok(loss.eval(&[1, k, s], pred.data(), &onehot, None))
}

// ---------------------------------------------------------- adversarial

/// `−mean log s` (target real) or `−mean log(1 − s)` (target fake), with
/// scores clamped to `[SCORE_CLAMP, 1 − SCORE_CLAMP]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BceTerm {
    pub target_real: bool,
}

impl BceTerm {
    fn eval<T: Scalar>(&self, s: &[T], grad: Option<&mut [T]>) -> f64 {
        let n = s.len() as f64;
        let mut total = 0.0;
        let mut grad = grad;
        for (j, &v) in s.iter().enumerate() {
            let raw = v.as_f64();
            let c = raw.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
            let inside = raw == c;
            let (val, d) = if self.target_real {
                (-c.ln(), -1.0 / c)
            } else {
                (-(1.0 - c).ln(), 1.0 / (1.0 - c))
            };
            total += val;
            if let Some(out) = grad.as_deref_mut() {
                out[j] = T::of(if inside { d / n } else { 0.0 });
            }
        }
        total / n
    }
}

impl<T: Scalar> ScalarObjective<T> for BceTerm {
    fn value(&self, inputs: &[&Tensor<T>]) -> T {
        T::of(self.eval(inputs[0].data(), None))
    }

    fn gradient(&self, inputs: &[&Tensor<T>]) -> Vec<Tensor<T>> {
        let mut g = Tensor::zeros(inputs[0].shape().to_vec());
        self.eval(inputs[0].data(), Some(g.data_mut()));
        vec![g]
    }
}

fn check_scores(s: &[f32]) -> Result<()> {
    if s.is_empty() {
        return Err(Error::InvalidArgument("empty score map".into()));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("discriminator scores".into()));
    }
    Ok(())
}

/// `−mean log D(real) − mean log(1 − D(fake))`.
pub fn adversarial_loss_discriminator(real: &[f32], fake: &[f32]) -> Result<f64> {
    check_scores(real)?;
    check_scores(fake)?;
    let v = BceTerm { target_real: true }.eval(real, None) + BceTerm { target_real: false }.eval(fake, None);
    finite(v, "discriminator loss")
}

/// Non-saturating generator loss `−mean log D(fake)`.
pub fn adversarial_loss_generator(fake: &[f32]) -> Result<f64> {
    check_scores(fake)?;
    finite(BceTerm { target_real: true }.eval(fake, None), "generator loss")
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

// ------------------------------------------------------------------ L1

/// Mean absolute difference of two equally shaped tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeanL1;

impl MeanL1 {
    fn eval<T: Scalar>(a: &[T], b: &[T]) -> f64 {
        let s: f64 = a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).sum();
        s / a.len() as f64
    }
}

impl<T: Scalar> ScalarObjective<T> for MeanL1 {
    fn value(&self, inputs: &[&Tensor<T>]) -> T {
        T::of(Self::eval(inputs[0].data(), inputs[1].data()))
    }

    fn gradient(&self, inputs: &[&Tensor<T>]) -> Vec<Tensor<T>> {
        let (a, b) = (inputs[0], inputs[1]);
        let inv = T::one() / T::of(a.len() as f64);
        let ga: Vec<T> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| {
                if x > y {
                    inv
                } else if x < y {
                    -inv
                } else {
                    T::zero()
                }
            })
            .collect();
        let gb = ga.iter().map(|&v| -v).collect();
        vec![
            Tensor::new(a.shape().to_vec(), ga),
            Tensor::new(b.shape().to_vec(), gb),
        ]
    }
}

fn mean_l1(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("L1 operands of length {} and {}", a.len(), b.len())));
    }
    Ok(MeanL1::eval(a, b))
}

/// `mean|x_t − cyc_t| + mean|x_s − cyc_s|` where `cyc_t = G_st(G_ts(x_t))`
/// and `cyc_s = G_ts(G_st(x_s))`.
pub fn cycle_consistency_loss(x_t: &[f32], cyc_t: &[f32], x_s: &[f32], cyc_s: &[f32]) -> Result<f64> {
    Ok(mean_l1(x_t, cyc_t)? + mean_l1(x_s, cyc_s)?)
}

/// `mean|G_st(x_s) − x_s| + mean|G_ts(x_t) − x_t|`.
pub fn identity_loss(x_s: &[f32], ide_s: &[f32], x_t: &[f32], ide_t: &[f32]) -> Result<f64> {
    Ok(mean_l1(ide_s, x_s)? + mean_l1(ide_t, x_t)?)
}

// ------------------------------------------------------------ combined

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 10.0,
            gamma: 5.0,
            epsilon: 0.5,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            epsilon: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma, self.epsilon];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// The five generator-side terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GeneratorTerms {
    /// Adversarial term of the source→target generator against `D_t`.
    pub adv_st: f64,
    /// Adversarial term of the target→source generator against `D_s`.
    pub adv_ts: f64,
    pub cycle: f64,
    pub identity: f64,
    /// Adversarial term of `f_s(G_ts(x_t))` against `D_m`.
    pub semantic: f64,
}

impl GeneratorTerms {
    pub fn sum(&self) -> f64 {
        self.adv_st + self.adv_ts + self.cycle + self.identity + self.semantic
    }

    pub fn all_finite(&self) -> bool {
        self.sum().is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorBreakdown {
    pub raw: GeneratorTerms,
    pub weighted: GeneratorTerms,
    pub total: f64,
}

pub fn combine_generator_terms(raw: GeneratorTerms, w: &LossWeights) -> GeneratorBreakdown {
    let weighted = GeneratorTerms {
        adv_st: raw.adv_st,
        adv_ts: w.alpha * raw.adv_ts,
        cycle: w.beta * raw.cycle,
        identity: w.gamma * raw.identity,
        semantic: w.epsilon * raw.semantic,
    };
    GeneratorBreakdown {
        raw,
        weighted,
        total: weighted.sum(),
    }
}

/// One unpaired training batch: source images with one-hot tissue labels
/// and independently drawn target images.
#[derive(Debug, Clone)]
pub struct UdaBatch {
    pub x_s: Tensor<f32>,
    pub x_t: Tensor<f32>,
    pub y_s: Option<Tensor<f32>>,
}

impl UdaBatch {
    pub fn new(x_s: &[&Volume], x_t: &[&Volume], y_s: Option<&[&LabelMap]>) -> Result<Self> {
        if x_s.is_empty() || x_t.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let dims = x_s[0].dims();
        if x_s.iter().chain(x_t).any(|v| v.dims() != dims || v.channels() != x_s[0].channels()) {
            return Err(Error::Shape("batch volumes differ in shape".into()));
        }
        let y_s = match y_s {
            None => None,
            Some(labels) => {
                if labels.len() != x_s.len() {
                    return Err(Error::Shape("one label map per source volume required".into()));
                }
                let mut data = Vec::new();
                for l in labels {
                    if l.dims() != dims {
                        return Err(Error::Shape("label map shape differs from volume".into()));
                    }
                    if l.taxonomy() != Taxonomy::Tissue {
                        return Err(Error::InvalidArgument("source labels must use the tissue taxonomy".into()));
                    }
                    data.extend(l.one_hot());
                }
                let k = crate::data::NUM_CLASSES;
                Some(Tensor::new(vec![labels.len(), k, dims[0], dims[1], dims[2]], data))
            }
        };
        Ok(UdaBatch {
            x_s: Tensor::stack(x_s),
            x_t: Tensor::stack(x_t),
            y_s,
        })
    }
}

/// A network together with its parameters as bound into a graph.
pub struct Bound<'a, N> {
    pub net: &'a N,
    pub params: Vec<Var>,
}

pub trait HasParams {
    fn param_set(&self) -> &ParamSet;
}

impl HasParams for Generator {
    fn param_set(&self) -> &ParamSet {
        &self.params
    }
}

impl HasParams for Discriminator {
    fn param_set(&self) -> &ParamSet {
        &self.params
    }
}

impl HasParams for Segmentor {
    fn param_set(&self) -> &ParamSet {
        &self.params
    }
}

impl<'a, N: HasParams> Bound<'a, N> {
    pub fn new<T: Scalar>(g: &mut Graph<T>, net: &'a N, requires_grad: bool) -> Self {
        Bound {
            net,
            params: net.param_set().bind(g, requires_grad),
        }
    }

    pub fn with_values<T: Scalar>(g: &mut Graph<T>, net: &'a N, values: &[Tensor<T>], requires_grad: bool) -> Self {
        Bound {
            net,
            params: net.param_set().bind_values(g, values, requires_grad),
        }
    }
}

/// The five networks of the adaptation stage. Objectives report a missing
/// network as an error rather than panicking.
#[derive(Default)]
pub struct UdaModels<'a> {
    pub g_ts: Option<Bound<'a, Generator>>,
    pub g_st: Option<Bound<'a, Generator>>,
    pub d_s: Option<Bound<'a, Discriminator>>,
    pub d_t: Option<Bound<'a, Discriminator>>,
    pub d_m: Option<Bound<'a, Discriminator>>,
    /// Frozen source segmentor.
    pub f_s: Option<Bound<'a, Segmentor>>,
}

fn need<'b, 'a, N>(b: &'b Option<Bound<'a, N>>, name: &str) -> Result<&'b Bound<'a, N>> {
    b.as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("model {name} not provided")))
}

/// Graph nodes of the images entering the objectives.
#[derive(Debug, Clone, Copy)]
pub struct BatchVars {
    pub x_s: Var,
    pub x_t: Var,
    pub y_s: Option<Var>,
}

impl BatchVars {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, batch: &UdaBatch) -> Self {
        BatchVars {
            x_s: g.constant(batch.x_s.cast()),
            x_t: g.constant(batch.x_t.cast()),
            y_s: batch.y_s.as_ref().map(|y| g.constant(y.cast())),
        }
    }
}

/// Intermediate images of the generator pass, reused by the
/// discriminator objectives.
#[derive(Debug, Clone, Copy)]
pub struct Translations {
    /// `G_ts(x_t)`
    pub fake_s: Var,
    /// `G_st(x_s)`
    pub fake_t: Var,
    /// `f_s(G_ts(x_t))`, present when the semantic term was evaluated.
    pub seg_fake_s: Option<Var>,
}

pub struct GeneratorObjective {
    pub total: Var,
    /// Term nodes in [`GeneratorTerms`] field order.
    pub terms: [Var; 5],
    pub breakdown: GeneratorBreakdown,
    pub translations: Translations,
}

/// Builds the full generator objective. Discriminators and `f_s` should be
/// bound without gradients; generators with.
pub fn uda_generator_objective<T: Scalar>(
    g: &mut Graph<T>,
    batch: BatchVars,
    models: &UdaModels<'_>,
    weights: &LossWeights,
) -> Result<GeneratorObjective> {
    weights.validate()?;
    let g_ts = need(&models.g_ts, "G_ts")?;
    let g_st = need(&models.g_st, "G_st")?;
    let d_s = need(&models.d_s, "D_s")?;
    let d_t = need(&models.d_t, "D_t")?;
    let d_m = need(&models.d_m, "D_m")?;
    let f_s = need(&models.f_s, "f_s")?;
    let mut ctx = ForwardCtx::train();
    let real = || Box::new(BceTerm { target_real: true });

    let fake_t = g_st.net.forward(g, &g_st.params, batch.x_s, &mut ctx)?;
    let fake_s = g_ts.net.forward(g, &g_ts.params, batch.x_t, &mut ctx)?;
    let cyc_t = g_st.net.forward(g, &g_st.params, fake_s, &mut ctx)?;
    let cyc_s = g_ts.net.forward(g, &g_ts.params, fake_t, &mut ctx)?;

    let score_t = d_t.net.forward(g, &d_t.params, fake_t, &mut ctx)?;
    let adv_st = g.objective(&[score_t], real());
    let score_s = d_s.net.forward(g, &d_s.params, fake_s, &mut ctx)?;
    let adv_ts = g.objective(&[score_s], real());

    let c1 = g.objective(&[batch.x_t, cyc_t], Box::new(MeanL1));
    let c2 = g.objective(&[batch.x_s, cyc_s], Box::new(MeanL1));
    let cycle = g.weighted_sum(&[(c1, 1.0), (c2, 1.0)]);

    let i1 = g.objective(&[fake_t, batch.x_s], Box::new(MeanL1));
    let i2 = g.objective(&[fake_s, batch.x_t], Box::new(MeanL1));
    let identity = g.weighted_sum(&[(i1, 1.0), (i2, 1.0)]);

    let seg = f_s.net.forward(g, &f_s.params, fake_s, &mut ForwardCtx::eval())?;
    let score_m = d_m.net.forward(g, &d_m.params, seg, &mut ctx)?;
    let semantic = g.objective(&[score_m], real());

    let terms = [adv_st, adv_ts, cycle, identity, semantic];
    let val = |v: Var| g.value(v).item().as_f64();
    let raw = GeneratorTerms {
        adv_st: val(adv_st),
        adv_ts: val(adv_ts),
        cycle: val(cycle),
        identity: val(identity),
        semantic: val(semantic),
    };
    if !raw.all_finite() {
        return Err(Error::NonFinite(format!("generator terms {raw:?}")));
    }
    let breakdown = combine_generator_terms(raw, weights);
    let total = g.weighted_sum(&[
        (adv_st, 1.0),
        (adv_ts, weights.alpha),
        (cycle, weights.beta),
        (identity, weights.gamma),
        (semantic, weights.epsilon),
    ]);
    Ok(GeneratorObjective {
        total,
        terms,
        breakdown,
        translations: Translations {
            fake_s,
            fake_t,
            seg_fake_s: Some(seg),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Which {
    DS,
    DT,
    DM,
}

/// Discriminator objective. Fake inputs are taken from `translations` when
/// given (and detached), otherwise recomputed from the generators without
/// gradient.
pub fn uda_discriminator_objective<T: Scalar>(
    g: &mut Graph<T>,
    which: Which,
    batch: BatchVars,
    models: &UdaModels<'_>,
    translations: Option<&Translations>,
) -> Result<Var> {
    let mut ctx = ForwardCtx::train();
    let (d, real, fake) = match which {
        Which::DS => {
            let fake = match translations {
                Some(t) => t.fake_s,
                None => {
                    let gen = need(&models.g_ts, "G_ts")?;
                    gen.net.forward(g, &gen.params, batch.x_t, &mut ctx)?
                }
            };
            (need(&models.d_s, "D_s")?, batch.x_s, fake)
        }
        Which::DT => {
            let fake = match translations {
                Some(t) => t.fake_t,
                None => {
                    let gen = need(&models.g_st, "G_st")?;
                    gen.net.forward(g, &gen.params, batch.x_s, &mut ctx)?
                }
            };
            (need(&models.d_t, "D_t")?, batch.x_t, fake)
        }
        Which::DM => {
            let real = batch
                .y_s
                .ok_or_else(|| Error::InvalidArgument("D_m needs source labels y_s".into()))?;
            let fake = match translations.and_then(|t| t.seg_fake_s) {
                Some(v) => v,
                None => {
                    let gen = need(&models.g_ts, "G_ts")?;
                    let f_s = need(&models.f_s, "f_s")?;
                    let x = gen.net.forward(g, &gen.params, batch.x_t, &mut ctx)?;
                    f_s.net.forward(g, &f_s.params, x, &mut ForwardCtx::eval())?
                }
            };
            (need(&models.d_m, "D_m")?, real, fake)
        }
    };
    let fake = g.detach(fake);
    let sr = d.net.forward(g, &d.params, real, &mut ctx)?;
    let sf = d.net.forward(g, &d.params, fake, &mut ctx)?;
    let lr = g.objective(&[sr], Box::new(BceTerm { target_real: true }));
    let lf = g.objective(&[sf], Box::new(BceTerm { target_real: false }));
    let total = g.weighted_sum(&[(lr, 1.0), (lf, 1.0)]);
    if !g.value(total).item().as_f64().is_finite() {
        return Err(Error::NonFinite(format!("discriminator {which:?} loss")));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dims, NUM_CLASSES};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let dims: Dims = [2, 2, 2];
        let labels = LabelMap::new(vec![0, 1, 2, 3, 0, 1, 2, 3], dims, Taxonomy::Tumor).unwrap();
        let pred = ProbabilityMap::from_labels(&labels);
        assert!(multiclass_dice_loss(&pred, &labels).unwrap() <= 1e-4);
        let shifted = LabelMap::new(vec![1, 2, 3, 0, 1, 2, 3, 0], dims, Taxonomy::Tumor).unwrap();
        let wrong = ProbabilityMap::from_labels(&shifted);
        assert!(multiclass_dice_loss(&wrong, &labels).unwrap() > 1.0 - 1e-4);
    }

    #[test]
    fn dice_single_voxel_two_classes() {
        // Hand evaluation: class 0 gives (1 + e) / (1.25 + e), class 1 gives
        // e / (0.25 + e).
        let e = DICE_EPS;
        let expected = 1.0 - ((1.0 + e) / (1.25 + e) + e / (0.25 + e)) / 2.0;
        let got = DiceLoss::default().eval::<f64>(&[1, 2, 1], &[0.5, 0.5], &[1.0, 0.0], None);
        assert!(close(got, expected, 1e-12));
        assert!(close(got, 0.6, 1e-4));
    }

    #[test]
    fn dice_without_background() {
        let l = DiceLoss {
            include_background: false,
            ..Default::default()
        };
        let got = l.eval::<f64>(&[1, 2, 1], &[0.5, 0.5], &[1.0, 0.0], None);
        assert!(close(got, 1.0 - DICE_EPS / (0.25 + DICE_EPS), 1e-12));
    }

    #[test]
    fn adversarial_values() {
        let a = 1.0 - 1e-7;
        assert!(adversarial_loss_discriminator(&[a], &[1e-7]).unwrap() < 1e-6);
        assert!(close(adversarial_loss_discriminator(&[0.5; 4], &[0.5; 4]).unwrap(), 2.0 * 2f64.ln(), 1e-6));
        let want = -(0.8f64.ln() + 0.7f64.ln());
        assert!(close(adversarial_loss_discriminator(&[0.8], &[0.3]).unwrap(), want, 1e-6));
        assert!(close(want, 0.5798, 1e-4));
        assert!(adversarial_loss_generator(&[a]).unwrap() < 1e-6);
        assert!(close(adversarial_loss_generator(&[0.5]).unwrap(), 2f64.ln(), 1e-6));
        assert!(close(adversarial_loss_generator(&[0.25]).unwrap(), -(0.25f64.ln()), 1e-6));
        // Exact 0/1 scores are clamped rather than producing infinities.
        assert!(adversarial_loss_discriminator(&[0.0], &[1.0]).unwrap().is_finite());
        assert!(adversarial_loss_generator(&[f32::NAN]).is_err());
    }

    #[test]
    fn cycle_and_identity_scalar_cases() {
        // G_ts adds 1, G_st is the identity.
        let (x_t, x_s) = (0.5f32, 0.2f32);
        let g_ts = |v: f32| v + 1.0;
        let g_st = |v: f32| v;
        let cyc_t = g_st(g_ts(x_t));
        let cyc_s = g_ts(g_st(x_s));
        let c = cycle_consistency_loss(&[x_t], &[cyc_t], &[x_s], &[cyc_s]).unwrap();
        assert!(close(c, 2.0, 1e-6));
        let i = identity_loss(&[x_s], &[g_st(x_s)], &[x_t], &[g_ts(x_t)]).unwrap();
        assert!(close(i, 1.0, 1e-6));
        assert_eq!(cycle_consistency_loss(&[0.3], &[0.3], &[0.1], &[0.1]).unwrap(), 0.0);
        assert!(identity_loss(&[0.3], &[0.3, 0.1], &[0.1], &[0.1]).is_err());
    }

    #[test]
    fn weighted_combination() {
        let raw = GeneratorTerms {
            adv_st: 1.0,
            adv_ts: 1.0,
            cycle: 2.0,
            identity: 1.0,
            semantic: 0.5,
        };
        let b = combine_generator_terms(raw, &LossWeights::default());
        assert!(close(b.total, 26.75, 1e-12));
        assert!(close(b.weighted.sum(), b.total, 1e-9));
        let z = combine_generator_terms(raw, &LossWeights::zero());
        assert_eq!(z.total, raw.adv_st);
        assert!(LossWeights { beta: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn batch_rejects_wrong_taxonomy() {
        let v = Volume::zeros(4, [4, 4, 4]);
        let l = LabelMap::zeros([4, 4, 4], Taxonomy::Tumor);
        assert!(UdaBatch::new(&[&v], &[&v], Some(&[&l])).is_err());
        let l = LabelMap::zeros([4, 4, 4], Taxonomy::Tissue);
        let b = UdaBatch::new(&[&v], &[&v], Some(&[&l])).unwrap();
        assert_eq!(b.y_s.unwrap().shape(), &[1, NUM_CLASSES, 4, 4, 4]);
    }
}
