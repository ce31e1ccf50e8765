//! Central finite differences (float64, h = 1e-4) against the analytic
//! gradients of every network and loss term.

use itl_core::losses::{
    uda_discriminator_objective, uda_generator_objective, BatchVars, BceTerm, Bound, DiceLoss, LossWeights, MeanL1,
    UdaBatch, UdaModels, Which,
};
use itl_core::nets::gradcheck::{check_gradients, Evaluation};
use itl_core::nets::graph::{Graph, ScalarObjective, Var};
use itl_core::nets::params::{ForwardCtx, Norm};
use itl_core::nets::tensor::Tensor;
use itl_core::nets::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, Segmentor, SegmentorSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Weighted sum of outputs with fixed pseudo-random weights.
struct Probe(Vec<f64>);

impl ScalarObjective<f64> for Probe {
    fn value(&self, inputs: &[&Tensor<f64>]) -> f64 {
        inputs[0].data().iter().zip(&self.0).map(|(a, b)| a * b).sum()
    }
    fn gradient(&self, inputs: &[&Tensor<f64>]) -> Vec<Tensor<f64>> {
        vec![Tensor::new(inputs[0].shape().to_vec(), self.0.clone())]
    }
}

fn check_params(
    label: &str,
    values: &[Tensor<f64>],
    select: &[bool],
    samples: usize,
    eval: impl Fn(&[Tensor<f64>], bool) -> Evaluation,
) {
    if let Err(e) = check_gradients(values, select, samples, 99, eval) {
        panic!("{label}: {e}");
    }
}

fn input(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, uniform(n, 0.05, 0.95, seed))
}

#[test]
fn segmentor_parameter_gradients() {
    for norm in [Norm::None, Norm::Instance, Norm::Batch] {
        let seg = Segmentor::new(
            SegmentorSpec {
                norm,
                base_width: 4,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let x = input(vec![2, 4, 8, 8, 8], 2);
        let probe = uniform(2 * 4 * 512, -1.0, 1.0, 3);
        let values = seg.params.cast::<f64>();
        check_params(&format!("segmentor {norm:?}"), &values, &seg.params.trainable, 3, |vals, want| {
            let mut g = Graph::new();
            let p = seg.params.bind_values(&mut g, vals, true);
            let xv = g.constant(x.clone());
            let y = seg.forward(&mut g, &p, xv, &mut ForwardCtx::train()).unwrap();
            let l = g.objective(&[y], Box::new(Probe(probe.clone())));
            let v = g.value(l).item();
            let grads = if want {
                let gr = g.backward(l);
                p.iter().map(|v| gr.wrt(*v).cloned()).collect()
            } else {
                Vec::new()
            };
            (v, grads)
        });
    }
}

#[test]
fn generator_parameter_gradients() {
    let gen = Generator::new(
        GeneratorSpec {
            base_width: 4,
            residual_blocks: 2,
            ..Default::default()
        },
        4,
    )
    .unwrap();
    let x = input(vec![1, 4, 8, 8, 8], 5);
    let probe = uniform(4 * 512, -1.0, 1.0, 6);
    let values = gen.params.cast::<f64>();
    check_params("generator", &values, &gen.params.trainable, 3, |vals, want| {
        let mut g = Graph::new();
        let p = gen.params.bind_values(&mut g, vals, true);
        let xv = g.constant(x.clone());
        let y = gen.forward(&mut g, &p, xv, &mut ForwardCtx::train()).unwrap();
        let l = g.objective(&[y], Box::new(Probe(probe.clone())));
        let v = g.value(l).item();
        let grads = if want {
            let gr = g.backward(l);
            p.iter().map(|v| gr.wrt(*v).cloned()).collect()
        } else {
            Vec::new()
        };
        (v, grads)
    });
}

#[test]
fn discriminator_parameter_gradients() {
    let d = Discriminator::new(
        DiscriminatorSpec {
            downsampling: 2,
            ..Default::default()
        },
        7,
    )
    .unwrap();
    let x = input(vec![2, 4, 8, 8, 8], 8);
    let values = d.params.cast::<f64>();
    check_params("discriminator", &values, &d.params.trainable, 4, |vals, want| {
        let mut g = Graph::new();
        let p = d.params.bind_values(&mut g, vals, true);
        let xv = g.constant(x.clone());
        let y = d.forward(&mut g, &p, xv, &mut ForwardCtx::train()).unwrap();
        let l = g.objective(&[y], Box::new(BceTerm { target_real: false }));
        let v = g.value(l).item();
        let grads = if want {
            let gr = g.backward(l);
            p.iter().map(|v| gr.wrt(*v).cloned()).collect()
        } else {
            Vec::new()
        };
        (v, grads)
    });
}

/// Finite-difference check of a loss w.r.t. its first input on a 4³ tensor.
fn check_loss_input(label: &str, inputs: Vec<Tensor<f64>>, make: impl Fn() -> Box<dyn ScalarObjective<f64>>) {
    let select: Vec<bool> = (0..inputs.len()).map(|i| i == 0).collect();
    check_params(label, &inputs, &select, 64, |vals, want| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let l = g.objective(&vars, make());
        let v = g.value(l).item();
        let grads = if want {
            let gr = g.backward(l);
            vars.iter().map(|v| gr.wrt(*v).cloned()).collect()
        } else {
            Vec::new()
        };
        (v, grads)
    });
}

#[test]
fn loss_input_gradients() {
    let shape = vec![1, 4, 4, 4, 4];
    let n = 4 * 64;
    let truth: Vec<f64> = (0..n).map(|i| if (i * 7) % 4 == i / 64 { 1.0 } else { 0.0 }).collect();
    for include_background in [true, false] {
        check_loss_input(
            "dice",
            vec![input(shape.clone(), 10), Tensor::new(shape.clone(), truth.clone())],
            move || {
                Box::new(DiceLoss {
                    include_background,
                    ..Default::default()
                })
            },
        );
    }
    for target_real in [true, false] {
        check_loss_input("bce", vec![input(shape.clone(), 11)], move || Box::new(BceTerm { target_real }));
    }
    check_loss_input("l1", vec![input(shape.clone(), 12), input(shape.clone(), 13)], || Box::new(MeanL1));
}

struct Nets {
    g_ts: Generator,
    g_st: Generator,
    d_s: Discriminator,
    d_t: Discriminator,
    d_m: Discriminator,
    f_s: Segmentor,
}

fn small_nets() -> Nets {
    let gs = GeneratorSpec {
        base_width: 4,
        residual_blocks: 1,
        ..Default::default()
    };
    let ds = DiscriminatorSpec {
        downsampling: 2,
        ..Default::default()
    };
    Nets {
        g_ts: Generator::new(gs.clone(), 1).unwrap(),
        g_st: Generator::new(gs, 2).unwrap(),
        d_s: Discriminator::new(ds.clone(), 3).unwrap(),
        d_t: Discriminator::new(ds.clone(), 4).unwrap(),
        d_m: Discriminator::new(ds, 5).unwrap(),
        f_s: Segmentor::new(
            SegmentorSpec {
                base_width: 4,
                ..Default::default()
            },
            6,
        )
        .unwrap(),
    }
}

fn small_batch() -> UdaBatch {
    use itl_core::data::{LabelMap, Taxonomy, Volume};
    let dims = [8, 8, 8];
    let vs = |seed| {
        Volume::new(
            uniform(4 * 512, 0.05, 0.95, seed).into_iter().map(|v| v as f32).collect(),
            4,
            dims,
        )
        .unwrap()
    };
    let (xs, xt) = (vs(20), vs(21));
    let labels: Vec<i8> = (0..512).map(|i| ((i * 5) % 4) as i8).collect();
    let y = LabelMap::new(labels, dims, Taxonomy::Tissue).unwrap();
    UdaBatch::new(&[&xs], &[&xt], Some(&[&y])).unwrap()
}

#[test]
fn full_generator_objective_gradients() {
    let nets = small_nets();
    let batch = small_batch();
    let vals_ts = nets.g_ts.params.cast::<f64>();
    let vals_st = nets.g_st.params.cast::<f64>();
    let n_ts = vals_ts.len();
    let mut values = vals_ts;
    values.extend(vals_st);
    let mut select = nets.g_ts.params.trainable.clone();
    select.extend(&nets.g_st.params.trainable);
    check_params("uda generator objective", &values, &select, 2, |vals, want| {
        let mut g = Graph::new();
        let models = UdaModels {
            g_ts: Some(Bound::with_values(&mut g, &nets.g_ts, &vals[..n_ts], true)),
            g_st: Some(Bound::with_values(&mut g, &nets.g_st, &vals[n_ts..], true)),
            d_s: Some(Bound::new(&mut g, &nets.d_s, false)),
            d_t: Some(Bound::new(&mut g, &nets.d_t, false)),
            d_m: Some(Bound::new(&mut g, &nets.d_m, false)),
            f_s: Some(Bound::new(&mut g, &nets.f_s, false)),
        };
        let bv = BatchVars::bind(&mut g, &batch);
        let obj = uda_generator_objective(&mut g, bv, &models, &LossWeights::default()).unwrap();
        let v = g.value(obj.total).item();
        let grads = if want {
            let gr = g.backward(obj.total);
            let a = models.g_ts.as_ref().unwrap().params.iter();
            let b = models.g_st.as_ref().unwrap().params.iter();
            a.chain(b).map(|v| gr.wrt(*v).cloned()).collect()
        } else {
            Vec::new()
        };
        (v, grads)
    });
}

#[test]
fn discriminator_objectives_do_not_reach_generators() {
    let nets = small_nets();
    let batch = small_batch();
    for which in [Which::DS, Which::DT, Which::DM] {
        let mut g: Graph<f64> = Graph::new();
        let models = UdaModels {
            g_ts: Some(Bound::new(&mut g, &nets.g_ts, true)),
            g_st: Some(Bound::new(&mut g, &nets.g_st, true)),
            d_s: Some(Bound::new(&mut g, &nets.d_s, true)),
            d_t: Some(Bound::new(&mut g, &nets.d_t, true)),
            d_m: Some(Bound::new(&mut g, &nets.d_m, true)),
            f_s: Some(Bound::new(&mut g, &nets.f_s, false)),
        };
        let bv = BatchVars::bind(&mut g, &batch);
        let l = uda_discriminator_objective(&mut g, which, bv, &models, None).unwrap();
        let gr = g.backward(l);
        for gen in [&models.g_ts, &models.g_st] {
            for p in &gen.as_ref().unwrap().params {
                if let Some(t) = gr.wrt(*p) {
                    assert!(t.data().iter().all(|v| *v == 0.0), "{which:?} leaked into a generator");
                }
            }
        }
        let d = match which {
            Which::DS => &models.d_s,
            Which::DT => &models.d_t,
            Which::DM => &models.d_m,
        };
        let has_grad = d.as_ref().unwrap().params.iter().any(|p| gr.wrt(*p).is_some());
        assert!(has_grad, "{which:?} has no parameter gradient");
    }
}
