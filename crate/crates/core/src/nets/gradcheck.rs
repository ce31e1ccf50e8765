//! Central finite-difference verification of analytic gradients.

use rand::Rng;

use super::tensor::Tensor;
use crate::rng::rng_from;

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;
/// Retry step for entries whose coarse difference straddles a leaky-ReLU
/// kink; such entries may be at most a quarter of those checked.
pub const FD_KINK_STEP: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|)`, zero when both are below 1e-7.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub near_kink: usize,
    /// Largest relative error among accepted entries.
    pub worst: f64,
}

/// Function value and, when requested, one analytic gradient per tensor.
pub type Evaluation = (f64, Vec<Option<Tensor<f64>>>);

/// Compares `samples` randomly drawn entries of each selected tensor in
/// `values` with central differences of `eval`.
pub fn check_gradients(
    values: &[Tensor<f64>],
    select: &[bool],
    samples: usize,
    seed: u64,
    eval: impl Fn(&[Tensor<f64>], bool) -> Evaluation,
) -> std::result::Result<GradCheck, String> {
    let (_, grads) = eval(values, true);
    let fd = |ti: usize, j: usize, h: f64| {
        let mut plus = values.to_vec();
        plus[ti].data_mut()[j] += h;
        let mut minus = values.to_vec();
        minus[ti].data_mut()[j] -= h;
        (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h)
    };
    let mut rng = rng_from(seed, &[]);
    let mut r = GradCheck::default();
    for (ti, t) in values.iter().enumerate() {
        if !select.get(ti).copied().unwrap_or(false) {
            continue;
        }
        let analytic = grads
            .get(ti)
            .and_then(|g| g.as_ref())
            .ok_or_else(|| format!("no gradient for tensor {ti}"))?;
        for _ in 0..samples.min(t.len()) {
            let j = rng.gen_range(0..t.len());
            let a = analytic.data()[j];
            let coarse = fd(ti, j, FD_STEP);
            r.checked += 1;
            let e = rel_err(a, coarse);
            if e <= FD_REL_TOL {
                r.worst = r.worst.max(e);
                continue;
            }
            let fine = fd(ti, j, FD_KINK_STEP);
            let e = rel_err(a, fine);
            if e > FD_REL_TOL {
                return Err(format!(
                    "tensor {ti} entry {j}: analytic {a} vs numeric {coarse} (h={FD_STEP}), {fine} (h={FD_KINK_STEP})"
                ));
            }
            r.worst = r.worst.max(e);
            r.near_kink += 1;
        }
    }
    if r.checked == 0 {
        return Err("nothing selected".into());
    }
    if r.near_kink * 4 > r.checked {
        return Err(format!("{} of {} entries only matched at the fine step", r.near_kink, r.checked));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_exact_and_rejects_wrong_gradients() {
        let x = vec![Tensor::new(vec![3], vec![0.3, -1.2, 2.0])];
        let sq = |v: &[Tensor<f64>], want: bool| -> Evaluation {
            let d = v[0].data();
            let val = d.iter().map(|a| a * a).sum();
            let g = want.then(|| Tensor::new(vec![3], d.iter().map(|a| 2.0 * a).collect()));
            (val, vec![g])
        };
        assert!(check_gradients(&x, &[true], 3, 1, sq).is_ok());
        let wrong = |v: &[Tensor<f64>], want: bool| -> Evaluation {
            let (val, _) = sq(v, false);
            (val, vec![want.then(|| Tensor::new(vec![3], vec![1.0; 3]))])
        };
        assert!(check_gradients(&x, &[true], 3, 1, wrong).is_err());
    }
}
