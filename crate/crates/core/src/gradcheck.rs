//! Central finite-difference verification of tape gradients (double precision).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which coordinates of each input get probed.
#[derive(Clone, Debug)]
pub enum Probe {
    All,
    /// At most `per_tensor` random coordinates of each input.
    Sample {
        per_tensor: usize,
        seed: u64,
    },
    /// Explicit flat coordinates per input.
    Listed(Vec<Vec<usize>>),
}

impl Probe {
    pub fn coords(&self, input: usize, len: usize) -> Vec<usize> {
        match self {
            Probe::All => (0..len).collect(),
            Probe::Sample { per_tensor, seed } => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(seed ^ (input as u64).wrapping_mul(0x9e37_79b9));
                let mut c = sample(&mut rng, len, (*per_tensor).min(len)).into_vec();
                c.sort_unstable();
                c
            }
            Probe::Listed(lists) => lists.get(input).cloned().unwrap_or_default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst mismatch.
    pub worst: Option<(usize, usize)>,
    pub probed: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences over every coordinate of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let report = finite_diff_check_many(
        |v: &[Var<'_, f64>]| f(v[0]),
        std::slice::from_ref(x),
        eps,
        Probe::All,
    )?;
    Ok(report.max_rel_error)
}

/// Multi-input form: `f` receives one var per input and must return a scalar.
pub fn finite_diff_check_many<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    probe: Probe,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::arg(format!(
            "finite-difference eps {eps} outside [1e-5, 1e-2]"
        )));
    }
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&vars)?;
        if loss.value().numel() != 1 {
            return Err(Error::arg(format!(
                "gradient check needs a scalar function, got shape {:?}",
                loss.shape()
            )));
        }
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&vars)?.item())
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        probed: 0,
    };
    for (i, input) in inputs.iter().enumerate() {
        let coords = probe.coords(i, input.numel());
        for j in coords {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic[i].data()[j], numeric);
            report.probed += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 4]) -> Tensor<f64> {
        let mut k = 0.0;
        Tensor::from_fn(shape, |_| {
            k += 1.0;
            (k * 0.37f64).sin()
        })
    }

    #[test]
    fn linear_sum_is_exact() {
        let err = finite_diff_check(|x| Ok(x.sum()), &ramp([1, 2, 3, 3]), 1e-3).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn l1_away_from_ties() {
        let target = ramp([1, 1, 4, 4]).map(|v| v + 0.5);
        let err = finite_diff_check(
            move |x| {
                let t = x.tape().constant(target.clone());
                Ok(x.sub(&t)?.abs().mean())
            },
            &ramp([1, 1, 4, 4]),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rejects_non_scalar_and_bad_eps() {
        let x = ramp([1, 1, 2, 2]);
        assert!(finite_diff_check(|x| Ok(x), &x, 1e-3).is_err());
        assert!(finite_diff_check(|x| Ok(x.sum()), &x, 1e-1).is_err());
    }
}
