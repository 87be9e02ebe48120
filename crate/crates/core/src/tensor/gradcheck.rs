//! Central-difference gradient verification in 64-bit arithmetic.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::GradMap;
use super::ParamSet;
use crate::error::{Error, Result};

/// Which coordinates to probe.
#[derive(Clone, Copy, Debug)]
pub enum Probe {
    All,
    /// A random fraction of each trainable parameter (at least one coordinate each).
    Sample {
        fraction: f64,
        seed: u64,
    },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub probed: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `f` with central differences of
/// its loss. `f` must be deterministic; only trainable entries are probed and a
/// parameter absent from the gradient map counts as a zero gradient.
pub fn grad_check<F>(
    params: &ParamSet<f64>,
    eps: f64,
    probe: Probe,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet<f64>) -> Result<(f64, GradMap<f64>)>,
{
    let (loss0, analytic) = f(params)?;
    if !loss0.is_finite() {
        return Err(Error::Numeric {
            name: "loss".into(),
            detail: format!("loss {loss0}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(match probe {
        Probe::All => 0,
        Probe::Sample { seed, .. } => seed,
    });
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        probed: 0,
    };
    let names: Vec<(String, usize)> = params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| (p.name.clone(), p.value.len()))
        .collect();
    for (name, len) in names {
        let idxs: Vec<usize> = match probe {
            Probe::All => (0..len).collect(),
            Probe::Sample { fraction, .. } => {
                let k = ((len as f64 * fraction).ceil() as usize).clamp(1, len);
                let mut v = sample(&mut rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
        };
        for i in idxs {
            let orig = work.get(&name).expect("present").data()[i];
            work.get_mut(&name).expect("present").data_mut()[i] = orig + eps;
            let (plus, _) = f(&work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig - eps;
            let (minus, _) = f(&work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric {
                    name: name.clone(),
                    detail: format!("analytic {a}, numeric {numeric} at index {i}"),
                });
            }
            let e = relative_error(a, numeric);
            report.probed += 1;
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(e);
                if e >= report.max_rel_error {
                    report.worst = Some((name.clone(), i));
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Session, Tensor};

    #[test]
    fn square_at_three() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(3.0), true).unwrap();
        let r = grad_check(&p, 1e-4, Probe::All, |p| {
            let mut s = Session::new(p, true);
            let x = s.param("x")?;
            let y = s.g.mul(x, x)?;
            let loss = s.g.value(y).item();
            let g = s.g.backward(y);
            Ok((loss, s.param_grads(&g)))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(3.0), true).unwrap();
        let r = grad_check(&p, 1e-4, Probe::All, |p| {
            let x = p.get("x").unwrap().item();
            Ok((x * x, [("x".to_string(), Tensor::scalar(5.0))].into()))
        })
        .unwrap();
        assert!(r.max_rel_error > 0.1);
    }
}
