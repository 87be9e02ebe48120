//! Contrastive objectives, value-level and on the graph.

use crate::error::{config_err, Error, Result};
use crate::tensor::{matmul_into, Graph, Real, Tensor, Var};
use log::warn;

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `−log(exp(q·k⁺/τ) / (exp(q·k⁺/τ) + Σ exp(q·k⁻/τ)))` for one query against
/// the positive key and the negatives `[M, D]`. Inputs are assumed unit-norm.
pub fn info_nce<T: Real>(
    query: &[T],
    positive: &[T],
    negatives: &Tensor<T>,
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(config_err!("temperature must be positive, got {tau}"));
    }
    let d = query.len();
    if positive.len() != d || (!negatives.is_empty() && negatives.dim(1) != d) {
        return Err(config_err!("query, key and negatives differ in dimension"));
    }
    let dot = |a: &[T], b: &[T]| {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| x.as_f64() * y.as_f64())
            .sum::<f64>()
    };
    let mut logits = vec![dot(query, positive) / tau];
    if negatives.is_empty() {
        warn!("InfoNCE with no negatives is identically zero");
    } else {
        logits.extend(negatives.data().chunks(d).map(|k| dot(query, k) / tau));
    }
    Ok(log_sum_exp(&logits) - logits[0])
}

/// Batch InfoNCE: `q: [B, D]` against positives `k: [B, D]` (constants) and
/// the shared negatives `[M, D]`, averaged over the batch.
pub fn info_nce_batch<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: &Tensor<T>,
    negatives: &Tensor<T>,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(config_err!("temperature must be positive, got {tau}"));
    }
    let b = g.shape(q)[0];
    let kv = g.constant(k.clone());
    let pos = g.row_dot(q, kv)?;
    let logits = if negatives.is_empty() {
        warn!("InfoNCE with no negatives is identically zero");
        pos
    } else {
        let nv = g.constant(negatives.clone());
        let neg = g.matmul_nt(q, nv)?;
        g.concat_cols(&[pos, neg])?
    };
    let logits = g.scale(logits, T::lit(1.0 / tau));
    g.cross_entropy_labels(logits, &vec![0; b])
}

/// `(1/τ)·Q·Cᵀ` for `Q: [B, D]`, `C: [K, D]`.
pub fn cluster_scores<T: Real>(q: &Tensor<T>, c: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    let (&[b, d], &[k, d2]) = (q.shape(), c.shape()) else {
        return Err(config_err!("cluster scores need 2-D inputs"));
    };
    if d != d2 {
        return Err(config_err!(
            "embeddings of width {d}, prototypes of width {d2}"
        ));
    }
    if !(tau > 0.0) {
        return Err(config_err!("temperature must be positive, got {tau}"));
    }
    let mut out = vec![T::zero(); b * k];
    matmul_into(q.data(), false, c.data(), true, &mut out, b, d, k, false);
    let inv = T::lit(1.0 / tau);
    out.iter_mut().for_each(|x| *x = *x * inv);
    Tensor::new(&[b, k], out)
}

/// Balanced soft assignment of `B` samples to `K` prototypes from
/// `exp(scores/ε)`: each iteration rescales columns to mass `1/K`, then rows to
/// mass `1/B`. The result is scaled so every row sums to 1.
pub fn sinkhorn_codes<T: Real>(
    scores: &Tensor<T>,
    epsilon: f64,
    iterations: usize,
) -> Result<Tensor<T>> {
    sinkhorn_codes_observed(scores, epsilon, iterations, |_| {})
}

/// [`sinkhorn_codes`] that hands the working matrix (row-major `[B, K]`) to
/// `after_row_step` after every row rescaling.
pub fn sinkhorn_codes_observed<T: Real>(
    scores: &Tensor<T>,
    epsilon: f64,
    iterations: usize,
    mut after_row_step: impl FnMut(&[f64]),
) -> Result<Tensor<T>> {
    let &[b, k] = scores.shape() else {
        return Err(config_err!(
            "scores must be [B, K], got {:?}",
            scores.shape()
        ));
    };
    if iterations == 0 || !(epsilon > 0.0) {
        return Err(config_err!(
            "Sinkhorn needs at least one iteration and a positive epsilon"
        ));
    }
    let s: Vec<f64> = scores.data().iter().map(|x| x.as_f64()).collect();
    for (r, row) in s.chunks(k).enumerate() {
        if row.iter().all(|&x| x == f64::NEG_INFINITY) || row.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric {
                name: "sinkhorn scores".into(),
                detail: format!("row {r} has no finite score"),
            });
        }
    }
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = s.iter().map(|&x| ((x - max) / epsilon).exp()).collect();
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|x| *x /= total);
    let (bf, kf) = (b as f64, k as f64);
    for _ in 0..iterations {
        for col in 0..k {
            let sum: f64 = (0..b).map(|r| q[r * k + col]).sum();
            for r in 0..b {
                q[r * k + col] /= sum * kf;
            }
        }
        for row in q.chunks_mut(k) {
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= sum * bf);
        }
        after_row_step(&q);
    }
    for row in q.chunks_mut(k) {
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= sum);
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric {
            name: "sinkhorn codes".into(),
            detail: "non-finite assignment".into(),
        });
    }
    Tensor::new(&[b, k], q.into_iter().map(T::lit).collect())
}

fn soft_ce_rows(logits: &[f64], codes: &[f64], k: usize) -> f64 {
    logits
        .chunks(k)
        .zip(codes.chunks(k))
        .map(|(l, c)| {
            let lse = log_sum_exp(l);
            -c.iter()
                .zip(l)
                .map(|(&ci, &li)| ci * (li - lse))
                .sum::<f64>()
        })
        .sum::<f64>()
}

/// Swapped prediction: each view's logits predict the other view's codes;
/// the two cross-entropies are summed and averaged over the batch.
pub fn swav_swapped_loss<T: Real>(
    logits_a: &Tensor<T>,
    logits_b: &Tensor<T>,
    codes_a: &Tensor<T>,
    codes_b: &Tensor<T>,
) -> Result<f64> {
    let shape = logits_a.shape();
    if shape.len() != 2
        || [logits_b.shape(), codes_a.shape(), codes_b.shape()]
            .iter()
            .any(|s| *s != shape)
    {
        return Err(config_err!(
            "swapped loss needs four [B, K] arrays of equal shape"
        ));
    }
    let f = |t: &Tensor<T>| t.data().iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
    let (b, k) = (shape[0], shape[1]);
    let total =
        soft_ce_rows(&f(logits_a), &f(codes_b), k) + soft_ce_rows(&f(logits_b), &f(codes_a), k);
    Ok(total / b as f64)
}

fn unit(v: &[f64], what: &str) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Numeric {
            name: what.into(),
            detail: format!("cannot normalise a vector of norm {n}"),
        });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Squared distance between the L2-normalised prediction and target,
/// i.e. `2 − 2·cos`.
pub fn byol_loss<T: Real>(predicted: &[T], target: &[T]) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(config_err!("prediction and target differ in length"));
    }
    let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
    let p = unit(&f(predicted), "prediction")?;
    let t = unit(&f(target), "target")?;
    Ok(p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Batch mean of `2 − 2·cos(pᵢ, tᵢ)`; `target` is a constant.
pub fn byol_loss_batch<T: Real>(
    g: &mut Graph<T>,
    predicted: Var,
    target: &Tensor<T>,
) -> Result<Var> {
    let p = g.l2_normalize(predicted)?;
    let t = g.constant(target.clone());
    let t = g.l2_normalize(t)?;
    let cos = g.row_dot(p, t)?;
    let mean_cos = g.mean(cos);
    let shape = g.shape(mean_cos).to_vec();
    let two = g.constant(Tensor::full(&shape, T::lit(2.0)));
    let m = g.scale(mean_cos, T::lit(-2.0));
    g.add(two, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn info_nce_reference_values() {
        let q = [1.0f64, 0.0];
        let negs = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, -1.0]).unwrap();
        let l = info_nce(&q, &q, &negs, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((l + (e / (e + 2.0)).ln()).abs() < 1e-12);
        assert_eq!(info_nce(&q, &q, &Tensor::zeros(&[0, 2]), 0.2).unwrap(), 0.0);
        let dominant = info_nce(&q, &q, &negs, 1e-3).unwrap();
        assert!(dominant < 1e-12);
    }

    #[test]
    fn cluster_scores_match_dot_products() {
        let q = Tensor::<f64>::new(&[3, 2], vec![0.6, 0.8, 1.0, 0.0, 0.0, -1.0]).unwrap();
        let c = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = cluster_scores(&q, &c, 0.1).unwrap();
        let want = [6.0, 8.0, 10.0, 0.0, 0.0, -10.0];
        for (a, b) in s.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sinkhorn_uniform_and_two_by_two() {
        let u = sinkhorn_codes(&Tensor::<f64>::zeros(&[4, 5]), 0.05, 3).unwrap();
        assert!(u.data().iter().all(|&x| (x - 0.2).abs() < 1e-12));
        let s = Tensor::<f64>::new(&[2, 2], vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        let q = sinkhorn_codes(&s, 0.05, 100).unwrap();
        for col in 0..2 {
            let c = (q.data()[col] + q.data()[2 + col]) / 2.0;
            assert!((c - 0.5).abs() < 1e-3);
        }
        assert!(q.data()[0] > q.data()[1]);
        let bad = Tensor::new(&[1, 2], vec![f64::NEG_INFINITY; 2]).unwrap();
        assert!(sinkhorn_codes(&bad, 0.05, 3).is_err());
    }

    #[test]
    fn swapped_loss_uniform_and_confident() {
        let k = 7;
        let z = Tensor::<f64>::zeros(&[3, k]);
        let u = Tensor::full(&[3, k], 1.0 / k as f64);
        let l = swav_swapped_loss(&z, &z, &u, &u).unwrap();
        assert!((l - 2.0 * (k as f64).ln()).abs() < 1e-12);
        let mut logits = Tensor::zeros(&[1, 2]);
        logits.data_mut()[0] = 50.0;
        let codes = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert!(swav_swapped_loss(&logits, &logits, &codes, &codes).unwrap() < 1e-12);
    }

    #[test]
    fn byol_geometry() {
        assert!(byol_loss(&[1.0f64, 0.0], &[2.0, 0.0]).unwrap().abs() < 1e-15);
        assert!((byol_loss(&[1.0f64, 0.0], &[-1.0, 0.0]).unwrap() - 4.0).abs() < 1e-15);
        assert!((byol_loss(&[1.0f64, 0.0], &[0.0, 3.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(byol_loss(&[0.0f64, 0.0], &[1.0, 0.0]).is_err());
    }
}
