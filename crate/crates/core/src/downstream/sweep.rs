use super::finetune::{finetune_run, Classifier, FinetuneConfig, Splits};
use super::metrics::{Metrics, RunMetrics};
use super::reduce::{reduction_plan, stratified_subsample};
use crate::error::{config_err, Error, Result};
use crate::seeds::derive_seed;
use crate::tensor::ParamSet;
use log::info;
use serde::Serialize;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct ReductionPlan {
    pub fractions: Vec<f64>,
    /// Reduction continues while some method reaches this mean F1.
    pub stop_f1: f64,
}

impl Default for ReductionPlan {
    fn default() -> Self {
        Self {
            fractions: vec![1.0, 0.75, 0.5, 0.25, 0.10, 0.05],
            stop_f1: 0.7,
        }
    }
}

impl ReductionPlan {
    pub fn new(fractions: Vec<f64>, stop_f1: f64) -> Result<Self> {
        if fractions.is_empty() {
            return Err(config_err!("reduction plan needs at least one fraction"));
        }
        if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(config_err!("fractions must lie in (0, 1]: {fractions:?}"));
        }
        if fractions.windows(2).any(|w| w[1] >= w[0]) {
            return Err(config_err!(
                "fractions must be strictly decreasing: {fractions:?}"
            ));
        }
        Ok(Self { fractions, stop_f1 })
    }

    pub fn sizes(&self, n: usize) -> Result<Vec<usize>> {
        reduction_plan(n, &self.fractions)
    }
}

/// One line of the result table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub method: String,
    pub fraction: f64,
    pub size: usize,
    pub seed_count: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
}

impl SweepRow {
    pub fn new(method: &str, fraction: f64, size: usize, m: &RunMetrics) -> Self {
        Self {
            method: method.to_string(),
            fraction,
            size,
            seed_count: m.repeats,
            acc_mean: m.accuracy.0,
            acc_std: m.accuracy.1,
            auc_mean: m.auc.0,
            auc_std: m.auc.1,
            f1_mean: m.f1.0,
            f1_std: m.f1.1,
        }
    }
}

/// Evaluates every method at each fraction in order and stops after the first
/// fraction where no method reaches the plan's F1 threshold.
pub fn sweep(
    methods: &[String],
    plan: &ReductionPlan,
    n_train: usize,
    mut evaluate: impl FnMut(&str, f64, usize) -> Result<RunMetrics>,
) -> Result<Vec<SweepRow>> {
    if methods.is_empty() {
        return Err(config_err!("sweep needs at least one method"));
    }
    let sizes = plan.sizes(n_train)?;
    let mut rows = Vec::new();
    for (&f, &size) in plan.fractions.iter().zip(&sizes) {
        let mut any_pass = false;
        for m in methods {
            let r = evaluate(m, f, size)?;
            info!("{m} @ {f}: f1 {:.4} ± {:.4}", r.f1.0, r.f1.1);
            any_pass |= r.f1.0 >= plan.stop_f1;
            rows.push(SweepRow::new(m, f, size, &r));
        }
        if !any_pass {
            info!(
                "no method reaches F1 {} at fraction {f}; stopping",
                plan.stop_f1
            );
            break;
        }
    }
    Ok(rows)
}

/// Repeated fine-tuning on stratified subsets, one fresh subset per repeat seed.
pub fn finetune_fraction(
    classifier: &Classifier,
    pretrained: Option<&ParamSet<f32>>,
    splits: &Splits,
    config: &FinetuneConfig,
    fraction: f64,
) -> Result<RunMetrics> {
    let mut tests: Vec<Metrics> = Vec::with_capacity(config.repeats);
    for r in 0..config.repeats {
        let seed = config.repeat_seed(r);
        let idx = stratified_subsample(
            &splits.train.labels,
            fraction,
            derive_seed(seed, "subsample"),
        )?;
        let reduced = Splits {
            train: splits.train.subset(&idx),
            val: splits.val.clone(),
            test: splits.test.clone(),
        };
        tests.push(
            finetune_run(
                classifier,
                pretrained,
                &reduced,
                config,
                seed,
                &mut |_, _| {},
            )?
            .test,
        );
    }
    Ok(RunMetrics::aggregate(&tests))
}

/// Full sweep over named pre-trained encoders (`None` is a random-init arm).
pub fn finetune_sweep(
    classifier: &Classifier,
    methods: &[(String, Option<ParamSet<f32>>)],
    splits: &Splits,
    plan: &ReductionPlan,
    config: &FinetuneConfig,
) -> Result<Vec<SweepRow>> {
    let names: Vec<String> = methods.iter().map(|m| m.0.clone()).collect();
    sweep(&names, plan, splits.train.len(), |name, f, _| {
        let p = methods
            .iter()
            .find(|m| m.0 == name)
            .and_then(|m| m.1.as_ref());
        finetune_fraction(classifier, p, splits, config, f)
    })
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rm(f1: f64) -> RunMetrics {
        RunMetrics::aggregate(&[Metrics {
            accuracy: f1,
            auc: f1,
            f1,
        }])
    }

    #[test]
    fn stop_rule() {
        let plan = ReductionPlan::default();
        let methods = vec!["a".to_string(), "b".to_string()];
        // both fall below the threshold at 0.5
        let rows = sweep(&methods, &plan, 425, |_, f, _| {
            Ok(rm(if f >= 0.75 { 0.8 } else { 0.6 }))
        })
        .unwrap();
        assert_eq!(rows.len(), 3 * 2);
        assert_eq!(rows.last().unwrap().fraction, 0.5);
        // one method above keeps every fraction for all methods
        let rows = sweep(&methods, &plan, 425, |m, _, _| {
            Ok(rm(if m == "a" { 0.9 } else { 0.1 }))
        })
        .unwrap();
        assert_eq!(rows.len(), plan.fractions.len() * 2);
        assert_eq!(rows[2].size, 318);
    }

    #[test]
    fn plan_validation() {
        assert!(ReductionPlan::new(vec![0.5, 0.75], 0.7).is_err());
        assert!(ReductionPlan::new(vec![], 0.7).is_err());
        assert!(ReductionPlan::new(vec![1.0, 0.5], 0.7).is_ok());
    }

    #[test]
    fn csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&path, &[SweepRow::new("spark", 1.0, 425, &rm(0.9))]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "method,fraction,size,seed_count,acc_mean,acc_std,auc_mean,auc_std,f1_mean,f1_std\n"
        ));
    }
}
