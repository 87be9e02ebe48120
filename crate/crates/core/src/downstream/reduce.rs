use crate::error::{config_err, Error, Result};
use crate::seeds::stream;
use log::warn;
use rand::seq::SliceRandom;
use std::collections::BTreeMap;

/// `floor(n · f)` per fraction.
pub fn reduction_plan(n: usize, fractions: &[f64]) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(config_err!("reduction plan needs a non-empty training set"));
    }
    fractions
        .iter()
        .map(|&f| {
            if !(0.0..=1.0).contains(&f) {
                return Err(config_err!("fraction {f} outside [0, 1]"));
            }
            // guard against products like 0.29·100 = 28.999…
            Ok((n as f64 * f + 1e-9).floor() as usize)
        })
        .collect()
}

/// Per-class quotas summing to `floor(N·fraction)` by largest remainder,
/// raised to at least one per class.
pub fn class_quotas(
    counts: &BTreeMap<usize, usize>,
    fraction: f64,
) -> Result<BTreeMap<usize, usize>> {
    let n: usize = counts.values().sum();
    let total = reduction_plan(n, &[fraction])?[0];
    let mut quotas: BTreeMap<usize, usize> = BTreeMap::new();
    let mut rems: Vec<(f64, usize, usize)> = Vec::new();
    for (&class, &c) in counts {
        let ideal = c as f64 * fraction;
        let base = ((ideal + 1e-9).floor() as usize).min(c);
        quotas.insert(class, base);
        rems.push((ideal - base as f64, c, class));
    }
    let mut left = total.saturating_sub(quotas.values().sum());
    // largest remainder first, then larger class, then lower class id
    rems.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    for &(_, c, class) in &rems {
        if left == 0 {
            break;
        }
        let q = quotas.get_mut(&class).expect("present");
        if *q < c {
            *q += 1;
            left -= 1;
        }
    }
    for (class, q) in quotas.iter_mut() {
        if *q == 0 {
            warn!("fraction {fraction} leaves class {class} empty; keeping one sample");
            *q = 1;
        }
    }
    Ok(quotas)
}

/// Indices (ascending) of a stratified random subset of `labels`.
pub fn stratified_subsample(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::Validation("cannot subsample an empty split".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let counts = by_class.iter().map(|(&c, v)| (c, v.len())).collect();
    let quotas = class_quotas(&counts, fraction)?;
    let mut out = Vec::new();
    for (class, mut idx) in by_class {
        let mut rng = stream(seed, &format!("subsample/{class}"));
        idx.shuffle(&mut rng);
        out.extend_from_slice(&idx[..quotas[&class]]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Stratified hold-out: `(train, val)` index lists with `val` drawn as a
/// `fraction` stratified subsample.
pub fn stratified_split(
    labels: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let val = stratified_subsample(labels, fraction, seed)?;
    let mut is_val = vec![false; labels.len()];
    val.iter().for_each(|&i| is_val[i] = true);
    let train = (0..labels.len()).filter(|&i| !is_val[i]).collect();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn published_schedule() {
        assert_eq!(
            reduction_plan(425, &[0.75, 0.5, 0.25]).unwrap(),
            [318, 212, 106]
        );
        assert_eq!(reduction_plan(145, &[0.75]).unwrap(), [108]);
        assert_eq!(
            reduction_plan(13952, &[0.75, 0.5, 0.10, 0.05]).unwrap(),
            [10464, 6976, 1395, 697]
        );
        assert_eq!(reduction_plan(13952, &[0.25]).unwrap(), [3488]);
    }

    #[test]
    fn balanced_half_and_identity() {
        let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let s = stratified_subsample(&labels, 0.5, 3).unwrap();
        assert_eq!(s.iter().filter(|&&i| labels[i] == 0).count(), 50);
        assert_eq!(s.len(), 100);
        assert_eq!(
            stratified_subsample(&labels, 1.0, 3).unwrap(),
            (0..200).collect::<Vec<_>>()
        );
        assert_ne!(s, stratified_subsample(&labels, 0.5, 4).unwrap());
        assert_eq!(s, stratified_subsample(&labels, 0.5, 3).unwrap());
    }

    #[test]
    fn tiny_fraction_keeps_every_class() {
        let labels = [0, 0, 0, 0, 0, 0, 0, 0, 0, 1];
        let s = stratified_subsample(&labels, 0.1, 0).unwrap();
        assert!(s.iter().any(|&i| labels[i] == 1));
        assert!(s.iter().any(|&i| labels[i] == 0));
    }

    proptest! {
        #[test]
        fn eleven_class_counts_are_proportional(sizes in proptest::collection::vec(20usize..200, 11), seed in 0u64..50) {
            let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
            let s = stratified_subsample(&labels, 0.05, seed).unwrap();
            let mut got = [0usize; 11];
            s.iter().for_each(|&i| got[labels[i]] += 1);
            for c in 0..11 {
                let ideal = 0.05 * sizes[c] as f64;
                prop_assert!((got[c] as f64 - ideal).abs() <= 1.0, "class {} got {} ideal {}", c, got[c], ideal);
                for d in 0..11 {
                    if sizes[c] > sizes[d] {
                        prop_assert!(got[c] >= got[d]);
                    }
                }
            }
        }
    }
}
