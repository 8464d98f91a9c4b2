//! Stratified K-shot calibration sampling.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{LataError, Result};
use crate::model::LabeledExample;

/// Splits `total` across classes in proportion to `marginals` using
/// largest-remainder rounding; remainder ties go to the lower class index.
pub fn allocate_counts(total: usize, marginals: &[f64]) -> Result<Vec<usize>> {
    let sum: f64 = marginals.iter().sum();
    if marginals.is_empty()
        || marginals.iter().any(|m| !(m.is_finite() && *m >= 0.0))
        || (sum - 1.0).abs() > 1e-6
    {
        return Err(LataError::InvalidInput("marginals must be a probability vector".into()));
    }
    let exact: Vec<f64> = marginals.iter().map(|m| total as f64 * m / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| (x + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..marginals.len()).collect();
    let frac = |c: usize| exact[c] - counts[c] as f64;
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    for &c in order.iter().take(total.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    Ok(counts)
}

/// Draws `n_classes * k_shot` calibration items without replacement, per
/// class as allotted by [`allocate_counts`] (uniform marginals when `None`).
///
/// Returns `(calibration, remainder)` as indices into `pool`, each in
/// ascending order.
pub fn sample_kshot<R: Rng + ?Sized>(
    pool: &[LabeledExample],
    k_shot: usize,
    n_classes: usize,
    marginals: Option<&[f64]>,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let uniform = vec![1.0 / n_classes as f64; n_classes];
    let marginals = marginals.unwrap_or(&uniform);
    if marginals.len() != n_classes {
        return Err(LataError::dims("class marginals", n_classes, marginals.len()));
    }
    let counts = allocate_counts(n_classes * k_shot, marginals)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, ex) in pool.iter().enumerate() {
        if ex.label >= n_classes {
            return Err(LataError::Data(format!("label {} out of range", ex.label)));
        }
        by_class[ex.label].push(i);
    }
    let mut chosen = vec![false; pool.len()];
    for (c, (members, &want)) in by_class.iter_mut().zip(&counts).enumerate() {
        if members.len() < want {
            return Err(LataError::Data(format!(
                "class {c} has {} pool items, {want} needed for calibration",
                members.len()
            )));
        }
        let (picked, _) = members.partial_shuffle(rng, want);
        for &i in picked.iter() {
            chosen[i] = true;
        }
    }
    let (mut cal, mut rest) = (Vec::new(), Vec::new());
    for (i, &c) in chosen.iter().enumerate() {
        if c {
            cal.push(i);
        } else {
            rest.push(i);
        }
    }
    Ok((cal, rest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Embedding;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(labels: &[usize]) -> Vec<LabeledExample> {
        labels
            .iter()
            .map(|&label| LabeledExample {
                embedding: Embedding::from_unit(vec![1.0, 0.0]).unwrap(),
                label,
            })
            .collect()
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate_counts(6, &[1.0 / 3.0; 3]).unwrap(), vec![2, 2, 2]);
        assert_eq!(allocate_counts(8, &[0.75, 0.25]).unwrap(), vec![6, 2]);
        assert_eq!(allocate_counts(5, &[0.6, 0.4]).unwrap(), vec![3, 2]);
        // 7 * [0.5, 0.3, 0.2] = [3.5, 2.1, 1.4]: floors 3, 2, 1, one extra to class 0.
        assert_eq!(allocate_counts(7, &[0.5, 0.3, 0.2]).unwrap(), vec![4, 2, 1]);
        // Equal remainders: lower index wins.
        assert_eq!(allocate_counts(1, &[0.5, 0.5]).unwrap(), vec![1, 0]);
        assert!(allocate_counts(3, &[0.5, 0.6]).is_err());
    }

    #[test]
    fn kshot_examples() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let p = pool(&labels);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (cal, rest) = sample_kshot(&p, 2, 3, None, &mut rng).unwrap();
        assert_eq!(cal.len(), 6);
        assert_eq!(rest.len(), 24);
        for c in 0..3 {
            assert_eq!(cal.iter().filter(|&&i| labels[i] == c).count(), 2);
        }
        let again = sample_kshot(&p, 2, 3, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(again.0, cal);
        let other = sample_kshot(&p, 2, 3, None, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(other.0, cal);

        let short = pool(&[0, 0, 0, 1]);
        assert!(sample_kshot(&short, 2, 2, None, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn allocation_hits_total(total in 0usize..500, raw in prop::collection::vec(0.0f64..1.0, 1..10)) {
            let s: f64 = raw.iter().sum();
            prop_assume!(s > 0.0);
            let m: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let counts = allocate_counts(total, &m).unwrap();
            prop_assert_eq!(counts.iter().sum::<usize>(), total);
            for (c, m) in counts.iter().zip(&m) {
                prop_assert!((*c as f64 - total as f64 * m).abs() < 1.0 + 1e-9);
            }
        }

        #[test]
        fn kshot_partitions_the_pool(seed in any::<u64>(), k in 1usize..5) {
            let labels: Vec<usize> = (0..40).map(|i| (i * 7) % 4).collect();
            let p = pool(&labels);
            let (cal, rest) = sample_kshot(&p, k, 4, None, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut all: Vec<usize> = cal.iter().chain(&rest).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..40).collect::<Vec<_>>());
            prop_assert_eq!(cal.len(), 4 * k);
        }
    }
}
