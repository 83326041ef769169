//! Subject-wise nested cross-validation and balanced batch sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub run_id: usize,
    pub fold_id: usize,
    pub train_subjects: Vec<String>,
    pub val_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
}

impl FoldSplit {
    pub fn is_disjoint(&self) -> bool {
        let all: Vec<&String> = self
            .train_subjects
            .iter()
            .chain(&self.val_subjects)
            .chain(&self.test_subjects)
            .collect();
        let mut sorted = all.clone();
        sorted.sort();
        sorted.dedup();
        sorted.len() == all.len()
    }
}

/// Sizes of `folds` near-equal parts of `n` items; the remainder goes to
/// the leading parts.
pub fn fold_sizes(n: usize, folds: usize) -> Vec<usize> {
    (0..folds)
        .map(|k| n / folds + usize::from(k < n % folds))
        .collect()
}

/// For every run, a seeded permutation of the subjects is cut into `folds`
/// test folds; the remaining subjects are split 3:1 into train and
/// validation.
pub fn nested_cv_splits(
    subjects: &[String],
    folds: usize,
    runs: usize,
    seed: u64,
) -> Result<Vec<FoldSplit>, TrainError> {
    let mut sorted = subjects.to_vec();
    sorted.sort();
    sorted.dedup();
    let n = sorted.len();
    let sizes = fold_sizes(n, folds);
    // each fold must leave at least one training and one validation subject
    if folds < 2 || n < folds || n - sizes[0] < 2 {
        return Err(TrainError::TooFewSubjects { have: n, folds });
    }
    let mut out = Vec::with_capacity(folds * runs);
    for run in 0..runs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (run as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut perm = sorted.clone();
        perm.shuffle(&mut rng);
        let mut start = 0;
        for (fold, &sz) in sizes.iter().enumerate() {
            let test: Vec<String> = perm[start..start + sz].to_vec();
            let rest: Vec<String> = perm[..start]
                .iter()
                .chain(&perm[start + sz..])
                .cloned()
                .collect();
            let n_val = ((rest.len() as f64 / 4.0).round() as usize).clamp(1, rest.len() - 1);
            let split = FoldSplit {
                run_id: run,
                fold_id: fold,
                train_subjects: rest[n_val..].to_vec(),
                val_subjects: rest[..n_val].to_vec(),
                test_subjects: test,
            };
            log::debug!(
                "run {run} fold {fold}: train {:?} val {:?} test {:?}",
                split.train_subjects,
                split.val_subjects,
                split.test_subjects
            );
            out.push(split);
            start += sz;
        }
    }
    Ok(out)
}

/// Positives per batch for a negative:positive ratio.
pub fn positives_per_batch(batch_size: usize, ratio: f64) -> usize {
    ((batch_size as f64 / (1.0 + ratio)).round() as usize)
        .clamp(1, batch_size.saturating_sub(1).max(1))
}

/// One epoch of training batches (indices into `is_pos`). Every batch holds
/// the same positive/negative counts. Positives are cycled through a fresh
/// permutation so each appears at least once; negatives are drawn without
/// replacement and, once exhausted, with replacement.
pub fn balanced_batches(
    is_pos: &[bool],
    batch_size: usize,
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>, TrainError> {
    let mut pos: Vec<usize> = (0..is_pos.len()).filter(|&i| is_pos[i]).collect();
    let mut neg: Vec<usize> = (0..is_pos.len()).filter(|&i| !is_pos[i]).collect();
    if pos.is_empty() {
        return Err(TrainError::NoPositives);
    }
    if neg.is_empty() {
        return Err(TrainError::NoNegatives);
    }
    let p = positives_per_batch(batch_size, ratio);
    let q = batch_size - p;
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_batches = pos.len().div_ceil(p);
    let mut next_neg = 0;
    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut batch = Vec::with_capacity(batch_size);
        for j in 0..p {
            batch.push(pos[(b * p + j) % pos.len()]);
        }
        for _ in 0..q {
            if next_neg < neg.len() {
                batch.push(neg[next_neg]);
                next_neg += 1;
            } else {
                batch.push(neg[rng.random_range(0..neg.len())]);
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subjects(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("S{i:02}")).collect()
    }

    #[test]
    fn fold_sizes_examples() {
        assert_eq!(fold_sizes(10, 5), vec![2; 5]);
        assert_eq!(fold_sizes(9, 5), vec![2, 2, 2, 2, 1]);
    }

    #[test]
    fn nine_subjects() {
        let s = nested_cv_splits(&subjects(9), 5, 5, 1).unwrap();
        assert_eq!(s.len(), 25);
        for sp in &s {
            assert!(sp.is_disjoint());
            assert_eq!(
                sp.train_subjects.len() + sp.val_subjects.len() + sp.test_subjects.len(),
                9
            );
        }
        let test_sizes: Vec<usize> = s[..5].iter().map(|f| f.test_subjects.len()).collect();
        assert_eq!(test_sizes, vec![2, 2, 2, 2, 1]);
    }

    #[test]
    fn too_few_subjects() {
        assert!(matches!(
            nested_cv_splits(&subjects(4), 5, 1, 0),
            Err(TrainError::TooFewSubjects { have: 4, folds: 5 })
        ));
    }

    #[test]
    fn default_ratio_is_26_38() {
        assert_eq!(positives_per_batch(64, 1.5), 26);
    }

    #[test]
    fn batches_need_both_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            balanced_batches(&[false, false], 4, 1.0, &mut rng),
            Err(TrainError::NoPositives)
        ));
        assert!(matches!(
            balanced_batches(&[true], 4, 1.0, &mut rng),
            Err(TrainError::NoNegatives)
        ));
    }
}
