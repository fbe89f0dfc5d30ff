//! Train/test splitting, confusion matrices, and summary metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dataset, InvasivenessLabel};

pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
    pub train_fraction: f64,
}

/// Per-class shuffle, floor(fraction * count) rows to train, remainder to
/// test. Deterministic in the seed.
pub fn stratified_split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Split> {
    let pairs: Vec<(String, usize)> = dataset
        .samples
        .iter()
        .map(|s| (s.id.clone(), s.label.code()))
        .collect();
    stratified_split_ids(&pairs, fraction, seed)
}

/// Same split rule over plain (id, class code) pairs, for callers that only
/// have a feature table.
pub fn stratified_split_ids(pairs: &[(String, usize)], fraction: f64, seed: u64) -> Result<Split> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for class in InvasivenessLabel::ALL {
        let mut ids: Vec<&str> = pairs
            .iter()
            .filter(|(_, code)| *code == class.code())
            .map(|(id, _)| id.as_str())
            .collect();
        ids.shuffle(&mut rng);
        let n_train = (fraction * ids.len() as f64).floor() as usize;
        for (i, id) in ids.iter().enumerate() {
            if i < n_train {
                train_ids.push(id.to_string());
            } else {
                test_ids.push(id.to_string());
            }
        }
    }
    if test_ids.is_empty() {
        return Err(Error::InvalidArgument("split produced an empty test set".into()));
    }
    Ok(Split { train_ids, test_ids, seed, train_fraction: fraction })
}

/// Unstratified variant: one global shuffle, same floor rule.
pub fn random_split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Split> {
    if dataset.samples.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut ids: Vec<&str> = dataset.samples.iter().map(|s| s.id.as_str()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = (fraction * ids.len() as f64).floor() as usize;
    if n_train == ids.len() {
        return Err(Error::InvalidArgument("split produced an empty test set".into()));
    }
    Ok(Split {
        train_ids: ids[..n_train].iter().map(|s| s.to_string()).collect(),
        test_ids: ids[n_train..].iter().map(|s| s.to_string()).collect(),
        seed,
        train_fraction: fraction,
    })
}

/// Rows are ground truth, columns are predictions, both in class-code order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> usize {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> usize {
        (0..NUM_CLASSES).map(|i| self.counts[i][j]).sum()
    }

    /// Aligned text table with class names.
    pub fn render(&self) -> String {
        let mut out = String::from("true\\pred");
        for class in InvasivenessLabel::ALL {
            out.push_str(&format!("{:>6}", class.name()));
        }
        out.push('\n');
        for (i, class) in InvasivenessLabel::ALL.iter().enumerate() {
            out.push_str(&format!("{:<9}", class.name()));
            for j in 0..NUM_CLASSES {
                out.push_str(&format!("{:>6}", self.counts[i][j]));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(preds: &[usize], labels: &[usize]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::DimMismatch(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut counts = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= NUM_CLASSES || l >= NUM_CLASSES {
            return Err(Error::InvalidArgument(format!("class code out of range: pred {p}, label {l}")));
        }
        counts[l][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub recall: [f64; NUM_CLASSES],
    pub precision: [f64; NUM_CLASSES],
    /// Classes whose precision is undefined (never predicted) and reported
    /// as 0.
    pub undefined_precision: Vec<usize>,
}

pub fn summarize(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("empty confusion matrix".into()));
    }
    let mut recall = [0.0; NUM_CLASSES];
    let mut precision = [0.0; NUM_CLASSES];
    let mut undefined_precision = Vec::new();
    for c in 0..NUM_CLASSES {
        let row = cm.row_sum(c);
        recall[c] = if row == 0 { 0.0 } else { cm.counts[c][c] as f64 / row as f64 };
        let col = cm.col_sum(c);
        if col == 0 {
            undefined_precision.push(c);
        } else {
            precision[c] = cm.counts[c][c] as f64 / col as f64;
        }
    }
    Ok(Metrics {
        accuracy: cm.trace() as f64 / total as f64,
        recall,
        precision,
        undefined_precision,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{default_spec, generate_dataset};

    fn class_counts(split_ids: &[String], dataset: &Dataset) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for id in split_ids {
            let sample = dataset.samples.iter().find(|s| &s.id == id).unwrap();
            counts[sample.label.code()] += 1;
        }
        counts
    }

    fn tiny_dataset(per_class: [usize; 4]) -> Dataset {
        let mut spec = default_spec();
        spec.patch_size = 16;
        spec.radius_range = (1.5, 2.0);
        generate_dataset(per_class, &spec, 7).unwrap()
    }

    #[test]
    fn stratified_split_floor_sizes() {
        let dataset = tiny_dataset([9, 6, 3, 7]);
        let split = stratified_split(&dataset, 0.8, 1).unwrap();
        assert_eq!(class_counts(&split.train_ids, &dataset), [7, 4, 2, 5]);
        assert_eq!(class_counts(&split.test_ids, &dataset), [2, 2, 1, 2]);
        // disjoint and complete
        let mut all: Vec<&String> = split.train_ids.iter().chain(&split.test_ids).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), dataset.samples.len());
    }

    #[test]
    fn full_scale_counts_floor_correctly() {
        // floor(0.8 * {158, 136, 53, 329}) = {126, 108, 42, 263}
        for (count, expected) in [(158usize, 126usize), (136, 108), (53, 42), (329, 263)] {
            assert_eq!((0.8 * count as f64).floor() as usize, expected);
        }
    }

    #[test]
    fn split_rejects_degenerate_fractions() {
        let dataset = tiny_dataset([2, 2, 2, 2]);
        assert!(stratified_split(&dataset, 1.0, 0).is_err());
        assert!(stratified_split(&dataset, 0.0, 0).is_err());
        assert!(random_split(&dataset, 1.0, 0).is_err());
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let dataset = tiny_dataset([6, 6, 6, 6]);
        let a = stratified_split(&dataset, 0.8, 5).unwrap();
        let b = stratified_split(&dataset, 0.8, 5).unwrap();
        assert_eq!(a, b);
        let c = stratified_split(&dataset, 0.8, 6).unwrap();
        assert_ne!(a.train_ids, c.train_ids);
    }

    #[test]
    fn random_split_covers_everything() {
        let dataset = tiny_dataset([4, 4, 4, 4]);
        let split = random_split(&dataset, 0.75, 3).unwrap();
        assert_eq!(split.train_ids.len(), 12);
        assert_eq!(split.test_ids.len(), 4);
    }

    #[test]
    fn perfect_predictions() {
        let labels = vec![0, 0, 1, 2, 3];
        let cm = confusion(&labels, &labels).unwrap();
        assert_eq!(cm.trace(), 5);
        let m = summarize(&cm).unwrap();
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn all_ia_on_balanced_set() {
        let mut labels = Vec::new();
        for c in 0..4 {
            labels.extend(std::iter::repeat_n(c, 25));
        }
        let preds = vec![3usize; 100];
        let cm = confusion(&preds, &labels).unwrap();
        let m = summarize(&cm).unwrap();
        assert_eq!(m.accuracy, 0.25);
        assert_eq!(m.recall, [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(m.undefined_precision, vec![0, 1, 2]);
        assert_eq!(m.precision[3], 0.25);
    }

    #[test]
    fn confusion_row_sums_match_label_counts() {
        let labels = vec![0, 1, 1, 2, 3, 3, 3];
        let preds = vec![1, 1, 0, 2, 3, 0, 3];
        let cm = confusion(&preds, &labels).unwrap();
        assert_eq!(cm.row_sum(0), 1);
        assert_eq!(cm.row_sum(1), 2);
        assert_eq!(cm.row_sum(2), 1);
        assert_eq!(cm.row_sum(3), 3);
        assert_eq!(cm.total(), 7);
    }

    #[test]
    fn accuracy_invariant_under_class_permutation() {
        let labels = vec![0, 1, 2, 3, 0, 2];
        let preds = vec![0, 2, 2, 1, 3, 2];
        let base = summarize(&confusion(&preds, &labels).unwrap()).unwrap().accuracy;
        let perm = [2usize, 0, 3, 1];
        let labels_p: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let preds_p: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
        let permuted = summarize(&confusion(&preds_p, &labels_p).unwrap()).unwrap().accuracy;
        assert_eq!(base, permuted);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(confusion(&[0, 1], &[0]).is_err());
        assert!(confusion(&[7], &[0]).is_err());
    }

    #[test]
    fn render_mentions_all_classes() {
        let cm = confusion(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap();
        let text = cm.render();
        for name in ["AAH", "AIS", "MIA", "IA"] {
            assert!(text.contains(name));
        }
    }
}
