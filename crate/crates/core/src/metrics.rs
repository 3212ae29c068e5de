//! Word error rate and DID accuracy.

use crate::error::{Error, Result};

/// Levenshtein distance with unit substitution, insertion and deletion
/// costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Metric("empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Pooled edit counts over a corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ErrorCount {
    pub errors: usize,
    pub words: usize,
}

impl ErrorCount {
    pub fn add<T: PartialEq>(&mut self, reference: &[T], hypothesis: &[T]) -> Result<()> {
        if reference.is_empty() {
            return Err(Error::Metric("empty reference".into()));
        }
        self.errors += edit_distance(reference, hypothesis);
        self.words += reference.len();
        Ok(())
    }

    pub fn merge(&mut self, other: ErrorCount) {
        self.errors += other.errors;
        self.words += other.words;
    }

    pub fn rate(&self) -> Result<f64> {
        if self.words == 0 {
            return Err(Error::Metric("no reference words".into()));
        }
        Ok(self.errors as f64 / self.words as f64)
    }
}

pub fn corpus_wer<T: PartialEq>(pairs: &[(&[T], &[T])]) -> Result<f64> {
    let mut c = ErrorCount::default();
    for (r, h) in pairs {
        c.add(r, h)?;
    }
    c.rate()
}

pub fn did_accuracy<T: PartialEq>(labels: &[T], predictions: &[T]) -> Result<f64> {
    if labels.len() != predictions.len() {
        return Err(Error::Metric(format!(
            "{} labels but {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Metric("no labels".into()));
    }
    let hits = labels.iter().zip(predictions).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&["a", "b", "c"], &["a", "b", "c"]).unwrap(), 0.0);
        assert!((wer(&["a", "b", "c"], &["a", "x", "c"]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer(&["a", "b"], &[]).unwrap(), 1.0);
        assert_eq!(wer(&["a"], &["b", "c", "d"]).unwrap(), 3.0);
        assert!(matches!(wer::<&str>(&[], &["a"]), Err(Error::Metric(_))));
    }

    #[test]
    fn corpus_wer_pools_counts() {
        let pairs: Vec<(&[&str], &[&str])> = vec![(&["a", "b", "c", "d"], &["a", "b", "c", "d"]), (&["a"], &["b"])];
        assert!((corpus_wer(&pairs).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn did_examples() {
        assert_eq!(did_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert!((did_accuracy(&[1, 2, 3], &[1, 2, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(did_accuracy::<u8>(&[], &[]).is_err());
        assert!(did_accuracy(&[1], &[1, 2]).is_err());
    }

    proptest! {
        #[test]
        fn edit_distance_is_a_metric(
            a in prop::collection::vec(0u8..4, 0..8),
            b in prop::collection::vec(0u8..4, 0..8),
            c in prop::collection::vec(0u8..4, 0..8),
        ) {
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert_eq!(edit_distance(&a, &a), 0);
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            prop_assert!(edit_distance(&a, &b) <= a.len().max(b.len()));
            prop_assert!(edit_distance(&a, &b) >= a.len().abs_diff(b.len()));
        }
    }
}
