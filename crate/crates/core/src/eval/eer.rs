//! Equal error rate. Scores follow the convention higher = more likely spoof;
//! a sample is classified as spoof when its score is at or above the threshold.

use crate::data::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<Label>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("scores must be finite"));
        }
        let spoof = labels.iter().filter(|&&l| l == Label::Spoof).count();
        if spoof == 0 || spoof == labels.len() {
            return Err(Error::invalid("score set needs both bona fide and spoof examples"));
        }
        Ok(ScoreSet { scores, labels })
    }

    /// Builds a set from separate bona fide and spoof score lists.
    pub fn from_classes(bona_fide: &[f64], spoof: &[f64]) -> Result<Self> {
        let scores = bona_fide.iter().chain(spoof).copied().collect();
        let labels = std::iter::repeat_n(Label::BonaFide, bona_fide.len())
            .chain(std::iter::repeat_n(Label::Spoof, spoof.len()))
            .collect();
        Self::new(scores, labels)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn class_counts(&self) -> (usize, usize) {
        let spoof = self.labels.iter().filter(|&&l| l == Label::Spoof).count();
        (self.labels.len() - spoof, spoof)
    }
}

/// (FAR, FRR) operating points ordered by increasing threshold.
fn crossing(points: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    let mut prev: Option<(f64, f64)> = None;
    for (far, frr) in points {
        let d = far - frr;
        if d == 0.0 {
            return far;
        }
        if d > 0.0 {
            let (pfar, pfrr) = prev.expect("the lowest threshold has FAR - FRR = -1");
            let pd = pfar - pfrr;
            let alpha = pd / (pd - d);
            return pfar + alpha * (far - pfar);
        }
        prev = Some((far, frr));
    }
    unreachable!("the highest threshold has FAR - FRR = 1")
}

/// EER from a threshold sweep over score midpoints, interpolated linearly
/// across the sign change of FAR − FRR. Runs in O(n log n).
pub fn compute_eer(set: &ScoreSet) -> f64 {
    let (n_bona, n_spoof) = set.class_counts();
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    // sweep from -inf upward: every group of equal scores flips at once
    let mut spoof_below = 0usize;
    let mut bona_below = 0usize;
    let mut points = Vec::with_capacity(set.len() + 1);
    points.push((0.0, 1.0));
    let mut i = 0;
    while i < order.len() {
        let s = set.scores[order[i]];
        while i < order.len() && set.scores[order[i]] == s {
            match set.labels[order[i]] {
                Label::Spoof => spoof_below += 1,
                Label::BonaFide => bona_below += 1,
            }
            i += 1;
        }
        points.push((
            spoof_below as f64 / n_spoof as f64,
            (n_bona - bona_below) as f64 / n_bona as f64,
        ));
    }
    crossing(points)
}

/// Reference EER: evaluates FAR and FRR independently at -inf, every distinct
/// score, every midpoint between consecutive distinct scores, and +inf.
pub fn eer_bruteforce(set: &ScoreSet) -> f64 {
    let (n_bona, n_spoof) = set.class_counts();
    let mut distinct = set.scores.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut thresholds = vec![f64::NEG_INFINITY];
    for (k, &s) in distinct.iter().enumerate() {
        if k > 0 {
            thresholds.push(0.5 * (distinct[k - 1] + s));
        }
        thresholds.push(s);
    }
    thresholds.push(f64::INFINITY);
    let points = thresholds.iter().map(|&t| {
        let mut accepted_spoof = 0;
        let mut rejected_bona = 0;
        for (&s, &l) in set.scores.iter().zip(&set.labels) {
            let says_spoof = s >= t;
            match l {
                Label::Spoof if !says_spoof => accepted_spoof += 1,
                Label::BonaFide if says_spoof => rejected_bona += 1,
                _ => {}
            }
        }
        (
            accepted_spoof as f64 / n_spoof as f64,
            rejected_bona as f64 / n_bona as f64,
        )
    });
    crossing(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_scores_give_zero() {
        let s = ScoreSet::from_classes(&[0.1, 0.2], &[0.8, 0.9]).unwrap();
        assert_eq!(compute_eer(&s), 0.0);
        assert_eq!(eer_bruteforce(&s), 0.0);
    }

    #[test]
    fn identical_scores_give_half() {
        let s = ScoreSet::from_classes(&[0.3; 5], &[0.3; 3]).unwrap();
        assert_eq!(compute_eer(&s), 0.5);
        assert_eq!(eer_bruteforce(&s), 0.5);
    }

    #[test]
    fn interleaved_example_matches_oracle() {
        let s = ScoreSet::from_classes(&[0.1, 0.8], &[0.3, 0.9]).unwrap();
        assert!((compute_eer(&s) - eer_bruteforce(&s)).abs() < 1e-9);
        assert!((compute_eer(&s) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reversed_scores_give_one() {
        let s = ScoreSet::from_classes(&[0.9], &[0.1]).unwrap();
        assert_eq!(compute_eer(&s), 1.0);
    }

    #[test]
    fn interpolates_unbalanced_crossing() {
        // bona {0, 2}, spoof {1}: points (0,1), (0,.5), (1,.5), (1,0) -> 0.5
        let s = ScoreSet::from_classes(&[0.0, 2.0], &[1.0]).unwrap();
        assert!((compute_eer(&s) - 0.5).abs() < 1e-12);
        // bona {0,1,2}, spoof {1.5}: points (0,1),(0,2/3),(0,1/3),(1,1/3),(1,0)
        let s = ScoreSet::from_classes(&[0.0, 1.0, 2.0], &[1.5]).unwrap();
        let a = (1.0 / 3.0) / (1.0 / 3.0 + 2.0 / 3.0);
        assert!((compute_eer(&s) - a).abs() < 1e-12);
        assert!((eer_bruteforce(&s) - a).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(ScoreSet::from_classes(&[0.1, 0.2], &[]).is_err());
        assert!(ScoreSet::new(vec![0.1], vec![]).is_err());
        assert!(ScoreSet::from_classes(&[f64::NAN], &[0.0]).is_err());
    }
}
