//! Adaptive hard augmentation.
//!
//! Each unlabelled sample keeps an exponential moving average of its
//! pseudo-label loss. Once warm-up is over, the averages are split with
//! Otsu's method: samples at or below the threshold are `Easy` and get the
//! extra-hard view, the rest keep the regular strong view.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{extra_hard_view, strong_view, AugPolicy, View};
use crate::error::{Error, Result};
use crate::pcdata::PointCloud;

pub const OTSU_BINS: usize = 256;

/// Largest multiset accepted by [`otsu_threshold`]; keeps the exact integer
/// comparison inside `i128`.
pub const OTSU_MAX_VALUES: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mark {
    Easy,
    Hard,
}

/// Histogram bin of `v` for `OTSU_BINS` equal-width bins over `[lo, hi]`;
/// `hi` itself lands in the last bin.
pub fn otsu_bin(v: f64, lo: f64, hi: f64) -> usize {
    let b = ((v - lo) / (hi - lo) * OTSU_BINS as f64).floor();
    (b.max(0.0) as usize).min(OTSU_BINS - 1)
}

/// Otsu threshold of a set of values.
///
/// Values are binned into 256 equal-width bins over `[min, max]`. For each
/// interior boundary `j` (1..=255) the values are split into bins `< j` and
/// `>= j`, and the between-class variance `w0 * w1 * (m0 - m1)^2` of the bin
/// levels is compared exactly in integer arithmetic. Returns the boundary
/// `min + j * (max - min) / 256` of the best split, the lowest on ties, or
/// `None` when all values are equal.
pub fn otsu_threshold(values: &[f64]) -> Result<Option<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "otsu_threshold of an empty set".into(),
        ));
    }
    if values.len() > OTSU_MAX_VALUES {
        return Err(Error::InvalidArgument(format!(
            "otsu_threshold supports at most {OTSU_MAX_VALUES} values"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "otsu_threshold of non-finite values".into(),
        ));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(None);
    }
    let mut hist = [0i128; OTSU_BINS];
    for &v in values {
        hist[otsu_bin(v, lo, hi)] += 1;
    }
    let n = values.len() as i128;
    let total: i128 = hist.iter().enumerate().map(|(b, &c)| b as i128 * c).sum();

    // between-class variance is proportional to d^2 / (n0 * n1) with
    // d = s0 * n1 - s1 * n0; compare a/b > c/d as a*d > c*b.
    let mut best: Option<(usize, i128, i128)> = None;
    let (mut n0, mut s0) = (0i128, 0i128);
    for j in 1..OTSU_BINS {
        n0 += hist[j - 1];
        s0 += (j as i128 - 1) * hist[j - 1];
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = s0 * n1 - (total - s0) * n0;
        let num = d * d;
        let den = n0 * n1;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd > bn * den,
        };
        if better {
            best = Some((j, num, den));
        }
    }
    let (j, _, _) = best.expect("lo < hi leaves values on both sides of boundary 1..255");
    Ok(Some(lo + j as f64 * (hi - lo) / OTSU_BINS as f64))
}

/// Per-sample EMA loss history and easy/hard marks.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalLossTable {
    pub kappa: f64,
    /// Epochs (1-based, inclusive) before marks may become `Easy`.
    pub warmup: u64,
    history: Vec<f64>,
    seen: Vec<bool>,
    marks: Vec<Mark>,
}

impl HistoricalLossTable {
    pub fn new(samples: usize, kappa: f64, warmup: u64) -> Result<Self> {
        if !(kappa > 0.0 && kappa <= 1.0) {
            return Err(Error::Config(format!(
                "aha.kappa must lie in (0, 1], got {kappa}"
            )));
        }
        Ok(HistoricalLossTable {
            kappa,
            warmup,
            history: vec![0.0; samples],
            seen: vec![false; samples],
            marks: vec![Mark::Hard; samples],
        })
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn history(&self, id: usize) -> Option<f64> {
        self.seen[id].then_some(self.history[id])
    }

    pub fn mark(&self, id: usize) -> Mark {
        self.marks[id]
    }

    pub fn marks(&self) -> &[Mark] {
        &self.marks
    }

    pub fn easy_fraction(&self) -> f64 {
        if self.marks.is_empty() {
            return 0.0;
        }
        self.marks.iter().filter(|&&m| m == Mark::Easy).count() as f64 / self.marks.len() as f64
    }

    /// First observation sets `H = loss`; later ones apply
    /// `H = (1 - kappa) * H + kappa * loss`.
    pub fn update(&mut self, id: usize, loss: f64) -> Result<()> {
        if !(loss >= 0.0 && loss.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "historical loss must be finite and >= 0, got {loss}"
            )));
        }
        if id >= self.history.len() {
            return Err(Error::InvalidArgument(format!(
                "sample id {id} out of range"
            )));
        }
        if self.seen[id] {
            self.history[id] = (1.0 - self.kappa) * self.history[id] + self.kappa * loss;
        } else {
            self.history[id] = loss;
            self.seen[id] = true;
        }
        Ok(())
    }

    /// Recomputes marks at the end of `epoch` (1-based).
    pub fn refresh_marks(&mut self, epoch: u64) {
        self.marks.iter_mut().for_each(|m| *m = Mark::Hard);
        if epoch < self.warmup {
            return;
        }
        let values: Vec<f64> = self
            .history
            .iter()
            .zip(&self.seen)
            .filter(|(_, &s)| s)
            .map(|(&h, _)| h)
            .collect();
        if values.len() < 2 {
            return;
        }
        let Ok(Some(t)) = otsu_threshold(&values) else {
            return;
        };
        for ((m, &h), &s) in self.marks.iter_mut().zip(&self.history).zip(&self.seen) {
            if s && h <= t {
                *m = Mark::Easy;
            }
        }
    }

    /// Raw state for checkpointing: history, seen flags (0/1), marks (1 = easy).
    pub fn export(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (
            self.history.clone(),
            self.seen.iter().map(|&s| f64::from(u8::from(s))).collect(),
            self.marks
                .iter()
                .map(|&m| f64::from(u8::from(m == Mark::Easy)))
                .collect(),
        )
    }

    pub fn restore(&mut self, history: Vec<f64>, seen: &[f64], marks: &[f64]) -> Result<()> {
        let n = self.history.len();
        if history.len() != n || seen.len() != n || marks.len() != n {
            return Err(Error::Checkpoint(
                "historical loss table size mismatch".into(),
            ));
        }
        self.history = history;
        self.seen = seen.iter().map(|&s| s != 0.0).collect();
        self.marks = marks
            .iter()
            .map(|&m| if m != 0.0 { Mark::Easy } else { Mark::Hard })
            .collect();
        Ok(())
    }
}

/// Extra-hard view for easy samples, strong view otherwise.
pub fn dispatch_augmentation<R: Rng>(
    mark: Mark,
    cloud: &PointCloud,
    rng: &mut R,
    policy: &AugPolicy,
) -> Result<View> {
    match mark {
        Mark::Easy => extra_hard_view(cloud, rng, policy, policy.strength),
        Mark::Hard => Ok(strong_view(cloud, rng, policy)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcdata::{generate_shape, ShapeKind};
    use crate::rng::{self, Tag};
    use proptest::prelude::*;

    #[test]
    fn ema_recurrence() {
        let mut t = HistoricalLossTable::new(2, 0.1, 0).unwrap();
        t.update(0, 1.0).unwrap();
        t.update(0, 2.0).unwrap();
        assert!((t.history(0).unwrap() - 1.1).abs() < 1e-12);
        t.update(1, 0.7).unwrap();
        assert_eq!(t.history(1), Some(0.7));
        assert!(t.update(1, -0.1).is_err());
        assert!(t.update(1, f64::NAN).is_err());
    }

    #[test]
    fn kappa_one_tracks_latest() {
        let mut t = HistoricalLossTable::new(1, 1.0, 0).unwrap();
        for l in [0.3, 2.0, 0.9] {
            t.update(0, l).unwrap();
            assert_eq!(t.history(0), Some(l));
        }
        assert!(HistoricalLossTable::new(1, 0.0, 0).is_err());
    }

    #[test]
    fn otsu_two_clusters() {
        let t = otsu_threshold(&[0.1, 0.1, 0.1, 0.9, 0.9]).unwrap().unwrap();
        assert!(t > 0.1 && t < 0.9);
        assert_eq!(otsu_threshold(&[0.4; 5]).unwrap(), None);
        assert!(otsu_threshold(&[]).is_err());
        let t = otsu_threshold(&[2.0, 3.0]).unwrap().unwrap();
        assert!(t > 2.0 && t <= 3.0);
    }

    #[test]
    fn marks_follow_warmup_and_threshold() {
        let mut t = HistoricalLossTable::new(5, 0.1, 3).unwrap();
        for (i, h) in [0.1, 0.1, 0.1, 0.9, 0.9].into_iter().enumerate() {
            t.update(i, h).unwrap();
        }
        t.refresh_marks(2);
        assert!(t.marks().iter().all(|&m| m == Mark::Hard));
        t.refresh_marks(3);
        assert_eq!(
            t.marks(),
            &[Mark::Easy, Mark::Easy, Mark::Easy, Mark::Hard, Mark::Hard]
        );
        assert!((t.easy_fraction() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn single_or_unseen_samples_stay_hard() {
        let mut t = HistoricalLossTable::new(3, 0.1, 0).unwrap();
        t.update(1, 0.2).unwrap();
        t.refresh_marks(10);
        assert!(t.marks().iter().all(|&m| m == Mark::Hard));
    }

    #[test]
    fn dispatch_transform_counts() {
        let mut r = rng::stream(1, Tag::Shape, &[]);
        let c = generate_shape(ShapeKind::Torus, 16, &mut r).unwrap();
        let p = AugPolicy::default();
        let v = dispatch_augmentation(Mark::Hard, &c, &mut r, &p).unwrap();
        assert_eq!(v.transforms.len(), 2);
        let v = dispatch_augmentation(Mark::Easy, &c, &mut r, &p).unwrap();
        assert_eq!(v.transforms.len(), 4);
    }

    proptest! {
        #[test]
        fn ema_stays_within_observed_range(
            losses in proptest::collection::vec(0.0f64..10.0, 1..40),
            kappa in 0.01f64..=1.0,
        ) {
            let mut t = HistoricalLossTable::new(1, kappa, 0).unwrap();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for l in losses {
                t.update(0, l).unwrap();
                lo = lo.min(l);
                hi = hi.max(l);
                let h = t.history(0).unwrap();
                prop_assert!(h >= lo - 1e-12 && h <= hi + 1e-12);
            }
        }

        #[test]
        fn easy_marks_are_monotone(values in proptest::collection::vec(0.0f64..3.0, 2..60)) {
            let mut t = HistoricalLossTable::new(values.len(), 0.5, 0).unwrap();
            for (i, &v) in values.iter().enumerate() {
                t.update(i, v).unwrap();
            }
            t.refresh_marks(1);
            for a in 0..values.len() {
                for b in 0..values.len() {
                    if values[a] <= values[b] && t.mark(b) == Mark::Easy {
                        prop_assert_eq!(t.mark(a), Mark::Easy);
                    }
                }
            }
        }
    }
}
