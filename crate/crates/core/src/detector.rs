//! Watermark verification: bit accuracy, threshold calibration, verdicts and
//! detection metrics.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::models::{ModelBundle, Watermark};

pub const DEFAULT_FPR_BUDGET: f64 = 0.01;

/// Fraction of positions where the two watermarks agree.
pub fn bitwise_accuracy(a: &Watermark, b: &Watermark) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("watermarks of {} and {} bits", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty watermarks".into()));
    }
    let same = a.bits().iter().zip(b.bits()).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Real,
    Fake,
}

/// Fake iff `bitacc < threshold`.
pub fn verdict_for(bitacc: f64, threshold: f64) -> Verdict {
    if bitacc < threshold {
        Verdict::Fake
    } else {
        Verdict::Real
    }
}

/// Largest threshold whose false-positive rate on `negatives` stays within
/// `budget`. Candidates are the observed values and 1.0.
pub fn calibrate_threshold(negatives: &[f64], budget: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Calibration("no negative examples".into()));
    }
    if !(0.0..1.0).contains(&budget) {
        return Err(Error::Calibration(format!("FPR budget {budget} outside [0, 1)")));
    }
    if let Some(v) = negatives.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Calibration(format!("bit accuracy {v} outside [0, 1]")));
    }
    let mut sorted = negatives.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.push(1.0);
    sorted.dedup();
    let n = negatives.len() as f64;
    // flagged(t) = count of values strictly below t, monotone in t
    let mut best = sorted[0];
    for &t in &sorted {
        let flagged = negatives.iter().filter(|&&v| v < t).count() as f64;
        if flagged / n <= budget {
            best = t;
        } else {
            break;
        }
    }
    Ok(best)
}

/// Ground truth and calibrated threshold for one identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionProfile {
    pub identity: String,
    pub ground_truth: Watermark,
    pub threshold: f64,
    pub fpr_budget: f64,
    /// Negatives the threshold was calibrated on.
    pub calibration_count: usize,
    /// FPR at `threshold` on the calibration negatives.
    pub calibration_fpr: f64,
    /// Hash of the training config of the checkpoint it was calibrated for.
    pub config_hash: String,
}

impl DetectionProfile {
    pub fn calibrate(
        identity: impl Into<String>,
        ground_truth: Watermark,
        negatives: &[f64],
        budget: f64,
        config_hash: impl Into<String>,
    ) -> Result<Self> {
        let threshold = calibrate_threshold(negatives, budget)?;
        let calibration_fpr = false_positive_rate(negatives, threshold);
        Ok(Self {
            identity: identity.into(),
            ground_truth,
            threshold,
            fpr_budget: budget,
            calibration_count: negatives.len(),
            calibration_fpr,
            config_hash: config_hash.into(),
        })
    }

    /// Errors unless the profile was calibrated for a checkpoint with `hash`.
    pub fn check_hash(&self, hash: &str) -> Result<()> {
        if self.config_hash != hash {
            return Err(Error::ConfigMismatch {
                expected: self.config_hash.clone(),
                found: hash.to_string(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let p: Self = serde_json::from_str(&text)?;
        if !(0.0..=1.0).contains(&p.threshold) {
            return Err(Error::Calibration(format!("threshold {} outside [0, 1]", p.threshold)));
        }
        Ok(p)
    }
}

/// Fraction of `negatives` flagged fake at `threshold`.
pub fn false_positive_rate(negatives: &[f64], threshold: f64) -> f64 {
    if negatives.is_empty() {
        return 0.0;
    }
    negatives.iter().filter(|&&v| v < threshold).count() as f64 / negatives.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub verdict: Verdict,
    pub bitacc: f64,
    pub extracted: Watermark,
}

pub fn detect(image: &Image, profile: &DetectionProfile, models: &ModelBundle<f32>) -> Result<Detection> {
    let extracted = models.extract(image)?.harden()?;
    let bitacc = bitwise_accuracy(&extracted, &profile.ground_truth)?;
    Ok(Detection {
        verdict: verdict_for(bitacc, profile.threshold),
        bitacc,
        extracted,
    })
}

/// Detection quality with fakes as the positive class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Accuracy on a class-balanced subsample; absent unless both classes occur.
    pub acc: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub negatives: usize,
    pub positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Items per class in the balanced subsample.
    pub balanced_per_class: usize,
}

impl MetricsReport {
    pub fn acc(&self) -> Result<f64> {
        self.acc
            .ok_or_else(|| Error::Metrics("accuracy needs both real and fake examples".into()))
    }
}

/// `labels[i]` is the true class of `verdicts[i]`. The majority class is
/// subsampled (without replacement) to the minority size before ACC.
pub fn compute_metrics<R: Rng + ?Sized>(
    verdicts: &[Verdict],
    labels: &[Verdict],
    rng: &mut R,
) -> Result<MetricsReport> {
    if verdicts.len() != labels.len() {
        return Err(Error::Shape(format!("{} verdicts for {} labels", verdicts.len(), labels.len())));
    }
    let correct: Vec<bool> = verdicts.iter().zip(labels).map(|(v, l)| v == l).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Verdict::Real).collect();
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Verdict::Fake).collect();
    let false_positives = neg.iter().filter(|&&i| !correct[i]).count();
    let false_negatives = pos.iter().filter(|&&i| !correct[i]).count();
    let rate = |errs: usize, n: usize| (n > 0).then(|| errs as f64 / n as f64);

    let m = neg.len().min(pos.len());
    let acc = (m > 0).then(|| {
        let (minor, major) = if neg.len() <= pos.len() { (&neg, &pos) } else { (&pos, &neg) };
        let picked = sample(rng, major.len(), m);
        let hits = minor.iter().filter(|&&i| correct[i]).count()
            + picked.iter().filter(|&k| correct[major[k]]).count();
        hits as f64 / (2 * m) as f64
    });
    Ok(MetricsReport {
        acc,
        fpr: rate(false_positives, neg.len()),
        fnr: rate(false_negatives, pos.len()),
        negatives: neg.len(),
        positives: pos.len(),
        false_positives,
        false_negatives,
        balanced_per_class: m,
    })
}

/// Verdicts for bit accuracies of known-real and known-fake items.
pub fn metrics_from_bitaccs<R: Rng + ?Sized>(
    real: &[f64],
    fake: &[f64],
    threshold: f64,
    rng: &mut R,
) -> Result<MetricsReport> {
    let verdicts: Vec<Verdict> = real.iter().chain(fake).map(|&b| verdict_for(b, threshold)).collect();
    let labels: Vec<Verdict> = std::iter::repeat(Verdict::Real)
        .take(real.len())
        .chain(std::iter::repeat(Verdict::Fake).take(fake.len()))
        .collect();
    compute_metrics(&verdicts, &labels, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn wm(s: &str) -> Watermark {
        s.parse().unwrap()
    }

    /// Scans every candidate and keeps the largest admissible one.
    fn oracle_threshold(neg: &[f64], budget: f64) -> f64 {
        let mut candidates: Vec<f64> = neg.to_vec();
        candidates.push(1.0);
        candidates
            .into_iter()
            .filter(|&t| neg.iter().filter(|&&v| v < t).count() as f64 / neg.len() as f64 <= budget)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn bit_accuracy_examples() {
        let a = wm(&"10".repeat(15));
        assert_eq!(bitwise_accuracy(&a, &a).unwrap(), 1.0);
        assert_eq!(bitwise_accuracy(&a, &a.complement()).unwrap(), 0.0);
        assert_eq!(bitwise_accuracy(&wm("1011"), &wm("1110")).unwrap(), 0.5);
        assert!(matches!(bitwise_accuracy(&wm("101"), &wm("1011")), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn bit_accuracy_is_symmetric_hamming(a in prop::collection::vec(0u8..2, 30), b in prop::collection::vec(0u8..2, 30)) {
            let (wa, wb) = (Watermark::new(a.clone()).unwrap(), Watermark::new(b.clone()).unwrap());
            let ham = a.iter().zip(&b).filter(|(x, y)| x != y).count() as f64 / 30.0;
            prop_assert_eq!(bitwise_accuracy(&wa, &wb).unwrap(), bitwise_accuracy(&wb, &wa).unwrap());
            prop_assert!((bitwise_accuracy(&wa, &wb).unwrap() - (1.0 - ham)).abs() < 1e-15);
        }

        #[test]
        fn calibration_matches_exhaustive_scan_and_budget(
            raw in prop::collection::vec(0u32..=30, 1..300),
            budget in prop::sample::select(vec![0.0, 0.01, 0.02, 0.05, 0.2]),
        ) {
            let neg: Vec<f64> = raw.iter().map(|&k| k as f64 / 30.0).collect();
            let t = calibrate_threshold(&neg, budget).unwrap();
            prop_assert_eq!(t, oracle_threshold(&neg, budget));
            prop_assert!(false_positive_rate(&neg, t) <= budget);
        }

        #[test]
        fn raising_threshold_never_lowers_fpr_or_raises_fnr(
            real in prop::collection::vec(0.0f64..=1.0, 1..50),
            fake in prop::collection::vec(0.0f64..=1.0, 1..50),
            t1 in 0.0f64..=1.0,
            t2 in 0.0f64..=1.0,
        ) {
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let a = metrics_from_bitaccs(&real, &fake, lo, &mut rng).unwrap();
            let b = metrics_from_bitaccs(&real, &fake, hi, &mut rng).unwrap();
            prop_assert!(b.fpr.unwrap() >= a.fpr.unwrap());
            prop_assert!(b.fnr.unwrap() <= a.fnr.unwrap());
        }
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(calibrate_threshold(&[0.9, 0.95, 1.0], 0.01).unwrap(), 0.9);
        assert_eq!(calibrate_threshold(&[1.0; 200], 0.01).unwrap(), 1.0);
        let mut v = vec![1.0; 198];
        v.extend([0.8, 0.8]);
        assert_eq!(calibrate_threshold(&v, 0.01).unwrap(), 1.0);
        v.push(0.7);
        assert_eq!(calibrate_threshold(&v, 0.01).unwrap(), 0.8);
        for case in [&[0.9, 0.95, 1.0][..], &v] {
            assert_eq!(calibrate_threshold(case, 0.01).unwrap(), oracle_threshold(case, 0.01));
        }
        assert!(matches!(calibrate_threshold(&[], 0.01), Err(Error::Calibration(_))));
        assert!(matches!(calibrate_threshold(&[1.2], 0.01), Err(Error::Calibration(_))));
        assert!(matches!(calibrate_threshold(&[f64::NAN], 0.01), Err(Error::Calibration(_))));
    }

    #[test]
    fn verdict_boundary_is_strict() {
        assert_eq!(verdict_for(0.9, 0.9), Verdict::Real);
        assert_eq!(verdict_for(0.0, 0.1), Verdict::Fake);
        assert_eq!(verdict_for(0.0, 0.0), Verdict::Real);
    }

    #[test]
    fn metrics_examples() {
        use Verdict::*;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = [Real, Real, Fake, Fake];
        let perfect = compute_metrics(&labels, &labels, &mut rng).unwrap();
        assert_eq!((perfect.acc, perfect.fpr, perfect.fnr), (Some(1.0), Some(0.0), Some(0.0)));
        let lenient = compute_metrics(&[Real; 4], &labels, &mut rng).unwrap();
        assert_eq!((lenient.acc, lenient.fpr, lenient.fnr), (Some(0.5), Some(0.0), Some(1.0)));

        let mut verdicts = vec![Real; 98];
        verdicts.extend([Fake; 102]);
        let mut truth = vec![Real; 100];
        truth.extend([Fake; 100]);
        let r = compute_metrics(&verdicts, &truth, &mut rng).unwrap();
        assert_eq!((r.fpr, r.fnr, r.acc), (Some(0.02), Some(0.0), Some(0.99)));
        assert_eq!((r.false_positives, r.false_negatives), (2, 0));
    }

    #[test]
    fn single_class_has_no_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = compute_metrics(&[Verdict::Real, Verdict::Fake], &[Verdict::Real; 2], &mut rng).unwrap();
        assert_eq!(r.fpr, Some(0.5));
        assert_eq!(r.fnr, None);
        assert!(matches!(r.acc(), Err(Error::Metrics(_))));
        assert!(compute_metrics(&[Verdict::Real], &[], &mut rng).is_err());
    }

    #[test]
    fn balanced_accuracy_subsamples_the_majority() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // 10 fakes all caught, 1000 reals of which half are false alarms
        let real: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 0.5 } else { 1.0 }).collect();
        let r = metrics_from_bitaccs(&real, &[0.1; 10], 0.9, &mut rng).unwrap();
        assert_eq!(r.balanced_per_class, 10);
        assert_eq!(r.fpr, Some(0.5));
        let acc = r.acc.unwrap();
        assert!(acc > 0.55 && acc < 0.95, "{acc}");
        let again = metrics_from_bitaccs(&real, &[0.1; 10], 0.9, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(again.acc, r.acc);
    }

    #[test]
    fn profile_round_trip_and_hash_check() {
        let p = DetectionProfile::calibrate("alice", wm(&"1".repeat(30)), &[0.9, 1.0], 0.01, "abc").unwrap();
        assert_eq!(p.threshold, 0.9);
        assert_eq!(p.calibration_fpr, 0.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        p.save(&path).unwrap();
        let back = DetectionProfile::load(&path).unwrap();
        assert_eq!(back, p);
        assert!(back.check_hash("abc").is_ok());
        assert!(matches!(back.check_hash("xyz"), Err(Error::ConfigMismatch { .. })));
    }
}
