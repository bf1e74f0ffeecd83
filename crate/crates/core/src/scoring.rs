//! Scores, thresholds and verdicts.
//!
//! Both scores are oriented so that larger means more in-distribution. A
//! sample is accepted as ID only when its score is strictly above the
//! threshold; a score equal to `τ` is rejected.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, GscError, Result};
use crate::head::HeadModel;
use crate::numcore::{logsumexp, softmax, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    /// `log Σ exp(y_j)`.
    Energy,
    /// `max softmax(y)`.
    Msp,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 2] = [ScoreKind::Energy, ScoreKind::Msp];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Energy => "energy",
            ScoreKind::Msp => "msp",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreKind {
    type Err = GscError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "energy" => Ok(ScoreKind::Energy),
            "msp" => Ok(ScoreKind::Msp),
            other => Err(GscError::Config(format!("unknown score {other:?}"))),
        }
    }
}

pub fn score(kind: ScoreKind, y: &[f64]) -> Result<f64> {
    match kind {
        ScoreKind::Energy => logsumexp(y),
        ScoreKind::Msp => Ok(softmax(y)?.iter().fold(f64::NEG_INFINITY, |m, &p| m.max(p))),
    }
}

/// Population a feature vector was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
    #[serde(rename = "calibration")]
    Calibration,
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::Id => "ID",
            Label::Ood => "OOD",
            Label::Calibration => "calibration",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = GscError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ID" | "id" => Ok(Label::Id),
            "OOD" | "ood" => Ok(Label::Ood),
            "calibration" => Ok(Label::Calibration),
            other => Err(GscError::Config(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Id => "ID",
            Verdict::Ood => "OOD",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const DEFAULT_TARGET_TPR: f64 = 0.95;

/// Smallest calibration set [`calibrate`] accepts.
pub const MIN_CALIBRATION: usize = 20;

/// Calibration record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub tau: f64,
    pub target_tpr: f64,
    pub n: usize,
    /// Calibration scores exactly equal to `tau`. Any tie lowers the achieved
    /// TPR below the target.
    pub tie_count: usize,
    /// Every calibration score was identical.
    pub degenerate: bool,
}

impl Threshold {
    /// Fraction of `scores` accepted as ID.
    pub fn acceptance_rate(&self, scores: &[f64]) -> f64 {
        let passed = scores.iter().filter(|&&s| s > self.tau).count();
        passed as f64 / scores.len() as f64
    }
}

/// Index `m = ⌊(1 − tpr)·N⌋` of the threshold in the ascending order. A
/// small guard absorbs products such as `0.1·10 = 0.9999…`.
pub fn threshold_index(n: usize, target_tpr: f64) -> usize {
    let m = ((1.0 - target_tpr) * n as f64 + 1e-9).floor() as usize;
    m.min(n.saturating_sub(1))
}

/// Threshold at the `m`-th smallest score, with no minimum sample count.
pub fn order_statistic_threshold(scores: &[f64], target_tpr: f64) -> Result<Threshold> {
    if scores.is_empty() {
        return Err(GscError::Empty("calibration"));
    }
    if !(target_tpr > 0.0 && target_tpr < 1.0) {
        return Err(GscError::Config(format!(
            "target TPR {target_tpr} outside (0, 1)"
        )));
    }
    if let Some(position) = scores.iter().position(|s| !s.is_finite()) {
        return Err(GscError::NonFinite { position });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tau = sorted[threshold_index(sorted.len(), target_tpr)];
    Ok(Threshold {
        tau,
        target_tpr,
        n: sorted.len(),
        tie_count: sorted.iter().filter(|&&s| s == tau).count(),
        degenerate: sorted[0] == sorted[sorted.len() - 1],
    })
}

/// Threshold from in-distribution calibration scores.
pub fn calibrate(id_scores: &[f64], target_tpr: f64) -> Result<Threshold> {
    if id_scores.len() < MIN_CALIBRATION {
        return Err(GscError::InsufficientCalibration {
            required: MIN_CALIBRATION,
            actual: id_scores.len(),
        });
    }
    order_statistic_threshold(id_scores, target_tpr)
}

pub fn decide(s: f64, threshold: &Threshold) -> Verdict {
    if s > threshold.tau {
        Verdict::Id
    } else {
        Verdict::Ood
    }
}

pub const DEFAULT_FISHER_FLOOR: f64 = 1e-8;

/// Diagonal Fisher estimate used by the fisher-weighted selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherDiagonal {
    pub lambda: Vector,
    pub sample_count: usize,
    pub epsilon_floor: f64,
}

/// `λ_i = max(mean g_i², ε)`, with `g` the gradient of each sample's own
/// predicted logit.
pub fn estimate_fisher_diag<F: AsRef<[f64]>>(
    head: &HeadModel,
    calibration: &[F],
    epsilon_floor: f64,
) -> Result<FisherDiagonal> {
    if calibration.is_empty() {
        return Err(GscError::Empty("fisher calibration"));
    }
    if !(epsilon_floor > 0.0 && epsilon_floor.is_finite()) {
        return Err(GscError::Config(format!(
            "fisher floor {epsilon_floor} must be positive"
        )));
    }
    let d = head.input_dim();
    let mut acc = vec![0.0; d];
    for f in calibration {
        let f = f.as_ref();
        check_len("fisher sample", d, f.len())?;
        let (_, bundle) = head.analyze(f)?;
        for (a, g) in acc.iter_mut().zip(bundle.g.iter()) {
            *a += g * g;
        }
    }
    let n = calibration.len() as f64;
    let lambda = acc.into_iter().map(|a| (a / n).max(epsilon_floor)).collect();
    Ok(FisherDiagonal {
        lambda: Vector::checked(lambda)?,
        sample_count: calibration.len(),
        epsilon_floor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Matrix;
    use proptest::prelude::*;

    fn one_to(n: usize) -> Vec<f64> {
        (1..=n).map(|v| v as f64).collect()
    }

    #[test]
    fn score_examples() {
        assert!((score(ScoreKind::Energy, &[0.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(score(ScoreKind::Msp, &[0.3; 4]).unwrap(), 0.25);
        let e = score(ScoreKind::Energy, &[1.0, 2.0, 3.0]).unwrap();
        assert!((e - 3.407_605_964_444_380_3).abs() < 1e-14);
    }

    #[test]
    fn decide_boundary_is_ood() {
        let t = order_statistic_threshold(&[1.0, 2.0, 3.0], 0.5).unwrap();
        assert_eq!(decide(t.tau + 1.0, &t), Verdict::Id);
        assert_eq!(decide(t.tau, &t), Verdict::Ood);
        assert_eq!(decide(t.tau - 1.0, &t), Verdict::Ood);
    }

    #[test]
    fn calibrate_examples() {
        let t = calibrate(&one_to(20), 0.95).unwrap();
        assert_eq!(t.tau, 2.0);
        assert_eq!(t.tie_count, 1);
        assert_eq!(t.acceptance_rate(&one_to(20)), 18.0 / 20.0);

        let t = order_statistic_threshold(&[4.0, 2.0, 1.0, 3.0], 0.5).unwrap();
        assert_eq!(t.tau, 3.0);

        let t = calibrate(&[5.0; 25], 0.95).unwrap();
        assert_eq!(t.tau, 5.0);
        assert!(t.degenerate);
        assert_eq!(t.acceptance_rate(&[5.0; 25]), 0.0);
    }

    #[test]
    fn calibrate_rejects_bad_input() {
        assert!(matches!(
            calibrate(&one_to(19), 0.95),
            Err(GscError::InsufficientCalibration { required: 20, actual: 19 })
        ));
        assert!(calibrate(&one_to(20), 1.0).is_err());
        assert!(calibrate(&one_to(20), 0.0).is_err());
        let mut bad = one_to(20);
        bad[3] = f64::NAN;
        assert!(matches!(calibrate(&bad, 0.95), Err(GscError::NonFinite { position: 3 })));
    }

    #[test]
    fn threshold_index_guards_rounding() {
        assert_eq!(threshold_index(10, 0.9), 1);
        assert_eq!(threshold_index(20, 0.95), 1);
        assert_eq!(threshold_index(100, 0.95), 5);
        assert_eq!(threshold_index(3, 0.01), 2);
    }

    #[test]
    fn calibration_record_json() {
        let t = calibrate(&one_to(20), 0.95).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(
            json,
            r#"{"tau":2.0,"target_tpr":0.95,"n":20,"tie_count":1,"degenerate":false}"#
        );
    }

    fn affine_head() -> HeadModel {
        let w = Matrix::from_rows(&[vec![3.0, 0.0, 1.0], vec![0.0, 2.0, -1.0]]).unwrap();
        HeadModel::affine(w, Vector::zeros(2)).unwrap()
    }

    #[test]
    fn fisher_examples() {
        let head = affine_head();
        let fd = estimate_fisher_diag(&head, &[vec![1.0, 0.0, 0.0]], 1e-6).unwrap();
        assert_eq!(fd.lambda.as_slice(), &[9.0, 1e-6, 1.0]);

        let fd = estimate_fisher_diag(&head, &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], 1e-6).unwrap();
        assert_eq!(fd.lambda.as_slice(), &[4.5, 2.0, 1.0]);
        assert_eq!(fd.sample_count, 2);

        let fd = estimate_fisher_diag(&head, &[vec![1.0, 0.0, 0.0]], 100.0).unwrap();
        assert!(fd.lambda.iter().all(|&l| l == 100.0));

        let none: [Vec<f64>; 0] = [];
        assert!(estimate_fisher_diag(&head, &none, 1e-6).is_err());
        assert!(estimate_fisher_diag(&head, &[vec![1.0, 0.0, 0.0]], 0.0).is_err());
    }

    #[test]
    fn names_round_trip() {
        for kind in ScoreKind::ALL {
            assert_eq!(kind.name().parse::<ScoreKind>().unwrap(), kind);
        }
        for label in [Label::Id, Label::Ood, Label::Calibration] {
            assert_eq!(label.name().parse::<Label>().unwrap(), label);
        }
        assert!("odin".parse::<ScoreKind>().is_err());
    }

    proptest! {
        #[test]
        fn energy_shifts_and_msp_does_not(
            y in prop::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
            let e0 = score(ScoreKind::Energy, &y).unwrap();
            let e1 = score(ScoreKind::Energy, &shifted).unwrap();
            prop_assert!((e1 - e0 - c).abs() <= 1e-12 * (1.0 + e0.abs() + c.abs()));
            let m0 = score(ScoreKind::Msp, &y).unwrap();
            let m1 = score(ScoreKind::Msp, &shifted).unwrap();
            prop_assert!((m0 - m1).abs() <= 1e-12);
        }

        #[test]
        fn calibration_hits_target_without_ties(
            mut scores in prop::collection::hash_set(-1_000_000i64..1_000_000, 20..300)
                .prop_map(|s| s.into_iter().map(|v| v as f64).collect::<Vec<_>>()),
            tpr in 0.5f64..0.99,
        ) {
            scores.sort_by(f64::total_cmp);
            let t = calibrate(&scores, tpr).unwrap();
            prop_assert_eq!(t.tie_count, 1);
            let n = scores.len() as f64;
            let accepted = scores.iter().filter(|&&s| decide(s, &t) == Verdict::Id).count() as f64;
            let target = (tpr * n).ceil();
            prop_assert!((accepted - target).abs() <= 1.0, "{accepted} vs {target}");
        }

        #[test]
        fn verdict_is_monotone(
            scores in prop::collection::vec(-10.0f64..10.0, 20..60),
            a in -12.0f64..12.0,
            b in -12.0f64..12.0,
        ) {
            let t = calibrate(&scores, 0.95).unwrap();
            let (hi, lo) = if a > b { (a, b) } else { (b, a) };
            if decide(lo, &t) == Verdict::Id {
                prop_assert_eq!(decide(hi, &t), Verdict::Id);
            }
        }

        #[test]
        fn fisher_ignores_sample_order(
            samples in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..10),
        ) {
            let head = affine_head();
            let a = estimate_fisher_diag(&head, &samples, 1e-9).unwrap();
            let mut rev = samples.clone();
            rev.reverse();
            let b = estimate_fisher_diag(&head, &rev, 1e-9).unwrap();
            for (x, y) in a.lambda.iter().zip(b.lambda.iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }
}
