//! Post-modification logits by first-order expansion, by exact recompute, and
//! the gap between the two.
//!
//! The expansion `y′ ≈ y + J(F)·ΔF` is evaluated with one forward-mode sweep
//! instead of materialising the `K × d` Jacobian. Its error is bounded by
//! `½·L·‖ΔF‖²` where `L` is a Lipschitz constant of the Jacobian on a ball
//! containing `F` and `F′`; [`estimate_smoothness`] gives an empirical `L̂`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_len, GscError, Result};
use crate::head::{Activation, ForwardTrace, HeadModel};
use crate::metrics::mean_std;
use crate::numcore::{add, norm2, norm_inf, sub, Matrix, Vector};
use crate::scoring::{score, Label, ScoreKind};
use crate::shortcircuit::{run_plan_from, ShortCircuitPlan};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApproxResult {
    pub y_approx: Vector,
    pub y_exact: Option<Vector>,
    pub delta_norm2: f64,
    /// `½·L̂·‖ΔF‖²`, absent when no `L̂` is available.
    pub remainder_bound: Option<f64>,
    pub flops_approx: u64,
    pub flops_exact: Option<u64>,
}

impl ApproxResult {
    /// `‖y′_exact − y′_approx‖∞` when the exact logits were computed.
    pub fn gap_inf(&self) -> Option<f64> {
        self.y_exact
            .as_ref()
            .map(|e| norm_inf(&sub(e, &self.y_approx)))
    }
}

/// `y + J(F)·delta`. `y` must be `forward(F)`.
pub fn approx_logits(head: &HeadModel, features: &[f64], y: &[f64], delta: &[f64]) -> Result<Vector> {
    let trace = head.forward_trace(features)?;
    Ok(approx_from_trace(head, &trace, y, delta)?.0)
}

/// [`approx_logits`] reusing a forward trace at `F`; also returns the FLOPs of
/// the forward-mode sweep.
pub fn approx_from_trace(
    head: &HeadModel,
    trace: &ForwardTrace,
    y: &[f64],
    delta: &[f64],
) -> Result<(Vector, u64)> {
    check_len("approx logits", head.output_dim(), y.len())?;
    check_len("approx delta", head.input_dim(), delta.len())?;
    let (jv, flops) = trace.jvp(head, delta)?;
    Ok((Vector::checked(add(y, &jv))?, flops))
}

/// The second forward pass that the expansion replaces.
pub fn exact_logits(head: &HeadModel, f_prime: &[f64]) -> Result<Vector> {
    head.forward(f_prime)
}

/// Both paths for one displacement. `l_hat` turns into a remainder bound.
pub fn compare(
    head: &HeadModel,
    trace: &ForwardTrace,
    delta: &[f64],
    f_prime: &[f64],
    l_hat: Option<f64>,
) -> Result<ApproxResult> {
    let (y_approx, flops_approx) = approx_from_trace(head, trace, &trace.logits, delta)?;
    let exact = head.forward_trace(f_prime)?;
    let delta_norm2 = norm2(delta);
    Ok(ApproxResult {
        y_approx,
        y_exact: Some(exact.logits),
        delta_norm2,
        remainder_bound: l_hat.map(|l| 0.5 * l * delta_norm2 * delta_norm2),
        flops_approx,
        flops_exact: Some(exact.flops),
    })
}

pub const DIRECTION_POLICY: &str =
    "anchor points plus uniform samples in the ball (gaussian direction, radius r·U^(1/d))";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothnessEstimate {
    /// `None` for heads with relu units, whose Jacobian jumps.
    pub l_hat: Option<f64>,
    pub probe_count: usize,
    pub direction_policy: String,
}

/// `L̂ = max ‖J(u) − J(v)‖_F / ‖u − v‖₂` over `F` and `probes` points drawn
/// uniformly from the ball of `radius` around it.
pub fn estimate_smoothness(
    head: &HeadModel,
    features: &[f64],
    radius: f64,
    probes: usize,
    seed: u64,
) -> Result<SmoothnessEstimate> {
    estimate_smoothness_anchored(head, &[features], features, radius, probes, seed)
}

/// Like [`estimate_smoothness`] but with extra anchor points (such as `F′`)
/// always included in the probe set.
pub fn estimate_smoothness_anchored(
    head: &HeadModel,
    anchors: &[&[f64]],
    center: &[f64],
    radius: f64,
    probes: usize,
    seed: u64,
) -> Result<SmoothnessEstimate> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(GscError::Config(format!("radius {radius} must be positive")));
    }
    if probes == 0 {
        return Err(GscError::Config("need at least one probe".into()));
    }
    let d = head.input_dim();
    check_len("smoothness center", d, center.len())?;
    for a in anchors {
        check_len("smoothness anchor", d, a.len())?;
    }
    let policy = DIRECTION_POLICY.to_string();
    if head.has_activation(Activation::Relu) {
        return Ok(SmoothnessEstimate {
            l_hat: None,
            probe_count: probes,
            direction_policy: policy,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<Vec<f64>> = anchors.iter().map(|a| a.to_vec()).collect();
    for _ in 0..probes {
        points.push(ball_point(&mut rng, center, radius));
    }
    let jacobians = points
        .iter()
        .map(|p| head.jacobian(p))
        .collect::<Result<Vec<Matrix>>>()?;

    let mut l_hat = 0.0f64;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let dist = norm2(&sub(&points[i], &points[j]));
            if dist == 0.0 {
                continue;
            }
            let diff = norm2(&sub(jacobians[i].data(), jacobians[j].data()));
            l_hat = l_hat.max(diff / dist);
        }
    }
    Ok(SmoothnessEstimate {
        l_hat: Some(l_hat),
        probe_count: probes,
        direction_policy: policy,
    })
}

fn ball_point(rng: &mut ChaCha8Rng, center: &[f64], radius: f64) -> Vec<f64> {
    let d = center.len();
    let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm2(&dir);
    let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
    for v in &mut dir {
        *v *= r / n;
    }
    add(center, &dir)
}

#[derive(Debug, Clone)]
pub struct AuditSample {
    pub features: Vector,
    pub plan: ShortCircuitPlan,
    pub label: Label,
}

#[derive(Debug, Clone, Copy)]
pub struct AuditOptions {
    pub probes: usize,
    pub seed: u64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions { probes: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRow {
    pub sample_id: usize,
    pub label: Label,
    pub score_kind: ScoreKind,
    pub gap_abs: f64,
    pub remainder_bound: Option<f64>,
    pub flops_approx: u64,
    pub flops_exact: u64,
    pub logit_gap_inf: f64,
    pub score_approx: f64,
    pub score_exact: f64,
    pub delta_norm2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditSummary {
    pub score_kind: ScoreKind,
    pub label: Label,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

/// Decisions that differ between the approximate and exact score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlipCount {
    pub total: usize,
    /// Flips among samples whose approximate score is farther than the gap
    /// from the threshold.
    pub beyond_margin: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditTable {
    pub rows: Vec<AuditRow>,
}

impl AuditTable {
    pub fn summary(&self) -> Vec<AuditSummary> {
        let mut out = Vec::new();
        for kind in ScoreKind::ALL {
            for label in [Label::Id, Label::Ood, Label::Calibration] {
                let gaps: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.score_kind == kind && r.label == label)
                    .map(|r| r.gap_abs)
                    .collect();
                if gaps.is_empty() {
                    continue;
                }
                let (mean, std) = mean_std(gaps.iter().copied());
                out.push(AuditSummary {
                    score_kind: kind,
                    label,
                    count: gaps.len(),
                    mean,
                    std,
                    max: gaps.iter().fold(0.0, |m, &g| m.max(g)),
                });
            }
        }
        out
    }

    pub fn decision_flips(&self, kind: ScoreKind, tau: f64) -> FlipCount {
        let mut flips = FlipCount {
            total: 0,
            beyond_margin: 0,
        };
        for r in self.rows.iter().filter(|r| r.score_kind == kind) {
            if (r.score_approx > tau) != (r.score_exact > tau) {
                flips.total += 1;
                if (r.score_approx - tau).abs() > r.gap_abs {
                    flips.beyond_margin += 1;
                }
            }
        }
        flips
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "sample_id",
            "label",
            "score_kind",
            "gap_abs",
            "remainder_bound",
            "flops_approx",
            "flops_exact",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.sample_id.to_string(),
                r.label.to_string(),
                r.score_kind.to_string(),
                r.gap_abs.to_string(),
                r.remainder_bound.map(|b| b.to_string()).unwrap_or_default(),
                r.flops_approx.to_string(),
                r.flops_exact.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs each sample's plan and compares first-order and exact logits under
/// every score in `scores`. `L̂` is estimated per sample on the ball of radius
/// `‖ΔF‖` around `F`, with `F′` among the probes.
pub fn audit_gap(
    head: &HeadModel,
    samples: &[AuditSample],
    scores: &[ScoreKind],
    options: AuditOptions,
) -> Result<AuditTable> {
    if samples.is_empty() {
        return Err(GscError::Empty("audit samples"));
    }
    let per_sample: Vec<Result<Vec<AuditRow>>> = crate::parallel::install(|| {
        samples
            .par_iter()
            .enumerate()
            .map(|(id, s)| audit_one(head, id, s, scores, options))
            .collect()
    });
    let mut rows = Vec::with_capacity(samples.len() * scores.len());
    for r in per_sample {
        rows.extend(r?);
    }
    Ok(AuditTable { rows })
}

fn audit_one(
    head: &HeadModel,
    id: usize,
    sample: &AuditSample,
    scores: &[ScoreKind],
    options: AuditOptions,
) -> Result<Vec<AuditRow>> {
    let f = sample.features.as_slice();
    let (trace, bundle) = head.analyze(f)?;
    let outcome = run_plan_from(&sample.plan, head, f, bundle.class, &bundle.g)?;
    let delta = outcome.delta_total.as_slice();
    let radius = norm2(delta);
    let l_hat = if radius == 0.0 {
        (!head.has_activation(Activation::Relu)).then_some(0.0)
    } else {
        estimate_smoothness_anchored(
            head,
            &[f, outcome.f_prime.as_slice()],
            f,
            radius,
            options.probes,
            options.seed.wrapping_add(id as u64),
        )?
        .l_hat
    };
    let result = compare(head, &trace, delta, &outcome.f_prime, l_hat)?;
    let exact = result.y_exact.as_ref().expect("compare fills exact logits");
    let logit_gap_inf = norm_inf(&sub(exact, &result.y_approx));
    scores
        .iter()
        .map(|&kind| {
            let score_approx = score(kind, &result.y_approx)?;
            let score_exact = score(kind, exact)?;
            Ok(AuditRow {
                sample_id: id,
                label: sample.label,
                score_kind: kind,
                gap_abs: (score_exact - score_approx).abs(),
                remainder_bound: result.remainder_bound,
                flops_approx: result.flops_approx,
                flops_exact: result.flops_exact.unwrap_or_default(),
                logit_gap_inf,
                score_approx,
                score_exact,
                delta_norm2: result.delta_norm2,
            })
        })
        .collect()
}
