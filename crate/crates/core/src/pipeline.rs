//! End-to-end inference over a dataset: forward, predicted class, gradient,
//! short-circuit, post-modification logits, score, verdict.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::approx_from_trace;
use crate::error::{GscError, Result};
use crate::head::HeadModel;
use crate::io::Dataset;
use crate::metrics::{auroc, fpr_at_tpr, ScoredSet};
use crate::scoring::{
    calibrate, decide, estimate_fisher_diag, score, Label, ScoreKind, Threshold, Verdict,
    DEFAULT_FISHER_FLOOR, DEFAULT_TARGET_TPR,
};
use crate::shortcircuit::{
    run_plan_from, MaskBudget, ModificationRule, SelectionKind, SelectionStrategy,
    ShortCircuitPlan, DEFAULT_MASK_RATIO,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    TopGrad,
    TopGradTimesFeature,
    FisherWeighted,
    Random,
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleName {
    Zero,
    Scale,
    SignPerturb,
    OrthProject,
    Clip,
}

macro_rules! named {
    ($ty:ident { $($variant:ident => $name:literal),* $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($ty::$variant => $name),* }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = GscError;

            fn from_str(s: &str) -> Result<Self> {
                match s.replace('-', "_").as_str() {
                    $($name => Ok($ty::$variant),)*
                    other => Err(GscError::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), other
                    ))),
                }
            }
        }
    };
}

named!(StrategyName {
    TopGrad => "top_grad",
    TopGradTimesFeature => "top_grad_times_feature",
    FisherWeighted => "fisher_weighted",
    Random => "random",
    Reverse => "reverse",
});

named!(RuleName {
    Zero => "zero",
    Scale => "scale",
    SignPerturb => "sign_perturb",
    OrthProject => "orth_project",
    Clip => "clip",
});

/// Plan parameters as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSpec {
    pub ratio: f64,
    /// Explicit coordinate count; overrides `ratio`.
    pub k: Option<usize>,
    pub strategy: StrategyName,
    pub rule: RuleName,
    pub beta: Option<f64>,
    pub alpha: Option<f64>,
    pub clip_bound: Option<f64>,
    pub rounds: usize,
}

impl Default for PlanSpec {
    fn default() -> Self {
        PlanSpec {
            ratio: DEFAULT_MASK_RATIO,
            k: None,
            strategy: StrategyName::TopGrad,
            rule: RuleName::Zero,
            beta: None,
            alpha: None,
            clip_bound: None,
            rounds: 1,
        }
    }
}

impl PlanSpec {
    pub fn budget(&self) -> MaskBudget {
        match self.k {
            Some(k) => MaskBudget::Count(k),
            None => MaskBudget::Ratio(self.ratio),
        }
    }

    pub fn rule(&self) -> Result<ModificationRule> {
        let unexpected = |field: &str| {
            Err(GscError::Config(format!(
                "{field} is not a parameter of rule {}",
                self.rule
            )))
        };
        let rule = match self.rule {
            RuleName::Zero => ModificationRule::Zero,
            RuleName::Scale => ModificationRule::Scale {
                beta: self
                    .beta
                    .ok_or_else(|| GscError::Config("rule scale needs beta".into()))?,
            },
            RuleName::SignPerturb => ModificationRule::SignPerturb { alpha: self.alpha },
            RuleName::OrthProject => ModificationRule::OrthProject,
            RuleName::Clip => ModificationRule::Clip {
                bound: self
                    .clip_bound
                    .ok_or_else(|| GscError::Config("rule clip needs clip_bound".into()))?,
            },
        };
        if self.beta.is_some() && self.rule != RuleName::Scale {
            return unexpected("beta");
        }
        if self.alpha.is_some() && self.rule != RuleName::SignPerturb {
            return unexpected("alpha");
        }
        if self.clip_bound.is_some() && self.rule != RuleName::Clip {
            return unexpected("clip_bound");
        }
        Ok(rule)
    }

    /// Concrete plan. `fisher` is needed only by the fisher-weighted strategy.
    pub fn build(&self, seed: u64, fisher: Option<&crate::scoring::FisherDiagonal>) -> Result<ShortCircuitPlan> {
        let kind = match self.strategy {
            StrategyName::TopGrad => SelectionKind::TopGrad,
            StrategyName::TopGradTimesFeature => SelectionKind::TopGradTimesFeature,
            StrategyName::Random => SelectionKind::Random { seed },
            StrategyName::Reverse => SelectionKind::Reverse,
            StrategyName::FisherWeighted => SelectionKind::FisherWeighted {
                fisher_diag: fisher
                    .ok_or_else(|| GscError::Config("fisher_weighted needs a Fisher diagonal".into()))?
                    .lambda
                    .clone(),
            },
        };
        Ok(ShortCircuitPlan::new(
            SelectionStrategy::new(kind, self.budget()),
            self.rule()?,
            self.rounds,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproxMode {
    /// `y′ = y + J·ΔF`.
    #[default]
    FirstOrder,
    /// `y′ = forward(F′)`.
    Exact,
    /// Score with the first-order logits, record the gap to the exact ones.
    Both,
}

impl FromStr for ApproxMode {
    type Err = GscError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "first_order" => Ok(ApproxMode::FirstOrder),
            "exact" => Ok(ApproxMode::Exact),
            "both" => Ok(ApproxMode::Both),
            other => Err(GscError::Config(format!("unknown approx mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plan: PlanSpec,
    pub score: ScoreKind,
    pub target_tpr: f64,
    pub approx_mode: ApproxMode,
    pub seed: u64,
    /// Threshold the short-circuited scores with `τ` from raw calibration
    /// scores instead of short-circuited ones.
    pub calibrate_on_raw: bool,
    pub fisher_floor: f64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            plan: PlanSpec::default(),
            score: ScoreKind::Energy,
            target_tpr: DEFAULT_TARGET_TPR,
            approx_mode: ApproxMode::FirstOrder,
            seed: 0,
            calibrate_on_raw: false,
            fisher_floor: DEFAULT_FISHER_FLOOR,
            output_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: usize,
    pub set: String,
    pub label: Label,
    pub raw_score: Option<f64>,
    pub gsc_score: Option<f64>,
    pub verdict: Option<Verdict>,
    pub flops: Option<u64>,
    /// `|score(exact) − score(first order)|`, only in `both` mode.
    pub gap: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n_id: usize,
    pub n_ood: usize,
    pub n_calibration: usize,
    pub n_errors: usize,
    pub fpr95_raw: f64,
    pub fpr95_gsc: f64,
    pub auroc_raw: f64,
    pub auroc_gsc: f64,
    pub mean_gap: Option<f64>,
    /// Share of ID rows accepted at the calibrated threshold.
    pub id_accept_rate: f64,
    /// Share of OOD rows accepted at the calibrated threshold.
    pub ood_accept_rate: f64,
    pub threshold_raw: Threshold,
    pub threshold_gsc: Threshold,
}

impl Aggregates {
    /// Metrics from report rows. Verdicts are not trusted; they are
    /// recomputed from the thresholds.
    pub fn from_rows(rows: &[ReportRow], target_tpr: f64, calibrate_on_raw: bool) -> Result<Self> {
        let ok = |label: Label| rows.iter().filter(move |r| r.label == label && r.error.is_none());
        let pick = |label: Label, f: fn(&ReportRow) -> Option<f64>| -> Vec<f64> {
            ok(label).filter_map(f).collect()
        };
        let raw = |r: &ReportRow| r.raw_score;
        let gsc = |r: &ReportRow| r.gsc_score;

        let calib_raw = pick(Label::Calibration, raw);
        if calib_raw.is_empty() {
            return Err(GscError::Config("dataset has no calibration set".into()));
        }
        let threshold_raw = calibrate(&calib_raw, target_tpr)?;
        let threshold_gsc = if calibrate_on_raw {
            threshold_raw
        } else {
            calibrate(&pick(Label::Calibration, gsc), target_tpr)?
        };

        let raw_set = ScoredSet::new(pick(Label::Id, raw), pick(Label::Ood, raw))?;
        let gsc_set = ScoredSet::new(pick(Label::Id, gsc), pick(Label::Ood, gsc))?;
        let gaps: Vec<f64> = rows.iter().filter_map(|r| r.gap).collect();
        Ok(Aggregates {
            n_id: raw_set.id_scores.len(),
            n_ood: raw_set.ood_scores.len(),
            n_calibration: calib_raw.len(),
            n_errors: rows.iter().filter(|r| r.error.is_some()).count(),
            fpr95_raw: fpr_at_tpr(&raw_set, target_tpr)?,
            fpr95_gsc: fpr_at_tpr(&gsc_set, target_tpr)?,
            auroc_raw: auroc(&raw_set)?,
            auroc_gsc: auroc(&gsc_set)?,
            mean_gap: (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64),
            id_accept_rate: threshold_gsc.acceptance_rate(&gsc_set.id_scores),
            ood_accept_rate: threshold_gsc.acceptance_rate(&gsc_set.ood_scores),
            threshold_raw,
            threshold_gsc,
        })
    }

    /// Largest absolute difference over the numeric fields.
    pub fn max_abs_diff(&self, other: &Aggregates) -> f64 {
        let pairs = [
            (self.fpr95_raw, other.fpr95_raw),
            (self.fpr95_gsc, other.fpr95_gsc),
            (self.auroc_raw, other.auroc_raw),
            (self.auroc_gsc, other.auroc_gsc),
            (self.mean_gap.unwrap_or(0.0), other.mean_gap.unwrap_or(0.0)),
            (self.id_accept_rate, other.id_accept_rate),
            (self.ood_accept_rate, other.ood_accept_rate),
            (self.threshold_raw.tau, other.threshold_raw.tau),
            (self.threshold_gsc.tau, other.threshold_gsc.tau),
        ];
        let counts_differ = (self.n_id, self.n_ood, self.n_calibration, self.n_errors)
            != (other.n_id, other.n_ood, other.n_calibration, other.n_errors)
            || self.mean_gap.is_some() != other.mean_gap.is_some();
        if counts_differ {
            return f64::INFINITY;
        }
        pairs.iter().fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Summary written next to the per-sample CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config: RunConfig,
    pub aggregates: Aggregates,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub summary: EvalSummary,
}

impl EvalReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        s.push('\n');
        s
    }

    /// Parses a CSV/JSON pair and checks the stored aggregates against the
    /// rows to `1e-9`.
    pub fn read(csv_text: &str, summary_json: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
        let rows = reader.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?;
        let summary: EvalSummary = serde_json::from_str(summary_json)?;
        let report = EvalReport { rows, summary };
        report.check_consistency()?;
        Ok(report)
    }

    pub fn check_consistency(&self) -> Result<()> {
        let cfg = &self.summary.config;
        let again = Aggregates::from_rows(&self.rows, cfg.target_tpr, cfg.calibrate_on_raw)?;
        let diff = again.max_abs_diff(&self.summary.aggregates);
        if diff > 1e-9 {
            return Err(GscError::Config(format!(
                "stored aggregates differ from the rows by {diff}"
            )));
        }
        Ok(())
    }
}

struct SampleOut {
    raw: f64,
    gsc: f64,
    flops: u64,
    gap: Option<f64>,
}

fn run_sample(
    head: &HeadModel,
    plan: &ShortCircuitPlan,
    cfg: &RunConfig,
    f: &[f64],
) -> Result<SampleOut> {
    let (trace, bundle) = head.analyze(f)?;
    let raw = score(cfg.score, &bundle.y)?;
    let outcome = run_plan_from(plan, head, f, bundle.class, &bundle.g)?;
    let mut flops = bundle.flops_forward + bundle.flops_backward + outcome.flops;
    let (gsc, gap) = match cfg.approx_mode {
        ApproxMode::FirstOrder => {
            let (y, extra) = approx_from_trace(head, &trace, &bundle.y, &outcome.delta_total)?;
            flops += extra;
            (score(cfg.score, &y)?, None)
        }
        ApproxMode::Exact => {
            let exact = head.forward_trace(&outcome.f_prime)?;
            flops += exact.flops;
            (score(cfg.score, &exact.logits)?, None)
        }
        ApproxMode::Both => {
            let (y, extra) = approx_from_trace(head, &trace, &bundle.y, &outcome.delta_total)?;
            flops += extra;
            let approx = score(cfg.score, &y)?;
            let exact = score(cfg.score, &head.forward(&outcome.f_prime)?)?;
            (approx, Some((exact - approx).abs()))
        }
    };
    Ok(SampleOut {
        raw,
        gsc,
        flops,
        gap,
    })
}

/// The concrete plan `cfg` describes for `data`, validated against its
/// feature dimension. The Fisher diagonal comes from the calibration set.
pub fn plan_for(data: &Dataset, cfg: &RunConfig) -> Result<ShortCircuitPlan> {
    let fisher = match cfg.plan.strategy {
        StrategyName::FisherWeighted => {
            let calib = data.features_with(Label::Calibration);
            Some(estimate_fisher_diag(&data.head, &calib, cfg.fisher_floor)?)
        }
        _ => None,
    };
    let plan = cfg.plan.build(cfg.seed, fisher.as_ref())?;
    plan.validate(data.head.input_dim())?;
    Ok(plan)
}

/// Runs every feature set of `data`. Sample failures become rows with an
/// error message; the run itself fails only when no thresholds or metrics
/// can be formed.
pub fn run_pipeline(data: &Dataset, cfg: &RunConfig) -> Result<EvalReport> {
    let head = &data.head;
    let plan = plan_for(data, cfg)?;

    let jobs: Vec<(&str, Label, &[f64])> = data
        .feature_sets
        .iter()
        .flat_map(|s| s.features.iter().map(move |f| (s.name.as_str(), s.label, f.as_slice())))
        .collect();
    let outs: Vec<Result<SampleOut>> = crate::parallel::install(|| {
        jobs.par_iter()
            .map(|(_, _, f)| run_sample(head, &plan, cfg, f))
            .collect()
    });

    let mut rows: Vec<ReportRow> = jobs
        .iter()
        .zip(outs)
        .enumerate()
        .map(|(id, ((set, label, _), out))| match out {
            Ok(o) => ReportRow {
                id,
                set: set.to_string(),
                label: *label,
                raw_score: Some(o.raw),
                gsc_score: Some(o.gsc),
                verdict: None,
                flops: Some(o.flops),
                gap: o.gap,
                error: None,
            },
            Err(e) => ReportRow {
                id,
                set: set.to_string(),
                label: *label,
                raw_score: None,
                gsc_score: None,
                verdict: None,
                flops: None,
                gap: None,
                error: Some(e.to_string()),
            },
        })
        .collect();

    let aggregates = Aggregates::from_rows(&rows, cfg.target_tpr, cfg.calibrate_on_raw)?;
    for row in &mut rows {
        row.verdict = row.gsc_score.map(|s| decide(s, &aggregates.threshold_gsc));
    }
    Ok(EvalReport {
        rows,
        summary: EvalSummary {
            config: cfg.clone(),
            aggregates,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn data() -> Dataset {
        generate(&SynthConfig {
            n_id: 80,
            n_ood: 80,
            n_calibration: 60,
            seed: 11,
            ..SynthConfig::default()
        })
        .unwrap()
        .to_dataset()
    }

    #[test]
    fn plan_spec_parameters() {
        let spec = PlanSpec { rule: RuleName::Scale, ..PlanSpec::default() };
        assert!(spec.rule().is_err());
        let spec = PlanSpec { rule: RuleName::Scale, beta: Some(0.5), ..PlanSpec::default() };
        assert_eq!(spec.rule().unwrap(), ModificationRule::Scale { beta: 0.5 });
        let spec = PlanSpec { beta: Some(0.5), ..PlanSpec::default() };
        assert!(spec.rule().is_err());
        let spec = PlanSpec { strategy: StrategyName::FisherWeighted, ..PlanSpec::default() };
        assert!(spec.build(0, None).is_err());
        assert_eq!("sign-perturb".parse::<RuleName>().unwrap(), RuleName::SignPerturb);
        assert_eq!("top_grad".parse::<StrategyName>().unwrap(), StrategyName::TopGrad);
        assert!("best".parse::<StrategyName>().is_err());
    }

    #[test]
    fn config_json_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"plan": {"ratio": 0.1}, "score": "msp"}"#).unwrap();
        assert_eq!(cfg.plan.ratio, 0.1);
        assert_eq!(cfg.score, ScoreKind::Msp);
        assert_eq!(cfg.target_tpr, 0.95);
        assert!(serde_json::from_str::<RunConfig>(r#"{"ratios": 1}"#).is_err());
    }

    #[test]
    fn empty_mask_leaves_scores_unchanged() {
        let cfg = RunConfig {
            plan: PlanSpec { ratio: 0.0, ..PlanSpec::default() },
            ..RunConfig::default()
        };
        let report = run_pipeline(&data(), &cfg).unwrap();
        assert!(report.rows.iter().all(|r| r.raw_score == r.gsc_score));
        let a = &report.summary.aggregates;
        assert_eq!(a.auroc_raw, a.auroc_gsc);
    }

    #[test]
    fn both_mode_on_affine_head_has_zero_gap() {
        let cfg = RunConfig { approx_mode: ApproxMode::Both, ..RunConfig::default() };
        let report = run_pipeline(&data(), &cfg).unwrap();
        assert!(report.rows.iter().all(|r| r.gap.unwrap() <= 1e-12));
        assert!(report.summary.aggregates.mean_gap.unwrap() <= 1e-12);
    }

    #[test]
    fn default_run_improves_auroc_and_is_consistent() {
        let report = run_pipeline(&data(), &RunConfig::default()).unwrap();
        let a = &report.summary.aggregates;
        assert!(a.auroc_gsc > a.auroc_raw, "{a:?}");
        assert_eq!((a.n_id, a.n_ood, a.n_calibration, a.n_errors), (80, 80, 60, 0));
        report.check_consistency().unwrap();

        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with("id,set,label,raw_score,gsc_score,verdict,flops,gap,error\n"));
        let back = EvalReport::read(&csv, &report.summary_json()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn tampered_summary_is_rejected() {
        let report = run_pipeline(&data(), &RunConfig::default()).unwrap();
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let mut summary = report.summary.clone();
        summary.aggregates.auroc_gsc += 1e-6;
        let json = serde_json::to_string(&summary).unwrap();
        assert!(EvalReport::read(&String::from_utf8(csv).unwrap(), &json).is_err());
    }

    #[test]
    fn sample_errors_are_isolated() {
        let mut ds = data();
        // A head whose input width disagrees with one feature vector.
        ds.feature_sets[1].features[3] = crate::numcore::Vector::new(vec![1.0; 5]).unwrap();
        let report = run_pipeline(&ds, &RunConfig::default()).unwrap();
        let bad: Vec<_> = report.rows.iter().filter(|r| r.error.is_some()).collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(report.summary.aggregates.n_errors, 1);
        assert!(bad[0].verdict.is_none());
    }

    #[test]
    fn every_strategy_and_rule_runs() {
        let ds = data();
        for strategy in ["top_grad", "top_grad_times_feature", "fisher_weighted", "random", "reverse"] {
            let cfg = RunConfig {
                plan: PlanSpec { strategy: strategy.parse().unwrap(), ..PlanSpec::default() },
                ..RunConfig::default()
            };
            run_pipeline(&ds, &cfg).unwrap();
        }
        for (rule, beta, clip) in [("scale", Some(0.5), None), ("clip", None, Some(0.1)), ("orth_project", None, None), ("sign_perturb", None, None)] {
            let cfg = RunConfig {
                plan: PlanSpec { rule: rule.parse().unwrap(), beta, clip_bound: clip, rounds: 2, ..PlanSpec::default() },
                ..RunConfig::default()
            };
            run_pipeline(&ds, &cfg).unwrap();
        }
    }
}
