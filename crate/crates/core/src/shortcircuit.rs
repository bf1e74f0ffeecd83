//! Choosing which feature coordinates to intervene on and rewriting them.
//!
//! A [`ShortCircuitPlan`] combines a [`SelectionStrategy`] (which coordinates),
//! a [`ModificationRule`] (what to do with them) and a number of rounds. With
//! more than one round the budget is split and the predicted class and its
//! gradient are recomputed at the partially modified feature before each
//! round.
//!
//! All rankings break ties by the lower coordinate index, so identical inputs
//! always yield identical masks and byte-identical modified features.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, GscError, Result};
use crate::head::HeadModel;
use crate::numcore::{dot_unchecked, norm2, norm_inf, Vector};

/// Mask ratio used when nothing else is configured.
pub const DEFAULT_MASK_RATIO: f64 = 0.05;

/// How many coordinates to modify.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskBudget {
    /// Fraction of `d`; `k = round(ratio·d)` clamped to `[1, d]` when positive.
    Ratio(f64),
    /// Explicit count, clamped to `d`.
    Count(usize),
}

impl Default for MaskBudget {
    fn default() -> Self {
        MaskBudget::Ratio(DEFAULT_MASK_RATIO)
    }
}

impl MaskBudget {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MaskBudget::Ratio(r) if !(0.0..=1.0).contains(&r) => Err(GscError::Config(format!(
                "mask ratio {r} outside [0, 1]"
            ))),
            _ => Ok(()),
        }
    }

    pub fn k(&self, d: usize) -> usize {
        match *self {
            MaskBudget::Ratio(r) if r <= 0.0 => 0,
            MaskBudget::Ratio(r) => ((r * d as f64).round() as usize).clamp(1, d),
            MaskBudget::Count(n) => n.min(d),
        }
    }
}

/// Ranking rule for coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionKind {
    /// Largest `|g_i|`.
    TopGrad,
    /// Largest `|g_i · F_i|`.
    TopGradTimesFeature,
    /// Largest `|g_i| / sqrt(λ_i)` for a diagonal Fisher estimate `λ`.
    FisherWeighted { fisher_diag: Vector },
    /// `k` uniform draws without replacement.
    Random { seed: u64 },
    /// Smallest `|g_i|`.
    Reverse,
}

impl SelectionKind {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionKind::TopGrad => "top_grad",
            SelectionKind::TopGradTimesFeature => "top_grad_times_feature",
            SelectionKind::FisherWeighted { .. } => "fisher_weighted",
            SelectionKind::Random { .. } => "random",
            SelectionKind::Reverse => "reverse",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStrategy {
    pub kind: SelectionKind,
    pub budget: MaskBudget,
}

impl SelectionStrategy {
    pub fn new(kind: SelectionKind, budget: MaskBudget) -> Self {
        SelectionStrategy { kind, budget }
    }

    pub fn top_grad(budget: MaskBudget) -> Self {
        Self::new(SelectionKind::TopGrad, budget)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        self.budget.validate()?;
        if let SelectionKind::FisherWeighted { fisher_diag } = &self.kind {
            check_len("fisher diagonal", d, fisher_diag.len())?;
            if fisher_diag.iter().any(|&l| l <= 0.0) {
                return Err(GscError::Config(
                    "fisher diagonal entries must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// What happens to the selected coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModificationRule {
    /// `F'_i = 0`.
    Zero,
    /// `F'_i = β F_i` with `β ∈ [0, 1)`.
    Scale { beta: f64 },
    /// `F'_i = F_i − α sign(g_i)`. `None` uses `α = 0.1 · ‖F‖∞`.
    SignPerturb { alpha: Option<f64> },
    /// `F' = F − ⟨F, ĝ⟩ ĝ`, applied to the whole vector; the mask is ignored.
    OrthProject,
    /// `F'_i = clamp(F_i, −bound, bound)`.
    Clip { bound: f64 },
}

/// Relative step of the sign perturbation when no explicit `α` is given.
pub const DEFAULT_SIGN_STEP: f64 = 0.1;

impl ModificationRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ModificationRule::Scale { beta } if !(0.0..1.0).contains(&beta) => Err(
                GscError::Config(format!("scale factor {beta} outside [0, 1)")),
            ),
            ModificationRule::SignPerturb { alpha: Some(a) } if !(a > 0.0 && a.is_finite()) => {
                Err(GscError::Config(format!("sign step {a} must be positive")))
            }
            ModificationRule::Clip { bound } if !(bound > 0.0 && bound.is_finite()) => Err(
                GscError::Config(format!("clip bound {bound} must be positive")),
            ),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModificationRule::Zero => "zero",
            ModificationRule::Scale { .. } => "scale",
            ModificationRule::SignPerturb { .. } => "sign_perturb",
            ModificationRule::OrthProject => "orth_project",
            ModificationRule::Clip { .. } => "clip",
        }
    }

    pub fn uses_mask(&self) -> bool {
        !matches!(self, ModificationRule::OrthProject)
    }

    fn sign_step(alpha: Option<f64>, features: &[f64]) -> f64 {
        alpha.unwrap_or_else(|| DEFAULT_SIGN_STEP * norm_inf(features))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortCircuitPlan {
    pub strategy: SelectionStrategy,
    pub rule: ModificationRule,
    pub rounds: usize,
}

impl ShortCircuitPlan {
    pub fn new(strategy: SelectionStrategy, rule: ModificationRule, rounds: usize) -> Self {
        ShortCircuitPlan {
            strategy,
            rule,
            rounds,
        }
    }

    /// Zero out the top 5% gradient coordinates in one round.
    pub fn default_plan() -> Self {
        Self::new(
            SelectionStrategy::top_grad(MaskBudget::default()),
            ModificationRule::Zero,
            1,
        )
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.rounds == 0 {
            return Err(GscError::Config("rounds must be at least 1".into()));
        }
        self.strategy.validate(d)?;
        self.rule.validate()
    }

    /// Per-round coordinate counts; earlier rounds take the remainder.
    pub fn round_budgets(&self, d: usize) -> Vec<usize> {
        split_budget(self.strategy.budget.k(d), self.rounds)
    }
}

pub(crate) fn split_budget(k: usize, rounds: usize) -> Vec<usize> {
    let base = k / rounds;
    let extra = k % rounds;
    (0..rounds).map(|r| base + usize::from(r < extra)).collect()
}

/// Sorted set of selected coordinate indices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaskSet {
    indices: Vec<usize>,
}

impl MaskSet {
    pub fn new(mut indices: Vec<usize>, d: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&bad) = indices.iter().find(|&&i| i >= d) {
            return Err(GscError::Index { index: bad, len: d });
        }
        Ok(MaskSet { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn union(&self, other: &MaskSet) -> MaskSet {
        let mut indices = self.indices.clone();
        indices.extend_from_slice(&other.indices);
        indices.sort_unstable();
        indices.dedup();
        MaskSet { indices }
    }
}

/// Result of [`select`].
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub mask: MaskSet,
    /// Every ranking score was zero; the mask is the lowest eligible indices.
    pub degenerate: bool,
}

/// Picks `strategy.budget.k(d)` coordinates.
pub fn select(strategy: &SelectionStrategy, features: &[f64], g: &[f64]) -> Result<Selection> {
    let d = features.len();
    check_len("select gradient", d, g.len())?;
    strategy.validate(d)?;
    let k = strategy.budget.k(d);
    let eligible = vec![true; d];
    select_among(&strategy.kind, features, g, &eligible, k, None)
}

/// Selection restricted to `eligible` coordinates. `rng` carries the random
/// stream across rounds; when `None` a fresh stream is seeded.
fn select_among(
    kind: &SelectionKind,
    features: &[f64],
    g: &[f64],
    eligible: &[bool],
    k: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Selection> {
    let d = features.len();
    let candidates: Vec<usize> = (0..d).filter(|&i| eligible[i]).collect();
    let k = k.min(candidates.len());
    if k == 0 {
        return Ok(Selection {
            mask: MaskSet::default(),
            degenerate: false,
        });
    }

    if let SelectionKind::Random { seed } = kind {
        let mut fresh;
        let rng = match rng {
            Some(r) => r,
            None => {
                fresh = ChaCha8Rng::seed_from_u64(*seed);
                &mut fresh
            }
        };
        let picked = index::sample(rng, candidates.len(), k)
            .into_iter()
            .map(|j| candidates[j])
            .collect();
        return Ok(Selection {
            mask: MaskSet::new(picked, d)?,
            degenerate: false,
        });
    }

    let scores: Vec<f64> = match kind {
        SelectionKind::TopGrad | SelectionKind::Reverse => g.iter().map(|v| v.abs()).collect(),
        SelectionKind::TopGradTimesFeature => {
            g.iter().zip(features).map(|(a, b)| (a * b).abs()).collect()
        }
        SelectionKind::FisherWeighted { fisher_diag } => g
            .iter()
            .zip(fisher_diag.iter())
            .map(|(a, l)| a.abs() / l.sqrt())
            .collect(),
        SelectionKind::Random { .. } => unreachable!(),
    };
    let degenerate = candidates.iter().all(|&i| scores[i] == 0.0);

    let mut ranked = candidates;
    if matches!(kind, SelectionKind::Reverse) {
        ranked.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    } else {
        ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    }
    ranked.truncate(k);
    Ok(Selection {
        mask: MaskSet::new(ranked, d)?,
        degenerate,
    })
}

/// Modified feature and the displacement `F' − F`.
#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub f_prime: Vector,
    pub delta: Vector,
    /// Orthogonal projection requested with `‖g‖ = 0`; `F` was left unchanged.
    pub degenerate: bool,
}

pub fn apply(
    rule: &ModificationRule,
    features: &[f64],
    g: &[f64],
    mask: &MaskSet,
) -> Result<Applied> {
    let d = features.len();
    check_len("apply gradient", d, g.len())?;
    if let Some(&bad) = mask.indices().iter().find(|&&i| i >= d) {
        return Err(GscError::Index { index: bad, len: d });
    }
    rule.validate()?;

    let mut f_prime = features.to_vec();
    let mut degenerate = false;
    match *rule {
        ModificationRule::Zero => {
            for &i in mask.indices() {
                f_prime[i] = 0.0;
            }
        }
        ModificationRule::Scale { beta } => {
            for &i in mask.indices() {
                f_prime[i] = beta * features[i];
            }
        }
        ModificationRule::SignPerturb { alpha } => {
            let step = ModificationRule::sign_step(alpha, features);
            for &i in mask.indices() {
                f_prime[i] = features[i] - step * sign(g[i]);
            }
        }
        ModificationRule::Clip { bound } => {
            for &i in mask.indices() {
                f_prime[i] = features[i].clamp(-bound, bound);
            }
        }
        ModificationRule::OrthProject => {
            let norm = norm2(g);
            if norm == 0.0 {
                degenerate = true;
            } else {
                let unit: Vec<f64> = g.iter().map(|v| v / norm).collect();
                let along = dot_unchecked(features, &unit);
                for (fp, u) in f_prime.iter_mut().zip(&unit) {
                    *fp -= along * u;
                }
            }
        }
    }
    let delta: Vec<f64> = f_prime.iter().zip(features).map(|(a, b)| a - b).collect();
    Ok(Applied {
        f_prime: Vector::checked(f_prime)?,
        delta: Vector::checked(delta)?,
        degenerate,
    })
}

/// `sign(0) = 0`, so zero-gradient coordinates are not perturbed.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One round of a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub class: usize,
    pub g: Vector,
    pub mask: MaskSet,
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub f_prime: Vector,
    pub delta_total: Vector,
    pub rounds: Vec<RoundRecord>,
    /// Union of the per-round masks.
    pub mask: MaskSet,
    pub degenerate: bool,
    /// FLOPs of the forward and backward sweeps spent inside the plan
    /// (rounds after the first need their own).
    pub flops: u64,
}

/// Runs a plan starting from a precomputed gradient at `features`.
///
/// Round `r > 0` recomputes the predicted class and gradient at the current
/// modified feature. Coordinates chosen in an earlier round are not eligible
/// again.
pub fn run_plan_from(
    plan: &ShortCircuitPlan,
    head: &HeadModel,
    features: &[f64],
    class: usize,
    g: &Vector,
) -> Result<PlanOutcome> {
    let d = features.len();
    check_len("plan input", head.input_dim(), d)?;
    plan.validate(d)?;

    let budgets = plan.round_budgets(d);
    let mut rng = match plan.strategy.kind {
        SelectionKind::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let mut current = features.to_vec();
    let mut eligible = vec![true; d];
    let mut union = MaskSet::default();
    let mut records = Vec::with_capacity(plan.rounds);
    let mut degenerate = false;
    let mut flops = 0u64;
    let (mut class, mut g) = (class, g.clone());

    for (round, &k) in budgets.iter().enumerate() {
        if round > 0 {
            if k == 0 && plan.rule.uses_mask() {
                break;
            }
            let (trace, bundle) = head.analyze(&current)?;
            flops += trace.flops + bundle.flops_backward;
            class = bundle.class;
            g = bundle.g;
        }
        let selection = select_among(&plan.strategy.kind, &current, &g, &eligible, k, rng.as_mut())?;
        degenerate |= selection.degenerate && plan.rule.uses_mask() && k > 0;
        let applied = apply(&plan.rule, &current, &g, &selection.mask)?;
        degenerate |= applied.degenerate;
        for &i in selection.mask.indices() {
            eligible[i] = false;
        }
        union = union.union(&selection.mask);
        current = applied.f_prime.into_inner();
        records.push(RoundRecord {
            class,
            g: g.clone(),
            mask: selection.mask,
        });
    }

    let delta: Vec<f64> = current.iter().zip(features).map(|(a, b)| a - b).collect();
    Ok(PlanOutcome {
        f_prime: Vector::checked(current)?,
        delta_total: Vector::checked(delta)?,
        rounds: records,
        mask: union,
        degenerate,
        flops,
    })
}

/// Runs a plan from scratch: forward, predicted class, gradient, rounds.
pub fn run_plan(plan: &ShortCircuitPlan, head: &HeadModel, features: &[f64]) -> Result<PlanOutcome> {
    let (trace, bundle) = head.analyze(features)?;
    let mut outcome = run_plan_from(plan, head, features, bundle.class, &bundle.g)?;
    outcome.flops += trace.flops + bundle.flops_backward;
    Ok(outcome)
}

/// First-order prediction of how much `[y]_c` falls under `rule`.
pub fn logit_drop_estimate(
    g: &[f64],
    features: &[f64],
    mask: &MaskSet,
    rule: &ModificationRule,
) -> Result<f64> {
    check_len("logit_drop_estimate", features.len(), g.len())?;
    let masked = || mask.indices().iter().map(|&i| (g[i], features[i]));
    Ok(match *rule {
        ModificationRule::Zero => masked().map(|(gi, fi)| gi * fi).sum(),
        ModificationRule::Scale { beta } => (1.0 - beta) * masked().map(|(gi, fi)| gi * fi).sum::<f64>(),
        ModificationRule::SignPerturb { alpha } => {
            ModificationRule::sign_step(alpha, features) * masked().map(|(gi, _)| gi.abs()).sum::<f64>()
        }
        ModificationRule::Clip { bound } => masked()
            .map(|(gi, fi)| gi * (fi - fi.clamp(-bound, bound)))
            .sum(),
        ModificationRule::OrthProject => dot_unchecked(features, g),
    })
}
