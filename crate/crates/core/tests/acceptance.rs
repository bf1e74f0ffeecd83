mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use gsc_core::approx::{approx_from_trace, audit_gap, exact_logits, AuditOptions, AuditSample};
use gsc_core::metrics::{auroc, concentration_profile, fpr_at_tpr};
use gsc_core::numcore::{argmax, logsumexp, norm2, norm_inf};
use gsc_core::pipeline::{PlanSpec, RuleName, StrategyName};
use gsc_core::shortcircuit::run_plan;
use gsc_core::synth::theory_check;
use gsc_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{affine_head, gaussian, mlp, random_dims, vector};

const SEEDS: u64 = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within_budget(o: Outcome, elapsed: Duration, budget: Duration) -> Outcome {
    let fast = elapsed < budget;
    let detail = format!("{}; {:.2?} (limit {:?})", o.detail, elapsed, budget);
    outcome(o.pass && fast, detail)
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn random_plan(rng: &mut ChaCha8Rng, d: usize) -> ShortCircuitPlan {
    let budget = if rng.random_bool(0.5) {
        MaskBudget::Count(rng.random_range(0..=d))
    } else {
        MaskBudget::Ratio(rng.random_range(0.0..=1.0))
    };
    let kind = match rng.random_range(0..5) {
        0 => SelectionKind::TopGrad,
        1 => SelectionKind::TopGradTimesFeature,
        2 => {
            let lambda = (0..d).map(|_| rng.random_range(0.01..2.0)).collect();
            SelectionKind::FisherWeighted { fisher_diag: Vector::new(lambda).unwrap() }
        }
        3 => SelectionKind::Random { seed: rng.random() },
        _ => SelectionKind::Reverse,
    };
    let rule = match rng.random_range(0..5) {
        0 => ModificationRule::Zero,
        1 => ModificationRule::Scale { beta: rng.random_range(0.0..1.0) },
        2 => ModificationRule::SignPerturb { alpha: Some(rng.random_range(0.01..1.0)) },
        3 => ModificationRule::OrthProject,
        _ => ModificationRule::Clip { bound: rng.random_range(0.01..1.5) },
    };
    ShortCircuitPlan::new(SelectionStrategy::new(kind, budget), rule, rng.random_range(1..=3))
}

fn affine_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(1..=64);
        let k = rng.random_range(2..=10);
        let head = affine_head(&mut rng, d, k);
        let scale = rng.random_range(0.1..5.0);
        let f = vector(&mut rng, d, scale);
        let plan = random_plan(&mut rng, d);
        let trace = head.forward_trace(&f).unwrap();
        let out = run_plan(&plan, &head, &f).unwrap();
        let (approx, _) = approx_from_trace(&head, &trace, &trace.logits, &out.delta_total).unwrap();
        let exact = exact_logits(&head, &out.f_prime).unwrap();
        for (a, e) in approx.iter().zip(exact.iter()) {
            worst = worst.max((a - e).abs());
        }
    }
    outcome(worst <= 1e-12, format!("1000 triples, max |approx - exact| = {worst:.3e} (tol 1e-12)"))
}

fn far_from_kinks(head: &HeadModel, f: &[f64], margin: f64) -> bool {
    let trace = head.forward_trace(f).unwrap();
    let hidden = head.layers().len() - 1;
    trace.pre_activations()[..hidden]
        .iter()
        .flatten()
        .all(|z| z.abs() > margin)
}

fn gradient_correctness() -> Outcome {
    const H: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut failures = 0usize;
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for i in 0..100 {
        let act = if i % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let dims = random_dims(&mut rng);
        let head = mlp(&mut rng, &dims, act);
        let d = head.input_dim();
        let f = loop {
            let f = vector(&mut rng, d, 1.0);
            if act != Activation::Relu || far_from_kinks(&head, &f, 1e-3) {
                break f;
            }
        };
        let jac = head.jacobian(&f).unwrap();
        let c = argmax(&head.forward(&f).unwrap()).unwrap();
        let g = head.grad_logit(&f, c).unwrap();
        for j in 0..d {
            let mut plus = f.as_slice().to_vec();
            let mut minus = plus.clone();
            plus[j] += H;
            minus[j] -= H;
            let yp = head.forward(&plus).unwrap();
            let ym = head.forward(&minus).unwrap();
            for r in 0..head.output_dim() {
                let fd = (yp[r] - ym[r]) / (2.0 * H);
                let a = jac.get(r, j);
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1.0));
                checked += 1;
                if !rel_close(a, fd, 1e-5) {
                    failures += 1;
                }
                if r == c && !rel_close(g[j], fd, 1e-5) {
                    failures += 1;
                }
            }
        }
    }
    outcome(
        failures == 0,
        format!("100 heads, {checked} entries, {failures} outside 1e-5 relative, worst {worst:.2e}"),
    )
}

fn remainder_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut samples = Vec::new();
    let mut heads = Vec::new();
    while samples.len() < 500 {
        let dims = random_dims(&mut rng);
        let head = mlp(&mut rng, &dims, Activation::Tanh);
        let d = head.input_dim();
        let scale = rng.random_range(0.05..2.0);
        let f = vector(&mut rng, d, scale);
        let plan = random_plan(&mut rng, d);
        let out = run_plan(&plan, &head, &f).unwrap();
        if norm2(&out.delta_total) > 0.1 {
            continue;
        }
        let label = if samples.len() % 2 == 0 { Label::Id } else { Label::Ood };
        samples.push(AuditSample { features: f, plan, label });
        heads.push(head);
    }
    let mut covered = 0usize;
    let mut worst_ratio = 0.0f64;
    for (i, (head, sample)) in heads.iter().zip(samples).enumerate() {
        let options = AuditOptions { seed: i as u64, ..AuditOptions::default() };
        let table = audit_gap(head, &[sample], &[ScoreKind::Energy], options).unwrap();
        let row = &table.rows[0];
        let bound = row.remainder_bound.unwrap_or(f64::NAN);
        if row.logit_gap_inf <= bound {
            covered += 1;
        }
        if bound > 0.0 {
            worst_ratio = worst_ratio.max(row.logit_gap_inf / bound);
        } else if row.logit_gap_inf > 0.0 {
            worst_ratio = f64::INFINITY;
        }
    }
    outcome(
        covered == 500,
        format!("{covered}/500 audits within the remainder bound, max gap/bound = {worst_ratio:.3}"),
    )
}

fn energy_lipschitz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut violations = 0usize;
    for _ in 0..100_000 {
        let k = rng.random_range(1..=20);
        let scale = 10f64.powf(rng.random_range(-3.0..2.0));
        let a = gaussian(&mut rng, k, scale);
        let b: Vec<f64> = if rng.random_bool(0.5) {
            gaussian(&mut rng, k, scale)
        } else {
            let step = scale * 10f64.powf(rng.random_range(-6.0..0.0));
            a.iter().map(|v| v + step * rng.random_range(-1.0..1.0)).collect()
        };
        let lhs = (logsumexp(&a).unwrap() - logsumexp(&b).unwrap()).abs();
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        if lhs > norm_inf(&diff) {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("100000 pairs, {violations} violations"))
}

fn random_scores(rng: &mut ChaCha8Rng, n: usize, tied: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if tied {
                rng.random_range(0..8) as f64
            } else {
                rng.random_range(-3.0..3.0)
            }
        })
        .collect()
}

fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for a in id {
        for b in ood {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / (id.len() * ood.len()) as f64
}

fn auroc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n_id = rng.random_range(1..=100);
        let n_ood = rng.random_range(1..=100);
        let tied = rng.random_bool(0.5);
        let id = random_scores(&mut rng, n_id, tied);
        let ood = random_scores(&mut rng, n_ood, tied);
        let oracle = pairwise_auroc(&id, &ood);
        let got = auroc(&ScoredSet::new(id, ood).unwrap()).unwrap();
        worst = worst.max((got - oracle).abs());
    }
    outcome(worst <= 1e-12, format!("1000 sets, max |rank - pairwise| = {worst:.3e} (tol 1e-12)"))
}

/// Threshold by enumeration: the smallest ID score with at least `N/20 + 1`
/// ID scores at or below it.
fn enumerated_fpr95(id: &[f64], ood: &[f64]) -> f64 {
    let need = id.len() / 20 + 1;
    let tau = id
        .iter()
        .copied()
        .filter(|&t| id.iter().filter(|&&x| x <= t).count() >= need)
        .fold(f64::INFINITY, f64::min);
    ood.iter().filter(|&&o| o > tau).count() as f64 / ood.len() as f64
}

fn fpr_enumeration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut mismatches = 0usize;
    for _ in 0..1000 {
        let n_id = rng.random_range(scoring::MIN_CALIBRATION..=150);
        let n_ood = rng.random_range(1..=50);
        let tied = rng.random_bool(0.5);
        let id = random_scores(&mut rng, n_id, tied);
        let ood = random_scores(&mut rng, n_ood, tied);
        let oracle = enumerated_fpr95(&id, &ood);
        let got = fpr_at_tpr(&ScoredSet::new(id, ood).unwrap(), 0.95).unwrap();
        if got != oracle {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("1000 sets, {mismatches} mismatches"))
}

fn benchmark() -> Vec<SynthDataset> {
    (0..SEEDS)
        .map(|seed| generate(&SynthConfig::with_seed(seed)).unwrap())
        .collect()
}

fn eval_with(ds: &Dataset, strategy: StrategyName, rule: RuleName) -> pipeline::Aggregates {
    let cfg = RunConfig {
        plan: PlanSpec { strategy, rule, ..PlanSpec::default() },
        ..RunConfig::default()
    };
    run_pipeline(ds, &cfg).unwrap().summary.aggregates
}

fn detection_gain() -> Outcome {
    let start = Instant::now();
    let bench = benchmark();
    let mut wins = 0;
    let (mut id_rel, mut ood_rel) = (0.0, 0.0);
    for sd in &bench {
        let agg = eval_with(&sd.to_dataset(), StrategyName::TopGrad, RuleName::Zero);
        if agg.auroc_gsc > agg.auroc_raw && agg.fpr95_gsc < agg.fpr95_raw {
            wins += 1;
        }
        let report = theory_check(sd, &ShortCircuitPlan::default_plan()).unwrap();
        id_rel += report.id.mean_relative / SEEDS as f64;
        ood_rel += report.ood.mean_relative / SEEDS as f64;
    }
    let ratio = ood_rel / id_rel;
    let o = outcome(
        wins >= 19 && ratio >= 3.0,
        format!(
            "{wins}/{SEEDS} seeds improve AUROC and FPR95 (need 19); relative drop OOD {ood_rel:.3} vs ID {id_rel:.3} = {ratio:.1}x (need 3x)"
        ),
    );
    within_budget(o, start.elapsed(), Duration::from_secs(120))
}

fn ablation_ordering() -> Outcome {
    let bench: Vec<Dataset> = benchmark().iter().map(SynthDataset::to_dataset).collect();
    let mean_fpr = |strategy, rule| {
        bench
            .iter()
            .map(|ds| eval_with(ds, strategy, rule).fpr95_gsc)
            .sum::<f64>()
            / bench.len() as f64
    };
    let zero = mean_fpr(StrategyName::TopGrad, RuleName::Zero);
    let sign = mean_fpr(StrategyName::TopGrad, RuleName::SignPerturb);
    let orth = mean_fpr(StrategyName::TopGrad, RuleName::OrthProject);
    let random = mean_fpr(StrategyName::Random, RuleName::Zero);
    let reverse = mean_fpr(StrategyName::Reverse, RuleName::Zero);
    outcome(
        zero < sign && zero < orth && zero < random && random < reverse,
        format!(
            "mean FPR95 over {SEEDS} seeds: zero {zero:.4}, sign_perturb {sign:.4}, orth_project {orth:.4}; top_grad {zero:.4} < random {random:.4} < reverse {reverse:.4}"
        ),
    )
}

fn concentration_separation() -> Outcome {
    let mut worst_gap = f64::INFINITY;
    let mut monotone = true;
    let mut terminal = true;
    for seed in 0..SEEDS {
        let cfg = SynthConfig { head: synth::HeadPreset::Rectified, ..SynthConfig::with_seed(seed) };
        let sd = generate(&cfg).unwrap();
        let ks: Vec<usize> = (1..=cfg.d).collect();
        let id = concentration_profile(&sd.head, &sd.id_features, &ks).unwrap();
        let ood = concentration_profile(&sd.head, &sd.ood_features, &ks).unwrap();
        worst_gap = worst_gap.min(ood.mean_ratio[cfg.s - 1] - id.mean_ratio[cfg.s - 1]);
        for p in id.per_sample.iter().chain(&ood.per_sample) {
            monotone &= p.windows(2).all(|w| w[0] <= w[1]);
            terminal &= p[cfg.d - 1] == 1.0;
        }
    }
    outcome(
        worst_gap >= 0.10 && monotone && terminal,
        format!(
            "min over {SEEDS} seeds of OOD - ID TopKRatio(s) = {worst_gap:.3} (need 0.10); monotone {monotone}; exact 1.0 at k=d {terminal}"
        ),
    )
}

fn cost_accounting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let head = mlp(&mut rng, &[512, 128, 32, 10], Activation::Tanh);
    let f = vector(&mut rng, 512, 1.0);
    let out = run_plan(&ShortCircuitPlan::default_plan(), &head, &f).unwrap();
    let nnz = out.delta_total.iter().filter(|v| **v != 0.0).count();
    let r = head.flop_report(nnz);
    let ratio = r.approx_to_naive_ratio();
    outcome(
        r.approx_path < r.naive_path && ratio < 0.75,
        format!(
            "forward {} backward {} tangent nnz {nnz}: approx path {} vs two-forward path {} (ratio {ratio:.4}, need < 0.75); forward pair alone {}",
            r.forward, r.backward, r.approx_path, r.naive_path, r.two_forward
        ),
    )
}

fn eval_to_files(manifest: &Path, out: &Path) {
    let ds = load_dataset(manifest).unwrap();
    let cfg = RunConfig { seed: 3, ..RunConfig::default() };
    let report = run_pipeline(&ds, &cfg).unwrap();
    fs::create_dir_all(out).unwrap();
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    fs::write(out.join("report.csv"), csv).unwrap();
    fs::write(out.join("summary.json"), report.summary_json()).unwrap();
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let sd = generate(&SynthConfig::with_seed(7)).unwrap();
    let manifest = save_dataset(&sd.to_dataset(), &dir.path().join("data")).unwrap();
    eval_to_files(&manifest, &dir.path().join("a"));
    eval_to_files(&manifest, &dir.path().join("b"));
    let same = ["report.csv", "summary.json"].iter().all(|name| {
        fs::read(dir.path().join("a").join(name)).unwrap()
            == fs::read(dir.path().join("b").join(name)).unwrap()
    });
    let rows = fs::read_to_string(dir.path().join("a/report.csv")).unwrap().lines().count() - 1;
    outcome(same, format!("two eval runs over {rows} samples, byte-identical reports: {same}"))
}

type Check = (&'static str, fn() -> Outcome, Option<Duration>);

fn main() -> ExitCode {
    let checks: [Check; 11] = [
        ("affine exactness", affine_exactness, Some(Duration::from_secs(5))),
        ("gradient correctness", gradient_correctness, Some(Duration::from_secs(30))),
        ("remainder bound", remainder_bound, Some(Duration::from_secs(60))),
        ("energy 1-Lipschitz", energy_lipschitz, None),
        ("AUROC oracle equivalence", auroc_oracle, None),
        ("FPR95 enumeration", fpr_enumeration, None),
        ("synthetic detection gain", detection_gain, None),
        ("ablation ordering", ablation_ordering, None),
        ("concentration separation", concentration_separation, None),
        ("cost accounting", cost_accounting, None),
        ("determinism", determinism, None),
    ];
    let mut failed = 0;
    for (name, check, budget) in checks {
        let start = Instant::now();
        let mut o = check();
        if let Some(b) = budget {
            o = within_budget(o, start.elapsed(), b);
        }
        if !o.pass {
            failed += 1;
        }
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria passed", 11 - failed, 11);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
