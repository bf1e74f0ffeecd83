use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gsc_core::approx::{audit_gap, AuditOptions, AuditSample};
use gsc_core::metrics::{concentration_profile, export_histogram, write_concentration_csv};
use gsc_core::pipeline::{plan_for, ApproxMode, RuleName, StrategyName};
use gsc_core::*;

#[derive(Parser)]
#[command(name = "gsc", version, about = "Gradient short-circuit OOD scoring on exported feature sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        /// Generator config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every sample and write report.csv and summary.json.
    Eval {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare first-order and exact logits per sample.
    ApproxError {
        #[command(flatten)]
        run: RunArgs,
        /// Ball probes for the smoothness estimate.
        #[arg(long, default_value_t = 8)]
        probes: usize,
    },
    /// TopKRatio profile of ID and OOD gradients.
    Concentration {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated k values; defaults to 1..=d.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FLOP counts for the first-order and two-forward paths.
    Flops {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score histogram of ID and OOD samples.
    Hist {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        /// Histogram the unmodified scores.
        #[arg(long)]
        raw: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Run config (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ratio: Option<f64>,
    /// Coordinate count; overrides the ratio.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    rule: Option<RuleName>,
    #[arg(long)]
    strategy: Option<StrategyName>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    score: Option<ScoreKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    clip_bound: Option<f64>,
    #[arg(long)]
    approx_mode: Option<ApproxMode>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self, default_mode: ApproxMode) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => serde_json::from_str::<RunConfig>(&read(p)?)?,
            None => RunConfig { approx_mode: default_mode, ..RunConfig::default() },
        };
        let plan = &mut cfg.plan;
        if let Some(r) = self.ratio {
            plan.ratio = r;
            plan.k = None;
        }
        plan.k = self.k.or(plan.k);
        plan.rule = self.rule.unwrap_or(plan.rule);
        plan.strategy = self.strategy.unwrap_or(plan.strategy);
        plan.rounds = self.rounds.unwrap_or(plan.rounds);
        plan.beta = self.beta.or(plan.beta);
        plan.alpha = self.alpha.or(plan.alpha);
        plan.clip_bound = self.clip_bound.or(plan.clip_bound);
        cfg.score = self.score.unwrap_or(cfg.score);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.approx_mode = self.approx_mode.unwrap_or(cfg.approx_mode);
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &RunConfig) -> Option<PathBuf> {
        self.out.clone().or_else(|| cfg.output_dir.clone())
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => GscError::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })
}

/// Writes `bytes` to `dir/name`, or to stdout without a directory.
fn emit(dir: Option<&Path>, name: &str, bytes: &[u8]) -> Result<()> {
    match dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(name), bytes)?;
        }
        None => io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn gen(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => serde_json::from_str::<SynthConfig>(&read(p)?)?,
        None => SynthConfig::default(),
    };
    cfg.seed = seed.unwrap_or(cfg.seed);
    let sd = generate(&cfg)?;
    let manifest = save_dataset(&sd.to_dataset(), out)?;
    let mut provenance = serde_json::to_string_pretty(&cfg)?;
    provenance.push('\n');
    fs::write(out.join("synth.json"), provenance)?;
    eprintln!("wrote {} (spike gain {:.6})", manifest.display(), sd.spike_gain);
    Ok(())
}

fn eval(run: &RunArgs) -> Result<()> {
    let cfg = run.config(ApproxMode::FirstOrder)?;
    let data = load_dataset(&run.manifest)?;
    let report = run_pipeline(&data, &cfg)?;
    let summary = report.summary_json();
    match run.out_dir(&cfg) {
        Some(dir) => {
            let mut csv = Vec::new();
            report.write_csv(&mut csv)?;
            emit(Some(&dir), "report.csv", &csv)?;
            emit(Some(&dir), "summary.json", summary.as_bytes())?;
            let a = &report.summary.aggregates;
            eprintln!(
                "auroc {:.4} -> {:.4}, fpr95 {:.4} -> {:.4}, {} errors",
                a.auroc_raw, a.auroc_gsc, a.fpr95_raw, a.fpr95_gsc, a.n_errors
            );
        }
        None => emit(None, "summary.json", summary.as_bytes())?,
    }
    Ok(())
}

fn approx_error(run: &RunArgs, probes: usize) -> Result<()> {
    let cfg = run.config(ApproxMode::Both)?;
    if cfg.approx_mode != ApproxMode::Both {
        return Err(GscError::Config("approx-error needs approx_mode both".into()));
    }
    let data = load_dataset(&run.manifest)?;
    let plan = plan_for(&data, &cfg)?;
    let samples: Vec<AuditSample> = data
        .feature_sets
        .iter()
        .filter(|s| s.label != Label::Calibration)
        .flat_map(|s| {
            s.features.iter().map(|f| AuditSample {
                features: f.clone(),
                plan: plan.clone(),
                label: s.label,
            })
        })
        .collect();
    let options = AuditOptions { probes, seed: cfg.seed };
    let table = audit_gap(&data.head, &samples, &[cfg.score], options)?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    emit(run.out_dir(&cfg).as_deref(), "approx_error.csv", &csv)?;
    for s in table.summary() {
        eprintln!(
            "{} {}: n {} mean {:.3e} max {:.3e}",
            s.score_kind, s.label, s.count, s.mean, s.max
        );
    }
    Ok(())
}

fn concentration(manifest: &Path, k: &[usize], out: Option<&Path>) -> Result<()> {
    let data = load_dataset(manifest)?;
    let ks: Vec<usize> = if k.is_empty() {
        (1..=data.head.input_dim()).collect()
    } else {
        k.to_vec()
    };
    let id = concentration_profile(&data.head, &data.features_with(Label::Id), &ks)?;
    let ood = concentration_profile(&data.head, &data.features_with(Label::Ood), &ks)?;
    let mut csv = Vec::new();
    write_concentration_csv(&id, &ood, &mut csv)?;
    emit(out, "concentration.csv", &csv)
}

fn flops(run: &RunArgs) -> Result<()> {
    let cfg = run.config(ApproxMode::FirstOrder)?;
    let data = load_dataset(&run.manifest)?;
    let d = data.head.input_dim();
    let k = plan_for(&data, &cfg)?.round_budgets(d).iter().sum();
    let report = data.head.flop_report(k);
    let json = serde_json::json!({
        "layers": data.head.layers().len(),
        "report": report,
        "approx_to_naive_ratio": report.approx_to_naive_ratio(),
    });
    let mut text = serde_json::to_string_pretty(&json)?;
    text.push('\n');
    emit(run.out_dir(&cfg).as_deref(), "flops.json", text.as_bytes())
}

fn hist(run: &RunArgs, bins: usize, raw: bool) -> Result<()> {
    let cfg = run.config(ApproxMode::FirstOrder)?;
    let data = load_dataset(&run.manifest)?;
    let report = run_pipeline(&data, &cfg)?;
    let pick = |label| -> Vec<f64> {
        report
            .rows
            .iter()
            .filter(|r| r.label == label)
            .filter_map(|r| if raw { r.raw_score } else { r.gsc_score })
            .collect()
    };
    let table = export_histogram(&ScoredSet::new(pick(Label::Id), pick(Label::Ood))?, bins)?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    emit(run.out_dir(&cfg).as_deref(), "hist.csv", &csv)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, seed, out } => gen(config.as_deref(), seed, &out),
        Command::Eval { run } => eval(&run),
        Command::ApproxError { run, probes } => approx_error(&run, probes),
        Command::Concentration { manifest, k, out } => concentration(&manifest, &k, out.as_deref()),
        Command::Flops { run } => flops(&run),
        Command::Hist { run, bins, raw } => hist(&run, bins, raw),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
