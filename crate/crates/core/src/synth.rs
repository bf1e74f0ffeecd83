//! Seeded synthetic ID/OOD features with known structure.
//!
//! Every class `c` owns a support `Ω_c` of `M` coordinates with weights of
//! random sign, and a disjoint spike set `S_c` of `s` coordinates carrying the
//! largest (positive) weights of row `c`. ID samples of class `c` spread their
//! activation over `Ω_c`, each coordinate following the sign of its weight;
//! OOD samples put almost all of their evidence for `c` on `S_c`, plus a weak
//! diffuse background of random sign. The spike gain is tuned so that raw energies of the two
//! populations have the same mean.
//!
//! All weights and features pass through `f32`, so a dataset written to the
//! `f32le` container reads back bit-identical.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GscError, Result};
use crate::head::{Activation, HeadModel, Layer};
use crate::io::{Dataset, FeatureSet};
use crate::numcore::{Matrix, Vector};
use crate::scoring::{score, Label, ScoreKind};
use crate::shortcircuit::{run_plan, ShortCircuitPlan};

/// Attempts per sample before giving up on its invariant.
pub const RETRY_BUDGET: usize = 100;

/// Minimum share of the predicted-logit mass on the `s` strongest OOD
/// contributions.
pub const OOD_MASS_FLOOR: f64 = 0.8;

/// Tolerance of the mean-energy match when the gain is tuned.
pub const ENERGY_MATCH_TOL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadPreset {
    /// `y = W F`.
    #[default]
    Affine,
    /// `y = W (relu(F − θ) − relu(−F − θ))` with `θ = 3σ`, a two-layer relu
    /// head computing a soft threshold. Noise-level coordinates get zero
    /// gradient, so gradients differ between samples.
    Rectified,
    /// `y = γW tanh(F / γ)`, a smooth head close to the affine one.
    Tanh,
}

/// Scale of the tanh preset.
pub const TANH_SCALE: f64 = 16.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub s: usize,
    /// `None` tunes the gain by bisection on the mean energy.
    pub spike_gain: Option<f64>,
    pub noise_sigma: f64,
    /// Upper end of the OOD background level, relative to the ID amplitude.
    pub ood_background: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub n_calibration: usize,
    pub head: HeadPreset,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            d: 128,
            k: 10,
            m: 64,
            s: 5,
            spike_gain: None,
            noise_sigma: 0.05,
            ood_background: 0.5,
            n_id: 500,
            n_ood: 500,
            n_calibration: 200,
            head: HeadPreset::Affine,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn with_seed(seed: u64) -> Self {
        SynthConfig {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GscError::Config(msg));
        if self.d == 0 || self.k == 0 || self.m == 0 || self.s == 0 {
            return bad("d, K, M and s must be positive".into());
        }
        if self.n_id == 0 || self.n_ood == 0 {
            return bad("sample counts must be positive".into());
        }
        if self.n_calibration < crate::scoring::MIN_CALIBRATION {
            return bad(format!(
                "n_calibration must be at least {}",
                crate::scoring::MIN_CALIBRATION
            ));
        }
        if self.s >= self.m {
            return bad(format!("need s < M, got s = {} and M = {}", self.s, self.m));
        }
        if self.m + self.s > self.d {
            return bad(format!("need M + s <= d, got {} + {} > {}", self.m, self.s, self.d));
        }
        if self.k * self.s > self.d {
            return bad(format!("K·s = {} exceeds d = {}", self.k * self.s, self.d));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if !(self.ood_background >= 0.0 && self.ood_background.is_finite()) {
            return bad(format!("ood_background {} must be >= 0", self.ood_background));
        }
        if let Some(g) = self.spike_gain {
            if !(g > 0.0 && g.is_finite()) {
                return bad(format!("spike_gain {g} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub head: HeadModel,
    pub spike_gain: f64,
    pub id_features: Vec<Vector>,
    pub id_classes: Vec<usize>,
    pub calibration_features: Vec<Vector>,
    pub ood_features: Vec<Vector>,
    pub ood_classes: Vec<usize>,
    /// `Ω_c`, sorted.
    pub supports: Vec<Vec<usize>>,
    /// `S_c`, sorted.
    pub spikes: Vec<Vec<usize>>,
}

impl SynthDataset {
    /// The container view: head plus `calibration`, `id` and `ood` sets.
    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            head: self.head.clone(),
            feature_sets: vec![
                FeatureSet::new("calibration", Label::Calibration, self.calibration_features.clone()),
                FeatureSet::new("id", Label::Id, self.id_features.clone()),
                FeatureSet::new("ood", Label::Ood, self.ood_features.clone()),
            ],
        }
    }
}

/// Log-scale spread of the per-sample amplitude.
pub const AMPLITUDE_SPREAD: f64 = 0.15;

fn amplitude(rng: &mut ChaCha8Rng) -> f64 {
    LogNormal::new(0.0, AMPLITUDE_SPREAD).expect("valid spread").sample(rng)
}

fn q(v: f64) -> f64 {
    v as f32 as f64
}

struct Layout {
    weights: Matrix,
    supports: Vec<Vec<usize>>,
    spikes: Vec<Vec<usize>>,
}

fn draw_layout(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Layout {
    let d = cfg.d;
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(rng);
    let mut data = vec![0.0; cfg.k * d];
    let mut supports = Vec::with_capacity(cfg.k);
    let mut spikes = Vec::with_capacity(cfg.k);
    for c in 0..cfg.k {
        let mut spike: Vec<usize> = order[c * cfg.s..(c + 1) * cfg.s].to_vec();
        spike.sort_unstable();
        let rest: Vec<usize> = (0..d).filter(|i| spike.binary_search(i).is_err()).collect();
        let mut support: Vec<usize> = index::sample(rng, rest.len(), cfg.m)
            .into_iter()
            .map(|j| rest[j])
            .collect();
        support.sort_unstable();

        let row = &mut data[c * d..(c + 1) * d];
        for (i, w) in row.iter_mut().enumerate() {
            *w = if spike.binary_search(&i).is_ok() {
                1.0 + 0.1 * rng.random::<f64>()
            } else if support.binary_search(&i).is_ok() {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * rng.random_range(0.4..0.6)
            } else {
                rng.random_range(-0.05..0.05)
            };
        }
        let norm = row.iter().map(|w| w * w).sum::<f64>().sqrt();
        for w in row.iter_mut() {
            *w = q(*w / norm);
        }
        supports.push(support);
        spikes.push(spike);
    }
    Layout {
        weights: Matrix::from_raw(cfg.k, d, data),
        supports,
        spikes,
    }
}

fn build_head(cfg: &SynthConfig, weights: Matrix) -> Result<HeadModel> {
    let d = cfg.d;
    match cfg.head {
        HeadPreset::Affine => HeadModel::affine(weights, Vector::zeros(cfg.k)),
        HeadPreset::Rectified => {
            let theta = q(3.0 * cfg.noise_sigma);
            let mut split = vec![0.0; 2 * d * d];
            for i in 0..d {
                split[i * d + i] = 1.0;
                split[(d + i) * d + i] = -1.0;
            }
            let mut out = vec![0.0; cfg.k * 2 * d];
            for c in 0..cfg.k {
                for i in 0..d {
                    out[c * 2 * d + i] = weights.get(c, i);
                    out[c * 2 * d + d + i] = -weights.get(c, i);
                }
            }
            HeadModel::new(vec![
                Layer::new(
                    Matrix::from_raw(2 * d, d, split),
                    Vector::from_raw(vec![-theta; 2 * d]),
                    Activation::Relu,
                )?,
                Layer::linear(Matrix::from_raw(cfg.k, 2 * d, out)),
            ])
        }
        HeadPreset::Tanh => {
            let inv = Matrix::from_raw(
                d,
                d,
                (0..d * d)
                    .map(|i| if i / d == i % d { 1.0 / TANH_SCALE } else { 0.0 })
                    .collect(),
            );
            let scaled = Matrix::from_raw(
                cfg.k,
                d,
                weights.data().iter().map(|w| w * TANH_SCALE).collect(),
            );
            HeadModel::new(vec![
                Layer::new(inv, Vector::zeros(d), Activation::Tanh)?,
                Layer::linear(scaled),
            ])
        }
    }
}

fn noisy(signal: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    signal
        .iter()
        .map(|&x| {
            let n = if sigma > 0.0 { normal.sample(rng) } else { 0.0 };
            q(x + n)
        })
        .collect()
}

fn draw_id(cfg: &SynthConfig, row: &[f64], support: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a = amplitude(rng);
    let mut signal = vec![0.0; cfg.d];
    for &i in support {
        signal[i] = row[i].signum() * a * rng.random_range(0.7..1.3);
    }
    noisy(&signal, cfg.noise_sigma, rng)
}

/// OOD sample before the gain is known: spike pattern and the rest.
struct OodBase {
    spike: Vec<(usize, f64)>,
    background: Vec<f64>,
    noise: Vec<f64>,
}

impl OodBase {
    fn features(&self, gain: f64) -> Vec<f64> {
        let mut f = self.background.clone();
        for &(i, v) in &self.spike {
            f[i] += gain * v;
        }
        f.iter()
            .zip(&self.noise)
            .map(|(x, n)| q(x + n))
            .collect()
    }
}

fn draw_ood_base(cfg: &SynthConfig, spikes: &[usize], rng: &mut ChaCha8Rng) -> OodBase {
    let a = amplitude(rng);
    let spike = spikes
        .iter()
        .map(|&i| (i, a * rng.random_range(0.8..1.2)))
        .collect();
    let level = cfg.ood_background * rng.random::<f64>();
    let mut background = vec![0.0; cfg.d];
    for i in index::sample(rng, cfg.d, cfg.m / 2) {
        if spikes.binary_search(&i).is_err() {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            background[i] = sign * level * rng.random_range(0.5..1.5);
        }
    }
    let noise = if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        (0..cfg.d).map(|_| normal.sample(rng)).collect()
    } else {
        vec![0.0; cfg.d]
    };
    OodBase {
        spike,
        background,
        noise,
    }
}

/// `|g_i F_i|` at the predicted class.
fn contributions(head: &HeadModel, f: &[f64]) -> Result<(usize, Vec<f64>)> {
    let (_, bundle) = head.analyze(f)?;
    let contrib = bundle.g.iter().zip(f).map(|(g, x)| (g * x).abs()).collect();
    Ok((bundle.class, contrib))
}

fn id_ok(head: &HeadModel, f: &[f64], class: usize, support: &[usize]) -> Result<bool> {
    let (pred, contrib) = contributions(head, f)?;
    let m = support.len() as f64;
    let mass: f64 = support.iter().map(|&i| contrib[i]).sum();
    let max = contrib.iter().fold(0.0f64, |a, &b| a.max(b));
    Ok(pred == class && max <= 2.0 / m * mass)
}

/// Share of the contribution mass held by the `s` largest entries.
pub fn top_mass_fraction(contrib: &[f64], s: usize) -> f64 {
    let mut sorted = contrib.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sorted.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    sorted[..s.min(sorted.len())].iter().sum::<f64>() / total
}

fn ood_ok(head: &HeadModel, f: &[f64], class: usize, s: usize) -> Result<bool> {
    let (pred, contrib) = contributions(head, f)?;
    Ok(pred == class && top_mass_fraction(&contrib, s) >= OOD_MASS_FLOOR)
}

fn mean_energy(head: &HeadModel, features: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for f in features {
        total += score(ScoreKind::Energy, &head.forward(f)?)?;
    }
    Ok(total / features.len() as f64)
}

fn tune_gain(head: &HeadModel, bases: &[OodBase], target: f64) -> Result<f64> {
    let energy_at = |g: f64| -> Result<f64> {
        let feats: Vec<Vec<f64>> = bases.iter().map(|b| b.features(g)).collect();
        mean_energy(head, &feats)
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    while energy_at(hi)? < target {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Err(GscError::Unattainable(
                "no spike gain reaches the mean ID energy".into(),
            ));
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if energy_at(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-9 * hi {
            break;
        }
    }
    let gain = 0.5 * (lo + hi);
    let reached = energy_at(gain)?;
    if (reached - target).abs() > ENERGY_MATCH_TOL * target.abs() {
        return Err(GscError::Unattainable(format!(
            "mean OOD energy {reached:.4} cannot match mean ID energy {target:.4}"
        )));
    }
    Ok(gain)
}

fn retry<T>(what: &str, mut attempt: impl FnMut() -> Result<Option<T>>) -> Result<T> {
    for _ in 0..RETRY_BUDGET {
        if let Some(v) = attempt()? {
            return Ok(v);
        }
    }
    Err(GscError::Unattainable(what.to_string()))
}

/// Draws a dataset. Same config, same bytes.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layout = draw_layout(cfg, &mut rng);
    let head = build_head(cfg, layout.weights.clone())?;

    let draw_ids = |n: usize, rng: &mut ChaCha8Rng| -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let mut feats = Vec::with_capacity(n);
        let mut classes = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % cfg.k;
            let support = &layout.supports[c];
            let f = retry("ID bounded share (max |g_i F_i| <= 2/M of the support mass)", || {
                let f = draw_id(cfg, layout.weights.row(c), support, rng);
                Ok(id_ok(&head, &f, c, support)?.then_some(f))
            })?;
            feats.push(f);
            classes.push(c);
        }
        Ok((feats, classes))
    };
    let (id_features, id_classes) = draw_ids(cfg.n_id, &mut rng)?;
    let (calibration_features, _) = draw_ids(cfg.n_calibration, &mut rng)?;

    let ood_classes: Vec<usize> = (0..cfg.n_ood).map(|i| i % cfg.k).collect();
    let bases: Vec<OodBase> = ood_classes
        .iter()
        .map(|&c| draw_ood_base(cfg, &layout.spikes[c], &mut rng))
        .collect();
    let spike_gain = match cfg.spike_gain {
        Some(g) => g,
        None => tune_gain(&head, &bases, mean_energy(&head, &id_features)?)?,
    };

    let mut ood_features = Vec::with_capacity(cfg.n_ood);
    for (base, &c) in bases.iter().zip(&ood_classes) {
        let first = base.features(spike_gain);
        let f = if ood_ok(&head, &first, c, cfg.s)? {
            first
        } else {
            retry("OOD sparsity (top-s contribution mass >= 0.8)", || {
                let f = draw_ood_base(cfg, &layout.spikes[c], &mut rng).features(spike_gain);
                Ok(ood_ok(&head, &f, c, cfg.s)?.then_some(f))
            })?
        };
        ood_features.push(f);
    }

    let wrap = |v: Vec<Vec<f64>>| v.into_iter().map(Vector::from_raw).collect::<Vec<_>>();
    Ok(SynthDataset {
        config: cfg.clone(),
        head,
        spike_gain,
        id_features: wrap(id_features),
        id_classes,
        calibration_features: wrap(calibration_features),
        ood_features: wrap(ood_features),
        ood_classes,
        supports: layout.supports,
        spikes: layout.spikes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DropStats {
    pub mean: f64,
    pub max: f64,
    /// Mean of `drop / y_c`.
    pub mean_relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryReport {
    pub id: DropStats,
    pub ood: DropStats,
    pub k: usize,
    /// ID samples whose drop exceeds `(2/M)·k·Σ_Ω |g_j F_j|`.
    pub id_bound_violation_fraction: f64,
    /// OOD samples whose drop reaches 0.8 of the spike contribution.
    pub ood_spike_capture_fraction: f64,
    /// Per-sample exact drops, in dataset order.
    #[serde(skip)]
    pub id_drops: Vec<f64>,
    #[serde(skip)]
    pub ood_drops: Vec<f64>,
}

struct SampleDrop {
    drop: f64,
    relative: f64,
    g: Vec<f64>,
    f: Vec<f64>,
}

fn sample_drop(head: &HeadModel, plan: &ShortCircuitPlan, f: &[f64]) -> Result<SampleDrop> {
    let (_, bundle) = head.analyze(f)?;
    let out = run_plan(plan, head, f)?;
    let after = head.forward(&out.f_prime)?[bundle.class];
    let before = bundle.y[bundle.class];
    let drop = before - after;
    Ok(SampleDrop {
        drop,
        relative: drop / before,
        g: bundle.g.into_inner(),
        f: f.to_vec(),
    })
}

fn stats(drops: &[SampleDrop]) -> DropStats {
    let n = drops.len() as f64;
    DropStats {
        mean: drops.iter().map(|d| d.drop).sum::<f64>() / n,
        max: drops.iter().fold(f64::NEG_INFINITY, |m, d| m.max(d.drop)),
        mean_relative: drops.iter().map(|d| d.relative).sum::<f64>() / n,
    }
}

/// Exact drop of the predicted logit under `plan` for both populations,
/// checked against the construction.
pub fn theory_check(ds: &SynthDataset, plan: &ShortCircuitPlan) -> Result<TheoryReport> {
    let head = &ds.head;
    let d = ds.config.d;
    let k = plan.strategy.budget.k(d);
    let m = ds.config.m as f64;

    let id: Vec<SampleDrop> = ds
        .id_features
        .iter()
        .map(|f| sample_drop(head, plan, f))
        .collect::<Result<_>>()?;
    let ood: Vec<SampleDrop> = ds
        .ood_features
        .iter()
        .map(|f| sample_drop(head, plan, f))
        .collect::<Result<_>>()?;

    let violations = id
        .iter()
        .zip(&ds.id_classes)
        .filter(|(s, &c)| {
            let mass: f64 = ds.supports[c].iter().map(|&i| (s.g[i] * s.f[i]).abs()).sum();
            s.drop > 2.0 / m * k as f64 * mass * (1.0 + 1e-12)
        })
        .count();
    let captured = ood
        .iter()
        .zip(&ds.ood_classes)
        .filter(|(s, &c)| {
            let spike: f64 = ds.spikes[c].iter().map(|&i| s.g[i] * s.f[i]).sum();
            s.drop >= OOD_MASS_FLOOR * spike
        })
        .count();

    Ok(TheoryReport {
        id: stats(&id),
        ood: stats(&ood),
        k,
        id_bound_violation_fraction: violations as f64 / id.len() as f64,
        ood_spike_capture_fraction: captured as f64 / ood.len() as f64,
        id_drops: id.iter().map(|s| s.drop).collect(),
        ood_drops: ood.iter().map(|s| s.drop).collect(),
    })
}
