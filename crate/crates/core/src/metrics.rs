//! Detection metrics and gradient concentration.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{GscError, Result};
use crate::head::HeadModel;
use crate::scoring::calibrate;

/// Scores of the two populations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredSet {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

impl ScoredSet {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Result<Self> {
        if id_scores.is_empty() {
            return Err(GscError::Empty("ID scores"));
        }
        if ood_scores.is_empty() {
            return Err(GscError::Empty("OOD scores"));
        }
        if let Some(position) = id_scores
            .iter()
            .chain(&ood_scores)
            .position(|s| !s.is_finite())
        {
            return Err(GscError::NonFinite { position });
        }
        Ok(ScoredSet {
            id_scores,
            ood_scores,
        })
    }
}

/// Fraction of OOD scores strictly above the ID threshold for `target_tpr`.
pub fn fpr_at_tpr(set: &ScoredSet, target_tpr: f64) -> Result<f64> {
    let t = calibrate(&set.id_scores, target_tpr)?;
    let passed = set.ood_scores.iter().filter(|&&s| s > t.tau).count();
    Ok(passed as f64 / set.ood_scores.len() as f64)
}

/// Probability that a random ID score beats a random OOD score, ties
/// counting one half. Mann-Whitney statistic with midranks.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let n_id = set.id_scores.len();
    let n_ood = set.ood_scores.len();
    if n_id == 0 || n_ood == 0 {
        return Err(GscError::Empty("auroc"));
    }
    let mut all: Vec<(f64, bool)> = set
        .id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(set.ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Ranks are 1-based; a run of ties from i to j-1 shares (i + j + 1) / 2.
    let mut rank_sum_id = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + j + 1) as f64 / 2.0;
        let ids = all[i..j].iter().filter(|e| e.1).count();
        rank_sum_id += midrank * ids as f64;
        i = j;
    }
    let u = rank_sum_id - (n_id * (n_id + 1)) as f64 / 2.0;
    Ok(u / (n_id as f64 * n_ood as f64))
}

/// Magnitudes sorted descending, prefix-summed: entry `k` is the mass of the
/// `k` largest, and the last entry is the total.
fn prefix_mass(g: &[f64]) -> Vec<f64> {
    let mut mags: Vec<f64> = g.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut prefix = Vec::with_capacity(mags.len() + 1);
    let mut acc = 0.0;
    prefix.push(0.0);
    for m in mags {
        acc += m;
        prefix.push(acc);
    }
    prefix
}

/// Share of `‖g‖₁` held by the `k` largest magnitudes.
pub fn topk_ratio(g: &[f64], k: usize) -> Result<f64> {
    Ok(topk_profile(g, &[k])?[0])
}

/// [`topk_ratio`] at several `k` from one sort.
pub fn topk_profile(g: &[f64], k_values: &[usize]) -> Result<Vec<f64>> {
    let d = g.len();
    if d == 0 {
        return Err(GscError::Empty("topk_ratio"));
    }
    if let Some(&k) = k_values.iter().find(|&&k| k == 0 || k > d) {
        return Err(GscError::Config(format!("k = {k} outside [1, {d}]")));
    }
    let prefix = prefix_mass(g);
    let total = prefix[d];
    if total == 0.0 {
        return Err(GscError::UndefinedRatio);
    }
    Ok(k_values.iter().map(|&k| prefix[k] / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationProfile {
    pub k_values: Vec<usize>,
    pub mean_ratio: Vec<f64>,
    /// Population standard deviation.
    pub std_ratio: Vec<f64>,
    pub n_samples: usize,
    /// Samples dropped for an all-zero gradient.
    pub excluded: usize,
    /// Ratios per included sample, in input order.
    #[serde(skip)]
    pub per_sample: Vec<Vec<f64>>,
}

/// TopKRatio of each sample's predicted-class gradient at every `k`.
pub fn concentration_profile<F: AsRef<[f64]> + Sync>(
    head: &HeadModel,
    samples: &[F],
    k_values: &[usize],
) -> Result<ConcentrationProfile> {
    if samples.is_empty() {
        return Err(GscError::Empty("concentration samples"));
    }
    if k_values.is_empty() {
        return Err(GscError::Empty("concentration k values"));
    }
    let mut ks = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();

    let results: Vec<Result<Option<Vec<f64>>>> = crate::parallel::install(|| {
        samples
            .par_iter()
            .map(|f| {
                let (_, bundle) = head.analyze(f.as_ref())?;
                match topk_profile(&bundle.g, &ks) {
                    Ok(r) => Ok(Some(r)),
                    Err(GscError::UndefinedRatio) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect()
    });
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut excluded = 0;
    for r in results {
        match r? {
            Some(v) => per_sample.push(v),
            None => excluded += 1,
        }
    }

    let n = per_sample.len();
    let mut mean_ratio = vec![f64::NAN; ks.len()];
    let mut std_ratio = vec![f64::NAN; ks.len()];
    if n > 0 {
        for j in 0..ks.len() {
            let (mean, std) = mean_std(per_sample.iter().map(|r| r[j]));
            mean_ratio[j] = mean;
            std_ratio[j] = std;
        }
    }
    Ok(ConcentrationProfile {
        k_values: ks,
        mean_ratio,
        std_ratio,
        n_samples: n,
        excluded,
        per_sample,
    })
}

/// Mean and population standard deviation.
pub(crate) fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Writes the ID and OOD profiles side by side. Both must share `k_values`.
pub fn write_concentration_csv<W: Write>(
    id: &ConcentrationProfile,
    ood: &ConcentrationProfile,
    out: W,
) -> Result<()> {
    if id.k_values != ood.k_values {
        return Err(GscError::Config("profiles use different k values".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "mean_id", "std_id", "mean_ood", "std_ood", "excluded"])?;
    for (j, k) in id.k_values.iter().enumerate() {
        w.write_record([
            k.to_string(),
            id.mean_ratio[j].to_string(),
            id.std_ratio[j].to_string(),
            ood.mean_ratio[j].to_string(),
            ood.std_ratio[j].to_string(),
            (id.excluded + ood.excluded).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub id_count: usize,
    pub ood_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramTable {
    pub bins: Vec<HistogramBin>,
}

impl HistogramTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for bin in &self.bins {
            w.serialize(bin)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Counts per label over shared, equal-width bins spanning both sets. When
/// every score is equal all of them land in the first bin.
pub fn export_histogram(set: &ScoredSet, bins: usize) -> Result<HistogramTable> {
    if bins < 2 {
        return Err(GscError::Config(format!("need at least 2 bins, got {bins}")));
    }
    let all = set.id_scores.iter().chain(&set.ood_scores);
    let lo = all.clone().fold(f64::INFINITY, |m, &v| m.min(v));
    let hi = all.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if !lo.is_finite() || !hi.is_finite() {
        return Err(GscError::Empty("histogram"));
    }
    let width = (hi - lo) / bins as f64;
    let bin_of = |s: f64| -> usize {
        if width == 0.0 {
            0
        } else {
            (((s - lo) / width).floor() as usize).min(bins - 1)
        }
    };
    let mut table: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            bin_lo: lo + i as f64 * width,
            bin_hi: if i + 1 == bins { hi } else { lo + (i + 1) as f64 * width },
            id_count: 0,
            ood_count: 0,
        })
        .collect();
    for &s in &set.id_scores {
        table[bin_of(s)].id_count += 1;
    }
    for &s in &set.ood_scores {
        table[bin_of(s)].ood_count += 1;
    }
    Ok(HistogramTable { bins: table })
}
