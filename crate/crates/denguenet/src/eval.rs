//! Chronological splitting, the three error metrics, repeated-seed
//! aggregation, the ablation grid, and plot-data emission.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{PredictionSeries, Split};

pub const DEFAULT_SEED_COUNT: usize = 3;

/// Chronological split fractions; test takes the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.8, val: 0.1 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train > 0.0 && self.val > 0.0 && self.train + self.val < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "split fractions must be positive with train+val < 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Floor boundaries into (train end, val end).
    pub fn boundaries(&self, n: usize) -> Result<(usize, usize)> {
        self.validate()?;
        if n < 10 {
            return Err(Error::TooFewSamples { need: 10, got: n });
        }
        let a = (self.train * n as f64).floor() as usize;
        let b = ((self.train + self.val) * n as f64).floor() as usize;
        if a == 0 || b <= a || b >= n {
            return Err(Error::TooFewSamples { need: 10, got: n });
        }
        Ok((a, b))
    }
}

/// Three contiguous, disjoint, exhaustive sublists in the original order.
pub fn chrono_split<'a, T>(samples: &'a [T], spec: &SplitSpec) -> Result<(&'a [T], &'a [T], &'a [T])> {
    let (a, b) = spec.boundaries(samples.len())?;
    Ok((&samples[..a], &samples[a..b], &samples[b..]))
}

/// Per-sample split labels in chronological order.
pub fn split_labels(n: usize, spec: &SplitSpec) -> Result<Vec<Split>> {
    let (a, b) = spec.boundaries(n)?;
    Ok((0..n)
        .map(|i| {
            if i < a {
                Split::Train
            } else if i < b {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect())
}

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(Error::MetricInput { y_len: y.len(), y_hat_len: y_hat.len() });
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (b - a).abs()).sum::<f64>() / y.len() as f64)
}

/// Symmetric mean absolute percentage error in percent, bounded [0, 200].
/// A term with y = y_hat = 0 contributes zero.
pub fn smape(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let sum: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(&a, &p)| {
            let denom = a.abs() + p.abs();
            if denom == 0.0 {
                0.0
            } else {
                2.0 * (p - a).abs() / denom
            }
        })
        .sum();
    Ok(100.0 * sum / y.len() as f64)
}

/// Root mean squared error.
pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let ms = y.iter().zip(y_hat).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() / y.len() as f64;
    Ok(ms.sqrt())
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    assert!(!values.is_empty());
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}\u{b1}{:.2}", self.mean, self.std)
    }
}

/// Metrics of one seed's run on the test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub mae: f64,
    pub smape: f64,
    pub rmse: f64,
    pub n_test: usize,
}

impl SeedMetrics {
    pub fn from_series(seed: u64, series: &PredictionSeries) -> Result<SeedMetrics> {
        let test: Vec<&crate::forecaster::PredictionPoint> =
            series.points.iter().filter(|p| p.split == Split::Test).collect();
        let y: Vec<f64> = test.iter().map(|p| p.y_true).collect();
        let y_hat: Vec<f64> = test.iter().map(|p| p.y_hat).collect();
        Ok(SeedMetrics {
            seed,
            mae: mae(&y, &y_hat)?,
            smape: smape(&y, &y_hat)?,
            rmse: rmse(&y, &y_hat)?,
            n_test: y.len(),
        })
    }
}

/// One report row: mean +/- population std over the seed runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub region: String,
    pub variant: String,
    pub mae: Option<MeanStd>,
    pub smape: Option<MeanStd>,
    pub rmse: Option<MeanStd>,
    pub n_test: usize,
    pub seeds: Vec<u64>,
    pub complete: bool,
    pub failures: Vec<(u64, String)>,
}

/// Runs the per-seed pipeline and aggregates. A failing seed marks the row
/// incomplete but keeps the partial results.
pub fn evaluate_repeated(
    region: &str,
    variant: &str,
    seeds: &[u64],
    mut runner: impl FnMut(u64) -> Result<SeedMetrics>,
) -> MetricsRow {
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for &seed in seeds {
        match runner(seed) {
            Ok(m) => ok.push(m),
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    let agg = |f: fn(&SeedMetrics) -> f64| -> Option<MeanStd> {
        if ok.is_empty() {
            None
        } else {
            Some(mean_std(&ok.iter().map(f).collect::<Vec<_>>()))
        }
    };
    MetricsRow {
        region: region.to_string(),
        variant: variant.to_string(),
        mae: agg(|m| m.mae),
        smape: agg(|m| m.smape),
        rmse: agg(|m| m.rmse),
        n_test: ok.first().map_or(0, |m| m.n_test),
        seeds: seeds.to_vec(),
        complete: failures.is_empty(),
        failures,
    }
}

/// Feature-extractor combinations evaluated in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExtractorSet {
    Vit,
    FEng,
    Both,
}

impl std::fmt::Display for ExtractorSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ExtractorSet::Vit => "ViT",
            ExtractorSet::FEng => "FEng",
            ExtractorSet::Both => "ViT+FEng",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub mae: MeanStd,
    pub smape: MeanStd,
    pub rmse: MeanStd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub extractors: ExtractorSet,
    pub csr: bool,
    /// One cell per region; `None` marks an unavailable cache.
    pub cells: Vec<Option<AblationCell>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub regions: Vec<String>,
    pub rows: Vec<AblationRow>,
}

/// Six configurations (three extractor sets, CSR on/off) across the
/// regions. The runner returns the seed-aggregated metrics for one cell;
/// a missing feature cache is reported as an unavailable cell.
pub fn ablation_grid(
    regions: &[String],
    mut runner: impl FnMut(&str, ExtractorSet, bool) -> Result<AblationCell>,
) -> AblationTable {
    let layout = [
        (ExtractorSet::Vit, true),
        (ExtractorSet::Vit, false),
        (ExtractorSet::FEng, true),
        (ExtractorSet::FEng, false),
        (ExtractorSet::Both, true),
        (ExtractorSet::Both, false),
    ];
    let rows = layout
        .into_iter()
        .map(|(extractors, csr)| AblationRow {
            extractors,
            csr,
            cells: regions
                .iter()
                .map(|r| runner(r, extractors, csr).ok())
                .collect(),
        })
        .collect();
    AblationTable { regions: regions.to_vec(), rows }
}

impl AblationTable {
    /// The averaged comparison: per extractor set with CSR, the mean of
    /// each metric across available regions.
    pub fn averaged_with_csr(&self) -> Vec<(ExtractorSet, f64, f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.csr)
            .map(|row| {
                let present: Vec<&AblationCell> = row.cells.iter().flatten().collect();
                let avg = |f: fn(&AblationCell) -> f64| -> f64 {
                    if present.is_empty() {
                        f64::NAN
                    } else {
                        present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64
                    }
                };
                (
                    row.extractors,
                    avg(|c| c.mae.mean),
                    avg(|c| c.smape.mean),
                    avg(|c| c.rmse.mean),
                )
            })
            .collect()
    }
}

/// CSV with one ground-truth column and one prediction column per variant,
/// aligned on epi weeks, preceded by split-boundary marker comments.
pub fn emit_plot_data(series: &[&PredictionSeries]) -> Result<String> {
    let first = series.first().ok_or_else(|| {
        Error::InvalidConfig("plot data needs at least one variant series".to_string())
    })?;
    for s in series {
        if s.points.len() != first.points.len()
            || s.points
                .iter()
                .zip(&first.points)
                .any(|(a, b)| a.epiweek != b.epiweek || a.split != b.split)
        {
            return Err(Error::MisalignedSeries);
        }
    }

    let mut out = String::new();
    let val_start = first.points.iter().find(|p| p.split == Split::Val);
    let test_start = first.points.iter().find(|p| p.split == Split::Test);
    if let Some(p) = val_start {
        writeln!(out, "# val_start={}", p.epiweek).expect("string write");
    }
    if let Some(p) = test_start {
        writeln!(out, "# test_start={}", p.epiweek).expect("string write");
    }
    write!(out, "epiweek,y_true").expect("string write");
    for s in series {
        write!(out, ",yhat_{}", s.variant).expect("string write");
    }
    out.push('\n');
    for (i, p) in first.points.iter().enumerate() {
        write!(out, "{},{}", p.epiweek, p.y_true).expect("string write");
        for s in series {
            write!(out, ",{}", s.points[i].y_hat).expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}
