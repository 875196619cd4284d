//! Experimental protocol: learning/validation split, grid search over
//! network sizes, repeated replicates and median/IQR summaries.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cnn::{plug_in_classify, Architecture, ConvNet, Family, FeedForwardNet};
use crate::error::{config, domain, Error, Result};
use crate::exec::{derive_seed, rng_for, Exec};
use crate::grid::ImageGrid;
use crate::hmax::BoundRule;
use crate::synth::{generate_dataset, Dataset};
use crate::train::{fit, TrainConfig};

/// `(n_l, n_v)` with `n_l = floor(4n/5)`.
pub fn split(n: usize) -> Result<(usize, usize)> {
    if n < 5 {
        return config(format!("need at least 5 samples to split, got {n}"));
    }
    let nl = 4 * n / 5;
    Ok((nl, n - nl))
}

/// Fraction of misclassified items.
pub fn risk_from_predictions(predicted: &[u8], labels: &[u8]) -> Result<f64> {
    if labels.is_empty() {
        return domain("empty test set");
    }
    if predicted.len() != labels.len() {
        return config("prediction and label counts differ");
    }
    let wrong = predicted.iter().zip(labels).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Misclassification risk of the plug-in classifier built on `arch`.
pub fn empirical_risk(arch: &Architecture, images: &[ImageGrid], labels: &[u8], exec: Exec) -> Result<f64> {
    if images.is_empty() {
        return domain("empty test set");
    }
    let maker = arch.view_maker();
    let predicted = exec.try_map(images.len(), |i| -> Result<u8> {
        Ok(plug_in_classify(arch.forward_views(&maker.views(&images[i])?)?))
    })?;
    risk_from_predictions(&predicted, labels)
}

/// Sample quantile with linear interpolation between order statistics
/// (`h = (n - 1) p`, the usual "type 7" rule).
pub fn quantile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return domain("quantile of an empty sample");
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

pub fn median(values: &[f64]) -> Result<f64> {
    quantile(values, 0.5)
}

pub fn iqr(values: &[f64]) -> Result<f64> {
    Ok(quantile(values, 0.75)? - quantile(values, 0.25)?)
}

/// One point of the hyperparameter grid, ordered lexicographically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridPoint {
    pub l: usize,
    pub k: usize,
    pub ln: usize,
    pub t: usize,
}

/// Default branch counts per family.
pub fn default_t_grid(family: Family) -> Vec<usize> {
    match family {
        Family::F1 | Family::F2 => vec![4, 8],
        Family::F3 => vec![1, 2],
        Family::F4 => vec![8],
    }
}

/// Full grid `l x k x L_n x t`, sorted.
pub fn grid(ls: &[usize], ks: &[usize], lns: &[usize], ts: &[usize]) -> Vec<GridPoint> {
    let mut out = Vec::new();
    for &l in ls {
        for &k in ks {
            for &ln in lns {
                for &t in ts {
                    out.push(GridPoint { l, k, ln, t });
                }
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

/// Untrained network of the given family and size: `L = L_n * l` layers of
/// `k` channels; block `r` of `L_n` layers uses filters of size
/// `1{r > 2} 2^(r-2) + 3`; bound `2^(l-1) - (l-1)`.
pub fn experiment_architecture(family: Family, lambda: usize, p: GridPoint) -> Result<Architecture> {
    if p.l == 0 || p.k == 0 || p.ln == 0 || p.t == 0 {
        return config("grid values must be positive");
    }
    let mut filters = Vec::with_capacity(p.l * p.ln);
    for r in 1..=p.l {
        let m = if r > 2 { (1usize << (r - 2)) + 3 } else { 3 };
        filters.extend(std::iter::repeat_n(m, p.ln));
    }
    let channels = vec![p.k; filters.len()];
    let bound = BoundRule::Experiment.bound(p.l);
    let branch = ConvNet::zeros(&channels, &filters, bound)?;
    let depth = (p.t as f64).log2().ceil() as usize;
    let arch = match family {
        Family::F4 => Architecture { family, input_lambda: lambda, rotations: p.t, branches: vec![branch], head: None },
        _ => Architecture {
            family,
            input_lambda: lambda,
            rotations: 0,
            branches: vec![branch; p.t],
            head: (family == Family::F1).then(|| FeedForwardNet::uniform(p.t, depth, 3 * p.t)),
        },
    };
    arch.check()?;
    Ok(arch)
}

/// Validation outcome of one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub replicate: usize,
    pub l: usize,
    pub k: usize,
    pub ln: usize,
    pub t: usize,
    pub val_risk: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub chosen: GridPoint,
    pub val_risk: f64,
    pub table: Vec<AuditRow>,
    pub arch: Architecture,
}

/// Trains every grid point on the learning part of `data`, keeps the one
/// with the smallest validation risk (ties: smallest grid point) and
/// retrains it on all of `data`. Grid point `c` trains from the seed
/// `(seed, replicate, 2, c)` in both fits, so the retrained network starts
/// from the initialization that was validated.
pub fn model_select(
    family: Family,
    data: &Dataset,
    points: &[GridPoint],
    train: &TrainConfig,
    seed: u64,
    replicate: usize,
    exec: Exec,
) -> Result<Selection> {
    if points.is_empty() {
        return config("empty parameter grid");
    }
    let mut points = points.to_vec();
    points.sort();
    let (nl, _) = split(data.len())?;
    let learn = data.select(&(0..nl).collect::<Vec<_>>());
    let valid = data.select(&(nl..data.len()).collect::<Vec<_>>());
    let cfg_for = |c: usize| TrainConfig { seed: derive_seed(seed, &[replicate as u64, 2, c as u64]), ..train.clone() };
    let scores = exec.map(points.len(), |c| -> Result<f64> {
        let tpl = experiment_architecture(family, data.lambda, points[c])?;
        let cfg = cfg_for(c);
        let fitted = fit(&tpl, &learn.images, &learn.labels, &cfg, exec)?;
        empirical_risk(&fitted.arch, &valid.images, &valid.labels, exec)
    });
    let mut table = Vec::with_capacity(points.len());
    let mut best: Option<(f64, usize)> = None;
    for (c, (p, s)) in points.iter().zip(&scores).enumerate() {
        let (val_risk, status) = match s {
            Ok(r) => (Some(*r), "ok".to_string()),
            Err(e) => (None, e.to_string()),
        };
        if let Some(r) = val_risk {
            if best.is_none_or(|(b, _)| r < b) {
                best = Some((r, c));
            }
        }
        table.push(AuditRow { replicate, l: p.l, k: p.k, ln: p.ln, t: p.t, val_risk, status });
    }
    let Some((val_risk, c)) = best else {
        return Err(Error::Experiment(format!("every grid point failed in replicate {replicate}")));
    };
    let chosen = points[c];
    let tpl = experiment_architecture(family, data.lambda, chosen)?;
    let arch = fit(&tpl, &data.images, &data.labels, &cfg_for(c), exec)?.arch;
    Ok(Selection { chosen, val_risk, table, arch })
}

/// Where replicate data comes from.
#[derive(Clone, Debug)]
pub enum DataSource {
    /// Fresh rotated-squares scenes for every replicate.
    Synthetic,
    /// Random disjoint training and test draws from a fixed pool.
    Pool(Dataset),
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub family: Family,
    pub n: usize,
    pub lambda: usize,
    pub test_size: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub grid: Vec<GridPoint>,
    pub train: TrainConfig,
    pub data: DataSource,
    /// Write measured wall times; when off the column is 0 so reruns give identical bytes.
    pub record_timing: bool,
}

impl ExperimentConfig {
    /// Full grid for `family` with default replicates and test size.
    pub fn new(family: Family, n: usize, lambda: usize, seed: u64) -> Self {
        Self {
            family,
            n,
            lambda,
            test_size: 10_000,
            repetitions: 20,
            seed,
            grid: grid(&[2, 3], &[2, 4], &[1, 2], &default_t_grid(family)),
            train: TrainConfig::default(),
            data: DataSource::Synthetic,
            record_timing: true,
        }
    }

    pub fn check(&self) -> Result<()> {
        split(self.n)?;
        if self.grid.is_empty() || self.repetitions == 0 || self.test_size == 0 {
            return config("grid, repetitions and test size must be non-empty");
        }
        if let DataSource::Pool(d) = &self.data {
            if d.lambda != self.lambda {
                return config(format!("data resolution {} differs from {}", d.lambda, self.lambda));
            }
            if d.len() <= self.n {
                return config(format!("pool of {} images cannot hold {} training images and a test set", d.len(), self.n));
            }
        }
        self.train.check()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub family: Family,
    pub replicate: usize,
    pub chosen_l: usize,
    pub chosen_k: usize,
    #[serde(rename = "chosen_Ln")]
    pub chosen_ln: usize,
    pub chosen_t: usize,
    pub val_risk: f64,
    pub test_risk: f64,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub family: Family,
    pub median: f64,
    pub iqr: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub runs: Vec<RunResult>,
    pub audit: Vec<AuditRow>,
    pub summary: Summary,
}

fn replicate_data(cfg: &ExperimentConfig, r: usize, exec: Exec) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Synthetic => Ok((
            generate_dataset(cfg.n, cfg.lambda, derive_seed(cfg.seed, &[r as u64, 0]), exec)?,
            generate_dataset(cfg.test_size, cfg.lambda, derive_seed(cfg.seed, &[r as u64, 1]), exec)?,
        )),
        DataSource::Pool(pool) => {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            idx.shuffle(&mut rng_for(cfg.seed, &[r as u64, 0]));
            let test_end = (cfg.n + cfg.test_size).min(pool.len());
            Ok((pool.select(&idx[..cfg.n]), pool.select(&idx[cfg.n..test_end])))
        }
    }
}

fn run_replicate(cfg: &ExperimentConfig, r: usize, exec: Exec) -> Result<(RunResult, Vec<AuditRow>)> {
    let start = Instant::now();
    let (train, test) = replicate_data(cfg, r, exec)?;
    let sel = model_select(cfg.family, &train, &cfg.grid, &cfg.train, cfg.seed, r, exec)?;
    let test_risk = empirical_risk(&sel.arch, &test.images, &test.labels, exec)?;
    let p = sel.chosen;
    let wall_ms = if cfg.record_timing { start.elapsed().as_millis() } else { 0 };
    let run = RunResult {
        family: cfg.family,
        replicate: r,
        chosen_l: p.l,
        chosen_k: p.k,
        chosen_ln: p.ln,
        chosen_t: p.t,
        val_risk: sel.val_risk,
        test_risk,
        wall_ms,
    };
    Ok((run, sel.table))
}

/// Runs all replicates and summarises their test risks.
pub fn run_experiment(cfg: &ExperimentConfig, exec: Exec) -> Result<ExperimentResult> {
    cfg.check()?;
    let reps = exec.try_map(cfg.repetitions, |r| run_replicate(cfg, r, exec))?;
    let mut runs = Vec::with_capacity(reps.len());
    let mut audit = Vec::new();
    for (run, table) in reps {
        runs.push(run);
        audit.extend(table);
    }
    let risks: Vec<f64> = runs.iter().map(|r| r.test_risk).collect();
    let summary = Summary { family: cfg.family, median: median(&risks)?, iqr: iqr(&risks)? };
    Ok(ExperimentResult { runs, audit, summary })
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-replicate results.
pub fn write_results(path: &Path, runs: &[RunResult]) -> Result<()> {
    write_rows(path, runs)
}

/// `family,median,iqr`; the IQR uses linear-interpolation (type 7) quartiles.
pub fn write_summary(path: &Path, summaries: &[Summary]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{SUMMARY_NOTE}")?;
    let mut w = csv::Writer::from_writer(file);
    for s in summaries {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// First line of summary files.
pub const SUMMARY_NOTE: &str = "# quartiles: linear interpolation between order statistics (type 7)";

/// One row per grid point per replicate.
pub fn write_audit(path: &Path, rows: &[AuditRow]) -> Result<()> {
    write_rows(path, rows)
}
