//! Experiment grid: every (horizon, seed) pair is trained in both stages,
//! scored on the test split and written to its own artifact directory.
//!
//! ```text
//! <out>/
//!   summary.csv          per-horizon mean ± std over seeds, then Avg and Me rows
//!   metrics.csv / .jsonl every record of every grid point
//!   failures.txt         one line per aborted grid point
//!   <dataset>_L96_O96_s0/
//!     config.txt  manifest.txt  checkpoint.bin
//!     metrics.csv  metrics.jsonl  loss_stage1.csv  loss_stage2.csv
//!     masking.csv         only with a positive mask fraction
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::checkpoint::{self, format_kv};
use crate::cte::CteFrame;
use crate::data::{load_csv, MaskMode, Split, SplitScheme, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::model::{CvtnModel, ModelConfig};
use crate::revin;
use crate::trainer::{evaluate, train, EpochLosses, EvalOptions, Metrics, StageData, StageReport, TrainConfig, TrainReport};

/// Architecture settings shared by every grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelHyper {
    pub cve_layers: usize,
    pub heads: usize,
    /// Defaults to `4·L`.
    pub d_ff: Option<usize>,
    pub dropout: f64,
    pub trend: bool,
    pub activation: Activation,
    pub cte_layers: usize,
    pub growth: usize,
    pub kernel: usize,
    pub cte_frame: CteFrame,
}

impl Default for ModelHyper {
    fn default() -> Self {
        let d = ModelConfig::new(96, 96, 1);
        ModelHyper {
            cve_layers: d.cve_layers,
            heads: d.heads,
            d_ff: None,
            dropout: d.dropout,
            trend: d.trend,
            activation: d.activation,
            cte_layers: d.cte_layers,
            growth: d.growth,
            kernel: d.kernel,
            cte_frame: d.cte_frame,
        }
    }
}

impl ModelHyper {
    pub fn config(&self, lookback: usize, horizon: usize, n_vars: usize) -> ModelConfig {
        ModelConfig {
            lookback,
            horizon,
            n_vars,
            cve_layers: self.cve_layers,
            heads: self.heads,
            d_ff: self.d_ff.unwrap_or(4 * lookback),
            dropout: self.dropout,
            trend: self.trend,
            activation: self.activation,
            cte_layers: self.cte_layers,
            growth: self.growth,
            kernel: self.kernel,
            cte_frame: self.cte_frame,
            revin_eps: revin::DEFAULT_EPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: PathBuf,
    pub splits: SplitScheme,
    pub lookback: usize,
    pub horizons: Vec<usize>,
    pub model: ModelHyper,
    /// Its `seed` is replaced by each entry of `seeds`.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub mask_fraction: f64,
    pub mask_mode: MaskMode,
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn new(data: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            data: data.into(),
            splits: SplitScheme::RATIO_DEFAULT,
            lookback: 96,
            horizons: vec![96, 192, 336, 720],
            model: ModelHyper::default(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            mask_fraction: 0.0,
            mask_mode: MaskMode::Random,
            out: out.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::Config("horizons must be a non-empty list of positive lengths".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_fraction) {
            return Err(Error::Config(format!("mask fraction {} is outside [0, 1]", self.mask_fraction)));
        }
        self.train.validate()
    }

    pub fn dataset_name(&self) -> String {
        self.data
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "data".into())
    }
}

/// Flat snapshot of one grid point, sufficient to rerun it.
pub fn snapshot(cfg: &ExperimentConfig, model: &ModelConfig, train: &TrainConfig) -> Vec<(String, String)> {
    let splits = match cfg.splits {
        SplitScheme::Ratio { train, val, test } => format!("ratio:{train}/{val}/{test}"),
        SplitScheme::EttMonths {
            train_months,
            val_months,
            test_months,
            steps_per_day,
        } => format!("ett-months:{train_months}/{val_months}/{test_months}/{steps_per_day}"),
    };
    let mode = match cfg.mask_mode {
        MaskMode::Random => "random",
        MaskMode::Contiguous => "contiguous",
    };
    let mut kv: Vec<(String, String)> = [
        ("data", cfg.data.display().to_string()),
        ("splits", splits),
        ("mask_fraction", cfg.mask_fraction.to_string()),
        ("mask_mode", mode.to_string()),
        ("seed", train.seed.to_string()),
        ("epochs_stage1", train.epochs_stage1.to_string()),
        ("epochs_stage2", train.epochs_stage2.to_string()),
        ("patience", train.patience.to_string()),
        ("batch", train.batch_size.to_string()),
        ("lr", train.adam.lr.to_string()),
        ("beta1", train.adam.beta1.to_string()),
        ("beta2", train.adam.beta2.to_string()),
        ("adam_eps", train.adam.eps.to_string()),
        ("weight_decay", train.adam.weight_decay.to_string()),
        ("track_test", train.track_test.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    kv.extend(model.to_kv());
    kv
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dataset: String,
    pub horizon: usize,
    pub seed: u64,
    pub split: String,
    pub mask_fraction: f64,
    pub mse: f64,
    pub mae: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub horizon: usize,
    pub seed: u64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskingRow {
    pub horizon: usize,
    pub seed: u64,
    pub cve_only: bool,
    pub mse_unmasked: f64,
    pub mse_masked: f64,
}

impl MaskingRow {
    /// `mse_masked / mse_unmasked`.
    pub fn factor(&self) -> f64 {
        self.mse_masked / self.mse_unmasked
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub horizon: usize,
    pub seeds: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentSummary {
    pub records: Vec<MetricsRecord>,
    pub failures: Vec<Failure>,
    pub masking: Vec<MaskingRow>,
    pub rows: Vec<SummaryRow>,
    /// Avg and Me of the per-horizon mean MSE and MAE, when any horizon finished.
    pub mse: Option<Aggregate>,
    pub mae: Option<Aggregate>,
}

impl ExperimentSummary {
    pub fn all_completed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub avg: f64,
    pub median: f64,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Sample standard deviation; 0 for a single value.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Avg and Me over horizons. Panics on an empty slice.
pub fn aggregate(xs: &[f64]) -> Aggregate {
    assert!(!xs.is_empty(), "aggregate of an empty list");
    Aggregate {
        avg: mean(xs),
        median: median(xs),
    }
}

/// One CSV per stage: `epoch,train_loss,val_loss,test_loss,stage`.
/// `test_loss` is empty when the test split was not tracked.
pub fn write_loss_curve<W: Write>(report: &StageReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "train_loss", "val_loss", "test_loss", "stage"])?;
    for e in &report.epochs {
        out.write_record([
            e.epoch.to_string(),
            e.train.to_string(),
            e.val.to_string(),
            e.test.map(|t| t.to_string()).unwrap_or_default(),
            report.stage.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_loss_curve<R: Read>(r: R) -> Result<Vec<(u8, EpochLosses)>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| -> Result<&str> {
            rec.get(c).ok_or_else(|| Error::Parse {
                row: i,
                col: c,
                msg: "missing field".into(),
            })
        };
        let num = |c: usize| -> Result<f64> {
            field(c)?.parse().map_err(|_| Error::Parse {
                row: i,
                col: c,
                msg: format!("'{}' is not a number", rec.get(c).unwrap_or("")),
            })
        };
        let bad = |c: usize| Error::Parse {
            row: i,
            col: c,
            msg: "not an integer".into(),
        };
        let test = match field(3)? {
            "" => None,
            _ => Some(num(3)?),
        };
        out.push((
            field(4)?.parse().map_err(|_| bad(4))?,
            EpochLosses {
                epoch: field(0)?.parse().map_err(|_| bad(0))?,
                train: num(1)?,
                val: num(2)?,
                test,
            },
        ));
    }
    Ok(out)
}

/// Writes `loss_stage1.csv` and `loss_stage2.csv` into `dir`.
pub fn emit_loss_curves(report: &TrainReport, dir: &Path) -> Result<[PathBuf; 2]> {
    let p1 = dir.join("loss_stage1.csv");
    let p2 = dir.join("loss_stage2.csv");
    write_loss_curve(&report.stage1, BufWriter::new(File::create(&p1)?))?;
    write_loss_curve(&report.stage2, BufWriter::new(File::create(&p2)?))?;
    Ok([p1, p2])
}

fn write_records(records: &[MetricsRecord], dir: &Path) -> Result<()> {
    let mut csv_out = csv::Writer::from_path(dir.join("metrics.csv"))?;
    let mut jsonl = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    for r in records {
        csv_out.serialize(r)?;
        serde_json::to_writer(&mut jsonl, r)?;
        jsonl.write_all(b"\n")?;
    }
    csv_out.flush()?;
    jsonl.flush()?;
    Ok(())
}

fn write_masking(rows: &[MaskingRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["horizon", "seed", "model", "mse_unmasked", "mse_masked", "factor"])?;
    for r in rows {
        w.write_record([
            r.horizon.to_string(),
            r.seed.to_string(),
            (if r.cve_only { "cve_only" } else { "full" }).to_string(),
            r.mse_unmasked.to_string(),
            r.mse_masked.to_string(),
            r.factor().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn grid_dir_name(dataset: &str, lookback: usize, horizon: usize, seed: u64) -> String {
    format!("{dataset}_L{lookback}_O{horizon}_s{seed}")
}

struct GridResult {
    records: Vec<MetricsRecord>,
    masking: Vec<MaskingRow>,
}

fn run_grid_point(cfg: &ExperimentConfig, ds: &TimeSeriesDataset, horizon: usize, seed: u64, dir: &Path) -> Result<GridResult> {
    let start = Instant::now();
    fs::create_dir_all(dir)?;
    let mcfg = cfg.model.config(cfg.lookback, horizon, ds.n_vars());
    let tcfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    fs::write(dir.join("config.txt"), format_kv(&snapshot(cfg, &mcfg, &tcfg)))?;

    let mut model = CvtnModel::new(mcfg, seed)?;
    let data = StageData {
        train: ds.windows(cfg.lookback, horizon, Split::Train)?,
        val: ds.windows(cfg.lookback, horizon, Split::Val)?,
        test: Some(ds.windows(cfg.lookback, horizon, Split::Test)?),
    };
    let test = data.test.unwrap();
    let report = train(&mut model, &data, &tcfg)?;
    emit_loss_curves(&report, dir)?;
    checkpoint::save(&model, dir.join("checkpoint.bin"))?;
    checkpoint::write_manifest(&model, BufWriter::new(File::create(dir.join("manifest.txt"))?))?;

    let opts = EvalOptions {
        mask_seed: seed,
        mask_mode: cfg.mask_mode,
        ..EvalOptions::default()
    };
    let seconds = start.elapsed().as_secs_f64();
    let record = |split: &str, fraction: f64, m: Metrics| MetricsRecord {
        dataset: cfg.dataset_name(),
        horizon,
        seed,
        split: split.to_string(),
        mask_fraction: fraction,
        mse: m.mse,
        mae: m.mae,
        epochs_stage1: report.stage1.stop_epoch,
        epochs_stage2: report.stage2.stop_epoch,
        seconds,
    };
    let full = evaluate(&model, &test, &opts)?;
    let mut records = vec![record("test", 0.0, full)];
    let mut masking = Vec::new();
    if cfg.mask_fraction > 0.0 {
        let masked = EvalOptions {
            mask_fraction: cfg.mask_fraction,
            ..opts
        };
        let full_masked = evaluate(&model, &test, &masked)?;
        records.push(record("test", cfg.mask_fraction, full_masked));
        let cve = evaluate(&model, &test, &EvalOptions { cve_only: true, ..opts })?;
        let cve_masked = evaluate(&model, &test, &EvalOptions { cve_only: true, ..masked })?;
        masking.push(MaskingRow {
            horizon,
            seed,
            cve_only: true,
            mse_unmasked: cve.mse,
            mse_masked: cve_masked.mse,
        });
        masking.push(MaskingRow {
            horizon,
            seed,
            cve_only: false,
            mse_unmasked: full.mse,
            mse_masked: full_masked.mse,
        });
        write_masking(&masking, &dir.join("masking.csv"))?;
    }
    write_records(&records, dir)?;
    Ok(GridResult { records, masking })
}

fn write_summary(summary: &ExperimentSummary, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["horizon", "seeds", "mse_mean", "mse_std", "mae_mean", "mae_std"])?;
    for r in &summary.rows {
        w.write_record([
            r.horizon.to_string(),
            r.seeds.to_string(),
            r.mse_mean.to_string(),
            r.mse_std.to_string(),
            r.mae_mean.to_string(),
            r.mae_std.to_string(),
        ])?;
    }
    if let (Some(mse), Some(mae)) = (summary.mse, summary.mae) {
        let seeds = summary.rows.iter().map(|r| r.seeds).min().unwrap_or(0).to_string();
        w.write_record(["Avg", &seeds, &mse.avg.to_string(), "", &mae.avg.to_string(), ""])?;
        w.write_record(["Me", &seeds, &mse.median.to_string(), "", &mae.median.to_string(), ""])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-horizon statistics over seeds of the unmasked test records.
pub fn summarize(records: &[MetricsRecord], horizons: &[usize]) -> (Vec<SummaryRow>, Option<Aggregate>, Option<Aggregate>) {
    let rows: Vec<SummaryRow> = horizons
        .iter()
        .filter_map(|&h| {
            let (mse, mae): (Vec<f64>, Vec<f64>) = records
                .iter()
                .filter(|r| r.horizon == h && r.split == "test" && r.mask_fraction == 0.0)
                .map(|r| (r.mse, r.mae))
                .unzip();
            (!mse.is_empty()).then(|| SummaryRow {
                horizon: h,
                seeds: mse.len(),
                mse_mean: mean(&mse),
                mse_std: std_dev(&mse),
                mae_mean: mean(&mae),
                mae_std: std_dev(&mae),
            })
        })
        .collect();
    if rows.is_empty() {
        return (rows, None, None);
    }
    let mse: Vec<f64> = rows.iter().map(|r| r.mse_mean).collect();
    let mae: Vec<f64> = rows.iter().map(|r| r.mae_mean).collect();
    (rows, Some(aggregate(&mse)), Some(aggregate(&mae)))
}

/// Prepares the z-scored dataset described by `cfg`.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<TimeSeriesDataset> {
    load_csv(&cfg.data)?.split(cfg.splits)?.zscore()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    run_on_dataset(cfg, &ds)
}

/// As [`run_experiment`] on an already split and normalized dataset.
pub fn run_on_dataset(cfg: &ExperimentConfig, ds: &TimeSeriesDataset) -> Result<ExperimentSummary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    let name = cfg.dataset_name();
    let mut summary = ExperimentSummary::default();
    for &horizon in &cfg.horizons {
        for &seed in &cfg.seeds {
            let dir = cfg.out.join(grid_dir_name(&name, cfg.lookback, horizon, seed));
            log::info!("grid point horizon {horizon} seed {seed} -> {}", dir.display());
            match run_grid_point(cfg, ds, horizon, seed, &dir) {
                Ok(r) => {
                    summary.records.extend(r.records);
                    summary.masking.extend(r.masking);
                }
                Err(e) => {
                    log::error!("grid point horizon {horizon} seed {seed} failed: {e}");
                    summary.failures.push(Failure {
                        horizon,
                        seed,
                        message: e.to_string(),
                    });
                }
            }
        }
    }
    let (rows, mse, mae) = summarize(&summary.records, &cfg.horizons);
    summary.rows = rows;
    summary.mse = mse;
    summary.mae = mae;

    write_records(&summary.records, &cfg.out)?;
    write_summary(&summary, &cfg.out.join("summary.csv"))?;
    let mut failures = BufWriter::new(File::create(cfg.out.join("failures.txt"))?);
    for f in &summary.failures {
        writeln!(failures, "horizon={} seed={} error={}", f.horizon, f.seed, f.message)?;
    }
    failures.flush()?;
    if !summary.masking.is_empty() {
        write_masking(&summary.masking, &cfg.out.join("masking.csv"))?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregation_of_published_column() {
        let a = aggregate(&[0.132, 0.154, 0.170, 0.187]);
        assert!((a.avg - 0.16075).abs() < 1e-12);
        assert!((a.median - 0.162).abs() < 1e-12);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(std_dev(&[1.0]), 0.0);
        assert!((std_dev(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-15);
    }

    fn report(n: usize, test: bool) -> StageReport {
        StageReport {
            stage: 2,
            epochs: (1..=n)
                .map(|e| EpochLosses {
                    epoch: e,
                    train: 1.0 / (e as f64 * 3.0),
                    val: 0.1 + 1e-17 * e as f64 + std::f64::consts::PI / e as f64,
                    test: test.then_some(e as f64 / 7.0),
                })
                .collect(),
            initial_val: 1.0,
            best_val: 0.1,
            best_epoch: 1,
            stop_epoch: n,
            early_stopped: false,
            best_checkpoint: String::new(),
            seconds: 0.0,
        }
    }

    #[test]
    fn loss_curves_round_trip_bitwise() {
        for (n, test) in [(10, false), (6, true)] {
            let r = report(n, test);
            let mut buf = Vec::new();
            write_loss_curve(&r, &mut buf).unwrap();
            let text = String::from_utf8(buf.clone()).unwrap();
            assert_eq!(text.lines().count(), n + 1);
            assert!(text.starts_with("epoch,train_loss,val_loss,test_loss,stage\n"));
            let back = read_loss_curve(&buf[..]).unwrap();
            assert_eq!(back.len(), n);
            for ((stage, e), want) in back.iter().zip(&r.epochs) {
                assert_eq!(*stage, 2);
                assert_eq!(e.train.to_bits(), want.train.to_bits());
                assert_eq!(e.val.to_bits(), want.val.to_bits());
                assert_eq!(e.test.map(f64::to_bits), want.test.map(f64::to_bits));
            }
        }
    }

    #[test]
    fn summary_averages_seeds_then_horizons() {
        let rec = |h, seed, mse| MetricsRecord {
            dataset: "d".into(),
            horizon: h,
            seed,
            split: "test".into(),
            mask_fraction: 0.0,
            mse,
            mae: mse / 2.0,
            epochs_stage1: 1,
            epochs_stage2: 1,
            seconds: 0.0,
        };
        let records = vec![rec(96, 0, 1.0), rec(96, 1, 3.0), rec(192, 0, 5.0), MetricsRecord { mask_fraction: 0.5, ..rec(192, 0, 99.0) }];
        let (rows, mse, mae) = summarize(&records, &[96, 192, 336]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].mse_mean, 2.0);
        assert_eq!(rows[1].seeds, 1);
        assert_eq!(mse.unwrap().avg, 3.5);
        assert_eq!(mae.unwrap().median, 1.75);
    }
}
