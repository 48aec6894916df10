//! Multivariate series loading, chronological splits, train-fitted z-score
//! normalization, sliding windows and history masking.

use std::fmt;
use std::io::Read;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row ranges of the three chronological splits: `[0, train_end)`,
/// `[train_end, val_end)`, `[val_end, test_end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
    pub test_end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitScheme {
    /// Fractions of the series; the validation split takes the remainder.
    Ratio { train: f64, val: f64, test: f64 },
    /// Calendar split counted in 30-day months of `steps_per_day` rows.
    EttMonths {
        train_months: usize,
        val_months: usize,
        test_months: usize,
        steps_per_day: usize,
    },
}

impl SplitScheme {
    pub const RATIO_DEFAULT: SplitScheme = SplitScheme::Ratio {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };

    pub fn ett_hourly() -> Self {
        SplitScheme::EttMonths {
            train_months: 12,
            val_months: 4,
            test_months: 4,
            steps_per_day: 24,
        }
    }

    pub fn ett_quarter_hourly() -> Self {
        SplitScheme::EttMonths {
            train_months: 12,
            val_months: 4,
            test_months: 4,
            steps_per_day: 96,
        }
    }

    pub fn bounds(&self, rows: usize) -> Result<SplitBounds> {
        let b = match *self {
            SplitScheme::Ratio { train, val, test } => {
                if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f))
                    || (train + val + test - 1.0).abs() > 1e-9
                {
                    return Err(Error::Config(format!(
                        "split ratios {train}/{val}/{test} must be in [0,1] and sum to 1"
                    )));
                }
                let n_train = (rows as f64 * train) as usize;
                let n_test = (rows as f64 * test) as usize;
                SplitBounds {
                    train_end: n_train,
                    val_end: rows - n_test,
                    test_end: rows,
                }
            }
            SplitScheme::EttMonths {
                train_months,
                val_months,
                test_months,
                steps_per_day,
            } => {
                let month = 30 * steps_per_day;
                let b = SplitBounds {
                    train_end: train_months * month,
                    val_end: (train_months + val_months) * month,
                    test_end: (train_months + val_months + test_months) * month,
                };
                if b.test_end > rows {
                    return Err(Error::Data(format!(
                        "month split needs {} rows, series has {rows}",
                        b.test_end
                    )));
                }
                b
            }
        };
        if !(0 < b.train_end && b.train_end < b.val_end && b.val_end < b.test_end) {
            return Err(Error::Data(format!(
                "degenerate split {b:?} for a series of {rows} rows"
            )));
        }
        Ok(b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Per-variable statistics fitted on the training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnMoments {
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    values: Vec<f64>,
    rows: usize,
    variable_names: Vec<String>,
    bounds: Option<SplitBounds>,
    stats: Option<ColumnMoments>,
}

impl TimeSeriesDataset {
    /// `values` is row-major `rows × names.len()`.
    pub fn new(values: Vec<f64>, variable_names: Vec<String>) -> Result<Self> {
        let c = variable_names.len();
        if c == 0 {
            return Err(Error::Data("series has no variables".into()));
        }
        if values.len() % c != 0 || values.is_empty() {
            return Err(Error::Data(format!(
                "{} values do not fill whole rows of {c} variables",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                row: i / c,
                col: i % c + 1,
                msg: "non-finite value".into(),
            });
        }
        Ok(TimeSeriesDataset {
            rows: values.len() / c,
            values,
            variable_names,
            bounds: None,
            stats: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn n_vars(&self) -> usize {
        self.variable_names.len()
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, row: usize, var: usize) -> f64 {
        self.values[row * self.n_vars() + var]
    }

    pub fn bounds(&self) -> Option<SplitBounds> {
        self.bounds
    }

    pub fn stats(&self) -> Option<&ColumnMoments> {
        self.stats.as_ref()
    }

    /// Row range of a split. History windows of val/test may start up to
    /// `lookback` rows before this range.
    pub fn split_range(&self, split: Split) -> Result<std::ops::Range<usize>> {
        let b = self
            .bounds
            .ok_or_else(|| Error::Contract("dataset has not been split".into()))?;
        Ok(match split {
            Split::Train => 0..b.train_end,
            Split::Val => b.train_end..b.val_end,
            Split::Test => b.val_end..b.test_end,
        })
    }

    pub fn split(mut self, scheme: SplitScheme) -> Result<Self> {
        self.bounds = Some(scheme.bounds(self.rows)?);
        Ok(self)
    }

    /// Fits per-variable mean and population std on the training rows and
    /// standardizes every row with them.
    pub fn zscore(mut self) -> Result<Self> {
        let train = self.split_range(Split::Train)?;
        let c = self.n_vars();
        let n = train.len() as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for (j, (m, s)) in mean.iter_mut().zip(&mut std).enumerate() {
            *m = train.clone().map(|r| self.values[r * c + j]).sum::<f64>() / n;
            let var = train
                .clone()
                .map(|r| (self.values[r * c + j] - *m).powi(2))
                .sum::<f64>()
                / n;
            *s = var.sqrt();
            if !(*s > 1e-12 * m.abs().max(1.0)) {
                return Err(Error::Data(format!(
                    "variable '{}' is constant on the training split",
                    self.variable_names[j]
                )));
            }
        }
        for (i, v) in self.values.iter_mut().enumerate() {
            let j = i % c;
            *v = (*v - mean[j]) / std[j];
        }
        self.stats = Some(ColumnMoments { mean, std });
        Ok(self)
    }

    /// Sliding windows (stride 1) whose targets lie entirely inside `split`.
    pub fn windows(&self, lookback: usize, horizon: usize, split: Split) -> Result<WindowSet<'_>> {
        if lookback == 0 || horizon == 0 {
            return Err(Error::Config("lookback and horizon must be positive".into()));
        }
        let range = self.split_range(split)?;
        let first = match split {
            Split::Train => 0,
            _ => range.start.checked_sub(lookback).ok_or_else(|| {
                Error::Data(format!(
                    "{split} split starts at row {} but lookback is {lookback}",
                    range.start
                ))
            })?,
        };
        let span = range.end - first;
        let needed = lookback + horizon;
        if span < needed {
            return Err(Error::Data(format!(
                "{split} split provides {span} rows, need at least {needed} (lookback {lookback} + horizon {horizon})"
            )));
        }
        Ok(WindowSet {
            data: self,
            lookback,
            horizon,
            first_origin: first,
            count: span - needed + 1,
        })
    }
}

/// Parses a CSV with a header row and a leading timestamp column.
pub fn load_csv(path: impl AsRef<Path>) -> Result<TimeSeriesDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file)
}

pub fn read_csv<R: Read>(mut reader: R) -> Result<TimeSeriesDataset> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    // the csv reader skips empty lines silently; they are malformed input here
    let body = text.trim_end_matches(['\n', '\r']);
    if let Some(row) = body.lines().skip(1).position(|l| l.trim().is_empty()) {
        return Err(Error::Parse {
            row,
            col: 0,
            msg: format!("blank line at line {}", row + 2),
        });
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::Data(
            "header needs a timestamp column and at least one variable".into(),
        ));
    }
    let names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    if names.len() < 2 {
        log::warn!("series has a single variable; cross-variable attention is trivial");
    }
    let mut values = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut row = 0;
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                return Err(Error::Parse {
                    row,
                    col: 0,
                    msg: e.to_string(),
                });
            }
        }
        for (col, cell) in record.iter().enumerate().skip(1) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                col,
                msg: format!("cannot parse {cell:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    col,
                    msg: format!("non-finite value {cell:?}"),
                });
            }
            values.push(v);
        }
        row += 1;
    }
    if row == 0 {
        return Err(Error::Data("series has no rows".into()));
    }
    TimeSeriesDataset::new(values, names)
}

/// One history/target pair. Both are row-major `[steps × C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    pub history: Tensor,
    pub target: Tensor,
    pub origin_index: usize,
}

/// Lazily materialized windows over one split.
#[derive(Clone, Copy, Debug)]
pub struct WindowSet<'a> {
    data: &'a TimeSeriesDataset,
    lookback: usize,
    horizon: usize,
    first_origin: usize,
    count: usize,
}

impl<'a> WindowSet<'a> {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_vars(&self) -> usize {
        self.data.n_vars()
    }

    pub fn origin(&self, i: usize) -> usize {
        assert!(i < self.count, "window {i} out of {}", self.count);
        self.first_origin + i
    }

    fn rows(&self, start: usize, len: usize) -> &'a [f64] {
        let c = self.data.n_vars();
        &self.data.values[start * c..(start + len) * c]
    }

    pub fn get(&self, i: usize) -> WindowPair {
        let o = self.origin(i);
        let c = self.data.n_vars();
        WindowPair {
            history: Tensor::from_vec([self.lookback, c], self.rows(o, self.lookback).to_vec()),
            target: Tensor::from_vec(
                [self.horizon, c],
                self.rows(o + self.lookback, self.horizon).to_vec(),
            ),
            origin_index: o,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = WindowPair> + '_ {
        (0..self.count).map(|i| self.get(i))
    }

    /// Stacks the selected windows into `[B × L × C]` and `[B × O × C]`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let c = self.data.n_vars();
        let mut hist = Vec::with_capacity(indices.len() * self.lookback * c);
        let mut tgt = Vec::with_capacity(indices.len() * self.horizon * c);
        for &i in indices {
            let o = self.origin(i);
            hist.extend_from_slice(self.rows(o, self.lookback));
            tgt.extend_from_slice(self.rows(o + self.lookback, self.horizon));
        }
        (
            Tensor::from_vec([indices.len(), self.lookback, c], hist),
            Tensor::from_vec([indices.len(), self.horizon, c], tgt),
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskMode {
    /// Uniformly chosen time steps.
    #[default]
    Random,
    /// One contiguous block at a uniformly chosen offset.
    Contiguous,
}

/// Time steps of an `lookback`-step history hidden by [`mask_history`].
pub fn masked_steps(lookback: usize, fraction: f64, seed: u64, mode: MaskMode) -> Vec<usize> {
    let k = ((fraction.clamp(0.0, 1.0) * lookback as f64).floor() as usize).min(lookback);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = match mode {
        MaskMode::Random => index::sample(&mut rng, lookback, k).into_vec(),
        MaskMode::Contiguous => {
            let start = rng.gen_range(0..=lookback - k);
            (start..start + k).collect()
        }
    };
    steps.sort_unstable();
    steps
}

/// Zeroes `⌊fraction·L⌋` whole time steps (all variables) of the history.
/// In the z-scored frame zero is the training mean of each variable.
pub fn mask_history(w: &WindowPair, fraction: f64, seed: u64, mode: MaskMode) -> WindowPair {
    let mut out = w.clone();
    mask_history_rows(out.history.data_mut(), w.history.shape()[1], fraction, seed, mode);
    out
}

/// In-place variant over a row-major `[L × C]` buffer.
pub fn mask_history_rows(history: &mut [f64], n_vars: usize, fraction: f64, seed: u64, mode: MaskMode) {
    let lookback = history.len() / n_vars;
    for s in masked_steps(lookback, fraction, seed, mode) {
        history[s * n_vars..(s + 1) * n_vars].fill(0.0);
    }
}

/// Two-variable benchmark: `y₁` is a mix of sinusoids, `y₂[t] = y₁[t − lag]
/// + noise_std·ε` with standard normal `ε`.
pub fn lagged_sinusoids(steps: usize, lag: usize, noise_std: f64, seed: u64) -> TimeSeriesDataset {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y1 = |t: f64| {
        use std::f64::consts::TAU;
        (TAU * t / 24.0).sin() + 0.5 * (TAU * t / 67.0 + 0.8).sin() + 0.3 * (TAU * t / 168.0 + 2.1).sin()
    };
    let mut values = Vec::with_capacity(steps * 2);
    for t in 0..steps {
        let ft = t as f64;
        let eps: f64 = StandardNormal.sample(&mut rng);
        values.push(y1(ft));
        values.push(y1(ft - lag as f64) + noise_std * eps);
    }
    TimeSeriesDataset::new(values, vec!["y1".into(), "y2".into()]).expect("synthetic series is well formed")
}

/// Writes a dataset as CSV with an integer step column.
pub fn write_csv<W: std::io::Write>(ds: &TimeSeriesDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string()];
    header.extend(ds.variable_names.iter().cloned());
    w.write_record(&header)?;
    let c = ds.n_vars();
    for r in 0..ds.rows {
        let mut rec = vec![r.to_string()];
        rec.extend(ds.values[r * c..(r + 1) * c].iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
