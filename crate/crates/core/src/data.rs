//! Series ingestion and preparation: delimited-text loading and saving,
//! chronological splits with train-only standardization, and a seeded
//! multi-periodic generator.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A `T × V` series stored row-major (time outer).
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    values: Vec<f64>,
    len: usize,
    variate_names: Vec<String>,
    timestamps: Option<Vec<String>>,
    ground_truth_periods: Vec<usize>,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>, variate_names: Vec<String>) -> Result<Self> {
        let v = variate_names.len();
        if v == 0 {
            return Err(Error::contract("a series needs at least one variate"));
        }
        if values.is_empty() || !values.len().is_multiple_of(v) {
            return Err(Error::contract(format!(
                "{} values do not form whole rows of {v} variates",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "value at row {}, variate {} is not finite",
                i / v,
                i % v
            )));
        }
        Ok(TimeSeries {
            len: values.len() / v,
            values,
            variate_names,
            timestamps: None,
            ground_truth_periods: Vec::new(),
        })
    }

    /// Builds a series with default names `v0, v1, …`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let v = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != v) {
            return Err(Error::contract("rows have different lengths"));
        }
        let names = (0..v).map(|i| format!("v{i}")).collect();
        TimeSeries::new(rows.concat(), names)
    }

    pub fn with_timestamps(mut self, timestamps: Vec<String>) -> Result<Self> {
        if timestamps.len() != self.len {
            return Err(Error::contract(format!(
                "{} timestamps for {} rows",
                timestamps.len(),
                self.len
            )));
        }
        self.timestamps = Some(timestamps);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_variates(&self) -> usize {
        self.variate_names.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, t: usize, v: usize) -> f64 {
        self.values[t * self.num_variates() + v]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let v = self.num_variates();
        &self.values[t * v..(t + 1) * v]
    }

    /// Rows `start..end` as a flat row-major slice.
    pub fn rows(&self, start: usize, end: usize) -> &[f64] {
        let v = self.num_variates();
        &self.values[start * v..end * v]
    }

    pub fn column(&self, v: usize) -> Vec<f64> {
        (0..self.len).map(|t| self.value(t, v)).collect()
    }

    pub fn variate_names(&self) -> &[String] {
        &self.variate_names
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    /// Periods a generator planted in the series; empty for loaded data.
    pub fn ground_truth_periods(&self) -> &[usize] {
        &self.ground_truth_periods
    }

    /// Rows `start..end`, keeping names, timestamps and metadata.
    pub fn slice(&self, start: usize, end: usize) -> Result<TimeSeries> {
        if start >= end || end > self.len {
            return Err(Error::contract(format!(
                "row range {start}..{end} outside a series of length {}",
                self.len
            )));
        }
        Ok(TimeSeries {
            values: self.rows(start, end).to_vec(),
            len: end - start,
            variate_names: self.variate_names.clone(),
            timestamps: self.timestamps.as_ref().map(|ts| ts[start..end].to_vec()),
            ground_truth_periods: self.ground_truth_periods.clone(),
        })
    }

    /// SHA-256 over the shape, variate names and the little-endian bytes of
    /// every value. Timestamps are not included.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len as u64).to_le_bytes());
        h.update((self.num_variates() as u64).to_le_bytes());
        for name in &self.variate_names {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
        }
        for x in &self.values {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn map_values(&self, f: impl Fn(usize, f64) -> f64) -> TimeSeries {
        let v = self.num_variates();
        let mut out = self.clone();
        for (i, x) in out.values.iter_mut().enumerate() {
            *x = f(i % v, *x);
        }
        out
    }
}

/// Column layout of a delimited file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CsvLayout {
    pub has_header: bool,
    /// Column carried as a timestamp string instead of a variate.
    pub timestamp_col: Option<usize>,
}

impl CsvLayout {
    /// Guesses the layout from the first two records: a header is a first
    /// row with any non-numeric cell, and a timestamp column is a leading
    /// column whose first data cell is non-numeric.
    pub fn detect(path: &Path) -> Result<Self> {
        let mut reader = reader(path, false)?;
        let mut records = reader.records();
        let first = records
            .next()
            .ok_or_else(|| Error::EmptyDataset(format!("{} has no rows", path.display())))??;
        let numeric = |s: &str| s.trim().parse::<f64>().is_ok();
        let has_header = first.iter().any(|c| !numeric(c));
        let data_row = if has_header {
            match records.next() {
                Some(r) => r?,
                None => {
                    return Err(Error::EmptyDataset(format!(
                        "{} has no data rows",
                        path.display()
                    )))
                }
            }
        } else {
            first
        };
        let timestamp_col = data_row.get(0).filter(|c| !numeric(c)).map(|_| 0);
        Ok(CsvLayout {
            has_header,
            timestamp_col,
        })
    }
}

fn reader(path: &Path, flexible: bool) -> Result<csv::Reader<fs::File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(flexible)
        .trim(csv::Trim::All)
        .from_path(path)?)
}

/// Loads a comma-separated file: rows are time steps, columns variates.
/// Row and column numbers in errors are 1-based positions in the file.
pub fn load_csv(path: &Path, has_header: bool, timestamp_col: Option<usize>) -> Result<TimeSeries> {
    let parse_err = |row: usize, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column,
        message,
    };
    let mut rdr = reader(path, true)?;
    let mut names: Option<Vec<String>> = None;
    let mut values = Vec::new();
    let mut stamps = Vec::new();
    let mut width: Option<usize> = None;
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = record.position().map_or(i as u64 + 1, |p| p.line()) as usize;
        if i == 0 && has_header {
            names = Some(
                record
                    .iter()
                    .enumerate()
                    .filter(|(c, _)| Some(*c) != timestamp_col)
                    .map(|(_, s)| s.to_string())
                    .collect(),
            );
            width = Some(record.len());
            continue;
        }
        match width {
            Some(w) if w != record.len() => {
                return Err(parse_err(
                    row,
                    record.len().min(w) + 1,
                    format!("expected {w} columns, found {}", record.len()),
                ))
            }
            None => width = Some(record.len()),
            _ => {}
        }
        for (c, cell) in record.iter().enumerate() {
            if Some(c) == timestamp_col {
                stamps.push(cell.to_string());
                continue;
            }
            let x: f64 = cell
                .parse()
                .map_err(|_| parse_err(row, c + 1, format!("cannot parse `{cell}` as a number")))?;
            if !x.is_finite() {
                return Err(parse_err(row, c + 1, format!("non-finite value `{cell}`")));
            }
            values.push(x);
        }
    }
    let width = width.ok_or_else(|| Error::EmptyDataset(format!("{} is empty", path.display())))?;
    if let Some(tc) = timestamp_col {
        if tc >= width {
            return Err(Error::contract(format!(
                "timestamp column {tc} outside {width} columns"
            )));
        }
    }
    let variates = width - usize::from(timestamp_col.is_some());
    if values.is_empty() || variates == 0 {
        return Err(Error::EmptyDataset(format!(
            "{} has no numeric data",
            path.display()
        )));
    }
    let names = names.unwrap_or_else(|| (0..variates).map(|i| format!("v{i}")).collect());
    let ts = TimeSeries::new(values, names)?;
    if timestamp_col.is_some() {
        ts.with_timestamps(stamps)
    } else {
        Ok(ts)
    }
}

/// Writes a header row (with a leading `date` column when timestamps are
/// present) and one row per time step. Values round-trip exactly.
pub fn save_csv(ts: &TimeSeries, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = Vec::new();
    if ts.timestamps.is_some() {
        header.push("date");
    }
    header.extend(ts.variate_names.iter().map(String::as_str));
    w.write_record(&header)?;
    for t in 0..ts.len {
        let mut record: Vec<String> = Vec::with_capacity(header.len());
        if let Some(stamps) = &ts.timestamps {
            record.push(stamps[t].clone());
        }
        record.extend(ts.row(t).iter().map(|x| x.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// JSON sidecar describing a series file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesMetadata {
    pub length: usize,
    pub variate_names: Vec<String>,
    pub ground_truth_periods: Vec<usize>,
    pub source: String,
}

impl SeriesMetadata {
    pub fn describe(ts: &TimeSeries, source: impl Into<String>) -> Self {
        SeriesMetadata {
            length: ts.len,
            variate_names: ts.variate_names.clone(),
            ground_truth_periods: ts.ground_truth_periods.clone(),
            source: source.into(),
        }
    }

    /// `data.csv` -> `data.meta.json`.
    pub fn sidecar_path(csv: &Path) -> PathBuf {
        csv.with_extension("meta.json")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Chronological split fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.7,
            val_frac: 0.1,
            test_frac: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !(*f >= 0.0)) {
            return Err(Error::contract("split fractions must be nonnegative"));
        }
        let total: f64 = fracs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "split fractions sum to {total}, not 1"
            )));
        }
        Ok(())
    }

    /// `(⌊T·train⌋, ⌊T·(train + val)⌋)`, tolerant of fractions like
    /// `0.7 + 0.1` landing just below an integer product.
    pub fn boundaries(&self, len: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let t = len as f64;
        let floor = |x: f64| (x + 1e-9).floor() as usize;
        let a = floor(t * self.train_frac).min(len);
        let b = floor(t * (self.train_frac + self.val_frac)).clamp(a, len);
        Ok((a, b))
    }
}

/// Per-variate z-score parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population moments of `ts`; a constant variate gets std 1.
    pub fn fit(ts: &TimeSeries) -> Self {
        let v = ts.num_variates();
        let n = ts.len() as f64;
        let mut mean = vec![0.0; v];
        for t in 0..ts.len() {
            for (m, x) in mean.iter_mut().zip(ts.row(t)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; v];
        for t in 0..ts.len() {
            for ((s, x), m) in var.iter_mut().zip(ts.row(t)).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, ts: &TimeSeries) -> TimeSeries {
        ts.map_values(|v, x| (x - self.mean[v]) / self.std[v])
    }

    pub fn invert(&self, ts: &TimeSeries) -> TimeSeries {
        ts.map_values(|v, x| x * self.std[v] + self.mean[v])
    }

    /// Inverts a flat row-major `[.., V]` buffer in place.
    pub fn invert_in_place(&self, values: &mut [f64]) {
        let v = self.mean.len();
        for (i, x) in values.iter_mut().enumerate() {
            *x = *x * self.std[i % v] + self.mean[i % v];
        }
    }
}

/// Standardized train/val/test segments and the train-fitted scaler.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: TimeSeries,
    pub val: TimeSeries,
    pub test: TimeSeries,
    pub scaler: Standardizer,
    /// Row indices where val and test begin.
    pub boundaries: (usize, usize),
}

/// Raw contiguous segments `[0, a)`, `[a, b)`, `[b, T)`. Empty segments are
/// rejected.
pub fn partition(
    ts: &TimeSeries,
    a: usize,
    b: usize,
) -> Result<(TimeSeries, TimeSeries, TimeSeries)> {
    if !(0 < a && a < b && b < ts.len()) {
        return Err(Error::EmptyDataset(format!(
            "split boundaries {a}, {b} leave an empty segment of a length-{} series",
            ts.len()
        )));
    }
    Ok((ts.slice(0, a)?, ts.slice(a, b)?, ts.slice(b, ts.len())?))
}

/// Chronological split by fractions, standardized with train-only moments.
pub fn chrono_split(ts: &TimeSeries, spec: &SplitSpec) -> Result<Split> {
    let (a, b) = spec.boundaries(ts.len())?;
    chrono_split_at(ts, a, b)
}

/// Chronological split at explicit row boundaries.
pub fn chrono_split_at(ts: &TimeSeries, a: usize, b: usize) -> Result<Split> {
    let (train, val, test) = partition(ts, a, b)?;
    let scaler = Standardizer::fit(&train);
    Ok(Split {
        train: scaler.apply(&train),
        val: scaler.apply(&val),
        test: scaler.apply(&test),
        scaler,
        boundaries: (a, b),
    })
}

/// One sinusoidal component `amplitude · sin(2π·t/period + phase)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tone {
    pub period: usize,
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub length: usize,
    pub tones: Vec<Tone>,
    pub trend_slope: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Variate `v` shifts every phase by `0.5·v` and draws its own noise.
    pub variates: usize,
}

impl SynthSpec {
    /// Periods 24 and 56 with amplitudes 2 and 1, noise 0.1, univariate.
    pub fn two_tone(length: usize, seed: u64) -> Self {
        SynthSpec {
            length,
            tones: vec![
                Tone {
                    period: 24,
                    amplitude: 2.0,
                    phase: 0.0,
                },
                Tone {
                    period: 56,
                    amplitude: 1.0,
                    phase: 0.0,
                },
            ],
            trend_slope: 0.0,
            noise_std: 0.1,
            seed,
            variates: 1,
        }
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec::two_tone(2000, 0)
    }
}

/// Sum of tones, a linear trend and seeded Gaussian noise. The tone periods
/// are recorded as ground truth.
pub fn synth_multiperiodic(spec: &SynthSpec) -> Result<TimeSeries> {
    if spec.variates == 0 || spec.length == 0 {
        return Err(Error::contract("length and variates must be positive"));
    }
    if let Some(t) = spec.tones.iter().find(|t| t.period < 2) {
        return Err(Error::contract(format!("period {} is below 2", t.period)));
    }
    let max_period = spec.tones.iter().map(|t| t.period).max().unwrap_or(0);
    if spec.length < max_period {
        return Err(Error::contract(format!(
            "length {} is shorter than period {max_period}",
            spec.length
        )));
    }
    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|_| Error::contract(format!("invalid noise_std {}", spec.noise_std)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Vec::with_capacity(spec.length * spec.variates);
    for t in 0..spec.length {
        for v in 0..spec.variates {
            let shift = 0.5 * v as f64;
            let signal: f64 = spec
                .tones
                .iter()
                .map(|tone| {
                    let angle = 2.0 * PI * t as f64 / tone.period as f64 + tone.phase + shift;
                    tone.amplitude * angle.sin()
                })
                .sum();
            let eps = if spec.noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            values.push(signal + spec.trend_slope * t as f64 + eps);
        }
    }
    let names = (0..spec.variates).map(|v| format!("v{v}")).collect();
    let mut ts = TimeSeries::new(values, names)?;
    ts.ground_truth_periods = spec.tones.iter().map(|t| t.period).collect();
    Ok(ts)
}
