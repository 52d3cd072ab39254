//! Time-series ingestion, normalization, chronological splitting and
//! windowing, plus the seeded synthetic dissolved-oxygen generator.
//!
//! CSV schema: UTF-8, comma separated, one header row, one row per day. The
//! synthetic export writes the columns `day,dissolved_oxygen`.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::WINDOW_LENGTH;

/// Default column holding the forecast target.
pub const DO_COLUMN: &str = "dissolved_oxygen";

/// Plausible dissolved-oxygen range in mg/L; synthetic values are clamped to it.
pub const DO_RANGE: (f64, f64) = (4.0, 14.0);

#[derive(Debug, Error)]
pub enum DataError {
    #[error("column {column:?} not found; available columns: {available:?}")]
    MissingColumn {
        column: String,
        available: Vec<String>,
    },
    #[error("series is empty")]
    Empty,
    #[error("non-numeric values in column {column:?} at data rows {rows:?}")]
    NonNumeric { column: String, rows: Vec<usize> },
    #[error("series of length {len} is too short (need at least {needed})")]
    TooShort { len: usize, needed: usize },
    #[error("training segment is constant; min-max normalization is undefined")]
    ConstantSeries,
    #[error("split fraction {fraction} leaves a side shorter than {min} values ({train}/{test})")]
    DegenerateSplit {
        fraction: f64,
        train: usize,
        test: usize,
        min: usize,
    },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub values: Vec<f64>,
    pub timestamps: Option<Vec<String>>,
    pub source: String,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>, source: impl Into<String>) -> Result<Self, DataError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(i));
        }
        Ok(TimeSeries {
            values,
            timestamps: None,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Reads one numeric column of a headered CSV, in file order.
pub fn load_csv(path: impl AsRef<Path>, column: &str) -> Result<TimeSeries, DataError> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let idx = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| DataError::MissingColumn {
            column: column.to_string(),
            available: headers.clone(),
        })?;
    let stamp_idx = headers.iter().position(|h| h == "day" || h == "date");
    let mut values = Vec::new();
    let mut stamps = Vec::new();
    let mut bad = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let cell = rec.get(idx).unwrap_or("").trim();
        match cell.parse::<f64>() {
            Ok(v) if v.is_finite() => values.push(v),
            _ => bad.push(row + 1),
        }
        if let Some(si) = stamp_idx {
            stamps.push(rec.get(si).unwrap_or("").to_string());
        }
    }
    if !bad.is_empty() {
        return Err(DataError::NonNumeric {
            column: column.to_string(),
            rows: bad,
        });
    }
    if values.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(TimeSeries {
        values,
        timestamps: stamp_idx.map(|_| stamps),
        source: path.display().to_string(),
    })
}

/// Writes `day,dissolved_oxygen` rows.
pub fn write_csv(series: &TimeSeries, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["day", DO_COLUMN])?;
    for (t, v) in series.values.iter().enumerate() {
        let day = series
            .timestamps
            .as_ref()
            .and_then(|s| s.get(t).cloned())
            .unwrap_or_else(|| t.to_string());
        w.write_record([day, format!("{v}")])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Seasonal + weekly sinusoids with seeded Gaussian noise (σ = 0.25),
/// clamped to [`DO_RANGE`]:
/// `9 + 2.5·sin(2πt/365.25) + 0.5·sin(2πt/7) + ε_t`.
pub fn generate_synthetic(seed: u64, n_days: usize) -> Result<TimeSeries, DataError> {
    let needed = WINDOW_LENGTH + 1;
    if n_days < needed {
        return Err(DataError::TooShort { len: n_days, needed });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.25).expect("valid sigma");
    let values = (0..n_days)
        .map(|t| {
            let t = t as f64;
            let v = 9.0
                + 2.5 * (2.0 * PI * t / 365.25).sin()
                + 0.5 * (2.0 * PI * t / 7.0).sin()
                + noise.sample(&mut rng);
            v.clamp(DO_RANGE.0, DO_RANGE.1)
        })
        .collect();
    Ok(TimeSeries {
        values,
        timestamps: None,
        source: format!("synthetic(seed={seed})"),
    })
}

/// First `floor(fraction·L)` values for training, the rest for testing.
pub fn chronological_split(series: &TimeSeries, train_fraction: f64) -> Result<(TimeSeries, TimeSeries), DataError> {
    let min = WINDOW_LENGTH + 1;
    let len = series.len();
    let cut = if train_fraction > 0.0 && train_fraction < 1.0 {
        (train_fraction * len as f64).floor() as usize
    } else {
        0
    };
    if cut < min || len - cut < min {
        return Err(DataError::DegenerateSplit {
            fraction: train_fraction,
            train: cut,
            test: len.saturating_sub(cut),
            min,
        });
    }
    let part = |r: std::ops::Range<usize>, tag: &str| TimeSeries {
        values: series.values[r.clone()].to_vec(),
        timestamps: series.timestamps.as_ref().map(|s| s[r].to_vec()),
        source: format!("{}[{tag}]", series.source),
    };
    Ok((part(0..cut, "train"), part(cut..len, "test")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub min: f64,
    pub max: f64,
}

impl NormalizationParams {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.min) / (self.max - self.min)
    }

    pub fn invert(&self, x: f64) -> f64 {
        x * (self.max - self.min) + self.min
    }
}

pub fn fit_minmax(train: &TimeSeries) -> Result<NormalizationParams, DataError> {
    if train.is_empty() {
        return Err(DataError::Empty);
    }
    let min = train.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = train.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return Err(DataError::ConstantSeries);
    }
    Ok(NormalizationParams { min, max })
}

/// Maps the series with `p`; values outside the fitted range are not clamped.
pub fn apply_minmax(series: &TimeSeries, p: &NormalizationParams) -> TimeSeries {
    TimeSeries {
        values: series.values.iter().map(|&x| p.apply(x)).collect(),
        timestamps: series.timestamps.clone(),
        source: series.source.clone(),
    }
}

/// Stride-1 windows: `x_i = values[i..i+T]`, `y_i = values[i+T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub window_length: usize,
    /// Row-major `[count × window_length]`.
    inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.window_length..(i + 1) * self.window_length]
    }

    pub fn y(&self, i: usize) -> f64 {
        self.targets[i]
    }

    pub fn windows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.inputs.chunks_exact(self.window_length)
    }
}

pub fn make_windows(series: &TimeSeries) -> Result<WindowedDataset, DataError> {
    make_windows_with(series, WINDOW_LENGTH)
}

pub fn make_windows_with(series: &TimeSeries, window_length: usize) -> Result<WindowedDataset, DataError> {
    let v = &series.values;
    if window_length == 0 || v.len() <= window_length {
        return Err(DataError::TooShort {
            len: v.len(),
            needed: window_length + 1,
        });
    }
    let count = v.len() - window_length;
    let mut inputs = Vec::with_capacity(count * window_length);
    for i in 0..count {
        inputs.extend_from_slice(&v[i..i + window_length]);
    }
    Ok(WindowedDataset {
        window_length,
        inputs,
        targets: v[window_length..].to_vec(),
    })
}

/// Normalized train/test windows built from one series, plus the fitted
/// normalization. Windows never straddle the split point.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub norm: NormalizationParams,
    pub train: WindowedDataset,
    pub test: WindowedDataset,
}

pub fn prepare(series: &TimeSeries, train_fraction: f64) -> Result<PreparedData, DataError> {
    let (train, test) = chronological_split(series, train_fraction)?;
    let norm = fit_minmax(&train)?;
    Ok(PreparedData {
        norm,
        train: make_windows(&apply_minmax(&train, &norm))?,
        test: make_windows(&apply_minmax(&test, &norm))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn series(v: &[f64]) -> TimeSeries {
        TimeSeries::new(v.to_vec(), "test").unwrap()
    }

    #[test]
    fn synthetic_is_reproducible_and_bounded() {
        let a = generate_synthetic(3, 3264).unwrap();
        let b = generate_synthetic(3, 3264).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3264);
        assert!(a.values.iter().all(|&v| (4.0..=14.0).contains(&v)));
        assert_ne!(a.values, generate_synthetic(4, 3264).unwrap().values);
        assert!(generate_synthetic(3, 15).is_err());
    }

    #[test]
    fn split_sizes() {
        let s = generate_synthetic(1, 3264).unwrap();
        let (tr, te) = chronological_split(&s, 0.7).unwrap();
        assert_eq!((tr.len(), te.len()), (2284, 980));
        let mut joined = tr.values.clone();
        joined.extend(&te.values);
        assert_eq!(joined, s.values);

        let s = series(&(0..100).map(f64::from).collect::<Vec<_>>());
        let (tr, te) = chronological_split(&s, 0.7).unwrap();
        assert_eq!((tr.len(), te.len()), (70, 30));
        assert!(chronological_split(&s, 0.95).is_err());
        assert!(chronological_split(&s, 0.0).is_err());
    }

    #[test]
    fn minmax() {
        let p = fit_minmax(&series(&[4.0, 14.0])).unwrap();
        assert_eq!((p.min, p.max), (4.0, 14.0));
        assert_eq!(p.apply(9.0), 0.5);
        assert!((p.apply(15.0) - 1.1).abs() < 1e-12);
        for x in [4.3, 7.77, 13.2, -2.0] {
            assert!((p.invert(p.apply(x)) - x).abs() < 1e-12);
        }
        assert!(matches!(fit_minmax(&series(&[2.0; 20])), Err(DataError::ConstantSeries)));
    }

    #[test]
    fn windows() {
        let v: Vec<f64> = (0..16).map(f64::from).collect();
        let w = make_windows(&series(&v)).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w.x(0), &v[..15]);
        assert_eq!(w.y(0), 15.0);

        let s = generate_synthetic(2, 3264).unwrap();
        let w = make_windows(&s).unwrap();
        assert_eq!(w.len(), 3249);
        for i in [0, 100, 3248] {
            assert_eq!(w.x(i)[14], s.values[i + 14]);
            assert_eq!(w.y(i), s.values[i + 15]);
        }
        assert!(make_windows(&series(&v[..15])).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_synthetic(5, 40).unwrap();
        let path = dir.path().join("do.csv");
        write_csv(&s, &path).unwrap();
        let back = load_csv(&path, DO_COLUMN).unwrap();
        assert_eq!(back.values, s.values);

        match load_csv(&path, "ph") {
            Err(DataError::MissingColumn { available, .. }) => {
                assert_eq!(available, vec!["day".to_string(), DO_COLUMN.to_string()])
            }
            other => panic!("expected missing column, got {other:?}"),
        }

        let header_only = dir.path().join("empty.csv");
        std::fs::write(&header_only, "day,dissolved_oxygen\n").unwrap();
        assert!(matches!(load_csv(&header_only, DO_COLUMN), Err(DataError::Empty)));

        let bad = dir.path().join("bad.csv");
        let mut f = std::fs::File::create(&bad).unwrap();
        writeln!(f, "day,temperature,dissolved_oxygen").unwrap();
        writeln!(f, "0,12.0,9.1").unwrap();
        writeln!(f, "1,12.2,n/a").unwrap();
        writeln!(f, "2,12.1,9.0").unwrap();
        writeln!(f, "3,12.1,").unwrap();
        drop(f);
        match load_csv(&bad, DO_COLUMN) {
            Err(DataError::NonNumeric { rows, .. }) => assert_eq!(rows, vec![2, 4]),
            other => panic!("expected non-numeric error, got {other:?}"),
        }
    }

    #[test]
    fn seven_column_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("danube.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "temperature,ph,conductivity,dissolved_oxygen,oxygen_saturation,ammonium,nitrite").unwrap();
        for i in 0..3264 {
            writeln!(f, "10.0,8.1,400,{},95,0.1,0.02", 9.0 + (i % 7) as f64 * 0.1).unwrap();
        }
        drop(f);
        assert_eq!(load_csv(&path, DO_COLUMN).unwrap().len(), 3264);
    }
}
