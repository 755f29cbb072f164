//! Count matrices, per-sample offsets and variable filtering.
//!
//! Rows are samples (observations), columns are variables (genes). Counts are
//! read from delimited text with a header row of variable names and the sample
//! identifier in the first column.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("negative count {value:?} at (row {row}, col {col})")]
    NegativeCount { row: String, col: String, value: String },
    #[error("non-integer count {value:?} at (row {row}, col {col})")]
    NonIntegerCount { row: String, col: String, value: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateSample(String),
    #[error("duplicate variable name {0:?}")]
    DuplicateVariable(String),
    #[error("count matrix is empty")]
    Empty,
    #[error("sample {0:?} has zero library size")]
    ZeroLibrarySize(String),
    #[error("nonpositive offset {value} at line {line}")]
    NonpositiveOffset { line: usize, value: f64 },
    #[error("offset count {got} does not match {expected} samples")]
    LengthMismatch { expected: usize, got: usize },
    #[error("requested {requested} variables but only {available} exist")]
    TooManyVariables { requested: usize, available: usize },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Tsv,
}

impl Format {
    fn delimiter(self) -> u8 {
        match self {
            Format::Csv => b',',
            Format::Tsv => b'\t',
        }
    }

    /// Guesses from the file extension; anything but `.tsv`/`.tab` is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("tab") => Format::Tsv,
            _ => Format::Csv,
        }
    }
}

/// n × d matrix of nonnegative integer counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    values: Vec<u64>,
    n: usize,
    d: usize,
    sample_ids: Vec<String>,
    var_names: Vec<String>,
}

impl CountMatrix {
    pub fn new(values: Vec<u64>, sample_ids: Vec<String>, var_names: Vec<String>) -> Result<Self> {
        let (n, d) = (sample_ids.len(), var_names.len());
        if n == 0 || d == 0 {
            return Err(DataError::Empty);
        }
        if values.len() != n * d {
            return Err(DataError::LengthMismatch { expected: n * d, got: values.len() });
        }
        let mut seen = HashSet::new();
        for id in &sample_ids {
            if !seen.insert(id.as_str()) {
                return Err(DataError::DuplicateSample(id.clone()));
            }
        }
        let mut seen = HashSet::new();
        for v in &var_names {
            if !seen.insert(v.as_str()) {
                return Err(DataError::DuplicateVariable(v.clone()));
            }
        }
        Ok(Self { values, n, d, sample_ids, var_names })
    }

    /// Matrix with generated identifiers `s1..sn` and `v1..vd`.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(DataError::Parse { line: 0, msg: "ragged rows".into() });
        }
        Self::new(
            rows.concat(),
            (1..=n).map(|i| format!("s{i}")).collect(),
            (1..=d).map(|j| format!("v{j}")).collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.values[i * self.d + j]
    }

    pub fn values(&self) -> &[u64] {
        &self.values
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn var_names(&self) -> &[String] {
        &self.var_names
    }

    pub fn row_totals(&self) -> Vec<u64> {
        (0..self.n).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn column(&self, j: usize) -> Vec<u64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    /// Keeps the listed columns in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> CountMatrix {
        let mut values = Vec::with_capacity(self.n * cols.len());
        for i in 0..self.n {
            values.extend(cols.iter().map(|&j| self.get(i, j)));
        }
        CountMatrix {
            values,
            n: self.n,
            d: cols.len(),
            sample_ids: self.sample_ids.clone(),
            var_names: cols.iter().map(|&j| self.var_names[j].clone()).collect(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

pub fn load_counts(path: impl AsRef<Path>, format: Format) -> Result<CountMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_counts(&text, format)
}

pub fn parse_counts(text: &str, format: Format) -> Result<CountMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter())
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| DataError::Parse { line: 1, msg: e.to_string() })?
        .clone();
    if header.len() < 2 {
        return Err(DataError::Parse { line: 1, msg: "header needs an id column and at least one variable".into() });
    }
    let var_names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let d = var_names.len();
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| DataError::Parse { line, msg: e.to_string() })?;
        if rec.len() != d + 1 {
            return Err(DataError::Parse {
                line,
                msg: format!("expected {} fields, found {}", d + 1, rec.len()),
            });
        }
        let id = rec[0].trim().to_string();
        for (j, cell) in rec.iter().skip(1).enumerate() {
            values.push(parse_count(cell.trim(), &id, &var_names[j])?);
        }
        ids.push(id);
    }
    CountMatrix::new(values, ids, var_names)
}

fn parse_count(cell: &str, row: &str, col: &str) -> Result<u64> {
    if let Ok(v) = cell.parse::<u64>() {
        return Ok(v);
    }
    let loc = || (row.to_string(), col.to_string(), cell.to_string());
    match cell.parse::<f64>() {
        Ok(x) if x < 0.0 => {
            let (row, col, value) = loc();
            Err(DataError::NegativeCount { row, col, value })
        }
        Ok(x) if x.is_finite() && x.fract() == 0.0 && x <= u64::MAX as f64 => Ok(x as u64),
        Ok(_) => {
            let (row, col, value) = loc();
            Err(DataError::NonIntegerCount { row, col, value })
        }
        Err(_) => match cell.parse::<i64>() {
            Ok(_) => {
                let (row, col, value) = loc();
                Err(DataError::NegativeCount { row, col, value })
            }
            Err(_) => Err(DataError::Parse { line: 0, msg: format!("cannot parse {cell:?} at (row {row}, col {col})") }),
        },
    }
}

pub fn save_counts(counts: &CountMatrix, path: impl AsRef<Path>, format: Format) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_counts(counts, format)).map_err(io_err(path))
}

pub fn format_counts(counts: &CountMatrix, format: Format) -> String {
    let mut w = csv::WriterBuilder::new()
        .delimiter(format.delimiter())
        .from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend(counts.var_names.iter().cloned());
    w.write_record(&header).expect("in-memory write");
    for i in 0..counts.n {
        let mut rec = vec![counts.sample_ids[i].clone()];
        rec.extend(counts.row(i).iter().map(u64::to_string));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
}

/// Per-sample multiplicative normalization constants, all strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetVector(Vec<f64>);

impl OffsetVector {
    pub fn new(c: Vec<f64>) -> Result<Self> {
        for (i, &v) in c.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(DataError::NonpositiveOffset { line: i + 1, value: v });
            }
        }
        Ok(Self(c))
    }

    pub fn unit(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn log_values(&self) -> Vec<f64> {
        self.0.iter().map(|c| c.ln()).collect()
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        if self.0.len() != n {
            return Err(DataError::LengthMismatch { expected: n, got: self.0.len() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffsetMethod {
    Unit,
    LibSize,
}

pub fn compute_offsets(counts: &CountMatrix, method: OffsetMethod) -> Result<OffsetVector> {
    match method {
        OffsetMethod::Unit => Ok(OffsetVector::unit(counts.n())),
        OffsetMethod::LibSize => {
            let totals = counts.row_totals();
            if let Some(i) = totals.iter().position(|&t| t == 0) {
                return Err(DataError::ZeroLibrarySize(counts.sample_ids[i].clone()));
            }
            let mean_log = totals.iter().map(|&t| (t as f64).ln()).sum::<f64>() / totals.len() as f64;
            Ok(OffsetVector(totals.iter().map(|&t| ((t as f64).ln() - mean_log).exp()).collect()))
        }
    }
}

pub fn load_offsets(path: impl AsRef<Path>, n: usize) -> Result<OffsetVector> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_offsets(&text, n)
}

pub fn parse_offsets(text: &str, n: usize) -> Result<OffsetVector> {
    let mut c = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| DataError::Parse { line: k + 1, msg: format!("not a number: {line:?}") })?;
        if !(v > 0.0) || !v.is_finite() {
            return Err(DataError::NonpositiveOffset { line: k + 1, value: v });
        }
        c.push(v);
    }
    let out = OffsetVector(c);
    out.check_len(n)?;
    Ok(out)
}

pub fn save_offsets(offsets: &OffsetVector, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for v in &offsets.0 {
        writeln!(f, "{v:?}").map_err(io_err(path))?;
    }
    Ok(())
}

/// Quantile by linear interpolation between order statistics of sorted data
/// (position `(n - 1) q`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (n - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Interquartile range of `log(count + 1)` for each column.
pub fn log_iqr(counts: &CountMatrix) -> Vec<f64> {
    (0..counts.d())
        .map(|j| {
            let mut col: Vec<f64> = counts.column(j).iter().map(|&y| (y as f64).ln_1p()).collect();
            col.sort_by(f64::total_cmp);
            quantile_sorted(&col, 0.75) - quantile_sorted(&col, 0.25)
        })
        .collect()
}

/// Keeps the `top_n` columns with the largest log-scale IQR. Ties go to the
/// earlier column; survivors keep their original order.
pub fn filter_top_variable(counts: &CountMatrix, top_n: usize) -> Result<CountMatrix> {
    if top_n > counts.d() || top_n == 0 {
        return Err(DataError::TooManyVariables { requested: top_n, available: counts.d() });
    }
    let iqr = log_iqr(counts);
    let mut order: Vec<usize> = (0..counts.d()).collect();
    order.sort_by(|&a, &b| iqr[b].total_cmp(&iqr[a]).then(a.cmp(&b)));
    let mut keep = order[..top_n].to_vec();
    keep.sort_unstable();
    Ok(counts.select_columns(&keep))
}
