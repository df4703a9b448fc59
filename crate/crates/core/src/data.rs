//! Count data: the covariate vector, the count matrix, and its CSV format.
//!
//! The canonical CSV layout puts the covariate values in the header row and
//! one test (species) per following row. A leading label column is detected
//! by a non-numeric first header cell:
//!
//! ```text
//! species,0.86,1.34,1.81,2.37,3.00
//! sp1,0,1,1,0,5
//! sp2,9,2,0,0,3
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest count accepted at load.
pub const MAX_COUNT: u64 = i32::MAX as u64;

/// Strictly increasing, finite covariate values `x_1 < ... < x_N`, `N >= 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CovariateVector(Vec<f64>);

impl CovariateVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::CovariateTooShort(values.len()));
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteCovariate { col: i + 1 });
            }
        }
        for i in 1..values.len() {
            if values[i] <= values[i - 1] {
                return Err(Error::NonIncreasingCovariate { col: i + 1 });
            }
        }
        Ok(Self(values))
    }

    /// Shoot biomass (grams) of the five plant groups in the motivating
    /// wheat rhizosphere study.
    pub fn wheat_biomass() -> Self {
        Self(vec![0.86, 1.34, 1.81, 2.37, 3.00])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for CovariateVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CovariateVector> for Vec<f64> {
    fn from(c: CovariateVector) -> Self {
        c.0
    }
}

/// One test's count vector with its total.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestRecord {
    y: Vec<u32>,
    n_total: u64,
}

impl TestRecord {
    pub fn new(y: Vec<u32>) -> Self {
        let n_total = y.iter().map(|&c| c as u64).sum();
        Self { y, n_total }
    }

    pub fn counts(&self) -> &[u32] {
        &self.y
    }

    pub fn n_total(&self) -> u64 {
        self.n_total
    }
}

/// Covariate plus an `M x N` matrix of counts, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CountDataset {
    covariate: CovariateVector,
    counts: Vec<u32>,
    n_rows: usize,
    labels: Option<Vec<String>>,
    label_header: Option<String>,
}

impl CountDataset {
    /// Builds a dataset from rows of counts. Every row must have one cell per
    /// covariate value.
    pub fn new(
        covariate: CovariateVector,
        rows: Vec<Vec<u32>>,
        labels: Option<Vec<String>>,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::NoRows);
        }
        let n = covariate.len();
        let mut counts = Vec::with_capacity(rows.len() * n);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::RowLength {
                    row: i + 1,
                    expected: n,
                    found: r.len(),
                });
            }
            for (j, &c) in r.iter().enumerate() {
                if c as u64 > MAX_COUNT {
                    return Err(Error::CountOverflow {
                        row: i + 1,
                        col: j + 1,
                        value: c as u64,
                    });
                }
            }
            counts.extend_from_slice(r);
        }
        if let Some(l) = &labels {
            if l.len() != rows.len() {
                return Err(crate::error::invalid(format!(
                    "{} labels for {} rows",
                    l.len(),
                    rows.len()
                )));
            }
        }
        let label_header = labels.as_ref().map(|_| "id".to_string());
        Ok(Self {
            covariate,
            counts,
            n_rows: rows.len(),
            labels,
            label_header,
        })
    }

    pub fn covariate(&self) -> &CovariateVector {
        &self.covariate
    }

    /// Number of tests `M`.
    pub fn n_tests(&self) -> usize {
        self.n_rows
    }

    /// Number of covariate groups `N`.
    pub fn n_groups(&self) -> usize {
        self.covariate.len()
    }

    pub fn row(&self, m: usize) -> &[u32] {
        let n = self.n_groups();
        &self.counts[m * n..(m + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> + '_ {
        self.counts.chunks_exact(self.n_groups())
    }

    pub fn record(&self, m: usize) -> TestRecord {
        TestRecord::new(self.row(m).to_vec())
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Label of row `m`, or its 1-based index when the file had no labels.
    pub fn label(&self, m: usize) -> String {
        match &self.labels {
            Some(l) => l[m].clone(),
            None => (m + 1).to_string(),
        }
    }

    /// Dataset restricted to the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let n = self.n_groups();
        let mut counts = Vec::with_capacity(rows.len() * n);
        for &m in rows {
            counts.extend_from_slice(self.row(m));
        }
        Self {
            covariate: self.covariate.clone(),
            counts,
            n_rows: rows.len(),
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&m| l[m].clone()).collect()),
            label_header: self.label_header.clone(),
        }
    }
}

/// Row totals `n_m`.
pub fn row_totals(ds: &CountDataset) -> Vec<u64> {
    ds.rows()
        .map(|r| r.iter().map(|&c| c as u64).sum())
        .collect()
}

fn csv_reader<R: Read>(source: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source)
}

fn read_records<R: Read>(source: R) -> Result<Vec<csv::StringRecord>> {
    let mut out = Vec::new();
    for rec in csv_reader(source).records() {
        let rec = rec.map_err(|e| Error::Io(e.to_string()))?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        out.push(rec);
    }
    Ok(out)
}

fn parse_count(cell: &str, row: usize, col: usize) -> Result<u32> {
    let malformed = || Error::MalformedCell {
        row,
        col,
        cell: cell.to_string(),
    };
    if let Some(rest) = cell.strip_prefix('-') {
        if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
            let value = rest.parse::<i64>().map(|v| -v).unwrap_or(i64::MIN);
            if value != 0 {
                return Err(Error::NegativeCount { row, col, value });
            }
            return Ok(0);
        }
        return Err(malformed());
    }
    if cell.is_empty() || !cell.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed());
    }
    let v: u64 = cell.parse().map_err(|_| Error::CountOverflow {
        row,
        col,
        value: u64::MAX,
    })?;
    if v > MAX_COUNT {
        return Err(Error::CountOverflow { row, col, value: v });
    }
    Ok(v as u32)
}

fn parse_covariate_cell(cell: &str, col: usize) -> Result<f64> {
    cell.parse::<f64>().map_err(|_| Error::MalformedCell {
        row: 1,
        col,
        cell: cell.to_string(),
    })
}

/// Count rows and, when the file has a label column, their labels.
type ParsedRows = (Vec<Vec<u32>>, Option<Vec<String>>);

fn parse_count_rows(
    records: &[csv::StringRecord],
    first_row_number: usize,
    n_groups: usize,
    labelled: bool,
) -> Result<ParsedRows> {
    let offset = usize::from(labelled);
    let mut rows = Vec::with_capacity(records.len());
    let mut labels = labelled.then(Vec::new);
    for (i, rec) in records.iter().enumerate() {
        let row = first_row_number + i;
        if rec.len() != n_groups + offset {
            return Err(Error::RowLength {
                row,
                expected: n_groups,
                found: rec.len().saturating_sub(offset),
            });
        }
        if let Some(l) = labels.as_mut() {
            l.push(rec[0].to_string());
        }
        let counts = (offset..rec.len())
            .map(|j| parse_count(&rec[j], row, j + 1))
            .collect::<Result<Vec<u32>>>()?;
        rows.push(counts);
    }
    Ok((rows, labels))
}

/// Loads the canonical CSV format: header row of covariate values, then one
/// row of counts per test. Row/column positions in errors are 1-based and
/// count the header as row 1.
pub fn load_counts<R: Read>(source: R) -> Result<CountDataset> {
    let records = read_records(source)?;
    let Some((header, body)) = records.split_first() else {
        return Err(Error::CovariateTooShort(0));
    };
    let labelled = !header.is_empty() && header[0].parse::<f64>().is_err();
    let offset = usize::from(labelled);
    let values = (offset..header.len())
        .map(|j| parse_covariate_cell(&header[j], j + 1))
        .collect::<Result<Vec<f64>>>()?;
    let covariate = CovariateVector::new(values).map_err(|e| match e {
        Error::NonIncreasingCovariate { col } => {
            Error::NonIncreasingCovariate { col: col + offset }
        }
        Error::NonFiniteCovariate { col } => Error::NonFiniteCovariate { col: col + offset },
        other => other,
    })?;
    if body.is_empty() {
        return Err(Error::NoRows);
    }
    let (rows, labels) = parse_count_rows(body, 2, covariate.len(), labelled)?;
    let mut ds = CountDataset::new(covariate, rows, labels)?;
    if labelled {
        ds.label_header = Some(header[0].to_string());
    }
    Ok(ds)
}

/// Loads a headerless count matrix against a separately supplied covariate.
/// A label column is detected from a non-numeric first cell in the first row.
pub fn load_counts_with_covariate<R: Read>(
    source: R,
    covariate: CovariateVector,
) -> Result<CountDataset> {
    let records = read_records(source)?;
    if records.is_empty() {
        return Err(Error::NoRows);
    }
    let first = &records[0];
    let labelled =
        !first.is_empty() && first[0].parse::<u64>().is_err() && !first[0].starts_with('-');
    let (rows, labels) = parse_count_rows(&records, 1, covariate.len(), labelled)?;
    CountDataset::new(covariate, rows, labels)
}

/// Writes the dataset in the canonical CSV layout. Covariate values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_counts<W: Write>(ds: &CountDataset, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut header: Vec<String> = Vec::with_capacity(ds.n_groups() + 1);
    if ds.labels.is_some() {
        header.push(ds.label_header.clone().unwrap_or_else(|| "id".into()));
    }
    header.extend(ds.covariate.values().iter().map(|v| format!("{v:?}")));
    w.write_record(&header).map_err(io)?;
    for m in 0..ds.n_tests() {
        let mut rec: Vec<String> = Vec::with_capacity(ds.n_groups() + 1);
        if let Some(l) = &ds.labels {
            rec.push(l[m].clone());
        }
        rec.extend(ds.row(m).iter().map(|c| c.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
