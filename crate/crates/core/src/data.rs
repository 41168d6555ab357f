//! Observation matrix and delimited-text ingestion.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// An `n x d` matrix of finite observations, stored row-major, with per-column means.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: Vec<f64>,
    n: usize,
    d: usize,
    column_means: Vec<f64>,
    column_names: Vec<String>,
}

impl DataMatrix {
    /// Builds a matrix from row-major values. Column names default to `v1..vd`.
    pub fn new(values: Vec<f64>, n: usize, d: usize, names: Option<Vec<String>>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::EmptyInput);
        }
        if values.len() != n * d {
            return Err(Error::LengthMismatch {
                expected: n * d,
                actual: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                row: pos / d + 1,
                column: pos % d + 1,
                message: "non-finite value".into(),
            });
        }
        let column_names = match names {
            Some(names) if names.len() != d => {
                return Err(Error::LengthMismatch {
                    expected: d,
                    actual: names.len(),
                })
            }
            Some(names) => names,
            None => (1..=d).map(|j| format!("v{j}")).collect(),
        };
        let mut column_means = vec![0.0; d];
        for row in values.chunks_exact(d) {
            for (m, v) in column_means.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut column_means {
            *m /= n as f64;
        }
        Ok(Self {
            values,
            n,
            d,
            column_means,
            column_names,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Parse {
                    row: i + 1,
                    column: row.len().min(d) + 1,
                    message: format!("expected {d} fields, found {}", row.len()),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(values, rows.len(), d, None)
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.d {
            return Err(Error::LengthMismatch {
                expected: self.d,
                actual: names.len(),
            });
        }
        self.column_names = names;
        Ok(self)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.d + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.d)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn column_means(&self) -> &[f64] {
        &self.column_means
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    /// Population variance (divisor `n`) of column `j`, by the two-pass formula.
    pub fn column_variance(&self, j: usize) -> f64 {
        let mean = self.column_means[j];
        self.rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / self.n as f64
    }

    /// Writes a header line and one comma-separated line per observation.
    /// Values use the shortest representation that parses back to the same bits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", self.column_names.join(","))?;
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    /// Field delimiter; detected from the first line when `None`.
    pub delimiter: Option<u8>,
    /// Whether the first row is a header; detected when `None` (any non-numeric
    /// cell in the first row marks it as a header).
    pub has_header: Option<bool>,
}

/// Reads a delimited numeric table into a validated [`DataMatrix`].
pub fn load_data<R: Read>(source: R, options: &ParseOptions) -> Result<DataMatrix> {
    let table = RawTable::read(source, options)?;
    table.into_matrix(None).map(|(data, _)| data)
}

/// Like [`load_data`], but sets aside one column (by header name, or by 1-based
/// index) as ground-truth labels; that column may hold arbitrary text.
pub fn load_labeled<R: Read>(
    source: R,
    options: &ParseOptions,
    label_column: &str,
) -> Result<(DataMatrix, Vec<String>)> {
    let table = RawTable::read(source, options)?;
    let idx = table.column_index(label_column)?;
    let (data, labels) = table.into_matrix(Some(idx))?;
    Ok((data, labels.unwrap_or_default()))
}

pub fn detect_delimiter(first_line: &str) -> u8 {
    let mut best = (b',', 0usize);
    for cand in [b',', b';', b'\t'] {
        let count = first_line.bytes().filter(|&b| b == cand).count();
        if count > best.1 {
            best = (cand, count);
        }
    }
    best.0
}

struct RawTable {
    header: Option<Vec<String>>,
    /// (1-based line number, fields)
    records: Vec<(usize, Vec<String>)>,
}

impl RawTable {
    fn read<R: Read>(mut source: R, options: &ParseOptions) -> Result<Self> {
        let mut text = String::new();
        source.read_to_string(&mut text)?;
        let first_line = text.lines().find(|l| !l.trim().is_empty()).ok_or(Error::EmptyInput)?;
        let delimiter = options.delimiter.unwrap_or_else(|| detect_delimiter(first_line));

        let mut reader = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());

        let mut records = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| {
                let row = e.position().map_or(0, |p| p.line() as usize);
                Error::Parse {
                    row,
                    column: 0,
                    message: e.to_string(),
                }
            })?;
            let line = rec.position().map_or(records.len() + 1, |p| p.line() as usize);
            if rec.iter().all(str::is_empty) {
                continue;
            }
            records.push((line, rec.iter().map(str::to_owned).collect::<Vec<_>>()));
        }
        if records.is_empty() {
            return Err(Error::EmptyInput);
        }

        let header_present = options.has_header.unwrap_or_else(|| {
            records[0].1.iter().any(|cell| !cell.is_empty() && cell.parse::<f64>().is_err())
        });
        let header = if header_present {
            Some(records.remove(0).1)
        } else {
            None
        };
        if records.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(Self { header, records })
    }

    fn width(&self) -> usize {
        self.header
            .as_ref()
            .map_or_else(|| self.records[0].1.len(), Vec::len)
    }

    fn column_index(&self, key: &str) -> Result<usize> {
        if let Some(h) = &self.header {
            if let Some(pos) = h.iter().position(|c| c == key) {
                return Ok(pos);
            }
        }
        match key.parse::<usize>() {
            Ok(k) if k >= 1 && k <= self.width() => Ok(k - 1),
            _ => Err(Error::Unknown {
                kind: "column",
                name: key.to_owned(),
            }),
        }
    }

    fn into_matrix(self, label_col: Option<usize>) -> Result<(DataMatrix, Option<Vec<String>>)> {
        let width = self.width();
        let d = width - usize::from(label_col.is_some());
        if d == 0 {
            return Err(Error::EmptyInput);
        }
        let n = self.records.len();
        let mut values = Vec::with_capacity(n * d);
        let mut labels = label_col.map(|_| Vec::with_capacity(n));
        for (line, fields) in &self.records {
            if fields.len() != width {
                return Err(Error::Parse {
                    row: *line,
                    column: fields.len().min(width) + 1,
                    message: format!("expected {width} fields, found {}", fields.len()),
                });
            }
            for (c, cell) in fields.iter().enumerate() {
                if Some(c) == label_col {
                    if let Some(l) = labels.as_mut() {
                        l.push(cell.clone());
                    }
                    continue;
                }
                let err = |message: String| Error::Parse {
                    row: *line,
                    column: c + 1,
                    message,
                };
                if cell.is_empty() {
                    return Err(err("missing value".into()));
                }
                let v: f64 = cell
                    .parse()
                    .map_err(|_| err(format!("non-numeric value '{cell}'")))?;
                if !v.is_finite() {
                    return Err(err(format!("non-finite value '{cell}'")));
                }
                values.push(v);
            }
        }
        let names = self.header.map(|h| {
            h.into_iter()
                .enumerate()
                .filter(|(c, _)| Some(*c) != label_col)
                .map(|(_, name)| name)
                .collect()
        });
        Ok((DataMatrix::new(values, n, d, names)?, labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<DataMatrix> {
        load_data(text.as_bytes(), &ParseOptions::default())
    }

    #[test]
    fn column_means_of_small_csv() {
        let data = parse("1,2\n3,4\n5,6").unwrap();
        assert_eq!((data.n(), data.d()), (3, 2));
        assert_eq!(data.column_means(), &[3.0, 4.0]);
        assert_eq!(data.column_names(), &["v1", "v2"]);
    }

    #[test]
    fn header_names_pass_through() {
        let data = parse("a,b\n1,2\n3,4\n5,6").unwrap();
        assert_eq!(data.column_names(), &["a", "b"]);
        assert_eq!(data.n(), 3);
    }

    #[test]
    fn bad_cell_reports_row() {
        match parse("1,2\nx,4\n5,6") {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (2, 1)),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ragged_and_empty_inputs_are_rejected() {
        assert!(matches!(parse("1,2\n3\n"), Err(Error::Parse { row: 2, .. })));
        assert!(matches!(parse(""), Err(Error::EmptyInput)));
        assert!(matches!(parse("a,b\n"), Err(Error::EmptyInput)));
        assert!(matches!(parse("1,\n2,3"), Err(Error::Parse { row: 1, column: 2, .. })));
        assert!(matches!(parse("1,NaN\n2,3"), Err(Error::Parse { .. })));
    }

    #[test]
    fn delimiters_are_detected() {
        let semi = parse("a;b\n1.5;2\n3;4").unwrap();
        assert_eq!(semi.column_means(), &[2.25, 3.0]);
        let tab = parse("1\t2\t3\n4\t5\t6").unwrap();
        assert_eq!(tab.d(), 3);
    }

    #[test]
    fn label_column_is_split_off() {
        let text = "Status,Length,Left\ngenuine,214.8,131.0\ncounterfeit,214.6,129.7\n";
        let (data, labels) = load_labeled(text.as_bytes(), &ParseOptions::default(), "Status").unwrap();
        assert_eq!(data.column_names(), &["Length", "Left"]);
        assert_eq!(labels, vec!["genuine", "counterfeit"]);
        assert_eq!(data.get(1, 1), 129.7);
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bit_exact(
            rows in prop::collection::vec(prop::collection::vec(-1e12f64..1e12, 3), 1..20)
        ) {
            let data = DataMatrix::from_rows(&rows).unwrap();
            let mut buf = Vec::new();
            data.write_csv(&mut buf).unwrap();
            let back = load_data(buf.as_slice(), &ParseOptions::default()).unwrap();
            prop_assert_eq!(back.values(), data.values());
            prop_assert_eq!(back.column_names(), data.column_names());
        }
    }
}
