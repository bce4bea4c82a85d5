//! File formats for evidence, datum factors, samples and density grids.
//!
//! The binary matrix format is little-endian throughout:
//!
//! ```text
//! b"TMCMATRX"  u64 rows  u64 cols  rows*cols f64 means  [rows*cols f64 variances]
//! ```
//!
//! The variance block is optional. CSV input has one row per leaf or datum
//! and an optional header; with a header, columns whose name starts with
//! `var` hold variances and the rest hold means, in order.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grw::GaussianFactor;
use crate::loracs::{AttachmentPosterior, DatumFactor};
use crate::predictive::{Attachment, DensityGrid, GridSpec};

pub const MATRIX_MAGIC: &[u8; 8] = b"TMCMATRX";
const HEADER_LEN: usize = 24;

/// Rows of means with optional per-coordinate variances.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorTable {
    pub means: Vec<Vec<f64>>,
    pub variances: Option<Vec<Vec<f64>>>,
}

impl FactorTable {
    pub fn new(means: Vec<Vec<f64>>, variances: Option<Vec<Vec<f64>>>) -> Result<Self> {
        let d = means.first().map_or(0, Vec::len);
        let bad = means.iter().chain(variances.iter().flatten()).find(|r| r.len() != d);
        if let Some(r) = bad {
            return Err(Error::Dimension { expected: d, got: r.len() });
        }
        if let Some(v) = &variances {
            if v.len() != means.len() {
                return Err(Error::Arity {
                    expected: means.len(),
                    got: v.len(),
                });
            }
        }
        Ok(FactorTable { means, variances })
    }

    pub fn rows(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Leaf evidence; rows without variances are exact observations.
    pub fn to_evidence(&self) -> Result<Vec<GaussianFactor>> {
        (0..self.rows())
            .map(|i| match &self.variances {
                Some(v) => GaussianFactor::new(self.means[i].clone(), v[i].clone()),
                None => GaussianFactor::observed(self.means[i].clone()),
            })
            .collect()
    }

    /// Datum factors, using `default_variance` when the table has none.
    pub fn to_data(&self, default_variance: Option<f64>) -> Result<Vec<DatumFactor>> {
        (0..self.rows())
            .map(|i| {
                let var = match (&self.variances, default_variance) {
                    (Some(v), _) => v[i].clone(),
                    (None, Some(s)) => vec![s; self.dim()],
                    (None, None) => {
                        return Err(Error::Argument(
                            "datum factors need variances, either in the file or as a default".into(),
                        ))
                    }
                };
                DatumFactor::new(self.means[i].clone(), var)
            })
            .collect()
    }
}

/// Encode a table in the binary matrix format.
pub fn encode_matrix(table: &FactorTable) -> Vec<u8> {
    let (r, c) = (table.rows(), table.dim());
    let blocks = 1 + table.variances.is_some() as usize;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * r * c * blocks);
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(r as u64).to_le_bytes());
    out.extend_from_slice(&(c as u64).to_le_bytes());
    for row in table.means.iter().chain(table.variances.iter().flatten()) {
        for x in row {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Decode the binary matrix format.
pub fn decode_matrix(bytes: &[u8]) -> Result<FactorTable> {
    let fail = |offset, message: &str| Error::Format {
        offset,
        message: message.into(),
    };
    if bytes.len() < HEADER_LEN || &bytes[..8] != MATRIX_MAGIC {
        return Err(fail(0, "missing TMCMATRX header"));
    }
    let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
    let (r, c) = (word(8), word(16));
    let block = r
        .checked_mul(c)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| fail(8, "matrix shape overflows"))?;
    let body = bytes.len() - HEADER_LEN;
    let has_var = if body == block {
        false
    } else if body == 2 * block {
        true
    } else {
        return Err(fail(
            HEADER_LEN,
            &format!("{r}x{c} matrix needs {block} or {} payload bytes, found {body}", 2 * block),
        ));
    };
    let (r, c) = (r as usize, c as usize);
    let read_block = |start: usize| -> Vec<Vec<f64>> {
        (0..r)
            .map(|i| {
                (0..c)
                    .map(|j| {
                        let at = start + 8 * (i * c + j);
                        f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
                    })
                    .collect()
            })
            .collect()
    };
    let means = read_block(HEADER_LEN);
    let variances = has_var.then(|| read_block(HEADER_LEN + block));
    FactorTable::new(means, variances)
}

/// Parse CSV input. The first row is a header if any field fails to parse as
/// a number.
pub fn parse_csv(text: &str) -> Result<FactorTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut is_var: Option<Vec<bool>> = None;
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let nums: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let nums = match nums {
            Ok(n) => n,
            Err(_) if i == 0 => {
                is_var = Some(rec.iter().map(|h| h.to_ascii_lowercase().starts_with("var")).collect());
                continue;
            }
            Err(e) => {
                let bad = rec.iter().find(|f| f.parse::<f64>().is_err()).unwrap_or_default();
                return Err(Error::Parse {
                    line,
                    message: format!("{bad:?} is not a number: {e}"),
                });
            }
        };
        if let Some(flags) = &is_var {
            if flags.len() != nums.len() {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} fields, found {}", flags.len(), nums.len()),
                });
            }
        }
        let flags = is_var.clone().unwrap_or_else(|| vec![false; nums.len()]);
        means.push(nums.iter().zip(&flags).filter(|(_, v)| !**v).map(|(x, _)| *x).collect::<Vec<_>>());
        vars.push(nums.iter().zip(&flags).filter(|(_, v)| **v).map(|(x, _)| *x).collect::<Vec<_>>());
    }
    if means.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no data rows".into(),
        });
    }
    let has_var = vars.iter().any(|v| !v.is_empty());
    if has_var && vars[0].len() != means[0].len() {
        return Err(Error::Parse {
            line: 1,
            message: format!("{} mean columns but {} variance columns", means[0].len(), vars[0].len()),
        });
    }
    FactorTable::new(means, has_var.then_some(vars))
}

/// Write a table as CSV with an `m0..,var0..` header.
pub fn write_csv(table: &FactorTable) -> String {
    let d = table.dim();
    let mut header: Vec<String> = (0..d).map(|k| format!("m{k}")).collect();
    if table.variances.is_some() {
        header.extend((0..d).map(|k| format!("var{k}")));
    }
    let rows = (0..table.rows()).map(|i| {
        let mut r = table.means[i].clone();
        if let Some(v) = &table.variances {
            r.extend_from_slice(&v[i]);
        }
        r
    });
    csv_string(header, rows)
}

/// Read evidence or datum factors, choosing the format from the file content.
pub fn read_factor_file(path: impl AsRef<Path>) -> Result<FactorTable> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MATRIX_MAGIC) {
        decode_matrix(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
            line: 1,
            message: format!("not UTF-8 text: {e}"),
        })?;
        parse_csv(&text)
    }
}

pub fn write_file(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path.as_ref(), contents).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path, e))
}

fn csv_string<S: AsRef<str>, R: IntoIterator<Item = f64>>(header: Vec<S>, rows: impl Iterator<Item = R>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header.iter().map(AsRef::as_ref)).expect("in-memory write");
    for r in rows {
        w.write_record(r.into_iter().map(|x| x.to_string())).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV of numbers is UTF-8")
}

/// `datum,branch,probability,time` rows, one per datum and branch.
pub fn attachments_csv(posteriors: &[AttachmentPosterior]) -> String {
    let rows = posteriors.iter().enumerate().flat_map(|(n, post)| {
        post.branches
            .iter()
            .map(move |b| vec![n as f64, b.branch.child() as f64, b.log_prob.exp(), b.time])
    });
    csv_string(vec!["datum", "branch", "probability", "time"], rows)
}

/// `branch,time,z0..` rows, one per predictive sample.
pub fn samples_csv(samples: &[Attachment]) -> String {
    let d = samples.first().map_or(0, |s| s.location.len());
    let mut header = vec!["branch".to_string(), "time".to_string()];
    header.extend((0..d).map(|k| format!("z{k}")));
    let rows = samples.iter().map(|s| {
        let mut r = vec![s.branch.child() as f64, s.time];
        r.extend_from_slice(&s.location);
        r
    });
    csv_string(header, rows)
}

/// Grid values as CSV: one line per row of constant `y`, no header.
pub fn grid_csv(grid: &DensityGrid) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for row in grid.values.chunks(grid.spec.nx) {
        w.write_record(row.iter().map(|x| x.to_string())).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV of numbers is UTF-8")
}

/// Grid values in the binary matrix format, `ny` rows by `nx` columns.
pub fn grid_binary(grid: &DensityGrid) -> Vec<u8> {
    let rows = grid.values.chunks(grid.spec.nx).map(<[f64]>::to_vec).collect();
    encode_matrix(&FactorTable {
        means: rows,
        variances: None,
    })
}

#[derive(Serialize)]
struct GridSidecar<'a> {
    #[serde(flatten)]
    spec: &'a GridSpec,
    layout: &'static str,
    values: &'static str,
}

/// JSON description of a grid file's bounds and layout.
pub fn grid_sidecar(grid: &DensityGrid) -> String {
    serde_json::to_string_pretty(&GridSidecar {
        spec: &grid.spec,
        layout: "row-major, rows along y",
        values: "density",
    })
    .expect("grid spec serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip() {
        let t = FactorTable::new(vec![vec![1.0, -2.5], vec![0.1, 3e-300]], Some(vec![vec![0.5, 1.0], vec![2.0, 0.0]])).unwrap();
        let bytes = encode_matrix(&t);
        assert_eq!(&bytes[..8], b"TMCMATRX");
        assert_eq!(decode_matrix(&bytes).unwrap(), t);
        assert!(matches!(decode_matrix(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
    }

    #[test]
    fn csv_header_selects_variance_columns() {
        let t = parse_csv("x,y,var_x,var_y\n1,2,0.1,0.2\n3,4,0.3,0.4\n").unwrap();
        assert_eq!(t.means, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(t.variances.unwrap()[1], vec![0.3, 0.4]);
        let plain = parse_csv("1,2\n3,4\n").unwrap();
        assert_eq!(plain.rows(), 2);
        assert!(plain.variances.is_none());
    }

    #[test]
    fn csv_reports_line_of_bad_field() {
        match parse_csv("a,b\n1,2\n3,oops\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_round_trip() {
        let t = FactorTable::new(vec![vec![0.1, 1.0 / 3.0]], Some(vec![vec![1e-12, 7.0]])).unwrap();
        assert_eq!(parse_csv(&write_csv(&t)).unwrap(), t);
    }
}
