//! Observational datasets `(X, T, Y)` with optional ground truth, and their CSV form.
//!
//! CSV layout: a header row naming `x0..x{D-1}`, `t`, `y` and optionally `e`,
//! `mu0`, `mu1` (in any order). Values are written with the shortest decimal
//! representation that parses back to the same `f64`, so save/load is exact.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{invalid, shape, Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub t: Vec<bool>,
    pub y: Vec<f64>,
    /// True propensity `P(T = 1 | X)`, when known.
    pub e_true: Option<Vec<f64>>,
    /// Conditional outcome means `E[Y | T = 0, X]`.
    pub mu0: Option<Vec<f64>>,
    /// Conditional outcome means `E[Y | T = 1, X]`.
    pub mu1: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(x: Matrix, t: Vec<bool>, y: Vec<f64>) -> Result<Self> {
        let ds = Self {
            x,
            t,
            y,
            e_true: None,
            mu0: None,
            mu1: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_propensity(mut self, e: Vec<f64>) -> Result<Self> {
        self.e_true = Some(e);
        self.validate()?;
        Ok(self)
    }

    pub fn with_outcome_means(mut self, mu0: Vec<f64>, mu1: Vec<f64>) -> Result<Self> {
        self.mu0 = Some(mu0);
        self.mu1 = Some(mu1);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.rows();
        let check = |name: &str, len: usize| {
            if len != n {
                Err(shape(format!("{name} has length {len}, expected {n}")))
            } else {
                Ok(())
            }
        };
        check("t", self.t.len())?;
        check("y", self.y.len())?;
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("outcome y".into()));
        }
        for (name, col) in [("e", &self.e_true), ("mu0", &self.mu0), ("mu1", &self.mu1)] {
            if let Some(col) = col {
                check(name, col.len())?;
                if col.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(name.into()));
                }
            }
        }
        if let Some(e) = &self.e_true {
            if e.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(invalid("true propensity outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.t[i]).collect()
    }

    pub fn control_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.t[i]).collect()
    }

    pub fn n_treated(&self) -> usize {
        self.t.iter().filter(|&&t| t).count()
    }

    /// Every `e_true` strictly inside `(0, 1)`; `None` when the propensity is unknown.
    pub fn has_overlap(&self) -> Option<bool> {
        self.e_true
            .as_ref()
            .map(|e| e.iter().all(|&p| p > 0.0 && p < 1.0))
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let pick = |v: &Vec<f64>| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            x: self.x.select_rows(indices),
            t: indices.iter().map(|&i| self.t[i]).collect(),
            y: pick(&self.y),
            e_true: self.e_true.as_ref().map(pick),
            mu0: self.mu0.as_ref().map(pick),
            mu1: self.mu1.as_ref().map(pick),
        }
    }

    /// Rows of `self` followed by rows of `other`; optional columns survive only if both have them.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        let join = |a: &Option<Vec<f64>>, b: &Option<Vec<f64>>| match (a, b) {
            (Some(a), Some(b)) => Some([a.as_slice(), b.as_slice()].concat()),
            _ => None,
        };
        let ds = Self {
            x: self.x.vstack(&other.x)?,
            t: [self.t.as_slice(), other.t.as_slice()].concat(),
            y: [self.y.as_slice(), other.y.as_slice()].concat(),
            e_true: join(&self.e_true, &other.e_true),
            mu0: join(&self.mu0, &other.mu0),
            mu1: join(&self.mu1, &other.mu1),
        };
        Ok(ds)
    }

    pub fn treatment_as_f64(&self) -> Vec<f64> {
        self.t.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Center and scale continuous columns; `{0,1}`-valued columns are left untouched.
    pub standardize: bool,
}

pub fn load_csv(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Dataset> {
    let mut file = File::open(path)?;
    let mut text = String::new();
    file.read_to_string(&mut text)?;
    parse_csv(&text, opts)
}

pub fn parse_csv(text: &str, opts: LoadOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let layout = ColumnLayout::from_headers(&headers)?;

    let d = layout.x.len();
    let mut xs = Vec::new();
    let mut t = Vec::new();
    let mut y = Vec::new();
    let mut e = layout.e.map(|_| Vec::new());
    let mut mu0 = layout.mu0.map(|_| Vec::new());
    let mut mu1 = layout.mu1.map(|_| Vec::new());

    for (i, record) in reader.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                message: format!("expected {} fields, got {}", headers.len(), record.len()),
            });
        }
        let num = |col: usize| -> Result<f64> {
            let raw = &record[col];
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                message: format!("column {:?}: {raw:?} is not a number", headers[col]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("column {:?}: non-finite value", headers[col]),
                });
            }
            Ok(v)
        };
        for &c in &layout.x {
            xs.push(num(c)?);
        }
        let tv = num(layout.t)?;
        if tv != 0.0 && tv != 1.0 {
            return Err(Error::Parse {
                row,
                message: format!("treatment must be 0 or 1, got {}", &record[layout.t]),
            });
        }
        t.push(tv == 1.0);
        y.push(num(layout.y)?);
        if let (Some(c), Some(v)) = (layout.e, e.as_mut()) {
            v.push(num(c)?);
        }
        if let (Some(c), Some(v)) = (layout.mu0, mu0.as_mut()) {
            v.push(num(c)?);
        }
        if let (Some(c), Some(v)) = (layout.mu1, mu1.as_mut()) {
            v.push(num(c)?);
        }
    }

    let n = t.len();
    let mut x = Matrix::new(n, d, xs)?;
    if opts.standardize {
        standardize_continuous(&mut x);
    }
    let ds = Dataset {
        x,
        t,
        y,
        e_true: e,
        mu0,
        mu1,
    };
    ds.validate()?;
    Ok(ds)
}

struct ColumnLayout {
    x: Vec<usize>,
    t: usize,
    y: usize,
    e: Option<usize>,
    mu0: Option<usize>,
    mu1: Option<usize>,
}

impl ColumnLayout {
    fn from_headers(headers: &[String]) -> Result<Self> {
        let find = |name: &str| headers.iter().position(|h| h == name);
        let mut x_cols: Vec<(usize, usize)> = headers
            .iter()
            .enumerate()
            .filter_map(|(pos, h)| {
                let idx = h.strip_prefix('x')?;
                if idx.is_empty() || !idx.bytes().all(|b| b.is_ascii_digit()) {
                    return None;
                }
                idx.parse::<usize>().ok().map(|k| (k, pos))
            })
            .collect();
        x_cols.sort();
        for (expected, &(k, _)) in x_cols.iter().enumerate() {
            if k != expected {
                return Err(Error::Parse {
                    row: 1,
                    message: format!("covariate columns must be x0..x{{D-1}}; missing x{expected}"),
                });
            }
        }
        let missing = |name: &str| Error::Parse {
            row: 1,
            message: format!("missing required column {name:?}"),
        };
        let mu0 = find("mu0");
        let mu1 = find("mu1");
        if mu0.is_some() != mu1.is_some() {
            return Err(Error::Parse {
                row: 1,
                message: "mu0 and mu1 must be given together".into(),
            });
        }
        Ok(Self {
            x: x_cols.into_iter().map(|(_, pos)| pos).collect(),
            t: find("t").ok_or_else(|| missing("t"))?,
            y: find("y").ok_or_else(|| missing("y"))?,
            e: find("e"),
            mu0,
            mu1,
        })
    }
}

/// Divisor floor for zero-variance columns.
const MIN_SCALE: f64 = 1e-12;

/// Center and scale every column that is not `{0,1}`-valued (population standard deviation).
pub fn standardize_continuous(x: &mut Matrix) {
    let (n, d) = x.shape();
    if n == 0 {
        return;
    }
    for c in 0..d {
        let col = x.column(c);
        if col.iter().all(|&v| v == 0.0 || v == 1.0) {
            continue;
        }
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = var.sqrt().max(MIN_SCALE);
        for r in 0..n {
            x[(r, c)] = (x[(r, c)] - mean) / scale;
        }
    }
}

pub fn write_csv(ds: &Dataset, mut out: impl Write) -> Result<()> {
    let mut header: Vec<String> = (0..ds.dim()).map(|k| format!("x{k}")).collect();
    header.push("t".into());
    header.push("y".into());
    if ds.e_true.is_some() {
        header.push("e".into());
    }
    if ds.mu0.is_some() && ds.mu1.is_some() {
        header.push("mu0".into());
        header.push("mu1".into());
    }
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.x.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(if ds.t[i] { "1".into() } else { "0".into() });
        rec.push(ds.y[i].to_string());
        if let Some(e) = &ds.e_true {
            rec.push(e[i].to_string());
        }
        if let (Some(m0), Some(m1)) = (&ds.mu0, &ds.mu1) {
            rec.push(m0[i].to_string());
            rec.push(m1[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    let mut buf = std::io::BufWriter::new(file);
    write_csv(ds, &mut buf)?;
    buf.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let x = Matrix::from_rows(&[vec![0.1, 1.0], vec![-2.5e-7, 0.0]]).unwrap();
        Dataset::new(x, vec![true, false], vec![1.0 / 3.0, 2.0])
            .unwrap()
            .with_propensity(vec![0.3, 0.7])
            .unwrap()
            .with_outcome_means(vec![0.0, 1.5], vec![2.0, 3.5])
            .unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = tiny();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = parse_csv(std::str::from_utf8(&buf).unwrap(), LoadOptions::default()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.y[0].to_bits(), (1.0f64 / 3.0).to_bits());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_csv(&tiny(), &path).unwrap();
        assert_eq!(load_csv(&path, LoadOptions::default()).unwrap(), tiny());
    }

    #[test]
    fn propensity_column_propagates() {
        let ds = parse_csv("x0,t,y,e\n1,1,0,0.25\n2,0,1,0.5\n", LoadOptions::default()).unwrap();
        assert_eq!(ds.e_true, Some(vec![0.25, 0.5]));
        assert!(ds.mu0.is_none());
        assert_eq!(ds.has_overlap(), Some(true));
    }

    #[test]
    fn columns_may_come_in_any_order() {
        let ds = parse_csv("y,x1,t,x0\n5,20,0,10\n6,21,1,11\n", LoadOptions::default()).unwrap();
        assert_eq!(ds.x.row(0), &[10.0, 20.0]);
        assert_eq!(ds.t, vec![false, true]);
        assert_eq!(ds.y, vec![5.0, 6.0]);
    }

    #[test]
    fn bad_rows_report_row_number() {
        let ragged = parse_csv("x0,t,y\n1,0,1\n2,1\n", LoadOptions::default());
        assert!(matches!(ragged, Err(Error::Parse { row: 3, .. })));
        let nonbinary = parse_csv("x0,t,y\n1,2,1\n", LoadOptions::default());
        assert!(matches!(nonbinary, Err(Error::Parse { row: 2, .. })));
        let nan = parse_csv("x0,t,y\nNaN,1,1\n", LoadOptions::default());
        assert!(matches!(nan, Err(Error::Parse { row: 2, .. })));
        let gap = parse_csv("x0,x2,t,y\n1,1,1,1\n", LoadOptions::default());
        assert!(matches!(gap, Err(Error::Parse { row: 1, .. })));
    }

    #[test]
    fn standardization_skips_binary_and_guards_constant_columns() {
        let text = "x0,x1,x2,t,y\n1,3,0,1,0\n3,3,1,0,0\n5,3,1,1,0\n";
        let ds = parse_csv(text, LoadOptions { standardize: true }).unwrap();
        let c0 = ds.x.column(0);
        let sd = (8.0f64 / 3.0).sqrt();
        assert!((c0[0] + 2.0 / sd).abs() < 1e-12);
        assert!(c0[1].abs() < 1e-15);
        assert_eq!(ds.x.column(1), vec![0.0, 0.0, 0.0]);
        assert_eq!(ds.x.column(2), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn subset_and_concat() {
        let ds = tiny();
        let joined = ds.subset(&[1]).concat(&ds.subset(&[0])).unwrap();
        assert_eq!(joined.t, vec![false, true]);
        assert_eq!(joined.mu1, Some(vec![3.5, 2.0]));
        assert_eq!(ds.treated_indices(), vec![0]);
        assert_eq!(ds.control_indices(), vec![1]);
    }
}
