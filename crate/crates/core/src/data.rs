//! Survey units, two-sample matching problems, CSV input and the fused
//! fractional output format.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FiError, Result};

/// One survey record. Which responses are present depends on the sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: String,
    pub weight: f64,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub y1: Option<f64>,
    pub y2: Option<f64>,
}

impl Unit {
    /// Stage-A covariate row `[x1..., x2...]`.
    pub fn covariates(&self) -> Vec<f64> {
        let mut x = self.x1.clone();
        x.extend_from_slice(&self.x2);
        x
    }
}

/// Column names for each variable role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleMap {
    pub x1: Vec<String>,
    pub x2: Vec<String>,
    pub y1: String,
    pub y2: String,
}

impl RoleMap {
    pub fn new(x1: &[&str], x2: &[&str], y1: &str, y2: &str) -> Self {
        Self {
            x1: x1.iter().map(|s| s.to_string()).collect(),
            x2: x2.iter().map(|s| s.to_string()).collect(),
            y1: y1.to_string(),
            y2: y2.to_string(),
        }
    }
}

/// Sample A observes `(x, y1)`, sample B observes `(x, y2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingProblem {
    pub sample_a: Vec<Unit>,
    pub sample_b: Vec<Unit>,
    pub roles: RoleMap,
}

impl MatchingProblem {
    pub fn new(sample_a: Vec<Unit>, sample_b: Vec<Unit>, roles: RoleMap) -> Result<Self> {
        let p = Self {
            sample_a,
            sample_b,
            roles,
        };
        p.validate()?;
        Ok(p)
    }

    /// Builds a problem from plain arrays with unit weights. Rows of `xa`
    /// and `xb` hold `[x1..., x2...]` with `k1` leading x1 columns.
    pub fn from_arrays(xa: &[Vec<f64>], y1: &[f64], xb: &[Vec<f64>], y2: &[f64], k1: usize) -> Result<Self> {
        if xa.len() != y1.len() || xb.len() != y2.len() {
            return Err(FiError::Argument("covariate and response lengths differ".into()));
        }
        let k = xa.first().or(xb.first()).map_or(0, |r| r.len());
        if k1 > k {
            return Err(FiError::Argument(format!("{k1} x1 columns but rows have {k}")));
        }
        let unit = |prefix: &str, i: usize, x: &[f64], y1: Option<f64>, y2: Option<f64>| Unit {
            id: format!("{prefix}{i}"),
            weight: 1.0,
            x1: x[..k1].to_vec(),
            x2: x[k1..].to_vec(),
            y1,
            y2,
        };
        let a = xa.iter().zip(y1).enumerate().map(|(i, (x, y))| unit("a", i, x, Some(*y), None)).collect();
        let b = xb.iter().zip(y2).enumerate().map(|(i, (x, y))| unit("b", i, x, None, Some(*y))).collect();
        let roles = RoleMap {
            x1: (0..k1).map(|c| format!("x1_{c}")).collect(),
            x2: (k1..k).map(|c| format!("x2_{}", c - k1)).collect(),
            y1: "y1".into(),
            y2: "y2".into(),
        };
        Self::new(a, b, roles)
    }

    pub fn n_a(&self) -> usize {
        self.sample_a.len()
    }

    pub fn n_b(&self) -> usize {
        self.sample_b.len()
    }

    /// Checks the observation pattern: y1 only in A, y2 only in B, matching
    /// covariate dimensions, positive finite weights, unique ids per sample.
    pub fn validate(&self) -> Result<()> {
        if self.sample_a.is_empty() || self.sample_b.is_empty() {
            return Err(FiError::Validation("both samples must be non-empty".into()));
        }
        let (k1, k2) = (self.roles.x1.len(), self.roles.x2.len());
        for (name, sample) in [("A", &self.sample_a), ("B", &self.sample_b)] {
            let mut ids = HashSet::new();
            for u in sample {
                if !ids.insert(u.id.as_str()) {
                    return Err(FiError::Validation(format!("duplicate id `{}` in sample {name}", u.id)));
                }
                if !(u.weight > 0.0) || !u.weight.is_finite() {
                    return Err(FiError::Validation(format!("unit `{}` in sample {name} has weight {}", u.id, u.weight)));
                }
                if u.x1.len() != k1 || u.x2.len() != k2 {
                    return Err(FiError::Validation(format!(
                        "unit `{}` in sample {name} has {}+{} covariates, expected {k1}+{k2}",
                        u.id,
                        u.x1.len(),
                        u.x2.len()
                    )));
                }
                if u.x1.iter().chain(&u.x2).any(|v| !v.is_finite()) {
                    return Err(FiError::Validation(format!("unit `{}` in sample {name} has non-finite covariates", u.id)));
                }
                let (own, other) = if name == "A" { (u.y1, u.y2) } else { (u.y2, u.y1) };
                match own {
                    Some(v) if v.is_finite() => {}
                    _ => {
                        return Err(FiError::Validation(format!(
                            "unit `{}` in sample {name} lacks a finite {}",
                            u.id,
                            if name == "A" { "y1" } else { "y2" }
                        )))
                    }
                }
                if other.is_some() {
                    return Err(FiError::Validation(format!(
                        "unit `{}` in sample {name} observes both responses",
                        u.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per recipient: donor values, log initial weights and normalized
/// fractional weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionalDataset {
    pub donors: Vec<Vec<f64>>,
    pub log_initial: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

impl FractionalDataset {
    pub fn n_recipients(&self) -> usize {
        self.donors.len()
    }

    pub fn total_donors(&self) -> usize {
        self.donors.iter().map(Vec::len).sum()
    }

    /// Checks non-negativity and per-recipient normalization within `tol`.
    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        for (i, w) in self.weights.iter().enumerate() {
            if w.iter().any(|v| !(*v >= 0.0)) {
                return Err(FiError::Validation(format!("recipient {i} has a negative or NaN weight")));
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(FiError::Validation(format!("weights of recipient {i} sum to {s}")));
            }
        }
        Ok(())
    }

    /// Fractional average `sum_j w_ij g(v_ij)` for every recipient.
    pub fn fractional_mean(&self, g: impl Fn(usize, f64) -> f64) -> Vec<f64> {
        self.donors
            .iter()
            .zip(&self.weights)
            .enumerate()
            .map(|(i, (d, w))| d.iter().zip(w).map(|(v, wi)| wi * g(i, *v)).sum())
            .collect()
    }
}

fn io_err(path: &Path, source: std::io::Error) -> FiError {
    FiError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, source: csv::Error) -> FiError {
    FiError::Csv {
        path: path.display().to_string(),
        source,
    }
}

/// A parsed CSV: header plus records, with located numeric access.
struct Table {
    path: String,
    columns: HashMap<String, usize>,
    records: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
        let columns = header.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect();
        let records = reader
            .records()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(Self {
            path: path.display().to_string(),
            columns,
            records,
        })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.columns.get(name).copied().ok_or_else(|| FiError::MissingColumn {
            column: name.to_string(),
            path: self.path.clone(),
        })
    }

    /// Numeric cell; `row` is the 1-based data row. Blank cells are `None`.
    fn number(&self, row: usize, col: usize, name: &str) -> Result<Option<f64>> {
        let cell = self.records[row - 1].get(col).unwrap_or("");
        if cell.is_empty() {
            return Ok(None);
        }
        match cell.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            _ => Err(FiError::Parse {
                path: self.path.clone(),
                row,
                column: name.to_string(),
                message: format!("`{cell}` is not a finite number"),
            }),
        }
    }

    fn required(&self, row: usize, col: usize, name: &str) -> Result<f64> {
        self.number(row, col, name)?.ok_or_else(|| FiError::Parse {
            path: self.path.clone(),
            row,
            column: name.to_string(),
            message: "missing value".into(),
        })
    }
}

fn read_sample(path: &Path, roles: &RoleMap, response: &str, is_a: bool) -> Result<Vec<Unit>> {
    let t = Table::read(path)?;
    let id = t.column("id")?;
    let weight = t.columns.get("weight").copied();
    let x1: Vec<usize> = roles.x1.iter().map(|c| t.column(c)).collect::<Result<_>>()?;
    let x2: Vec<usize> = roles.x2.iter().map(|c| t.column(c)).collect::<Result<_>>()?;
    let y = t.column(response)?;
    let mut units = Vec::with_capacity(t.records.len());
    for row in 1..=t.records.len() {
        let w = match weight {
            Some(c) => t.required(row, c, "weight")?,
            None => 1.0,
        };
        let covs = |cols: &[usize], names: &[String]| -> Result<Vec<f64>> {
            cols.iter().zip(names).map(|(c, n)| t.required(row, *c, n)).collect()
        };
        let value = t.required(row, y, response)?;
        units.push(Unit {
            id: t.records[row - 1].get(id).unwrap_or("").to_string(),
            weight: w,
            x1: covs(&x1, &roles.x1)?,
            x2: covs(&x2, &roles.x2)?,
            y1: is_a.then_some(value),
            y2: (!is_a).then_some(value),
        });
    }
    Ok(units)
}

/// Reads and validates the two samples. A missing `weight` column means all
/// weights are 1.
pub fn load_samples(path_a: &Path, path_b: &Path, roles: &RoleMap) -> Result<MatchingProblem> {
    let a = read_sample(path_a, roles, &roles.y1, true)?;
    let b = read_sample(path_b, roles, &roles.y2, false)?;
    MatchingProblem::new(a, b, roles.clone())
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes one row per (recipient, donor) with 17 significant digits.
pub fn write_fractional(dataset: &FractionalDataset, problem: &MatchingProblem, path: &Path) -> Result<()> {
    if dataset.n_recipients() != problem.n_b() {
        return Err(FiError::Argument(format!(
            "{} recipients in dataset, {} units in sample B",
            dataset.n_recipients(),
            problem.n_b()
        )));
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let mut header = vec!["recipient_id", "donor_index", "fractional_weight", "y1_imputed", "y2"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend(problem.roles.x1.iter().cloned());
    header.extend(problem.roles.x2.iter().cloned());
    let mut writer = csv::Writer::from_writer(&mut out);
    writer.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, unit) in problem.sample_b.iter().enumerate() {
        for (j, (v, w)) in dataset.donors[i].iter().zip(&dataset.weights[i]).enumerate() {
            let mut rec = vec![unit.id.clone(), (j + 1).to_string(), fmt17(*w), fmt17(*v)];
            rec.push(fmt17(unit.y2.unwrap_or(f64::NAN)));
            rec.extend(unit.x1.iter().chain(&unit.x2).map(|x| fmt17(*x)));
            writer.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
    }
    writer.flush().map_err(|e| io_err(path, e))?;
    drop(writer);
    out.flush().map_err(|e| io_err(path, e))
}

/// Contents of a fused CSV grouped by recipient in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedData {
    pub recipient_ids: Vec<String>,
    pub donors: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub y2: Vec<f64>,
}

/// Reads a file written by [`write_fractional`].
pub fn read_fractional(path: &Path) -> Result<FusedData> {
    let t = Table::read(path)?;
    let rid = t.column("recipient_id")?;
    let (w, v, y2) = (t.column("fractional_weight")?, t.column("y1_imputed")?, t.column("y2")?);
    let mut out = FusedData {
        recipient_ids: Vec::new(),
        donors: Vec::new(),
        weights: Vec::new(),
        y2: Vec::new(),
    };
    for row in 1..=t.records.len() {
        let id = t.records[row - 1].get(rid).unwrap_or("");
        if out.recipient_ids.last().map(String::as_str) != Some(id) {
            out.recipient_ids.push(id.to_string());
            out.donors.push(Vec::new());
            out.weights.push(Vec::new());
            out.y2.push(t.required(row, y2, "y2")?);
        }
        out.weights.last_mut().unwrap().push(t.required(row, w, "fractional_weight")?);
        out.donors.last_mut().unwrap().push(t.required(row, v, "y1_imputed")?);
    }
    Ok(out)
}
