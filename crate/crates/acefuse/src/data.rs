//! Fused main/validation datasets and the two analysis views over them.
//!
//! CSV layout: a header row, then one row per unit with columns for the id,
//! treatment, outcome, the X covariates, the U covariates, the validation
//! flag and optionally the inclusion probability. Column names are mapped to
//! roles by a [`DatasetSchema`]. U cells may be empty on rows outside the
//! validation subset. Row order is kept, and downstream tie-breaking in
//! matching depends on it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How the validation subset was drawn from the main sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Design {
    /// Simple random subsample; ρ̂ = n₂/n₁ is implicit.
    SimpleRandom,
    /// Each unit carries a known inclusion probability π.
    KnownInclusion,
}

/// Which covariates a model or matching rule may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovariateSet {
    XU,
    XOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub id: String,
    pub a: u8,
    pub y: f64,
    pub x: Vec<f64>,
    pub u: Option<Vec<f64>>,
    pub in_validation: bool,
    pub pi: Option<f64>,
}

/// The full sample S₁ with its validation subset S₂ flagged in place.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedDataset {
    units: Vec<UnitRecord>,
    p: usize,
    q: usize,
    design: Design,
    warnings: Vec<String>,
}

impl FusedDataset {
    /// Validates the units and builds the dataset. U on units outside the
    /// validation subset is dropped with a warning.
    pub fn new(mut units: Vec<UnitRecord>, design: Design) -> Result<Self> {
        let first = units
            .first()
            .ok_or_else(|| Error::Data("dataset has no units".into()))?;
        let p = first.x.len();
        let q = units
            .iter()
            .find(|r| r.in_validation)
            .and_then(|r| r.u.as_ref().map(Vec::len))
            .unwrap_or(0);
        let mut warnings = Vec::new();
        let mut dropped_u = 0usize;
        let mut arms = [0usize; 2];
        for r in &mut units {
            if r.a > 1 {
                return Err(Error::Data(format!("unit {}: treatment must be 0 or 1", r.id)));
            }
            if r.x.len() != p {
                return Err(Error::Data(format!("unit {}: expected {p} X values", r.id)));
            }
            if !r.y.is_finite() || r.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("unit {}: non-finite outcome or X", r.id)));
            }
            if r.in_validation {
                match &r.u {
                    Some(u) if u.len() == q && u.iter().all(|v| v.is_finite()) => {}
                    _ => {
                        return Err(Error::Data(format!(
                            "incomplete confounder on validation unit {}",
                            r.id
                        )))
                    }
                }
                arms[r.a as usize] += 1;
            } else if r.u.take().is_some() {
                dropped_u += 1;
            }
            match (design, r.pi) {
                (Design::KnownInclusion, Some(pi)) => {
                    if !(pi > 0.0) {
                        return Err(Error::Data(format!(
                            "unit {}: inclusion probability must be positive",
                            r.id
                        )));
                    }
                    if !(pi <= 1.0) {
                        return Err(Error::Data(format!(
                            "unit {}: inclusion probability exceeds 1",
                            r.id
                        )));
                    }
                }
                (Design::KnownInclusion, None) => {
                    return Err(Error::Data(format!(
                        "unit {}: known-inclusion design needs an inclusion probability",
                        r.id
                    )))
                }
                (Design::SimpleRandom, Some(_)) => {
                    return Err(Error::Data(
                        "inclusion probabilities require known-inclusion regime".into(),
                    ))
                }
                (Design::SimpleRandom, None) => {}
            }
        }
        if arms[0] == 0 || arms[1] == 0 {
            return Err(Error::Data("validation subset must contain both treatment arms".into()));
        }
        if dropped_u > 0 {
            warnings.push(format!("ignored U values on {dropped_u} non-validation units"));
        }
        Ok(Self { units, p, q, design, warnings })
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn design(&self) -> Design {
        self.design
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn n1(&self) -> usize {
        self.units.len()
    }

    pub fn n2(&self) -> usize {
        self.units.iter().filter(|r| r.in_validation).count()
    }

    pub fn ids(&self) -> Vec<String> {
        self.units.iter().map(|r| r.id.clone()).collect()
    }
}

/// Maps CSV column names to roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub id: String,
    pub treatment: String,
    pub outcome: String,
    pub x: Vec<String>,
    pub u: Vec<String>,
    pub validation: String,
    #[serde(default)]
    pub pi: Option<String>,
}

impl DatasetSchema {
    /// The default `id,a,y,x1..xp,u1..uq,validation[,pi]` layout.
    pub fn standard(p: usize, q: usize, with_pi: bool) -> Self {
        Self {
            id: "id".into(),
            treatment: "a".into(),
            outcome: "y".into(),
            x: (1..=p).map(|i| format!("x{i}")).collect(),
            u: (1..=q).map(|i| format!("u{i}")).collect(),
            validation: "validation".into(),
            pi: with_pi.then(|| "pi".into()),
        }
    }
}

fn parse_num(s: &str, what: &str, row: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Data(format!("row {row}: cannot parse {what} value '{s}'")))
}

fn parse_flag(s: &str, what: &str, row: usize) -> Result<bool> {
    match s.trim() {
        "1" | "true" | "TRUE" | "True" => Ok(true),
        "0" | "false" | "FALSE" | "False" => Ok(false),
        other => Err(Error::Data(format!("row {row}: {what} must be binary, got '{other}'"))),
    }
}

/// Reads a CSV file. The design is KnownInclusion exactly when the schema
/// names a π column.
pub fn load_csv(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<FusedDataset> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("missing column '{name}'")))
    };
    let id_c = col(&schema.id)?;
    let a_c = col(&schema.treatment)?;
    let y_c = col(&schema.outcome)?;
    let v_c = col(&schema.validation)?;
    let x_c = schema.x.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let u_c = schema.u.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let pi_c = schema.pi.as_deref().map(col).transpose()?;

    let mut units = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let a = match get(a_c).trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Data(format!("row {row}: non-binary treatment '{other}'")))
            }
        };
        let y = parse_num(get(y_c), "outcome", row)?;
        let x = x_c.iter().map(|&c| parse_num(get(c), "X", row)).collect::<Result<Vec<_>>>()?;
        let in_validation = parse_flag(get(v_c), "validation flag", row)?;
        let cells: Vec<&str> = u_c.iter().map(|&c| get(c).trim()).collect();
        let u = if cells.iter().all(|s| s.is_empty()) {
            None
        } else if cells.iter().any(|s| s.is_empty()) {
            if in_validation {
                return Err(Error::Data(format!(
                    "incomplete confounder on validation unit at row {row}"
                )));
            }
            None
        } else {
            Some(cells.iter().map(|s| parse_num(s, "U", row)).collect::<Result<Vec<_>>>()?)
        };
        let u = if u_c.is_empty() { Some(Vec::new()) } else { u };
        let pi = pi_c.map(|c| parse_num(get(c), "pi", row)).transpose()?;
        units.push(UnitRecord { id: get(id_c).to_string(), a, y, x, u, in_validation, pi });
    }
    let design = if pi_c.is_some() { Design::KnownInclusion } else { Design::SimpleRandom };
    let d = FusedDataset::new(units, design)?;
    let mut arms = [0usize; 2];
    for r in d.units.iter().filter(|r| r.in_validation) {
        arms[r.a as usize] += 1;
    }
    if arms[0] < 2 || arms[1] < 2 {
        return Err(Error::Data("fewer than 2 validation rows per arm".into()));
    }
    Ok(d)
}

/// Writes the dataset in the standard layout. Numbers use the shortest
/// representation that parses back to the same `f64`.
pub fn write_csv(d: &FusedDataset, path: impl AsRef<Path>) -> Result<()> {
    let with_pi = d.design == Design::KnownInclusion;
    let schema = DatasetSchema::standard(d.p, d.q, with_pi);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![schema.id, schema.treatment, schema.outcome];
    header.extend(schema.x);
    header.extend(schema.u);
    header.push(schema.validation);
    header.extend(schema.pi);
    w.write_record(&header)?;
    for r in &d.units {
        let mut row = vec![r.id.clone(), r.a.to_string(), r.y.to_string()];
        row.extend(r.x.iter().map(f64::to_string));
        match &r.u {
            Some(u) => row.extend(u.iter().map(f64::to_string)),
            None => row.extend(std::iter::repeat_n(String::new(), d.q)),
        }
        row.push(if r.in_validation { "1" } else { "0" }.into());
        if let Some(pi) = r.pi.filter(|_| with_pi) {
            row.push(pi.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Which sample a view covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sample {
    Validation,
    Main,
}

/// Column-oriented copy of the units an estimator reads. A main view never
/// holds U.
#[derive(Debug, Clone)]
pub struct View {
    sample: Sample,
    rows: Vec<usize>,
    a: Vec<u8>,
    y: Vec<f64>,
    x: Vec<f64>,
    u: Option<Vec<f64>>,
    pi: Option<Vec<f64>>,
    p: usize,
    q: usize,
}

/// Row-major covariate matrix with column names.
#[derive(Debug, Clone)]
pub struct Covariates {
    pub n: usize,
    pub k: usize,
    pub data: Vec<f64>,
    pub names: Vec<String>,
}

impl Covariates {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }
}

pub fn validation_view(d: &FusedDataset) -> View {
    let rows: Vec<usize> = (0..d.units.len()).filter(|&i| d.units[i].in_validation).collect();
    build_view(d, rows, Sample::Validation)
}

pub fn main_view(d: &FusedDataset) -> View {
    build_view(d, (0..d.units.len()).collect(), Sample::Main)
}

fn build_view(d: &FusedDataset, rows: Vec<usize>, sample: Sample) -> View {
    let n = rows.len();
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n * d.p);
    let mut u = Vec::with_capacity(n * d.q);
    let mut pi = Vec::with_capacity(n);
    for &i in &rows {
        let r = &d.units[i];
        a.push(r.a);
        y.push(r.y);
        x.extend_from_slice(&r.x);
        if sample == Sample::Validation {
            u.extend_from_slice(r.u.as_deref().unwrap_or(&[]));
        }
        if let Some(p) = r.pi {
            pi.push(p);
        }
    }
    let pi = (d.design == Design::KnownInclusion).then_some(pi);
    let u = (sample == Sample::Validation).then_some(u);
    View { sample, rows, a, y, x, u, pi, p: d.p, q: d.q }
}

impl View {
    /// Builds a standalone validation-type view from columns. `u` and `pi`
    /// are optional; rows are numbered 0..n.
    pub fn from_columns(
        a: Vec<u8>,
        y: Vec<f64>,
        x: Vec<Vec<f64>>,
        u: Option<Vec<Vec<f64>>>,
        pi: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = a.len();
        if y.len() != n || x.len() != n {
            return Err(Error::InvalidInput("column lengths differ".into()));
        }
        if a.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("treatment must be 0 or 1".into()));
        }
        let p = x.first().map_or(0, Vec::len);
        if x.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidInput("ragged X".into()));
        }
        let q = u.as_ref().and_then(|u| u.first().map(Vec::len)).unwrap_or(0);
        if let Some(u) = &u {
            if u.len() != n || u.iter().any(|r| r.len() != q) {
                return Err(Error::InvalidInput("U shape mismatch".into()));
            }
        }
        if let Some(pi) = &pi {
            if pi.len() != n || pi.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
                return Err(Error::InvalidInput("inclusion probabilities must lie in (0,1]".into()));
            }
        }
        let sample = if u.is_some() { Sample::Validation } else { Sample::Main };
        Ok(View {
            sample,
            rows: (0..n).collect(),
            a,
            y,
            x: x.concat(),
            u: u.map(|u| u.concat()),
            pi,
            p,
            q,
        })
    }

    pub fn sample(&self) -> Sample {
        self.sample
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Row indices into the source dataset.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn treatments(&self) -> &[u8] {
        &self.a
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn u(&self, i: usize) -> Option<&[f64]> {
        self.u.as_ref().map(|u| &u[i * self.q..(i + 1) * self.q])
    }

    pub fn inclusion_probs(&self) -> Option<&[f64]> {
        self.pi.as_deref()
    }

    pub fn has_u(&self) -> bool {
        self.u.is_some()
    }

    /// π⁻¹ when inclusion probabilities are known, otherwise 1.
    pub fn design_weights(&self) -> Vec<f64> {
        match &self.pi {
            Some(pi) => pi.iter().map(|p| 1.0 / p).collect(),
            None => vec![1.0; self.len()],
        }
    }

    pub fn unit_weights(&self) -> Vec<f64> {
        vec![1.0; self.len()]
    }

    /// Covariate matrix for `set`, optionally with a leading intercept.
    pub fn covariates(&self, set: CovariateSet, intercept: bool) -> Result<Covariates> {
        if set == CovariateSet::XU && self.u.is_none() {
            return Err(Error::InvalidInput("U is not available on this view".into()));
        }
        let uq = if set == CovariateSet::XU { self.q } else { 0 };
        let k = usize::from(intercept) + self.p + uq;
        let n = self.len();
        let mut data = Vec::with_capacity(n * k);
        for i in 0..n {
            if intercept {
                data.push(1.0);
            }
            data.extend_from_slice(self.x(i));
            if uq > 0 {
                data.extend_from_slice(self.u(i).unwrap_or(&[]));
            }
        }
        let mut names = Vec::with_capacity(k);
        if intercept {
            names.push("intercept".to_string());
        }
        names.extend((1..=self.p).map(|i| format!("x{i}")));
        names.extend((1..=uq).map(|i| format!("u{i}")));
        Ok(Covariates { n, k, data, names })
    }
}
