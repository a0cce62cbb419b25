//! Trial data container and CSV ingestion.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{CaceError, Result};
use crate::glm::DesignMatrix;

/// Observed trial rows `(X, Z, T, Y)`. The design carries a leading
/// intercept column; `covariate_names` lists the remaining columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    pub x: DesignMatrix,
    pub z: Vec<u8>,
    pub t: Vec<u8>,
    pub y: Vec<f64>,
    pub covariate_names: Vec<String>,
}

impl TrialDataset {
    pub fn new(
        x: DesignMatrix,
        z: Vec<u8>,
        t: Vec<u8>,
        y: Vec<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = x.rows();
        if z.len() != n || t.len() != n || y.len() != n {
            return Err(CaceError::InvalidInput(format!(
                "column lengths differ: x {n}, z {}, t {}, y {}",
                z.len(),
                t.len(),
                y.len()
            )));
        }
        if covariate_names.len() + 1 != x.cols() {
            return Err(CaceError::InvalidInput(format!(
                "{} covariate names for {} design columns",
                covariate_names.len(),
                x.cols()
            )));
        }
        check_binary("z", &z)?;
        check_binary("t", &t)?;
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(CaceError::NonFinite(format!("y at row {i}")));
        }
        Ok(Self {
            x,
            z,
            t,
            y,
            covariate_names,
        })
    }

    /// Builds a dataset from a row-major feature block without intercept.
    pub fn from_features(
        features: &[f64],
        k: usize,
        z: Vec<u8>,
        t: Vec<u8>,
        y: Vec<f64>,
        covariate_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = z.len();
        let names = covariate_names.unwrap_or_else(|| (1..=k).map(|j| format!("x{j}")).collect());
        let x = DesignMatrix::with_intercept(n, k, features)?;
        Self::new(x, z, t, y, names)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.z.len()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            z: idx.iter().map(|&i| self.z[i]).collect(),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            covariate_names: self.covariate_names.clone(),
        }
    }

    /// Keeps the intercept plus the named covariates, in the given order.
    pub fn select_covariates(&self, names: &[String]) -> Result<Self> {
        let mut cols = vec![0];
        for name in names {
            let j = self
                .covariate_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| CaceError::Schema(format!("missing covariate column `{name}`")))?;
            cols.push(j + 1);
        }
        Ok(Self {
            x: self.x.select_cols(&cols),
            z: self.z.clone(),
            t: self.t.clone(),
            y: self.y.clone(),
            covariate_names: names.to_vec(),
        })
    }

    /// Row-index sample with replacement of the same size.
    pub fn resample<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let n = self.n();
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        self.subset(&idx)
    }

    pub fn indices_where<F: Fn(u8, u8) -> bool>(&self, pred: F) -> Vec<usize> {
        (0..self.n()).filter(|&i| pred(self.z[i], self.t[i])).collect()
    }

    pub fn read_csv<P: AsRef<Path>>(path: P, covariates: Option<&[String]>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::from_reader(file, covariates)
    }

    /// Parses a CSV with header `z`, `t`, `y` plus covariate columns. All
    /// non-reserved columns are covariates unless `covariates` selects them.
    pub fn from_reader<R: Read>(reader: R, covariates: Option<&[String]>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_ascii_lowercase()).collect();
        let find = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CaceError::Schema(format!("missing column `{name}`")))
        };
        let (iz, it, iy) = (find("z")?, find("t")?, find("y")?);
        let cov_names: Vec<String> = match covariates {
            Some(sel) => sel.iter().map(|s| s.to_ascii_lowercase()).collect(),
            None => header
                .iter()
                .enumerate()
                .filter(|(j, _)| ![iz, it, iy].contains(j))
                .map(|(_, h)| h.clone())
                .collect(),
        };
        let cov_idx: Vec<usize> = cov_names.iter().map(|c| find(c)).collect::<Result<_>>()?;

        let (mut z, mut t, mut y, mut feats) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |j: usize| -> Result<f64> {
                let s = rec.get(j).unwrap_or("");
                let v: f64 = s.parse().map_err(|_| {
                    CaceError::Schema(format!("unparsable value `{s}` in column `{}` at row {row}", header[j]))
                })?;
                if !v.is_finite() {
                    return Err(CaceError::NonFinite(format!("column `{}` at row {row}", header[j])));
                }
                Ok(v)
            };
            let binary = |j: usize| -> Result<u8> {
                let v = field(j)?;
                if v == 0.0 || v == 1.0 {
                    Ok(v as u8)
                } else {
                    Err(CaceError::NonBinary {
                        column: header[j].clone(),
                        row,
                        value: v,
                    })
                }
            };
            z.push(binary(iz)?);
            t.push(binary(it)?);
            y.push(field(iy)?);
            for &j in &cov_idx {
                feats.push(field(j)?);
            }
        }
        if z.is_empty() {
            return Err(CaceError::Schema("no data rows".into()));
        }
        let x = DesignMatrix::with_intercept(z.len(), cov_idx.len(), &feats)?;
        Self::new(x, z, t, y, cov_names)
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path.as_ref())?;
        self.to_writer(std::io::BufWriter::new(file))
    }

    /// Writes `z,t,y,<covariates>`; floats use the shortest representation
    /// that parses back to the same value.
    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["z".to_string(), "t".to_string(), "y".to_string()];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for i in 0..self.n() {
            rec.clear();
            rec.push(self.z[i].to_string());
            rec.push(self.t[i].to_string());
            rec.push(self.y[i].to_string());
            rec.extend(self.x.row(i)[1..].iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn check_binary(column: &str, v: &[u8]) -> Result<()> {
    match v.iter().position(|&b| b > 1) {
        Some(row) => Err(CaceError::NonBinary {
            column: column.to_string(),
            row,
            value: v[row] as f64,
        }),
        None => Ok(()),
    }
}
