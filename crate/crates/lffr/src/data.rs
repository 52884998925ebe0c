//! Dataset and fit-result containers with CSV serialization.
//!
//! Each array lives in its own wide CSV, one row per (subject, visit) curve:
//! outcomes carry columns `subject_id, visit_id, y_1..y_L`, covariates carry
//! `x_1..x_p, z_1..z_q`, and each functional predictor file carries
//! `w_1..w_R`. Grids come from sidecar files (one real per line) and default
//! to equally spaced on [0, 1]. Numeric values round-trip bit-for-bit.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const OUTCOME_FILE: &str = "outcomes.csv";
pub const COVARIATE_FILE: &str = "covariates.csv";
pub const GRID_S_FILE: &str = "grid_s.csv";
pub const DATASET_MANIFEST_FILE: &str = "manifest.json";

pub fn predictor_file(k: usize) -> String {
    format!("predictor_{}.csv", k + 1)
}

pub fn grid_u_file(k: usize) -> String {
    format!("grid_u_{}.csv", k + 1)
}

/// Longitudinal functional dataset: one row per (subject, visit).
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataset {
    pub subject_id: Vec<i64>,
    pub visit_id: Vec<i64>,
    /// N × L functional outcomes.
    pub y: DMatrix<f64>,
    /// N × p scalar covariates including an explicit intercept column.
    pub x: DMatrix<f64>,
    /// N × q random-effect covariates (all ones for a random intercept).
    pub z: DMatrix<f64>,
    /// K functional predictors, each N × R_k.
    pub w: Vec<DMatrix<f64>>,
    pub grid_s: DVector<f64>,
    pub grid_u: Vec<DVector<f64>>,
}

impl FunctionalDataset {
    pub fn n_obs(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_locations(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_scalar(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_random(&self) -> usize {
        self.z.ncols()
    }

    pub fn n_predictors(&self) -> usize {
        self.w.len()
    }

    /// Distinct subject ids in order of first appearance.
    pub fn subjects(&self) -> Vec<i64> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for &id in &self.subject_id {
            if seen.insert(id, ()).is_none() {
                out.push(id);
            }
        }
        out
    }

    /// Row indices per subject, in order of first appearance.
    pub fn subject_rows(&self) -> Vec<Vec<usize>> {
        let mut index: HashMap<i64, usize> = HashMap::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (row, &id) in self.subject_id.iter().enumerate() {
            let slot = *index.entry(id).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[slot].push(row);
        }
        groups
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.nrows();
        for (name, rows) in [
            ("subject_id", self.subject_id.len()),
            ("visit_id", self.visit_id.len()),
            ("X", self.x.nrows()),
            ("Z", self.z.nrows()),
        ] {
            if rows != n {
                return Err(Error::DimensionMismatch(format!(
                    "{name} has {rows} rows, outcomes have {n}"
                )));
            }
        }
        for (k, w) in self.w.iter().enumerate() {
            if w.nrows() != n {
                return Err(Error::DimensionMismatch(format!(
                    "predictor {} has {} rows, outcomes have {}",
                    k + 1,
                    w.nrows(),
                    n
                )));
            }
        }
        if self.x.ncols() == 0 {
            return Err(Error::MissingIntercept);
        }
        if self.grid_u.len() != self.w.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} predictor grids for {} predictors",
                self.grid_u.len(),
                self.w.len()
            )));
        }

        check_grid("grid_s", &self.grid_s, self.y.ncols())?;
        for (k, g) in self.grid_u.iter().enumerate() {
            check_grid(&format!("grid_u_{}", k + 1), g, self.w[k].ncols())?;
        }

        check_finite("Y", &self.y, "y")?;
        check_finite("X", &self.x, "x")?;
        check_finite("Z", &self.z, "z")?;
        for (k, w) in self.w.iter().enumerate() {
            check_finite(&format!("W_{}", k + 1), w, "w")?;
        }
        Ok(())
    }
}

fn check_grid(name: &str, grid: &DVector<f64>, expected_len: usize) -> Result<()> {
    if grid.len() != expected_len {
        return Err(Error::DimensionMismatch(format!(
            "{name} has {} points for {} columns",
            grid.len(),
            expected_len
        )));
    }
    if grid.len() < 4 {
        return Err(Error::TooFewGridPoints {
            name: name.to_string(),
            len: grid.len(),
            min: 4,
        });
    }
    for i in 1..grid.len() {
        if !(grid[i] > grid[i - 1]) {
            return Err(Error::NonMonotoneGrid {
                name: name.to_string(),
                index: i,
            });
        }
    }
    Ok(())
}

fn check_finite(name: &str, m: &DMatrix<f64>, col_prefix: &str) -> Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFiniteValue {
                    name: name.to_string(),
                    row: i,
                    col: format!("{}_{}", col_prefix, j + 1),
                });
            }
        }
    }
    Ok(())
}

/// Where a grid comes from when loading.
#[derive(Debug, Clone, Default)]
pub enum GridSource {
    /// Equally spaced on [0, 1].
    #[default]
    UnitInterval,
    /// Sidecar file with one real per line.
    File(PathBuf),
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSchema {
    pub grid_s: GridSource,
    /// One entry per predictor; missing entries default to [0, 1].
    pub grid_u: Vec<GridSource>,
}

struct KeyedTable {
    keys: Vec<(i64, i64)>,
    data: DMatrix<f64>,
}

fn read_keyed_csv(path: &Path, prefix: &str) -> Result<KeyedTable> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        detail: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            detail: e.to_string(),
        })?
        .clone();
    let mut value_cols = Vec::new();
    let mut sub_col = None;
    let mut visit_col = None;
    for (i, h) in headers.iter().enumerate() {
        match h {
            "subject_id" => sub_col = Some(i),
            "visit_id" => visit_col = Some(i),
            _ if h.starts_with(prefix) => value_cols.push(i),
            _ => {}
        }
    }
    let (sub_col, visit_col) = match (sub_col, visit_col) {
        (Some(s), Some(v)) => (s, v),
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                detail: "missing subject_id / visit_id columns".to_string(),
            })
        }
    };

    let mut keys = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line + 2,
            detail: e.to_string(),
        })?;
        let parse_int = |idx: usize| -> Result<i64> {
            record[idx].trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: line + 2,
                detail: format!("bad integer `{}`", &record[idx]),
            })
        };
        keys.push((parse_int(sub_col)?, parse_int(visit_col)?));
        let mut row = Vec::with_capacity(value_cols.len());
        for &c in &value_cols {
            let v: f64 = record[c].trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: line + 2,
                detail: format!("bad number `{}` in column {}", &record[c], &headers[c]),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    let ncols = value_cols.len();
    let data = DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]);
    Ok(KeyedTable { keys, data })
}

/// Reorder `table` rows to match `keys`; errors if the key sets differ.
fn align_rows(table: KeyedTable, keys: &[(i64, i64)], file: &str) -> Result<DMatrix<f64>> {
    if table.keys.len() != keys.len() {
        return Err(Error::MismatchedRows {
            file: file.to_string(),
            detail: format!("{} rows vs {} in outcomes", table.keys.len(), keys.len()),
        });
    }
    let mut index: HashMap<(i64, i64), usize> = HashMap::with_capacity(table.keys.len());
    for (i, &k) in table.keys.iter().enumerate() {
        if index.insert(k, i).is_some() {
            return Err(Error::MismatchedRows {
                file: file.to_string(),
                detail: format!("duplicate key ({}, {})", k.0, k.1),
            });
        }
    }
    let mut out = DMatrix::zeros(keys.len(), table.data.ncols());
    for (row, key) in keys.iter().enumerate() {
        match index.get(key) {
            Some(&src) => out.set_row(row, &table.data.row(src)),
            None => {
                return Err(Error::MismatchedRows {
                    file: file.to_string(),
                    detail: format!("missing key ({}, {})", key.0, key.1),
                })
            }
        }
    }
    Ok(out)
}

fn unit_grid(n: usize) -> DVector<f64> {
    if n == 1 {
        return DVector::from_element(1, 0.0);
    }
    DVector::from_fn(n, |i, _| i as f64 / (n - 1) as f64)
}

fn resolve_grid(source: &GridSource, len: usize, name: &str) -> Result<DVector<f64>> {
    match source {
        GridSource::UnitInterval => Ok(unit_grid(len)),
        GridSource::File(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut vals = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                vals.push(line.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.clone(),
                    line: i + 1,
                    detail: format!("bad grid value `{line}`"),
                })?);
            }
            if vals.len() != len {
                return Err(Error::DimensionMismatch(format!(
                    "{name}: sidecar grid has {} values for {} columns",
                    vals.len(),
                    len
                )));
            }
            Ok(DVector::from_vec(vals))
        }
    }
}

pub fn load_dataset(
    outcome_path: &Path,
    covariate_path: &Path,
    predictor_paths: &[PathBuf],
    schema: &DatasetSchema,
) -> Result<FunctionalDataset> {
    let outcomes = read_keyed_csv(outcome_path, "y_")?;
    let keys = outcomes.keys.clone();

    let x_table = read_keyed_csv(covariate_path, "x_")?;
    let z_table = read_keyed_csv(covariate_path, "z_")?;
    let x = align_rows(x_table, &keys, "covariates")?;
    let z = align_rows(z_table, &keys, "covariates")?;

    let mut w = Vec::new();
    let mut grid_u = Vec::new();
    for (k, path) in predictor_paths.iter().enumerate() {
        let table = read_keyed_csv(path, "w_")?;
        let mat = align_rows(table, &keys, &format!("predictor_{}", k + 1))?;
        let source = schema.grid_u.get(k).cloned().unwrap_or_default();
        grid_u.push(resolve_grid(&source, mat.ncols(), &format!("grid_u_{}", k + 1))?);
        w.push(mat);
    }

    let grid_s = resolve_grid(&schema.grid_s, outcomes.data.ncols(), "grid_s")?;

    let dataset = FunctionalDataset {
        subject_id: keys.iter().map(|k| k.0).collect(),
        visit_id: keys.iter().map(|k| k.1).collect(),
        y: outcomes.data,
        x,
        z,
        w,
        grid_s,
        grid_u,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn write_keyed_csv(
    path: &Path,
    keys: (&[i64], &[i64]),
    blocks: &[(&str, &DMatrix<f64>)],
) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut header = String::from("subject_id,visit_id");
    for (prefix, m) in blocks {
        for j in 0..m.ncols() {
            header.push_str(&format!(",{}_{}", prefix, j + 1));
        }
    }
    writeln!(file, "{header}").map_err(|e| Error::io(path, e))?;
    for row in 0..keys.0.len() {
        let mut line = format!("{},{}", keys.0[row], keys.1[row]);
        for (_, m) in blocks {
            for j in 0..m.ncols() {
                line.push(',');
                line.push_str(&format!("{}", m[(row, j)]));
            }
        }
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn write_grid(path: &Path, grid: &DVector<f64>) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for v in grid.iter() {
        writeln!(file, "{v}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Write the dataset into `dir` using the standard file layout.
pub fn save_dataset(d: &FunctionalDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let keys = (d.subject_id.as_slice(), d.visit_id.as_slice());
    write_keyed_csv(&dir.join(OUTCOME_FILE), keys, &[("y", &d.y)])?;
    write_keyed_csv(
        &dir.join(COVARIATE_FILE),
        keys,
        &[("x", &d.x), ("z", &d.z)],
    )?;
    for (k, w) in d.w.iter().enumerate() {
        write_keyed_csv(&dir.join(predictor_file(k)), keys, &[("w", w)])?;
        write_grid(&dir.join(grid_u_file(k)), &d.grid_u[k])?;
    }
    write_grid(&dir.join(GRID_S_FILE), &d.grid_s)?;
    Ok(())
}

/// Load a dataset saved by [`save_dataset`] from its directory.
pub fn load_dataset_dir(dir: &Path) -> Result<FunctionalDataset> {
    let mut predictor_paths = Vec::new();
    let mut grid_u = Vec::new();
    for k in 0.. {
        let p = dir.join(predictor_file(k));
        if !p.exists() {
            break;
        }
        grid_u.push(GridSource::File(dir.join(grid_u_file(k))));
        predictor_paths.push(p);
    }
    let schema = DatasetSchema {
        grid_s: GridSource::File(dir.join(GRID_S_FILE)),
        grid_u,
    };
    load_dataset(
        &dir.join(OUTCOME_FILE),
        &dir.join(COVARIATE_FILE),
        &predictor_paths,
        &schema,
    )
}

/// Per-dataset metadata written next to the CSV files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_obs: usize,
    pub n_subjects: usize,
    pub n_locations: usize,
    pub n_scalar: usize,
    pub n_random: usize,
    pub n_predictors: usize,
    pub r: Vec<usize>,
    pub family: String,
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl DatasetManifest {
    pub fn for_dataset(d: &FunctionalDataset, seed: Option<u64>) -> Self {
        DatasetManifest {
            n_obs: d.n_obs(),
            n_subjects: d.subjects().len(),
            n_locations: d.n_locations(),
            n_scalar: d.n_scalar(),
            n_random: d.n_random(),
            n_predictors: d.n_predictors(),
            r: d.w.iter().map(|w| w.ncols()).collect(),
            family: "gaussian".to_string(),
            seed,
            config: None,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable manifest");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        detail: e.to_string(),
    })
}

/// Estimates produced by the fitting pipeline (raw and smoothed).
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// p × L raw pointwise scalar coefficients.
    pub beta_hat: DMatrix<f64>,
    /// p × L smoothed scalar coefficients.
    pub beta_smooth: DMatrix<f64>,
    /// Per predictor: R_k × L coefficient surface, column l over the
    /// predictor grid.
    pub gamma_hat: Vec<DMatrix<f64>>,
    pub gamma_smooth: Vec<DMatrix<f64>>,
    /// Per predictor: K_g × L spline coefficients of the surface columns.
    pub spline_coefs: Vec<DMatrix<f64>>,
    /// K × L smoothing parameters (one per predictor and location).
    pub lambda: DMatrix<f64>,
    /// Per location: (H, sigma2_eps) variance components.
    pub var_components: Vec<(DMatrix<f64>, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitManifest {
    pub n_obs: usize,
    pub n_locations: usize,
    pub n_scalar: usize,
    pub n_random: usize,
    pub n_predictors: usize,
    pub r: Vec<usize>,
    pub k_g: usize,
    pub k_w: usize,
    pub k_w_effective: Vec<usize>,
    pub family: String,
    pub converged: Vec<bool>,
    pub boundary: Vec<bool>,
    pub config: serde_json::Value,
}

pub const FIT_MANIFEST_FILE: &str = "fit_manifest.json";

fn write_plain_matrix(path: &Path, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
    for i in 0..m.nrows() {
        let line: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        writeln!(file, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_plain_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        detail: e.to_string(),
    })?;
    let ncols = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            detail: e.to_string(),
        })?
        .len();
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line + 2,
            detail: e.to_string(),
        })?;
        let mut row = Vec::with_capacity(ncols);
        for v in record.iter() {
            row.push(v.trim().parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: line + 2,
                detail: format!("bad number `{v}`"),
            })?);
        }
        rows.push(row);
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn coef_header(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|j| format!("{prefix}_{j}")).collect()
}

/// Serialize fit estimates into a directory of CSVs plus a JSON manifest.
pub fn save_fit_result(result: &FitResult, manifest: &FitManifest, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = result.beta_hat.nrows();
    write_plain_matrix(
        &dir.join("beta_hat.csv"),
        &coef_header("beta", p),
        &result.beta_hat.transpose(),
    )?;
    write_plain_matrix(
        &dir.join("beta_smooth.csv"),
        &coef_header("beta", p),
        &result.beta_smooth.transpose(),
    )?;
    for (k, g) in result.gamma_hat.iter().enumerate() {
        write_plain_matrix(
            &dir.join(format!("gamma_hat_{}.csv", k + 1)),
            &coef_header("s", g.ncols()),
            g,
        )?;
    }
    for (k, g) in result.gamma_smooth.iter().enumerate() {
        write_plain_matrix(
            &dir.join(format!("gamma_smooth_{}.csv", k + 1)),
            &coef_header("s", g.ncols()),
            g,
        )?;
    }
    for (k, g) in result.spline_coefs.iter().enumerate() {
        write_plain_matrix(
            &dir.join(format!("spline_coefs_{}.csv", k + 1)),
            &coef_header("s", g.ncols()),
            g,
        )?;
    }
    write_plain_matrix(
        &dir.join("lambda.csv"),
        &coef_header("predictor", result.lambda.nrows()),
        &result.lambda.transpose(),
    )?;

    let q = manifest.n_random;
    let mut vc_header = vec!["sigma2_eps".to_string()];
    for t in 0..q {
        for v in 0..q {
            vc_header.push(format!("h_{}_{}", t + 1, v + 1));
        }
    }
    let vc = DMatrix::from_fn(result.var_components.len(), 1 + q * q, |l, j| {
        if j == 0 {
            result.var_components[l].1
        } else {
            let idx = j - 1;
            result.var_components[l].0[(idx / q, idx % q)]
        }
    });
    write_plain_matrix(&dir.join("var_components.csv"), &vc_header, &vc)?;
    write_json(&dir.join(FIT_MANIFEST_FILE), manifest)
}

pub fn load_fit_result(dir: &Path) -> Result<(FitResult, FitManifest)> {
    let manifest: FitManifest = read_json(&dir.join(FIT_MANIFEST_FILE))?;
    let beta_hat = read_plain_matrix(&dir.join("beta_hat.csv"))?.transpose();
    let beta_smooth = read_plain_matrix(&dir.join("beta_smooth.csv"))?.transpose();
    let mut gamma_hat = Vec::new();
    let mut gamma_smooth = Vec::new();
    let mut spline_coefs = Vec::new();
    for k in 0..manifest.n_predictors {
        gamma_hat.push(read_plain_matrix(&dir.join(format!("gamma_hat_{}.csv", k + 1)))?);
        gamma_smooth.push(read_plain_matrix(
            &dir.join(format!("gamma_smooth_{}.csv", k + 1)),
        )?);
        spline_coefs.push(read_plain_matrix(
            &dir.join(format!("spline_coefs_{}.csv", k + 1)),
        )?);
    }
    let lambda = read_plain_matrix(&dir.join("lambda.csv"))?.transpose();
    let vc = read_plain_matrix(&dir.join("var_components.csv"))?;
    let q = manifest.n_random;
    let var_components = (0..vc.nrows())
        .map(|l| {
            let h = DMatrix::from_fn(q, q, |t, v| vc[(l, 1 + t * q + v)]);
            (h, vc[(l, 0)])
        })
        .collect();
    Ok((
        FitResult {
            beta_hat,
            beta_smooth,
            gamma_hat,
            gamma_smooth,
            spline_coefs,
            lambda,
            var_components,
        },
        manifest,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset() -> FunctionalDataset {
        let n = 8;
        let l = 5;
        let r = 4;
        FunctionalDataset {
            subject_id: vec![1, 1, 1, 1, 1, 2, 2, 2],
            visit_id: vec![1, 2, 3, 4, 5, 1, 2, 3],
            y: DMatrix::from_fn(n, l, |i, j| (i as f64 + 1.0) * 0.25 + (j as f64) * 0.125),
            x: DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 - 3.5 }),
            z: DMatrix::from_element(n, 1, 1.0),
            w: vec![DMatrix::from_fn(n, r, |i, j| {
                ((i * 7 + j * 3) as f64).sin()
            })],
            grid_s: DVector::from_fn(l, |i, _| i as f64 / (l - 1) as f64),
            grid_u: vec![DVector::from_fn(r, |i, _| i as f64 / (r - 1) as f64)],
        }
    }

    #[test]
    fn unbalanced_design_accepted() {
        let d = toy_dataset();
        assert_eq!(d.n_obs(), 8);
        d.validate().unwrap();
        let rows = d.subject_rows();
        assert_eq!(rows[0].len(), 5);
        assert_eq!(rows[1].len(), 3);
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let d = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let loaded = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(d.subject_id, loaded.subject_id);
        assert_eq!(d.visit_id, loaded.visit_id);
        for (a, b) in [
            (&d.y, &loaded.y),
            (&d.x, &loaded.x),
            (&d.z, &loaded.z),
            (&d.w[0], &loaded.w[0]),
        ] {
            assert_eq!(a.nrows(), b.nrows());
            for i in 0..a.nrows() {
                for j in 0..a.ncols() {
                    assert_eq!(a[(i, j)].to_bits(), b[(i, j)].to_bits());
                }
            }
        }
        for i in 0..d.grid_s.len() {
            assert_eq!(d.grid_s[i].to_bits(), loaded.grid_s[i].to_bits());
        }
    }

    #[test]
    fn nan_cell_reports_row_and_column() {
        let mut d = toy_dataset();
        d.y[(3, 2)] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let err = load_dataset_dir(dir.path()).unwrap_err();
        match err {
            Error::NonFiniteValue { name, row, col } => {
                assert_eq!(name, "Y");
                assert_eq!(row, 3);
                assert_eq!(col, "y_3");
            }
            other => panic!("expected NonFiniteValue, got {other}"),
        }
    }

    #[test]
    fn non_monotone_grid_rejected() {
        let mut d = toy_dataset();
        d.grid_s = DVector::from_vec(vec![0.0, 0.5, 0.5, 0.75, 1.0]);
        assert!(matches!(
            d.validate(),
            Err(Error::NonMonotoneGrid { index: 2, .. })
        ));
    }

    #[test]
    fn missing_intercept_rejected() {
        let mut d = toy_dataset();
        d.x = DMatrix::zeros(8, 0);
        assert!(matches!(d.validate(), Err(Error::MissingIntercept)));
    }

    #[test]
    fn too_few_grid_points_rejected() {
        let mut d = toy_dataset();
        d.y = d.y.columns(0, 3).into_owned();
        d.grid_s = DVector::from_vec(vec![0.0, 0.5, 1.0]);
        assert!(matches!(
            d.validate(),
            Err(Error::TooFewGridPoints { len: 3, min: 4, .. })
        ));
    }

    #[test]
    fn mismatched_rows_detected() {
        let d = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        // drop the last row of the covariate file
        let path = dir.path().join(COVARIATE_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let shortened: Vec<&str> = text.trim_end().lines().collect();
        fs::write(&path, shortened[..shortened.len() - 1].join("\n")).unwrap();
        let err = load_dataset_dir(dir.path()).unwrap_err();
        assert!(matches!(err, Error::MismatchedRows { .. }));
    }

    #[test]
    fn fit_result_round_trip() {
        let result = FitResult {
            beta_hat: DMatrix::from_fn(2, 5, |i, j| (i + j) as f64 / 7.0),
            beta_smooth: DMatrix::from_fn(2, 5, |i, j| (i * j) as f64 / 3.0),
            gamma_hat: vec![DMatrix::from_fn(4, 5, |i, j| (i as f64) - (j as f64))],
            gamma_smooth: vec![DMatrix::from_fn(4, 5, |i, j| (i as f64) * (j as f64))],
            spline_coefs: vec![DMatrix::from_fn(6, 5, |i, j| (i + 2 * j) as f64)],
            lambda: DMatrix::from_fn(1, 5, |_, j| 10.0f64.powi(j as i32 - 2)),
            var_components: (0..5)
                .map(|l| (DMatrix::from_element(1, 1, l as f64 * 0.3), 1.25 + l as f64))
                .collect(),
        };
        let manifest = FitManifest {
            n_obs: 8,
            n_locations: 5,
            n_scalar: 2,
            n_random: 1,
            n_predictors: 1,
            r: vec![4],
            k_g: 6,
            k_w: 4,
            k_w_effective: vec![4],
            family: "gaussian".to_string(),
            converged: vec![true; 5],
            boundary: vec![false; 5],
            config: serde_json::json!({}),
        };
        let dir = tempfile::tempdir().unwrap();
        save_fit_result(&result, &manifest, dir.path()).unwrap();
        let (loaded, m2) = load_fit_result(dir.path()).unwrap();
        assert_eq!(result, loaded);
        assert_eq!(m2.n_locations, 5);
    }
}
