//! Model files (JSON) and data tables (CSV).

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, ModelParams};
use crate::optimizer::FitResult;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub seed: u64,
    pub iterations: usize,
    pub final_ll: f64,
    pub converged: bool,
}

/// Serialized model: parameters, centering offsets and fit metadata.
/// Matrices are stored as arrays of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    pub p: usize,
    pub d: usize,
    #[serde(rename = "S")]
    pub s: Vec<Vec<f64>>,
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub tau2: f64,
    pub center_x: Vec<f64>,
    pub center_r: f64,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitMetadata>,
}

fn rows_of(mat: &DMatrix<f64>) -> Vec<Vec<f64>> {
    mat.row_iter()
        .map(|row| row.iter().copied().collect())
        .collect()
}

impl ModelFile {
    /// Model with zero centering offsets and no fit metadata, e.g. a
    /// simulation truth.
    pub fn from_params(
        params: &ModelParams,
        alpha: f64,
        feature_names: Option<Vec<String>>,
    ) -> Self {
        ModelFile {
            schema_version: SCHEMA_VERSION,
            p: params.p(),
            d: params.d(),
            s: rows_of(&params.s),
            w: rows_of(&params.w),
            beta: params.beta.iter().copied().collect(),
            sigma2: params.sigma2,
            tau2: params.tau2,
            center_x: vec![0.0; params.p()],
            center_r: 0.0,
            alpha,
            feature_names,
            fit: None,
        }
    }

    pub fn from_fit(result: &FitResult, feature_names: Option<Vec<String>>) -> Self {
        let mut file = ModelFile::from_params(&result.params, result.alpha, feature_names);
        file.center_x = result.center_x.iter().copied().collect();
        file.center_r = result.center_r;
        file.fit = Some(FitMetadata {
            seed: result.seed,
            iterations: result.iterations,
            final_ll: result.final_ll(),
            converged: result.converged,
        });
        file
    }

    fn matrix(&self, rows: &[Vec<f64>], name: &str) -> std::result::Result<DMatrix<f64>, String> {
        if rows.len() != self.p || rows.iter().any(|r| r.len() != self.d) {
            return Err(format!("{name} must be {} x {}", self.p, self.d));
        }
        Ok(DMatrix::from_fn(self.p, self.d, |i, j| rows[i][j]))
    }

    fn check(&self) -> std::result::Result<ModelParams, String> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let s = self.matrix(&self.s, "S")?;
        let w = self.matrix(&self.w, "W")?;
        if self.beta.len() != self.d {
            return Err(format!("beta must have length d = {}", self.d));
        }
        if self.center_x.len() != self.p {
            return Err(format!("center_x must have length p = {}", self.p));
        }
        if let Some(names) = &self.feature_names {
            if names.len() != self.p {
                return Err(format!("feature_names must have length p = {}", self.p));
            }
        }
        let params = ModelParams {
            s,
            w,
            beta: DVector::from_vec(self.beta.clone()),
            sigma2: self.sigma2,
            tau2: self.tau2,
        };
        params.check_shapes().map_err(|e| e.to_string())?;
        let finite = params
            .s
            .iter()
            .chain(params.w.iter())
            .chain(params.beta.iter())
            .chain(self.center_x.iter())
            .all(|v| v.is_finite())
            && self.center_r.is_finite()
            && self.alpha.is_finite();
        if !finite {
            return Err("non-finite entry".into());
        }
        // zero variances are allowed so that noiseless truths can be stored
        if !(self.sigma2 >= 0.0
            && self.tau2 >= 0.0
            && self.sigma2.is_finite()
            && self.tau2.is_finite())
        {
            return Err("variances must be finite and nonnegative".into());
        }
        if !(self.alpha >= 0.0) {
            return Err("alpha must be nonnegative".into());
        }
        Ok(params)
    }

    pub fn params(&self) -> Result<ModelParams> {
        self.check().map_err(Error::InvalidParams)
    }

    pub fn center_x(&self) -> DVector<f64> {
        DVector::from_vec(self.center_x.clone())
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("model file serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str, path: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|source| Error::Json {
            path: path.to_string(),
            source,
        })?;
        file.check().map_err(|message| Error::Malformed {
            path: path.to_string(),
            line: 1,
            message,
        })?;
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|source| io_error(path, source))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| io_error(path, source))?;
        ModelFile::from_json(&text, &path.display().to_string())
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Header plus numeric body of a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub values: DMatrix<f64>,
}

pub fn read_table(path: &Path) -> Result<Table> {
    let display = path.display().to_string();
    let malformed = |line: u64, message: String| Error::Malformed {
        path: display.clone(),
        line,
        message,
    };
    let text = fs::read_to_string(path).map_err(|source| io_error(path, source))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header: Vec<String> = match records.next() {
        Some(Ok(rec)) => rec.iter().map(|s| s.trim().to_string()).collect(),
        Some(Err(e)) => return Err(malformed(1, e.to_string())),
        None => return Err(malformed(1, "missing header row".into())),
    };
    if header.iter().any(String::is_empty) {
        return Err(malformed(1, "empty column name in header".into()));
    }
    for (j, name) in header.iter().enumerate() {
        if header[..j].contains(name) {
            return Err(malformed(1, format!("duplicate column name {name:?}")));
        }
    }
    let cols = header.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != cols {
            return Err(malformed(
                line,
                format!("expected {cols} fields, found {}", rec.len()),
            ));
        }
        for (j, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            let value: f64 = cell.parse().map_err(|_| {
                malformed(
                    line,
                    format!("column {:?}: {cell:?} is not a number", header[j]),
                )
            })?;
            if !value.is_finite() {
                return Err(malformed(
                    line,
                    format!("column {:?}: non-finite value {cell:?}", header[j]),
                ));
            }
            data.push(value);
        }
        rows += 1;
    }
    Ok(Table {
        header,
        values: DMatrix::from_row_slice(rows, cols, &data),
    })
}

/// Reads foreground and background tables into a dataset. The response
/// column is removed from the foreground; the remaining columns must match
/// the background header by name and order.
pub fn read_dataset(foreground: &Path, background: &Path, response_col: &str) -> Result<Dataset> {
    let fg = read_table(foreground)?;
    let bg = read_table(background)?;
    let Some(resp) = fg.header.iter().position(|h| h == response_col) else {
        return Err(Error::Malformed {
            path: foreground.display().to_string(),
            line: 1,
            message: format!("no response column {response_col:?}"),
        });
    };
    let names: Vec<String> = fg
        .header
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != resp)
        .map(|(_, h)| h.clone())
        .collect();
    if names.is_empty() {
        return Err(Error::Malformed {
            path: foreground.display().to_string(),
            line: 1,
            message: "no feature columns".into(),
        });
    }
    if bg.header.len() != names.len() {
        return Err(Error::shape(format!(
            "{} has {} feature columns, {} has {}",
            foreground.display(),
            names.len(),
            background.display(),
            bg.header.len()
        )));
    }
    if let Some(j) = (0..names.len()).find(|&j| bg.header[j] != names[j]) {
        return Err(Error::Malformed {
            path: background.display().to_string(),
            line: 1,
            message: format!(
                "column {} is {:?}, foreground has {:?}",
                j + 1,
                bg.header[j],
                names[j]
            ),
        });
    }
    let feature_cols: Vec<usize> = (0..fg.header.len()).filter(|&j| j != resp).collect();
    let x = fg.values.select_columns(&feature_cols);
    let r = fg.values.column(resp).into_owned();
    Dataset::new(x, r, bg.values)?.with_feature_names(names)
}

pub fn write_table(path: &Path, header: &[String], rows: &DMatrix<f64>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer
        .write_record(header)
        .map_err(|e| csv_error(path, e))?;
    for row in rows.row_iter() {
        writer
            .write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|source| io_error(path, source))
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    match err.into_kind() {
        csv::ErrorKind::Io(source) => io_error(path, source),
        other => Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(format!("{other:?}")),
        },
    }
}

/// Feature names of a dataset, defaulting to `x1..xp`.
pub fn feature_names(data: &Dataset) -> Vec<String> {
    data.feature_names
        .clone()
        .unwrap_or_else(|| (1..=data.p()).map(|j| format!("x{j}")).collect())
}

/// Writes the foreground (features plus response column) and background
/// tables of a dataset.
pub fn write_dataset(
    data: &Dataset,
    foreground: &Path,
    background: &Path,
    response_col: &str,
) -> Result<()> {
    let names = feature_names(data);
    let mut fg_header = names.clone();
    fg_header.push(response_col.to_string());
    let mut fg = DMatrix::zeros(data.n(), data.p() + 1);
    fg.columns_mut(0, data.p()).copy_from(&data.x);
    fg.column_mut(data.p()).copy_from(&data.r);
    write_table(foreground, &fg_header, &fg)?;
    write_table(background, &names, &data.y)
}
