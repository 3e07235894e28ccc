//! Comma-separated tables: datasets, labelled matrices and plain reports.
//! Floats are written in shortest round-trip form.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use penmlmm::{Group, GroupedDataset, RandomEffects};

use crate::config::DataConfig;
use crate::CliError;

pub const INTERCEPT: &str = "(intercept)";

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>), CliError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.iter().map(|s| s.trim().to_string()).collect();
    let rows = rdr.records().collect::<Result<Vec<_>, _>>().map_err(|e| csv_error(path, e))?;
    Ok((headers, rows))
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => CliError::io(path, io),
            _ => unreachable!(),
        }
    } else {
        let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
        CliError::Core(penmlmm::Error::Parse {
            path: path.display().to_string(),
            row,
            column: String::new(),
            message: e.to_string(),
        })
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn parse_error(path: &Path, line: usize, column: &str, message: impl Into<String>) -> CliError {
    CliError::Core(penmlmm::Error::Parse { path: path.display().to_string(), row: line, column: column.into(), message: message.into() })
}

fn parse_cell(path: &Path, line: usize, column: &str, cell: &str) -> Result<f64, CliError> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Err(parse_error(path, line, column, "missing value"));
    }
    let v: f64 = cell.parse().map_err(|_| parse_error(path, line, column, format!("`{cell}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_error(path, line, column, format!("`{cell}` is not finite")));
    }
    Ok(v)
}

fn column_index(path: &Path, headers: &[String], name: &str) -> Result<usize, CliError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| parse_error(path, 1, name, "column not found in header"))
}

/// A dataset file split into groups.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: Option<GroupedDataset>,
    pub predictors: Vec<String>,
    pub responses: Vec<String>,
    /// Random-effect column names, `(intercept)` for the synthesized one.
    pub random: Vec<String>,
}

/// Reads a dataset. Groups are ordered by first appearance.
pub fn load_dataset(cfg: &DataConfig, min_rows_per_group: usize) -> Result<LoadedData, CliError> {
    let path = &cfg.path;
    let (headers, rows) = read_csv(path)?;
    let g_col = column_index(path, &headers, &cfg.group_column)?;
    let y_cols = cfg.response_columns.iter().map(|n| column_index(path, &headers, n)).collect::<Result<Vec<_>, _>>()?;
    if y_cols.is_empty() {
        return Err(CliError::Config("data.response_columns is empty".into()));
    }
    let z_cols = cfg.random_columns.iter().map(|n| column_index(path, &headers, n)).collect::<Result<Vec<_>, _>>()?;
    let predictors: Vec<String> = match &cfg.predictor_columns {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != g_col && !y_cols.contains(i) && !z_cols.contains(i))
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let x_cols = predictors.iter().map(|n| column_index(path, &headers, n)).collect::<Result<Vec<_>, _>>()?;
    let random = if cfg.random_columns.is_empty() { vec![INTERCEPT.to_string()] } else { cfg.random_columns.clone() };
    let table = Table { path, headers: &headers, x_cols: &x_cols, y_cols: Some(&y_cols), z_cols: &z_cols };
    let groups = table.groups(&rows, g_col)?;
    for g in &groups {
        if g.x.nrows() < min_rows_per_group {
            return Err(CliError::Core(penmlmm::Error::Invalid(format!(
                "group `{}` has {} row(s); at least {min_rows_per_group} required",
                g.label,
                g.x.nrows()
            ))));
        }
    }
    let dataset = if groups.is_empty() { None } else { Some(GroupedDataset::new(groups)?) };
    Ok(LoadedData { dataset, predictors, responses: cfg.response_columns.clone(), random })
}

struct Table<'a> {
    path: &'a Path,
    headers: &'a [String],
    x_cols: &'a [usize],
    y_cols: Option<&'a [usize]>,
    z_cols: &'a [usize],
}

impl Table<'_> {
    fn row_values(&self, rec: &csv::StringRecord, line: usize, cols: &[usize]) -> Result<Vec<f64>, CliError> {
        cols.iter()
            .map(|&c| parse_cell(self.path, line, &self.headers[c], rec.get(c).unwrap_or("")))
            .collect()
    }

    fn groups(&self, rows: &[csv::StringRecord], g_col: usize) -> Result<Vec<Group>, CliError> {
        let mut order: Vec<String> = Vec::new();
        let mut pos: HashMap<String, usize> = HashMap::new();
        let mut buckets: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = Vec::new();
        let p = self.x_cols.len() + 1;
        let q = self.z_cols.len().max(1);
        let r = self.y_cols.map_or(0, |c| c.len());
        for (i, rec) in rows.iter().enumerate() {
            let line = i + 2;
            let label = rec.get(g_col).unwrap_or("").trim().to_string();
            if label.is_empty() {
                return Err(parse_error(self.path, line, &self.headers[g_col], "missing group label"));
            }
            let j = *pos.entry(label.clone()).or_insert_with(|| {
                order.push(label);
                buckets.push((Vec::new(), Vec::new(), Vec::new()));
                order.len() - 1
            });
            let bucket = &mut buckets[j];
            bucket.0.push(1.0);
            bucket.0.extend(self.row_values(rec, line, self.x_cols)?);
            if self.z_cols.is_empty() {
                bucket.1.push(1.0);
            } else {
                bucket.1.extend(self.row_values(rec, line, self.z_cols)?);
            }
            if let Some(y_cols) = self.y_cols {
                bucket.2.extend(self.row_values(rec, line, y_cols)?);
            }
        }
        Ok(order
            .into_iter()
            .zip(buckets)
            .map(|(label, (x, z, y))| {
                let n = x.len() / p;
                Group {
                    label,
                    x: DMatrix::from_row_slice(n, p, &x),
                    z: DMatrix::from_row_slice(n, q, &z),
                    y: if r == 0 { DMatrix::zeros(n, 0) } else { DMatrix::from_row_slice(n, r, &y) },
                }
            })
            .collect())
    }
}

/// New data for prediction: per row the label (if a group column exists),
/// the design row with intercept, and the random-effect design row.
pub struct PredictRows {
    pub labels: Vec<Option<String>>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

pub fn load_predict_rows(
    path: &Path,
    group_column: &str,
    predictors: &[String],
    random: &[String],
) -> Result<PredictRows, CliError> {
    let (headers, rows) = read_csv(path)?;
    let missing: Vec<&str> = predictors.iter().filter(|n| !headers.contains(n)).map(|s| s.as_str()).collect();
    if !missing.is_empty() {
        return Err(parse_error(path, 1, &missing.join(","), "predictor columns missing from new data"));
    }
    let x_cols: Vec<usize> = predictors.iter().map(|n| column_index(path, &headers, n)).collect::<Result<_, _>>()?;
    let z_names: Vec<&String> = random.iter().filter(|n| n.as_str() != INTERCEPT).collect();
    let z_cols: Vec<usize> = z_names.iter().map(|n| column_index(path, &headers, n)).collect::<Result<_, _>>()?;
    let g_col = headers.iter().position(|h| h == group_column);
    let table = Table { path, headers: &headers, x_cols: &x_cols, y_cols: None, z_cols: &z_cols };
    let m = rows.len();
    let p = predictors.len() + 1;
    let q = random.len();
    let mut x = DMatrix::zeros(m, p);
    let mut z = DMatrix::from_element(m, q, 1.0);
    let mut labels = Vec::with_capacity(m);
    for (i, rec) in rows.iter().enumerate() {
        let line = i + 2;
        x[(i, 0)] = 1.0;
        for (k, v) in table.row_values(rec, line, &x_cols)?.into_iter().enumerate() {
            x[(i, k + 1)] = v;
        }
        if !z_cols.is_empty() {
            for (k, v) in table.row_values(rec, line, &z_cols)?.into_iter().enumerate() {
                z[(i, k)] = v;
            }
        }
        labels.push(g_col.and_then(|c| rec.get(c)).map(|s| s.trim().to_string()).filter(|s| !s.is_empty()));
    }
    Ok(PredictRows { labels, x, z })
}

/// Matrix with a header of column names and a first column of row names.
pub fn format_matrix(corner: &str, rows: &[String], cols: &[String], m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    out.push_str(corner);
    for c in cols {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (i, name) in rows.iter().enumerate() {
        out.push_str(name);
        for j in 0..m.ncols() {
            out.push(',');
            out.push_str(&m[(i, j)].to_string());
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix(path: &Path, corner: &str, rows: &[String], cols: &[String], m: &DMatrix<f64>) -> Result<(), CliError> {
    write_file(path, &format_matrix(corner, rows, cols, m))
}

#[derive(Debug, Clone)]
pub struct NamedMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: DMatrix<f64>,
}

pub fn read_matrix(path: &Path) -> Result<NamedMatrix, CliError> {
    let (headers, records) = read_csv(path)?;
    if headers.is_empty() {
        return Err(parse_error(path, 1, "", "empty header"));
    }
    let cols: Vec<String> = headers[1..].to_vec();
    let mut values = DMatrix::zeros(records.len(), cols.len());
    let mut rows = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        rows.push(rec.get(0).unwrap_or("").to_string());
        for (j, name) in cols.iter().enumerate() {
            values[(i, j)] = parse_cell(path, i + 2, name, rec.get(j + 1).unwrap_or(""))?;
        }
    }
    Ok(NamedMatrix { rows, cols, values })
}

/// Column names of vec(Λ_j): response-major, then random-effect column.
pub fn vec_names(responses: &[String], random: &[String]) -> Vec<String> {
    responses.iter().flat_map(|y| random.iter().map(move |z| format!("{y}:{z}"))).collect()
}

pub fn write_blups(path: &Path, blups: &RandomEffects, names: &[String]) -> Result<(), CliError> {
    let n = blups.lambdas.len();
    let mut m = DMatrix::zeros(n, names.len());
    for (j, l) in blups.lambdas.iter().enumerate() {
        // column-major q × r storage matches vec(Λ)
        for (k, v) in l.as_slice().iter().enumerate() {
            m[(j, k)] = *v;
        }
    }
    write_matrix(path, "group", &blups.labels, names, &m)
}

pub fn read_blups(path: &Path, q: usize, r: usize) -> Result<RandomEffects, CliError> {
    let m = read_matrix(path)?;
    if m.cols.len() != q * r {
        return Err(parse_error(path, 1, "", format!("expected {} random-effect columns, found {}", q * r, m.cols.len())));
    }
    let lambdas = (0..m.rows.len())
        .map(|j| DMatrix::from_column_slice(q, r, m.values.row(j).transpose().as_slice()))
        .collect();
    Ok(RandomEffects { labels: m.rows, lambdas })
}
