//! CSV and JSON artifacts: datasets, models, histories, correlation matrices, graphs.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::discovery::Cpdag;
use crate::error::{Error, Result};
use crate::masking::{Assignment, MaskSet, MaskValue, MaskedDataset};
use crate::mixing::MixingFn;
use crate::nn::Matrix;
use crate::scm::ScmModel;
use crate::train::TrainHistory;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Writes `m` with a header row `{prefix}0, {prefix}1, …`. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_matrix_csv(path: impl AsRef<Path>, m: &Matrix, prefix: &str) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record((0..m.cols()).map(|j| format!("{prefix}{j}")))?;
    for r in 0..m.rows() {
        w.write_record(m.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let cols = rdr.headers()?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        for field in rec.iter() {
            data.push(field.trim().parse::<f64>().map_err(|e| Error::Config(format!("{}: bad number '{field}': {e}", path.display())))?);
        }
        rows += 1;
    }
    Matrix::from_vec(rows, cols, data)
}

fn write_usize_column(path: &Path, name: &str, values: &[usize]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([name])?;
    for v in values {
        w.write_record([v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_usize_column(path: &Path) -> Result<Vec<usize>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            let field = rec.get(0).unwrap_or_default();
            field.trim().parse::<usize>().map_err(|e| Error::Config(format!("{}: bad index '{field}': {e}", path.display())))
        })
        .collect()
}

/// Everything needed to regenerate or reinterpret a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub rows: usize,
    pub delta: f64,
    pub mask_value: MaskValue,
    pub mask_strategy: crate::masking::MaskStrategy,
    pub assignment: Assignment,
    pub scm: ScmModel,
    pub mixing: MixingFn,
    /// The experiment configuration that produced the dataset, if any.
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Writes `X.csv`, `Z.csv`, `C.csv`, `groups.csv`, `masks.csv` and the manifest into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, ds: &MaskedDataset, manifest: &DatasetManifest) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_matrix_csv(dir.join("X.csv"), &ds.x, "x")?;
    write_matrix_csv(dir.join("Z.csv"), &ds.z, "z")?;
    write_matrix_csv(dir.join("C.csv"), &ds.c, "c")?;
    write_usize_column(&dir.join("groups.csv"), "group", &ds.group)?;
    let masks = Matrix::from_fn(ds.mask_set.len(), ds.mask_set.n(), |g, j| if ds.mask_set.mask(g)[j] { 1.0 } else { 0.0 });
    write_matrix_csv(dir.join("masks.csv"), &masks, "y")?;
    write_json(dir.join(MANIFEST_FILE), manifest)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(MaskedDataset, DatasetManifest)> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = read_json(dir.join(MANIFEST_FILE))?;
    let masks = read_matrix_csv(dir.join("masks.csv"))?;
    let rows: Vec<Vec<u8>> = (0..masks.rows()).map(|g| masks.row(g).iter().map(|&v| v as u8).collect()).collect();
    let ds = MaskedDataset {
        x: read_matrix_csv(dir.join("X.csv"))?,
        z: read_matrix_csv(dir.join("Z.csv"))?,
        c: read_matrix_csv(dir.join("C.csv"))?,
        group: read_usize_column(&dir.join("groups.csv"))?,
        mask_set: MaskSet::from_rows(&rows, manifest.mask_strategy)?,
        mask_value: manifest.mask_value.clone(),
    };
    let n = ds.len();
    if ds.x.rows() != n || ds.z.rows() != n || ds.c.rows() != n {
        return Err(Error::Shape(format!("{}: files disagree on the number of samples", dir.display())));
    }
    if let Some(&g) = ds.group.iter().find(|&&g| g >= ds.mask_set.len()) {
        return Err(Error::Config(format!("{}: group {g} has no mask row", dir.display())));
    }
    Ok((ds, manifest))
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &TrainHistory) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    for r in &history.records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Correlation matrix with row labels `z{i}` and column labels `zhat{j}`.
pub fn write_corr_csv(path: impl AsRef<Path>, corr: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(std::iter::once("row".to_string()).chain((0..corr.cols()).map(|j| format!("zhat{j}"))))?;
    for i in 0..corr.rows() {
        w.write_record(std::iter::once(format!("z{i}")).chain(corr.row(i).iter().map(|v| v.to_string())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_cpdag_csv(path: impl AsRef<Path>, g: &Cpdag) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(["from", "to", "directed"])?;
    for (a, b, directed) in g.edge_list() {
        w.write_record([a.to_string(), b.to_string(), directed.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rows of any serializable record type.
pub fn write_records_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
