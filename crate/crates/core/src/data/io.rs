use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::MultiViewDataset;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.txt";

/// Encoding of the per-view matrix files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    /// Headerless comma-separated text, one sample per row.
    #[default]
    Csv,
    /// Little-endian `f64`, column-major (all of column 0, then column 1, ...).
    F64le,
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "V")]
    pub v: usize,
    pub dims: Vec<usize>,
    pub files: Vec<String>,
    #[serde(default)]
    pub format: MatrixFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    /// Optional `N × V` 0/1 text matrix; absent means fully observed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

/// Reads a dataset directory (manifest, one matrix per view, optional labels).
pub fn load_dataset(root: impl AsRef<Path>) -> Result<MultiViewDataset> {
    let root = root.as_ref();
    let manifest_path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::ingest(&manifest_path, e.to_string()))?;

    if manifest.files.len() != manifest.v || manifest.dims.len() != manifest.v {
        return Err(Error::Schema(format!(
            "manifest declares V={} but lists {} files and {} dims",
            manifest.v,
            manifest.files.len(),
            manifest.dims.len()
        )));
    }

    let mut views = Vec::with_capacity(manifest.v);
    for (file, &dim) in manifest.files.iter().zip(&manifest.dims) {
        let path = root.join(file);
        let x = match manifest.format {
            MatrixFormat::Csv => read_csv_matrix(&path)?,
            MatrixFormat::F64le => read_binary_matrix(&path, manifest.n, dim)?,
        };
        if x.ncols() != dim {
            return Err(Error::Schema(format!(
                "{} has {} columns, manifest says {dim}",
                path.display(),
                x.ncols()
            )));
        }
        if x.nrows() != manifest.n {
            return Err(Error::Schema(format!(
                "{} has {} rows, manifest says N={}",
                path.display(),
                x.nrows(),
                manifest.n
            )));
        }
        views.push(x);
    }

    let labels_path = match &manifest.labels {
        Some(f) => Some(root.join(f)),
        None => Some(root.join(LABELS_FILE)).filter(|p| p.exists()),
    };
    let labels = labels_path.map(|p| read_labels(&p)).transpose()?;

    let mask = match &manifest.mask {
        Some(f) => read_mask(&root.join(f), manifest.n, manifest.v)?,
        None => Array2::from_elem((manifest.n, manifest.v), true),
    };

    MultiViewDataset::with_mask(manifest.name, views, mask, labels)
}

/// Writes `ds` in the directory layout read by [`load_dataset`].
pub fn save_dataset(ds: &MultiViewDataset, root: impl AsRef<Path>, format: MatrixFormat) -> Result<Manifest> {
    let root = root.as_ref();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let ext = match format {
        MatrixFormat::Csv => "csv",
        MatrixFormat::F64le => "bin",
    };
    let files: Vec<String> = (0..ds.n_views()).map(|v| format!("view{v}.{ext}")).collect();
    for (x, file) in ds.views.iter().zip(&files) {
        let path = root.join(file);
        match format {
            MatrixFormat::Csv => write_csv_matrix(&path, x)?,
            MatrixFormat::F64le => write_binary_matrix(&path, x)?,
        }
    }

    let labels = match &ds.labels {
        Some(labels) => {
            let path = root.join(LABELS_FILE);
            let mut body = String::with_capacity(labels.len() * 3);
            for l in labels {
                body.push_str(&l.to_string());
                body.push('\n');
            }
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            Some(LABELS_FILE.to_string())
        }
        None => None,
    };

    let mask = if ds.mask.iter().all(|&o| o) {
        None
    } else {
        let path = root.join("mask.csv");
        let as_num = ds.mask.mapv(|o| if o { 1.0 } else { 0.0 });
        write_csv_matrix(&path, &as_num)?;
        Some("mask.csv".to_string())
    };

    let manifest = Manifest {
        name: ds.name.clone(),
        n: ds.n_samples(),
        v: ds.n_views(),
        dims: ds.dims(),
        files,
        format,
        labels,
        mask,
    };
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Headerless comma-separated numeric matrix.
pub fn read_csv_matrix(path: &Path) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::ingest(path, e.to_string()))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(Error::ingest(
                    path,
                    format!("line {} has {} fields, expected {c}", line + 1, record.len()),
                ))
            }
            _ => {}
        }
        for field in record.iter() {
            let x: f64 = field
                .parse()
                .map_err(|_| Error::ingest(path, format!("line {}: `{field}` is not a number", line + 1)))?;
            data.push(x);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::ingest(path, e.to_string()))
}

pub fn write_csv_matrix(path: &Path, x: &Array2<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(file));
    for row in x.outer_iter() {
        writer
            .write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| Error::ingest(path, e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn read_binary_matrix(path: &Path, n: usize, d: usize) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let expected = n * d * 8;
    let actual = file.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
    if actual != expected {
        return Err(Error::Schema(format!(
            "{} holds {actual} bytes, expected {expected} for {n}x{d}",
            path.display()
        )));
    }
    let mut reader = BufReader::new(file);
    let mut x = Array2::zeros((n, d));
    for j in 0..d {
        for i in 0..n {
            x[[i, j]] = reader.read_f64::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(x)
}

fn write_binary_matrix(path: &Path, x: &Array2<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for col in x.columns() {
        for &v in col {
            w.write_f64::<LittleEndian>(v).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_labels(path: &PathBuf) -> Result<Vec<usize>> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| Error::ingest(path, format!("line {}: `{}` is not a label", i + 1, l.trim())))
        })
        .collect()
}

fn read_mask(path: &Path, n: usize, v: usize) -> Result<Array2<bool>> {
    let m = read_csv_matrix(path)?;
    if m.dim() != (n, v) {
        return Err(Error::Schema(format!(
            "{} is {:?}, expected ({n}, {v})",
            path.display(),
            m.dim()
        )));
    }
    Ok(m.mapv(|x| x != 0.0))
}
