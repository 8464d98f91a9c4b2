//! On-disk formats: matrix files, label records, failure-model bundles and
//! dataset directories.
//!
//! A matrix file is one JSON header line followed by a newline and
//! `rows * cols` little-endian `f32` values in row-major order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FormatError, LataError, Result};
use crate::matrix::Matrix;
use crate::model::{Embedding, LabeledExample, PrototypeBank, TestExample};
use crate::signals::{Activation, DenseLayer, ViluWeights};

pub const MATRIX_MAGIC: &str = "LATA-MAT";
pub const MATRIX_VERSION: u32 = 1;
const MAX_HEADER_BYTES: u64 = 4096;

#[derive(Debug, Serialize, Deserialize)]
struct MatrixHeader {
    magic: String,
    version: u32,
    rows: usize,
    cols: usize,
    dtype: String,
    layout: String,
    endianness: String,
}

/// Reads a matrix file from any byte source.
pub fn read_matrix_from<R: Read>(reader: R) -> Result<Matrix> {
    let mut reader = BufReader::new(reader);
    let mut line = Vec::new();
    (&mut reader)
        .take(MAX_HEADER_BYTES)
        .read_until(b'\n', &mut line)
        .map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    if line.last() != Some(&b'\n') {
        return Err(FormatError::MalformedHeader("header line is not newline-terminated".into()).into());
    }
    line.pop();
    let header: MatrixHeader = serde_json::from_slice(&line)
        .map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    if header.magic != MATRIX_MAGIC {
        return Err(FormatError::BadMagic { found: header.magic }.into());
    }
    if header.version != MATRIX_VERSION {
        return Err(FormatError::UnsupportedVersion(header.version).into());
    }
    for (field, value, want) in [
        ("dtype", &header.dtype, "f32"),
        ("layout", &header.layout, "row-major"),
        ("endianness", &header.endianness, "little"),
    ] {
        if value != want {
            return Err(FormatError::Unsupported {
                field,
                value: value.clone(),
            }
            .into());
        }
    }
    let (rows, cols) = (header.rows, header.cols);
    if rows == 0 || cols == 0 {
        return Err(FormatError::EmptyMatrix { rows, cols }.into());
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| FormatError::MalformedHeader("rows * cols overflows".into()))?;
    let mut payload = Vec::with_capacity(expected.min(1 << 30));
    reader
        .read_to_end(&mut payload)
        .map_err(|e| FormatError::MalformedHeader(format!("payload read failed: {e}")))?;
    if payload.len() != expected {
        return Err(FormatError::LengthMismatch {
            expected,
            found: payload.len(),
        }
        .into());
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
        if !x.is_finite() {
            return Err(FormatError::NonFinite {
                row: i / cols,
                col: i % cols,
            }
            .into());
        }
        data.push(f64::from(x));
    }
    Matrix::new(rows, cols, data)
}

/// Writes `m` as `f32`; values are rounded to the nearest `f32`.
pub fn write_matrix_to<W: Write>(m: &Matrix, writer: W) -> Result<()> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(FormatError::EmptyMatrix {
            rows: m.rows(),
            cols: m.cols(),
        }
        .into());
    }
    for (i, &x) in m.as_slice().iter().enumerate() {
        if !(x as f32).is_finite() {
            return Err(FormatError::NonFinite {
                row: i / m.cols(),
                col: i % m.cols(),
            }
            .into());
        }
    }
    let header = MatrixHeader {
        magic: MATRIX_MAGIC.into(),
        version: MATRIX_VERSION,
        rows: m.rows(),
        cols: m.cols(),
        dtype: "f32".into(),
        layout: "row-major".into(),
        endianness: "little".into(),
    };
    let mut w = BufWriter::new(writer);
    let write = |w: &mut BufWriter<W>| -> std::io::Result<()> {
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for &x in m.as_slice() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| LataError::io("<writer>", e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| LataError::io(path, e))?;
    read_matrix_from(file)
}

pub fn write_matrix(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| LataError::io(path, e))?;
    write_matrix_to(m, file).map_err(|e| match e {
        LataError::Io { source, .. } => LataError::io(path, source),
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Cal,
    Test,
}

/// One line of a labels file. Test records may omit the label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub split: Split,
}

/// Parses and validates newline-delimited label records against `n_rows`
/// embeddings and `n_classes` classes. Blank lines are skipped.
pub fn read_labels_from<R: Read>(reader: R, n_rows: usize, n_classes: usize) -> Result<Vec<LabelRecord>> {
    let mut seen = vec![false; n_rows];
    let mut records = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let bad = |reason: String| LataError::from(FormatError::Labels { line: lineno, reason });
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if rec.index >= n_rows {
            return Err(bad(format!("index {} outside 0..{n_rows}", rec.index)));
        }
        if std::mem::replace(&mut seen[rec.index], true) {
            return Err(bad(format!("duplicate index {}", rec.index)));
        }
        match (rec.split, rec.label) {
            (_, Some(y)) if y >= n_classes => {
                return Err(bad(format!("label {y} out of range for {n_classes} classes")))
            }
            (Split::Cal, None) => return Err(bad("calibration record without label".into())),
            _ => {}
        }
        records.push(rec);
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(LataError::Data(format!(
            "labels file has no record for embedding row {missing}"
        )));
    }
    Ok(records)
}

pub fn read_labels(path: impl AsRef<Path>, n_rows: usize, n_classes: usize) -> Result<Vec<LabelRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| LataError::io(path, e))?;
    read_labels_from(file, n_rows, n_classes)
}

pub fn write_labels(records: &[LabelRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| LataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("label records serialize");
        writeln!(w, "{line}").map_err(|e| LataError::io(path, e))?;
    }
    w.flush().map_err(|e| LataError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleLayer {
    pub weight: PathBuf,
    pub bias: PathBuf,
    #[serde(default)]
    pub activation: Activation,
}

/// Manifest of a failure-model weight bundle. Paths are relative to the
/// manifest's directory; biases are stored as `1 x out` matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViluBundle {
    pub query_proj: PathBuf,
    pub key_proj: PathBuf,
    pub value_proj: PathBuf,
    pub mlp: Vec<BundleLayer>,
    /// Defaults to `sqrt(D)`.
    #[serde(default)]
    pub attention_scale: Option<f64>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| LataError::io(path, e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| LataError::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| LataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| LataError::io(path, std::io::Error::other(e)))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| LataError::io(path, e))
}

pub fn load_vilu_bundle(manifest: impl AsRef<Path>) -> Result<ViluWeights> {
    let manifest = manifest.as_ref();
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let bundle: ViluBundle = read_json(manifest)?;
    let mut mlp = Vec::with_capacity(bundle.mlp.len());
    for layer in &bundle.mlp {
        let bias = read_matrix(dir.join(&layer.bias))?;
        if bias.rows() != 1 {
            return Err(LataError::Data(format!(
                "bias {} must be a single row",
                layer.bias.display()
            )));
        }
        mlp.push(DenseLayer {
            weight: read_matrix(dir.join(&layer.weight))?,
            bias: bias.into_vec(),
            activation: layer.activation,
        });
    }
    ViluWeights::new(
        read_matrix(dir.join(&bundle.query_proj))?,
        read_matrix(dir.join(&bundle.key_proj))?,
        read_matrix(dir.join(&bundle.value_proj))?,
        mlp,
        bundle.attention_scale,
    )
    .map_err(|e| LataError::Data(e.to_string()))
}

/// Writes the matrices and a `manifest.json` into `dir`; returns the manifest path.
pub fn save_vilu_bundle(weights: &ViluWeights, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| LataError::io(dir, e))?;
    write_matrix(&weights.query_proj, dir.join("query.mat"))?;
    write_matrix(&weights.key_proj, dir.join("key.mat"))?;
    write_matrix(&weights.value_proj, dir.join("value.mat"))?;
    let mut layers = Vec::new();
    for (l, layer) in weights.mlp.iter().enumerate() {
        let (w, b) = (format!("mlp{l}_weight.mat"), format!("mlp{l}_bias.mat"));
        write_matrix(&layer.weight, dir.join(&w))?;
        write_matrix(&Matrix::new(1, layer.bias.len(), layer.bias.clone())?, dir.join(&b))?;
        layers.push(BundleLayer {
            weight: w.into(),
            bias: b.into(),
            activation: layer.activation,
        });
    }
    let manifest = ViluBundle {
        query_proj: "query.mat".into(),
        key_proj: "key.mat".into(),
        value_proj: "value.mat".into(),
        mlp: layers,
        attention_scale: Some(weights.attention_scale),
    };
    let path = dir.join("manifest.json");
    write_json(&manifest, &path)?;
    Ok(path)
}

/// Locations of a dataset's files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// N x D image embeddings.
    pub embeddings: PathBuf,
    /// C x D class prototypes (re-normalized on load).
    pub prototypes: PathBuf,
    pub labels: PathBuf,
    /// JSON array of C class names; classes are numbered when absent.
    #[serde(default)]
    pub class_names: Option<PathBuf>,
}

impl DataConfig {
    /// The file names used by [`save_dataset`] inside `dir`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            embeddings: dir.join("embeddings.mat"),
            prototypes: dir.join("prototypes.mat"),
            labels: dir.join("labels.jsonl"),
            class_names: Some(dir.join("classes.json")),
        }
    }
}

/// Labeled calibration pool, test items and class prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cal: Vec<LabeledExample>,
    pub test: Vec<TestExample>,
    pub bank: PrototypeBank,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.bank.n_classes()
    }

    pub fn dim(&self) -> usize {
        self.bank.dim()
    }
}

/// Loads a dataset, normalizing every embedding. Items keep the order of
/// their records in the labels file.
pub fn load_dataset(config: &DataConfig) -> Result<Dataset> {
    let emb = read_matrix(&config.embeddings)?;
    let protos = read_matrix(&config.prototypes)?;
    if emb.cols() != protos.cols() {
        return Err(LataError::Data(format!(
            "embeddings have {} columns but prototypes have {}",
            emb.cols(),
            protos.cols()
        )));
    }
    let n_classes = protos.rows();
    let names = match &config.class_names {
        Some(path) => {
            let names: Vec<String> = read_json(path)?;
            if names.len() != n_classes {
                return Err(LataError::Data(format!(
                    "{} class names for {n_classes} prototypes",
                    names.len()
                )));
            }
            names
        }
        None => (0..n_classes).map(|c| format!("class{c}")).collect(),
    };
    let bank = PrototypeBank::from_matrix(&protos, names).map_err(|e| LataError::Data(e.to_string()))?;
    let records = read_labels(&config.labels, emb.rows(), n_classes)?;
    let mut cal = Vec::new();
    let mut test = Vec::new();
    for r in records {
        let embedding = Embedding::normalize(emb.row(r.index))
            .map_err(|e| LataError::Data(format!("embedding row {}: {e}", r.index)))?;
        match r.split {
            Split::Cal => cal.push(LabeledExample {
                embedding,
                label: r.label.expect("validated on read"),
            }),
            Split::Test => test.push(TestExample {
                embedding,
                label: r.label,
            }),
        }
    }
    Ok(Dataset { cal, test, bank })
}

/// Writes a dataset into `dir` using the layout of [`DataConfig::in_dir`].
/// Calibration items come first, then test items.
pub fn save_dataset(data: &Dataset, dir: impl AsRef<Path>) -> Result<DataConfig> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| LataError::io(dir, e))?;
    let cfg = DataConfig::in_dir(dir);
    let rows: Vec<&[f64]> = data
        .cal
        .iter()
        .map(|e| e.embedding.as_slice())
        .chain(data.test.iter().map(|e| e.embedding.as_slice()))
        .collect();
    write_matrix(&Matrix::from_rows(&rows)?, &cfg.embeddings)?;
    write_matrix(&data.bank.to_matrix(), &cfg.prototypes)?;
    let records: Vec<LabelRecord> = data
        .cal
        .iter()
        .map(|e| (Some(e.label), Split::Cal))
        .chain(data.test.iter().map(|e| (e.label, Split::Test)))
        .enumerate()
        .map(|(index, (label, split))| LabelRecord { index, label, split })
        .collect();
    write_labels(&records, &cfg.labels)?;
    write_json(&data.bank.class_names(), cfg.class_names.as_deref().expect("set by in_dir"))?;
    Ok(cfg)
}
