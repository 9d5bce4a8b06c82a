//! Datasets, synthetic tasks and the on-disk formats: `rawf32` datasets,
//! checkpoints and line-delimited run logs. Byte layouts are documented in
//! `FORMATS.md` at the repository root.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NsnError, Result};
use crate::linalg::{dot, seeded_rng, Matrix};
use crate::nn::{Activation, Block, DenseLayer, Layer, Model, NsnLayer};
use crate::training::UncertaintyParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(NsnError::Dimension {
                op: "Dataset::new",
                left: format!("{} feature rows", features.rows()),
                right: format!("{} labels", labels.len()),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(NsnError::Label { label, num_classes });
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `indices`, in order.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        let d = self.dim();
        let mut x = Matrix::zeros(indices.len(), d);
        let mut y = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            x.row_mut(row).copy_from_slice(self.features.row(i));
            y.push(self.labels[i]);
        }
        (x, y)
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        let (features, labels) = self.gather(indices);
        Dataset {
            features,
            labels,
            num_classes: self.num_classes,
            split,
        }
    }

    /// Stratified split: the first `ceil(fraction · n_c)` shuffled examples of
    /// each class go to the second part.
    pub fn stratified_split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(NsnError::config("test_fraction", "must lie in [0, 1)"));
        }
        let mut rng = seeded_rng(seed);
        let mut first = Vec::new();
        let mut second = Vec::new();
        for class in 0..self.num_classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            rng.shuffle(&mut idx);
            let k = (fraction * idx.len() as f64).ceil() as usize;
            second.extend_from_slice(&idx[..k]);
            first.extend_from_slice(&idx[k..]);
        }
        first.sort_unstable();
        second.sort_unstable();
        if first.is_empty() || second.is_empty() {
            return Err(NsnError::config("test_fraction", "split leaves an empty part"));
        }
        Ok((self.subset(&first, Split::Train), self.subset(&second, Split::Test)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Csv,
    Rawf32,
}

pub const RAWF32_MAGIC: &[u8; 4] = b"NSND";

pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Dataset> {
    match format {
        DatasetFormat::Csv => load_csv(path.as_ref()),
        DatasetFormat::Rawf32 => decode_rawf32(&fs::read(path)?),
    }
}

fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| NsnError::Parse {
            offset: 0,
            message: "csv header has no `label` column".into(),
        })?;
    let d = headers.len() - 1;
    if d == 0 {
        return Err(NsnError::Parse {
            offset: 0,
            message: "csv has no feature columns".into(),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let offset = record.position().map_or(0, |p| p.byte());
        let parse_err = |message: String| NsnError::Parse { offset, message };
        for (j, field) in record.iter().enumerate() {
            let field = field.trim();
            if j == label_col {
                labels.push(field.parse::<usize>().map_err(|e| parse_err(format!("label {field:?}: {e}")))?);
            } else {
                let v = field
                    .parse::<f64>()
                    .map_err(|e| parse_err(format!("feature {field:?}: {e}")))?;
                if !v.is_finite() {
                    return Err(parse_err(format!("non-finite feature {field:?}")));
                }
                data.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(NsnError::Parse {
            offset: 0,
            message: "csv has no data rows".into(),
        });
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Matrix::new(labels.len(), d, data)?, labels, num_classes, Split::Train)
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..dataset.len() {
        let mut row: Vec<String> = dataset.features.row(i).iter().map(|v| v.to_string()).collect();
        row.push(dataset.labels[i].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Features are narrowed to `f32`; loading widens them back exactly.
pub fn encode_rawf32(dataset: &Dataset) -> Vec<u8> {
    let (n, d) = dataset.features.shape();
    let mut out = Vec::with_capacity(16 + 4 * n * d + 4 * n);
    out.extend_from_slice(RAWF32_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.num_classes as u32).to_le_bytes());
    for v in dataset.features.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for l in &dataset.labels {
        out.extend_from_slice(&(*l as u32).to_le_bytes());
    }
    out
}

pub fn save_rawf32(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_rawf32(dataset))?;
    Ok(())
}

pub fn decode_rawf32(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 16 {
        return Err(NsnError::Truncated {
            expected: 16,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..4] != RAWF32_MAGIC {
        return Err(NsnError::Magic {
            expected: "NSND".into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (n, d, num_classes) = (word(4), word(8), word(12));
    if n == 0 || d == 0 {
        return Err(NsnError::Parse {
            offset: 4,
            message: format!("empty dataset header (N={n}, d={d})"),
        });
    }
    let expected = 16 + 4 * (n as u64) * (d as u64) + 4 * n as u64;
    if bytes.len() as u64 != expected {
        return Err(NsnError::Truncated {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let mut data = Vec::with_capacity(n * d);
    for k in 0..n * d {
        let at = 16 + 4 * k;
        let v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(NsnError::Parse {
                offset: at as u64,
                message: "non-finite feature".into(),
            });
        }
        data.push(f64::from(v));
    }
    let label_base = 16 + 4 * n * d;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let at = label_base + 4 * i;
        let label = word(at);
        if label >= num_classes {
            return Err(NsnError::Parse {
                offset: at as u64,
                message: format!("label {label} >= num_classes {num_classes}"),
            });
        }
        labels.push(label);
    }
    Dataset::new(Matrix::new(n, d, data)?, labels, num_classes, Split::Train)
}

/// Gaussian clusters around `separation · u_c` for orthonormal random `u_c`.
pub fn synth_clusters(seed: u64, num_classes: usize, d: usize, n_per_class: usize, separation: f64) -> Result<Dataset> {
    if num_classes == 0 || d == 0 || n_per_class == 0 {
        return Err(NsnError::config("data", "num_classes, dim and n_per_class must be positive"));
    }
    if num_classes > d {
        return Err(NsnError::config(
            "data.num_classes",
            format!("{num_classes} orthonormal centers do not fit in dimension {d}"),
        ));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(NsnError::config("data.separation", "must be finite and non-negative"));
    }
    let mut rng = seeded_rng(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    while centers.len() < num_classes {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        for _ in 0..2 {
            for c in &centers {
                let p = dot(&v, c);
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            centers.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let total = num_classes * n_per_class;
    let mut features = Matrix::zeros(total, d);
    let mut labels = Vec::with_capacity(total);
    for (c, center) in centers.iter().enumerate() {
        for k in 0..n_per_class {
            let row = features.row_mut(c * n_per_class + k);
            for (x, u) in row.iter_mut().zip(center) {
                *x = separation * u + rng.gaussian();
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, num_classes, Split::Train)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NSNC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Nsn,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub d_in: usize,
    pub d_out: usize,
    /// Zero for dense layers.
    pub max_rank: usize,
    pub activation: Activation,
}

impl LayerSpec {
    fn payload_len(&self) -> usize {
        match self.kind {
            LayerKind::Nsn => self.max_rank * self.d_in + self.d_out * self.max_rank + self.d_out,
            LayerKind::Dense => self.d_out * self.d_in + self.d_out,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: Option<u64>,
    pub config_digest: Option<String>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    layers: Vec<LayerSpec>,
    uncertainty: Option<BTreeMap<usize, f64>>,
    meta: CheckpointMeta,
    payload_bytes: u64,
    payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub uncertainty: Option<UncertaintyParams>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            uncertainty: None,
            meta: CheckpointMeta::default(),
        }
    }

    pub fn topology(&self) -> Vec<LayerSpec> {
        topology(&self.model)
    }
}

pub fn topology(model: &Model) -> Vec<LayerSpec> {
    model
        .blocks()
        .iter()
        .map(|b| LayerSpec {
            kind: if b.layer.is_nsn() { LayerKind::Nsn } else { LayerKind::Dense },
            d_in: b.layer.d_in(),
            d_out: b.layer.d_out(),
            max_rank: b.layer.max_rank().unwrap_or(0),
            activation: b.activation,
        })
        .collect()
}

fn payload(model: &Model) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * model.parameter_count());
    let mut push = |vals: &[f64]| {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for b in model.blocks() {
        match &b.layer {
            Layer::Nsn(l) => {
                push(l.a.data());
                push(l.b.data());
                push(&l.bias);
            }
            Layer::Dense(l) => {
                push(l.w.data());
                push(&l.bias);
            }
        }
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let body = payload(&ckpt.model);
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        layers: ckpt.topology(),
        uncertainty: ckpt.uncertainty.as_ref().map(|u| u.values().clone()),
        meta: ckpt.meta.clone(),
        payload_bytes: body.len() as u64,
        payload_sha256: sha256_hex(&body),
    };
    let header_json = serde_json::to_vec_pretty(&header)?;
    let mut out = Vec::with_capacity(16 + header_json.len() + body.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 {
        return Err(NsnError::Truncated {
            expected: 16,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(NsnError::Magic {
            expected: "NSNC".into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(NsnError::Version(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = 16u64.checked_add(header_len).filter(|&e| e <= bytes.len() as u64).ok_or(
        NsnError::Truncated {
            expected: 16u64.saturating_add(header_len),
            actual: bytes.len() as u64,
        },
    )? as usize;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..header_end]).map_err(|e| NsnError::Parse {
        offset: 16,
        message: format!("corrupted checkpoint header: {e}"),
    })?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(NsnError::Version(header.format_version));
    }
    let body = &bytes[header_end..];
    let expected_len: u64 = 8 * header.layers.iter().map(|l| l.payload_len() as u64).sum::<u64>();
    if expected_len != header.payload_bytes {
        return Err(NsnError::Parse {
            offset: 16,
            message: format!(
                "header declares {} payload bytes but topology needs {expected_len}",
                header.payload_bytes
            ),
        });
    }
    if body.len() as u64 != expected_len {
        return Err(NsnError::Truncated {
            expected: expected_len,
            actual: body.len() as u64,
        });
    }
    let digest = sha256_hex(body);
    if digest != header.payload_sha256 {
        return Err(NsnError::Digest {
            expected: header.payload_sha256,
            actual: digest,
        });
    }

    let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
    let mut blocks = Vec::with_capacity(header.layers.len());
    for spec in &header.layers {
        let layer = match spec.kind {
            LayerKind::Nsn => {
                if spec.max_rank == 0 {
                    return Err(NsnError::Parse {
                        offset: 16,
                        message: "nsn layer with max_rank 0".into(),
                    });
                }
                let a = Matrix::new(spec.max_rank, spec.d_in, take(spec.max_rank * spec.d_in))?;
                let b = Matrix::new(spec.d_out, spec.max_rank, take(spec.d_out * spec.max_rank))?;
                Layer::Nsn(NsnLayer::new(a, b, take(spec.d_out))?)
            }
            LayerKind::Dense => {
                let w = Matrix::new(spec.d_out, spec.d_in, take(spec.d_out * spec.d_in))?;
                Layer::Dense(DenseLayer::new(w, take(spec.d_out))?)
            }
        };
        blocks.push(Block {
            layer,
            activation: spec.activation,
        });
    }
    Ok(Checkpoint {
        model: Model::new(blocks)?,
        uncertainty: header.uncertainty.map(UncertaintyParams::from_values),
        meta: header.meta,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Run logs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    IdEval,
    OodEval,
}

/// One evaluation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub rank: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub s: BTreeMap<usize, f64>,
}

pub type MetricsLog = Vec<RunRecord>;

/// Append-only writer; call [`RunLogWriter::flush`] at epoch boundaries.
pub struct RunLogWriter {
    out: BufWriter<File>,
}

impl RunLogWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(RunLogWriter {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append_to(path: impl AsRef<Path>) -> Result<Self> {
        Ok(RunLogWriter {
            out: BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?),
        })
    }

    pub fn append(&mut self, record: &RunRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_runlog(records: &[RunRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = RunLogWriter::create(path)?;
    let mut last_epoch = None;
    for r in records {
        if last_epoch.is_some_and(|e| e != r.epoch) {
            w.flush()?;
        }
        w.append(r)?;
        last_epoch = Some(r.epoch);
    }
    w.flush()
}

pub fn read_runlog(path: impl AsRef<Path>) -> Result<MetricsLog> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| NsnError::Parse {
                offset,
                message: e.to_string(),
            })?);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}
