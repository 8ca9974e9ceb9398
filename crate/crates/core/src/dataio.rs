//! Datasets, checkpoints, and JSON/CSV persistence.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::correlation::ScoreReport;
use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// A feature matrix with optional integer labels in `0..num_classes`.
///
/// Constructors validate the invariants (at least one row and one feature
/// column, at least two classes, finite features, labels in range), so any
/// `Dataset` value in hand is well formed.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    features: Matrix,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Matrix,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            features,
            labels,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let (m, d) = self.features.shape();
        if m == 0 || d == 0 {
            return Err(Error::InvalidInput(format!(
                "dataset {:?} must have at least one row and one feature, got {m}x{d}",
                self.name
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "dataset {:?} needs at least 2 classes, got {}",
                self.name, self.num_classes
            )));
        }
        if !self.features.is_finite() {
            return Err(Error::InvalidInput(format!(
                "dataset {:?} has non-finite features",
                self.name
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != m {
                return Err(Error::InvalidInput(format!(
                    "dataset {:?} has {} labels for {m} rows",
                    self.name,
                    labels.len()
                )));
            }
            if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= self.num_classes) {
                return Err(Error::InvalidInput(format!(
                    "dataset {:?} row {i}: label {y} out of range for {} classes",
                    self.name, self.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Labels, or an `InvalidInput` error naming the operation that needed them.
    pub fn require_labels(&self, op: &str) -> Result<&[usize]> {
        self.labels.as_deref().ok_or_else(|| {
            Error::InvalidInput(format!("{op} needs labels but dataset {:?} has none", self.name))
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// The same rows with labels removed. Scores only ever see this view of a
    /// test set.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            features: self.features.clone(),
            labels: None,
            num_classes: self.num_classes,
        }
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        Dataset::new(self.name.clone(), self.features.clone(), Some(labels), self.num_classes)
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Dataset {
        self.name = name.into();
        self
    }

    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.name.clone(),
            self.features.select_rows(idx),
            self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            self.num_classes,
        )
    }
}

/// Read a dataset from CSV with header `f0,…,f{D-1}[,label]`.
///
/// The dataset is named after the file stem.
pub fn load_csv(path: impl AsRef<Path>, has_labels: bool, num_classes: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(0, format!("{other:?}")),
        })?;

    let header = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let ncols = header.len();
    let d = if has_labels { ncols.saturating_sub(1) } else { ncols };
    if d == 0 {
        return Err(parse_err(1, "no feature columns".into()));
    }
    for (j, h) in header.iter().take(d).enumerate() {
        if h.trim() != format!("f{j}") {
            return Err(parse_err(1, format!("expected column f{j}, found {h:?}")));
        }
    }
    if has_labels && header.get(d).map(str::trim) != Some("label") {
        return Err(parse_err(1, "last column must be `label`".into()));
    }

    let mut data = Vec::new();
    let mut labels = has_labels.then(Vec::new);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != ncols {
            return Err(parse_err(line, format!("expected {ncols} fields, found {}", rec.len())));
        }
        for (j, cell) in rec.iter().take(d).enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("column f{j}: not a number: {cell:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column f{j}: non-finite value {cell:?}")));
            }
            data.push(v);
        }
        if let Some(labels) = labels.as_mut() {
            let cell = rec[d].trim();
            let y: usize = cell
                .parse()
                .map_err(|_| parse_err(line, format!("label is not a class index: {cell:?}")))?;
            if y >= num_classes {
                return Err(parse_err(
                    line,
                    format!("label {y} out of range for {num_classes} classes"),
                ));
            }
            labels.push(y);
        }
    }
    let m = data.len() / d;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, Matrix::from_vec(m, d, data)?, labels, num_classes)
}

/// Write a dataset in the format [`load_csv`] reads. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    let d = ds.dim();
    let header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    out.push_str(&header.join(","));
    if ds.labels().is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for (i, row) in ds.features().iter_rows().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&v.to_string());
        }
        if let Some(l) = ds.labels() {
            out.push(',');
            out.push_str(&l[i].to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Provenance stored alongside checkpoint weights.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: u32,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// D×K
    pub weights: Matrix,
    pub meta: TrainMeta,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGCKPT01";
const HEADER_LEN: usize = 16;
const META_LEN: usize = 20;

/// Binary layout, all little-endian: magic `SGCKPT01`, `u32` D, `u32` K,
/// D·K `f64` weights in row-major order, then an optional 20-byte trailer
/// (`u64` seed, `u32` epochs, `f64` learning rate).
pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (d, k) = c.weights.shape();
    let to_u32 = |n: usize| {
        u32::try_from(n).map_err(|_| Error::InvalidInput(format!("dimension {n} exceeds u32")))
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * d * k + META_LEN);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&to_u32(d)?.to_le_bytes());
    buf.extend_from_slice(&to_u32(k)?.to_le_bytes());
    for w in c.weights.data() {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    buf.extend_from_slice(&c.meta.seed.to_le_bytes());
    buf.extend_from_slice(&c.meta.epochs.to_le_bytes());
    buf.extend_from_slice(&c.meta.learning_rate.to_le_bytes());
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |msg: String| Error::CorruptCheckpoint(msg);
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (d, k) = (u32_at(8), u32_at(12));
    if d == 0 || k == 0 {
        return Err(corrupt(format!("invalid shape {d}x{k}")));
    }
    let body = d
        .checked_mul(k)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| corrupt(format!("shape {d}x{k} overflows")))?;
    let with_meta = HEADER_LEN + body + META_LEN;
    if bytes.len() != HEADER_LEN + body && bytes.len() != with_meta {
        return Err(corrupt(format!(
            "{} bytes does not match declared shape {d}x{k}",
            bytes.len()
        )));
    }
    let weights: Vec<f64> = bytes[HEADER_LEN..HEADER_LEN + body]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(corrupt("non-finite weight".into()));
    }
    let meta = if bytes.len() == with_meta {
        let t = &bytes[HEADER_LEN + body..];
        TrainMeta {
            seed: u64::from_le_bytes(t[0..8].try_into().unwrap()),
            epochs: u32::from_le_bytes(t[8..12].try_into().unwrap()),
            learning_rate: f64::from_le_bytes(t[12..20].try_into().unwrap()),
        }
    } else {
        TrainMeta::default()
    };
    Ok(Checkpoint {
        weights: Matrix::from_vec(d, k, weights)?,
        meta,
    })
}

/// Pretty JSON formatter that prints every float with 17 significant digits.
struct FixedDigits<'a>(PrettyFormatter<'a>);

impl Formatter for FixedDigits<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        write!(w, "{v:.16e}")
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Deterministic JSON: object keys sorted, floats at 17 significant digits,
/// trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    // Going through Value sorts keys (serde_json's default map is a BTreeMap).
    let value = serde_json::to_value(value)?;
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedDigits(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = to_json_string(value)?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

pub fn save_report(report: &ScoreReport, path: impl AsRef<Path>) -> Result<()> {
    report.check_emittable()?;
    write_json(report, path)
}

pub fn load_report(path: impl AsRef<Path>) -> Result<ScoreReport> {
    read_json(path)
}
