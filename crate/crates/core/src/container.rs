//! Flat binary container for datasets and model checkpoints, plus CSV export.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        4 bytes  "LCGC"
//! version      u16      = 1
//! classes      u32
//! dim          u32
//! records      u32      number of matrices that follow
//! shapes       records × (rows u32, cols u32)
//! payload      Σ rows·cols × f64, records in order, each row-major
//! ```
//!
//! A dataset is stored as five records: labeled `[N × (1+d)]` and unlabeled
//! `[M × (1+d)]` samples with the label in column 0 (`−1` for unlabeled), the
//! hidden unlabeled labels `[M × 1]`, the test split `[K × (1+d)]` and the
//! class means `[C × d]`.
//!
//! A checkpoint stores one record per parameter tensor, weight `[in × out]`
//! then bias `[1 × out]` per layer, with a JSON manifest beside it.

use std::path::Path;

use crate::data::{LabeledSample, SynthDataset};
use crate::error::{Error, Result};
use crate::experiment::write_atomic;
use crate::model::{Layer, Mlp, ModelManifest};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LCGC";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Record {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Format(format!("record {rows}×{cols} with {} values", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub classes: u32,
    pub dim: u32,
    pub records: Vec<Record>,
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated input: needed {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload: usize = self.records.iter().map(|r| r.data.len()).sum();
        let mut out = Vec::with_capacity(18 + 8 * self.records.len() + 8 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.classes.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&to_u32(self.records.len(), "record count")?.to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&to_u32(r.rows, "rows")?.to_le_bytes());
            out.extend_from_slice(&to_u32(r.cols, "cols")?.to_le_bytes());
        }
        for r in &self.records {
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(4)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = rd.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let classes = rd.u32()?;
        let dim = rd.u32()?;
        let count = rd.u32()? as usize;
        let mut shapes = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            shapes.push((rd.u32()? as usize, rd.u32()? as usize));
        }
        let mut records = Vec::with_capacity(shapes.len());
        for (rows, cols) in shapes {
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Format(format!("record {rows}×{cols} overflows")))?;
            if n > (bytes.len() - rd.pos) / 8 {
                return Err(Error::Format(format!("record {rows}×{cols} exceeds remaining payload")));
            }
            let data = (0..n).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
            records.push(Record { rows, cols, data });
        }
        if rd.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - rd.pos)));
        }
        Ok(Self { classes, dim, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn labeled_record(samples: &[LabeledSample], dim: usize) -> Result<Record> {
    let mut data = Vec::with_capacity(samples.len() * (dim + 1));
    for s in samples {
        data.push(s.y as f64);
        data.extend_from_slice(&s.x);
    }
    Record::new(samples.len(), dim + 1, data)
}

fn parse_label(v: f64, classes: usize) -> Result<usize> {
    if v.fract() != 0.0 || v < 0.0 || v >= classes as f64 {
        return Err(Error::Format(format!("invalid label {v}")));
    }
    Ok(v as usize)
}

fn labeled_from_record(r: &Record, classes: usize) -> Result<Vec<LabeledSample>> {
    (0..r.rows)
        .map(|i| {
            let row = r.row(i);
            Ok(LabeledSample { y: parse_label(row[0], classes)?, x: row[1..].to_vec() })
        })
        .collect()
}

pub fn dataset_to_container(ds: &SynthDataset) -> Result<Container> {
    let d = ds.dim();
    let train = ds.training_view();
    let eval = ds.evaluation_view();
    let mut unlabeled = Vec::with_capacity(train.unlabeled.len() * (d + 1));
    for u in train.unlabeled {
        unlabeled.push(-1.0);
        unlabeled.extend_from_slice(u);
    }
    let hidden: Vec<f64> = eval.hidden_unlabeled_labels.iter().map(|&y| y as f64).collect();
    let means: Vec<f64> = ds.class_means().iter().flatten().copied().collect();
    Ok(Container {
        classes: to_u32(ds.classes(), "classes")?,
        dim: to_u32(d, "dim")?,
        records: vec![
            labeled_record(train.labeled, d)?,
            Record::new(train.unlabeled.len(), d + 1, unlabeled)?,
            Record::new(hidden.len(), 1, hidden)?,
            labeled_record(eval.test, d)?,
            Record::new(ds.classes(), d, means)?,
        ],
    })
}

pub fn dataset_from_container(c: &Container) -> Result<SynthDataset> {
    let (classes, dim) = (c.classes as usize, c.dim as usize);
    let [labeled, unlabeled, hidden, test, means] = c.records.as_slice() else {
        return Err(Error::Format(format!("dataset needs 5 records, found {}", c.records.len())));
    };
    for (r, cols) in [(labeled, dim + 1), (unlabeled, dim + 1), (hidden, 1), (test, dim + 1), (means, dim)] {
        if r.cols != cols {
            return Err(Error::Format(format!("record has {} columns, expected {cols}", r.cols)));
        }
    }
    SynthDataset::from_parts(
        classes,
        dim,
        labeled_from_record(labeled, classes)?,
        (0..unlabeled.rows).map(|i| unlabeled.row(i)[1..].to_vec()).collect(),
        hidden.data.iter().map(|&v| parse_label(v, classes)).collect::<Result<_>>()?,
        labeled_from_record(test, classes)?,
        (0..means.rows).map(|i| means.row(i).to_vec()).collect(),
    )
}

/// One row per sample: `split,label,x0..x{d−1}`; unlabeled rows carry label −1.
pub fn dataset_csv(ds: &SynthDataset) -> String {
    let mut out = String::from("split,label");
    for i in 0..ds.dim() {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    let mut push = |split: &str, label: i64, x: &[f64]| {
        out.push_str(&format!("{split},{label}"));
        for v in x {
            out.push_str(&format!(",{v:e}"));
        }
        out.push('\n');
    };
    let train = ds.training_view();
    for s in train.labeled {
        push("labeled", s.y as i64, &s.x);
    }
    for u in train.unlabeled {
        push("unlabeled", -1, u);
    }
    for s in ds.evaluation_view().test {
        push("test", s.y as i64, &s.x);
    }
    out
}

pub fn model_to_container(model: &Mlp) -> Result<Container> {
    let mut records = Vec::new();
    for l in model.layers() {
        let ws = l.weight.shape();
        records.push(Record::new(ws[0], ws[1], l.weight.data().to_vec())?);
        records.push(Record::new(1, l.bias.numel(), l.bias.data().to_vec())?);
    }
    Ok(Container {
        classes: to_u32(model.classes(), "classes")?,
        dim: to_u32(model.input_dim(), "dim")?,
        records,
    })
}

pub fn model_from_container(c: &Container) -> Result<Mlp> {
    if c.records.is_empty() || !c.records.len().is_multiple_of(2) {
        return Err(Error::Format(format!(
            "checkpoint needs weight/bias record pairs, found {} records",
            c.records.len()
        )));
    }
    let layers = c
        .records
        .chunks(2)
        .map(|pair| {
            let (w, b) = (&pair[0], &pair[1]);
            Ok(Layer {
                weight: Tensor::new(vec![w.rows, w.cols], w.data.clone())?,
                bias: Tensor::new(vec![b.cols], b.data.clone())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = Mlp::from_layers(layers)?;
    if model.input_dim() != c.dim as usize || model.classes() != c.classes as usize {
        return Err(Error::Format("checkpoint header disagrees with layer shapes".into()));
    }
    Ok(model)
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

/// Writes `path` (binary) and `path.json` (manifest).
pub fn save_checkpoint(model: &Mlp, seed: Option<u64>, path: &Path) -> Result<()> {
    model_to_container(model)?.write(path)?;
    let manifest = serde_json::to_vec_pretty(&model.manifest(seed))?;
    write_atomic(&manifest_path(path), &manifest)
}

pub fn load_checkpoint(path: &Path) -> Result<(Mlp, ModelManifest)> {
    let model = model_from_container(&Container::read(path)?)?;
    let manifest: ModelManifest = serde_json::from_slice(&std::fs::read(manifest_path(path))?)?;
    if manifest.dims != model.dims() {
        return Err(Error::Format(format!(
            "manifest dims {:?} disagree with checkpoint {:?}",
            manifest.dims,
            model.dims()
        )));
    }
    Ok((model, manifest))
}
