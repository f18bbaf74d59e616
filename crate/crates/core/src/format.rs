//! On-disk formats.
//!
//! Logit dumps come in two flavours:
//!
//! * NDJSON, one `{"label": <int>, "logits": [<real>...]}` object per line.
//! * A little-endian binary container: a 24-byte header
//!   (`b"LGTN"`, `u32` version, `u32` slot count, `i32` background index with
//!   `-1` for none, `u64` record count) followed by records of one `i32` label
//!   and `f32` logits. Statistics are always accumulated in `f64`.
//!
//! Every writer goes through a temporary file in the target directory that is
//! renamed into place once complete.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::calibrate::{finalize, BetaMode, CalibrationParams};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::record::{ClassLayout, LogitRecord, Matrix};
use crate::stats::{Group, RunningStats};
use crate::synth::{Dataset, SynthSpec};

pub const MAGIC: [u8; 4] = *b"LGTN";
pub const DUMP_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
pub const STATS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DumpFormat {
    Binary,
    Ndjson,
}

impl DumpFormat {
    /// `.ndjson` / `.jsonl` select text; anything else is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("ndjson") | Some("jsonl") => DumpFormat::Ndjson,
            _ => DumpFormat::Binary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpHeader {
    pub version: u32,
    pub num_classes: u32,
    pub bg_index: i32,
    pub record_count: u64,
}

impl DumpHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..8].copy_from_slice(&self.version.to_le_bytes());
        b[8..12].copy_from_slice(&self.num_classes.to_le_bytes());
        b[12..16].copy_from_slice(&self.bg_index.to_le_bytes());
        b[16..24].copy_from_slice(&self.record_count.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8; HEADER_LEN]) -> Result<Self> {
        if b[0..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let header = Self {
            version: u32_at(4),
            num_classes: u32_at(8),
            bg_index: i32::from_le_bytes(b[12..16].try_into().unwrap()),
            record_count: u64::from_le_bytes(b[16..24].try_into().unwrap()),
        };
        if header.version != DUMP_VERSION {
            return Err(Error::Format(format!("unsupported version {}", header.version)));
        }
        Ok(header)
    }

    pub fn layout(&self) -> Result<ClassLayout> {
        let bg = match self.bg_index {
            -1 => None,
            i if i >= 0 => Some(i as usize),
            i => return Err(Error::Format(format!("invalid background index {i}"))),
        };
        ClassLayout::new(self.num_classes as usize, bg)
    }

    pub fn record_len(&self) -> usize {
        4 + 4 * self.num_classes as usize
    }
}

/// A logit dump held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dump {
    pub layout: ClassLayout,
    pub records: Vec<LogitRecord>,
}

impl Dump {
    pub fn new(layout: ClassLayout, records: Vec<LogitRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            r.validate(layout.num_slots(), i)?;
        }
        Ok(Self { layout, records })
    }

    pub fn from_matrix(layout: ClassLayout, logits: &Matrix, labels: &[usize]) -> Result<Self> {
        Self::new(layout, logits.to_records(labels)?)
    }

    pub fn logits(&self) -> Matrix {
        let rows: Vec<&[f64]> = self.records.iter().map(|r| r.logits.as_slice()).collect();
        Matrix::from_rows(&rows).expect("validated dump rows share one length")
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Writes through a temporary file that is renamed into place.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_err(&dir))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        body(&mut w).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))?;
    }
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, |w| {
        w.write_all(text.as_bytes())?;
        w.write_all(b"\n")
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |w| w.write_all(text.as_bytes()))
}

pub fn write_dump_binary(w: &mut dyn Write, dump: &Dump) -> std::io::Result<()> {
    let header = DumpHeader {
        version: DUMP_VERSION,
        num_classes: dump.layout.num_slots() as u32,
        bg_index: dump.layout.bg_index().map_or(-1, |b| b as i32),
        record_count: dump.records.len() as u64,
    };
    w.write_all(&header.to_bytes())?;
    for r in &dump.records {
        w.write_all(&(r.label as i32).to_le_bytes())?;
        for &v in &r.logits {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_dump_ndjson(w: &mut dyn Write, dump: &Dump) -> std::io::Result<()> {
    for r in &dump.records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_dump(path: &Path, dump: &Dump, format: DumpFormat) -> Result<()> {
    write_atomic(path, |w| match format {
        DumpFormat::Binary => write_dump_binary(w, dump),
        DumpFormat::Ndjson => write_dump_ndjson(w, dump),
    })
}

/// Streams records out of a binary container.
pub struct BinaryDumpReader<R: Read> {
    reader: R,
    header: DumpHeader,
    layout: ClassLayout,
    next: u64,
    buf: Vec<u8>,
}

impl<R: Read> BinaryDumpReader<R> {
    pub fn new(mut reader: R) -> Result<Self> {
        let mut h = [0u8; HEADER_LEN];
        reader
            .read_exact(&mut h)
            .map_err(|_| Error::Format("truncated header".into()))?;
        let header = DumpHeader::from_bytes(&h)?;
        let layout = header.layout()?;
        Ok(Self {
            reader,
            buf: vec![0u8; header.record_len()],
            header,
            layout,
            next: 0,
        })
    }

    pub fn header(&self) -> &DumpHeader {
        &self.header
    }

    pub fn layout(&self) -> ClassLayout {
        self.layout
    }
}

impl<R: Read> Iterator for BinaryDumpReader<R> {
    type Item = Result<LogitRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.header.record_count {
            return None;
        }
        let index = self.next as usize;
        self.next += 1;
        if self.reader.read_exact(&mut self.buf).is_err() {
            self.next = self.header.record_count;
            return Some(Err(Error::Format(format!(
                "payload ends inside record {index} of {}",
                self.header.record_count
            ))));
        }
        let label = i32::from_le_bytes(self.buf[0..4].try_into().unwrap());
        let logits = self.buf[4..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let record = match usize::try_from(label) {
            Ok(l) => LogitRecord::new(l, logits),
            Err(_) => return Some(Err(Error::Format(format!("negative label in record {index}")))),
        };
        Some(record.validate(self.layout.num_slots(), index).map(|_| record))
    }
}

/// Reads a dump, detecting the binary container by its magic bytes.
///
/// NDJSON files carry no header, so their background slot comes from
/// `text_bg_index`.
pub fn read_dump(path: &Path, text_bg_index: Option<usize>) -> Result<Dump> {
    let mut file = BufReader::new(File::open(path).map_err(io_err(path))?);
    let is_binary = file.fill_buf().map_err(io_err(path))?.starts_with(&MAGIC);
    if is_binary {
        let reader = BinaryDumpReader::new(file)?;
        let layout = reader.layout();
        let expected = reader.header().record_count;
        let records = reader.collect::<Result<Vec<_>>>()?;
        debug_assert_eq!(records.len() as u64, expected);
        return Ok(Dump { layout, records });
    }
    let mut records = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: LogitRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        records.push(r);
    }
    let n = match records.first() {
        Some(r) => r.logits.len(),
        None => return Err(Error::Empty("dump")),
    };
    Dump::new(ClassLayout::new(n, text_bg_index)?, records)
}

/// Statistics JSON, optionally extended with the finalized beta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub version: u32,
    pub num_classes: usize,
    pub bg_index: Option<usize>,
    pub momentum: f64,
    pub eps: f64,
    pub count: u64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_mode: Option<BetaMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_exponent: Option<f64>,
}

impl StatsFile {
    pub fn from_stats(stats: &RunningStats) -> Result<Self> {
        if !stats.initialized {
            return Err(Error::Uninitialized);
        }
        Ok(Self {
            version: STATS_VERSION,
            num_classes: stats.num_slots(),
            bg_index: stats.bg_index,
            momentum: stats.momentum,
            eps: stats.eps,
            count: stats.count,
            mean: stats.mean.clone(),
            var: stats.var.clone(),
            beta: None,
            beta_mode: None,
            sigma_exponent: None,
        })
    }

    pub fn finalized(stats: &RunningStats, mode: BetaMode, params: &CalibrationParams) -> Result<Self> {
        let mut f = Self::from_stats(stats)?;
        f.eps = params.eps;
        f.beta = Some(params.beta);
        f.beta_mode = Some(mode);
        f.sigma_exponent = Some(params.sigma_exponent);
        Ok(f)
    }

    pub fn to_stats(&self) -> Result<RunningStats> {
        if self.version != STATS_VERSION {
            return Err(Error::Format(format!("unsupported stats version {}", self.version)));
        }
        if self.mean.len() != self.num_classes || self.var.len() != self.num_classes {
            return Err(Error::DimensionMismatch {
                expected: self.num_classes,
                found: self.mean.len().min(self.var.len()),
                record: None,
            });
        }
        if self.var.iter().any(|v| *v < 0.0) {
            return Err(Error::Format("negative variance".into()));
        }
        let mut stats = RunningStats::new(
            self.num_classes,
            crate::stats::StatsConfig {
                momentum: self.momentum,
                eps: self.eps,
                bg_index: self.bg_index,
            },
        )?;
        stats.mean.clone_from(&self.mean);
        stats.var.clone_from(&self.var);
        stats.count = self.count;
        stats.initialized = self.count > 0;
        Ok(stats)
    }

    /// Rebuilds the calibration parameters of a finalized file.
    pub fn to_params(&self) -> Result<CalibrationParams> {
        let beta = self
            .beta
            .ok_or_else(|| Error::Format("statistics file has not been finalized".into()))?;
        finalize(
            &self.to_stats()?,
            BetaMode::Constant(beta),
            self.sigma_exponent.unwrap_or(1.0),
        )
    }
}

/// Dataset files: NDJSON `{"label", "features"}` lines plus a spec sidecar.
#[derive(Serialize, Deserialize)]
struct FeatureLine {
    label: usize,
    features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec: SynthSpec,
    pub layout: ClassLayout,
    pub feature_dim: usize,
    pub len: usize,
}

pub fn dataset_sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".spec.json");
    path.with_file_name(name)
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_atomic(path, |w| {
        for (row, &label) in data.features.iter_rows().zip(&data.labels) {
            let line = FeatureLine {
                label,
                features: row.to_vec(),
            };
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    write_json(
        &dataset_sidecar(path),
        &DatasetMeta {
            spec: data.spec.clone(),
            layout: data.layout,
            feature_dim: data.features.cols(),
            len: data.len(),
        },
    )
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = read_json(&dataset_sidecar(path))?;
    let file = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut data = Vec::with_capacity(meta.len * meta.feature_dim);
    let mut labels = Vec::with_capacity(meta.len);
    for (i, line) in file.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: FeatureLine =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        if l.features.len() != meta.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: meta.feature_dim,
                found: l.features.len(),
                record: Some(i),
            });
        }
        if l.label >= meta.layout.num_slots() {
            return Err(Error::LabelOutOfRange {
                record: i,
                label: l.label,
                num_classes: meta.layout.num_slots(),
            });
        }
        data.extend_from_slice(&l.features);
        labels.push(l.label);
    }
    if labels.len() != meta.len {
        return Err(Error::Format(format!(
            "expected {} samples, found {}",
            meta.len,
            labels.len()
        )));
    }
    Ok(Dataset {
        features: Matrix::from_vec(labels.len(), meta.feature_dim, data)?,
        labels,
        layout: meta.layout,
        spec: meta.spec,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    /// Aligned two-column text table.
    pub fn render_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("overall_top1".into(), format!("{:.4}", self.overall_top1)),
            ("balanced_accuracy".into(), format!("{:.4}", self.balanced_accuracy)),
        ];
        for g in Group::ALL {
            if let Some(v) = self.per_group.get(&g) {
                rows.push((format!("group.{}", g.as_str()), format!("{v:.4}")));
            }
        }
        rows.push(("mean_ap".into(), fmt_opt(self.mean_ap)));
        rows.push(("correlation_mean".into(), fmt_opt(self.correlation_mean)));
        rows.push(("correlation_var".into(), fmt_opt(self.correlation_var)));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<width$}  {v:>8}\n"))
            .collect()
    }

    /// Per-class CSV: `class,recall,ap`.
    pub fn to_csv(&self) -> String {
        let n = self.per_class_recall.len().max(self.per_class_ap.len());
        let cell = |v: Option<&Option<f64>>| match v {
            Some(Some(x)) => x.to_string(),
            _ => String::new(),
        };
        let mut s = String::from("class,recall,ap\n");
        for c in 0..n {
            s.push_str(&format!(
                "{c},{},{}\n",
                cell(self.per_class_recall.get(c)),
                cell(self.per_class_ap.get(c))
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_dump() -> Dump {
        let layout = ClassLayout::detection(2, 0).unwrap();
        Dump::new(
            layout,
            vec![
                LogitRecord::new(0, vec![1.5, -2.25, 0.125]),
                LogitRecord::new(2, vec![-0.5, 3.0, 7.75]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn header_layout_is_exact() {
        let mut bytes = Vec::new();
        write_dump_binary(&mut bytes, &sample_dump()).unwrap();
        assert_eq!(&bytes[0..4], b"LGTN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(i32::from_le_bytes(bytes[12..16].try_into().unwrap()), 0);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), HEADER_LEN + 2 * (4 + 4 * 3));
        assert_eq!(i32::from_le_bytes(bytes[24..28].try_into().unwrap()), 0);
        assert_eq!(f32::from_le_bytes(bytes[28..32].try_into().unwrap()), 1.5);
    }

    #[test]
    fn binary_reader_rejects_corruption() {
        let mut bytes = Vec::new();
        write_dump_binary(&mut bytes, &sample_dump()).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(BinaryDumpReader::new(&bad_magic[..]).is_err());

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(BinaryDumpReader::new(&bad_version[..]).is_err());

        let truncated = &bytes[..bytes.len() - 3];
        let out: Result<Vec<_>> = BinaryDumpReader::new(truncated).unwrap().collect();
        assert!(matches!(out, Err(Error::Format(_))));

        let mut bad_label = bytes.clone();
        bad_label[24..28].copy_from_slice(&7i32.to_le_bytes());
        let out: Result<Vec<_>> = BinaryDumpReader::new(&bad_label[..]).unwrap().collect();
        assert!(matches!(out, Err(Error::LabelOutOfRange { record: 0, .. })));
    }

    #[test]
    fn stats_file_shape() {
        let mut s = RunningStats::new(3, crate::stats::StatsConfig::default()).unwrap();
        s.mean = vec![4.0, -1.0, 2.0];
        s.var = vec![1.0, 2.0, 3.0];
        s.count = 10;
        s.initialized = true;
        let f = StatsFile::from_stats(&s).unwrap();
        let v: serde_json::Value = serde_json::to_value(&f).unwrap();
        for key in ["version", "num_classes", "bg_index", "momentum", "eps", "count", "mean", "var"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert!(v.get("beta").is_none());
        let p = finalize(&s, BetaMode::FgMin, 2.0).unwrap();
        let fin = StatsFile::finalized(&s, BetaMode::FgMin, &p).unwrap();
        let v: serde_json::Value = serde_json::to_value(&fin).unwrap();
        assert_eq!(v["beta"], -1.0);
        assert_eq!(v["beta_mode"], "fg-min");
        assert_eq!(v["sigma_exponent"], 2.0);
        assert_eq!(fin.to_params().unwrap(), p);
        assert!(f.to_params().is_err());
    }
}
