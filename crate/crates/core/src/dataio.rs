//! Matrix files, subject datasets and run configuration.
//!
//! Binary layout of a `.canmat` file (all integers and floats little-endian):
//!
//! | offset | size | content                         |
//! |--------|------|---------------------------------|
//! | 0      | 8    | magic `CANMAT01`                |
//! | 8      | 8    | `u64` number of rows            |
//! | 16     | 8    | `u64` number of columns         |
//! | 24     | 8·n  | `f64` values, row-major         |
//!
//! Files not starting with the magic are parsed as headerless CSV.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ica::{IcaMode, Nonlinearity};

pub const MAGIC: &[u8; 8] = b"CANMAT01";
const HEADER_LEN: u64 = 24;

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        decode_matrix(&bytes)
    } else {
        parse_csv(&bytes)
    }
}

/// Decode an in-memory `.canmat` image.
pub fn decode_matrix(bytes: &[u8]) -> Result<DMatrix<f64>> {
    if !bytes.starts_with(MAGIC) {
        return Err(Error::Format {
            offset: 0,
            message: "missing CANMAT01 magic".into(),
        });
    }
    if (bytes.len() as u64) < HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: "truncated header".into(),
        });
    }
    let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let (n_rows, n_cols) = (word(8), word(16));
    let count = n_rows
        .checked_mul(n_cols)
        .filter(|c| {
            c.checked_mul(8).and_then(|b| b.checked_add(HEADER_LEN)).is_some()
                && usize::try_from(*c).is_ok()
        })
        .ok_or_else(|| Error::Dimension(format!("{n_rows}×{n_cols} overflows addressable size")))?;
    let expected = HEADER_LEN + count * 8;
    let actual = bytes.len() as u64;
    if actual != expected {
        return Err(Error::Format {
            offset: actual.min(expected),
            message: format!(
                "header declares {n_rows}×{n_cols} ({count} values) but payload holds {} bytes",
                actual - HEADER_LEN
            ),
        });
    }
    let values: Vec<f64> = bytes[HEADER_LEN as usize..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DMatrix::from_row_slice(n_rows as usize, n_cols as usize, &values))
}

pub fn encode_matrix(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN as usize + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for row in m.row_iter() {
        for v in row.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_matrix(m))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn parse_csv(bytes: &[u8]) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut values = Vec::new();
    let mut n_cols = None;
    let mut n_rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Format {
            offset: e.position().map(|p| p.byte()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let offset = record.position().map(|p| p.byte()).unwrap_or(0);
        match n_cols {
            None => n_cols = Some(record.len()),
            Some(n) if n != record.len() => {
                return Err(Error::Format {
                    offset,
                    message: format!("row {n_rows} has {} fields, expected {n}", record.len()),
                })
            }
            _ => {}
        }
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| Error::Format {
                offset,
                message: format!("cannot parse {field:?} as a number"),
            })?;
            values.push(v);
        }
        n_rows += 1;
    }
    Ok(DMatrix::from_row_slice(n_rows, n_cols.unwrap_or(0), &values))
}

/// Read a single-row 0/1 mask and return the selected voxel indices.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let m = load_matrix(path)?;
    if m.nrows() != 1 {
        return Err(Error::Dimension(format!("mask must be a single row, got {}", m.nrows())));
    }
    let mut selected = Vec::new();
    for (i, v) in m.iter().enumerate() {
        if *v == 1.0 {
            selected.push(i);
        } else if *v != 0.0 {
            return Err(Error::Format {
                offset: HEADER_LEN + 8 * i as u64,
                message: format!("mask entry {i} is {v}, expected 0 or 1"),
            });
        }
    }
    Ok(selected)
}

pub fn save_mask(path: impl AsRef<Path>, n_voxels: usize, selected: &[usize]) -> Result<()> {
    let mut m = DMatrix::zeros(1, n_voxels);
    for &i in selected {
        if i >= n_voxels {
            return Err(Error::Dimension(format!("mask index {i} ≥ {n_voxels}")));
        }
        m[(0, i)] = 1.0;
    }
    save_matrix(path, &m)
}

/// One subject's time × voxel matrix.
#[derive(Debug, Clone)]
pub struct SubjectDataset {
    pub subject_id: String,
    pub data: DMatrix<f64>,
    pub grid_shape: Option<[usize; 3]>,
    pub mask_indices: Option<Vec<usize>>,
    pub standardized: bool,
    /// Columns that were constant before standardization and are now zero.
    pub constant_columns: Vec<usize>,
}

impl SubjectDataset {
    /// Standardize `data` and tag it with `subject_id`.
    pub fn new(subject_id: impl Into<String>, data: &DMatrix<f64>) -> Result<Self> {
        let mut ds = standardize(data)?;
        ds.subject_id = subject_id.into();
        Ok(ds)
    }

    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_voxels(&self) -> usize {
        self.data.ncols()
    }
}

/// Center every column and scale it to unit biased (1/n) variance.
///
/// Constant columns become zero and are listed in `constant_columns`.
pub fn standardize(data: &DMatrix<f64>) -> Result<SubjectDataset> {
    let n = data.nrows();
    if n < 2 {
        return Err(Error::InsufficientFrames(n));
    }
    if let Some(k) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Parameter(format!(
            "non-finite value at frame {}, voxel {}",
            k % n,
            k / n
        )));
    }
    let mut out = data.clone();
    let mut constant = Vec::new();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let mean = col.iter().sum::<f64>() / n as f64;
        let scale = col.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        if var.sqrt() <= 1e-13 * scale || var == 0.0 {
            col.fill(0.0);
            constant.push(j);
        } else {
            let inv = 1.0 / var.sqrt();
            col.apply(|v| *v = (*v - mean) * inv);
        }
    }
    Ok(SubjectDataset {
        subject_id: String::new(),
        data: out,
        grid_shape: None,
        mask_indices: None,
        standardized: true,
        constant_columns: constant,
    })
}

/// Run parameters. Absent keys take their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Fixed subject-level order; estimated from one subject when absent.
    pub n_sbj: Option<usize>,
    pub p_value: f64,
    pub n_bootstrap: usize,
    pub ica_nonlinearity: Nonlinearity,
    pub ica_mode: IcaMode,
    pub ica_max_iter: usize,
    pub ica_tol: f64,
    pub map_threshold: f64,
    pub rng_seed: u64,
    pub use_cca: bool,
    /// Explicit group order; overrides the bootstrap selection when set.
    pub n_grp: Option<usize>,
    /// Subject used for order estimation.
    pub order_subject: usize,
    /// Largest candidate order; defaults to `min(n_frames, n_voxels) - 1` capped at 30.
    pub max_order: Option<usize>,
    pub order_replicates: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_sbj: None,
            p_value: 0.05,
            n_bootstrap: 1000,
            ica_nonlinearity: Nonlinearity::Logcosh,
            ica_mode: IcaMode::Symmetric,
            ica_max_iter: 200,
            ica_tol: 1e-6,
            map_threshold: 3.0,
            rng_seed: 0,
            use_cca: true,
            n_grp: None,
            order_subject: 0,
            max_order: None,
            order_replicates: 100,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.p_value > 0.0 && self.p_value < 1.0) {
            return bad(format!("p_value must lie in (0, 1), got {}", self.p_value));
        }
        if self.n_bootstrap == 0 {
            return bad("n_bootstrap must be positive".into());
        }
        if self.ica_max_iter == 0 {
            return bad("ica_max_iter must be positive".into());
        }
        if !(self.ica_tol > 0.0) {
            return bad(format!("ica_tol must be positive, got {}", self.ica_tol));
        }
        if !(self.map_threshold >= 0.0) {
            return bad(format!("map_threshold must be ≥ 0, got {}", self.map_threshold));
        }
        if self.n_sbj == Some(0) {
            return bad("n_sbj must be positive".into());
        }
        if self.max_order == Some(0) {
            return bad("max_order must be positive".into());
        }
        if self.order_replicates == 0 {
            return bad("order_replicates must be positive".into());
        }
        Ok(())
    }
}

/// Directory manifest tying a set of matrix files to scalar metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    /// Field name → file name relative to the manifest directory.
    pub files: BTreeMap<String, String>,
    pub scalars: serde_json::Value,
}

impl Manifest {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            files: BTreeMap::new(),
            scalars: serde_json::Value::Object(Default::default()),
        }
    }

    /// Write `m` next to the manifest and record it under `field`.
    pub fn put_matrix(&mut self, dir: &Path, field: &str, m: &DMatrix<f64>) -> Result<()> {
        let name = format!("{field}.canmat");
        save_matrix(dir.join(&name), m)?;
        self.files.insert(field.to_string(), name);
        Ok(())
    }

    pub fn get_matrix(&self, dir: &Path, field: &str) -> Result<DMatrix<f64>> {
        let name = self
            .files
            .get(field)
            .ok_or_else(|| Error::Config(format!("manifest {} lacks field {field}", self.kind)))?;
        load_matrix(dir.join(name))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Round to 12 significant digits.
pub fn round_sig12(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.11e}").parse().unwrap_or(x)
}

fn canonicalize(v: &mut serde_json::Value) {
    use serde_json::Value;
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(round_sig12).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(canonicalize),
        Value::Object(map) => map.values_mut().for_each(canonicalize),
        _ => {}
    }
}

/// Pretty JSON with sorted keys and floats rounded to 12 significant digits.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value).map_err(|e| Error::Config(e.to_string()))?;
    canonicalize(&mut v);
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Config(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_canonical_json(value)?).map_err(|e| Error::io(path, e))
}

/// Subject files in `dir` matching `sub-*.canmat`, sorted by name.
pub fn subject_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("sub-") && name.ends_with(".canmat") {
            files.push(entry.path());
        }
    }
    files.sort();
    Ok(files)
}

/// Load and standardize every `sub-*.canmat` in `dir`.
pub fn load_subjects(dir: &Path) -> Result<Vec<SubjectDataset>> {
    let mut out = Vec::new();
    for path in subject_files(dir)? {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let data = load_matrix(&path)?;
        out.push(SubjectDataset::new(id, &data)?);
    }
    if let Some(first) = out.first() {
        let n = first.n_voxels();
        if let Some(bad) = out.iter().find(|d| d.n_voxels() != n) {
            return Err(Error::Dimension(format!(
                "subject {} has {} voxels, expected {n}",
                bad.subject_id,
                bad.n_voxels()
            )));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.canmat");
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        save_matrix(&path, &m).unwrap();
        let back = load_matrix(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back[(0, 1)], 2.0);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes.len(), 24 + 32);
        assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), 2.0);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut m = DMatrix::from_fn(4, 3, |i, j| (i + 2 * j) as f64);
        m[(1, 2)] = f64::INFINITY;
        assert!(matches!(standardize(&m), Err(Error::Parameter(_))));
    }

    #[test]
    fn short_payload_is_format_error() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&3u64.to_le_bytes());
        bytes.extend_from_slice(&3u64.to_le_bytes());
        for i in 0..8 {
            bytes.extend_from_slice(&(i as f64).to_le_bytes());
        }
        match decode_matrix(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 24 + 64),
            other => panic!("expected FormatError, got {other:?}"),
        }
    }

    #[test]
    fn truncated_header_and_overflow() {
        assert!(matches!(decode_matrix(b"CANMAT01\x01"), Err(Error::Format { offset: 9, .. })));
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        assert!(matches!(decode_matrix(&bytes), Err(Error::Dimension(_))));
    }

    #[test]
    fn csv_is_accepted() {
        let m = parse_csv(b"1,2,3\n4.5, -6 ,7e-1\n").unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.5, -6.0, 0.7]));
        assert!(matches!(parse_csv(b"1,2\n3\n"), Err(Error::Format { .. })));
        assert!(matches!(parse_csv(b"1,x\n"), Err(Error::Format { .. })));
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.canmat");
        save_mask(&path, 6, &[1, 4]).unwrap();
        assert_eq!(load_mask(&path).unwrap(), vec![1, 4]);
        save_matrix(&path, &DMatrix::from_row_slice(1, 2, &[0.0, 0.5])).unwrap();
        assert!(load_mask(&path).is_err());
    }

    #[test]
    fn two_point_column() {
        let ds = standardize(&DMatrix::from_column_slice(2, 1, &[1.0, 3.0])).unwrap();
        assert_eq!(ds.data.as_slice(), &[-1.0, 1.0]);
    }

    #[test]
    fn constant_column_zeroed() {
        let data = DMatrix::from_row_slice(3, 2, &[5.0, 1.0, 5.0, 2.0, 5.0, 4.0]);
        let ds = standardize(&data).unwrap();
        assert_eq!(ds.constant_columns, vec![0]);
        assert!(ds.data.column(0).iter().all(|v| *v == 0.0));
        assert_eq!(data[(0, 0)], 5.0);
    }

    #[test]
    fn single_frame_rejected() {
        assert!(matches!(
            standardize(&DMatrix::zeros(1, 4)),
            Err(Error::InsufficientFrames(1))
        ));
    }

    #[test]
    fn config_defaults_and_unknown_key() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let cfg = RunConfig::from_json(r#"{"p_value": 0.01, "ica_mode": "deflation"}"#).unwrap();
        assert_eq!(cfg.p_value, 0.01);
        assert_eq!(cfg.ica_mode, IcaMode::Deflation);
        let err = RunConfig::from_json(r#"{"pvalue": 0.01}"#).unwrap_err();
        assert!(err.to_string().contains("pvalue"), "{err}");
        assert!(RunConfig::from_json(r#"{"p_value": 1.5}"#).is_err());
    }

    #[test]
    fn canonical_json_rounds_floats() {
        let v = serde_json::json!({"b": 0.1 + 0.2, "a": 3});
        let s = to_canonical_json(&v).unwrap();
        assert!(s.contains("0.3") && !s.contains("0.30000000000000004"));
        assert!(s.find("\"a\"").unwrap() < s.find("\"b\"").unwrap());
    }
}
