//! Dataset manifests, raw-measurement files, and cached feature files.
//!
//! All on-disk formats are little-endian:
//!
//! * manifest — CSV with header `id,path,label`; paths resolve against the
//!   manifest's directory.
//! * raw measurement — `"PDMS"` magic, `u32` sample count, then the three
//!   phase arrays back to back as `f32`. A three-column headerless CSV (one
//!   row per sample) is accepted as an equivalent input encoding.
//! * features — `"PDCF"` magic, `u16` version, `u32` `N_p`/`w_t`/`f_bins`,
//!   then the `td_pos`, `td_neg`, `fd_pos`, `fd_neg` matrices as `f32`
//!   row-major payloads, and a trailing label byte.
//!
//! Payloads are stored as `f32`; computation upstream and downstream is `f64`.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::matrix::Matrix;

pub const RAW_MAGIC: &[u8; 4] = b"PDMS";
pub const FEATURE_MAGIC: &[u8; 4] = b"PDCF";
pub const FEATURE_VERSION: u16 = 1;
/// Bytes before the first matrix payload: magic + version + three u32 dims.
pub const FEATURE_HEADER_LEN: usize = 4 + 2 + 3 * 4;

pub const DEFAULT_N_SAMPLES: usize = 800_000;
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 4.0e7;
pub const DEFAULT_GRID_FREQ_HZ: f64 = 50.0;

#[derive(Debug, Error)]
pub enum SignalIoError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("{path}: row {line}: {detail}")]
    MalformedRow {
        path: PathBuf,
        line: u64,
        detail: String,
    },
    #[error("duplicate measurement id {0:?}")]
    DuplicateId(String),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("non-finite sample at flat index {0}")]
    NonFiniteSample(usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One of the three conductors of a measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PhaseId {
    A,
    B,
    C,
}

impl PhaseId {
    pub const ALL: [PhaseId; 3] = [PhaseId::A, PhaseId::B, PhaseId::C];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One grid-frequency period of all three phase waveforms plus its label.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMeasurement {
    pub id: String,
    pub samples: [Vec<f64>; 3],
    pub sample_rate_hz: f64,
    pub grid_freq_hz: f64,
    /// 1 = damaged (partial discharge present), 0 = healthy.
    pub label: u8,
}

impl RawMeasurement {
    pub fn n_samples(&self) -> usize {
        self.samples[0].len()
    }

    pub fn phase(&self, p: PhaseId) -> &[f64] {
        &self.samples[p.index()]
    }

    pub fn validate(&self) -> Result<(), SignalIoError> {
        let n = self.samples[0].len();
        if self.samples.iter().any(|s| s.len() != n) {
            return Err(SignalIoError::DimMismatch(format!(
                "phase arrays of {} differ in length",
                self.id
            )));
        }
        if self.label > 1 {
            return Err(SignalIoError::DimMismatch(format!(
                "label {} of {} is not in {{0,1}}",
                self.label, self.id
            )));
        }
        for (i, v) in self.samples.iter().flat_map(|s| s.iter()).enumerate() {
            if !v.is_finite() {
                return Err(SignalIoError::NonFiniteSample(i));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: u8,
}

/// Dataset index: one row per measurement plus per-class counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// `class_counts[label]` for labels 0 and 1.
    pub class_counts: [usize; 2],
}

impl Manifest {
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Self {
        let mut class_counts = [0usize; 2];
        for e in &entries {
            class_counts[e.label as usize] += 1;
        }
        Self { entries, class_counts }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn csv_position_line(e: &csv::Error) -> u64 {
    e.position().map(|p| p.line()).unwrap_or(0)
}

/// Loads a `id,path,label` manifest. Relative paths are resolved against the
/// manifest's directory and must exist.
pub fn load_manifest(path: &Path) -> Result<Manifest, SignalIoError> {
    if !path.exists() {
        return Err(SignalIoError::MissingFile(path.to_path_buf()));
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| SignalIoError::MalformedRow {
            path: path.to_path_buf(),
            line: csv_position_line(&e),
            detail: e.to_string(),
        })?;

    {
        let headers = reader.headers().map_err(|e| SignalIoError::MalformedRow {
            path: path.to_path_buf(),
            line: 1,
            detail: e.to_string(),
        })?;
        let expected = ["id", "path", "label"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(SignalIoError::MalformedRow {
                path: path.to_path_buf(),
                line: 1,
                detail: format!("header must be `id,path,label`, found {headers:?}"),
            });
        }
    }

    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| SignalIoError::MalformedRow {
            path: path.to_path_buf(),
            line: csv_position_line(&e),
            detail: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let malformed = |detail: String| SignalIoError::MalformedRow {
            path: path.to_path_buf(),
            line,
            detail,
        };
        if record.len() != 3 {
            return Err(malformed(format!("expected 3 fields, found {}", record.len())));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(malformed("empty id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(SignalIoError::DuplicateId(id));
        }
        let label: u8 = match record[2].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(malformed(format!("label {other:?} is not 0 or 1"))),
        };
        let raw_path = PathBuf::from(&record[1]);
        let resolved = if raw_path.is_absolute() {
            raw_path
        } else {
            dir.join(raw_path)
        };
        if !resolved.exists() {
            return Err(SignalIoError::MissingFile(resolved));
        }
        entries.push(ManifestEntry { id, path: resolved, label });
    }
    Ok(Manifest::from_entries(entries))
}

/// Writes a manifest; `paths` in the entries are written as given (callers
/// normally pass file names relative to the manifest directory).
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), SignalIoError> {
    let mut writer = csv::Writer::from_path(path).map_err(io_from_csv)?;
    writer.write_record(["id", "path", "label"]).map_err(io_from_csv)?;
    for e in entries {
        writer
            .write_record([e.id.as_str(), &e.path.to_string_lossy(), &e.label.to_string()])
            .map_err(io_from_csv)?;
    }
    writer.flush()?;
    Ok(())
}

fn io_from_csv(e: csv::Error) -> SignalIoError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SignalIoError::Io(io),
        other => SignalIoError::DimMismatch(format!("csv write: {other:?}")),
    }
}

/// Reads a raw measurement, dispatching on the `"PDMS"` magic; anything else
/// is parsed as a three-column CSV. Both encodings yield identical arrays for
/// identical content.
pub fn read_measurement(path: &Path, entry: &ManifestEntry) -> Result<RawMeasurement, SignalIoError> {
    if !path.exists() {
        return Err(SignalIoError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let samples = if bytes.len() >= 4 && &bytes[..4] == RAW_MAGIC {
        parse_raw_binary(&bytes)?
    } else {
        parse_raw_csv(path, &bytes)?
    };
    let m = RawMeasurement {
        id: entry.id.clone(),
        samples,
        sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
        grid_freq_hz: DEFAULT_GRID_FREQ_HZ,
        label: entry.label,
    };
    m.validate()?;
    Ok(m)
}

fn parse_raw_binary(bytes: &[u8]) -> Result<[Vec<f64>; 3], SignalIoError> {
    if bytes.len() < 8 {
        return Err(SignalIoError::TruncatedPayload { expected: 8, actual: bytes.len() });
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + 3 * n * 4;
    if bytes.len() < expected {
        return Err(SignalIoError::TruncatedPayload { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(SignalIoError::DimMismatch(format!(
            "file has {} bytes but header claims {}",
            bytes.len(),
            expected
        )));
    }
    let mut samples = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    let mut offset = 8;
    for (p, out) in samples.iter_mut().enumerate() {
        for i in 0..n {
            let v = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()) as f64;
            if !v.is_finite() {
                return Err(SignalIoError::NonFiniteSample(p * n + i));
            }
            out.push(v);
            offset += 4;
        }
    }
    Ok(samples)
}

fn parse_raw_csv(path: &Path, bytes: &[u8]) -> Result<[Vec<f64>; 3], SignalIoError> {
    let mut samples: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(bytes);
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| SignalIoError::MalformedRow {
            path: path.to_path_buf(),
            line: csv_position_line(&e),
            detail: e.to_string(),
        })?;
        if record.len() != 3 {
            return Err(SignalIoError::MalformedRow {
                path: path.to_path_buf(),
                line: row as u64 + 1,
                detail: format!("expected 3 columns, found {}", record.len()),
            });
        }
        for (p, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| SignalIoError::MalformedRow {
                path: path.to_path_buf(),
                line: row as u64 + 1,
                detail: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(SignalIoError::NonFiniteSample(row * 3 + p));
            }
            samples[p].push(v);
        }
    }
    Ok(samples)
}

/// Writes the canonical `"PDMS"` binary encoding.
pub fn write_measurement(path: &Path, m: &RawMeasurement) -> Result<(), SignalIoError> {
    m.validate()?;
    let n = m.n_samples();
    let mut bytes = Vec::with_capacity(8 + 3 * n * 4);
    bytes.extend_from_slice(RAW_MAGIC);
    bytes.extend_from_slice(&(n as u32).to_le_bytes());
    for phase in &m.samples {
        for &v in phase {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Per-measurement model inputs: time-domain pulse matrices in `[-1, 1]` and
/// log-spectrograms in `[0, 1]`, one pair per half-cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFeatures {
    pub id: String,
    pub label: u8,
    /// `N_p x w_t` pulse matrices.
    pub td_pos: Matrix,
    pub td_neg: Matrix,
    /// `N_p x f_bins` log-spectrograms.
    pub fd_pos: Matrix,
    pub fd_neg: Matrix,
}

impl MeasurementFeatures {
    pub fn n_p(&self) -> usize {
        self.td_pos.rows()
    }

    pub fn w_t(&self) -> usize {
        self.td_pos.cols()
    }

    pub fn f_bins(&self) -> usize {
        self.fd_pos.cols()
    }

    pub fn validate(&self) -> Result<(), SignalIoError> {
        let n_p = self.n_p();
        let consistent = self.td_neg.rows() == n_p
            && self.fd_pos.rows() == n_p
            && self.fd_neg.rows() == n_p
            && self.td_neg.cols() == self.td_pos.cols()
            && self.fd_neg.cols() == self.fd_pos.cols();
        if !consistent {
            return Err(SignalIoError::DimMismatch(format!(
                "feature matrices of {} disagree on shape",
                self.id
            )));
        }
        if self.label > 1 {
            return Err(SignalIoError::DimMismatch(format!(
                "label {} of {} is not in {{0,1}}",
                self.label, self.id
            )));
        }
        let all_finite = [&self.td_pos, &self.td_neg, &self.fd_pos, &self.fd_neg]
            .iter()
            .all(|m| m.is_finite());
        if !all_finite {
            return Err(SignalIoError::NonFiniteSample(0));
        }
        Ok(())
    }
}

/// Writes the `"PDCF"` feature file. `f32` payloads round-trip bit-exactly.
pub fn write_features(path: &Path, f: &MeasurementFeatures) -> Result<(), SignalIoError> {
    f.validate()?;
    let n_p = f.n_p();
    let w_t = f.w_t();
    let f_bins = f.f_bins();
    let payload = 2 * (n_p * w_t + n_p * f_bins) * 4;
    let mut bytes = Vec::with_capacity(FEATURE_HEADER_LEN + payload + 1);
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(n_p as u32).to_le_bytes());
    bytes.extend_from_slice(&(w_t as u32).to_le_bytes());
    bytes.extend_from_slice(&(f_bins as u32).to_le_bytes());
    for m in [&f.td_pos, &f.td_neg, &f.fd_pos, &f.fd_neg] {
        for &v in m.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes.push(f.label);
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a `"PDCF"` feature file. The measurement id is the file stem.
pub fn read_features(path: &Path) -> Result<MeasurementFeatures, SignalIoError> {
    if !path.exists() {
        return Err(SignalIoError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(SignalIoError::TruncatedPayload {
            expected: FEATURE_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(SignalIoError::BadMagic { expected: "PDCF" });
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(SignalIoError::UnsupportedVersion(version));
    }
    let n_p = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let w_t = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let f_bins = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    let expected = FEATURE_HEADER_LEN + 2 * (n_p * w_t + n_p * f_bins) * 4 + 1;
    if bytes.len() < expected {
        return Err(SignalIoError::TruncatedPayload { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(SignalIoError::DimMismatch(format!(
            "file has {} bytes but header claims {}",
            bytes.len(),
            expected
        )));
    }

    let mut offset = FEATURE_HEADER_LEN;
    let mut read_matrix = |rows: usize, cols: usize| -> Result<Matrix, SignalIoError> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows * cols {
            let v = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()) as f64;
            if !v.is_finite() {
                return Err(SignalIoError::NonFiniteSample(i));
            }
            data.push(v);
            offset += 4;
        }
        Ok(Matrix::from_vec(rows, cols, data))
    };

    let td_pos = read_matrix(n_p, w_t)?;
    let td_neg = read_matrix(n_p, w_t)?;
    let fd_pos = read_matrix(n_p, f_bins)?;
    let fd_neg = read_matrix(n_p, f_bins)?;
    let label = bytes[expected - 1];

    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let f = MeasurementFeatures { id, label, td_pos, td_neg, fd_pos, fd_neg };
    f.validate()?;
    Ok(f)
}

/// Loads every `*.pdcf` file in a directory, sorted by file name.
pub fn read_features_dir(dir: &Path) -> Result<Vec<MeasurementFeatures>, SignalIoError> {
    if !dir.is_dir() {
        return Err(SignalIoError::MissingFile(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "pdcf"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_features(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn write_file(dir: &Path, name: &str, contents: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    fn dummy_measurement(n: usize) -> RawMeasurement {
        RawMeasurement {
            id: "m0".into(),
            samples: [
                (0..n).map(|i| i as f64).collect(),
                (0..n).map(|i| -(i as f64)).collect(),
                vec![0.5; n],
            ],
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            grid_freq_hz: DEFAULT_GRID_FREQ_HZ,
            label: 1,
        }
    }

    #[test]
    fn manifest_parses_and_counts_classes() {
        let dir = tmpdir();
        for name in ["a.pdms", "b.pdms", "c.pdms"] {
            write_file(dir.path(), name, "");
        }
        let path = write_file(
            dir.path(),
            "manifest.csv",
            "id,path,label\na,a.pdms,1\nb,b.pdms,0\nc,c.pdms,0\n",
        );
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.class_counts, [2, 1]);
        assert!(m.entries[0].path.ends_with("a.pdms"));
    }

    #[test]
    fn manifest_header_only_is_empty() {
        let dir = tmpdir();
        let path = write_file(dir.path(), "manifest.csv", "id,path,label\n");
        let m = load_manifest(&path).unwrap();
        assert!(m.is_empty());
        assert_eq!(m.class_counts, [0, 0]);
    }

    #[test]
    fn manifest_rejects_bad_label_and_duplicates() {
        let dir = tmpdir();
        write_file(dir.path(), "a.pdms", "");
        let path = write_file(dir.path(), "bad.csv", "id,path,label\na,a.pdms,2\n");
        assert!(matches!(
            load_manifest(&path),
            Err(SignalIoError::MalformedRow { line: 2, .. })
        ));

        let path = write_file(
            dir.path(),
            "dup.csv",
            "id,path,label\na,a.pdms,0\na,a.pdms,1\n",
        );
        assert!(matches!(load_manifest(&path), Err(SignalIoError::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn manifest_missing_file_is_reported() {
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/manifest.csv")),
            Err(SignalIoError::MissingFile(_))
        ));
    }

    #[test]
    fn measurement_binary_round_trip() {
        let dir = tmpdir();
        let path = dir.path().join("m0.pdms");
        let m = dummy_measurement(64);
        write_measurement(&path, &m).unwrap();
        let entry = ManifestEntry { id: "m0".into(), path: path.clone(), label: 1 };
        let back = read_measurement(&path, &entry).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn measurement_csv_matches_binary() {
        let dir = tmpdir();
        let bin_path = dir.path().join("m0.pdms");
        let m = dummy_measurement(8);
        write_measurement(&bin_path, &m).unwrap();

        let mut csv_text = String::new();
        for i in 0..8 {
            csv_text.push_str(&format!(
                "{},{},{}\n",
                m.samples[0][i], m.samples[1][i], m.samples[2][i]
            ));
        }
        let csv_path = write_file(dir.path(), "m0.csv", &csv_text);

        let entry = ManifestEntry { id: "m0".into(), path: bin_path.clone(), label: 1 };
        let from_bin = read_measurement(&bin_path, &entry).unwrap();
        let from_csv = read_measurement(&csv_path, &entry).unwrap();
        assert_eq!(from_bin.samples, from_csv.samples);
    }

    #[test]
    fn measurement_csv_of_zeros() {
        let dir = tmpdir();
        let path = write_file(dir.path(), "z.csv", &"0,0,0\n".repeat(8));
        let entry = ManifestEntry { id: "z".into(), path: path.clone(), label: 0 };
        let m = read_measurement(&path, &entry).unwrap();
        assert_eq!(m.n_samples(), 8);
        assert!(m.samples.iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn measurement_truncated_payload() {
        let dir = tmpdir();
        let path = dir.path().join("short.pdms");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(RAW_MAGIC);
        bytes.extend_from_slice(&100u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 16]); // far fewer than 3*100*4 bytes
        fs::write(&path, &bytes).unwrap();
        let entry = ManifestEntry { id: "short".into(), path: path.clone(), label: 0 };
        assert!(matches!(
            read_measurement(&path, &entry),
            Err(SignalIoError::TruncatedPayload { .. })
        ));
    }

    fn dummy_features(n_p: usize, w_t: usize, f_bins: usize) -> MeasurementFeatures {
        let fill = |rows: usize, cols: usize, scale: f64| {
            Matrix::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|i| (i as f32 as f64) * scale).collect(),
            )
        };
        MeasurementFeatures {
            id: "f0".into(),
            label: 1,
            td_pos: fill(n_p, w_t, 0.25),
            td_neg: fill(n_p, w_t, -0.5),
            fd_pos: fill(n_p, f_bins, 0.125),
            fd_neg: fill(n_p, f_bins, 0.0625),
        }
    }

    #[test]
    fn features_round_trip_identity() {
        let dir = tmpdir();
        let path = dir.path().join("f0.pdcf");
        let f = dummy_features(5, 8, 9);
        write_features(&path, &f).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn features_file_size_matches_format_arithmetic() {
        let dir = tmpdir();
        let path = dir.path().join("big.pdcf");
        let f = MeasurementFeatures {
            id: "big".into(),
            label: 0,
            td_pos: Matrix::zeros(257, 128),
            td_neg: Matrix::zeros(257, 128),
            fd_pos: Matrix::zeros(257, 257),
            fd_neg: Matrix::zeros(257, 257),
        };
        write_features(&path, &f).unwrap();
        let expected = FEATURE_HEADER_LEN + 2 * (257 * 128 + 257 * 257) * 4 + 1;
        assert_eq!(fs::metadata(&path).unwrap().len(), expected as u64);
    }

    #[test]
    fn features_header_dim_mismatch_detected() {
        let dir = tmpdir();
        let path = dir.path().join("f0.pdcf");
        write_features(&path, &dummy_features(4, 6, 5)).unwrap();
        // Claim one more row than the payload carries.
        let mut bytes = fs::read(&path).unwrap();
        bytes[6..10].copy_from_slice(&5u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(SignalIoError::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn features_bad_magic() {
        let dir = tmpdir();
        let path = dir.path().join("f0.pdcf");
        write_features(&path, &dummy_features(2, 4, 3)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_features(&path), Err(SignalIoError::BadMagic { .. })));
    }

    #[test]
    fn features_dir_listing_is_sorted() {
        let dir = tmpdir();
        for name in ["b.pdcf", "a.pdcf"] {
            write_features(&dir.path().join(name), &dummy_features(2, 4, 3)).unwrap();
        }
        write_file(dir.path(), "ignored.txt", "not a feature file");
        let all = read_features_dir(dir.path()).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].id, "a");
        assert_eq!(all[1].id, "b");
    }
}
