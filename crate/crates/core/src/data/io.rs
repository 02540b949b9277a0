//! On-disk formats.
//!
//! Binary files are little-endian throughout.
//!
//! * Features (`.tasf`): `"TASF"`, version `u32 = 1`, `T u32`, `H u32`, then
//!   `T·H` `f64` values row-major.
//! * Labels (`.tasl`): `"TASL"`, version `u32 = 1`, `T u32`, then `T` `u16`
//!   class ids.
//! * Labels may also be plain text, one class name per line, resolved through
//!   a class list (`classes.txt`: one name per line, line number = id).
//!
//! A dataset directory holds `dataset.json` (the recording index),
//! `classes.txt`, `split.json` and one feature and one label file per
//! recording.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureSequence, Recording, SplitSpec};
use crate::error::{arg_err, Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"TASF";
pub const LABEL_MAGIC: &[u8; 4] = b"TASL";
pub const FORMAT_VERSION: u32 = 1;

pub const INDEX_FILE: &str = "dataset.json";
pub const CLASSES_FILE: &str = "classes.txt";
pub const SPLIT_FILE: &str = "split.json";

/// Bounds-checked little-endian reader that reports byte offsets.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(Error::format(
                self.offset(),
                format!("truncated {what}: need {n} bytes, {remaining} left"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: &[u8], what: &str) -> Result<()> {
        let got = self.take(expected.len(), "magic")?;
        if got != expected {
            return Err(Error::format(0, format!("not a {what} file (bad magic)")));
        }
        Ok(())
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn version(&mut self, supported: u32) -> Result<()> {
        let at = self.offset();
        let v = self.u32("version")?;
        if v != supported {
            return Err(Error::format(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.offset(),
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn dim_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| arg_err!("{what} {n} does not fit in u32"))
}

pub fn encode_features(features: &FeatureSequence) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 8 * features.data().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(features.frames(), "frame count")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(features.dim(), "feature dim")?.to_le_bytes());
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC, "feature")?;
    r.version(FORMAT_VERSION)?;
    let t = r.u32("frame count")? as usize;
    let h = r.u32("feature dim")? as usize;
    let n = t
        .checked_mul(h)
        .ok_or_else(|| Error::format(r.offset(), "feature size overflows"))?;
    let available = (bytes.len() - r.pos) / 8;
    if n > available {
        return Err(Error::format(
            r.offset(),
            format!("truncated features: header says {t}×{h}, only {available} values present"),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f64("feature value")?);
    }
    r.finish()?;
    FeatureSequence::new(t, h, data)
}

pub fn encode_labels(labels: &[u16]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 2 * labels.len());
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(labels.len(), "frame count")?.to_le_bytes());
    for l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<u16>> {
    let mut r = Reader::new(bytes);
    r.magic(LABEL_MAGIC, "label")?;
    r.version(FORMAT_VERSION)?;
    let t = r.u32("frame count")? as usize;
    let available = (bytes.len() - r.pos) / 2;
    if t > available {
        return Err(Error::format(
            r.offset(),
            format!("truncated labels: header says {t} frames, only {available} present"),
        ));
    }
    let labels = (0..t).map(|_| r.u16("label")).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(labels)
}

/// Parses plain-text labels, one class name per line. Blank lines are
/// skipped; surrounding whitespace is ignored.
pub fn parse_text_labels(text: &str, class_names: &[String]) -> Result<Vec<u16>> {
    let mut labels = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let name = line.trim();
        if !name.is_empty() {
            let id = class_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::format(offset, format!("unknown class name {name:?}")))?;
            labels.push(id as u16);
        }
        offset += line.len() as u64;
    }
    Ok(labels)
}

/// Reads a label file, binary if it starts with the label magic, otherwise
/// plain text resolved through `class_names`.
pub fn read_labels_auto(path: &Path, class_names: &[String]) -> Result<Vec<u16>> {
    let bytes = read_bytes(path)?;
    let labels = if bytes.starts_with(LABEL_MAGIC) {
        decode_labels(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::format(e.valid_up_to() as u64, "label file is neither binary nor UTF-8 text"))?;
        parse_text_labels(text, class_names)
    };
    labels.map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { offset, message } => Error::format(offset, format!("{}: {message}", path.display())),
        other => other,
    }
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    decode_features(&read_bytes(path)?).map_err(|e| with_path(e, path))
}

pub fn write_features(path: &Path, features: &FeatureSequence) -> Result<()> {
    write_bytes(path, &encode_features(features)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<u16>> {
    decode_labels(&read_bytes(path)?).map_err(|e| with_path(e, path))
}

pub fn write_labels(path: &Path, labels: &[u16]) -> Result<()> {
    write_bytes(path, &encode_labels(labels)?)
}

pub fn read_classes(path: &Path) -> Result<Vec<String>> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| Error::format(e.valid_up_to() as u64, format!("{}: not UTF-8", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

pub fn write_classes(path: &Path, class_names: &[String]) -> Result<()> {
    let mut text = String::new();
    for name in class_names {
        text.push_str(name);
        text.push('\n');
    }
    write_bytes(path, text.as_bytes())
}

/// Paths of a recording's feature and label files: `<base>.tasf` and
/// `<base>.tasl`.
pub fn recording_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("tasf"), base.with_extension("tasl"))
}

/// Writes `<base>.tasf` and `<base>.tasl`.
pub fn write_recording(base: &Path, recording: &Recording) -> Result<()> {
    let (f, l) = recording_paths(base);
    write_features(&f, &recording.features)?;
    write_labels(&l, &recording.labels)
}

/// Reads `<base>.tasf` and `<base>.tasl`; frame counts must agree.
pub fn read_recording(base: &Path, sequence_id: u32, view_id: u32) -> Result<Recording> {
    let (f, l) = recording_paths(base);
    let features = read_features(&f)?;
    let labels = read_labels(&l)?;
    if labels.len() != features.frames() {
        return Err(Error::format(
            8,
            format!(
                "{}: {} labels for {} feature frames",
                l.display(),
                labels.len(),
                features.frames()
            ),
        ));
    }
    Ok(Recording { sequence_id, view_id, features, labels })
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    sequence_id: u32,
    view_id: u32,
    /// Path stem relative to the dataset directory.
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Index {
    num_classes: usize,
    feature_dim: usize,
    recordings: Vec<IndexEntry>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| {
        Error::format(
            0,
            format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column()),
        )
    })
}

pub fn write_split(path: &Path, split: &SplitSpec) -> Result<()> {
    write_json(path, split)
}

pub fn read_split(path: &Path) -> Result<SplitSpec> {
    let split: SplitSpec = read_json(path)?;
    split.validate()?;
    Ok(split)
}

/// Writes a dataset and its split into `dir`, returning the files written
/// (relative to `dir`) in a fixed order.
pub fn save_dataset(dir: &Path, dataset: &Dataset, split: &SplitSpec) -> Result<Vec<PathBuf>> {
    dataset.validate()?;
    let mut written = Vec::new();
    let mut entries = Vec::with_capacity(dataset.recordings.len());
    for rec in &dataset.recordings {
        let stem = format!("recordings/s{:04}_v{:02}", rec.sequence_id, rec.view_id);
        write_recording(&dir.join(&stem), rec)?;
        let (f, l) = recording_paths(Path::new(&stem));
        written.push(f);
        written.push(l);
        entries.push(IndexEntry {
            sequence_id: rec.sequence_id,
            view_id: rec.view_id,
            file: stem,
        });
    }
    let index = Index {
        num_classes: dataset.num_classes,
        feature_dim: dataset.feature_dim,
        recordings: entries,
    };
    write_json(&dir.join(INDEX_FILE), &index)?;
    write_classes(&dir.join(CLASSES_FILE), &dataset.class_names)?;
    write_split(&dir.join(SPLIT_FILE), split)?;
    written.extend([INDEX_FILE, CLASSES_FILE, SPLIT_FILE].map(PathBuf::from));
    Ok(written)
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, SplitSpec)> {
    let index: Index = read_json(&dir.join(INDEX_FILE))?;
    let class_names = read_classes(&dir.join(CLASSES_FILE))?;
    let split = read_split(&dir.join(SPLIT_FILE))?;
    let recordings = index
        .recordings
        .iter()
        .map(|e| read_recording(&dir.join(&e.file), e.sequence_id, e.view_id))
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset {
        num_classes: index.num_classes,
        feature_dim: index.feature_dim,
        class_names,
        recordings,
    };
    dataset.validate()?;
    Ok((dataset, split))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GeneratorConfig};

    fn recording() -> Recording {
        Recording {
            sequence_id: 3,
            view_id: 1,
            features: FeatureSequence::new(3, 2, vec![0.5, -1.0, f64::MIN_POSITIVE, 1e300, -0.0, 7.25]).unwrap(),
            labels: vec![0, 0, 4],
        }
    }

    #[test]
    fn recording_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("r");
        let rec = recording();
        write_recording(&base, &rec).unwrap();
        let back = read_recording(&base, 3, 1).unwrap();
        assert_eq!(back, rec);
        let bits = |r: &Recording| r.features.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&rec));
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = encode_features(&recording().features).unwrap();
        for cut in 0..bytes.len() {
            match decode_features(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let labels = encode_labels(&[1, 2, 3]).unwrap();
        for cut in 0..labels.len() {
            assert!(matches!(decode_labels(&labels[..cut]), Err(Error::Format { .. })));
        }
    }

    #[test]
    fn empty_label_payload_with_frames_is_rejected() {
        let mut bytes = LABEL_MAGIC.to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&5u32.to_le_bytes());
        match decode_labels(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_version_and_trailing_bytes() {
        let mut bytes = encode_labels(&[1]).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_labels(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = encode_labels(&[1]).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_labels(&bytes), Err(Error::Format { offset: 4, .. })));
        let mut bytes = encode_labels(&[1]).unwrap();
        bytes.push(0);
        assert!(matches!(decode_labels(&bytes), Err(Error::Format { offset: 14, .. })));
    }

    #[test]
    fn text_labels_and_auto_detection() {
        let names: Vec<String> = ["take", "pour"].map(String::from).to_vec();
        assert_eq!(parse_text_labels("take\npour\n\n pour \n", &names).unwrap(), vec![0, 1, 1]);
        match parse_text_labels("take\nstir\n", &names) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        let dir = tempfile::tempdir().unwrap();
        let text = dir.path().join("a.txt");
        fs::write(&text, "pour\ntake\n").unwrap();
        assert_eq!(read_labels_auto(&text, &names).unwrap(), vec![1, 0]);
        let bin = dir.path().join("a.tasl");
        write_labels(&bin, &[1, 1, 0]).unwrap();
        assert_eq!(read_labels_auto(&bin, &names).unwrap(), vec![1, 1, 0]);
        let classes = dir.path().join("classes.txt");
        write_classes(&classes, &names).unwrap();
        assert_eq!(read_classes(&classes).unwrap(), names);
    }

    #[test]
    fn dataset_directory_round_trip() {
        let g = generate_synthetic(&GeneratorConfig { num_sequences: 3, feature_dim: 4, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = save_dataset(dir.path(), &g.dataset, &g.split).unwrap();
        assert_eq!(files.len(), 2 * g.dataset.recordings.len() + 3);
        let (dataset, split) = load_dataset(dir.path()).unwrap();
        assert_eq!(dataset, g.dataset);
        assert_eq!(split, g.split);
    }
}
