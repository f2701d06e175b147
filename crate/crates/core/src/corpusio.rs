//! On-disk artifacts: binary feature files, alignments, manifests, boundary
//! lists and discovered-class files.
//!
//! Feature file layout (all little-endian):
//!
//! ```text
//! "WDF1" | T: u32 | D: u32 | frame_rate_hz: f32 | T*D f32 values, frame-major
//! ```
//!
//! Text formats store times as seconds with two decimals.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::promseg::Segmentation;

pub const FEATURE_MAGIC: &[u8; 4] = b"WDF1";
pub const FEATURE_HEADER_LEN: usize = 16;

/// A `T x D` matrix of per-frame features for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    utterance_id: String,
    frame_rate_hz: f32,
    n_frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(
        utterance_id: impl Into<String>,
        frame_rate_hz: f32,
        n_frames: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let utterance_id = utterance_id.into();
        if n_frames == 0 || dim == 0 {
            return Err(Error::Validation(format!(
                "{utterance_id}: matrix must be at least 1x1, got {n_frames}x{dim}"
            )));
        }
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(Error::Validation(format!(
                "{utterance_id}: frame rate must be positive, got {frame_rate_hz}"
            )));
        }
        if data.len() != n_frames * dim {
            return Err(Error::Shape {
                expected: n_frames * dim,
                got: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "{utterance_id}: non-finite value at frame {}, dim {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            utterance_id,
            frame_rate_hz,
            n_frames,
            dim,
            data,
        })
    }

    pub fn from_rows(
        utterance_id: impl Into<String>,
        frame_rate_hz: f32,
        rows: &[Vec<f32>],
    ) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::Shape {
                expected: dim,
                got: bad.len(),
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(utterance_id, frame_rate_hz, rows.len(), dim, data)
    }

    pub fn utterance_id(&self) -> &str {
        &self.utterance_id
    }

    pub fn set_utterance_id(&mut self, id: impl Into<String>) {
        self.utterance_id = id.into();
    }

    pub fn frame_rate_hz(&self) -> f32 {
        self.frame_rate_hz
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn duration_s(&self) -> f64 {
        self.n_frames as f64 / self.frame_rate_hz as f64
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.n_frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.frame_rate_hz.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(utterance_id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FEATURE_HEADER_LEN {
            return Err(Error::Format(format!(
                "header needs {FEATURE_HEADER_LEN} bytes, file has {}",
                bytes.len()
            )));
        }
        if &bytes[0..4] != FEATURE_MAGIC {
            return Err(Error::Format("bad magic, expected WDF1".into()));
        }
        let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
        let n_frames = u32::from_le_bytes(word(4)) as usize;
        let dim = u32::from_le_bytes(word(8)) as usize;
        let frame_rate_hz = f32::from_le_bytes(word(12));
        let expected = n_frames
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("T*D overflows".into()))?;
        let payload = &bytes[FEATURE_HEADER_LEN..];
        if payload.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                payload.len() - expected
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(utterance_id, frame_rate_hz, n_frames, dim, data)
    }
}

/// Reads a feature file. The utterance id is taken from the file stem.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureMatrix::decode(id, &bytes)
}

pub fn write_feature_file(matrix: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, matrix.encode()).map_err(|e| Error::io(path, e))
}

/// Times closer than this are the same instant; absorbs float noise in
/// computed interval edges.
const TIME_SLACK_S: f64 = 1e-6;

/// Alignment tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Word,
    Phone,
    Syllable,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Word => "word",
            Tier::Phone => "phone",
            Tier::Syllable => "syllable",
        })
    }
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Tier::Word),
            "phone" => Ok(Tier::Phone),
            "syllable" => Ok(Tier::Syllable),
            other => Err(Error::Parameter(format!("unknown tier {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentEntry {
    pub start_s: f64,
    pub end_s: f64,
    pub label: String,
}

impl AlignmentEntry {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    /// Length of the intersection with `[start_s, end_s)`, zero if disjoint.
    pub fn overlap_s(&self, start_s: f64, end_s: f64) -> f64 {
        (self.end_s.min(end_s) - self.start_s.max(start_s)).max(0.0)
    }
}

/// Time-stamped labelled intervals for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTrack {
    pub utterance_id: String,
    pub tier: Tier,
    pub entries: Vec<AlignmentEntry>,
}

impl AlignmentTrack {
    /// Sorts entries and checks that they are well formed and disjoint.
    pub fn new(
        utterance_id: impl Into<String>,
        tier: Tier,
        mut entries: Vec<AlignmentEntry>,
    ) -> Result<Self> {
        let utterance_id = utterance_id.into();
        for e in &entries {
            if !(e.start_s.is_finite() && e.end_s.is_finite()) || e.end_s <= e.start_s {
                return Err(Error::Validation(format!(
                    "{utterance_id}: interval ({}, {}) has end <= start",
                    e.start_s, e.end_s
                )));
            }
        }
        entries.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        for pair in entries.windows(2) {
            if pair[1].start_s + TIME_SLACK_S < pair[0].end_s {
                return Err(Error::Validation(format!(
                    "{utterance_id}: interval ({}, {}) overlaps ({}, {})",
                    pair[0].start_s, pair[0].end_s, pair[1].start_s, pair[1].end_s
                )));
            }
        }
        Ok(Self {
            utterance_id,
            tier,
            entries,
        })
    }

    /// Boundary times strictly inside the track: every distinct onset and
    /// offset except the first onset and the last offset.
    pub fn interior_boundaries(&self) -> Vec<f64> {
        let (Some(first), Some(last)) = (self.entries.first(), self.entries.last()) else {
            return Vec::new();
        };
        let mut times: Vec<f64> = self
            .entries
            .iter()
            .flat_map(|e| [e.start_s, e.end_s])
            .filter(|&t| t > first.start_s && t < last.end_s)
            .collect();
        times.sort_by(f64::total_cmp);
        times.dedup_by(|a, b| (*a - *b).abs() <= TIME_SLACK_S);
        times
    }
}

pub fn parse_alignments(text: &str, tier: Tier) -> Result<Vec<AlignmentTrack>> {
    let mut grouped: BTreeMap<String, Vec<AlignmentEntry>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let bad = |what: &str| Error::Format(format!("alignment line {}: {what}", lineno + 1));
        let utt = fields.next().ok_or_else(|| bad("missing utterance id"))?;
        let start_s = parse_time(fields.next(), lineno)?;
        let end_s = parse_time(fields.next(), lineno)?;
        let rest: Vec<&str> = fields.collect();
        if rest.is_empty() {
            return Err(bad("missing label"));
        }
        if rest.len() > 1 && tier != Tier::Phone {
            return Err(bad("multi-token labels are only allowed on the phone tier"));
        }
        grouped.entry(utt.to_owned()).or_default().push(AlignmentEntry {
            start_s,
            end_s,
            label: rest.join(" "),
        });
    }
    grouped
        .into_iter()
        .map(|(utt, entries)| AlignmentTrack::new(utt, tier, entries))
        .collect()
}

fn parse_time(field: Option<&str>, lineno: usize) -> Result<f64> {
    let field =
        field.ok_or_else(|| Error::Format(format!("line {}: missing time field", lineno + 1)))?;
    let v: f64 = field
        .parse()
        .map_err(|_| Error::Format(format!("line {}: bad time {field:?}", lineno + 1)))?;
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Validation(format!(
            "line {}: time {field} must be finite and non-negative",
            lineno + 1
        )));
    }
    Ok(v)
}

/// One track per utterance, ordered by utterance id.
pub fn read_alignments(path: impl AsRef<Path>, tier: Tier) -> Result<Vec<AlignmentTrack>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_alignments(&text, tier)
}

pub fn format_alignments(tracks: &[AlignmentTrack]) -> String {
    let mut out = String::new();
    for track in tracks {
        for e in &track.entries {
            out.push_str(&format!(
                "{} {:.2} {:.2} {}\n",
                track.utterance_id, e.start_s, e.end_s, e.label
            ));
        }
    }
    out
}

pub fn write_alignments(tracks: &[AlignmentTrack], path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &format_alignments(tracks))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub feature_path: PathBuf,
    pub duration_s: f64,
}

/// Corpus listing. Alignment files are declared with `#alignment <tier> <path>`
/// directive lines; other `#` lines are comments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    pub alignments: BTreeMap<Tier, PathBuf>,
}

impl CorpusManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self {
            entries,
            alignments: BTreeMap::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.utterance_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate utterance id {}",
                    e.utterance_id
                )));
            }
            if !(e.duration_s.is_finite() && e.duration_s > 0.0) {
                return Err(Error::Validation(format!(
                    "{}: duration must be positive",
                    e.utterance_id
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, utterance_id: &str) -> bool {
        self.entries.iter().any(|e| e.utterance_id == utterance_id)
    }

    pub fn total_duration_s(&self) -> f64 {
        self.entries.iter().map(|e| e.duration_s).sum()
    }

    /// Parses manifest text; relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut manifest = CorpusManifest::default();
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(directive) = line.strip_prefix("#alignment") {
                let fields: Vec<&str> = directive.split_whitespace().collect();
                if fields.len() != 2 {
                    return Err(Error::Format(format!(
                        "manifest line {}: expected `#alignment <tier> <path>`",
                        lineno + 1
                    )));
                }
                manifest
                    .alignments
                    .insert(fields[0].parse()?, resolve(fields[1]));
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(Error::Format(format!(
                    "manifest line {}: expected `<utterance_id> <feature_path> <duration_s>`",
                    lineno + 1
                )));
            }
            let duration_s = fields[2].parse().map_err(|_| {
                Error::Format(format!("manifest line {}: bad duration", lineno + 1))
            })?;
            manifest.entries.push(ManifestEntry {
                utterance_id: fields[0].to_owned(),
                feature_path: resolve(fields[1]),
                duration_s,
            });
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn format(&self) -> String {
        let mut out = String::new();
        for (tier, path) in &self.alignments {
            out.push_str(&format!("#alignment {tier} {}\n", path.display()));
        }
        for e in &self.entries {
            out.push_str(&format!(
                "{} {} {}\n",
                e.utterance_id,
                e.feature_path.display(),
                e.duration_s
            ));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.format())
    }
}

/// One discovered word token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub utterance_id: String,
    pub onset_s: f64,
    pub offset_s: f64,
}

impl Token {
    pub fn new(utterance_id: impl Into<String>, onset_s: f64, offset_s: f64) -> Self {
        Self {
            utterance_id: utterance_id.into(),
            onset_s,
            offset_s,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.offset_s - self.onset_s
    }
}

/// Discovered lexicon: cluster id to the tokens assigned to it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassFile {
    pub classes: BTreeMap<usize, Vec<Token>>,
}

impl ClassFile {
    pub fn push(&mut self, class: usize, token: Token) {
        self.classes.entry(class).or_default().push(token);
    }

    pub fn n_tokens(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn validate(&self, manifest: Option<&CorpusManifest>) -> Result<()> {
        for (class, tokens) in &self.classes {
            for t in tokens {
                if !(t.onset_s < t.offset_s) {
                    return Err(Error::Validation(format!(
                        "class {class}: token {} ({}, {}) has offset <= onset",
                        t.utterance_id, t.onset_s, t.offset_s
                    )));
                }
                if let Some(m) = manifest {
                    if !m.contains(&t.utterance_id) {
                        return Err(Error::Validation(format!(
                            "class {class}: unknown utterance {}",
                            t.utterance_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn format(&self) -> String {
        let mut out = String::new();
        for (i, (class, tokens)) in self.classes.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("Class {class}\n"));
            for t in tokens {
                out.push_str(&format!(
                    "{} {:.2} {:.2}\n",
                    t.utterance_id, t.onset_s, t.offset_s
                ));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = ClassFile::default();
        let mut current: Option<usize> = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                current = None;
                continue;
            }
            if let Some(id) = line.strip_prefix("Class ") {
                let id = id.trim().parse().map_err(|_| {
                    Error::Format(format!("class file line {}: bad class id", lineno + 1))
                })?;
                out.classes.entry(id).or_default();
                current = Some(id);
                continue;
            }
            let class = current.ok_or_else(|| {
                Error::Format(format!(
                    "class file line {}: token outside a Class block",
                    lineno + 1
                ))
            })?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(Error::Format(format!(
                    "class file line {}: expected `<utterance_id> <onset> <offset>`",
                    lineno + 1
                )));
            }
            let onset_s = parse_time(Some(fields[1]), lineno)?;
            let offset_s = parse_time(Some(fields[2]), lineno)?;
            out.push(class, Token::new(fields[0], onset_s, offset_s));
        }
        Ok(out)
    }
}

pub fn write_class_file(classes: &ClassFile, path: impl AsRef<Path>) -> Result<()> {
    classes.validate(None)?;
    write_text(path.as_ref(), &classes.format())
}

/// Reads a class file, checking utterance ids against `manifest` when given.
pub fn read_class_file(
    path: impl AsRef<Path>,
    manifest: Option<&CorpusManifest>,
) -> Result<ClassFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let classes = ClassFile::parse(&text)?;
    classes.validate(manifest)?;
    Ok(classes)
}

/// Boundary lists, one utterance per line: `<utterance_id> <b1> ... <T>`.
pub fn format_boundaries(segmentations: &[Segmentation]) -> String {
    let mut out = String::new();
    for s in segmentations {
        out.push_str(&s.utterance_id);
        for b in &s.boundaries {
            out.push(' ');
            out.push_str(&b.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn parse_boundaries(text: &str) -> Result<Vec<Segmentation>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let utt = fields.next().unwrap_or_default();
        let boundaries = fields
            .map(|f| {
                f.parse::<usize>().map_err(|_| {
                    Error::Format(format!("boundary line {}: bad frame index {f:?}", lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Segmentation::new(utt, boundaries)?);
    }
    Ok(out)
}

pub fn write_boundary_file(segmentations: &[Segmentation], path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &format_boundaries(segmentations))
}

pub fn read_boundary_file(path: impl AsRef<Path>) -> Result<Vec<Segmentation>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_boundaries(&text)
}

/// Speaker map, one `<utterance_id> <speaker_id>` pair per line.
pub fn read_speakers(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => {}
            [utt, spk] => {
                out.insert(utt.to_string(), spk.to_string());
            }
            _ => {
                return Err(Error::Format(format!(
                    "speaker line {}: expected `<utterance_id> <speaker_id>`",
                    lineno + 1
                )))
            }
        }
    }
    Ok(out)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn feature_round_trip_small() {
        let dir = tmp();
        let m = FeatureMatrix::from_rows(
            "utt",
            50.0,
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
        )
        .unwrap();
        let path = dir.path().join("utt.wdf");
        write_feature_file(&m, &path).unwrap();
        assert_eq!(read_feature_file(&path).unwrap(), m);
    }

    #[test]
    fn altered_magic_is_format_error() {
        let m = FeatureMatrix::from_rows("u", 50.0, &[vec![1.0]]).unwrap();
        let mut bytes = m.encode();
        bytes[0] = b'X';
        assert!(matches!(FeatureMatrix::decode("u", &bytes), Err(Error::Format(_))));
    }

    #[test]
    fn short_payload_is_truncation_error() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(FEATURE_MAGIC);
        bytes.extend_from_slice(&5u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&50f32.to_le_bytes());
        bytes.extend(std::iter::repeat_n(0u8, 70));
        match FeatureMatrix::decode("u", &bytes) {
            Err(Error::Truncated { expected, found }) => {
                assert_eq!(expected, 80);
                assert_eq!(found, 70);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_payload_rejected() {
        let m = FeatureMatrix::from_rows("u", 50.0, &[vec![1.0, 2.0]]).unwrap();
        let mut bytes = m.encode();
        bytes[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(FeatureMatrix::decode("u", &bytes), Err(Error::Validation(_))));
    }

    #[test]
    fn payload_sizes_and_determinism() {
        let one = FeatureMatrix::from_rows("u", 50.0, &[vec![0.0]]).unwrap();
        assert_eq!(one.encode().len(), FEATURE_HEADER_LEN + 4);
        let m = FeatureMatrix::from_rows("u", 50.0, &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]])
            .unwrap();
        assert_eq!(m.encode().len() - FEATURE_HEADER_LEN, 24);

        let dir = tmp();
        let (a, b) = (dir.path().join("a.wdf"), dir.path().join("b.wdf"));
        write_feature_file(&m, &a).unwrap();
        write_feature_file(&m, &b).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let m = FeatureMatrix::from_rows("u", 50.0, &[vec![0.0]]).unwrap();
        let err = write_feature_file(&m, "/nonexistent-dir/x/y.wdf").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn single_alignment_entry() {
        let tracks = parse_alignments("utt1 0.00 0.50 cat\n", Tier::Word).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].entries[0].label, "cat");
        assert_eq!(tracks[0].entries[0].end_s, 0.5);
    }

    #[test]
    fn overlapping_alignment_rejected() {
        let text = "u 0.0 0.5 a\nu 0.4 0.9 b\n";
        assert!(matches!(parse_alignments(text, Tier::Word), Err(Error::Validation(_))));
        assert!(matches!(
            parse_alignments("u 0.5 0.5 a\n", Tier::Word),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn interleaved_utterances_grouped_and_sorted() {
        let text = "b 0.5 0.9 y\na 0.3 0.6 q\nb 0.0 0.5 x\na 0.0 0.3 p\n";
        let tracks = parse_alignments(text, Tier::Word).unwrap();
        let ids: Vec<_> = tracks.iter().map(|t| t.utterance_id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        let labels: Vec<_> = tracks[1].entries.iter().map(|e| e.label.as_str()).collect();
        assert_eq!(labels, ["x", "y"]);
    }

    #[test]
    fn multi_token_label_only_on_phone_tier() {
        let text = "u 0.0 0.5 k ae t\n";
        assert!(parse_alignments(text, Tier::Word).is_err());
        let t = parse_alignments(text, Tier::Phone).unwrap();
        assert_eq!(t[0].entries[0].label, "k ae t");
    }

    #[test]
    fn minimal_class_file() {
        let mut c = ClassFile::default();
        c.push(0, Token::new("utt1", 0.10, 0.50));
        assert_eq!(c.format(), "Class 0\nutt1 0.10 0.50\n");
    }

    #[test]
    fn class_file_round_trip() {
        let mut c = ClassFile::default();
        c.push(0, Token::new("a", 0.10, 0.50));
        c.push(0, Token::new("b", 0.00, 0.20));
        c.push(3, Token::new("a", 0.50, 0.90));
        c.push(7, Token::new("c", 1.00, 1.25));
        c.push(7, Token::new("c", 1.25, 1.75));
        let dir = tmp();
        let path = dir.path().join("classes.txt");
        write_class_file(&c, &path).unwrap();
        assert_eq!(read_class_file(&path, None).unwrap(), c);
    }

    #[test]
    fn class_times_round_to_two_decimals() {
        let mut c = ClassFile::default();
        c.push(0, Token::new("u", 0.1, 0.499999));
        let text = c.format();
        assert!(text.contains("u 0.10 0.50"));
        assert_eq!(ClassFile::parse(&text).unwrap().classes[&0][0].offset_s, 0.50);
    }

    #[test]
    fn class_file_unknown_utterance_rejected_with_manifest() {
        let manifest = CorpusManifest::new(vec![ManifestEntry {
            utterance_id: "a".into(),
            feature_path: "a.wdf".into(),
            duration_s: 1.0,
        }])
        .unwrap();
        let dir = tmp();
        let path = dir.path().join("c.txt");
        fs::write(&path, "Class 0\nb 0.00 0.50\n").unwrap();
        assert!(read_class_file(&path, None).is_ok());
        assert!(matches!(
            read_class_file(&path, Some(&manifest)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let text = "#alignment word words.txt\n# comment\nu1 feats/u1.wdf 1.5\nu2 /abs/u2.wdf 2\n";
        let m = CorpusManifest::parse(text, Path::new("/base")).unwrap();
        assert_eq!(m.entries[0].feature_path, PathBuf::from("/base/feats/u1.wdf"));
        assert_eq!(m.entries[1].feature_path, PathBuf::from("/abs/u2.wdf"));
        assert_eq!(m.alignments[&Tier::Word], PathBuf::from("/base/words.txt"));
        assert_eq!(m.total_duration_s(), 3.5);
        assert!(CorpusManifest::parse("u a 1\nu b 1\n", Path::new(".")).is_err());
        assert!(CorpusManifest::parse("u a 0\n", Path::new(".")).is_err());
    }

    #[test]
    fn boundary_file_round_trip() {
        let segs = vec![
            Segmentation::new("a", vec![3, 7, 10]).unwrap(),
            Segmentation::new("b", vec![4]).unwrap(),
        ];
        let text = format_boundaries(&segs);
        assert_eq!(text, "a 3 7 10\nb 4\n");
        assert_eq!(parse_boundaries(&text).unwrap(), segs);
    }

    proptest! {
        #[test]
        fn feature_round_trip_bit_exact(
            t in 1usize..12,
            d in 1usize..6,
            seed in proptest::collection::vec(-1e6f32..1e6, 72),
            rate in 1.0f32..200.0,
        ) {
            let data: Vec<f32> = (0..t * d).map(|i| seed[i % seed.len()] * (i as f32 + 0.5)).collect();
            let m = FeatureMatrix::new("x", rate, t, d, data).unwrap();
            let back = FeatureMatrix::decode("x", &m.encode()).unwrap();
            prop_assert_eq!(back.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back, m);
        }

        #[test]
        fn alignment_order_independent_of_line_order(
            lens in proptest::collection::vec(1u32..50, 1..8),
            perm_seed in any::<u64>(),
        ) {
            let mut lines = Vec::new();
            let mut t = 0u32;
            for (i, len) in lens.iter().enumerate() {
                lines.push(format!("u {:.2} {:.2} w{i}", t as f64 / 100.0, (t + len) as f64 / 100.0));
                t += len;
            }
            let mut shuffled = lines.clone();
            let n = shuffled.len();
            for i in (1..n).rev() {
                let j = (perm_seed.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize;
                shuffled.swap(i, j);
            }
            let a = parse_alignments(&lines.join("\n"), Tier::Word).unwrap();
            let b = parse_alignments(&shuffled.join("\n"), Tier::Word).unwrap();
            prop_assert_eq!(&a, &b);
            for pair in b[0].entries.windows(2) {
                prop_assert!(pair[0].end_s <= pair[1].start_s);
            }
        }

        #[test]
        fn class_file_round_trip_preserves_tokens(
            tokens in proptest::collection::vec((0usize..5, 0u8..3, 0u32..500, 1u32..200), 1..20)
        ) {
            let mut c = ClassFile::default();
            for (class, utt, on, len) in &tokens {
                let onset = *on as f64 / 100.0;
                c.push(*class, Token::new(format!("u{utt}"), onset, onset + *len as f64 / 100.0));
            }
            let back = ClassFile::parse(&c.format()).unwrap();
            prop_assert_eq!(back.n_tokens(), c.n_tokens());
            for (class, toks) in &c.classes {
                for (a, b) in toks.iter().zip(&back.classes[class]) {
                    prop_assert_eq!(&a.utterance_id, &b.utterance_id);
                    prop_assert!((a.onset_s - b.onset_s).abs() < 0.005 + 1e-12);
                    prop_assert!((a.offset_s - b.offset_s).abs() < 0.005 + 1e-12);
                }
            }
        }
    }
}
