//! Feature and annotation files, sequence rescaling, sliding windows and the
//! synthetic corpus generator.
//!
//! Feature files hold one stream of one video. The text form is a header
//! line `L C` followed by `L` rows of `C` decimal values. The binary form is
//! the 8-byte magic `DBGFEAT1`, `L` and `C` as little-endian `u32`, then
//! `L·C` little-endian `f32` values in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::GtInstance;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"DBGFEAT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFormat {
    Text,
    Binary,
}

impl FeatureFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FeatureFormat::Text => "txt",
            FeatureFormat::Binary => "bin",
        }
    }
}

impl std::str::FromStr for FeatureFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "txt" => Ok(FeatureFormat::Text),
            "binary" | "bin" => Ok(FeatureFormat::Binary),
            other => Err(Error::Invalid(format!("unknown feature format {other:?}"))),
        }
    }
}

/// Loads an `L₀×C` feature matrix in either encoding.
pub fn load_features(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(FEATURE_MAGIC) {
        parse_binary(path, &bytes)
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::Parse {
            path: path.into(),
            line: 1,
            msg: "neither a binary feature file nor UTF-8 text".into(),
        })?;
        parse_text(path, text)
    }
}

fn parse_text(path: &Path, text: &str) -> Result<Tensor<f64>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.into(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(k, s)| (k + 1, s.trim())).filter(|(_, s)| !s.is_empty());
    let (hline, header) = lines.next().ok_or_else(|| err(1, "empty feature file".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| err(hline, format!("header must be \"L C\", got {header:?}")))?;
    let [l, c] = dims[..] else {
        return Err(err(hline, format!("header must be \"L C\", got {header:?}")));
    };
    if l == 0 || c == 0 {
        return Err(err(hline, format!("empty feature matrix {l}×{c}")));
    }
    let mut data = Vec::with_capacity(l * c);
    let mut rows = 0;
    for (line, row) in lines {
        if rows == l {
            return Err(err(line, format!("more than the {l} rows announced in the header")));
        }
        let before = data.len();
        for tok in row.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| err(line, format!("not a number: {tok:?}")))?;
            if !v.is_finite() {
                return Err(err(line, format!("non-finite value {tok}")));
            }
            data.push(v);
        }
        if data.len() - before != c {
            return Err(err(line, format!("expected {c} values, found {}", data.len() - before)));
        }
        rows += 1;
    }
    if rows != l {
        return Err(err(hline, format!("header announces {l} rows, file has {rows}")));
    }
    Tensor::from_vec(&[l, c], data)
}

fn parse_binary(path: &Path, bytes: &[u8]) -> Result<Tensor<f64>> {
    let err = |msg: String| Error::Parse {
        path: path.into(),
        line: 0,
        msg,
    };
    if bytes.len() < 16 {
        return Err(err("truncated binary header".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (l, c) = (word(8), word(12));
    if l == 0 || c == 0 {
        return Err(err(format!("empty feature matrix {l}×{c}")));
    }
    let body = &bytes[16..];
    if body.len() != l * c * 4 {
        return Err(err(format!("{l}×{c} matrix needs {} data bytes, found {}", l * c * 4, body.len())));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|ch| f32::from_le_bytes(ch.try_into().expect("4 bytes")) as f64)
        .collect();
    if let Some(k) = data.iter().position(|v| !v.is_finite()) {
        return Err(err(format!("non-finite value at row {}, column {}", k / c, k % c)));
    }
    Tensor::from_vec(&[l, c], data)
}

fn check_matrix(features: &Tensor<f64>) -> Result<(usize, usize)> {
    if features.rank() != 2 {
        return Err(Error::shape("features", format!("expected L×C, got {:?}", features.shape())));
    }
    features.ensure_finite("features")?;
    Ok((features.dim(0), features.dim(1)))
}

pub fn write_features(path: &Path, features: &Tensor<f64>, format: FeatureFormat) -> Result<()> {
    let (l, c) = check_matrix(features)?;
    let bytes = match format {
        FeatureFormat::Text => {
            let mut s = format!("{l} {c}\n");
            for i in 0..l {
                let row: Vec<String> = features.row(i).iter().map(|v| v.to_string()).collect();
                s.push_str(&row.join(" "));
                s.push('\n');
            }
            s.into_bytes()
        }
        FeatureFormat::Binary => {
            let mut b = Vec::with_capacity(16 + 4 * l * c);
            b.extend_from_slice(FEATURE_MAGIC);
            for dim in [l, c] {
                let dim = u32::try_from(dim).map_err(|_| Error::Invalid(format!("dimension {dim} exceeds u32")))?;
                b.extend_from_slice(&dim.to_le_bytes());
            }
            for &v in features.data() {
                b.extend_from_slice(&(v as f32).to_le_bytes());
            }
            b
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Duration and segments of one video, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub duration: f64,
    pub segments: Vec<(f64, f64)>,
}

#[derive(Deserialize, Serialize)]
struct RawSegment {
    segment: [f64; 2],
}

#[derive(Deserialize, Serialize)]
struct RawVideo {
    duration_second: f64,
    annotations: Vec<RawSegment>,
}

fn validate_record(id: &str, rec: &AnnotationRecord) -> Result<()> {
    let bad = |msg: String| Error::Annotation { id: id.to_string(), msg };
    if !(rec.duration.is_finite() && rec.duration > 0.0) {
        return Err(bad(format!("duration must be positive, got {}", rec.duration)));
    }
    for &(s, e) in &rec.segments {
        if !(s.is_finite() && e.is_finite()) || s >= e {
            return Err(bad(format!("segment [{s}, {e}] needs start < end")));
        }
        if s < 0.0 || e > rec.duration {
            return Err(bad(format!("segment [{s}, {e}] outside [0, {}]", rec.duration)));
        }
    }
    Ok(())
}

/// Parses `{id: {"duration_second": x, "annotations": [{"segment": [s, e]}, …]}}`.
pub fn parse_annotations(json: &str) -> Result<BTreeMap<String, AnnotationRecord>> {
    let raw: BTreeMap<String, RawVideo> = serde_json::from_str(json)?;
    raw.into_iter()
        .map(|(id, v)| {
            let rec = AnnotationRecord {
                duration: v.duration_second,
                segments: v.annotations.iter().map(|a| (a.segment[0], a.segment[1])).collect(),
            };
            validate_record(&id, &rec)?;
            Ok((id, rec))
        })
        .collect()
}

pub fn load_annotations(path: &Path) -> Result<BTreeMap<String, AnnotationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text)
}

pub fn annotations_json(records: &BTreeMap<String, AnnotationRecord>) -> Result<String> {
    let raw: BTreeMap<&String, RawVideo> = records
        .iter()
        .map(|(id, r)| {
            validate_record(id, r)?;
            Ok((
                id,
                RawVideo {
                    duration_second: r.duration,
                    annotations: r.segments.iter().map(|&(s, e)| RawSegment { segment: [s, e] }).collect(),
                },
            ))
        })
        .collect::<Result<_>>()?;
    Ok(serde_json::to_string_pretty(&raw)?)
}

pub fn write_annotations(path: &Path, records: &BTreeMap<String, AnnotationRecord>) -> Result<()> {
    fs::write(path, annotations_json(records)?).map_err(|e| Error::io(path, e))
}

/// Both feature streams and the annotations of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub duration: f64,
    pub spatial: Tensor<f64>,
    pub temporal: Tensor<f64>,
    pub segments: Vec<(f64, f64)>,
}

impl VideoRecord {
    pub fn new(
        id: impl Into<String>,
        duration: f64,
        spatial: Tensor<f64>,
        temporal: Tensor<f64>,
        segments: Vec<(f64, f64)>,
    ) -> Result<Self> {
        let id = id.into();
        let s = check_matrix(&spatial)?;
        let t = check_matrix(&temporal)?;
        if s != t {
            return Err(Error::Annotation {
                id,
                msg: format!("spatial stream is {}×{}, temporal {}×{}", s.0, s.1, t.0, t.1),
            });
        }
        validate_record(&id, &AnnotationRecord { duration, segments: segments.clone() })?;
        Ok(Self {
            id,
            duration,
            spatial,
            temporal,
            segments,
        })
    }

    /// Native sequence length `L₀`.
    pub fn length(&self) -> usize {
        self.spatial.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.spatial.dim(1)
    }

    pub fn annotation(&self) -> AnnotationRecord {
        AnnotationRecord {
            duration: self.duration,
            segments: self.segments.clone(),
        }
    }
}

/// Resamples `L₀×C` features to `L` rows spanning `[0, L₀-1]` by per-channel
/// linear interpolation; both endpoints are kept exactly.
pub fn rescale_sequence(features: &Tensor<f64>, length: usize) -> Result<Tensor<f64>> {
    let (l0, c) = check_matrix(features)?;
    if l0 < 2 {
        return Err(Error::Invalid(format!("rescaling needs at least 2 input rows, got {l0}")));
    }
    if length < 2 {
        return Err(Error::Invalid(format!("rescaling needs a target length of at least 2, got {length}")));
    }
    let mut out = Vec::with_capacity(length * c);
    for k in 0..length {
        let x = (k * (l0 - 1)) as f64 / (length - 1) as f64;
        let lo = (x.floor() as usize).min(l0 - 1);
        let hi = (lo + 1).min(l0 - 1);
        let frac = x - lo as f64;
        let (a, b) = (features.row(lo), features.row(hi));
        if frac == 0.0 {
            out.extend_from_slice(a);
        } else {
            out.extend(a.iter().zip(b).map(|(&u, &v)| u * (1.0 - frac) + v * frac));
        }
    }
    Tensor::from_vec(&[length, c], out)
}

/// A fixed-length slice of a video.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRecord {
    pub parent: String,
    /// First grid location of the window within the parent sequence.
    pub offset: usize,
    pub spatial: Tensor<f64>,
    pub temporal: Tensor<f64>,
    /// Ground truths in window-local grid units.
    pub gts: Vec<GtInstance>,
    /// Parent length was shorter than the window; rows past it are zero.
    pub padded: bool,
}

/// Distance between consecutive window offsets.
pub fn window_stride(length: usize, overlap: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Invalid(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    if length < 2 {
        return Err(Error::Invalid(format!("window length must be at least 2, got {length}")));
    }
    Ok(((length as f64 * (1.0 - overlap)).round() as usize).max(1))
}

/// Window offsets over a sequence of `total` rows.
pub fn window_offsets(total: usize, length: usize, overlap: f64) -> Result<Vec<usize>> {
    let stride = window_stride(length, overlap)?;
    if total <= length {
        return Ok(vec![0]);
    }
    let mut offsets: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + length <= total).collect();
    if offsets.last().is_none_or(|&o| o + length < total) {
        offsets.push(total - length);
    }
    Ok(offsets)
}

fn slice_rows(features: &Tensor<f64>, offset: usize, length: usize) -> Tensor<f64> {
    let c = features.dim(1);
    let available = features.dim(0).saturating_sub(offset).min(length);
    let mut data = vec![0.0; length * c];
    data[..available * c].copy_from_slice(&features.data()[offset * c..(offset + available) * c]);
    Tensor::from_vec(&[length, c], data).expect("sized above")
}

/// Cuts a video into windows of `length` rows. Ground truths are clipped to
/// each window and kept when at least half of the instance survives.
pub fn sliding_windows(record: &VideoRecord, length: usize, overlap: f64) -> Result<Vec<WindowRecord>> {
    let l0 = record.length();
    let offsets = window_offsets(l0, length, overlap)?;
    let units_per_second = l0 as f64 / record.duration;
    offsets
        .into_iter()
        .map(|offset| {
            let lo = offset as f64;
            let hi = (offset + length) as f64;
            let mut gts = Vec::new();
            for &(s, e) in &record.segments {
                let (s, e) = (s * units_per_second, e * units_per_second);
                let (cs, ce) = (s.max(lo), e.min(hi));
                if ce > cs && ce - cs >= 0.5 * (e - s) {
                    gts.push(GtInstance::new(cs - lo, ce - lo)?);
                }
            }
            Ok(WindowRecord {
                parent: record.id.clone(),
                offset,
                spatial: slice_rows(&record.spatial, offset, length),
                temporal: slice_rows(&record.temporal, offset, length),
                gts,
                padded: l0 < length,
            })
        })
        .collect()
}

/// Synthetic corpus settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub videos: usize,
    pub length: usize,
    pub channels: usize,
    pub actions: usize,
    pub classes: usize,
    pub noise: f64,
    /// Seconds covered by one feature row.
    pub seconds_per_unit: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            videos: 8,
            length: 32,
            channels: 16,
            actions: 2,
            classes: 2,
            noise: 0.1,
            seconds_per_unit: 1.0,
            seed: 0,
        }
    }
}

/// Generated videos and the ids that received fewer actions than requested.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub videos: Vec<VideoRecord>,
    pub short: Vec<String>,
}

/// Non-overlapping integer intervals with at least one free location
/// between neighbours.
fn place_actions(rng: &mut ChaCha8Rng, length: usize, wanted: usize) -> Vec<(usize, usize)> {
    let min_len = 2.max(length / 10);
    let max_len = min_len.max(length / 3);
    let mut placed: Vec<(usize, usize)> = Vec::with_capacity(wanted);
    for _ in 0..200 * wanted.max(1) {
        if placed.len() == wanted {
            break;
        }
        let dur = rng.random_range(min_len..=max_len);
        if dur + 2 > length {
            continue;
        }
        let start = rng.random_range(1..=length - dur - 1);
        let end = start + dur;
        if placed.iter().all(|&(s, e)| end + 1 < s || start > e + 1) {
            placed.push((start, end));
        }
    }
    placed.sort_unstable();
    placed
}

/// Videos whose rows inside a planted action carry a class template plus
/// Gaussian noise and a background template elsewhere. Action `[s, e)` in
/// rows is annotated as `[s, e]` in grid units.
pub fn synth_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    if config.videos == 0 || config.length < 4 || config.channels == 0 || config.classes == 0 {
        return Err(Error::Invalid(format!(
            "synthetic corpus needs videos >= 1, length >= 4, channels >= 1, classes >= 1: {config:?}"
        )));
    }
    if !(config.noise.is_finite() && config.noise >= 0.0 && config.seconds_per_unit > 0.0) {
        return Err(Error::Invalid("noise must be >= 0 and seconds per unit > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.channels;
    let template = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..c).map(|_| StandardNormal.sample(rng)).collect() };
    // [stream][class], with the background last
    let templates: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|_| (0..=config.classes).map(|_| template(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0, config.noise).map_err(|e| Error::Invalid(e.to_string()))?;
    let width = config.videos.to_string().len().max(3);

    let mut videos = Vec::with_capacity(config.videos);
    let mut short = Vec::new();
    for v in 0..config.videos {
        let id = format!("synth_{v:0width$}");
        let actions = place_actions(&mut rng, config.length, config.actions);
        if actions.len() < config.actions {
            short.push(id.clone());
        }
        let mut classes: Vec<usize> = (0..actions.len()).map(|k| k % config.classes).collect();
        classes.shuffle(&mut rng);
        let mut row_class = vec![config.classes; config.length];
        for (&(s, e), &cls) in actions.iter().zip(&classes) {
            row_class[s..e].iter_mut().for_each(|r| *r = cls);
        }
        let stream = |rng: &mut ChaCha8Rng, k: usize| -> Tensor<f64> {
            let mut data = Vec::with_capacity(config.length * c);
            for &cls in &row_class {
                for &t in &templates[k][cls] {
                    let n = if config.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                    data.push(t + n);
                }
            }
            Tensor::from_vec(&[config.length, c], data).expect("sized above")
        };
        let spatial = stream(&mut rng, 0);
        let temporal = stream(&mut rng, 1);
        let spu = config.seconds_per_unit;
        let segments = actions.iter().map(|&(s, e)| (s as f64 * spu, e as f64 * spu)).collect();
        videos.push(VideoRecord::new(id, config.length as f64 * spu, spatial, temporal, segments)?);
    }
    Ok(SynthCorpus { videos, short })
}

fn stream_path(dir: &Path, id: &str, stream: &str, format: FeatureFormat) -> PathBuf {
    dir.join(format!("{id}_{stream}.{}", format.extension()))
}

/// Writes `<id>_spatial.<ext>`, `<id>_temporal.<ext>` under `features_dir`
/// and all annotations to `annotations`.
pub fn write_corpus(videos: &[VideoRecord], features_dir: &Path, annotations: &Path, format: FeatureFormat) -> Result<()> {
    fs::create_dir_all(features_dir).map_err(|e| Error::io(features_dir, e))?;
    let mut records = BTreeMap::new();
    for v in videos {
        write_features(&stream_path(features_dir, &v.id, "spatial", format), &v.spatial, format)?;
        write_features(&stream_path(features_dir, &v.id, "temporal", format), &v.temporal, format)?;
        records.insert(v.id.clone(), v.annotation());
    }
    write_annotations(annotations, &records)
}

fn find_stream(dir: &Path, id: &str, stream: &str) -> Result<PathBuf> {
    [FeatureFormat::Binary, FeatureFormat::Text]
        .into_iter()
        .map(|f| stream_path(dir, id, stream, f))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Annotation {
            id: id.to_string(),
            msg: format!("no {stream} feature file ({id}_{stream}.bin or .txt) in {}", dir.display()),
        })
}

/// Loads every annotated video, in id order.
pub fn load_corpus(features_dir: &Path, annotations: &Path) -> Result<Vec<VideoRecord>> {
    load_annotations(annotations)?
        .into_iter()
        .map(|(id, rec)| {
            let spatial = load_features(&find_stream(features_dir, &id, "spatial")?)?;
            let temporal = load_features(&find_stream(features_dir, &id, "temporal")?)?;
            VideoRecord::new(id, rec.duration, spatial, temporal, rec.segments)
        })
        .collect()
}
