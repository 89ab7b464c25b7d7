//! Audio, label, configuration and manifest persistence.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::FrameSpec;
use crate::error::{Error, Result};
use crate::geometry::{Grid3D, MicArray, PhysicalConstants, Point3, DEFAULT_SOUND_SPEED};
use crate::sim::{Absorption, Excitation, RoomSpec};
use crate::srp::LagInterpolation;

/// Time-aligned channels at a common sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelAudio {
    pub channels: Vec<Vec<f64>>,
    pub fs: f64,
}

impl MultichannelAudio {
    pub fn new(channels: Vec<Vec<f64>>, fs: f64) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::invalid("audio needs at least one channel"));
        }
        let n = channels[0].len();
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::invalid("channels differ in length"));
        }
        if !(fs > 0.0) {
            return Err(Error::invalid(format!("sampling rate must be positive, got {fs}")));
        }
        Ok(MultichannelAudio { channels, fs })
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Write `bytes` to `path` through a temporary file in the same directory, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// WAV

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Pcm24,
    Float32,
}

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Encode audio as a canonical RIFF/WAVE byte stream.
pub fn encode_wav(audio: &MultichannelAudio, format: SampleFormat) -> Result<Vec<u8>> {
    let channels = audio.channel_count();
    if channels > u16::MAX as usize {
        return Err(Error::invalid("too many channels for WAV"));
    }
    let fs = audio.fs.round();
    if (fs - audio.fs).abs() > 1e-6 || fs > u32::MAX as f64 {
        return Err(Error::invalid(format!(
            "WAV needs an integer sampling rate, got {}",
            audio.fs
        )));
    }
    let (tag, bytes_per_sample) = match format {
        SampleFormat::Pcm16 => (FORMAT_PCM, 2usize),
        SampleFormat::Pcm24 => (FORMAT_PCM, 3),
        SampleFormat::Float32 => (FORMAT_FLOAT, 4),
    };
    let frames = audio.len();
    let block_align = channels * bytes_per_sample;
    let data_len = frames * block_align;
    if data_len + 36 > u32::MAX as usize {
        return Err(Error::invalid("audio too long for a RIFF container"));
    }

    let mut out = Vec::with_capacity(44 + data_len + 1);
    out.extend_from_slice(b"RIFF");
    let riff_len = 36 + data_len + (data_len & 1);
    out.extend_from_slice(&(riff_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(channels as u16).to_le_bytes());
    out.extend_from_slice(&(fs as u32).to_le_bytes());
    out.extend_from_slice(&((fs as usize * block_align) as u32).to_le_bytes());
    out.extend_from_slice(&(block_align as u16).to_le_bytes());
    out.extend_from_slice(&((bytes_per_sample * 8) as u16).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..frames {
        for ch in &audio.channels {
            let v = ch[i];
            match format {
                SampleFormat::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
                SampleFormat::Pcm24 => {
                    let q = (v * 8388608.0).round().clamp(-8388608.0, 8388607.0) as i32;
                    out.extend_from_slice(&q.to_le_bytes()[..3]);
                }
                SampleFormat::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    if data_len & 1 == 1 {
        out.push(0);
    }
    Ok(out)
}

pub fn write_wav(path: &Path, audio: &MultichannelAudio, format: SampleFormat) -> Result<()> {
    write_atomic(path, &encode_wav(audio, format)?)
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        message: message.into(),
    }
}

fn le_u16(b: &[u8], at: usize) -> Result<u16> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| parse_err(at, "unexpected end of file"))
}

fn le_u32(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| parse_err(at, "unexpected end of file"))
}

struct WavFormat {
    tag: u16,
    channels: usize,
    fs: u32,
    bits: u16,
    block_align: usize,
}

/// Decode a RIFF/WAVE byte stream. Integer PCM (8/16/24/32-bit) and IEEE
/// float (32/64-bit) are supported; samples are scaled to `[-1, 1]`.
pub fn decode_wav(bytes: &[u8]) -> Result<MultichannelAudio> {
    if bytes.get(0..4) != Some(b"RIFF".as_slice()) {
        return Err(parse_err(0, "missing RIFF signature"));
    }
    le_u32(bytes, 4)?;
    if bytes.get(8..12) != Some(b"WAVE".as_slice()) {
        return Err(parse_err(8, "missing WAVE form type"));
    }
    let mut pos = 12;
    let mut format: Option<WavFormat> = None;
    loop {
        if pos + 8 > bytes.len() {
            return Err(parse_err(pos, "no data chunk before end of file"));
        }
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4)? as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(parse_err(pos + 4, format!("fmt chunk of {size} bytes is too small")));
                }
                if body + size > bytes.len() {
                    return Err(parse_err(body, "fmt chunk runs past end of file"));
                }
                let mut tag = le_u16(bytes, body)?;
                let channels = le_u16(bytes, body + 2)? as usize;
                let fs = le_u32(bytes, body + 4)?;
                let block_align = le_u16(bytes, body + 12)? as usize;
                let bits = le_u16(bytes, body + 14)?;
                if tag == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err(parse_err(body, "extensible fmt chunk shorter than 40 bytes"));
                    }
                    tag = le_u16(bytes, body + 24)?;
                }
                if channels == 0 {
                    return Err(parse_err(body + 2, "zero channels"));
                }
                if fs == 0 {
                    return Err(parse_err(body + 4, "zero sampling rate"));
                }
                let supported = matches!((tag, bits), (FORMAT_PCM, 8 | 16 | 24 | 32) | (FORMAT_FLOAT, 32 | 64));
                if !supported {
                    return Err(Error::UnsupportedFormat(format!(
                        "format tag {tag:#06x} with {bits} bits per sample"
                    )));
                }
                if block_align != channels * bits as usize / 8 {
                    return Err(parse_err(
                        body + 12,
                        format!("block align {block_align} inconsistent with format"),
                    ));
                }
                format = Some(WavFormat {
                    tag,
                    channels,
                    fs,
                    bits,
                    block_align,
                });
            }
            b"data" => {
                let fmt = format.ok_or_else(|| parse_err(pos, "data chunk before fmt chunk"))?;
                if body + size > bytes.len() {
                    return Err(parse_err(
                        bytes.len(),
                        format!("data chunk declares {size} bytes, only {} present", bytes.len() - body),
                    ));
                }
                if !size.is_multiple_of(fmt.block_align) {
                    return Err(parse_err(pos + 4, "data size is not a whole number of frames"));
                }
                return Ok(decode_samples(&bytes[body..body + size], &fmt));
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
}

fn decode_samples(data: &[u8], fmt: &WavFormat) -> MultichannelAudio {
    let width = fmt.bits as usize / 8;
    let frames = data.len() / fmt.block_align;
    let mut channels = vec![Vec::with_capacity(frames); fmt.channels];
    for (i, chunk) in data.chunks_exact(width).enumerate() {
        let v = match (fmt.tag, fmt.bits) {
            (FORMAT_PCM, 8) => (chunk[0] as f64 - 128.0) / 128.0,
            (FORMAT_PCM, 16) => i16::from_le_bytes([chunk[0], chunk[1]]) as f64 / 32768.0,
            (FORMAT_PCM, 24) => {
                let raw = i32::from_le_bytes([0, chunk[0], chunk[1], chunk[2]]) >> 8;
                raw as f64 / 8388608.0
            }
            (FORMAT_PCM, 32) => i32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64 / 2147483648.0,
            (FORMAT_FLOAT, 32) => f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64,
            (FORMAT_FLOAT, 64) => f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")),
            _ => unreachable!("format checked while parsing"),
        };
        channels[i % fmt.channels].push(v);
    }
    MultichannelAudio {
        channels,
        fs: fmt.fs as f64,
    }
}

pub fn read_wav(path: &Path) -> Result<MultichannelAudio> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

// ---------------------------------------------------------------------------
// Ground truth

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Hold,
    Linear,
}

/// Time-stamped source positions.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthTrack {
    rows: Vec<(f64, Point3)>,
    mode: Interpolation,
}

#[derive(Debug, Serialize, Deserialize)]
struct GroundTruthRow {
    time_s: f64,
    x_m: f64,
    y_m: f64,
    z_m: f64,
}

impl GroundTruthTrack {
    pub fn new(rows: Vec<(f64, Point3)>, mode: Interpolation) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Validation("ground truth has no rows".into()));
        }
        for (i, (t, p)) in rows.iter().enumerate() {
            if !t.is_finite() || !p.is_finite() {
                return Err(Error::Validation(format!("ground truth row {i} is not finite")));
            }
        }
        if let Some(i) = rows.windows(2).position(|w| w[1].0 < w[0].0) {
            return Err(Error::Validation(format!(
                "ground truth times decrease at row {} ({} after {})",
                i + 1,
                rows[i + 1].0,
                rows[i].0
            )));
        }
        Ok(GroundTruthTrack { rows, mode })
    }

    pub fn rows(&self) -> &[(f64, Point3)] {
        &self.rows
    }

    pub fn mode(&self) -> Interpolation {
        self.mode
    }

    /// Position at time `t` and whether `t` fell outside the labelled span
    /// (the position is then clamped to the nearest end).
    pub fn query(&self, t: f64) -> (Point3, bool) {
        let first = self.rows[0];
        let last = *self.rows.last().expect("non-empty");
        if t < first.0 {
            return (first.1, true);
        }
        if t > last.0 {
            return (last.1, true);
        }
        // first row strictly after t
        let after = self.rows.partition_point(|r| r.0 <= t);
        if after == self.rows.len() {
            return (last.1, false);
        }
        let (t0, p0) = self.rows[after - 1];
        let (t1, p1) = self.rows[after];
        match self.mode {
            Interpolation::Hold => (p0, false),
            Interpolation::Linear => {
                let span = t1 - t0;
                if span <= 0.0 {
                    return (p1, false);
                }
                let a = (t - t0) / span;
                let lerp = |u: f64, v: f64| u + a * (v - u);
                (Point3::new(lerp(p0.x, p1.x), lerp(p0.y, p1.y), lerp(p0.z, p1.z)), false)
            }
        }
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (t, p) in &self.rows {
            w.serialize(GroundTruthRow {
                time_s: *t,
                x_m: p.x,
                y_m: p.y,
                z_m: p.z,
            })
            .map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn from_csv(bytes: &[u8], mode: Interpolation) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let headers = r.headers().map_err(csv_err)?.clone();
        let expected = ["time_s", "x_m", "y_m", "z_m"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Validation(format!(
                "ground truth header must be time_s,x_m,y_m,z_m, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for rec in r.deserialize::<GroundTruthRow>() {
            let row = rec.map_err(csv_err)?;
            rows.push((row.time_s, Point3::new(row.x_m, row.y_m, row.z_m)));
        }
        GroundTruthTrack::new(rows, mode)
    }
}

fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    Error::Parse {
        offset,
        message: e.to_string(),
    }
}

pub fn read_ground_truth(path: &Path, mode: Interpolation) -> Result<GroundTruthTrack> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    GroundTruthTrack::from_csv(&bytes, mode)
}

pub fn write_ground_truth(path: &Path, track: &GroundTruthTrack) -> Result<()> {
    write_atomic(path, &track.to_csv()?)
}

// ---------------------------------------------------------------------------
// Per-frame results

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame_index: usize,
    pub t: f64,
    pub est_x: f64,
    pub est_y: f64,
    pub est_z: f64,
    pub gt_x: f64,
    pub gt_y: f64,
    pub gt_z: f64,
    pub error_m: f64,
}

impl FrameResult {
    pub fn new(frame_index: usize, t: f64, est: Point3, gt: Point3) -> Self {
        FrameResult {
            frame_index,
            t,
            est_x: est.x,
            est_y: est.y,
            est_z: est.z,
            gt_x: gt.x,
            gt_y: gt.y,
            gt_z: gt.z,
            error_m: est.distance(&gt),
        }
    }

    pub fn estimate(&self) -> Point3 {
        Point3::new(self.est_x, self.est_y, self.est_z)
    }

    pub fn ground_truth(&self) -> Point3 {
        Point3::new(self.gt_x, self.gt_y, self.gt_z)
    }
}

pub fn results_to_csv(rows: &[FrameResult]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record([
            "frame_index",
            "t",
            "est_x",
            "est_y",
            "est_z",
            "gt_x",
            "gt_y",
            "gt_z",
            "error_m",
        ])
        .map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::invalid(e.to_string()))
}

pub fn results_from_csv(bytes: &[u8]) -> Result<Vec<FrameResult>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

pub fn read_results(path: &Path) -> Result<Vec<FrameResult>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    results_from_csv(&bytes)
}

// ---------------------------------------------------------------------------
// Manifests and partitioning

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub name: String,
    pub audio: PathBuf,
    pub ground_truth: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// List of recorded (or simulated) sequences. Relative paths resolve against
/// the manifest's directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub sequences: Vec<SequenceEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for s in m.sequences.iter_mut() {
            if s.audio.is_relative() {
                s.audio = base.join(&s.audio);
            }
            if s.ground_truth.is_relative() {
                s.ground_truth = base.join(&s.ground_truth);
            }
        }
        m.check_unique()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml()?.as_bytes())
    }

    fn check_unique(&self) -> Result<()> {
        let mut names: Vec<&str> = self.sequences.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Validation(format!("sequence {} listed twice", w[0])));
        }
        Ok(())
    }

    pub fn split(&self, which: Split) -> Vec<&SequenceEntry> {
        self.sequences.iter().filter(|s| s.split == Some(which)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitSpec {
    /// Shuffled sequence-level split by fractions (train share is the rest).
    Fractions { val: f64, test: f64 },
    /// Named sequences for test and validation; everything else trains.
    Explicit { test: Vec<String>, val: Vec<String> },
}

/// Assign every sequence of `manifest` to exactly one split.
pub fn partition(manifest: &Manifest, spec: &SplitSpec, seed: u64) -> Result<Manifest> {
    manifest.check_unique()?;
    let n = manifest.sequences.len();
    let mut out = manifest.clone();
    match spec {
        SplitSpec::Fractions { val, test } => {
            if !(*val >= 0.0 && *test >= 0.0 && val + test <= 1.0) {
                return Err(Error::Validation(format!(
                    "split fractions val {val} + test {test} must lie in [0, 1]"
                )));
            }
            let n_test = (n as f64 * test).round() as usize;
            let n_val = ((n as f64 * val).round() as usize).min(n - n_test);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            for (rank, &i) in order.iter().enumerate() {
                out.sequences[i].split = Some(if rank < n_test {
                    Split::Test
                } else if rank < n_test + n_val {
                    Split::Val
                } else {
                    Split::Train
                });
            }
        }
        SplitSpec::Explicit { test, val } => {
            if let Some(dup) = test.iter().find(|t| val.contains(t)) {
                return Err(Error::Validation(format!(
                    "sequence {dup} assigned to both test and val"
                )));
            }
            for name in test.iter().chain(val) {
                if !manifest.sequences.iter().any(|s| &s.name == name) {
                    return Err(Error::Validation(format!("unknown sequence {name} in split")));
                }
            }
            for s in out.sequences.iter_mut() {
                s.split = Some(if test.contains(&s.name) {
                    Split::Test
                } else if val.contains(&s.name) {
                    Split::Val
                } else {
                    Split::Train
                });
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Experiment configuration

fn default_fs() -> f64 {
    96000.0
}
fn default_c() -> f64 {
    DEFAULT_SOUND_SPEED
}
fn default_frame_ms() -> f64 {
    166.0
}
fn default_overlap() -> f64 {
    0.5
}
fn default_lag_count() -> usize {
    crate::dsp::DEFAULT_LAG_COUNT
}
fn default_sigma() -> f64 {
    crate::dsp::DEFAULT_SIGMA
}
fn default_resolution() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EngineKind {
    #[default]
    #[serde(rename = "gcc-phat")]
    GccPhat,
    #[serde(rename = "deepgcc")]
    DeepGcc,
}

impl std::str::FromStr for EngineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcc-phat" => Ok(EngineKind::GccPhat),
            "deepgcc" => Ok(EngineKind::DeepGcc),
            other => Err(Error::Config(format!(
                "unknown engine {other:?} (expected gcc-phat or deepgcc)"
            ))),
        }
    }
}

impl std::fmt::Display for EngineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EngineKind::GccPhat => "gcc-phat",
            EngineKind::DeepGcc => "deepgcc",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomConfig {
    /// Room extent along x, y, z in meters.
    pub dims: [f64; 3],
    /// Target reverberation time; ignored when `absorption` is given.
    #[serde(default)]
    pub rt60: Option<f64>,
    /// Per-surface absorption (x0, x1, y0, y1, z0, z1).
    #[serde(default)]
    pub absorption: Option<[f64; 6]>,
    #[serde(default)]
    pub max_order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircleConfig {
    pub center: [f64; 3],
    pub radius: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayConfig {
    /// Explicit microphone coordinates in meters.
    #[serde(default)]
    pub mics: Option<Vec<[f64; 3]>>,
    /// Evenly spaced horizontal circle; used when `mics` is absent.
    #[serde(default)]
    pub circle: Option<CircleConfig>,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub min: [f64; 3],
    pub max: [f64; 3],
    #[serde(default = "default_resolution")]
    pub resolution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// Seconds per sequence.
    pub duration: f64,
    #[serde(default = "one")]
    pub sequences: usize,
    #[serde(default = "default_excitation")]
    pub excitation: Excitation,
    #[serde(default)]
    pub snr_db: Option<f64>,
    /// Box from which source positions are drawn.
    pub source_min: [f64; 3],
    pub source_max: [f64; 3],
    /// Straight-line motion between two random points when set.
    #[serde(default)]
    pub moving: bool,
}

fn one() -> usize {
    1
}
fn default_excitation() -> Excitation {
    Excitation::WhiteNoise
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    /// Keep every n-th frame of each sequence when building examples.
    #[serde(default = "one")]
    pub frame_stride: usize,
}

fn default_batch() -> usize {
    100
}
fn default_patience() -> usize {
    50
}
fn default_max_epochs() -> usize {
    1000
}
fn default_lr() -> f64 {
    1e-4
}
fn default_decay() -> f64 {
    1e-8
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: default_batch(),
            patience: default_patience(),
            max_epochs: default_max_epochs(),
            learning_rate: default_lr(),
            lr_decay: default_decay(),
            frame_stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

/// Experiment description. Every value carries a unit in its name or doc;
/// [`ExperimentConfig::validate`] checks all downstream invariants up front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Sampling rate in Hz.
    #[serde(default = "default_fs")]
    pub fs: f64,
    /// Speed of sound in m/s.
    #[serde(default = "default_c")]
    pub sound_speed: f64,
    #[serde(default = "default_frame_ms")]
    pub frame_ms: f64,
    /// Fraction of a frame shared with the next one.
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    /// Lags kept from each correlation (network input length).
    #[serde(default = "default_lag_count")]
    pub lag_count: usize,
    /// Target standard deviation in samples.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub engine: EngineKind,
    #[serde(default)]
    pub interpolation: LagInterpolation,
    pub room: RoomConfig,
    pub array: ArrayConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Check every invariant the pipeline relies on.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        self.consts()?;
        if self.lag_count == 0 || !self.lag_count.is_multiple_of(16) {
            return cfg_err(format!(
                "lag_count must be a positive multiple of 16, got {}",
                self.lag_count
            ));
        }
        if !(self.sigma > 0.0) {
            return cfg_err(format!("sigma must be positive, got {}", self.sigma));
        }
        let frames = self.frame_spec()?;
        if self.lag_count > frames.frame_len() {
            return cfg_err(format!(
                "lag_count {} exceeds the {}-sample frame",
                self.lag_count,
                frames.frame_len()
            ));
        }
        let room = self.room()?;
        let array = self.array()?;
        for (i, m) in array.mics().iter().enumerate() {
            if !room.contains_strictly(m) {
                return cfg_err(format!("microphone {i} at {m} lies outside the room"));
            }
        }
        self.grid()?;
        let t = &self.training;
        if t.batch_size == 0 || t.patience == 0 || t.max_epochs == 0 || t.frame_stride == 0 {
            return cfg_err("training batch_size, patience, max_epochs and frame_stride must be >= 1".into());
        }
        if !(t.learning_rate > 0.0 && t.lr_decay >= 0.0) {
            return cfg_err("learning_rate must be positive and lr_decay non-negative".into());
        }
        if let Some(sim) = &self.simulation {
            if !(sim.duration > 0.0) {
                return cfg_err(format!("simulation duration must be positive, got {}", sim.duration));
            }
            if sim.sequences == 0 {
                return cfg_err("simulation needs at least one sequence".into());
            }
            for axis in 0..3 {
                if sim.source_max[axis] < sim.source_min[axis] {
                    return cfg_err("simulation source_max below source_min".into());
                }
            }
        }
        Ok(())
    }

    pub fn consts(&self) -> Result<PhysicalConstants> {
        PhysicalConstants::new(self.sound_speed, self.fs).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn frame_spec(&self) -> Result<FrameSpec> {
        FrameSpec::from_duration(self.fs, self.frame_ms / 1000.0, self.overlap)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn room(&self) -> Result<RoomSpec> {
        let absorption = match (&self.room.absorption, self.room.rt60) {
            (Some(a), _) => Absorption::Surfaces(*a),
            (None, Some(t)) => Absorption::Rt60(t),
            (None, None) => Absorption::Surfaces([1.0; 6]),
        };
        let room = RoomSpec {
            dims: self.room.dims,
            absorption,
            max_order: self.room.max_order,
        };
        room.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(room)
    }

    pub fn array(&self) -> Result<MicArray> {
        let a = &self.array;
        let array = match (&a.mics, &a.circle) {
            (Some(m), _) => MicArray::new(m.iter().map(|p| Point3::from_array(*p)).collect()),
            (None, Some(c)) => MicArray::circular(Point3::from_array(c.center), c.radius, c.count),
            (None, None) => return Err(Error::Config("array needs `mics` or `circle`".into())),
        }
        .map_err(|e| Error::Config(e.to_string()))?;
        match &a.labels {
            Some(l) => array.with_labels(l.clone()).map_err(|e| Error::Config(e.to_string())),
            None => Ok(array),
        }
    }

    pub fn grid(&self) -> Result<Grid3D> {
        Grid3D::new(
            Point3::from_array(self.grid.min),
            Point3::from_array(self.grid.max),
            self.grid.resolution,
        )
        .map_err(|e| Error::Config(e.to_string()))
    }
}
