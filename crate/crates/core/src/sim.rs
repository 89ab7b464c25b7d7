//! Shoebox image-source room simulator used to produce labelled multichannel
//! recordings and supervised (GCC-PHAT, delay target) pairs.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dataio::{GroundTruthTrack, Interpolation, MultichannelAudio};
use crate::dsp::{self, DelayLikelihood, FrameSpec, GccFrame, GccPhat};
use crate::error::{Error, Result};
use crate::geometry::{self, MicArray, PhysicalConstants, Point3};

/// Half width, in samples, of the fractional-delay interpolation kernel.
const FRACTIONAL_HALF_WIDTH: isize = 16;

/// Wall absorption, either per surface or derived from a reverberation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Absorption {
    /// Energy absorption per surface: x=0, x=max, y=0, y=max, z=0, z=max.
    Surfaces([f64; 6]),
    /// Uniform absorption chosen by Sabine's formula to reach this RT60.
    Rt60(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub dims: [f64; 3],
    pub absorption: Absorption,
    pub max_order: usize,
}

impl RoomSpec {
    /// Room with fully absorbing walls.
    pub fn anechoic(dims: [f64; 3]) -> Self {
        RoomSpec {
            dims,
            absorption: Absorption::Surfaces([1.0; 6]),
            max_order: 0,
        }
    }

    pub fn with_rt60(dims: [f64; 3], rt60: f64, max_order: usize) -> Self {
        RoomSpec {
            dims,
            absorption: Absorption::Rt60(rt60),
            max_order,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::invalid(format!(
                "room dimensions must be positive: {:?}",
                self.dims
            )));
        }
        self.absorption_coefficients().map(|_| ())
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn surface_area(&self) -> f64 {
        let [x, y, z] = self.dims;
        2.0 * (x * y + x * z + y * z)
    }

    pub fn absorption_coefficients(&self) -> Result<[f64; 6]> {
        let alpha = match &self.absorption {
            Absorption::Surfaces(a) => *a,
            Absorption::Rt60(t) => {
                if !(*t > 0.0) {
                    return Err(Error::invalid(format!("RT60 must be positive, got {t}")));
                }
                let a = 0.161 * self.volume() / (self.surface_area() * t);
                if a > 1.0 {
                    return Err(Error::invalid(format!(
                        "RT60 {t} s is unreachable in a {:?} room (Sabine absorption {a:.3} > 1)",
                        self.dims
                    )));
                }
                [a; 6]
            }
        };
        if alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid(format!(
                "absorption coefficients must lie in [0, 1]: {alpha:?}"
            )));
        }
        Ok(alpha)
    }

    /// Pressure reflection coefficients per surface.
    pub fn reflection_coefficients(&self) -> Result<[f64; 6]> {
        let alpha = self.absorption_coefficients()?;
        Ok(alpha.map(|a| (1.0 - a).sqrt()))
    }

    pub fn contains_strictly(&self, p: &Point3) -> bool {
        let c = p.to_array();
        (0..3).all(|i| c[i] > 0.0 && c[i] < self.dims[i])
    }

    fn check_inside(&self, p: &Point3, what: &str) -> Result<()> {
        if !p.is_finite() || !self.contains_strictly(p) {
            return Err(Error::invalid(format!(
                "{what} {p} is not strictly inside the {:?} room",
                self.dims
            )));
        }
        Ok(())
    }
}

/// One image source as seen from a microphone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageTap {
    pub order: usize,
    pub position: Point3,
    pub distance: f64,
    /// Product of wall reflection coefficients divided by distance.
    pub gain: f64,
}

impl ImageTap {
    pub fn delay(&self, c: f64) -> f64 {
        self.distance / c
    }
}

struct AxisImage {
    coord: f64,
    reflections: usize,
    gain: f64,
}

fn axis_images(src: f64, len: f64, beta_lo: f64, beta_hi: f64, max_order: usize) -> Vec<AxisImage> {
    let bound = max_order as i64;
    let mut out = Vec::new();
    for n in -bound..=bound {
        for q in 0..=1i64 {
            let lo = (n - q).unsigned_abs() as usize;
            let hi = n.unsigned_abs() as usize;
            if lo + hi > max_order {
                continue;
            }
            out.push(AxisImage {
                coord: (1 - 2 * q) as f64 * src + 2.0 * n as f64 * len,
                reflections: lo + hi,
                gain: beta_lo.powi(lo as i32) * beta_hi.powi(hi as i32),
            });
        }
    }
    out.sort_by_key(|a| a.reflections);
    out
}

/// All image sources of `src` up to the room's maximum reflection order,
/// sorted by order then distance.
pub fn image_sources(room: &RoomSpec, src: &Point3, mic: &Point3) -> Result<Vec<ImageTap>> {
    room.validate()?;
    room.check_inside(src, "source")?;
    room.check_inside(mic, "microphone")?;
    let beta = room.reflection_coefficients()?;
    let n = room.max_order;
    let xs = axis_images(src.x, room.dims[0], beta[0], beta[1], n);
    let ys = axis_images(src.y, room.dims[1], beta[2], beta[3], n);
    let zs = axis_images(src.z, room.dims[2], beta[4], beta[5], n);
    let mut taps = Vec::new();
    for ix in &xs {
        for iy in &ys {
            if ix.reflections + iy.reflections > n {
                break;
            }
            for iz in &zs {
                let order = ix.reflections + iy.reflections + iz.reflections;
                if order > n {
                    break;
                }
                let position = Point3::new(ix.coord, iy.coord, iz.coord);
                let distance = position.distance(mic);
                taps.push(ImageTap {
                    order,
                    position,
                    distance,
                    gain: ix.gain * iy.gain * iz.gain / distance,
                });
            }
        }
    }
    taps.sort_by(|a, b| a.order.cmp(&b.order).then(a.distance.total_cmp(&b.distance)));
    Ok(taps)
}

fn fractional_kernel(offset: f64) -> f64 {
    let w = offset / FRACTIONAL_HALF_WIDTH as f64;
    if w.abs() >= 1.0 {
        return 0.0;
    }
    let sinc = if offset.abs() < 1e-12 {
        1.0
    } else {
        (PI * offset).sin() / (PI * offset)
    };
    sinc * 0.5 * (1.0 + (PI * w).cos())
}

/// Render image taps as a sampled impulse response.
pub fn render_taps(taps: &[ImageTap], fs: f64, c: f64) -> Vec<f64> {
    let last = taps.iter().map(|t| t.delay(c) * fs).fold(0.0, f64::max);
    let len = last.ceil() as usize + FRACTIONAL_HALF_WIDTH as usize + 1;
    let mut h = vec![0.0; len];
    for tap in taps {
        let d = tap.delay(c) * fs;
        let base = d.floor() as isize;
        for n in base - FRACTIONAL_HALF_WIDTH + 1..=base + FRACTIONAL_HALF_WIDTH {
            if n < 0 || n as usize >= len {
                continue;
            }
            h[n as usize] += tap.gain * fractional_kernel(n as f64 - d);
        }
    }
    h
}

/// Room impulse response from `src` to `mic` by the image-source method.
pub fn rir(room: &RoomSpec, src: &Point3, mic: &Point3, fs: f64, c: f64) -> Result<Vec<f64>> {
    PhysicalConstants::new(c, fs)?;
    let taps = image_sources(room, src, mic)?;
    Ok(render_taps(&taps, fs, c))
}

/// Linear convolution through the FFT; output length `a.len() + b.len() - 1`.
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let lift = |x: &[f64]| {
        let mut v = vec![Complex64::new(0.0, 0.0); n];
        for (d, s) in v.iter_mut().zip(x) {
            d.re = *s;
        }
        v
    };
    let mut fa = lift(a);
    let mut fb = lift(b);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa[..out_len].iter().map(|z| z.re / n as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Excitation {
    WhiteNoise,
    /// Noise through two formant-like resonators with a syllable-rate envelope.
    SpeechLike,
    /// Samples at the simulation rate, looped when shorter than needed.
    #[serde(skip)]
    Samples(Vec<f64>),
}

impl Excitation {
    pub fn generate(&self, len: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Excitation::WhiteNoise => (0..len).map(|_| StandardNormal.sample(rng)).collect(),
            Excitation::SpeechLike => {
                let mut out = Vec::with_capacity(len);
                let mut res = [Resonator::new(500.0, 0.97, fs), Resonator::new(1500.0, 0.95, fs)];
                let phase: f64 = rng.gen_range(0.0..1.0);
                for i in 0..len {
                    let e: f64 = StandardNormal.sample(rng);
                    let a = res[0].step(e);
                    let y = res[1].step(a + 0.3 * e);
                    let env = (PI * (4.0 * i as f64 / fs + phase)).sin().abs() + 0.05;
                    out.push(y * env);
                }
                let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if peak > 0.0 {
                    out.iter_mut().for_each(|v| *v /= peak);
                }
                out
            }
            Excitation::Samples(s) => {
                if s.is_empty() {
                    return vec![0.0; len];
                }
                (0..len).map(|i| s[i % s.len()]).collect()
            }
        }
    }
}

struct Resonator {
    a1: f64,
    a2: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, radius: f64, fs: f64) -> Self {
        let w = 2.0 * PI * freq / fs;
        Resonator {
            a1: 2.0 * radius * w.cos(),
            a2: -radius * radius,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Source trajectory and excitation.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceScript {
    /// `(time in seconds, position)`; a single entry is a static source.
    pub trajectory: Vec<(f64, Point3)>,
    pub excitation: Excitation,
    /// Sensor noise level; `None` for a noiseless recording.
    pub snr_db: Option<f64>,
}

impl SourceScript {
    pub fn fixed(position: Point3, excitation: Excitation, snr_db: Option<f64>) -> Self {
        SourceScript {
            trajectory: vec![(0.0, position)],
            excitation,
            snr_db,
        }
    }

    fn validate(&self, room: &RoomSpec) -> Result<()> {
        if self.trajectory.is_empty() {
            return Err(Error::invalid("source trajectory is empty"));
        }
        for w in self.trajectory.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::invalid("trajectory timestamps must be strictly increasing"));
            }
        }
        for (_, p) in &self.trajectory {
            room.check_inside(p, "source")?;
        }
        Ok(())
    }

    pub fn track(&self) -> GroundTruthTrack {
        GroundTruthTrack::new(self.trajectory.clone(), Interpolation::Linear).expect("trajectory validated")
    }
}

/// Simulated recording with per-frame source labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub audio: MultichannelAudio,
    /// One row per analysis frame, stamped at the frame centre.
    pub ground_truth: GroundTruthTrack,
}

/// Render `duration` seconds of the scripted source as heard by `array`.
pub fn synthesize(
    room: &RoomSpec,
    array: &MicArray,
    script: &SourceScript,
    duration: f64,
    consts: &PhysicalConstants,
    frames: &FrameSpec,
    seed: u64,
) -> Result<Simulation> {
    room.validate()?;
    for m in array.mics() {
        room.check_inside(m, "microphone")?;
    }
    script.validate(room)?;
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::invalid(format!("duration must be positive, got {duration}")));
    }
    let fs = consts.fs;
    let len = (duration * fs).round() as usize;
    if len == 0 {
        return Err(Error::invalid("duration shorter than one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let track = script.track();

    let static_source = script.trajectory.len() == 1;
    let mut channels = if static_source {
        let pos = script.trajectory[0].1;
        let rirs = array
            .mics()
            .iter()
            .map(|m| rir(room, &pos, m, fs, consts.c))
            .collect::<Result<Vec<_>>>()?;
        let pre = rirs.iter().map(Vec::len).max().unwrap_or(1);
        let source = script.excitation.generate(len + pre, fs, &mut rng);
        rirs.iter()
            .map(|h| convolve(&source, h)[pre..pre + len].to_vec())
            .collect::<Vec<_>>()
    } else {
        render_moving(
            room,
            array,
            &script.excitation,
            &track,
            len,
            consts,
            frames.hop(),
            &mut rng,
        )?
    };

    if let Some(snr) = script.snr_db {
        for ch in channels.iter_mut() {
            let power = ch.iter().map(|v| v * v).sum::<f64>() / ch.len() as f64;
            let std = (power / 10f64.powf(snr / 10.0)).sqrt();
            for v in ch.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += std * n;
            }
        }
    }

    let rows = (0..frames.frame_count(len))
        .map(|i| {
            let t = frames.frame_center_time(i, fs);
            (t, track.query(t).0)
        })
        .collect::<Vec<_>>();
    let ground_truth = GroundTruthTrack::new(rows, Interpolation::Linear)?;
    Ok(Simulation {
        audio: MultichannelAudio::new(channels, fs)?,
        ground_truth,
    })
}

/// Block-wise rendering: one impulse response per hop, blended with
/// periodic Hann crossfades that sum to one.
#[allow(clippy::too_many_arguments)]
fn render_moving(
    room: &RoomSpec,
    array: &MicArray,
    excitation: &Excitation,
    track: &GroundTruthTrack,
    len: usize,
    consts: &PhysicalConstants,
    hop: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let fs = consts.fs;
    let blocks = len / hop + 2;
    let positions: Vec<Point3> = (0..blocks).map(|b| track.query((b * hop) as f64 / fs).0).collect();
    let mut rirs = Vec::with_capacity(blocks);
    for p in &positions {
        rirs.push(
            array
                .mics()
                .iter()
                .map(|m| rir(room, p, m, fs, consts.c))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let pre = rirs.iter().flatten().map(Vec::len).max().unwrap_or(1);
    let source = excitation.generate(len + pre, fs, rng);
    let mut out = vec![vec![0.0; len]; array.len()];
    for b in 0..blocks {
        let center = (b * hop) as isize;
        let start = (center - hop as isize).max(0) as usize;
        let end = ((center + hop as isize) as usize).min(len);
        if start >= end {
            continue;
        }
        // source index of output sample t is t + pre
        let seg = &source[start..end + pre];
        for (ch, h) in rirs[b].iter().enumerate() {
            let y = convolve(seg, h);
            for t in start..end {
                let x = (t as f64 - center as f64) / hop as f64;
                let w = 0.5 * (1.0 + (PI * x).cos());
                out[ch][t] += w * y[t - start + pre];
            }
        }
    }
    Ok(out)
}

/// One supervised example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub input: GccFrame,
    pub target: DelayLikelihood,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    /// Number of pairs to produce.
    pub count: usize,
    pub consts: PhysicalConstants,
    pub frame_len: usize,
    pub lag_count: usize,
    pub sigma: f64,
    /// Sources are drawn uniformly in this box (clipped to the room).
    pub source_region: (Point3, Point3),
    /// Pairs whose true delay exceeds this many samples are skipped.
    pub max_delay_samples: Option<f64>,
    pub excitation: Excitation,
    pub snr_db: Option<f64>,
    pub seed: u64,
}

/// Simulate single frames from random static sources and pair the GCC-PHAT of
/// every microphone pair with its Gaussian delay target.
pub fn make_dataset(room: &RoomSpec, array: &MicArray, cfg: &DatasetConfig) -> Result<Vec<TrainingPair>> {
    room.validate()?;
    for m in array.mics() {
        room.check_inside(m, "microphone")?;
    }
    if cfg.count == 0 {
        return Ok(Vec::new());
    }
    let (lo, hi) = cfg.source_region;
    let pairs = geometry::enumerate_pairs(array);
    let half = (cfg.lag_count / 2) as f64;
    let usable_per_position = pairs.len().max(1);
    let frame_spec = FrameSpec::new(cfg.frame_len, cfg.frame_len, dsp::WindowKind::Blackman)?;
    let window = frame_spec.window();
    // validates lag count against frame length
    GccPhat::new(cfg.frame_len, cfg.lag_count, dsp::DEFAULT_EPS_REL)?;

    let mut out: Vec<TrainingPair> = Vec::with_capacity(cfg.count);
    let mut position_index = 0u64;
    while out.len() < cfg.count {
        let needed = cfg.count - out.len();
        let batch = needed.div_ceil(usable_per_position).max(1) as u64;
        let results: Vec<Result<Vec<TrainingPair>>> = (position_index..position_index + batch)
            .into_par_iter()
            .map_init(
                || GccPhat::new(cfg.frame_len, cfg.lag_count, dsp::DEFAULT_EPS_REL).expect("checked"),
                |gcc, idx| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(idx);
                    let mut pick = |a: f64, b: f64, wall: f64| {
                        let a = a.max(1e-3);
                        let b = b.min(wall - 1e-3);
                        if b > a {
                            rng.gen_range(a..b)
                        } else {
                            a
                        }
                    };
                    let src = Point3::new(
                        pick(lo.x, hi.x, room.dims[0]),
                        pick(lo.y, hi.y, room.dims[1]),
                        pick(lo.z, hi.z, room.dims[2]),
                    );
                    let script = SourceScript::fixed(src, cfg.excitation.clone(), cfg.snr_db);
                    let frame = single_frame(room, array, &script, cfg, &window, &mut rng)?;
                    let spectra = frame.iter().map(|ch| gcc.spectrum(ch)).collect::<Result<Vec<_>>>()?;
                    let mut examples = Vec::new();
                    for &(k, l) in &pairs {
                        let tau = geometry::tdoa_unchecked(&src, &array.mics()[k], &array.mics()[l], cfg.consts.c);
                        let shift = tau * cfg.consts.fs;
                        if shift.abs() >= half || cfg.max_delay_samples.is_some_and(|m| shift.abs() > m) {
                            continue;
                        }
                        examples.push(TrainingPair {
                            input: GccFrame {
                                lags: gcc.correlate(&spectra[k], &spectra[l]),
                                pair: (k, l),
                                frame_index: idx as usize,
                                fs: cfg.consts.fs,
                            },
                            target: dsp::gaussian_target(tau, cfg.consts.fs, cfg.lag_count, cfg.sigma)?,
                        });
                    }
                    Ok(examples)
                },
            )
            .collect();
        let before = out.len();
        for r in results {
            out.extend(r?);
        }
        if out.len() == before {
            return Err(Error::invalid(
                "no microphone pair produces a delay inside the requested range",
            ));
        }
        position_index += batch;
    }
    out.truncate(cfg.count);
    Ok(out)
}

/// One windowed frame per microphone for a static source.
fn single_frame(
    room: &RoomSpec,
    array: &MicArray,
    script: &SourceScript,
    cfg: &DatasetConfig,
    window: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let src = script.trajectory[0].1;
    let fs = cfg.consts.fs;
    let rirs = array
        .mics()
        .iter()
        .map(|m| rir(room, &src, m, fs, cfg.consts.c))
        .collect::<Result<Vec<_>>>()?;
    let pre = rirs.iter().map(Vec::len).max().unwrap_or(1);
    let n = cfg.frame_len;
    let source = script.excitation.generate(n + pre, fs, rng);
    let mut frames: Vec<Vec<f64>> = rirs
        .iter()
        .map(|h| convolve(&source, h)[pre..pre + n].to_vec())
        .collect();
    if let Some(snr) = script.snr_db {
        for ch in frames.iter_mut() {
            let power = ch.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let std = (power / 10f64.powf(snr / 10.0)).sqrt();
            for v in ch.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v += std * e;
            }
        }
    }
    for ch in frames.iter_mut() {
        for (v, w) in ch.iter_mut().zip(window) {
            *v *= w;
        }
    }
    Ok(frames)
}
