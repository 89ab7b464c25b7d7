//! Framing, GCC-PHAT, Gaussian delay targets and sample-rate conversion.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Default analysis frame duration in seconds.
pub const DEFAULT_FRAME_SECONDS: f64 = 0.166;
/// Default number of lags kept from each correlation.
pub const DEFAULT_LAG_COUNT: usize = 400;
/// Default standard deviation of the delay target, in samples.
pub const DEFAULT_SIGMA: f64 = 5.0;
/// Relative magnitude floor applied before phase normalisation.
pub const DEFAULT_EPS_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Blackman,
    Rectangular,
}

/// Symmetric Blackman taper of length `n`, clamped to `[0, 1]`.
pub fn blackman(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let denom = (n - 1) as f64;
    let mut w: Vec<f64> = (0..n)
        .map(|i| {
            let x = i as f64 / denom;
            (0.42 - 0.5 * (2.0 * PI * x).cos() + 0.08 * (4.0 * PI * x).cos()).clamp(0.0, 1.0)
        })
        .collect();
    // force exact symmetry; the cosine terms differ in the last ulp otherwise
    for i in 0..n / 2 {
        w[n - 1 - i] = w[i];
    }
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSpec {
    frame_len: usize,
    hop: usize,
    window: WindowKind,
}

impl FrameSpec {
    pub fn new(frame_len: usize, hop: usize, window: WindowKind) -> Result<Self> {
        if frame_len == 0 || hop == 0 || hop > frame_len {
            return Err(Error::invalid(format!(
                "frame spec needs 0 < hop <= frame length, got hop {hop}, frame {frame_len}"
            )));
        }
        Ok(FrameSpec { frame_len, hop, window })
    }

    /// Blackman frames of `seconds` duration at `fs`, rounded down to an even
    /// sample count, overlapping by `overlap` (a fraction in `[0, 1)`).
    pub fn from_duration(fs: f64, seconds: f64, overlap: f64) -> Result<Self> {
        if !(fs > 0.0 && seconds > 0.0) {
            return Err(Error::invalid("frame duration and sampling rate must be positive"));
        }
        if !(0.0..1.0).contains(&overlap) {
            return Err(Error::invalid(format!("overlap must lie in [0, 1), got {overlap}")));
        }
        let raw = (fs * seconds + 1e-9).floor() as usize;
        let frame_len = raw - raw % 2;
        let hop = ((frame_len as f64) * (1.0 - overlap)).round().max(1.0) as usize;
        Self::new(frame_len, hop, WindowKind::Blackman)
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window_kind(&self) -> WindowKind {
        self.window
    }

    pub fn window(&self) -> Vec<f64> {
        match self.window {
            WindowKind::Blackman => blackman(self.frame_len),
            WindowKind::Rectangular => vec![1.0; self.frame_len],
        }
    }

    /// Number of whole frames in a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.hop + 1
        }
    }

    /// Time in seconds of the centre of frame `index`.
    pub fn frame_center_time(&self, index: usize, fs: f64) -> f64 {
        (index * self.hop) as f64 / fs + self.frame_len as f64 / (2.0 * fs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    pub frames: Vec<Vec<f64>>,
    /// Set when the signal was shorter than one frame.
    pub too_short: bool,
}

/// Cut `signal` into windowed frames; a trailing partial frame is dropped.
pub fn extract_frames(signal: &[f64], spec: &FrameSpec) -> Frames {
    let count = spec.frame_count(signal.len());
    if count == 0 {
        log::warn!(
            "signal of {} samples is shorter than one {}-sample frame",
            signal.len(),
            spec.frame_len
        );
        return Frames {
            frames: Vec::new(),
            too_short: true,
        };
    }
    let window = spec.window();
    let frames = (0..count)
        .map(|i| {
            let start = i * spec.hop;
            signal[start..start + spec.frame_len]
                .iter()
                .zip(&window)
                .map(|(s, w)| s * w)
                .collect()
        })
        .collect();
    Frames {
        frames,
        too_short: false,
    }
}

/// Cropped GCC-PHAT lag vector. Index `i` holds lag `i - L/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct GccFrame {
    pub lags: Vec<f64>,
    pub pair: (usize, usize),
    pub frame_index: usize,
    pub fs: f64,
}

impl GccFrame {
    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }

    /// Lag (in samples) of the largest value; ties go to the lowest index.
    pub fn peak_lag(&self) -> isize {
        argmax(&self.lags) as isize - (self.lags.len() / 2) as isize
    }
}

/// Delay likelihood over lags; same indexing as [`GccFrame`].
#[derive(Debug, Clone, PartialEq)]
pub struct DelayLikelihood {
    pub values: Vec<f64>,
    pub fs: f64,
}

impl DelayLikelihood {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn peak_lag(&self) -> isize {
        argmax(&self.values) as isize - (self.values.len() / 2) as isize
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_lag_count(lag_count: usize, frame_len: usize) -> Result<()> {
    if lag_count == 0 || !lag_count.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "lag count must be even and positive, got {lag_count}"
        )));
    }
    if lag_count > frame_len {
        return Err(Error::invalid(format!(
            "lag count {lag_count} exceeds frame length {frame_len}"
        )));
    }
    Ok(())
}

/// GCC-PHAT calculator for a fixed frame length. Holds the FFT plans, so a
/// worker should own its own instance.
pub struct GccPhat {
    frame_len: usize,
    lag_count: usize,
    eps_rel: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for GccPhat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GccPhat")
            .field("frame_len", &self.frame_len)
            .field("lag_count", &self.lag_count)
            .field("eps_rel", &self.eps_rel)
            .finish()
    }
}

/// Spectrum of one frame, with the magnitude floor already resolved.
#[derive(Debug, Clone)]
pub struct Spectrum {
    bins: Vec<Complex64>,
    floor: f64,
}

impl GccPhat {
    pub fn new(frame_len: usize, lag_count: usize, eps_rel: f64) -> Result<Self> {
        check_lag_count(lag_count, frame_len)?;
        if !(eps_rel >= 0.0) {
            return Err(Error::invalid("magnitude floor must be non-negative"));
        }
        let mut planner = FftPlanner::new();
        Ok(GccPhat {
            frame_len,
            lag_count,
            eps_rel,
            forward: planner.plan_fft_forward(frame_len),
            inverse: planner.plan_fft_inverse(frame_len),
        })
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn lag_count(&self) -> usize {
        self.lag_count
    }

    pub fn spectrum(&self, frame: &[f64]) -> Result<Spectrum> {
        if frame.len() != self.frame_len {
            return Err(Error::invalid(format!(
                "frame has {} samples, expected {}",
                frame.len(),
                self.frame_len
            )));
        }
        let mut bins: Vec<Complex64> = frame.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.forward.process(&mut bins);
        let peak = bins.iter().map(|b| b.norm()).fold(0.0, f64::max);
        let floor = (self.eps_rel * peak).max(f64::MIN_POSITIVE);
        Ok(Spectrum { bins, floor })
    }

    /// Phase-transformed cross-correlation of two spectra, cropped to
    /// `lag_count` lags centred on zero.
    pub fn correlate(&self, xk: &Spectrum, xl: &Spectrum) -> Vec<f64> {
        let mut cross: Vec<Complex64> = xk
            .bins
            .iter()
            .zip(&xl.bins)
            .map(|(a, b)| (a / a.norm().max(xk.floor)) * (b / b.norm().max(xl.floor)).conj())
            .collect();
        self.inverse.process(&mut cross);
        let n = self.frame_len as f64;
        let half = self.lag_count / 2;
        (0..self.lag_count)
            .map(|i| {
                let lag = i as isize - half as isize;
                let idx = lag.rem_euclid(self.frame_len as isize) as usize;
                cross[idx].re / n
            })
            .collect()
    }

    pub fn gcc(&self, xk: &[f64], xl: &[f64]) -> Result<Vec<f64>> {
        if xk.len() != xl.len() {
            return Err(Error::invalid(format!(
                "frame lengths differ: {} vs {}",
                xk.len(),
                xl.len()
            )));
        }
        Ok(self.correlate(&self.spectrum(xk)?, &self.spectrum(xl)?))
    }
}

/// GCC-PHAT between two equal-length frames, cropped to lags
/// `[-L/2, L/2 - 1]` with lag zero at index `L/2`. A positive peak lag means
/// `xl` leads `xk`.
pub fn gcc_phat(xk: &[f64], xl: &[f64], lag_count: usize, eps_rel: f64) -> Result<GccFrame> {
    if xk.len() != xl.len() {
        return Err(Error::invalid(format!(
            "frame lengths differ: {} vs {}",
            xk.len(),
            xl.len()
        )));
    }
    let engine = GccPhat::new(xk.len(), lag_count, eps_rel)?;
    Ok(GccFrame {
        lags: engine.gcc(xk, xl)?,
        pair: (0, 1),
        frame_index: 0,
        fs: 0.0,
    })
}

/// Gaussian delay likelihood centred on `delay * fs` samples.
pub fn gaussian_target(delay: f64, fs: f64, lag_count: usize, sigma: f64) -> Result<DelayLikelihood> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if lag_count == 0 || !lag_count.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "lag count must be even and positive, got {lag_count}"
        )));
    }
    let center = delay * fs;
    let half = (lag_count / 2) as f64;
    if !center.is_finite() || center.abs() >= half {
        return Err(Error::OutOfRange(format!(
            "delay of {center} samples outside lag range ±{half}"
        )));
    }
    let denom = 2.0 * sigma * sigma;
    let values = (0..lag_count)
        .map(|i| {
            let d = i as f64 - half - center;
            (-(d * d) / denom).exp()
        })
        .collect();
    Ok(DelayLikelihood { values, fs })
}

/// Zero crossings of the interpolation kernel on each side.
const RESAMPLE_HALF_TAPS: usize = 32;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Windowed-sinc polyphase sample-rate conversion.
pub fn resample(signal: &[f64], from_fs: f64, to_fs: f64) -> Result<Vec<f64>> {
    if !(from_fs > 0.0 && to_fs > 0.0 && from_fs.is_finite() && to_fs.is_finite()) {
        return Err(Error::invalid("sampling rates must be positive"));
    }
    if from_fs == to_fs {
        return Ok(signal.to_vec());
    }
    // rational ratio on a millihertz lattice
    let from = (from_fs * 1000.0).round() as u64;
    let to = (to_fs * 1000.0).round() as u64;
    let g = gcd(from, to);
    let up = (to / g) as usize;
    let down = (from / g) as usize;
    if up > 1 << 16 {
        return Err(Error::invalid(format!(
            "resampling ratio {to_fs}/{from_fs} too irregular for a polyphase bank"
        )));
    }

    let out_len = (signal.len() as f64 * to_fs / from_fs).round() as usize;
    let cutoff = (to_fs / from_fs).min(1.0);
    let half_width = (RESAMPLE_HALF_TAPS as f64 / cutoff).ceil() as isize;
    let taps = 2 * half_width as usize;

    // bank[p][j] weights input sample base + j - half_width + 1 for phase p/up
    let bank: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            let mut row: Vec<f64> = (0..taps)
                .map(|j| {
                    let t = frac - (j as isize - half_width + 1) as f64;
                    let x = t * cutoff;
                    let sinc = if x.abs() < 1e-12 {
                        1.0
                    } else {
                        (PI * x).sin() / (PI * x)
                    };
                    let w = t / half_width as f64;
                    let window = if w.abs() >= 1.0 {
                        0.0
                    } else {
                        0.42 + 0.5 * (PI * w).cos() + 0.08 * (2.0 * PI * w).cos()
                    };
                    cutoff * sinc * window
                })
                .collect();
            // unit DC gain per phase
            let gain: f64 = row.iter().sum();
            if gain.abs() > 0.0 {
                row.iter_mut().for_each(|v| *v /= gain);
            }
            row
        })
        .collect();

    let n = signal.len() as isize;
    let out = (0..out_len)
        .map(|j| {
            let pos = j * down;
            let base = (pos / up) as isize;
            let row = &bank[pos % up];
            let mut acc = 0.0;
            for (t, w) in row.iter().enumerate() {
                let idx = base + t as isize - half_width + 1;
                if idx >= 0 && idx < n {
                    acc += w * signal[idx as usize];
                }
            }
            acc
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn circ_shift(x: &[f64], shift: isize) -> Vec<f64> {
        let n = x.len() as isize;
        (0..n).map(|i| x[(i + shift).rem_euclid(n) as usize]).collect()
    }

    #[test]
    fn blackman_is_symmetric_and_bounded() {
        for n in [2, 3, 64, 401, 15936] {
            let w = blackman(n);
            assert_eq!(w.len(), n);
            for i in 0..n {
                assert_eq!(w[i], w[n - 1 - i]);
                assert!((0.0..=1.0).contains(&w[i]));
            }
        }
    }

    #[test]
    fn frames_of_ones_are_the_taper() {
        let spec = FrameSpec::new(64, 32, WindowKind::Blackman).unwrap();
        let frames = extract_frames(&[1.0; 256], &spec);
        assert!(!frames.too_short);
        assert_eq!(frames.frames.len(), 7);
        for f in &frames.frames {
            assert_eq!(f, &blackman(64));
        }
    }

    #[test]
    fn frame_count_two_frames_long() {
        let spec = FrameSpec::new(100, 50, WindowKind::Blackman).unwrap();
        assert_eq!(extract_frames(&vec![0.5; 200], &spec).frames.len(), 3);
        let short = extract_frames(&[0.5; 99], &spec);
        assert!(short.too_short);
        assert!(short.frames.is_empty());
    }

    #[test]
    fn frame_positions() {
        let signal: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let spec = FrameSpec::new(10, 5, WindowKind::Rectangular).unwrap();
        let frames = extract_frames(&signal, &spec);
        assert_eq!(frames.frames.len(), 7);
        assert_eq!(frames.frames[2][0], 10.0);
        assert_eq!(frames.frames[6][9], 39.0);
    }

    #[test]
    fn default_frame_at_96k() {
        let spec = FrameSpec::from_duration(96000.0, DEFAULT_FRAME_SECONDS, 0.5).unwrap();
        assert_eq!(spec.frame_len(), 15936);
        assert_eq!(spec.hop(), 7968);
        // odd raw lengths round down to even
        let spec = FrameSpec::from_duration(16000.0, 0.0001875, 0.5).unwrap();
        assert_eq!(spec.frame_len(), 2);
    }

    #[test]
    fn frame_spec_rejects_bad_hop() {
        assert!(FrameSpec::new(10, 0, WindowKind::Blackman).is_err());
        assert!(FrameSpec::new(10, 11, WindowKind::Blackman).is_err());
        assert!(FrameSpec::from_duration(96000.0, 0.166, 1.0).is_err());
    }

    #[test]
    fn self_correlation_is_a_delta() {
        let x = noise(1024, 1);
        let g = gcc_phat(&x, &x, 400, DEFAULT_EPS_REL).unwrap();
        assert_eq!(g.lags.len(), 400);
        assert_relative_eq!(g.lags[200], 1.0, epsilon = 1e-12);
        for (i, v) in g.lags.iter().enumerate() {
            if i != 200 {
                assert!(v.abs() <= 1e-6, "lag {i}: {v}");
            }
        }
    }

    #[test]
    fn circular_shift_recovered() {
        let x = noise(2048, 2);
        let y = circ_shift(&x, 10);
        let g = gcc_phat(&x, &y, 400, DEFAULT_EPS_REL).unwrap();
        assert_eq!(g.peak_lag(), 10);
        let y = circ_shift(&x, -37);
        assert_eq!(gcc_phat(&x, &y, 400, DEFAULT_EPS_REL).unwrap().peak_lag(), -37);
    }

    #[test]
    fn zero_input_gives_zero_lags() {
        let z = vec![0.0; 512];
        let x = noise(512, 3);
        let g = gcc_phat(&z, &x, 64, DEFAULT_EPS_REL).unwrap();
        assert!(g.lags.iter().all(|v| *v == 0.0));
        let g = gcc_phat(&z, &z, 64, DEFAULT_EPS_REL).unwrap();
        assert!(g.lags.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gcc_rejects_mismatch() {
        assert!(matches!(
            gcc_phat(&[0.0; 10], &[0.0; 12], 4, 1e-12),
            Err(Error::InvalidInput(_))
        ));
        assert!(gcc_phat(&[0.0; 10], &[0.0; 10], 3, 1e-12).is_err());
        assert!(gcc_phat(&[0.0; 10], &[0.0; 10], 12, 1e-12).is_err());
    }

    #[test]
    fn gaussian_zero_delay() {
        let t = gaussian_target(0.0, 96000.0, 400, 5.0).unwrap();
        assert_eq!(t.values[200], 1.0);
        for d in 1..200 {
            assert_eq!(t.values[200 - d], t.values[200 + d]);
        }
    }

    #[test]
    fn gaussian_hand_values() {
        let t = gaussian_target(10.0 / 96000.0, 96000.0, 400, 5.0).unwrap();
        assert_relative_eq!(t.values[210], 1.0, epsilon = 1e-9);
        assert_relative_eq!(t.values[215], (-0.5f64).exp(), epsilon = 1e-9);
        assert_relative_eq!(t.values[215], 0.60653, epsilon = 1e-5);

        let t = gaussian_target(10.5 / 96000.0, 96000.0, 400, 5.0).unwrap();
        let expect = (-0.25f64 / 50.0).exp();
        assert_relative_eq!(t.values[210], expect, epsilon = 1e-9);
        assert_relative_eq!(t.values[211], expect, epsilon = 1e-9);
        // offset of half a sample: exp(-0.5^2 / (2 * 5^2))
        assert_relative_eq!(expect, 0.995012, epsilon = 1e-6);
    }

    #[test]
    fn gaussian_out_of_range() {
        assert!(matches!(
            gaussian_target(200.0 / 96000.0, 96000.0, 400, 5.0),
            Err(Error::OutOfRange(_))
        ));
        assert!(gaussian_target(0.0, 96000.0, 400, 0.0).is_err());
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let x = noise(777, 4);
        assert_eq!(resample(&x, 96000.0, 96000.0).unwrap(), x);
    }

    fn tone_amplitude(x: &[f64], freq: f64, fs: f64) -> f64 {
        // single-bin DFT over the interior, away from edge transients
        let skip = x.len() / 10;
        let body = &x[skip..x.len() - skip];
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in body.iter().enumerate() {
            let ph = 2.0 * PI * freq * (i + skip) as f64 / fs;
            re += v * ph.cos();
            im += v * ph.sin();
        }
        2.0 * (re * re + im * im).sqrt() / body.len() as f64
    }

    #[test]
    fn upsampled_tone_keeps_amplitude() {
        let fs_in = 16000.0;
        let x: Vec<f64> = (0..16000)
            .map(|i| (2.0 * PI * 1000.0 * i as f64 / fs_in).sin())
            .collect();
        let y = resample(&x, fs_in, 96000.0).unwrap();
        assert_eq!(y.len(), 96000);
        let amp = tone_amplitude(&y, 1000.0, 96000.0);
        assert!((amp - 1.0).abs() <= 0.01, "amplitude {amp}");
        // spectral peak sits at 1 kHz
        let off = tone_amplitude(&y, 1100.0, 96000.0);
        assert!(off < 0.05 * amp);
    }

    #[test]
    fn downsampled_tone_keeps_amplitude() {
        let x: Vec<f64> = (0..48000)
            .map(|i| (2.0 * PI * 1000.0 * i as f64 / 48000.0).sin())
            .collect();
        let y = resample(&x, 48000.0, 16000.0).unwrap();
        assert_eq!(y.len(), 16000);
        let amp = tone_amplitude(&y, 1000.0, 16000.0);
        assert!((amp - 1.0).abs() <= 0.01, "amplitude {amp}");
    }

    /// Direct O(N^2) DFT, PHAT weighting and inverse DFT.
    fn phat_oracle(xk: &[f64], xl: &[f64], lag_count: usize) -> Vec<f64> {
        let n = xk.len();
        let dft = |x: &[f64]| -> Vec<(f64, f64)> {
            (0..n)
                .map(|f| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (t, v) in x.iter().enumerate() {
                        let ph = -2.0 * PI * (f * t % n) as f64 / n as f64;
                        re += v * ph.cos();
                        im += v * ph.sin();
                    }
                    (re, im)
                })
                .collect()
        };
        let a = dft(xk);
        let b = dft(xl);
        let amax = a.iter().map(|c| c.0.hypot(c.1)).fold(0.0, f64::max) * 1e-12;
        let bmax = b.iter().map(|c| c.0.hypot(c.1)).fold(0.0, f64::max) * 1e-12;
        let cross: Vec<(f64, f64)> = a
            .iter()
            .zip(&b)
            .map(|(p, q)| {
                let re = p.0 * q.0 + p.1 * q.1;
                let im = p.1 * q.0 - p.0 * q.1;
                let d = p.0.hypot(p.1).max(amax) * q.0.hypot(q.1).max(bmax);
                (re / d, im / d)
            })
            .collect();
        (0..lag_count)
            .map(|i| {
                let lag = (i as isize - (lag_count / 2) as isize).rem_euclid(n as isize) as usize;
                let mut acc = 0.0;
                for (f, c) in cross.iter().enumerate() {
                    let ph = 2.0 * PI * (f * lag % n) as f64 / n as f64;
                    acc += c.0 * ph.cos() - c.1 * ph.sin();
                }
                acc / n as f64
            })
            .collect()
    }

    #[test]
    fn matches_direct_oracle_small_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [8usize, 17, 32, 64] {
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lags = if n % 2 == 0 { n } else { n - 1 };
            let fast = gcc_phat(&a, &b, lags, DEFAULT_EPS_REL).unwrap();
            let slow = phat_oracle(&a, &b, lags);
            for (x, y) in fast.lags.iter().zip(&slow) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn phat_is_scale_invariant(seed in 0u64..1000, a in 0.01..100.0f64, b in 0.01..100.0f64) {
            let x = noise(256, seed);
            let y = noise(256, seed + 7);
            let g1 = gcc_phat(&x, &y, 128, DEFAULT_EPS_REL).unwrap();
            let xs: Vec<f64> = x.iter().map(|v| v * a).collect();
            let ys: Vec<f64> = y.iter().map(|v| v * b).collect();
            let g2 = gcc_phat(&xs, &ys, 128, DEFAULT_EPS_REL).unwrap();
            for (p, q) in g1.lags.iter().zip(&g2.lags) {
                prop_assert!((p - q).abs() <= 1e-6);
            }
        }

        #[test]
        fn swapping_inputs_reverses_lags(seed in 0u64..1000) {
            let x = noise(256, seed);
            let y = noise(256, seed + 3);
            let g1 = gcc_phat(&x, &y, 128, DEFAULT_EPS_REL).unwrap();
            let g2 = gcc_phat(&y, &x, 128, DEFAULT_EPS_REL).unwrap();
            // lag d in g1 equals lag -d in g2; lag -L/2 has no mirror in the crop
            for i in 1..128 {
                prop_assert!((g1.lags[i] - g2.lags[128 - i]).abs() <= 1e-9);
            }
        }

        #[test]
        fn gaussian_decreases_away_from_peak(center in -150.0..150.0f64) {
            let t = gaussian_target(center / 96000.0, 96000.0, 400, 5.0).unwrap();
            let pos = |i: usize| (i as f64 - 200.0 - center).abs();
            let peak = argmax(&t.values);
            let frac = pos(peak);
            prop_assert!(frac <= 0.5 + 1e-9);
            prop_assert!((t.values[peak] - (-(frac * frac) / 50.0).exp()).abs() < 1e-12);
            for i in 0..400 {
                for j in 0..400 {
                    if pos(i) + 1e-9 < pos(j) {
                        prop_assert!(t.values[i] >= t.values[j]);
                    }
                }
            }
        }
    }
}
