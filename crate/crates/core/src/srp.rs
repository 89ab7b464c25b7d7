//! Steered response power over a grid: per-pair lag functions are sampled at
//! the delays each candidate position implies and summed; the best candidate
//! is the position estimate.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{write_atomic, EngineKind, MultichannelAudio};
use crate::dsp::{extract_frames, FrameSpec, GccPhat, DEFAULT_EPS_REL};
use crate::error::{Error, Result};
use crate::geometry::{pairs_for, tdoa_unchecked, Grid3D, MicArray, PhysicalConstants, Point3};
use crate::net::EncoderDecoderNet;

/// How lag functions are read at fractional delays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagInterpolation {
    #[default]
    Linear,
    Nearest,
}

/// Value of `lags` at a delay of `shift` samples (lag zero at index L/2).
/// Returns `None` when `|shift| > L/2 - 1`.
pub fn sample_lag_at(lags: &[f64], shift: f64, mode: LagInterpolation) -> Option<f64> {
    let half = (lags.len() / 2) as f64;
    if lags.len() < 2 || !(shift.abs() <= half - 1.0) {
        return None;
    }
    let pos = shift + half;
    match mode {
        LagInterpolation::Nearest => Some(lags[pos.round() as usize]),
        LagInterpolation::Linear => {
            let i = pos.floor();
            let frac = pos - i;
            let i = i as usize;
            if frac == 0.0 {
                Some(lags[i])
            } else {
                Some(lags[i] * (1.0 - frac) + lags[i + 1] * frac)
            }
        }
    }
}

/// Linear interpolation of `lags` at delay `tau` seconds.
pub fn sample_lag(lags: &[f64], tau: f64, fs: f64) -> Option<f64> {
    sample_lag_at(lags, tau * fs, LagInterpolation::Linear)
}

/// One lag vector per microphone pair, in [`crate::geometry::enumerate_pairs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct LagFunctionSet {
    lags: Vec<Vec<f64>>,
    fs: f64,
    mic_count: usize,
}

impl LagFunctionSet {
    pub fn new(lags: Vec<Vec<f64>>, fs: f64, array: &MicArray) -> Result<Self> {
        let m = array.len();
        let expected = m * (m - 1) / 2;
        if lags.len() != expected {
            return Err(Error::invalid(format!(
                "{} lag vectors for {m} microphones, expected {expected}",
                lags.len()
            )));
        }
        let len = lags[0].len();
        if len < 2 || lags.iter().any(|v| v.len() != len) {
            return Err(Error::invalid("lag vectors must share one length of at least 2"));
        }
        if !(fs > 0.0) {
            return Err(Error::invalid("sampling rate must be positive"));
        }
        Ok(LagFunctionSet { lags, fs, mic_count: m })
    }

    pub fn lags(&self) -> &[Vec<f64>] {
        &self.lags
    }

    pub fn lag_len(&self) -> usize {
        self.lags[0].len()
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }
}

/// Delay in samples from every grid point to every pair, computed once per
/// array and grid.
#[derive(Debug, Clone)]
pub struct TdoaCache {
    grid: Grid3D,
    mic_count: usize,
    pair_count: usize,
    fs: f64,
    /// `[point][pair]`
    shifts: Vec<f64>,
}

impl TdoaCache {
    pub fn new(array: &MicArray, grid: &Grid3D, consts: &PhysicalConstants) -> Self {
        let pairs = pairs_for(array.len());
        let mics = array.mics();
        let scale = consts.fs / consts.c;
        let mut shifts = vec![0.0; grid.len() * pairs.len()];
        shifts.par_chunks_mut(pairs.len()).enumerate().for_each(|(i, row)| {
            let q = grid.point(i);
            for (s, &(k, l)) in row.iter_mut().zip(&pairs) {
                *s = tdoa_unchecked(&q, &mics[k], &mics[l], 1.0) * scale;
            }
        });
        TdoaCache {
            grid: grid.clone(),
            mic_count: array.len(),
            pair_count: pairs.len(),
            fs: consts.fs,
            shifts,
        }
    }

    pub fn grid(&self) -> &Grid3D {
        &self.grid
    }

    pub fn pair_count(&self) -> usize {
        self.pair_count
    }

    /// Delays in samples for grid point `index`, one per pair.
    pub fn shifts(&self, index: usize) -> &[f64] {
        &self.shifts[index * self.pair_count..][..self.pair_count]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerMap {
    pub grid: Grid3D,
    /// One value per grid point in enumeration order.
    pub values: Vec<f64>,
    pub provenance: EngineKind,
    /// Pair terms skipped because the delay fell outside the lag support.
    pub out_of_support: usize,
}

/// Power map from a prepared delay cache.
pub fn build_apm_cached(
    set: &LagFunctionSet,
    cache: &TdoaCache,
    mode: LagInterpolation,
    provenance: EngineKind,
) -> Result<PowerMap> {
    if set.mic_count != cache.mic_count {
        return Err(Error::invalid(format!(
            "lag set is for {} microphones, delay cache for {}",
            set.mic_count, cache.mic_count
        )));
    }
    if (set.fs - cache.fs).abs() > 1e-9 * cache.fs {
        return Err(Error::invalid(format!(
            "lag set sampled at {} Hz, delay cache at {} Hz",
            set.fs, cache.fs
        )));
    }
    let n = cache.grid.len();
    let mut values = vec![0.0; n];
    let mut misses = vec![0u32; n];
    values
        .par_iter_mut()
        .zip(misses.par_iter_mut())
        .enumerate()
        .for_each(|(i, (v, miss))| {
            let mut acc = 0.0;
            for (lags, &s) in set.lags.iter().zip(cache.shifts(i)) {
                match sample_lag_at(lags, s, mode) {
                    Some(x) => acc += x,
                    None => *miss += 1,
                }
            }
            *v = acc;
        });
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("power map value at point {bad} is not finite")));
    }
    Ok(PowerMap {
        grid: cache.grid.clone(),
        values,
        provenance,
        out_of_support: misses.iter().map(|&m| m as usize).sum(),
    })
}

/// Power map over `grid` with linear lag interpolation.
pub fn build_apm(
    set: &LagFunctionSet,
    array: &MicArray,
    grid: &Grid3D,
    consts: &PhysicalConstants,
) -> Result<PowerMap> {
    let cache = TdoaCache::new(array, grid, consts);
    build_apm_cached(set, &cache, LagInterpolation::Linear, EngineKind::GccPhat)
}

/// Grid point of maximum power, its value and its enumeration index. Ties
/// go to the lowest index.
pub fn localize(map: &PowerMap) -> Result<(Point3, f64, usize)> {
    if map.values.is_empty() {
        return Err(Error::invalid("empty power map"));
    }
    let mut best = 0;
    for (i, &v) in map.values.iter().enumerate() {
        if v > map.values[best] {
            best = i;
        }
    }
    Ok((map.grid.point(best), map.values[best], best))
}

impl PowerMap {
    /// Delimited-text dump: `#` header lines describing the grid, then one
    /// value per line in enumeration order (x fastest).
    pub fn to_text(&self) -> String {
        let (lo, hi, r, c) = (
            self.grid.min(),
            self.grid.max(),
            self.grid.resolution(),
            self.grid.counts(),
        );
        let mut s = String::new();
        let _ = writeln!(s, "# provenance {}", self.provenance);
        let _ = writeln!(s, "# min {} {} {}", lo.x, lo.y, lo.z);
        let _ = writeln!(s, "# max {} {} {}", hi.x, hi.y, hi.z);
        let _ = writeln!(s, "# resolution {} {} {}", r[0], r[1], r[2]);
        let _ = writeln!(s, "# counts {} {} {}", c[0], c[1], c[2]);
        let _ = writeln!(s, "# out_of_support {}", self.out_of_support);
        for v in &self.values {
            let _ = writeln!(s, "{v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut header = std::collections::HashMap::new();
        let mut values = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let bad = |m: &str| Error::Parse {
                offset: n as u64 + 1,
                message: m.to_string(),
            };
            if let Some(rest) = line.strip_prefix("# ") {
                let mut it = rest.split_whitespace();
                let key = it.next().ok_or_else(|| bad("empty header line"))?;
                header.insert(key.to_string(), it.map(str::to_string).collect::<Vec<_>>());
            } else if !line.trim().is_empty() {
                values.push(line.trim().parse::<f64>().map_err(|e| bad(&e.to_string()))?);
            }
        }
        let triple = |key: &str| -> Result<[f64; 3]> {
            let v = header.get(key).ok_or_else(|| Error::Parse {
                offset: 0,
                message: format!("missing header {key}"),
            })?;
            let parsed: Vec<f64> = v.iter().filter_map(|x| x.parse().ok()).collect();
            parsed.try_into().map_err(|_| Error::Parse {
                offset: 0,
                message: format!("header {key} needs three numbers"),
            })
        };
        let grid = Grid3D::with_axis_resolution(
            Point3::from_array(triple("min")?),
            Point3::from_array(triple("max")?),
            triple("resolution")?,
        )?;
        if values.len() != grid.len() {
            return Err(Error::Validation(format!(
                "map has {} values for a {}-point grid",
                values.len(),
                grid.len()
            )));
        }
        let provenance = header
            .get("provenance")
            .and_then(|v| v.first())
            .map(|s| s.parse())
            .transpose()?
            .unwrap_or_default();
        let out_of_support = header
            .get("out_of_support")
            .and_then(|v| v.first())
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        Ok(PowerMap {
            grid,
            values,
            provenance,
            out_of_support,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

/// Which lag functions feed the power map.
#[derive(Debug, Clone, Copy)]
pub enum Engine<'a> {
    GccPhat,
    DeepGcc(&'a EncoderDecoderNet),
}

impl Engine<'_> {
    pub fn kind(&self) -> EngineKind {
        match self {
            Engine::GccPhat => EngineKind::GccPhat,
            Engine::DeepGcc(_) => EngineKind::DeepGcc,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEstimate {
    pub frame_index: usize,
    /// Frame centre in seconds.
    pub t: f64,
    pub position: Point3,
    pub peak: f64,
    pub out_of_support: usize,
}

/// Frame-by-frame localizer for one array and grid.
pub struct SequenceLocalizer<'a> {
    array: MicArray,
    consts: PhysicalConstants,
    frames: FrameSpec,
    gcc: GccPhat,
    cache: TdoaCache,
    engine: Engine<'a>,
    interpolation: LagInterpolation,
}

impl<'a> SequenceLocalizer<'a> {
    pub fn new(
        array: &MicArray,
        grid: &Grid3D,
        consts: &PhysicalConstants,
        frames: &FrameSpec,
        lag_count: usize,
        engine: Engine<'a>,
        interpolation: LagInterpolation,
    ) -> Result<Self> {
        if let Engine::DeepGcc(net) = engine {
            if net.input_len() != lag_count {
                return Err(Error::Config(format!(
                    "checkpoint expects {} lags, configuration uses {lag_count}",
                    net.input_len()
                )));
            }
        }
        Ok(SequenceLocalizer {
            array: array.clone(),
            consts: *consts,
            frames: frames.clone(),
            gcc: GccPhat::new(frames.frame_len(), lag_count, DEFAULT_EPS_REL)?,
            cache: TdoaCache::new(array, grid, consts),
            engine,
            interpolation,
        })
    }

    /// Lag functions of one frame (one windowed frame per channel).
    pub fn lag_functions(&self, frame: &[&[f64]]) -> Result<LagFunctionSet> {
        let spectra = frame.iter().map(|x| self.gcc.spectrum(x)).collect::<Result<Vec<_>>>()?;
        let pairs = pairs_for(self.array.len());
        let raw: Vec<Vec<f64>> = pairs
            .iter()
            .map(|&(k, l)| self.gcc.correlate(&spectra[k], &spectra[l]))
            .collect();
        let lags = match self.engine {
            Engine::GccPhat => raw,
            Engine::DeepGcc(net) => {
                let refs: Vec<&[f64]> = raw.iter().map(Vec::as_slice).collect();
                net.predict(&refs)?
            }
        };
        LagFunctionSet::new(lags, self.consts.fs, &self.array)
    }

    pub fn power_map(&self, frame: &[&[f64]]) -> Result<PowerMap> {
        let set = self.lag_functions(frame)?;
        build_apm_cached(&set, &self.cache, self.interpolation, self.engine.kind())
    }

    /// Localize every whole frame of `audio`. `on_map` sees each map before
    /// it is dropped.
    pub fn run(
        &self,
        audio: &MultichannelAudio,
        mut on_map: impl FnMut(usize, &PowerMap) -> Result<()>,
    ) -> Result<Vec<FrameEstimate>> {
        if audio.channel_count() != self.array.len() {
            return Err(Error::invalid(format!(
                "audio has {} channels, array has {} microphones",
                audio.channel_count(),
                self.array.len()
            )));
        }
        if (audio.fs - self.consts.fs).abs() > 1e-9 * self.consts.fs {
            return Err(Error::invalid(format!(
                "audio sampled at {} Hz, configuration expects {} Hz",
                audio.fs, self.consts.fs
            )));
        }
        let per_channel: Vec<Vec<Vec<f64>>> = audio
            .channels
            .iter()
            .map(|ch| extract_frames(ch, &self.frames).frames)
            .collect();
        let count = per_channel[0].len();
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let frame: Vec<&[f64]> = per_channel.iter().map(|c| c[i].as_slice()).collect();
            let map = self.power_map(&frame)?;
            let (position, peak, _) = localize(&map)?;
            on_map(i, &map)?;
            out.push(FrameEstimate {
                frame_index: i,
                t: self.frames.frame_center_time(i, self.consts.fs),
                position,
                peak,
                out_of_support: map.out_of_support,
            });
        }
        Ok(out)
    }
}

/// Per-frame position estimates for a recording.
#[allow(clippy::too_many_arguments)]
pub fn localize_sequence(
    audio: &MultichannelAudio,
    array: &MicArray,
    grid: &Grid3D,
    consts: &PhysicalConstants,
    frames: &FrameSpec,
    lag_count: usize,
    engine: Engine<'_>,
    interpolation: LagInterpolation,
) -> Result<Vec<FrameEstimate>> {
    SequenceLocalizer::new(array, grid, consts, frames, lag_count, engine, interpolation)?.run(audio, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::gaussian_target;
    use crate::geometry::{enumerate_pairs, grid_points, tdoa};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ramp() -> Vec<f64> {
        (0..400).map(|i| i as f64 / 100.0).collect()
    }

    #[test]
    fn sample_at_knot_and_midpoint() {
        let lags = ramp();
        assert_eq!(sample_lag_at(&lags, 10.0, LagInterpolation::Linear), Some(2.1));
        let mut v = vec![0.0; 400];
        v[210] = 0.4;
        v[211] = 0.8;
        assert_relative_eq!(
            sample_lag_at(&v, 10.5, LagInterpolation::Linear).unwrap(),
            0.6,
            epsilon = 1e-15
        );
        assert_eq!(sample_lag_at(&v, 10.6, LagInterpolation::Nearest), Some(0.8));
        let mut delta = vec![0.0; 400];
        delta[200] = 1.0;
        assert_eq!(sample_lag(&delta, 0.0, 96000.0), Some(1.0));
    }

    #[test]
    fn sample_outside_support() {
        let lags = ramp();
        assert!(sample_lag_at(&lags, 199.0, LagInterpolation::Linear).is_some());
        assert!(sample_lag_at(&lags, -199.0, LagInterpolation::Linear).is_some());
        assert_eq!(sample_lag_at(&lags, 199.5, LagInterpolation::Linear), None);
        assert_eq!(sample_lag_at(&lags, -250.0, LagInterpolation::Nearest), None);
        assert_eq!(sample_lag_at(&lags, f64::NAN, LagInterpolation::Linear), None);
    }

    fn square_array() -> MicArray {
        MicArray::new(vec![
            Point3::new(1.0, 1.0, 1.0),
            Point3::new(1.2, 1.0, 1.0),
            Point3::new(1.0, 1.2, 1.0),
            Point3::new(1.0, 1.0, 1.2),
        ])
        .unwrap()
    }

    fn small_grid() -> Grid3D {
        Grid3D::new(Point3::new(0.0, 0.0, 0.0), Point3::new(2.0, 2.0, 2.0), 0.2).unwrap()
    }

    fn target_set(array: &MicArray, q: &Point3, consts: &PhysicalConstants) -> LagFunctionSet {
        let lags = enumerate_pairs(array)
            .iter()
            .map(|&(k, l)| {
                let m = array.mics();
                let d = tdoa(q, &m[k], &m[l], consts.c).unwrap();
                gaussian_target(d, consts.fs, 400, 5.0).unwrap().values
            })
            .collect();
        LagFunctionSet::new(lags, consts.fs, array).unwrap()
    }

    #[test]
    fn gaussian_lags_peak_at_their_source() {
        let consts = PhysicalConstants::new(340.0, 96000.0).unwrap();
        let array = square_array();
        let grid = small_grid();
        let q = grid.point(grid.nearest_index(&Point3::new(1.6, 0.4, 1.8)));
        let map = build_apm(&target_set(&array, &q, &consts), &array, &grid, &consts).unwrap();
        let (p, peak, _) = localize(&map).unwrap();
        assert_eq!(p, q);
        // linear interpolation of a sigma=5 Gaussian loses at most 1/(8 sigma^2) per pair
        assert!((6.0 * (1.0 - 1.0 / 200.0)..=6.0).contains(&peak), "peak {peak}");
    }

    #[test]
    fn zero_and_constant_lags() {
        let consts = PhysicalConstants::new(340.0, 96000.0).unwrap();
        let array = square_array();
        let grid = small_grid();
        let zeros = LagFunctionSet::new(vec![vec![0.0; 400]; 6], consts.fs, &array).unwrap();
        let map = build_apm(&zeros, &array, &grid, &consts).unwrap();
        assert!(map.values.iter().all(|v| *v == 0.0));
        assert_eq!(localize(&map).unwrap().2, 0);

        let q = grid.point(17);
        let base = target_set(&array, &q, &consts);
        let shifted = LagFunctionSet::new(
            base.lags()
                .iter()
                .map(|v| v.iter().map(|x| x + 0.25).collect())
                .collect(),
            consts.fs,
            &array,
        )
        .unwrap();
        let a = build_apm(&base, &array, &grid, &consts).unwrap();
        let b = build_apm(&shifted, &array, &grid, &consts).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert_relative_eq!(x + 1.5, *y, epsilon = 1e-12);
        }
        assert_eq!(localize(&a).unwrap().2, localize(&b).unwrap().2);
    }

    #[test]
    fn matches_pointwise_loop() {
        let consts = PhysicalConstants::new(340.0, 16000.0).unwrap();
        let array = square_array();
        let grid = small_grid();
        let set = LagFunctionSet::new(
            (0..6)
                .map(|p| (0..400).map(|i| ((i * (p + 3)) as f64 * 0.01).sin()).collect())
                .collect(),
            consts.fs,
            &array,
        )
        .unwrap();
        let map = build_apm(&set, &array, &grid, &consts).unwrap();
        let m = array.mics();
        for (i, q) in grid_points(&grid).iter().enumerate() {
            let mut acc = 0.0;
            for (p, &(k, l)) in enumerate_pairs(&array).iter().enumerate() {
                let shift = (q.distance(&m[k]) - q.distance(&m[l])) * (consts.fs / consts.c);
                acc += sample_lag_at(&set.lags()[p], shift, LagInterpolation::Linear).unwrap_or(0.0);
            }
            assert_eq!(map.values[i], acc);
        }
    }

    #[test]
    fn short_lags_count_misses() {
        let consts = PhysicalConstants::new(340.0, 96000.0).unwrap();
        let array = square_array();
        let grid = small_grid();
        // 20 cm baselines reach ~56 samples; 16 lags cover far less
        let set = LagFunctionSet::new(vec![vec![1.0; 16]; 6], consts.fs, &array).unwrap();
        let map = build_apm(&set, &array, &grid, &consts).unwrap();
        assert!(map.out_of_support > 0);
        assert!(map.values.iter().all(|v| v.is_finite() && *v <= 6.0));
    }

    #[test]
    fn mismatched_sets() {
        let array = square_array();
        assert!(LagFunctionSet::new(vec![vec![0.0; 400]; 5], 96000.0, &array).is_err());
        let mut ragged = vec![vec![0.0; 400]; 6];
        ragged[3].pop();
        assert!(LagFunctionSet::new(ragged, 96000.0, &array).is_err());

        let consts = PhysicalConstants::new(340.0, 96000.0).unwrap();
        let pair = MicArray::new(vec![Point3::new(0.0, 0.0, 0.0), Point3::new(0.1, 0.0, 0.0)]).unwrap();
        let one = LagFunctionSet::new(vec![vec![0.0; 400]], consts.fs, &pair).unwrap();
        assert!(build_apm(&one, &array, &small_grid(), &consts).is_err());
    }

    #[test]
    fn ties_go_to_the_first_point() {
        let grid = small_grid();
        let mut values = vec![0.0; grid.len()];
        values[40] = 2.0;
        values[90] = 2.0;
        let map = PowerMap {
            grid: grid.clone(),
            values,
            provenance: EngineKind::GccPhat,
            out_of_support: 0,
        };
        let (p, v, i) = localize(&map).unwrap();
        assert_eq!((i, v), (40, 2.0));
        assert_eq!(p, grid.point(40));
    }

    #[test]
    fn text_dump_roundtrip() {
        let grid = Grid3D::new(Point3::new(0.5, 0.0, 1.0), Point3::new(1.0, 0.3, 1.1), 0.1).unwrap();
        let map = PowerMap {
            values: (0..grid.len()).map(|i| (i as f64).sqrt() * 0.1).collect(),
            grid,
            provenance: EngineKind::DeepGcc,
            out_of_support: 3,
        };
        let back = PowerMap::from_text(&map.to_text()).unwrap();
        assert_eq!(back, map);
        assert!(PowerMap::from_text("# min 0 0 0\n1\n").is_err());
    }

    proptest! {
        #[test]
        fn positive_scaling_keeps_argmax(scale in 0.01f64..100.0, seed in 0u64..50) {
            let consts = PhysicalConstants::new(340.0, 16000.0).unwrap();
            let array = square_array();
            let grid = small_grid();
            let lags: Vec<Vec<f64>> = (0..6)
                .map(|p| (0..64).map(|i| (((i as u64 + 7) * (p as u64 + 1) * (seed + 3)) % 97) as f64 / 97.0).collect())
                .collect();
            let scaled: Vec<Vec<f64>> = lags.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
            let a = build_apm(&LagFunctionSet::new(lags, consts.fs, &array).unwrap(), &array, &grid, &consts).unwrap();
            let b = build_apm(&LagFunctionSet::new(scaled, consts.fs, &array).unwrap(), &array, &grid, &consts).unwrap();
            prop_assert_eq!(localize(&a).unwrap().2, localize(&b).unwrap().2);
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x * scale - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
    }
}
