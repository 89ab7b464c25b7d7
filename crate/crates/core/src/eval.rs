//! Localization error metrics and baseline comparison tables.

use std::fmt::Write as _;

use crate::dataio::{EngineKind, FrameResult};
use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Euclidean distance between an estimate and the ground truth, in meters.
pub fn frame_error(est: &Point3, gt: &Point3) -> f64 {
    est.distance(gt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceResult {
    pub name: String,
    pub engine: EngineKind,
    pub frame_indices: Vec<usize>,
    /// Per-frame errors in meters.
    pub errors: Vec<f64>,
}

impl SequenceResult {
    pub fn new(
        name: impl Into<String>,
        engine: EngineKind,
        frame_indices: Vec<usize>,
        errors: Vec<f64>,
    ) -> Result<Self> {
        if frame_indices.len() != errors.len() {
            return Err(Error::Validation(format!(
                "{} frame indices for {} errors",
                frame_indices.len(),
                errors.len()
            )));
        }
        if let Some(e) = errors.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
            return Err(Error::Validation(format!("frame error {e} is not a finite distance")));
        }
        Ok(SequenceResult {
            name: name.into(),
            engine,
            frame_indices,
            errors,
        })
    }

    /// Errors recomputed from the estimate and ground-truth columns.
    pub fn from_results(name: impl Into<String>, engine: EngineKind, rows: &[FrameResult]) -> Result<Self> {
        Self::new(
            name,
            engine,
            rows.iter().map(|r| r.frame_index).collect(),
            rows.iter()
                .map(|r| frame_error(&r.estimate(), &r.ground_truth()))
                .collect(),
        )
    }

    pub fn frame_count(&self) -> usize {
        self.errors.len()
    }

    /// Mean Euclidean error in meters; zero for an empty sequence.
    pub fn mean_error(&self) -> f64 {
        if self.errors.is_empty() {
            0.0
        } else {
            self.errors.iter().sum::<f64>() / self.errors.len() as f64
        }
    }

    /// Same as [`Self::mean_error`]; published tables call this column MSE.
    pub fn mse(&self) -> f64 {
        self.mean_error()
    }

    /// Fraction of frames with error at most `threshold` meters.
    pub fn fraction_within(&self, threshold: f64) -> f64 {
        if self.errors.is_empty() {
            return 0.0;
        }
        self.errors.iter().filter(|e| **e <= threshold).count() as f64 / self.errors.len() as f64
    }
}

/// `(baseline - method) / baseline`, as a fraction.
pub fn relative_improvement(baseline: f64, method: f64) -> Result<f64> {
    if !(baseline > 0.0 && baseline.is_finite()) || !method.is_finite() {
        return Err(Error::invalid(format!(
            "relative improvement needs a positive baseline, got {baseline} and {method}"
        )));
    }
    Ok((baseline - method) / baseline)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub frames: usize,
    pub baseline_mean: f64,
    pub method_mean: f64,
    /// `None` when the baseline error is zero.
    pub delta_r: Option<f64>,
}

/// Compare two runs over the same frames. Frame indices must match exactly.
pub fn compare(baseline: &SequenceResult, method: &SequenceResult) -> Result<ComparisonRow> {
    if baseline.frame_indices != method.frame_indices {
        return Err(Error::Validation(format!(
            "frame sets differ ({} vs {} frames)",
            baseline.frame_count(),
            method.frame_count()
        )));
    }
    let (b, m) = (baseline.mean_error(), method.mean_error());
    Ok(ComparisonRow {
        name: baseline.name.clone(),
        frames: baseline.frame_count(),
        baseline_mean: b,
        method_mean: m,
        delta_r: relative_improvement(b, m).ok(),
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Comparison {
    pub baseline: String,
    pub method: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn build(pairs: &[(SequenceResult, SequenceResult)]) -> Result<Self> {
        let mut out = Comparison::default();
        if let Some((b, m)) = pairs.first() {
            out.baseline = b.engine.to_string();
            out.method = m.engine.to_string();
        }
        for (b, m) in pairs {
            out.rows.push(compare(b, m)?);
        }
        Ok(out)
    }

    /// Frame-weighted mean errors over all rows.
    pub fn overall(&self) -> Option<ComparisonRow> {
        let frames: usize = self.rows.iter().map(|r| r.frames).sum();
        if frames == 0 {
            return None;
        }
        let w = |f: fn(&ComparisonRow) -> f64| {
            self.rows.iter().map(|r| f(r) * r.frames as f64).sum::<f64>() / frames as f64
        };
        let (b, m) = (w(|r| r.baseline_mean), w(|r| r.method_mean));
        Some(ComparisonRow {
            name: "all".into(),
            frames,
            baseline_mean: b,
            method_mean: m,
            delta_r: relative_improvement(b, m).ok(),
        })
    }

    /// Aligned text table; errors in centimeters, improvement in percent.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>7} {:>14} {:>14} {:>9}",
            "sequence",
            "frames",
            format!("{} cm", self.baseline),
            format!("{} cm", self.method),
            "dr %"
        );
        for r in self.rows.iter().chain(self.overall().as_ref()) {
            let dr = r.delta_r.map_or("-".to_string(), |d| format!("{:.2}", 100.0 * d));
            let _ = writeln!(
                s,
                "{:<16} {:>7} {:>14.1} {:>14.1} {:>9}",
                r.name,
                r.frames,
                100.0 * r.baseline_mean,
                100.0 * r.method_mean,
                dr
            );
        }
        s
    }

    /// Machine-readable form; errors in meters, improvement as a fraction.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sequence,frames,baseline_mean_m,method_mean_m,delta_r\n");
        for r in self.rows.iter().chain(self.overall().as_ref()) {
            let dr = r.delta_r.map_or(String::new(), |d| d.to_string());
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.name, r.frames, r.baseline_mean, r.method_mean, dr
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn frame_error_values() {
        let o = Point3::new(0.0, 0.0, 0.0);
        assert_eq!(frame_error(&o, &o), 0.0);
        assert_eq!(frame_error(&Point3::new(1.0, 0.0, 0.0), &o), 1.0);
        assert_relative_eq!(frame_error(&Point3::new(1.0, 1.0, 1.0), &o), 1.7320508, epsilon = 1e-7);
    }

    #[test]
    fn printed_improvements() {
        assert_relative_eq!(100.0 * relative_improvement(101.3, 94.5).unwrap(), 6.71, epsilon = 0.01);
        assert_relative_eq!(
            100.0 * relative_improvement(86.9, 136.7).unwrap(),
            -57.31,
            epsilon = 0.05
        );
        assert_eq!(relative_improvement(50.0, 50.0).unwrap(), 0.0);
        assert!(relative_improvement(0.0, 1.0).is_err());
        assert!(relative_improvement(-3.0, 1.0).is_err());
    }

    fn seq(engine: EngineKind, idx: Vec<usize>, errors: Vec<f64>) -> SequenceResult {
        SequenceResult::new("s1", engine, idx, errors).unwrap()
    }

    #[test]
    fn two_frame_comparison() {
        let a = seq(EngineKind::GccPhat, vec![0, 1], vec![1.0, 0.5]);
        let b = seq(EngineKind::DeepGcc, vec![0, 1], vec![0.5, 0.4]);
        let row = compare(&a, &b).unwrap();
        assert_eq!(row.baseline_mean, 0.75);
        assert_relative_eq!(row.method_mean, 0.45, epsilon = 1e-15);
        assert_relative_eq!(row.delta_r.unwrap(), 0.4, epsilon = 1e-12);
        assert_eq!(compare(&a, &a).unwrap().delta_r, Some(0.0));
        assert_eq!(a.mse(), a.mean_error());
        assert_eq!(a.fraction_within(0.5), 0.5);
    }

    #[test]
    fn mismatched_frames_are_refused() {
        let a = seq(EngineKind::GccPhat, vec![0, 1], vec![1.0, 0.5]);
        let b = seq(EngineKind::DeepGcc, vec![2, 3], vec![0.5, 0.4]);
        assert!(matches!(compare(&a, &b), Err(Error::Validation(_))));
        let c = seq(EngineKind::DeepGcc, vec![0], vec![0.5]);
        assert!(compare(&a, &c).is_err());
        assert!(SequenceResult::new("x", EngineKind::GccPhat, vec![0], vec![-1.0]).is_err());
    }

    #[test]
    fn table_output() {
        let a = seq(EngineKind::GccPhat, vec![0, 1], vec![1.0, 0.5]);
        let b = seq(EngineKind::DeepGcc, vec![0, 1], vec![0.5, 0.4]);
        let t = Comparison::build(&[(a, b)]).unwrap();
        let text = t.to_text();
        assert!(text.contains("gcc-phat cm"));
        assert!(text.contains("40.00"));
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("s1,2,0.75,"));
    }

    proptest! {
        #[test]
        fn improvement_is_one_minus_ratio(b in 0.01f64..1000.0, m in 0.0f64..1000.0) {
            let r = relative_improvement(b, m).unwrap();
            prop_assert!((r - (1.0 - m / b)).abs() <= 1e-12 * (1.0 + m / b));
        }

        #[test]
        fn mean_error_ignores_common_translation(
            pts in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 1..20),
            shift in (-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0),
        ) {
            let gt = Point3::new(0.3, -0.2, 1.0);
            let errs = |d: (f64, f64, f64)| -> f64 {
                pts.iter()
                    .map(|p| frame_error(&Point3::new(p.0, p.1, p.2).offset(d.0, d.1, d.2), &gt.offset(d.0, d.1, d.2)))
                    .sum::<f64>() / pts.len() as f64
            };
            prop_assert!((errs((0.0, 0.0, 0.0)) - errs(shift)).abs() < 1e-9);
        }
    }
}
