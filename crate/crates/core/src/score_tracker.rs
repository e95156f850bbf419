//! Per-class mean classification score, tracked with an exponential moving
//! average over positive training instances.
//!
//! The vector has `C + 1` logical entries. Index `C` is the background class;
//! it is never tracked and always reads as the configured substitute value.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Default smoothing coefficient.
pub const DEFAULT_ALPHA: f64 = 0.9;
/// Default constant read in place of the background score.
pub const DEFAULT_BACKGROUND_SUBSTITUTE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct MeanScoreVector {
    foreground: Vec<f64>,
    alpha: f64,
    background_substitute: f64,
}

fn check_unit_open(arg: &'static str, v: f64) -> Result<()> {
    if !v.is_finite() || v <= 0.0 || v > 1.0 {
        return Err(Error::invalid(arg, format!("{v} is not in (0, 1]")));
    }
    Ok(())
}

impl MeanScoreVector {
    pub fn new(
        num_foreground_classes: usize,
        alpha: f64,
        background_substitute: f64,
        init_value: f64,
    ) -> Result<Self> {
        if num_foreground_classes == 0 {
            return Err(Error::invalid("num_foreground_classes", "must be at least 1"));
        }
        if !alpha.is_finite() || !(0.0..1.0).contains(&alpha) {
            return Err(Error::invalid("alpha", format!("{alpha} is not in [0, 1)")));
        }
        check_unit_open("background_substitute", background_substitute)?;
        check_unit_open("init_value", init_value)?;
        Ok(Self {
            foreground: vec![init_value; num_foreground_classes],
            alpha,
            background_substitute,
        })
    }

    /// Tracker whose foreground entries start at `1 / (C + 1)`, the score an
    /// untrained softmax assigns to every class.
    pub fn with_uniform_init(
        num_foreground_classes: usize,
        alpha: f64,
        background_substitute: f64,
    ) -> Result<Self> {
        let init = 1.0 / (num_foreground_classes as f64 + 1.0);
        Self::new(num_foreground_classes, alpha, background_substitute, init)
    }

    /// Builds an indicator from explicit foreground values, e.g. a restored
    /// checkpoint or a fixed prior.
    pub fn from_scores(scores: Vec<f64>, alpha: f64, background_substitute: f64) -> Result<Self> {
        let mut out = Self::new(scores.len(), alpha, background_substitute, 1.0)?;
        for &s in &scores {
            check_unit_open("scores", s)?;
        }
        out.foreground = scores;
        Ok(out)
    }

    pub fn num_foreground(&self) -> usize {
        self.foreground.len()
    }

    /// `C + 1`.
    pub fn num_classes(&self) -> usize {
        self.foreground.len() + 1
    }

    pub fn background_index(&self) -> usize {
        self.foreground.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn background_substitute(&self) -> f64 {
        self.background_substitute
    }

    /// Foreground entries only.
    pub fn foreground(&self) -> &[f64] {
        &self.foreground
    }

    /// Score read for margin computation. The background index yields the
    /// substitute constant.
    pub fn get(&self, class: usize) -> Result<f64> {
        match class.cmp(&self.foreground.len()) {
            std::cmp::Ordering::Less => Ok(self.foreground[class]),
            std::cmp::Ordering::Equal => Ok(self.background_substitute),
            std::cmp::Ordering::Greater => Err(Error::ClassOutOfRange {
                index: class,
                num_classes: self.num_classes(),
            }),
        }
    }

    /// `ln s` over all `C + 1` classes, background substituted.
    pub fn log_scores(&self) -> Vec<f64> {
        self.foreground
            .iter()
            .chain(std::iter::once(&self.background_substitute))
            .map(|s| s.ln())
            .collect()
    }

    /// `s_y <- alpha * s_y + (1 - alpha) * p` for a positive instance of `class`.
    pub fn update(&mut self, class: usize, predicted_probability: f64) -> Result<()> {
        if class == self.foreground.len() {
            return Err(Error::BackgroundLabel(class));
        }
        if class > self.foreground.len() {
            return Err(Error::ClassOutOfRange {
                index: class,
                num_classes: self.num_classes(),
            });
        }
        let p = predicted_probability;
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid("predicted_probability", format!("{p} is not in [0, 1]")));
        }
        let s = &mut self.foreground[class];
        let next = self.alpha * *s + (1.0 - self.alpha) * p;
        // p = 0 with alpha = 0 would leave a zero entry; keep the log finite.
        *s = next.max(f64::MIN_POSITIVE);
        Ok(())
    }

    /// Plain-text `key = value` snapshot: alpha, background substitute, then
    /// one line per foreground class index.
    pub fn to_snapshot(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "alpha = {:?}", self.alpha);
        let _ = writeln!(out, "background_substitute = {:?}", self.background_substitute);
        for (i, s) in self.foreground.iter().enumerate() {
            let _ = writeln!(out, "{i} = {s:?}");
        }
        out
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            what: "score snapshot",
            reason,
        };
        let mut alpha = None;
        let mut background = None;
        let mut scores: Vec<(usize, f64)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected `key = value`", lineno + 1)))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?;
            match key.trim() {
                "alpha" => alpha = Some(value),
                "background_substitute" => background = Some(value),
                k => {
                    let idx: usize = k
                        .parse()
                        .map_err(|_| bad(format!("line {}: unknown key `{k}`", lineno + 1)))?;
                    scores.push((idx, value));
                }
            }
        }
        scores.sort_by_key(|&(i, _)| i);
        if scores.iter().enumerate().any(|(pos, &(i, _))| pos != i) {
            return Err(bad("class indices must be 0..C without gaps".into()));
        }
        let alpha = alpha.ok_or_else(|| bad("missing alpha".into()))?;
        let background = background.ok_or_else(|| bad("missing background_substitute".into()))?;
        Self::from_scores(scores.into_iter().map(|(_, s)| s).collect(), alpha, background)
    }
}

/// Dataset-prior indicator: instance counts normalized to sum to one, shaped
/// like a [`MeanScoreVector`] so it can drive margins and sampling in place of
/// tracked scores. The returned vector is meant to stay fixed.
pub fn frequency_indicator(
    class_instance_counts: &[u64],
    background_substitute: f64,
) -> Result<MeanScoreVector> {
    if let Some(i) = class_instance_counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(
            "class_instance_counts",
            format!("class {i} has zero instances"),
        ));
    }
    let total: u64 = class_instance_counts.iter().sum();
    let scores = class_instance_counts
        .iter()
        .map(|&c| c as f64 / total as f64)
        .collect();
    MeanScoreVector::from_scores(scores, 0.0, background_substitute)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn constructor_sets_foreground_and_background_read() {
        let t = MeanScoreVector::new(3, 0.9, 0.01, 0.5).unwrap();
        assert_eq!(t.foreground(), &[0.5, 0.5, 0.5]);
        assert_eq!(t.get(3).unwrap(), 0.01);
        assert_eq!(t.num_classes(), 4);

        let t = MeanScoreVector::new(1, 0.0, 0.01, 1.0).unwrap();
        assert_eq!(t.foreground(), &[1.0]);
    }

    #[test]
    fn constructor_rejects_bad_parameters() {
        assert!(MeanScoreVector::new(2, 1.5, 0.01, 0.5).is_err());
        assert!(MeanScoreVector::new(2, 1.0, 0.01, 0.5).is_err());
        assert!(MeanScoreVector::new(2, -0.1, 0.01, 0.5).is_err());
        assert!(MeanScoreVector::new(2, 0.9, 0.0, 0.5).is_err());
        assert!(MeanScoreVector::new(2, 0.9, 0.01, 0.0).is_err());
        assert!(MeanScoreVector::new(2, 0.9, 0.01, 1.5).is_err());
        assert!(MeanScoreVector::new(2, f64::NAN, 0.01, 0.5).is_err());
        assert!(MeanScoreVector::new(0, 0.9, 0.01, 0.5).is_err());
    }

    #[test]
    fn uniform_init_is_one_over_classes() {
        let t = MeanScoreVector::with_uniform_init(4, 0.9, 0.01).unwrap();
        assert!(t.foreground().iter().all(|&s| s == 0.2));
    }

    #[test]
    fn update_examples() {
        let mut t = MeanScoreVector::new(2, 0.9, 0.01, 0.5).unwrap();
        t.update(0, 0.7).unwrap();
        assert_relative_eq!(t.get(0).unwrap(), 0.52, max_relative = 1e-15);
        assert_eq!(t.get(1).unwrap(), 0.5);

        let mut t = MeanScoreVector::new(1, 0.9, 0.01, 0.3).unwrap();
        t.update(0, 0.3).unwrap();
        assert_relative_eq!(t.get(0).unwrap(), 0.3, max_relative = 1e-15);

        let mut t = MeanScoreVector::new(1, 0.0, 0.01, 0.5).unwrap();
        t.update(0, 0.9).unwrap();
        assert_eq!(t.get(0).unwrap(), 0.9);
    }

    #[test]
    fn update_rejects_background_and_bad_probability() {
        let mut t = MeanScoreVector::new(2, 0.9, 0.01, 0.5).unwrap();
        assert!(matches!(t.update(2, 0.5), Err(Error::BackgroundLabel(2))));
        assert!(t.update(3, 0.5).is_err());
        assert!(t.update(0, 1.1).is_err());
        assert!(t.update(0, -0.1).is_err());
        assert!(t.update(0, f64::NAN).is_err());
        assert_eq!(t.foreground(), &[0.5, 0.5]);
    }

    #[test]
    fn convergence_is_geometric() {
        // |s_n - p| = alpha^n |s_0 - p|; alpha = 0.5 and dyadic values keep it exact.
        let mut t = MeanScoreVector::new(1, 0.5, 0.01, 1.0).unwrap();
        for n in 1..=10 {
            t.update(0, 0.5).unwrap();
            assert_eq!(t.get(0).unwrap() - 0.5, 0.5f64.powi(n) * 0.5);
        }
    }

    #[test]
    fn frequency_indicator_examples() {
        let f = frequency_indicator(&[10, 10, 10], 0.01).unwrap();
        assert!(f.foreground().iter().all(|&s| (s - 1.0 / 3.0).abs() < 1e-15));

        let f = frequency_indicator(&[100, 10, 1], 0.01).unwrap();
        let expected = [100.0 / 111.0, 10.0 / 111.0, 1.0 / 111.0];
        for (a, b) in f.foreground().iter().zip(expected) {
            assert_relative_eq!(*a, b, max_relative = 1e-15);
        }

        assert!(frequency_indicator(&[0, 5], 0.01).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut t = MeanScoreVector::new(3, 0.9, 0.01, 0.25).unwrap();
        t.update(1, 0.123456789).unwrap();
        let text = t.to_snapshot();
        assert_eq!(MeanScoreVector::from_snapshot(&text).unwrap(), t);
        assert!(MeanScoreVector::from_snapshot("alpha = 0.9\n0 = 0.5\n").is_err());
        assert!(MeanScoreVector::from_snapshot("alpha = 0.9\nbackground_substitute = 0.01\n1 = 0.5\n").is_err());
    }

    proptest! {
        #[test]
        fn updates_stay_in_unit_interval_and_background_is_immutable(
            alpha in 0.0f64..0.999,
            init in 1e-6f64..=1.0,
            updates in proptest::collection::vec((0usize..4, 0.0f64..=1.0), 0..200),
        ) {
            let mut t = MeanScoreVector::new(4, alpha, 0.01, init).unwrap();
            for (c, p) in updates {
                t.update(c, p).unwrap();
                prop_assert!(t.foreground().iter().all(|&s| s > 0.0 && s <= 1.0));
                prop_assert_eq!(t.get(4).unwrap(), 0.01);
            }
        }
    }
}
