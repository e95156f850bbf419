//! Per-class FIFO feature queues and the inverse-score class sampler.

use std::collections::VecDeque;
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::box_geometry::RegressionTarget;
use crate::error::{Error, Result};
use crate::score_tracker::MeanScoreVector;

/// Stored instance feature together with its box-regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub feature: Vec<f64>,
    pub target: RegressionTarget,
    pub class: usize,
}

/// How the `k` classes of one draw are chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassDraw {
    #[default]
    WithReplacement,
    WithoutReplacement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Classes per draw.
    pub k: usize,
    /// Features per selected class.
    pub m: usize,
    pub class_draw: ClassDraw,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k: 8,
            m: 4,
            class_draw: ClassDraw::WithReplacement,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 {
            return Err(Error::invalid("sampler", "k and m must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FeatureMemory {
    queues: Vec<VecDeque<MemoryEntry>>,
    capacity: usize,
    feature_dim: usize,
}

impl FeatureMemory {
    pub fn new(num_foreground_classes: usize, capacity: usize, feature_dim: usize) -> Result<Self> {
        if num_foreground_classes == 0 || capacity == 0 || feature_dim == 0 {
            return Err(Error::invalid(
                "feature memory",
                "classes, capacity and feature dimension must all be positive",
            ));
        }
        Ok(Self {
            queues: (0..num_foreground_classes)
                .map(|_| VecDeque::with_capacity(capacity))
                .collect(),
            capacity,
            feature_dim,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.queues.len()
    }

    pub fn queue(&self, class: usize) -> Option<&VecDeque<MemoryEntry>> {
        self.queues.get(class)
    }

    pub fn len(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(VecDeque::is_empty)
    }

    fn check(&self, e: &MemoryEntry) -> Result<()> {
        if e.class == self.queues.len() {
            return Err(Error::BackgroundLabel(e.class));
        }
        if e.class > self.queues.len() {
            return Err(Error::ClassOutOfRange {
                index: e.class,
                num_classes: self.queues.len() + 1,
            });
        }
        if e.feature.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                actual: e.feature.len(),
            });
        }
        if e.feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("memory feature"));
        }
        Ok(())
    }

    /// Appends entries in order, evicting the oldest once a queue exceeds
    /// capacity. Nothing is inserted if any entry is invalid.
    pub fn enqueue(&mut self, entries: Vec<MemoryEntry>) -> Result<()> {
        for e in &entries {
            self.check(e)?;
        }
        for e in entries {
            let q = &mut self.queues[e.class];
            if q.len() == self.capacity {
                q.pop_front();
            }
            q.push_back(e);
        }
        Ok(())
    }

    /// Draws `k` classes from [`class_probabilities`] and `m` stored entries
    /// for each. Queues shorter than `m` are sampled with replacement; empty
    /// queues contribute nothing.
    pub fn sample<'a, R: Rng + ?Sized>(
        &'a self,
        s: &MeanScoreVector,
        cfg: &SamplerConfig,
        rng: &mut R,
    ) -> Result<Vec<&'a MemoryEntry>> {
        cfg.validate()?;
        if s.num_foreground() != self.queues.len() {
            return Err(Error::DimensionMismatch {
                expected: self.queues.len(),
                actual: s.num_foreground(),
            });
        }
        let mut out = Vec::with_capacity(cfg.k * cfg.m);
        if self.is_empty() {
            return Ok(out);
        }
        for class in draw_classes(&class_probabilities(s), cfg, rng) {
            let q = &self.queues[class];
            if q.is_empty() {
                continue;
            }
            if q.len() >= cfg.m {
                out.extend(index::sample(rng, q.len(), cfg.m).into_iter().map(|i| &q[i]));
            } else {
                out.extend((0..cfg.m).map(|_| &q[rng.random_range(0..q.len())]));
            }
        }
        Ok(out)
    }

    /// CSV dump: `class,dx,dy,dw,dh,f0,...` with one row per stored entry,
    /// classes in index order and entries oldest first.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "class,dx,dy,dw,dh")?;
        for i in 0..self.feature_dim {
            write!(w, ",f{i}")?;
        }
        writeln!(w)?;
        for e in self.queues.iter().flatten() {
            write!(w, "{}", e.class)?;
            for v in e.target.to_array().iter().chain(&e.feature) {
                write!(w, ",{v:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Sampling probability per foreground class, proportional to `1 / s_y`.
pub fn class_probabilities(s: &MeanScoreVector) -> Vec<f64> {
    let inv: Vec<f64> = s.foreground().iter().map(|&v| 1.0 / v).collect();
    let total: f64 = inv.iter().sum();
    inv.into_iter().map(|v| v / total).collect()
}

fn draw_classes<R: Rng + ?Sized>(probs: &[f64], cfg: &SamplerConfig, rng: &mut R) -> Vec<usize> {
    let mut dist = WeightedIndex::new(probs).expect("probabilities are positive and finite");
    match cfg.class_draw {
        ClassDraw::WithReplacement => (0..cfg.k).map(|_| dist.sample(rng)).collect(),
        ClassDraw::WithoutReplacement => {
            let n = cfg.k.min(probs.len());
            let mut picked = Vec::with_capacity(n);
            for _ in 0..n {
                let c = dist.sample(rng);
                picked.push(c);
                if picked.len() < n {
                    dist.update_weights(&[(c, &0.0)])
                        .expect("remaining classes keep positive weight");
                }
            }
            picked
        }
    }
}
