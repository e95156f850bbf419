//! Axis-aligned boxes, IoU, dense jitter around ground truth, and
//! center/log-size regression targets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box as `[x1, y1, x2, y2]` with `x2 > x1` and `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("box coordinates"));
        }
        if self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::invalid("box", format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Clips to `[0, width] x [0, height]`. Fails if nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Result<Self> {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Jitter magnitudes `eta` in `[0, 1]` and a sign per coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterSample {
    pub eta: [f64; 4],
    pub signs: [i8; 4],
}

impl JitterSample {
    pub fn new(eta: [f64; 4], signs: [i8; 4]) -> Result<Self> {
        if eta.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::invalid("eta", format!("{eta:?} not in [0, 1]")));
        }
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::invalid("signs", format!("{signs:?} not in {{-1, +1}}")));
        }
        Ok(Self { eta, signs })
    }

    pub fn zero() -> Self {
        Self {
            eta: [0.0; 4],
            signs: [1; 4],
        }
    }

    /// Every side moved toward the box center.
    pub fn inward(eta: [f64; 4]) -> Result<Self> {
        Self::new(eta, [1, 1, -1, -1])
    }

    /// Every side moved away from the box center.
    pub fn outward(eta: [f64; 4]) -> Result<Self> {
        Self::new(eta, [-1, -1, 1, 1])
    }

    /// Uniform `eta` and independent fair signs.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut eta = [0.0; 4];
        let mut signs = [1i8; 4];
        for i in 0..4 {
            eta[i] = rng.random::<f64>();
            signs[i] = if rng.random::<bool>() { 1 } else { -1 };
        }
        Self { eta, signs }
    }
}

/// Dense box around `gt`: each coordinate moves by at most a sixth of the
/// corresponding side length.
pub fn generate_box(gt: &BBox, jitter: &JitterSample) -> Result<BBox> {
    let w = gt.width();
    let h = gt.height();
    let shift = |i: usize, extent: f64| f64::from(jitter.signs[i]) * jitter.eta[i] * extent / 6.0;
    BBox::new(
        gt.x1 + shift(0, w),
        gt.y1 + shift(1, h),
        gt.x2 + shift(2, w),
        gt.y2 + shift(3, h),
    )
}

/// Draws jitters until the box reaches `min_iou` with `gt`; with no
/// threshold the first draw is returned.
pub fn sample_box<R: Rng + ?Sized>(gt: &BBox, min_iou: Option<f64>, rng: &mut R) -> BBox {
    loop {
        let candidate = generate_box(gt, &JitterSample::random(rng))
            .expect("jitter of at most w/6 per side cannot collapse a valid box");
        match min_iou {
            Some(t) if iou(&candidate, gt) <= t => continue,
            _ => return candidate,
        }
    }
}

/// Offsets from a proposal to its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionTarget {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl RegressionTarget {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            dx: a[0],
            dy: a[1],
            dw: a[2],
            dh: a[3],
        }
    }
}

pub fn encode_target(proposal: &BBox, gt: &BBox) -> RegressionTarget {
    let (px, py) = proposal.center();
    let (gx, gy) = gt.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    RegressionTarget {
        dx: (gx - px) / pw,
        dy: (gy - py) / ph,
        dw: (gt.width() / pw).ln(),
        dh: (gt.height() / ph).ln(),
    }
}

/// Inverse of [`encode_target`].
pub fn decode_target(proposal: &BBox, target: &RegressionTarget) -> Result<BBox> {
    let (px, py) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = px + target.dx * pw;
    let cy = py + target.dy * ph;
    let w = pw * target.dw.exp();
    let h = ph * target.dh.exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}
