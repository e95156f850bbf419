//! Small two-layer backbone with a classification head and a box head,
//! trained by hand-written backpropagation and momentum SGD.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Affine layer, weights row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    /// He-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain * (2.0 / in_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        Self {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Accumulates `dL/dW += g x^T`, `dL/db += g` and returns `dL/dx`.
    fn backward(&self, x: &[f64], g: &[f64], grad: &mut Dense, want_input_grad: bool) -> Vec<f64> {
        for ((row, gb), &gi) in grad
            .weight
            .chunks_exact_mut(self.in_dim)
            .zip(grad.bias.iter_mut())
            .zip(g)
        {
            if gi == 0.0 {
                continue;
            }
            *gb += gi;
            for (w, v) in row.iter_mut().zip(x) {
                *w += gi * v;
            }
        }
        if !want_input_grad {
            return Vec::new();
        }
        let mut dx = vec![0.0; self.in_dim];
        for (row, &gi) in self.weight.chunks_exact(self.in_dim).zip(g) {
            if gi == 0.0 {
                continue;
            }
            for (d, w) in dx.iter_mut().zip(row) {
                *d += gi * w;
            }
        }
        dx
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(&self.bias)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    fn fill(&mut self, v: f64) {
        self.params_mut().for_each(|p| *p = v);
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// `feature -> hidden -> representation -> {logits, box deltas}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub hidden: Dense,
    pub representation: Dense,
    pub classifier: Dense,
    pub box_head: Dense,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BackboneActivations {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub representation: Vec<f64>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(
        feature_dim: usize,
        hidden_dim: usize,
        repr_dim: usize,
        num_classes_with_background: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Dense::init(feature_dim, hidden_dim, 1.0, rng),
            representation: Dense::init(hidden_dim, repr_dim, 1.0, rng),
            classifier: Dense::init(repr_dim, num_classes_with_background, 0.5, rng),
            box_head: Dense::init(repr_dim, 4, 0.1, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden.in_dim
    }

    pub fn repr_dim(&self) -> usize {
        self.representation.out_dim
    }

    pub fn backbone(&self, feature: &[f64]) -> BackboneActivations {
        let mut hidden = self.hidden.forward(feature);
        relu_in_place(&mut hidden);
        let mut representation = self.representation.forward(&hidden);
        relu_in_place(&mut representation);
        BackboneActivations {
            input: feature.to_vec(),
            hidden,
            representation,
        }
    }

    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        self.classifier.forward(&self.backbone(feature).representation)
    }

    pub fn reinit_classifier<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let (i, o) = (self.classifier.in_dim, self.classifier.out_dim);
        self.classifier = Dense::init(i, o, 0.5, rng);
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: Dense::zeros(self.hidden.in_dim, self.hidden.out_dim),
            representation: Dense::zeros(self.representation.in_dim, self.representation.out_dim),
            classifier: Dense::zeros(self.classifier.in_dim, self.classifier.out_dim),
            box_head: Dense::zeros(self.box_head.in_dim, self.box_head.out_dim),
        }
    }

    fn layers(&self) -> [(&'static str, &Dense); 4] {
        [
            ("hidden", &self.hidden),
            ("representation", &self.representation),
            ("classifier", &self.classifier),
            ("box_head", &self.box_head),
        ]
    }

    fn layers_mut(&mut self) -> [&mut Dense; 4] {
        [
            &mut self.hidden,
            &mut self.representation,
            &mut self.classifier,
            &mut self.box_head,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|(_, l)| l.params().all(|p| p.is_finite()))
    }

    /// SHA-256 over the backbone parameters.
    pub fn backbone_checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.hidden.params().chain(self.representation.params()) {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Flat binary checkpoint: magic `LOCECKPT`, `u32` version, a
    /// `u32`-length UTF-8 metadata string (free-form provenance, may be
    /// empty), `u32` tensor count, then per tensor a `u32`-length UTF-8 name,
    /// `u32` rows, `u32` cols and `rows * cols` row-major `f64`. All integers
    /// and floats are little-endian. Each layer contributes `<name>.weight`
    /// (out x in) and `<name>.bias` (1 x out).
    pub fn write_checkpoint<W: Write>(&self, metadata: &str, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(metadata.len() as u32).to_le_bytes())?;
        w.write_all(metadata.as_bytes())?;
        w.write_all(&8u32.to_le_bytes())?;
        for (name, layer) in self.layers() {
            let tensors = [
                ("weight", layer.out_dim, layer.in_dim, &layer.weight),
                ("bias", 1, layer.out_dim, &layer.bias),
            ];
            for (suffix, rows, cols, data) in tensors {
                let full = format!("{name}.{suffix}");
                w.write_all(&(full.len() as u32).to_le_bytes())?;
                w.write_all(full.as_bytes())?;
                w.write_all(&(rows as u32).to_le_bytes())?;
                w.write_all(&(cols as u32).to_le_bytes())?;
                for v in data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Inverse of [`Model::write_checkpoint`]; returns the model and its
    /// metadata string.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Self, String)> {
        let bad = |reason: String| Error::Format {
            what: "checkpoint",
            reason,
        };
        let io = |e: std::io::Error| bad(e.to_string());
        let read_u32 = |r: &mut R| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(io)?;
            Ok(u32::from_le_bytes(b))
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut metadata = vec![0u8; meta_len];
        r.read_exact(&mut metadata).map_err(io)?;
        let metadata = String::from_utf8(metadata).map_err(|e| bad(e.to_string()))?;
        let count = read_u32(&mut r)?;
        if count != 8 {
            return Err(bad(format!("expected 8 tensors, found {count}")));
        }
        let mut tensors = Vec::with_capacity(8);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut data = vec![0.0; rows * cols];
            let mut b = [0u8; 8];
            for v in &mut data {
                r.read_exact(&mut b).map_err(io)?;
                *v = f64::from_le_bytes(b);
            }
            tensors.push((name, rows, cols, data));
        }
        let mut it = tensors.into_iter();
        let mut layer = |name: &str| -> Result<Dense> {
            let (wn, out_dim, in_dim, weight) = it.next().expect("count checked");
            let (bn, one, bias_len, bias) = it.next().expect("count checked");
            if wn != format!("{name}.weight") || bn != format!("{name}.bias") {
                return Err(bad(format!("unexpected tensors {wn}, {bn}")));
            }
            if one != 1 || bias_len != out_dim {
                return Err(bad(format!("{name}: bias shape does not match weight")));
            }
            Ok(Dense {
                in_dim,
                out_dim,
                weight,
                bias,
            })
        };
        let model = Model {
            hidden: layer("hidden")?,
            representation: layer("representation")?,
            classifier: layer("classifier")?,
            box_head: layer("box_head")?,
        };
        if model.hidden.out_dim != model.representation.in_dim
            || model.representation.out_dim != model.classifier.in_dim
            || model.classifier.in_dim != model.box_head.in_dim
            || model.box_head.out_dim != 4
        {
            return Err(bad("layer shapes do not chain".into()));
        }
        Ok((model, metadata))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LOCECKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Gradient accumulator with the same shapes as the model.
#[derive(Debug, Clone)]
pub struct Gradients(pub Model);

impl Gradients {
    pub fn zeros_for(model: &Model) -> Self {
        Self(model.zeros_like())
    }

    pub fn clear(&mut self) {
        for l in self.0.layers_mut() {
            l.fill(0.0);
        }
    }

    /// Accumulates the head gradients for one instance and returns the
    /// gradient with respect to the representation.
    pub fn accumulate_heads(
        &mut self,
        model: &Model,
        representation: &[f64],
        logit_grad: &[f64],
        box_grad: Option<&[f64]>,
        want_repr_grad: bool,
    ) -> Vec<f64> {
        let mut dr = model.classifier.backward(
            representation,
            logit_grad,
            &mut self.0.classifier,
            want_repr_grad,
        );
        if let Some(g) = box_grad {
            let db = model
                .box_head
                .backward(representation, g, &mut self.0.box_head, want_repr_grad);
            for (a, b) in dr.iter_mut().zip(db) {
                *a += b;
            }
        }
        dr
    }

    /// Backpropagates a representation gradient through the backbone.
    pub fn accumulate_backbone(&mut self, model: &Model, acts: &BackboneActivations, repr_grad: &[f64]) {
        let g: Vec<f64> = repr_grad
            .iter()
            .zip(&acts.representation)
            .map(|(g, r)| if *r > 0.0 { *g } else { 0.0 })
            .collect();
        let dh = model
            .representation
            .backward(&acts.hidden, &g, &mut self.0.representation, true);
        let g: Vec<f64> = dh
            .iter()
            .zip(&acts.hidden)
            .map(|(g, h)| if *h > 0.0 { *g } else { 0.0 })
            .collect();
        model.hidden.backward(&acts.input, &g, &mut self.0.hidden, false);
    }
}

/// Which layers an optimizer step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    HeadsOnly,
}

/// SGD with classical momentum and optional L2 weight decay.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    velocity: Model,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl MomentumSgd {
    pub fn new(model: &Model, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: model.zeros_like(),
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f64, trainable: Trainable) {
        let first = match trainable {
            Trainable::All => 0,
            Trainable::HeadsOnly => 2,
        };
        let params = model.layers_mut();
        let vels = self.velocity.layers_mut();
        let gs = grads.0.layers();
        for ((p, v), (_, g)) in params.into_iter().zip(vels).zip(gs).skip(first) {
            for ((pi, vi), gi) in p.params_mut().zip(v.params_mut()).zip(g.params()) {
                let grad = gi + self.weight_decay * *pi;
                *vi = self.momentum * *vi + grad;
                *pi -= lr * *vi;
            }
        }
    }
}

/// Smooth-L1 (Huber with unit threshold) summed over coordinates, and its
/// gradient with respect to the prediction.
pub fn smooth_l1(prediction: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = prediction
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < 1.0 {
                loss += 0.5 * d * d;
                d
            } else {
                loss += d.abs() - 0.5;
                d.signum()
            }
        })
        .collect();
    (loss, grad)
}
