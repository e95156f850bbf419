//! Reproducible long-tailed instance datasets and the frozen feature
//! extractor that stands in for an image backbone.
//!
//! Each class owns a prototype on a sphere. An instance's latent vector is its
//! prototype plus Gaussian noise, and it carries a ground-truth box. Features
//! for a proposal box are a fixed random projection of the latent vector
//! concatenated with the proposal's geometry relative to the ground truth
//! (regression target and `1 - IoU`), plus optional observation noise.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::box_geometry::{encode_target, iou, sample_box, BBox};
use crate::error::{Error, Result};
use crate::seeding::{self, stream_rng};

/// Geometry inputs appended to the latent vector: `dx, dy, dw, dh, 1 - IoU`.
pub const GEOMETRY_INPUTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub num_classes: usize,
    pub zipf_exponent: f64,
    pub total_instances: usize,
    pub feature_dim: usize,
    pub val_per_class: usize,
    /// Per-dimension standard deviation of instances around their prototype.
    pub cluster_spread: f64,
    /// Radius of the prototype sphere.
    pub inter_class_separation: f64,
    /// Prototypes are rejection-sampled to keep at least this angle apart.
    pub min_pairwise_angle_deg: f64,
    /// Background centers lie on a sphere this many times the prototype
    /// radius.
    pub background_radius_factor: f64,
    /// Per-dimension standard deviation of background features around their
    /// off-prototype centers.
    pub background_spread: f64,
    pub observation_noise: f64,
    /// Scale of the proposal-geometry inputs before projection.
    pub geometry_weight: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            num_classes: 50,
            zipf_exponent: 1.5,
            total_instances: 20_000,
            feature_dim: 32,
            val_per_class: 80,
            cluster_spread: 0.8,
            inter_class_separation: 4.0,
            min_pairwise_angle_deg: 30.0,
            background_radius_factor: 2.0,
            background_spread: 1.0,
            observation_noise: 0.1,
            geometry_weight: 1.0,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes", "need at least 2 classes"));
        }
        if self.total_instances < self.num_classes {
            return Err(Error::invalid(
                "total_instances",
                format!(
                    "{} instances cannot cover {} classes",
                    self.total_instances, self.num_classes
                ),
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim", "must be positive"));
        }
        let positive = [
            ("cluster_spread", self.cluster_spread),
            ("inter_class_separation", self.inter_class_separation),
            ("background_spread", self.background_spread),
            ("background_radius_factor", self.background_radius_factor),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("{v} must be positive")));
            }
        }
        let non_negative = [
            ("zipf_exponent", self.zipf_exponent),
            ("observation_noise", self.observation_noise),
            ("geometry_weight", self.geometry_weight),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, format!("{v} must be non-negative")));
            }
        }
        if !(0.0..90.0).contains(&self.min_pairwise_angle_deg) {
            return Err(Error::invalid("min_pairwise_angle_deg", "must be in [0, 90)"));
        }
        Ok(())
    }

    /// Unrounded train counts, `total * r^-a / sum_r r^-a` for rank `r = y + 1`.
    pub fn expected_counts(&self) -> Vec<f64> {
        let weights: Vec<f64> = (1..=self.num_classes)
            .map(|r| (r as f64).powf(-self.zipf_exponent))
            .collect();
        let norm: f64 = weights.iter().sum();
        weights
            .into_iter()
            .map(|w| self.total_instances as f64 * w / norm)
            .collect()
    }

    /// Rounded train counts with a floor of one instance per class.
    pub fn train_counts(&self) -> Vec<usize> {
        self.expected_counts()
            .into_iter()
            .map(|c| (c.round() as usize).max(1))
            .collect()
    }

    /// Upper train-count bounds of the rare and common groups: a tenth of the
    /// mean per-class count and the mean itself, floored at 2 and 10.
    pub fn group_thresholds(&self) -> GroupThresholds {
        let mean = self.total_instances as f64 / self.num_classes as f64;
        GroupThresholds {
            rare_max: ((mean / 10.0).floor() as usize).max(2),
            common_max: (mean.floor() as usize).max(10),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupThresholds {
    pub rare_max: usize,
    pub common_max: usize,
}

impl GroupThresholds {
    pub fn group(&self, train_count: usize) -> Group {
        if train_count <= self.rare_max {
            Group::Rare
        } else if train_count <= self.common_max {
            Group::Common
        } else {
            Group::Frequent
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Rare,
    Common,
    Frequent,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Rare, Group::Common, Group::Frequent];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Rare => "rare",
            Group::Common => "common",
            Group::Frequent => "frequent",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: usize,
    pub class: usize,
    pub gt_box: BBox,
    pub latent: Vec<f64>,
    pub split: Split,
}

/// Generated dataset plus the frozen feature extractor.
#[derive(Debug, Clone)]
pub struct World {
    spec: WorldSpec,
    prototypes: Vec<Vec<f64>>,
    /// Row-major `feature_dim x (feature_dim + GEOMETRY_INPUTS)`.
    projection: Vec<f64>,
    train: Vec<Instance>,
    val: Vec<Instance>,
    train_counts: Vec<usize>,
    thresholds: GroupThresholds,
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let n: f64 = StandardNormal.sample(rng);
            scale * n
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, d, 1.0);
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn random_box<R: Rng + ?Sized>(rng: &mut R) -> BBox {
    let x1 = rng.random_range(0.0..200.0);
    let y1 = rng.random_range(0.0..200.0);
    let w = rng.random_range(16.0..128.0);
    let h = rng.random_range(16.0..128.0);
    BBox::new(x1, y1, x1 + w, y1 + h).expect("positive extent")
}

const MAX_REJECTIONS: usize = 100_000;

fn sample_prototypes(spec: &WorldSpec) -> Result<Vec<Vec<f64>>> {
    let mut rng = stream_rng(spec.seed, seeding::PROTOTYPES);
    let max_cos = spec.min_pairwise_angle_deg.to_radians().cos();
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        let mut tries = 0;
        let dir = loop {
            let cand = random_unit(&mut rng, spec.feature_dim);
            let ok = dirs
                .iter()
                .all(|d| d.iter().zip(&cand).map(|(a, b)| a * b).sum::<f64>() <= max_cos);
            if ok {
                break cand;
            }
            tries += 1;
            if tries == MAX_REJECTIONS {
                return Err(Error::invalid(
                    "min_pairwise_angle_deg",
                    "cannot place prototypes this far apart in the feature dimension",
                ));
            }
        };
        dirs.push(dir);
    }
    Ok(dirs
        .into_iter()
        .map(|d| d.into_iter().map(|x| x * spec.inter_class_separation).collect())
        .collect())
}

/// Orthonormal block for the latent part (distances preserved), Gaussian
/// block for the geometry part.
fn sample_projection(spec: &WorldSpec) -> Vec<f64> {
    let d = spec.feature_dim;
    let cols = d + GEOMETRY_INPUTS;
    let mut rng = stream_rng(spec.seed, seeding::PROJECTION);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = gaussian_vec(&mut rng, d, 1.0);
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let geometry_scale = 1.0 / (GEOMETRY_INPUTS as f64).sqrt();
    let mut out = Vec::with_capacity(d * cols);
    for row in basis {
        out.extend(row);
        out.extend(gaussian_vec(&mut rng, GEOMETRY_INPUTS, geometry_scale));
    }
    out
}

fn digest_f64s<'a>(rows: impl IntoIterator<Item = &'a f64>) -> String {
    let mut h = Sha256::new();
    for v in rows {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl World {
    /// Train split follows the rank-power law; val is balanced. Same spec,
    /// same world.
    pub fn generate(spec: &WorldSpec) -> Result<Self> {
        spec.validate()?;
        let prototypes = sample_prototypes(spec)?;
        let projection = sample_projection(spec);
        let train_counts = spec.train_counts();
        let mut rng = stream_rng(spec.seed, seeding::INSTANCES);
        let mut make = |id: usize, class: usize, split: Split| Instance {
            id,
            class,
            gt_box: random_box(&mut rng),
            latent: prototypes[class]
                .iter()
                .zip(gaussian_vec(&mut rng, spec.feature_dim, spec.cluster_spread))
                .map(|(p, n)| p + n)
                .collect(),
            split,
        };
        let mut train = Vec::with_capacity(train_counts.iter().sum());
        for (class, &count) in train_counts.iter().enumerate() {
            for _ in 0..count {
                train.push(make(train.len(), class, Split::Train));
            }
        }
        let mut val = Vec::with_capacity(spec.val_per_class * spec.num_classes);
        for class in 0..spec.num_classes {
            for _ in 0..spec.val_per_class {
                val.push(make(train.len() + val.len(), class, Split::Val));
            }
        }
        Ok(Self {
            thresholds: spec.group_thresholds(),
            spec: spec.clone(),
            prototypes,
            projection,
            train,
            val,
            train_counts,
        })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn background_label(&self) -> usize {
        self.spec.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn train(&self) -> &[Instance] {
        &self.train
    }

    pub fn val(&self) -> &[Instance] {
        &self.val
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    pub fn train_counts(&self) -> &[usize] {
        &self.train_counts
    }

    pub fn thresholds(&self) -> GroupThresholds {
        self.thresholds
    }

    pub fn group_of(&self, class: usize) -> Group {
        self.thresholds.group(self.train_counts[class])
    }

    pub fn groups(&self) -> Vec<Group> {
        (0..self.num_classes()).map(|c| self.group_of(c)).collect()
    }

    pub fn prototypes_digest(&self) -> String {
        digest_f64s(self.prototypes.iter().flatten())
    }

    pub fn projection_digest(&self) -> String {
        digest_f64s(&self.projection)
    }

    fn project(&self, latent: &[f64], geometry: &[f64; GEOMETRY_INPUTS]) -> Vec<f64> {
        let d = self.spec.feature_dim;
        let cols = d + GEOMETRY_INPUTS;
        let gw = self.spec.geometry_weight;
        self.projection
            .chunks_exact(cols)
            .map(|row| {
                let (lat_w, geo_w) = row.split_at(d);
                let a: f64 = lat_w.iter().zip(latent).map(|(w, x)| w * x).sum();
                let b: f64 = geo_w.iter().zip(geometry).map(|(w, x)| w * x).sum();
                a + gw * b
            })
            .collect()
    }

    fn add_observation_noise(&self, feature: &mut [f64], noise_key: u64) {
        if self.spec.observation_noise == 0.0 {
            return;
        }
        let mut rng = stream_rng(
            seeding::derive_seed(self.spec.seed, seeding::OBSERVATION),
            noise_key,
        );
        for v in feature {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += self.spec.observation_noise * n;
        }
    }

    /// Feature of `instance` seen through `proposal`. `noise_key` selects the
    /// observation-noise draw; `None` gives the noiseless feature.
    pub fn extract_feature(
        &self,
        instance: &Instance,
        proposal: &BBox,
        noise_key: Option<u64>,
    ) -> Result<Vec<f64>> {
        proposal.validate()?;
        let overlap = iou(proposal, &instance.gt_box);
        if overlap <= 0.0 {
            return Err(Error::invalid("proposal", "box does not overlap the instance"));
        }
        let t = encode_target(proposal, &instance.gt_box);
        let geometry = [t.dx, t.dy, t.dw, t.dh, 1.0 - overlap];
        let mut f = self.project(&instance.latent, &geometry);
        if let Some(key) = noise_key {
            self.add_observation_noise(&mut f, key);
        }
        Ok(f)
    }

    /// Off-prototype latent center: a random point on the background sphere
    /// more than three cluster spreads away from every prototype.
    pub fn background_center<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let min_dist = 3.0 * self.spec.cluster_spread;
        let radius = self.spec.inter_class_separation * self.spec.background_radius_factor;
        for _ in 0..MAX_REJECTIONS {
            let c: Vec<f64> = random_unit(rng, self.spec.feature_dim)
                .into_iter()
                .map(|x| x * radius)
                .collect();
            if self.prototypes.iter().all(|p| distance(p, &c) > min_dist) {
                return c;
            }
        }
        // Only reachable when the background sphere nearly coincides with the
        // prototype sphere in very low dimension.
        self.prototypes[0].iter().map(|x| -x * self.spec.background_radius_factor).collect()
    }

    /// Background feature with its label. Geometry inputs come from a random
    /// jitter so they carry no class information.
    pub fn background_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let mut latent = self.background_center(rng);
        for v in &mut latent {
            let n: f64 = StandardNormal.sample(rng);
            *v += self.spec.background_spread * n;
        }
        let gt = BBox::new(0.0, 0.0, 1.0, 1.0).expect("unit box");
        let proposal = sample_box(&gt, None, rng);
        let t = encode_target(&proposal, &gt);
        let geometry = [t.dx, t.dy, t.dw, t.dh, 1.0 - iou(&proposal, &gt)];
        let mut f = self.project(&latent, &geometry);
        self.add_observation_noise(&mut f, rng.random());
        (f, self.background_label())
    }

    /// Dataset CSV: `id,class,split,x1,y1,x2,y2,l0,...`, train rows first.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "id,class,split,x1,y1,x2,y2")?;
        for i in 0..self.spec.feature_dim {
            write!(w, ",l{i}")?;
        }
        writeln!(w)?;
        for inst in self.train.iter().chain(&self.val) {
            let split = match inst.split {
                Split::Train => "train",
                Split::Val => "val",
            };
            let b = &inst.gt_box;
            let mut line = format!(
                "{},{},{},{:?},{:?},{:?},{:?}",
                inst.id, inst.class, split, b.x1, b.y1, b.x2, b.y2
            );
            for v in &inst.latent {
                let _ = write!(line, ",{v:?}");
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Sidecar metadata; `csv_sha256` is left empty until the CSV is written.
    pub fn sidecar(&self, config_digest: Option<&str>) -> DatasetSidecar {
        DatasetSidecar {
            config_digest: config_digest.map(str::to_string),
            csv_sha256: String::new(),
            spec: self.spec.clone(),
            train_counts: self.train_counts.clone(),
            thresholds: self.thresholds,
            groups: self.groups(),
            prototypes_sha256: self.prototypes_digest(),
            projection_sha256: self.projection_digest(),
        }
    }

    /// Writes `dataset.csv` and `dataset.json` into `dir`. The sidecar
    /// records the CSV's SHA-256 and, if given, the digest of the config the
    /// world came from.
    pub fn export(&self, dir: &Path, config_digest: Option<&str>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("dataset.csv");
        let mut csv = Vec::new();
        self.write_csv(&mut csv).expect("writing to memory");
        std::fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
        let mut sidecar = self.sidecar(config_digest);
        sidecar.csv_sha256 = hex::encode(Sha256::digest(&csv));
        let json_path = dir.join("dataset.json");
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))
    }

    /// Reads a dataset written by [`World::export`]. Prototypes and the
    /// projection are rebuilt from the recorded spec and checked against the
    /// stored digests.
    pub fn import(dir: &Path) -> Result<Self> {
        let json_path = dir.join("dataset.json");
        let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let sidecar: DatasetSidecar = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "dataset sidecar",
            reason: e.to_string(),
        })?;
        let spec = sidecar.spec;
        spec.validate()?;
        let prototypes = sample_prototypes(&spec)?;
        let projection = sample_projection(&spec);
        if digest_f64s(prototypes.iter().flatten()) != sidecar.prototypes_sha256
            || digest_f64s(&projection) != sidecar.projection_sha256
        {
            return Err(Error::Format {
                what: "dataset sidecar",
                reason: "prototype or projection digest does not match the spec".into(),
            });
        }
        let csv_path = dir.join("dataset.csv");
        let csv = std::fs::read(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        if hex::encode(Sha256::digest(&csv)) != sidecar.csv_sha256 {
            return Err(Error::Format {
                what: "dataset csv",
                reason: "SHA-256 does not match the sidecar".into(),
            });
        }
        let (train, val) = read_instances(csv.as_slice(), &spec)?;
        let mut train_counts = vec![0; spec.num_classes];
        for inst in &train {
            train_counts[inst.class] += 1;
        }
        Ok(Self {
            thresholds: spec.group_thresholds(),
            spec,
            prototypes,
            projection,
            train,
            val,
            train_counts,
        })
    }
}

fn read_instances<R: BufRead>(r: R, spec: &WorldSpec) -> Result<(Vec<Instance>, Vec<Instance>)> {
    let bad = |line: usize, reason: String| Error::Format {
        what: "dataset csv",
        reason: format!("line {line}: {reason}"),
    };
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| bad(i + 1, e.to_string()))?;
        if i == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 + spec.feature_dim {
            return Err(bad(i + 1, format!("expected {} fields", 7 + spec.feature_dim)));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 1, e.to_string()));
        let id = fields[0].parse().map_err(|_| bad(i + 1, "bad id".into()))?;
        let class: usize = fields[1].parse().map_err(|_| bad(i + 1, "bad class".into()))?;
        if class >= spec.num_classes {
            return Err(bad(i + 1, format!("class {class} out of range")));
        }
        let gt_box = BBox::new(num(fields[3])?, num(fields[4])?, num(fields[5])?, num(fields[6])?)
            .map_err(|e| bad(i + 1, e.to_string()))?;
        let latent = fields[7..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        let (split, dest) = match fields[2] {
            "train" => (Split::Train, &mut train),
            "val" => (Split::Val, &mut val),
            other => return Err(bad(i + 1, format!("unknown split `{other}`"))),
        };
        dest.push(Instance {
            id,
            class,
            gt_box,
            latent,
            split,
        });
    }
    Ok((train, val))
}

/// JSON metadata written next to the dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    #[serde(default)]
    pub config_digest: Option<String>,
    pub csv_sha256: String,
    pub spec: WorldSpec,
    pub train_counts: Vec<usize>,
    pub thresholds: GroupThresholds,
    pub groups: Vec<Group>,
    pub prototypes_sha256: String,
    pub projection_sha256: String,
}
