//! Seeded experiments: one stage-1 run shared by a grid of stage-2 variants,
//! with every artifact stamped by the config digest and seed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, Provenance};
use crate::synthetic_world::{World, WorldSpec};
use crate::trainer::{
    evaluate, init_model, run_stage1, run_stage2, stage2_tracker, EpochRecord, Indicator, StageOutput,
    TrainConfig, HISTORY_HEADER,
};

pub const STAGE1_LABEL: &str = "stage1";

/// One stage-2 configuration of the ablation grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub ebl_enabled: bool,
    pub mfs_enabled: bool,
    #[serde(default)]
    pub indicator: Indicator,
}

impl Variant {
    pub const PRESETS: [&'static str; 5] = ["ce", "ebl", "mfs", "loce", "prior"];

    /// `ce`, `ebl`, `mfs` and `loce` switch the two components; `prior`
    /// is `loce` driven by class frequencies instead of tracked scores.
    pub fn preset(name: &str) -> Option<Self> {
        let (ebl, mfs, indicator) = match name {
            "ce" => (false, false, Indicator::Score),
            "ebl" => (true, false, Indicator::Score),
            "mfs" => (false, true, Indicator::Score),
            "loce" => (true, true, Indicator::Score),
            "prior" => (true, true, Indicator::Frequency),
            _ => return None,
        };
        Some(Self {
            name: name.to_string(),
            ebl_enabled: ebl,
            mfs_enabled: mfs,
            indicator,
        })
    }

    /// Baseline, each component alone, and both together.
    pub fn component_grid() -> Vec<Self> {
        ["ce", "ebl", "mfs", "loce"]
            .iter()
            .map(|n| Self::preset(n).expect("known preset"))
            .collect()
    }

    /// The variant described by a train config's own switches, named after
    /// the matching preset when there is one.
    pub fn from_train(cfg: &TrainConfig) -> Self {
        let mut v = Self {
            name: "custom".to_string(),
            ebl_enabled: cfg.ebl_enabled,
            mfs_enabled: cfg.mfs_enabled,
            indicator: cfg.indicator,
        };
        if let Some(name) = Self::PRESETS
            .iter()
            .find(|n| Self::preset(n).is_some_and(|p| p.same_switches(&v)))
        {
            v.name = name.to_string();
        }
        v
    }

    fn same_switches(&self, other: &Self) -> bool {
        self.ebl_enabled == other.ebl_enabled
            && self.mfs_enabled == other.mfs_enabled
            && self.indicator == other.indicator
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            ebl_enabled: self.ebl_enabled,
            mfs_enabled: self.mfs_enabled,
            indicator: self.indicator,
            ..base.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = !self.name.is_empty()
            && self.name != STAGE1_LABEL
            && self
                .name
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-');
        if !ok {
            return Err(Error::invalid(
                "grid",
                format!(
                    "variant name `{}` must be non-empty [a-z0-9_-] and not `{STAGE1_LABEL}`",
                    self.name
                ),
            ));
        }
        Ok(())
    }
}

/// Everything needed to reproduce a run. Parsed from TOML:
///
/// ```toml
/// seed = 3
/// output_dir = "runs/seed3"
///
/// [world]
/// num_classes = 50
///
/// [train]
/// stage2_epochs = 6
///
/// [[grid]]
/// name = "ce"
/// ebl_enabled = false
/// mfs_enabled = false
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds both the world and training; overrides `world.seed` and
    /// `train.seed`.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Stage-2 variants sharing one stage-1 run. Empty means the single
    /// variant given by `train`'s own switches.
    pub grid: Vec<Variant>,
    pub world: WorldSpec,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            grid: Vec::new(),
            world: WorldSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct DigestView<'a> {
    seed: u64,
    variants: Vec<Variant>,
    world: &'a WorldSpec,
    train: &'a TrainConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format {
            what: "config",
            reason: e.to_string(),
        })?;
        let seed = cfg.seed;
        let cfg = cfg.with_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.world.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Replaces the grid with the named presets.
    pub fn with_presets<S: AsRef<str>>(mut self, names: &[S]) -> Result<Self> {
        self.grid = names
            .iter()
            .map(|n| {
                Variant::preset(n.as_ref()).ok_or_else(|| {
                    Error::invalid(
                        "ablate",
                        format!("unknown variant `{}`; expected one of {:?}", n.as_ref(), Variant::PRESETS),
                    )
                })
            })
            .collect::<Result<_>>()?;
        self.validate()?;
        Ok(self)
    }

    pub fn variants(&self) -> Vec<Variant> {
        if self.grid.is_empty() {
            vec![Variant::from_train(&self.train)]
        } else {
            self.grid.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        let variants = self.variants();
        for (i, v) in variants.iter().enumerate() {
            v.validate()?;
            if variants[..i].iter().any(|u| u.name == v.name) {
                return Err(Error::invalid("grid", format!("duplicate variant `{}`", v.name)));
            }
        }
        Ok(())
    }

    /// SHA-256 of everything that affects results (not `output_dir`).
    pub fn digest(&self) -> String {
        let view = DigestView {
            seed: self.seed,
            variants: self.variants(),
            world: &self.world,
            train: &self.train,
        };
        let json = serde_json::to_string(&view).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: Variant,
    pub output: StageOutput,
    pub report: MetricsReport,
}

/// An experiment held in memory.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub config: ExperimentConfig,
    pub digest: String,
    pub world: World,
    pub stage1: StageOutput,
    pub stage1_report: MetricsReport,
    pub variants: Vec<VariantRun>,
}

/// Runs stage 1 once and every grid variant from its result. `progress`
/// receives one line per finished stage.
pub fn run_experiment(cfg: &ExperimentConfig, mut progress: impl FnMut(&str)) -> Result<ExperimentRun> {
    cfg.validate()?;
    let digest = cfg.digest();
    let provenance = |variant: &str| Provenance {
        config_digest: digest.clone(),
        seed: cfg.seed,
        variant: variant.to_string(),
    };
    let world = World::generate(&cfg.world)?;
    let stage1 = run_stage1(&world, init_model(&world, &cfg.train), &cfg.train)?;
    let mut stage1_report = evaluate(&world, &stage1.model)?;
    stage1_report.provenance = provenance(STAGE1_LABEL);
    progress(&summary_line(STAGE1_LABEL, &stage1_report));
    let mut variants = Vec::new();
    for variant in cfg.variants() {
        let train = variant.apply(&cfg.train);
        let tracker = stage2_tracker(&stage1, &train)?;
        let output = run_stage2(&world, stage1.model.clone(), tracker, &train)?;
        let mut report = evaluate(&world, &output.model)?;
        report.provenance = provenance(&variant.name);
        progress(&summary_line(&variant.name, &report));
        variants.push(VariantRun {
            variant,
            output,
            report,
        });
    }
    Ok(ExperimentRun {
        config: cfg.clone(),
        digest,
        world,
        stage1,
        stage1_report,
        variants,
    })
}

fn summary_line(label: &str, r: &MetricsReport) -> String {
    use crate::synthetic_world::Group;
    format!(
        "{label:<8} balanced {:.4}  rare {:.4}  common {:.4}  frequent {:.4}  dispersion {:.4}",
        r.balanced_accuracy,
        r.group_accuracy(Group::Rare),
        r.group_accuracy(Group::Common),
        r.group_accuracy(Group::Frequent),
        r.score_dispersion
    )
}

#[derive(Serialize)]
struct ExperimentRecord<'a> {
    config_digest: &'a str,
    seed: u64,
    variants: Vec<&'a str>,
    config: &'a ExperimentConfig,
}

impl ExperimentRun {
    /// Writes `experiment.json`, then `report_*.json`, `history_*.csv` and
    /// `checkpoint_*.bin` for stage 1 and each variant. Returns the paths in
    /// write order.
    pub fn write_artifacts(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let record = ExperimentRecord {
            config_digest: &self.digest,
            seed: self.config.seed,
            variants: self.variants.iter().map(|v| v.variant.name.as_str()).collect(),
            config: &self.config,
        };
        let json = serde_json::to_string_pretty(&record).expect("record serializes") + "\n";
        written.push(write_file(dir, "experiment.json", json.as_bytes())?);
        let stage1_rows: Vec<&EpochRecord> = self.stage1.history.iter().collect();
        self.write_set(dir, STAGE1_LABEL, &self.stage1_report, &stage1_rows, &self.stage1, &mut written)?;
        for run in &self.variants {
            let rows: Vec<&EpochRecord> = self.stage1.history.iter().chain(&run.output.history).collect();
            self.write_set(dir, &run.variant.name, &run.report, &rows, &run.output, &mut written)?;
        }
        Ok(written)
    }

    fn write_set(
        &self,
        dir: &Path,
        label: &str,
        report: &MetricsReport,
        history: &[&EpochRecord],
        output: &StageOutput,
        written: &mut Vec<PathBuf>,
    ) -> Result<()> {
        written.push(write_file(dir, &format!("report_{label}.json"), report.to_json().as_bytes())?);
        let prefix = format!("{},{},{label}", self.digest, self.config.seed);
        let mut csv = format!("config_digest,seed,variant,{HISTORY_HEADER}\n");
        for row in history {
            csv.push_str(&format!("{prefix},{}\n", row.csv_row()));
        }
        written.push(write_file(dir, &format!("history_{label}.csv"), csv.as_bytes())?);
        let metadata = format!("config_digest={}\nseed={}\nvariant={label}", self.digest, self.config.seed);
        let mut bytes = Vec::new();
        output
            .model
            .write_checkpoint(&metadata, &mut bytes)
            .expect("writing to memory");
        written.push(write_file(dir, &format!("checkpoint_{label}.bin"), &bytes)?);
        Ok(())
    }
}

pub(crate) fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
