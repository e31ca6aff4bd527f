//! JSON experiment configuration with defaults and strict key checking.
//!
//! The file holds up to five sections -- `model`, `fed`, `attack`, `data`,
//! `output` -- each optional. An empty object `{}` resolves to the full
//! default experiment (5 clients, 50 rounds, 1 local epoch, batch 24,
//! momentum 0.9, PGD with epsilon 8/255, alpha 2/255, 7 steps, adversarial
//! ratio 0.5). Unknown keys are rejected with the offending name.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::data::{PartitionKind, PartitionSpec};
use crate::error::{Error, Result};
use crate::federation::{AggregatorKind, FedConfig};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RawConfig {
    pub model: ModelSection,
    pub fed: FedSection,
    pub attack: AttackSection,
    pub data: DataSection,
    pub output: OutputSection,
}

impl Default for RawConfig {
    fn default() -> Self {
        RawConfig {
            model: ModelSection::default(),
            fed: FedSection::default(),
            attack: AttackSection::default(),
            data: DataSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub head_type: crate::model::HeadType,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            image_h: m.image_h,
            image_w: m.image_w,
            channels: m.channels,
            patch_size: m.patch_size,
            embed_dim: m.embed_dim,
            num_heads: m.num_heads,
            depth: m.depth,
            num_classes: m.num_classes,
            head_type: m.head_type,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedSection {
    pub clients: usize,
    pub fraction: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub adv_ratio: f64,
    /// One of "fedavg", "fedprox", "fedgate", "scaffold", "fedwavg".
    pub aggregator: String,
    /// Softmax scale for fedwavg.
    pub q: f64,
    /// Proximal coefficient for fedprox.
    pub mu: f64,
    pub seed: u64,
}

impl Default for FedSection {
    fn default() -> Self {
        FedSection {
            clients: 5,
            fraction: 1.0,
            rounds: 50,
            local_epochs: 1,
            batch_size: 24,
            lr: 0.1,
            lr_decay: 0.05,
            momentum: 0.9,
            adv_ratio: 0.5,
            aggregator: "fedavg".into(),
            q: 10.0,
            mu: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        let a = AttackConfig::default();
        AttackSection {
            epsilon: a.epsilon,
            alpha: a.alpha,
            steps: a.steps,
            random_start: a.random_start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// "blobs" for the synthetic generator, "idx" for IDX image/label files.
    pub source: String,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub spread: f64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// "iid" or "class_restricted".
    pub partition: String,
    pub classes_per_client: usize,
    /// Partition/generation seed; defaults to the run seed when absent.
    pub seed: Option<u64>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: "blobs".into(),
            samples_per_class: 60,
            test_samples_per_class: 20,
            spread: 0.25,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            partition: "iid".into(),
            classes_per_client: 4,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Write final.fatc with the aggregated model.
    pub checkpoint: bool,
    /// Emit svcca.csv with final-round drift pairs.
    pub svcca: bool,
    /// Encoder layers measured by the drift report; defaults to the first
    /// and last block.
    pub svcca_layers: Option<Vec<usize>>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            checkpoint: true,
            svcca: false,
            svcca_layers: None,
        }
    }
}

/// Fully resolved experiment: validated model/fed configs plus data plumbing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub model: ModelConfig,
    pub fed: FedConfig,
    pub data: DataSection,
    pub partition: PartitionSpec,
    pub output: OutputSection,
}

fn resolve_aggregator(fed: &FedSection) -> Result<AggregatorKind> {
    match fed.aggregator.as_str() {
        "fedavg" => Ok(AggregatorKind::Fedavg),
        "fedprox" => Ok(AggregatorKind::Fedprox { mu: fed.mu }),
        "fedgate" => Ok(AggregatorKind::Fedgate),
        "scaffold" => Ok(AggregatorKind::Scaffold),
        "fedwavg" => Ok(AggregatorKind::Fedwavg { q: fed.q }),
        other => Err(Error::Config(format!(
            "unknown aggregator {other:?} (expected fedavg, fedprox, fedgate, scaffold or fedwavg)"
        ))),
    }
}

pub fn resolve(raw: &RawConfig) -> Result<ResolvedConfig> {
    let m = &raw.model;
    let model = ModelConfig {
        image_h: m.image_h,
        image_w: m.image_w,
        channels: m.channels,
        patch_size: m.patch_size,
        embed_dim: m.embed_dim,
        num_heads: m.num_heads,
        depth: m.depth,
        num_classes: m.num_classes,
        head_type: m.head_type,
    };
    model.validate()?;
    let attack = AttackConfig {
        epsilon: raw.attack.epsilon,
        alpha: raw.attack.alpha,
        steps: raw.attack.steps,
        random_start: raw.attack.random_start,
    };
    if attack.epsilon < 0.0 || attack.alpha < 0.0 {
        return Err(Error::Config("attack epsilon/alpha must be >= 0".into()));
    }
    let f = &raw.fed;
    if f.clients == 0 {
        return Err(Error::Config("fed.clients must be >= 1".into()));
    }
    if !(f.fraction > 0.0 && f.fraction <= 1.0) {
        return Err(Error::Config(format!(
            "fed.fraction {} outside (0, 1]",
            f.fraction
        )));
    }
    if !(0.0..=1.0).contains(&f.adv_ratio) {
        return Err(Error::InvalidRatio(f.adv_ratio));
    }
    if !(0.0..1.0).contains(&f.lr_decay) {
        return Err(Error::InvalidDecayRate(f.lr_decay));
    }
    if f.batch_size == 0 {
        return Err(Error::Config("fed.batch_size must be >= 1".into()));
    }
    let fed = FedConfig {
        clients: f.clients,
        fraction: f.fraction,
        rounds: f.rounds,
        local_epochs: f.local_epochs,
        batch_size: f.batch_size,
        lr: f.lr,
        lr_decay: f.lr_decay,
        momentum: f.momentum,
        attack,
        adv_ratio: f.adv_ratio,
        aggregator: resolve_aggregator(f)?,
        seed: f.seed,
    };
    let d = &raw.data;
    match d.source.as_str() {
        "blobs" => {
            if d.samples_per_class == 0 || d.test_samples_per_class == 0 {
                return Err(Error::Config("data sample counts must be >= 1".into()));
            }
            if d.spread <= 0.0 {
                return Err(Error::Config("data.spread must be > 0".into()));
            }
        }
        "idx" => {
            for (name, p) in [
                ("data.train_images", &d.train_images),
                ("data.train_labels", &d.train_labels),
                ("data.test_images", &d.test_images),
                ("data.test_labels", &d.test_labels),
            ] {
                if p.is_none() {
                    return Err(Error::Config(format!("{name} required for idx source")));
                }
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown data source {other:?} (expected blobs or idx)"
            )))
        }
    }
    let kind = match d.partition.as_str() {
        "iid" => PartitionKind::Iid,
        "class_restricted" => {
            if d.classes_per_client == 0 {
                return Err(Error::Config("data.classes_per_client must be >= 1".into()));
            }
            PartitionKind::ClassRestricted {
                classes_per_client: d.classes_per_client,
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown partition {other:?} (expected iid or class_restricted)"
            )))
        }
    };
    let partition = PartitionSpec {
        kind,
        seed: d.seed.unwrap_or(fed.seed),
    };
    if let Some(layers) = &raw.output.svcca_layers {
        for &l in layers {
            if l >= model.depth {
                return Err(Error::LayerOutOfRange {
                    layer: l,
                    depth: model.depth,
                });
            }
        }
    }
    Ok(ResolvedConfig {
        model,
        fed,
        data: d.clone(),
        partition,
        output: raw.output.clone(),
    })
}

pub fn parse_config_str(text: &str) -> Result<ResolvedConfig> {
    let raw: RawConfig =
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    resolve(&raw)
}

pub fn parse_config(path: &Path) -> Result<ResolvedConfig> {
    let text = fs::read_to_string(path)?;
    parse_config_str(&text)
}
