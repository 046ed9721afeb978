//! Experiment configuration: JSON parsing, defaults, validation and presets.
//!
//! Every invariant the runner relies on is checked here, so a config that
//! parses also runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::TrainConfig;
use crate::error::{Error, Result};
use crate::server::VoteCount;
use crate::world::{build_world, PartitionSpec};

/// Which knowledge-transfer protocol the clients and server speak.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Clients upload labels, confidence weights and representations.
    #[default]
    #[serde(alias = "rep")]
    Representation,
    /// Clients upload class logits only.
    Logit,
    /// Single-modality clients; contrastive weights come from augmented views.
    #[serde(alias = "uni")]
    Unimodal,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Representation => "representation",
            Variant::Logit => "logit",
            Variant::Unimodal => "unimodal",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rep" | "representation" => Ok(Variant::Representation),
            "logit" => Ok(Variant::Logit),
            "uni" | "unimodal" => Ok(Variant::Unimodal),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected rep, logit or uni)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub image_dim: usize,
    pub text_dim: usize,
    /// Fraction of classes the pretrained generator renders as another class.
    pub corruption: f64,
    pub noise_std: f64,
    pub dirichlet_alpha: f64,
    pub samples_per_client: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            image_dim: 16,
            text_dim: 16,
            corruption: 0.3,
            noise_std: 0.5,
            dirichlet_alpha: 0.5,
            samples_per_client: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths assigned to clients round-robin.
    pub hidden_dims: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![24, 32, 40, 48],
        }
    }
}

impl ModelConfig {
    pub fn hidden_dim(&self, client: usize) -> usize {
        self.hidden_dims[client % self.hidden_dims.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    /// Initial decoder step size (cosine-annealed over the run).
    pub learning_rate: f64,
    /// Decoder fine-tuning epochs per round.
    pub finetune_epochs: usize,
    /// Client retraining epochs per round.
    pub retrain_epochs: usize,
    pub batch_size: usize,
    pub generation_noise: f64,
    /// Norm of the fused representation inside the decoder input.
    pub mr_scale: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            finetune_epochs: 5,
            retrain_epochs: 5,
            batch_size: 10,
            generation_noise: 0.25,
            mr_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub beta: f64,
    pub p_drop: f64,
    /// Records per contrastive scoring batch.
    pub batch_size: usize,
    /// Tokens per representation in cross-attention.
    pub ca_tokens: usize,
    pub vote_count: VoteCount,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            p_drop: 0.2,
            batch_size: 16,
            ca_tokens: 4,
            vote_count: VoteCount::Count,
        }
    }
}

/// Constants of the analytic communication accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommConfig {
    pub float_bytes: u64,
    /// Bytes per synthetic image sent to an image client.
    pub image_bytes: u64,
    /// Bytes per synthetic text sent to a text client.
    pub text_bytes: u64,
}

impl Default for CommConfig {
    fn default() -> Self {
        Self {
            float_bytes: 4,
            image_bytes: 64 * 64 * 3,
            text_bytes: 64 * 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Fresh held-out samples per class and modality.
    pub heldout_per_class: usize,
    /// Generations per class for the generator accuracy test.
    pub gan_test_per_class: usize,
    /// Loss-increase slack for the monotonicity check, as a fraction of the initial loss.
    pub monotonicity_slack: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            heldout_per_class: 50,
            gan_test_per_class: 20,
            monotonicity_slack: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub rounds: usize,
    pub num_clients: usize,
    pub num_image_clients: usize,
    pub synthetic_per_round: usize,
    pub num_classes: usize,
    pub rep_dim: usize,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub server: ServerConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub comm: CommConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

pub const REQUIRED_FIELDS: [&str; 6] = [
    "rounds",
    "num_clients",
    "num_image_clients",
    "synthetic_per_round",
    "num_classes",
    "rep_dim",
];

fn check(cond: bool, field: &str, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(format!("{field}: {msg}")))
    }
}

fn unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

fn positive(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}

impl ProtocolConfig {
    /// Desk-scale defaults. The server step size is raised from the
    /// config default to a value that moves the desk-scale decoder.
    pub fn desk() -> Self {
        Self {
            rounds: 5,
            num_clients: 4,
            num_image_clients: 2,
            synthetic_per_round: 50,
            num_classes: 10,
            rep_dim: 32,
            variant: Variant::Representation,
            seed: 0,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            server: ServerConfig {
                learning_rate: 0.2,
                ..ServerConfig::default()
            },
            fusion: FusionConfig::default(),
            comm: CommConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            num_clients: self.num_clients,
            num_image_clients: self.num_image_clients,
            dirichlet_alpha: self.world.dirichlet_alpha,
            samples_per_client: self.world.samples_per_client,
        }
    }

    pub fn num_text_clients(&self) -> usize {
        self.num_clients - self.num_image_clients
    }

    pub fn is_single_modality(&self) -> bool {
        self.num_image_clients == 0 || self.num_image_clients == self.num_clients
    }

    /// The protocol actually run: the representation variant over a single
    /// modality has no cross-modal partner and runs the unimodal path.
    pub fn effective_variant(&self) -> Variant {
        match self.variant {
            Variant::Representation if self.is_single_modality() => Variant::Unimodal,
            v => v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check(self.rounds >= 1, "rounds", "must be at least 1")?;
        check(self.num_clients >= 1, "num_clients", "must be at least 1")?;
        check(
            self.num_image_clients <= self.num_clients,
            "num_image_clients",
            "must not exceed num_clients",
        )?;
        check(self.num_classes >= 2, "num_classes", "must be at least 2")?;
        check(
            self.rep_dim >= self.num_classes,
            "rep_dim",
            "must be at least num_classes so the generator's prompt embeddings are independent",
        )?;
        check(self.fusion.ca_tokens >= 1, "fusion.ca_tokens", "must be at least 1")?;
        check(
            self.rep_dim.is_multiple_of(self.fusion.ca_tokens),
            "rep_dim",
            "must be divisible by fusion.ca_tokens",
        )?;
        if self.variant == Variant::Unimodal {
            check(
                self.is_single_modality(),
                "variant",
                "unimodal requires num_image_clients == num_clients or == 0",
            )?;
        }

        let w = &self.world;
        check(w.image_dim >= 2, "world.image_dim", "must be at least 2")?;
        check(w.text_dim >= 2, "world.text_dim", "must be at least 2")?;
        check(unit(w.corruption), "world.corruption", "must lie in [0, 1]")?;
        check(positive(w.noise_std), "world.noise_std", "must be positive")?;
        check(positive(w.dirichlet_alpha), "world.dirichlet_alpha", "must be positive")?;
        check(w.samples_per_client >= 1, "world.samples_per_client", "must be positive")?;

        check(!self.model.hidden_dims.is_empty(), "model.hidden_dims", "must not be empty")?;
        check(
            self.model.hidden_dims.iter().all(|&h| h >= 1),
            "model.hidden_dims",
            "entries must be positive",
        )?;

        self.train
            .validate()
            .map_err(|e| Error::Config(format!("train: {e}")))?;

        let s = &self.server;
        check(positive(s.learning_rate), "server.learning_rate", "must be positive")?;
        check(s.batch_size >= 1, "server.batch_size", "must be positive")?;
        check(
            s.generation_noise >= 0.0 && s.generation_noise.is_finite(),
            "server.generation_noise",
            "must be non-negative",
        )?;
        check(
            s.mr_scale >= 0.0 && s.mr_scale.is_finite(),
            "server.mr_scale",
            "must be non-negative",
        )?;

        let f = &self.fusion;
        check(unit(f.beta), "fusion.beta", "must lie in [0, 1]")?;
        check(unit(f.p_drop), "fusion.p_drop", "must lie in [0, 1]")?;
        check(f.batch_size >= 2, "fusion.batch_size", "must be at least 2")?;

        let c = &self.comm;
        check(c.float_bytes >= 1, "comm.float_bytes", "must be positive")?;
        check(c.image_bytes >= 1, "comm.image_bytes", "must be positive")?;
        check(c.text_bytes >= 1, "comm.text_bytes", "must be positive")?;

        let e = &self.eval;
        check(e.heldout_per_class >= 1, "eval.heldout_per_class", "must be positive")?;
        check(e.gan_test_per_class >= 1, "eval.gan_test_per_class", "must be positive")?;
        check(
            e.monotonicity_slack >= 0.0 && e.monotonicity_slack.is_finite(),
            "eval.monotonicity_slack",
            "must be non-negative",
        )?;

        build_world(
            self.num_classes,
            w.image_dim,
            w.text_dim,
            w.corruption,
            w.noise_std,
            self.seed,
        )
        .map_err(|e| Error::Config(format!("world: {e}")))?;
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses and validates a config from JSON text, applying defaults.
pub fn parse_config_str(text: &str) -> Result<ProtocolConfig> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
    let missing: Vec<&str> = REQUIRED_FIELDS
        .iter()
        .copied()
        .filter(|f| !obj.contains_key(*f))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "missing required fields: {}",
            missing.join(", ")
        )));
    }
    let cfg: ProtocolConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{path}: {}", e.into_inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ProtocolConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPreset {
    pub name: &'static str,
    pub description: &'static str,
    pub config: ProtocolConfig,
}

/// Shipped presets in stable (alphabetical) order.
pub fn list_presets() -> Vec<ExperimentPreset> {
    let desk = ProtocolConfig::desk();

    let comm_reference = ProtocolConfig {
        rounds: 1,
        num_clients: 8,
        num_image_clients: 4,
        synthetic_per_round: 100,
        num_classes: 102,
        rep_dim: 768,
        world: WorldConfig {
            samples_per_client: 400,
            ..WorldConfig::default()
        },
        server: ServerConfig::default(),
        eval: EvalConfig {
            heldout_per_class: 10,
            gan_test_per_class: 5,
            ..EvalConfig::default()
        },
        ..desk.clone()
    };

    let flowers = ProtocolConfig {
        num_clients: 8,
        num_image_clients: 4,
        synthetic_per_round: 200,
        num_classes: 102,
        rep_dim: 256,
        world: WorldConfig {
            image_dim: 32,
            text_dim: 32,
            samples_per_client: 600,
            ..WorldConfig::default()
        },
        eval: EvalConfig {
            heldout_per_class: 10,
            gan_test_per_class: 5,
            ..EvalConfig::default()
        },
        ..desk.clone()
    };

    let desk_iid = ProtocolConfig {
        rounds: 10,
        world: WorldConfig {
            dirichlet_alpha: 100.0,
            ..WorldConfig::default()
        },
        ..desk.clone()
    };

    let food = ProtocolConfig {
        num_classes: 101,
        seed: 1,
        ..flowers.clone()
    };

    let smoke = ProtocolConfig {
        rounds: 1,
        num_clients: 4,
        num_image_clients: 2,
        synthetic_per_round: 20,
        num_classes: 5,
        rep_dim: 16,
        world: WorldConfig {
            image_dim: 8,
            text_dim: 8,
            samples_per_client: 60,
            ..WorldConfig::default()
        },
        eval: EvalConfig {
            heldout_per_class: 20,
            gan_test_per_class: 10,
            ..EvalConfig::default()
        },
        ..desk.clone()
    };

    vec![
        ExperimentPreset {
            name: "comm-reference",
            description: "Communication-cost reference setting: K=8 (4 image, 4 text), |Ds|=100, C=102, d=768, B=4",
            config: comm_reference,
        },
        ExperimentPreset {
            name: "desk",
            description: "Desk-scale defaults: C=10, d=32, K=4 (2 image, 2 text), |Ds|=50, T=5",
            config: desk,
        },
        ExperimentPreset {
            name: "desk-iid",
            description: "Desk scale with near-IID clients (alpha=100), T=10: label-repair and generator-repair setting",
            config: desk_iid,
        },
        ExperimentPreset {
            name: "flowers-analog",
            description: "102-class desk-scale analog with 8 mixed-modality clients",
            config: flowers,
        },
        ExperimentPreset {
            name: "food-analog",
            description: "101-class desk-scale analog with 8 mixed-modality clients",
            config: food,
        },
        ExperimentPreset {
            name: "smoke",
            description: "One-round smoke test: K=4, C=5, |Ds|=20",
            config: smoke,
        },
    ]
}

pub fn preset(name: &str) -> Result<ProtocolConfig> {
    list_presets()
        .into_iter()
        .find(|p| p.name == name)
        .map(|p| p.config)
        .ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))
}
