//! Experiment configuration: one JSON file fully determines a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FrozenBackbone};
use crate::datagen::{
    load_features, partition_clients, split_tasks, synth_dataset, ClientPartition, LabeledDataset, PartitionStrategy,
    SynthSpec, TaskStream,
};
use crate::error::{Error, Result};
use crate::federation::{run_experiment, AblationFlags, ExperimentSetup, Outcome, ProtocolConfig};
use crate::numerics::{RngStream, StreamKey};
use crate::prompt::{InjectionConfig, PoolKind, PoolLayout, TrainHyper};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Same as `pip-dualp`.
    Pip,
    BaselineL2p,
    BaselineDualp,
    PipL2p,
    PipDualp,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Pip => "pip",
            Method::BaselineL2p => "baseline-l2p",
            Method::BaselineDualp => "baseline-dualp",
            Method::PipL2p => "pip-l2p",
            Method::PipDualp => "pip-dualp",
        }
    }

    pub fn pool_kind(&self) -> PoolKind {
        match self {
            Method::BaselineL2p | Method::PipL2p => PoolKind::L2p,
            _ => PoolKind::DualP,
        }
    }

    pub fn default_flags(&self) -> AblationFlags {
        match self {
            Method::BaselineL2p | Method::BaselineDualp => AblationFlags::BASELINE,
            _ => AblationFlags::PIP,
        }
    }

    pub fn default_layout(&self) -> PoolLayout {
        match self.pool_kind() {
            PoolKind::L2p => PoolLayout::desk_l2p(),
            PoolKind::DualP => PoolLayout::desk_dualp(),
        }
    }
}

/// Frozen backbone shape; token shape comes from the data and attachment
/// layers from the pool layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            dim: 64,
            layers: 2,
            heads: 4,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    /// Generated per run seed.
    Synthetic(SynthSpec),
    /// Feature CSV, one token per sample; the last `holdout` fraction of
    /// each class (in file order) becomes the test split.
    Features { path: PathBuf, holdout: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSpec {
    pub n_clients: usize,
    pub selected: usize,
    pub rounds: usize,
    pub tasks: usize,
    /// Fraction of a task's classes each client holds.
    pub eta: f64,
    #[serde(default)]
    pub partition: PartitionStrategy,
    #[serde(default)]
    pub strict_head: bool,
    #[serde(default = "one")]
    pub prototype_every: usize,
    #[serde(default)]
    pub mean_only_wire: bool,
    #[serde(default)]
    pub parallel: bool,
    #[serde(default)]
    pub injection: InjectionConfig,
}

fn one() -> usize {
    1
}

impl FederationSpec {
    pub fn reference() -> Self {
        FederationSpec {
            n_clients: 6,
            selected: 3,
            rounds: 25,
            tasks: 5,
            eta: 0.6,
            partition: PartitionStrategy::default(),
            strict_head: false,
            prototype_every: 1,
            mean_only_wire: false,
            parallel: false,
            injection: InjectionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Overrides the method's switches (ablation configurations).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flags: Option<AblationFlags>,
    #[serde(default)]
    pub backbone: BackboneSpec,
    /// Overrides the method's default pool layout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<PoolLayout>,
    pub federation: FederationSpec,
    #[serde(default)]
    pub hyper: TrainHyper,
    pub data: DataSpec,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

fn at(path: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{path}: {m}")),
        other => Error::Config(format!("{path}: {other}")),
    }
}

impl ExperimentConfig {
    /// The synthetic benchmark: 30 classes in 5 tasks over 6 clients.
    pub fn reference(method: Method) -> Self {
        ExperimentConfig {
            method,
            flags: None,
            backbone: BackboneSpec::default(),
            layout: None,
            federation: FederationSpec::reference(),
            hyper: TrainHyper::default(),
            data: DataSpec::Synthetic(SynthSpec::reference()),
            seeds: vec![2021, 2022, 2023],
            output_dir: PathBuf::from("out"),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("line {}: {e}", e.line())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        // feature paths are relative to the config file
        if let DataSpec::Features { path: data, .. } = &mut cfg.data {
            if data.is_relative() {
                *data = path.parent().unwrap_or(Path::new(".")).join(&*data);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    pub fn flags(&self) -> AblationFlags {
        self.flags.unwrap_or_else(|| self.method.default_flags())
    }

    pub fn layout(&self) -> PoolLayout {
        self.layout.clone().unwrap_or_else(|| self.method.default_layout())
    }

    /// Method name, suffixed with the ablation letter when flags are overridden.
    pub fn label(&self) -> String {
        match self.flags {
            Some(f) if f != self.method.default_flags() => {
                format!("{}[{}]", self.method.name(), f.letter().unwrap_or("custom"))
            }
            _ => self.method.name().to_string(),
        }
    }

    pub fn protocol(&self) -> ProtocolConfig {
        let f = &self.federation;
        ProtocolConfig {
            n_clients: f.n_clients,
            selected: f.selected,
            rounds: f.rounds,
            tasks: f.tasks,
            flags: self.flags(),
            injection: f.injection,
            strict_head: f.strict_head,
            prototype_every: f.prototype_every,
            mean_only_wire: f.mean_only_wire,
            parallel: f.parallel,
        }
    }

    fn token_shape(&self) -> Option<(usize, usize)> {
        match &self.data {
            DataSpec::Synthetic(s) => Some((s.n_tokens, s.d_in)),
            DataSpec::Features { .. } => None,
        }
    }

    /// Backbone for data with `n_tokens × d_in` inputs.
    pub fn backbone_config(&self, n_tokens: usize, d_in: usize) -> BackboneConfig {
        BackboneConfig {
            d_in,
            n_tokens,
            dim: self.backbone.dim,
            layers: self.backbone.layers,
            heads: self.backbone.heads,
            seed: self.backbone.seed,
            attach_layers: self.layout().attach_layers(),
        }
    }

    /// Every error names the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("seeds: duplicate seed".into()));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir: must not be empty".into()));
        }
        if let Some(f) = self.flags {
            if f.prototypes != f.augmentation && f.augmentation {
                return Err(Error::Config("flags.augmentation: requires flags.prototypes".into()));
            }
        }
        let layout = self.layout();
        if layout.kind != self.method.pool_kind() {
            return Err(Error::Config(format!(
                "layout.kind: {:?} does not match method {}",
                layout.kind,
                self.method.name()
            )));
        }
        layout.validate().map_err(|e| at("layout", e))?;
        self.hyper.validate().map_err(|e| at("hyper", e))?;
        let f = &self.federation;
        if !(f.eta > 0.0 && f.eta <= 1.0) {
            return Err(Error::Config(format!("federation.eta: {} outside (0, 1]", f.eta)));
        }
        self.protocol().validate().map_err(|e| at("federation", e))?;
        match &self.data {
            DataSpec::Synthetic(s) => {
                if s.n_classes % f.tasks != 0 {
                    return Err(Error::Config(format!(
                        "data.n_classes: {} not divisible by federation.tasks {}",
                        s.n_classes, f.tasks
                    )));
                }
            }
            DataSpec::Features { holdout, .. } => {
                if !(*holdout > 0.0 && *holdout < 1.0) {
                    return Err(Error::Config(format!("data.holdout: {holdout} outside (0, 1)")));
                }
            }
        }
        if let Some((n_tokens, d_in)) = self.token_shape() {
            let bb = self.backbone_config(n_tokens, d_in);
            bb.validate().map_err(|e| at("backbone", e))?;
            layout.validate_for(&bb).map_err(|e| at("layout", e))?;
        }
        Ok(())
    }

    fn dataset(&self, seed: u64) -> Result<LabeledDataset> {
        match &self.data {
            DataSpec::Synthetic(s) => synth_dataset(s, seed),
            DataSpec::Features { path, holdout } => load_features(path)?.with_holdout(*holdout),
        }
    }

    /// Backbone, task stream and per-task partitions for one seed.
    pub fn scenario(&self, seed: u64) -> Result<Scenario> {
        let data = self.dataset(seed)?;
        let bb_cfg = self.backbone_config(data.n_tokens, data.d_in);
        bb_cfg.validate().map_err(|e| at("backbone", e))?;
        self.layout().validate_for(&bb_cfg).map_err(|e| at("layout", e))?;
        let backbone = FrozenBackbone::build(&bb_cfg)?;
        let stream = split_tasks(&data, self.federation.tasks, seed)?;
        if let Some(t) = stream.tasks.iter().position(|t| t.n_test() == 0 || t.n_train() == 0) {
            return Err(Error::Config(format!("data: task {} has an empty train or test split", t + 1)));
        }
        let partitions = stream
            .tasks
            .iter()
            .enumerate()
            .map(|(t, task)| {
                let mut rng = RngStream::new(seed, StreamKey::new("partition", t as u64, 0, 0));
                partition_clients(task, self.federation.n_clients, self.federation.eta, self.federation.partition, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scenario {
            backbone,
            stream,
            partitions,
        })
    }

    pub fn run_seed(&self, seed: u64, reference_avg: Option<f64>) -> Result<Outcome> {
        let sc = self.scenario(seed)?;
        let setup = sc.setup(self, seed, reference_avg);
        run_experiment(&setup)
    }
}

pub struct Scenario {
    pub backbone: FrozenBackbone,
    pub stream: TaskStream,
    pub partitions: Vec<ClientPartition>,
}

impl Scenario {
    pub fn setup<'a>(&'a self, cfg: &ExperimentConfig, seed: u64, reference_avg: Option<f64>) -> ExperimentSetup<'a> {
        ExperimentSetup {
            method: cfg.label(),
            backbone: &self.backbone,
            layout: cfg.layout(),
            hyper: cfg.hyper,
            protocol: cfg.protocol(),
            stream: &self.stream,
            partitions: &self.partitions,
            seed,
            reference_avg,
        }
    }
}
