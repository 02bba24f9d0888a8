//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aulm::AulmConfig;
use crate::error::{Error, FormatError, Result};
use crate::nn::{Init, Network, NetworkSpec, SgdConfig, Shape3};
use crate::prox::RegularizerKind;
use crate::prune::prunable_layers;
use crate::report::BenchConfig;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkChoice {
    #[default]
    Lenet,
    ToyResnet { input: Shape3, classes: usize },
}

impl NetworkChoice {
    pub fn spec(&self) -> NetworkSpec {
        match self {
            Self::Lenet => NetworkSpec::lenet(),
            Self::ToyResnet { input, classes } => NetworkSpec::toy_resnet(*input, *classes),
        }
    }
}

/// One λ per prunable layer, or several such groups solved in turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaPlan {
    Fixed(Vec<f32>),
    Sweep(Vec<Vec<f32>>),
}

impl LambdaPlan {
    pub fn groups(&self) -> Vec<Vec<f32>> {
        match self {
            Self::Fixed(g) => vec![g.clone()],
            Self::Sweep(gs) => gs.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl DataPaths {
    /// The standard IDX file names inside `dir`.
    pub fn mnist_in(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }
}

impl Default for DataPaths {
    fn default() -> Self {
        Self::mnist_in("data/mnist")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkChoice,
    pub regularizer: RegularizerKind,
    pub lambdas: LambdaPlan,
    pub seed: u64,
    pub init: Init,
    pub train: SgdConfig,
    pub train_epochs: usize,
    pub aulm: AulmConfig,
    pub finetune: SgdConfig,
    pub finetune_epochs: usize,
    pub bench: BenchConfig,
    pub data: DataPaths,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkChoice::Lenet,
            regularizer: RegularizerKind::L21,
            lambdas: LambdaPlan::Fixed(vec![0.5, 0.5, 0.5]),
            seed: 1,
            init: Init::Glorot,
            train: SgdConfig::lenet_baseline(),
            train_epochs: 6,
            aulm: AulmConfig::default(),
            finetune: SgdConfig::finetune_default(),
            finetune_epochs: 30,
            bench: BenchConfig::default(),
            data: DataPaths::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// The λ groups tried on LeNet, each as (conv1, conv2, fc1).
pub const LENET_LAMBDA_GROUPS: [[f32; 3]; 6] = [
    [0.1, 0.1, 0.3],
    [0.3, 0.3, 0.4],
    [0.3, 0.5, 0.5],
    [0.4, 0.5, 0.5],
    [0.5, 0.4, 0.5],
    [0.5, 0.5, 0.5],
];

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(FormatError::Config(e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Format(FormatError::Config(msg)));
        self.train.validate()?;
        self.finetune.validate()?;
        self.aulm.validate()?;
        let spec = self.network.spec();
        spec.validate()?;
        let net: Network = Network::init(spec, 0)?;
        let prunable = prunable_layers(&net);
        let groups = self.lambdas.groups();
        if groups.is_empty() {
            return bad("lambdas must hold at least one group".into());
        }
        for g in &groups {
            if g.len() != prunable.len() {
                return bad(format!(
                    "lambda group {g:?} has {} entries but the network has {} prunable layers ({})",
                    g.len(),
                    prunable.len(),
                    prunable.join(", ")
                ));
            }
            if g.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
                return bad(format!("lambda group {g:?} has a negative or non-finite entry"));
            }
        }
        Ok(())
    }
}
