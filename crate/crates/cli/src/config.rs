use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crfnet::crf_net::{InferenceConfig, NetworkConfig};
use crfnet::dataset::{SynthConfig, DEFAULT_SPLIT};
use crfnet::training::{network_for_mode, Filters, Mode, TrainConfig};

use crate::Failure;

pub const RUN_CONFIG_FILE: &str = "run_config.toml";

/// Everything a command needs, after merging the config file with flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed: dataset generation, split, initialization and training order.
    pub seed: u64,
    pub mode: Mode,
    pub filters: Filters,
    /// Scenes written by `synth-gen`.
    pub num_scenes: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub synth: SynthConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            mode: Mode::Fusion,
            filters: Filters::Af,
            num_scenes: 200,
            split: DEFAULT_SPLIT,
            synth: SynthConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub filters: Option<Filters>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
    }

    /// Applies flag overrides and derives the dependent fields: the
    /// training seed follows `seed`, the network input follows the
    /// generator image size and its radar channels follow `mode`.
    pub fn resolve(mut self, o: Overrides) -> Result<Self, Failure> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.mode {
            self.mode = m;
        }
        if let Some(f) = o.filters {
            self.filters = f;
        }
        self.train.seed = self.seed;
        self.network = network_for_mode(&self.network, self.mode);
        self.network.input_size = [self.synth.height as usize, self.synth.width as usize];
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), Failure> {
        self.synth.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        if self.num_scenes == 0 {
            return Err(Failure::Config("num_scenes must be positive".into()));
        }
        if self.split.iter().any(|r| !r.is_finite() || *r < 0.0) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Failure::Config(format!("split ratios {:?} must be non-negative and sum to 1", self.split)));
        }
        let i = &self.inference;
        if !(0.0..1.0).contains(&i.score_threshold) || !(0.0..=1.0).contains(&i.nms_threshold) || i.max_detections == 0 {
            return Err(Failure::Config(format!("invalid inference settings {i:?}")));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
        let path = dir.join(RUN_CONFIG_FILE);
        let text = toml::to_string(self).map_err(|e| Failure::Config(format!("serializing run config: {e}")))?;
        fs::write(&path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
    }
}
