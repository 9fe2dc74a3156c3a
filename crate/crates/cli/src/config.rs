//! Training configuration: JSON file plus `--key value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use udmamba_core::losses::LossConfig;
use udmamba_core::network::{Ablation, NetworkConfig};
use udmamba_core::synth::SynthConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    /// Fractions of the total step count at which the rate is multiplied
    /// by `lr_gamma`.
    pub milestones: Vec<f64>,
    pub lr_gamma: f64,
    /// Rescale the gradient so its global L2 norm is at most this; `null`
    /// disables clipping.
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// Initialization and shuffling seed.
    pub seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Dataset directory; synthesized from `synth` when absent.
    pub data_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    /// Preset applied over `network` scan toggles.
    pub ablation: Option<Ablation>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            epochs: 10,
            max_steps: None,
            milestones: vec![0.6, 0.85],
            lr_gamma: 0.1,
            grad_clip: Some(1.0),
            batch_size: 4,
            eval_batch_size: 8,
            seed: 0,
            val_fraction: 0.125,
            test_fraction: 0.125,
            data_dir: None,
            synth: SynthConfig::default(),
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            ablation: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.milestones.iter().any(|m| !(*m > 0.0 && *m < 1.0)) || self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones must be strictly increasing in (0, 1), got {:?}", self.milestones));
        }
        if self.lr_gamma.is_nan() || self.lr_gamma <= 0.0 {
            return bad(format!("lr_gamma must be positive, got {}", self.lr_gamma));
        }
        if let Some(c) = self.grad_clip.filter(|c| c.is_nan() || *c <= 0.0) {
            return bad(format!("grad_clip must be positive, got {c}"));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.epochs == 0 {
            return bad("epochs, batch_size and eval_batch_size must be positive".into());
        }
        self.synth.validate()?;
        let net = self.network_config();
        net.validate()?;
        self.loss.validate(net.num_classes)?;
        Ok(())
    }

    /// Network configuration with the ablation preset applied.
    pub fn network_config(&self) -> NetworkConfig {
        let mut net = self.network.clone();
        if let Some(a) = self.ablation {
            a.apply(&mut net);
        }
        net
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(TrainConfig::default()).expect("serializable"),
        };
        apply_overrides(&mut value, overrides)?;
        let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parse `--a.b value` / `--a.b=value` pairs; values are JSON when they
/// parse as JSON and strings otherwise.
pub fn parse_overrides(args: &[String]) -> CliResult<Vec<(String, Value)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            return Err(CliError::Config(format!("expected `--key value`, got `{arg}`")));
        };
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| CliError::Config(format!("missing value for --{key}")))?;
                (key.to_string(), v.clone())
            }
        };
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(CliError::Config(format!("malformed key `{key}`")));
        }
        let v = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        out.push((key, v));
    }
    Ok(out)
}

pub fn apply_overrides(root: &mut Value, args: &[String]) -> CliResult<()> {
    for (key, v) in parse_overrides(args)? {
        let mut node = &mut *root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            if !node.is_object() {
                *node = Value::Object(Default::default());
            }
            node = node.as_object_mut().expect("object").entry(part.to_string()).or_insert(Value::Null);
        }
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        node.as_object_mut().expect("object").insert(parts[parts.len() - 1].to_string(), v);
    }
    Ok(())
}
