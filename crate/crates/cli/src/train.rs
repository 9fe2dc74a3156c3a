//! SGD training loop with multi-step decay, per-step and per-epoch logs,
//! reweighting-scalar trace, and best/final checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use udmamba_core::io::Checkpoint;
use udmamba_core::losses::{supervised_loss, total_loss};
use udmamba_core::network::Network;
use udmamba_core::synth::Dataset;
use udmamba_core::{Error, Tensor};

use crate::config::TrainConfig;
use crate::error::{CliError, CliResult};
use crate::evaluate::evaluate;

pub const STEPS_CSV: &str = "steps.csv";
pub const EPOCHS_CSV: &str = "epochs.csv";
pub const ALPHA_CSV: &str = "alpha.csv";
pub const BEST_CKPT: &str = "best.udck";
pub const FINAL_CKPT: &str = "final.udck";
pub const SUMMARY_JSON: &str = "summary.json";

/// Momentum SGD (`buf = mu * buf + g; w -= lr * buf`).
pub struct Sgd {
    momentum: f64,
    buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, buffers: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        if self.buffers.is_empty() {
            self.buffers = grads.iter().map(|g| g.to_vec()).collect();
        } else {
            for (buf, g) in self.buffers.iter_mut().zip(grads) {
                for (b, &gi) in buf.iter_mut().zip(*g) {
                    *b = self.momentum * *b + gi;
                }
            }
        }
        for (p, buf) in params.iter_mut().zip(&self.buffers) {
            for (w, b) in p.iter_mut().zip(buf) {
                *w -= lr * b;
            }
        }
    }
}

/// Scale `grads` so their joint L2 norm does not exceed `max`.
pub fn clip_global_norm(grads: &mut [Tensor], max: f64) {
    let norm = grads.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max {
        let scale = max / norm;
        for v in grads.iter_mut().flat_map(|t| t.data_mut().iter_mut()) {
            *v *= scale;
        }
    }
}

/// Learning rate at `step` (0-based) under multi-step decay.
pub fn lr_at(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    let passed = cfg.milestones.iter().filter(|&&m| step >= (m * total_steps as f64).round() as usize).count();
    cfg.lr * cfg.lr_gamma.powi(passed as i32)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_sup: f64,
    pub l_cos: f64,
    pub total: f64,
    pub val_dsc: f64,
    pub alpha: [f64; 4],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub best_val_dsc: f64,
    pub best_epoch: usize,
    pub final_val_dsc: f64,
    pub final_train_dsc: f64,
    /// Total loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub history: Vec<EpochRecord>,
}

struct Logs {
    steps: BufWriter<File>,
    epochs: BufWriter<File>,
    alpha: BufWriter<File>,
}

impl Logs {
    fn create(dir: &Path) -> CliResult<Self> {
        let open = |name: &str, header: &str| -> CliResult<BufWriter<File>> {
            let mut f = BufWriter::new(File::create(dir.join(name))?);
            writeln!(f, "{header}")?;
            Ok(f)
        };
        Ok(Self {
            steps: open(STEPS_CSV, "step,epoch,lr,l_sup,l_cos,total")?,
            epochs: open(EPOCHS_CSV, "epoch,step,l_sup,l_cos,total,val_dsc,alpha1,alpha2,alpha3,alpha4")?,
            alpha: open(ALPHA_CSV, "epoch,alpha1,alpha2,alpha3,alpha4")?,
        })
    }
}

pub fn load_dataset(cfg: &TrainConfig) -> CliResult<Dataset> {
    match &cfg.data_dir {
        Some(dir) => Ok(Dataset::read_dir(dir)?),
        None => Ok(Dataset::synthesize(&cfg.synth, cfg.val_fraction, cfg.test_fraction)?),
    }
}

pub fn checkpoint(cfg: &TrainConfig, net: &Network) -> CliResult<Checkpoint> {
    let config_json = serde_json::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let tensors = net.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    Ok(Checkpoint { config_json, tensors })
}

pub fn restore(ck: &Checkpoint) -> CliResult<(TrainConfig, Network)> {
    let cfg: TrainConfig =
        serde_json::from_str(&ck.config_json).map_err(|e| CliError::Config(format!("checkpoint config: {e}")))?;
    let mut net = Network::new(cfg.network_config(), cfg.seed)?;
    net.params_mut().load(ck.tensors.clone())?;
    Ok((cfg, net))
}

fn numeric(epoch: usize, step: usize, last: f64, e: impl std::fmt::Display) -> CliError {
    CliError::Numeric(format!("epoch {epoch}, step {step} (last finite loss {last}): {e}"))
}

/// Run one optimizer step; returns `(l_sup, l_cos, total)`.
fn train_step(
    cfg: &TrainConfig,
    net: &mut Network,
    opt: &mut Sgd,
    images: &Tensor,
    target: &[usize],
    lr: f64,
) -> udmamba_core::Result<(f64, f64, f64)> {
    let (mut g, p, out) = net.run(images, true)?;
    let sup = supervised_loss(&mut g, out.logits, target, &cfg.loss)?;
    let cos = net.consistency(&mut g, &out)?;
    let total = total_loss(&mut g, sup.total, cos, &cfg.loss)?;
    let values = (
        g.value(sup.total).item()?,
        cos.map_or(Ok(0.0), |c| g.value(c).item())?,
        g.value(total).item()?,
    );
    let grads = g.backward(total)?;
    let ids: Vec<_> = net.params().ids().collect();
    let mut grad_tensors: Vec<Tensor> = ids.iter().map(|&id| grads.get_or_zeros(&g, p[id])).collect();
    if let Some(i) = grad_tensors.iter().position(|t| !t.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient for `{}`", net.params().name(ids[i]))));
    }
    drop(g);
    if let Some(max) = cfg.grad_clip {
        clip_global_norm(&mut grad_tensors, max);
    }
    let mut slices: Vec<&mut [f64]> = net.params_mut().tensors_mut().map(Tensor::data_mut).collect();
    let grad_slices: Vec<&[f64]> = grad_tensors.iter().map(Tensor::data).collect();
    opt.step(&mut slices, &grad_slices, lr);
    if let Some(i) = slices.iter().position(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric(format!("parameter `{}` became non-finite", net.params().name(ids[i]))));
    }
    Ok(values)
}

pub struct TrainRun {
    pub summary: TrainSummary,
    pub network: Network,
    pub dataset: Dataset,
}

/// Train per `cfg`, writing logs and checkpoints into `out_dir` when given.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>) -> CliResult<TrainRun> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    let net_cfg = cfg.network_config();
    let mut net = Network::new(net_cfg, cfg.seed)?;
    let mut logs = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(Logs::create(dir)?)
        }
        None => None,
    };
    let splits = dataset.manifest.splits.clone();
    if splits.train.is_empty() {
        return Err(CliError::Config("training split is empty".into()));
    }
    let per_epoch = splits.train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_steps.map_or(per_epoch * cfg.epochs, |m| m.min(per_epoch * cfg.epochs));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let mut opt = Sgd::new(cfg.momentum);
    let mut summary = TrainSummary::default();
    let mut best: Option<Checkpoint> = None;
    let mut step = 0;
    let mut last = f64::NAN;

    'epochs: for epoch in 0..cfg.epochs {
        if step >= total_steps {
            break;
        }
        let mut order = splits.train.clone();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let mut n = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total_steps {
                break;
            }
            let (images, target) = dataset.batch(chunk)?;
            let lr = lr_at(cfg, step, total_steps);
            let (l_sup, l_cos, total) =
                train_step(cfg, &mut net, &mut opt, &images, &target, lr).map_err(|e| match e {
                    Error::Numeric(m) => numeric(epoch, step + 1, last, m),
                    other => other.into(),
                })?;
            step += 1;
            last = total;
            summary.step_losses.push(total);
            for (s, v) in sums.iter_mut().zip([l_sup, l_cos, total]) {
                *s += v;
            }
            n += 1;
            if let Some(l) = logs.as_mut() {
                writeln!(l.steps, "{step},{},{lr},{l_sup},{l_cos},{total}", epoch + 1)?;
            }
        }
        if n == 0 {
            break 'epochs;
        }
        let val = evaluate(&net, &dataset, &splits.val, cfg.eval_batch_size)?;
        let val_dsc = val.macro_avg.map_or(0.0, |m| m.dsc);
        let alpha = net.last_alphas();
        let rec = EpochRecord {
            epoch: epoch + 1,
            step,
            l_sup: sums[0] / n as f64,
            l_cos: sums[1] / n as f64,
            total: sums[2] / n as f64,
            val_dsc,
            alpha,
        };
        if let Some(l) = logs.as_mut() {
            let [a1, a2, a3, a4] = alpha;
            writeln!(
                l.epochs,
                "{},{},{},{},{},{},{a1},{a2},{a3},{a4}",
                rec.epoch, rec.step, rec.l_sup, rec.l_cos, rec.total, rec.val_dsc
            )?;
            writeln!(l.alpha, "{},{a1},{a2},{a3},{a4}", rec.epoch)?;
            l.steps.flush()?;
            l.epochs.flush()?;
            l.alpha.flush()?;
        }
        if best.is_none() || val_dsc > summary.best_val_dsc {
            summary.best_val_dsc = val_dsc;
            summary.best_epoch = rec.epoch;
            best = Some(checkpoint(cfg, &net)?);
        }
        summary.final_val_dsc = val_dsc;
        summary.history.push(rec);
    }

    summary.steps = step;
    summary.epochs = summary.history.len();
    summary.final_loss = last;
    let train_report = evaluate(&net, &dataset, &splits.train, cfg.eval_batch_size)?;
    summary.final_train_dsc = train_report.macro_avg.map_or(0.0, |m| m.dsc);
    if let Some(dir) = out_dir {
        if let Some(b) = &best {
            b.save(&dir.join(BEST_CKPT))?;
        }
        checkpoint(cfg, &net)?.save(&dir.join(FINAL_CKPT))?;
        let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Io(e.to_string()))?;
        fs::write(dir.join(SUMMARY_JSON), json)?;
    }
    Ok(TrainRun { summary, network: net, dataset })
}

pub fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_momentum_matches_hand_computation() {
        let mut opt = Sgd::new(0.9);
        let mut w = vec![1.0];
        for _ in 0..2 {
            opt.step(&mut [w.as_mut_slice()], &[&[0.5]], 0.1);
        }
        // buf1 = 0.5, w = 0.95; buf2 = 0.95, w = 0.855
        assert!((w[0] - 0.855).abs() < 1e-15);
    }

    #[test]
    fn clipping_rescales_only_large_gradients() {
        let mut g = vec![Tensor::from_vec(vec![3.0]), Tensor::from_vec(vec![4.0])];
        clip_global_norm(&mut g, 10.0);
        assert_eq!((g[0].data()[0], g[1].data()[0]), (3.0, 4.0));
        clip_global_norm(&mut g, 1.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn multi_step_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 0, 300), 0.01);
        assert_eq!(lr_at(&cfg, 179, 300), 0.01);
        assert!((lr_at(&cfg, 180, 300) - 0.001).abs() < 1e-18);
        assert!((lr_at(&cfg, 255, 300) - 0.0001).abs() < 1e-18);
    }
}
