//! Supervised segmentation loss (cross-entropy + soft Dice) and the total
//! objective with the consistency term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{dims4, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the consistency loss.
    pub lambda: f64,
    pub dice_eps: f64,
    /// Per-class weights; uniform when absent.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.3, dice_eps: 1e-5, class_weights: None }
    }
}

impl LossConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.dice_eps.is_nan() || self.dice_eps <= 0.0 {
            return Err(Error::Config(format!("dice_eps must be positive, got {}", self.dice_eps)));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != classes || w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config(format!("class_weights must be {classes} non-negative values with a positive sum")));
            }
        }
        Ok(())
    }

    fn weights(&self, classes: usize) -> Vec<f64> {
        self.class_weights.clone().unwrap_or_else(|| vec![1.0; classes])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SupervisedLoss {
    pub ce: Var,
    /// `1 - mean foreground soft Dice`.
    pub dice: Var,
    /// `ce + dice`.
    pub total: Var,
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sup: f64,
    pub l_cos: f64,
    pub total: f64,
}

pub(crate) fn check_targets(target: &[usize], pixels: usize, classes: usize) -> Result<()> {
    if target.len() != pixels {
        return Err(Error::Shape(format!("target has {} pixels, logits cover {pixels}", target.len())));
    }
    if let Some((i, &c)) = target.iter().enumerate().find(|(_, &c)| c >= classes) {
        return Err(Error::Data(format!("target class {c} at pixel {i} is out of range for {classes} classes")));
    }
    Ok(())
}

/// `logits: [B, K, H, W]`, `target`: row-major `[B, H, W]` class ids.
///
/// Cross-entropy is the (class-weighted) pixel mean; soft Dice is pooled
/// over the batch per class and averaged over the foreground classes.
pub fn supervised_loss(g: &mut Graph, logits: Var, target: &[usize], cfg: &LossConfig) -> Result<SupervisedLoss> {
    let [batch, classes, h, w] = dims4(g.shape(logits))?;
    if classes < 2 {
        return Err(Error::Config(format!("segmentation needs at least 2 classes, got {classes}")));
    }
    cfg.validate(classes)?;
    let pixels = batch * h * w;
    check_targets(target, pixels, classes)?;
    let weights = cfg.weights(classes);

    let mut onehot = vec![0.0; pixels * classes];
    let mut ce_w = vec![0.0; pixels * classes];
    let mut gsum = vec![0.0; classes];
    let total_w: f64 = target.iter().map(|&t| weights[t]).sum();
    if total_w <= 0.0 {
        return Err(Error::Data("all target pixels have zero class weight".into()));
    }
    for (p, &t) in target.iter().enumerate() {
        onehot[p * classes + t] = 1.0;
        ce_w[p * classes + t] = -weights[t] / total_w;
        gsum[t] += 1.0;
    }
    let fg_w: f64 = weights[1..].iter().sum();
    let dice_w: Vec<f64> = (0..classes).map(|k| if k == 0 || fg_w == 0.0 { 0.0 } else { weights[k] / fg_w }).collect();

    let nhwc = g.to_channels_last(logits)?;
    let shape = g.shape(nhwc).to_vec();
    let logp = g.log_softmax_last(nhwc)?;
    let ce_w = g.constant(Tensor::new(&shape, ce_w)?)?;
    let ce = g.mul(logp, ce_w)?;
    let ce = g.sum_all(ce)?;

    let prob = g.softmax_last(nhwc)?;
    let onehot = g.constant(Tensor::new(&shape, onehot)?)?;
    let inter = g.mul(prob, onehot)?;
    let inter = g.sum_to_last(inter)?;
    let num = g.affine(inter, 2.0, cfg.dice_eps)?;
    let psum = g.sum_to_last(prob)?;
    let gsum = g.constant(Tensor::from_vec(gsum.iter().map(|s| s + cfg.dice_eps).collect()))?;
    let den = g.add(psum, gsum)?;
    let dice = g.div(num, den)?;
    let dice_w = g.constant(Tensor::from_vec(dice_w))?;
    let dice = g.mul(dice, dice_w)?;
    let dice = g.sum_all(dice)?;
    let dice = g.affine(dice, -1.0, 1.0)?;

    let total = g.add(ce, dice)?;
    Ok(SupervisedLoss { ce, dice, total })
}

/// `l_sup + lambda * l_cos`.
pub fn total_loss_value(l_sup: f64, l_cos: f64, lambda: f64) -> f64 {
    l_sup + lambda * l_cos
}

/// Graph form of [`total_loss_value`]; `l_cos` absent means `l_sup`.
pub fn total_loss(g: &mut Graph, l_sup: Var, l_cos: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    match l_cos {
        None => Ok(l_sup),
        Some(l_cos) => {
            let weighted = g.scale(l_cos, cfg.lambda)?;
            g.add(l_sup, weighted)
        }
    }
}
