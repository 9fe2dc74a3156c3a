//! Overlap metrics and HD95 for segmentation masks.
//!
//! Zero-denominator convention: a ratio whose denominator is zero is 1
//! when the two masks it compares are both empty, otherwise 0. Specificity
//! compares the background masks.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_masks(pred: &[bool], gt: &[bool]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("pred has {} pixels, gt has {}", pred.len(), gt.len())));
        }
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(gt) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// `num / den`, or the empty-mask convention when `den == 0`.
fn ratio(num: usize, den: usize, both_empty: bool) -> f64 {
    if den == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dsc: f64,
    pub iou: f64,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    /// Pixels; infinite when either mask is empty (serialized as null).
    pub hd95: f64,
}

impl SegMetrics {
    pub fn from_confusion(c: &Confusion, hd95: f64) -> Self {
        let fg_empty = c.tp + c.fp + c.fn_ == 0;
        let bg_empty = c.tn + c.fp + c.fn_ == 0;
        Self {
            dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, fg_empty),
            iou: ratio(c.tp, c.tp + c.fp + c.fn_, fg_empty),
            acc: ratio(c.tp + c.tn, c.total(), true),
            sen: ratio(c.tp, c.tp + c.fn_, fg_empty),
            spe: ratio(c.tn, c.tn + c.fp, bg_empty),
            hd95,
        }
    }

    /// Element-wise mean in slice order.
    pub fn mean(items: &[SegMetrics]) -> Option<SegMetrics> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let avg = |f: fn(&SegMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(SegMetrics {
            dsc: avg(|m| m.dsc),
            iou: avg(|m| m.iou),
            acc: avg(|m| m.acc),
            sen: avg(|m| m.sen),
            spe: avg(|m| m.spe),
            hd95: avg(|m| m.hd95),
        })
    }
}

/// Binary-mask metrics for an `h x w` image.
pub fn seg_metrics(pred: &[bool], gt: &[bool], h: usize, w: usize) -> Result<SegMetrics> {
    if pred.len() != h * w || gt.len() != h * w || h * w == 0 {
        return Err(Error::Shape(format!("masks of {} and {} pixels for a {h}x{w} image", pred.len(), gt.len())));
    }
    let c = Confusion::from_masks(pred, gt)?;
    Ok(SegMetrics::from_confusion(&c, hd95(pred, gt, h, w)?))
}

/// Foreground pixels with at least one 4-neighbour in the background;
/// pixels outside the image count as background.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let on = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as isize, x as isize);
            if mask[y * w + x] && !(on(yi - 1, xi) && on(yi + 1, xi) && on(yi, xi - 1) && on(yi, xi + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Nearest distance from each point of `from` to `to`. `to` is in
/// row-major order, so the search expands outwards by row and stops once
/// the row gap alone exceeds the best distance.
fn directed<'a>(from: &'a [(usize, usize)], to: &'a [(usize, usize)]) -> impl Iterator<Item = f64> + 'a {
    let rows: Vec<usize> = to.iter().map(|p| p.0).collect();
    from.iter().map(move |&(y, x)| {
        let start = rows.partition_point(|&r| r < y);
        let mut best = u64::MAX;
        let d2 = |&(ty, tx): &(usize, usize)| {
            let (dy, dx) = (ty.abs_diff(y) as u64, tx.abs_diff(x) as u64);
            dy * dy + dx * dx
        };
        for p in &to[start..] {
            let dy = (p.0 - y) as u64;
            if dy * dy > best {
                break;
            }
            best = best.min(d2(p));
        }
        for p in to[..start].iter().rev() {
            let dy = (y - p.0) as u64;
            if dy * dy > best {
                break;
            }
            best = best.min(d2(p));
        }
        (best as f64).sqrt()
    })
}

/// Linear-interpolated percentile at rank `q * (n - 1)` of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// 95th percentile of the combined pred→gt and gt→pred boundary
/// distances; infinite when either mask is empty.
pub fn hd95(pred: &[bool], gt: &[bool], h: usize, w: usize) -> Result<f64> {
    if pred.len() != h * w || gt.len() != h * w {
        return Err(Error::Shape(format!("masks of {} and {} pixels for a {h}x{w} image", pred.len(), gt.len())));
    }
    let (bp, bg) = (boundary(pred, h, w), boundary(gt, h, w));
    if bp.is_empty() || bg.is_empty() {
        return Ok(f64::INFINITY);
    }
    let mut d: Vec<f64> = directed(&bp, &bg).chain(directed(&bg, &bp)).collect();
    d.sort_by(f64::total_cmp);
    Ok(percentile(&d, 0.95))
}

/// Per-class metrics for foreground classes `1..classes` of class-id maps.
pub fn class_metrics(pred: &[usize], gt: &[usize], h: usize, w: usize, classes: usize) -> Result<Vec<SegMetrics>> {
    if let Some(&c) = pred.iter().chain(gt).find(|&&c| c >= classes) {
        return Err(Error::Data(format!("class id {c} out of range for {classes} classes")));
    }
    (1..classes)
        .map(|k| {
            let p: Vec<bool> = pred.iter().map(|&c| c == k).collect();
            let t: Vec<bool> = gt.iter().map(|&c| c == k).collect();
            seg_metrics(&p, &t, h, w)
        })
        .collect()
}

/// Dataset-level report: per-class means over samples and their macro
/// average over foreground classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    /// Indexed by foreground class (entry 0 is class 1).
    pub per_class: Vec<SegMetrics>,
    pub macro_avg: Option<SegMetrics>,
}

impl MetricsReport {
    /// `per_sample[s][k]` is the metrics of foreground class `k + 1` in
    /// sample `s`; reduction runs in sample order.
    pub fn from_samples(per_sample: &[Vec<SegMetrics>]) -> Self {
        let classes = per_sample.first().map_or(0, Vec::len);
        let per_class: Vec<SegMetrics> = (0..classes)
            .map(|k| SegMetrics::mean(&per_sample.iter().map(|s| s[k]).collect::<Vec<_>>()).expect("non-empty"))
            .collect();
        let macro_avg = SegMetrics::mean(&per_class);
        Self { samples: per_sample.len(), per_class, macro_avg }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,dsc,iou,acc,sen,spe,hd95\n");
        let mut row = |name: String, m: &SegMetrics| {
            let _ = writeln!(s, "{name},{},{},{},{},{},{}", m.dsc, m.iou, m.acc, m.sen, m.spe, m.hd95);
        };
        for (k, m) in self.per_class.iter().enumerate() {
            row((k + 1).to_string(), m);
        }
        if let Some(m) = &self.macro_avg {
            row("macro".into(), m);
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
