//! Per-pixel channel uncertainty and its descending ranking.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Dispersion statistic computed over the channel vector of one pixel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Population standard deviation.
    #[default]
    Std,
    /// Mean absolute deviation from the channel mean.
    Mad,
    /// Population variance.
    Variance,
    /// Shannon entropy (nats) of the channel softmax.
    Entropy,
    /// Negated margin between the two largest channel values.
    Range,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Std, Metric::Mad, Metric::Variance, Metric::Entropy, Metric::Range];

    pub fn of(self, v: &[f64]) -> f64 {
        let n = v.len() as f64;
        let mean = || v.iter().sum::<f64>() / n;
        match self {
            Metric::Std => Metric::Variance.of(v).sqrt(),
            Metric::Variance => {
                let mu = mean();
                v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n
            }
            Metric::Mad => {
                let mu = mean();
                v.iter().map(|x| (x - mu).abs()).sum::<f64>() / n
            }
            Metric::Entropy => {
                let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = v.iter().map(|x| (x - m).exp()).sum();
                let lz = z.ln();
                // p = e^(x-m)/z, ln p = (x - m) - ln z
                -v.iter().map(|x| ((x - m) - lz).exp() * ((x - m) - lz)).sum::<f64>()
            }
            Metric::Range => {
                let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for &x in v {
                    if x > first {
                        second = first;
                        first = x;
                    } else if x > second {
                        second = x;
                    }
                }
                if second == f64::NEG_INFINITY {
                    0.0
                } else {
                    second - first
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub height: usize,
    pub width: usize,
    /// Row-major `height * width` values.
    pub values: Vec<f64>,
    pub metric: Metric,
}

impl UncertaintyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, metric: Metric) -> Result<Self> {
        if values.len() != height * width {
            return shape_err(format!("uncertainty map {height}x{width} given {} values", values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite uncertainty at pixel {i}")));
        }
        Ok(Self { height, width, values, metric })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// `row,col,value` lines under a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,col,value\n");
        for r in 0..self.height {
            for c in 0..self.width {
                let _ = writeln!(s, "{r},{c},{}", self.at(r, c));
            }
        }
        s
    }

    /// Min-max normalized to `0..=255`; a constant map is all zeros.
    pub fn to_gray(&self) -> Vec<u8> {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        self.values
            .iter()
            .map(|v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
            .collect()
    }
}

/// Uncertainty of a `[C, H, W]` feature map.
pub fn channel_uncertainty(x: &Tensor, metric: Metric) -> Result<UncertaintyMap> {
    let &[c, h, w] = x.shape() else {
        return shape_err(format!("channel_uncertainty: expected [C, H, W], got {:?}", x.shape()));
    };
    if c == 0 {
        return shape_err("channel_uncertainty: no channels");
    }
    x.ensure_finite("channel_uncertainty input")?;
    let mut pixel = vec![0.0; c];
    let values = (0..h * w)
        .map(|p| {
            for (ch, v) in pixel.iter_mut().enumerate() {
                *v = x.data()[ch * h * w + p];
            }
            metric.of(&pixel)
        })
        .collect();
    UncertaintyMap::new(h, w, values, metric)
}

/// Uncertainty of one channels-last sample laid out `[H, W, C]`.
pub fn channel_uncertainty_hwc(sample: &[f64], h: usize, w: usize, metric: Metric) -> Result<UncertaintyMap> {
    if h * w == 0 || !sample.len().is_multiple_of(h * w) || sample.is_empty() {
        return shape_err(format!("channel_uncertainty_hwc: {} values for {h}x{w}", sample.len()));
    }
    let c = sample.len() / (h * w);
    if let Some(i) = sample.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite feature at flat index {i}")));
    }
    let values = sample.chunks_exact(c).map(|px| metric.of(px)).collect();
    UncertaintyMap::new(h, w, values, metric)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SortResult {
    /// Non-increasing.
    pub sorted_values: Vec<f64>,
    /// `idx[k]` is the row-major pixel holding the `k`-th largest value.
    pub idx: Vec<usize>,
}

/// Rank pixels from most to least uncertain; ties keep ascending pixel order.
pub fn sort_descending(u: &UncertaintyMap) -> Result<SortResult> {
    sort_values_descending(&u.values)
}

pub(crate) fn sort_values_descending(values: &[f64]) -> Result<SortResult> {
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(Error::Numeric(format!("NaN uncertainty at pixel {i}")));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // sort_by is stable, so equal values stay in ascending pixel order.
    idx.sort_by(|&i, &j| values[j].partial_cmp(&values[i]).expect("no NaN"));
    let sorted_values = idx.iter().map(|&i| values[i]).collect();
    Ok(SortResult { sorted_values, idx })
}

/// Pixel-level or `a x a` block-level uncertainty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    #[default]
    Pixel,
    /// Fixed block side.
    Static(usize),
    /// Side `a_v / a_v_min`: grows with the feature extent.
    DynamicProportional,
    /// Side `a_v_max / a_v`: shrinks as the feature extent grows.
    DynamicInverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockUncertaintyConfig {
    pub mode: BlockMode,
    /// Feature extent at the first UD-SSM.
    pub a_v_max: usize,
    /// Feature extent at the bottleneck.
    pub a_v_min: usize,
}

impl Default for BlockUncertaintyConfig {
    fn default() -> Self {
        Self { mode: BlockMode::Pixel, a_v_max: 16, a_v_min: 4 }
    }
}

impl BlockUncertaintyConfig {
    /// Block side for a `height x width` feature map, where `a_v` is the width.
    pub fn block_size(&self, height: usize, width: usize) -> Result<usize> {
        let a = match self.mode {
            BlockMode::Pixel => 1,
            BlockMode::Static(a) => a,
            BlockMode::DynamicProportional => {
                if self.a_v_min == 0 {
                    return Err(Error::Config("a_v_min must be positive".into()));
                }
                width / self.a_v_min
            }
            BlockMode::DynamicInverse => {
                if width == 0 {
                    return Err(Error::Config("empty feature map".into()));
                }
                self.a_v_max / width
            }
        };
        if a == 0 || !height.is_multiple_of(a) || !width.is_multiple_of(a) {
            return Err(Error::Config(format!(
                "uncertainty block side {a} ({:?}) does not divide {height}x{width}",
                self.mode
            )));
        }
        Ok(a)
    }
}

/// Mean over each `a x a` block: the result is `(H/a) x (W/a)`.
pub fn pool_blocks(u: &UncertaintyMap, a: usize) -> Result<UncertaintyMap> {
    if a == 0 || !u.height.is_multiple_of(a) || !u.width.is_multiple_of(a) {
        return Err(Error::Config(format!("block side {a} does not divide {}x{}", u.height, u.width)));
    }
    if a == 1 {
        return Ok(u.clone());
    }
    let (bh, bw) = (u.height / a, u.width / a);
    let mut values = vec![0.0; bh * bw];
    for by in 0..bh {
        for bx in 0..bw {
            let mut s = 0.0;
            for y in 0..a {
                for x in 0..a {
                    s += u.at(by * a + y, bx * a + x);
                }
            }
            values[by * bw + bx] = s / (a * a) as f64;
        }
    }
    UncertaintyMap::new(bh, bw, values, u.metric)
}

pub fn block_pool_uncertainty(u: &UncertaintyMap, cfg: &BlockUncertaintyConfig) -> Result<UncertaintyMap> {
    pool_blocks(u, cfg.block_size(u.height, u.width)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_pixel(v: &[f64], m: Metric) -> f64 {
        let x = Tensor::new(&[v.len(), 1, 1], v.to_vec()).unwrap();
        channel_uncertainty(&x, m).unwrap().values[0]
    }

    #[test]
    fn std_examples() {
        assert_eq!(one_pixel(&[1.0, 3.0], Metric::Std), 1.0);
        assert_eq!(one_pixel(&[0.0, 0.0, 2.0, 2.0], Metric::Std), 1.0);
        for m in [Metric::Std, Metric::Mad, Metric::Variance] {
            assert_eq!(one_pixel(&[5.0, 5.0, 5.0], m), 0.0);
        }
    }

    #[test]
    fn other_metrics() {
        assert_eq!(one_pixel(&[1.0, 3.0], Metric::Mad), 1.0);
        assert_eq!(one_pixel(&[1.0, 3.0], Metric::Variance), 1.0);
        assert!((one_pixel(&[2.0, 2.0], Metric::Entropy) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(one_pixel(&[4.0, 1.0, 3.0], Metric::Range), -1.0);
        assert_eq!(one_pixel(&[4.0, 4.0, 3.0], Metric::Range), 0.0);
    }

    #[test]
    fn layouts_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chw = Tensor::uniform(&[5, 3, 4], -2.0, 2.0, &mut rng);
        let hwc = chw.reshape(&[1, 5, 3, 4]).unwrap().to_channels_last().unwrap();
        for m in Metric::ALL {
            assert_eq!(
                channel_uncertainty(&chw, m).unwrap(),
                channel_uncertainty_hwc(hwc.data(), 3, 4, m).unwrap()
            );
        }
    }

    #[test]
    fn non_finite_features_rejected() {
        let x = Tensor::new(&[2, 1, 1], vec![1.0, f64::INFINITY]);
        // Tensor::new does not check finiteness; uncertainty does.
        assert!(matches!(channel_uncertainty(&x.unwrap(), Metric::Std), Err(Error::Numeric(_))));
    }

    #[test]
    fn sort_examples() {
        let flat = UncertaintyMap::new(2, 3, vec![0.4; 6], Metric::Std).unwrap();
        assert_eq!(sort_descending(&flat).unwrap().idx, (0..6).collect::<Vec<_>>());
        let u = UncertaintyMap::new(2, 2, vec![0.9, 0.1, 0.5, 0.7], Metric::Std).unwrap();
        let s = sort_descending(&u).unwrap();
        assert_eq!(s.idx, vec![0, 3, 2, 1]);
        assert_eq!(s.sorted_values, vec![0.9, 0.7, 0.5, 0.1]);
        assert!(matches!(sort_values_descending(&[0.1, f64::NAN]), Err(Error::Numeric(_))));
    }

    /// Selection-sort oracle: repeatedly take the first maximal remaining pixel.
    fn brute_force_order(values: &[f64]) -> Vec<usize> {
        let mut left: Vec<usize> = (0..values.len()).collect();
        let mut out = Vec::new();
        while !left.is_empty() {
            let mut best = 0;
            for k in 1..left.len() {
                if values[left[k]] > values[left[best]] {
                    best = k;
                }
            }
            out.push(left.remove(best));
        }
        out
    }

    #[test]
    fn sort_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            // Coarse values force plenty of ties.
            let values: Vec<f64> = (0..16).map(|_| f64::from(rand::Rng::gen_range(&mut rng, 0..6u8)) / 4.0).collect();
            let u = UncertaintyMap::new(4, 4, values.clone(), Metric::Std).unwrap();
            assert_eq!(sort_descending(&u).unwrap().idx, brute_force_order(&values));
        }
    }

    #[test]
    fn block_pooling() {
        let u = UncertaintyMap::new(2, 2, vec![1.0, 1.0, 3.0, 3.0], Metric::Std).unwrap();
        assert_eq!(pool_blocks(&u, 1).unwrap(), u);
        assert_eq!(pool_blocks(&u, 2).unwrap().values, vec![2.0]);
        assert!(matches!(pool_blocks(&u, 3), Err(Error::Config(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..16).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect();
        let u = UncertaintyMap::new(4, 4, values.clone(), Metric::Std).unwrap();
        let pooled = pool_blocks(&u, 2).unwrap();
        let mut expect = Vec::new();
        for by in 0..2 {
            for bx in 0..2 {
                let mut s = 0.0;
                for y in 0..2 {
                    for x in 0..2 {
                        s += values[(2 * by + y) * 4 + 2 * bx + x];
                    }
                }
                expect.push(s / 4.0);
            }
        }
        assert_eq!(pooled.values, expect);
    }

    #[test]
    fn block_sizes() {
        let cfg = |mode| BlockUncertaintyConfig { mode, a_v_max: 16, a_v_min: 4 };
        let prop = cfg(BlockMode::DynamicProportional);
        let inv = cfg(BlockMode::DynamicInverse);
        assert_eq!([16, 8, 4].map(|e| prop.block_size(e, e).unwrap()), [4, 2, 1]);
        assert_eq!([16, 8, 4].map(|e| inv.block_size(e, e).unwrap()), [1, 2, 4]);
        assert_eq!(cfg(BlockMode::Static(2)).block_size(8, 8).unwrap(), 2);
        assert!(cfg(BlockMode::Static(8)).block_size(4, 4).is_err());
        assert!(cfg(BlockMode::Static(0)).block_size(4, 4).is_err());
    }

    proptest! {
        #[test]
        fn channel_symmetric_and_shift_invariant(
            v in prop::collection::vec(-3.0f64..3.0, 1..12),
            shift in -5.0f64..5.0,
            seed in any::<u64>(),
        ) {
            let mut shuffled = v.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            for m in Metric::ALL {
                let base = m.of(&v);
                prop_assert!((m.of(&shuffled) - base).abs() < 1e-12, "{m:?} permutation");
                if m != Metric::Entropy {
                    prop_assert!((m.of(&shifted) - base).abs() < 1e-9, "{m:?} shift");
                }
            }
        }

        #[test]
        fn sort_idx_is_bijection(values in prop::collection::vec(-1.0f64..1.0, 1..64)) {
            let s = sort_values_descending(&values).unwrap();
            crate::ops::validate_permutation(&s.idx, values.len()).unwrap();
            prop_assert!(s.sorted_values.windows(2).all(|w| w[0] >= w[1]));
            let inv = crate::ops::inverse_permutation(&s.idx);
            let back: Vec<f64> = inv.iter().map(|&k| s.sorted_values[k]).collect();
            prop_assert_eq!(back, values);
        }
    }
}
