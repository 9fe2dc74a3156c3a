//! The four pixel scan orders driven by uncertainty rank, plus the
//! position-based raster baseline.
//!
//! * `p1` visits pixels from most to least uncertain.
//! * `p2` lays the ranked pixels row-major on the `h x w` grid and walks
//!   it column by column, so consecutive steps jump `w` ranks apart.
//! * `p3`, `p4` are `p1`, `p2` reversed (least to most uncertain).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::ops::validate_permutation;
use crate::uncertainty::{pool_blocks, sort_descending, SortResult, UncertaintyMap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    #[default]
    Uncertainty,
    Raster,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOrderSet {
    pub p1: Vec<usize>,
    pub p2: Vec<usize>,
    pub p3: Vec<usize>,
    pub p4: Vec<usize>,
    pub mode: ScanMode,
    pub skip_stride: usize,
}

/// Position `k` of a column-major walk over an `h x w` row-major grid.
fn column_major(k: usize, h: usize, w: usize) -> usize {
    (k % h) * w + k / h
}

fn reversed(p: &[usize]) -> Vec<usize> {
    p.iter().rev().copied().collect()
}

impl ScanOrderSet {
    fn from_pair(p1: Vec<usize>, p2: Vec<usize>, mode: ScanMode, skip_stride: usize) -> Self {
        let (p3, p4) = (reversed(&p1), reversed(&p2));
        Self { p1, p2, p3, p4, mode, skip_stride }
    }

    /// Order for branch `0..4`.
    pub fn get(&self, branch: usize) -> &[usize] {
        match branch {
            0 => &self.p1,
            1 => &self.p2,
            2 => &self.p3,
            3 => &self.p4,
            _ => panic!("scan branch {branch} out of range"),
        }
    }

    pub fn len(&self) -> usize {
        self.p1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p1.is_empty()
    }

    /// `step,pixel_row,pixel_col` lines for one branch.
    pub fn to_csv(&self, branch: usize, width: usize) -> String {
        let mut s = String::from("step,pixel_row,pixel_col\n");
        for (k, &p) in self.get(branch).iter().enumerate() {
            let _ = writeln!(s, "{k},{},{}", p / width, p % width);
        }
        s
    }
}

pub fn build_scan_orders(sort: &SortResult, h: usize, w: usize) -> Result<ScanOrderSet> {
    let n = h * w;
    if sort.idx.len() != n {
        return shape_err(format!("scan orders: {} ranked pixels for a {h}x{w} map", sort.idx.len()));
    }
    validate_permutation(&sort.idx, n)?;
    let p1 = sort.idx.clone();
    let p2 = (0..n).map(|k| sort.idx[column_major(k, h, w)]).collect();
    Ok(ScanOrderSet::from_pair(p1, p2, ScanMode::Uncertainty, w))
}

/// Row-major and column-major pixel orders, independent of content.
pub fn raster_orders(h: usize, w: usize) -> ScanOrderSet {
    let n = h * w;
    let p1 = (0..n).collect();
    let p2 = (0..n).map(|k| column_major(k, h, w)).collect();
    ScanOrderSet::from_pair(p1, p2, ScanMode::Raster, w)
}

/// Expand an order over `(h/a) x (w/a)` blocks to pixels: each block's
/// pixels are visited contiguously, row-major inside the block.
fn expand_blocks(blocks: &[usize], h: usize, w: usize, a: usize) -> Vec<usize> {
    let bw = w / a;
    let mut out = Vec::with_capacity(h * w);
    for &b in blocks {
        let (by, bx) = (b / bw, b % bw);
        for y in 0..a {
            for x in 0..a {
                out.push((by * a + y) * w + bx * a + x);
            }
        }
    }
    out
}

/// Orders for an uncertainty map, ranking `a x a` blocks when `a > 1`.
pub fn uncertainty_orders(u: &UncertaintyMap, a: usize) -> Result<ScanOrderSet> {
    if a == 1 {
        return build_scan_orders(&sort_descending(u)?, u.height, u.width);
    }
    let pooled = pool_blocks(u, a)?;
    let coarse = build_scan_orders(&sort_descending(&pooled)?, pooled.height, pooled.width)?;
    let p1 = expand_blocks(&coarse.p1, u.height, u.width, a);
    let p2 = expand_blocks(&coarse.p2, u.height, u.width, a);
    Ok(ScanOrderSet::from_pair(p1, p2, ScanMode::Uncertainty, u.width))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::Metric;
    use proptest::prelude::*;

    fn idx(v: &[usize]) -> SortResult {
        SortResult { sorted_values: vec![0.0; v.len()], idx: v.to_vec() }
    }

    #[test]
    fn two_by_two_worked_case() {
        let o = build_scan_orders(&idx(&[0, 3, 2, 1]), 2, 2).unwrap();
        assert_eq!(o.p1, [0, 3, 2, 1]);
        assert_eq!(o.p2, [0, 2, 3, 1]);
        assert_eq!(o.p3, [1, 2, 3, 0]);
        assert_eq!(o.p4, [1, 3, 2, 0]);
    }

    #[test]
    fn single_row_skip_equals_sequential() {
        let o = build_scan_orders(&idx(&[3, 0, 4, 1, 2]), 1, 5).unwrap();
        assert_eq!(o.p1, o.p2);
    }

    #[test]
    fn column_major_positions() {
        let ranks: Vec<usize> = (0..6).map(|k| column_major(k, 2, 3)).collect();
        assert_eq!(ranks, [0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn raster_examples() {
        let o = raster_orders(2, 2);
        assert_eq!(o.p1, [0, 1, 2, 3]);
        assert_eq!(o.p2, [0, 2, 1, 3]);
        assert_eq!(o.p3, [3, 2, 1, 0]);
        assert_eq!(o.mode, ScanMode::Raster);
    }

    #[test]
    fn length_mismatch() {
        assert!(build_scan_orders(&idx(&[0, 1, 2]), 2, 2).is_err());
        assert!(build_scan_orders(&idx(&[0, 1, 1, 2]), 2, 2).is_err());
    }

    #[test]
    fn block_orders_are_block_contiguous() {
        // Blocks: top-left 0.1, top-right 0.9, bottom-left 0.5, bottom-right 0.3
        let v = [
            0.1, 0.1, 0.9, 0.9, //
            0.1, 0.1, 0.9, 0.9, //
            0.5, 0.5, 0.3, 0.3, //
            0.5, 0.5, 0.3, 0.3,
        ];
        let u = UncertaintyMap::new(4, 4, v.to_vec(), Metric::Std).unwrap();
        let o = uncertainty_orders(&u, 2).unwrap();
        assert_eq!(o.p1, [2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15, 0, 1, 4, 5]);
        // Block ranks [1, 2, 3, 0] column-major over the 2x2 rank grid: 1, 3, 2, 0
        assert_eq!(o.p2[..4], [2, 3, 6, 7]);
        assert_eq!(o.p2[4..8], [10, 11, 14, 15]);
        assert_eq!(o.p3, reversed(&o.p1));
        assert_eq!(o.p4, reversed(&o.p2));
    }

    #[test]
    fn csv_export() {
        let csv = raster_orders(2, 3).to_csv(1, 3);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,pixel_row,pixel_col");
        assert_eq!(lines[2], "1,1,0");
        assert_eq!(lines.len(), 7);
    }

    proptest! {
        #[test]
        fn order_invariants(h in 1usize..=16, w in 1usize..=16, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
            let u = UncertaintyMap::new(h, w, values.clone(), Metric::Std).unwrap();
            let sort = sort_descending(&u).unwrap();
            for o in [build_scan_orders(&sort, h, w).unwrap(), raster_orders(h, w)] {
                for b in 0..4 {
                    validate_permutation(o.get(b), h * w).unwrap();
                }
                prop_assert_eq!(&o.p3, &reversed(&o.p1));
                prop_assert_eq!(&o.p4, &reversed(&o.p2));
            }
            let o = build_scan_orders(&sort, h, w).unwrap();
            prop_assert!(o.p1.windows(2).all(|p| values[p[0]] >= values[p[1]]));
            prop_assert!(o.p3.windows(2).all(|p| values[p[0]] <= values[p[1]]));
            // Within a column pass, consecutive skip steps are w ranks apart.
            let rank = crate::ops::inverse_permutation(&sort.idx);
            for k in 1..h * w {
                if k % h != 0 {
                    prop_assert_eq!(rank[o.p2[k]], rank[o.p2[k - 1]] + w);
                }
            }
        }
    }
}
