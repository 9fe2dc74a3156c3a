//! Uncertainty-driven SSM: rank pixels by channel uncertainty, scan them in
//! four orders through S6, restore each to its spatial layout, and sum.
//!
//! Features are channels-last `[B, H, W, C]`. Orders are computed per
//! sample from the forward values and carry no gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scan_order::{raster_orders, uncertainty_orders, ScanMode, ScanOrderSet};
use crate::selective_scan::{s6_forward, S6Params, ScanKernel, DEFAULT_STATE};
use crate::tensor::{dims4, Tensor};
use crate::uncertainty::{channel_uncertainty_hwc, BlockUncertaintyConfig, Metric, UncertaintyMap};

/// Guard for the cosine denominators of the consistency loss.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UdSsmConfig {
    /// Enable y1 (sequential, high to low), y2 (skip, high to low),
    /// y3 (sequential, low to high), y4 (skip, low to high).
    pub branches: [bool; 4],
    /// Learnable per-branch scale; fixed at 1 when off.
    pub reweight: bool,
    /// One S6 parameter set for all branches instead of one each.
    pub shared_s6: bool,
    pub metric: Metric,
    pub block: BlockUncertaintyConfig,
    pub mode: ScanMode,
    pub kernel: ScanKernel,
    pub state: usize,
    pub direct_term: bool,
}

impl Default for UdSsmConfig {
    fn default() -> Self {
        Self {
            branches: [true; 4],
            reweight: true,
            shared_s6: false,
            metric: Metric::Std,
            block: BlockUncertaintyConfig::default(),
            mode: ScanMode::Uncertainty,
            kernel: ScanKernel::Parallel,
            state: DEFAULT_STATE,
            direct_term: true,
        }
    }
}

impl UdSsmConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.branches.iter().any(|&b| b) {
            return Err(Error::Config("at least one scan branch must be enabled".into()));
        }
        if self.state == 0 {
            return Err(Error::Config("S6 state size must be positive".into()));
        }
        Ok(())
    }

    pub fn all_branches(&self) -> bool {
        self.branches.iter().all(|&b| b)
    }
}

/// Parameters of one UD-SSM, generic over storage like [`S6Params`].
#[derive(Clone, Debug, PartialEq)]
pub struct UdSsmParams<T> {
    pub s6: Vec<S6Params<T>>,
    /// Which entry of `s6` each branch uses; `None` for disabled branches.
    pub slot: [Option<usize>; 4],
    /// `[1]` reweighting scalars, present for enabled branches when
    /// reweighting is on.
    pub alpha: [Option<T>; 4],
}

impl<T> UdSsmParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> UdSsmParams<U> {
        UdSsmParams {
            s6: self.s6.iter().map(|p| p.map(&mut f)).collect(),
            slot: self.slot,
            alpha: [0, 1, 2, 3].map(|i| self.alpha[i].as_ref().map(&mut f)),
        }
    }

    pub fn s6_for(&self, branch: usize) -> Option<&S6Params<T>> {
        self.slot[branch].map(|s| &self.s6[s])
    }
}

impl UdSsmParams<ParamId> {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        cfg: &UdSsmConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut s6 = Vec::new();
        let mut slot = [None; 4];
        let mut alpha = [None; 4];
        for branch in 0..4 {
            if !cfg.branches[branch] {
                continue;
            }
            if !(cfg.shared_s6 && !s6.is_empty()) {
                let tag = if cfg.shared_s6 { "shared".to_string() } else { format!("y{}", branch + 1) };
                let init = S6Params::init(channels, cfg.state, cfg.direct_term, rng);
                s6.push(init.map_named(|name, t| store.add(format!("{prefix}.s6_{tag}.{name}"), t.clone())));
            }
            slot[branch] = Some(s6.len() - 1);
            if cfg.reweight {
                alpha[branch] = Some(store.add(format!("{prefix}.alpha{}", branch + 1), Tensor::ones(&[1])));
            }
        }
        Ok(Self { s6, slot, alpha })
    }

    pub fn bind(&self, bound: &Bound) -> UdSsmParams<Var> {
        self.map(|&id| bound[id])
    }

    /// Effective reweighting scalars (1 where there is no parameter).
    pub fn alpha_values(&self, store: &ParamStore) -> [f64; 4] {
        [0, 1, 2, 3].map(|i| self.alpha[i].map_or(1.0, |id| store.get(id).data()[0]))
    }
}

/// Scan orders (and the uncertainty behind them) for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    /// Absent in raster mode.
    pub uncertainty: Option<UncertaintyMap>,
    pub orders: ScanOrderSet,
    /// Uncertainty block side (1 for pixel level).
    pub block: usize,
}

#[derive(Clone, Debug)]
pub struct UdSsmOutput {
    /// Sum of the recovered branches, `[B, H, W, C]`.
    pub y: Var,
    /// Each branch restored to spatial layout; `None` when disabled.
    pub branch_recovered: [Option<Var>; 4],
    /// One entry per batch sample.
    pub routing: Vec<Routing>,
}

impl UdSsmOutput {
    /// Frobenius norm of each recovered branch (0 when disabled).
    pub fn branch_norms(&self, g: &Graph) -> [f64; 4] {
        self.branch_recovered
            .map(|v| v.map_or(0.0, |v| g.value(v).data().iter().map(|x| x * x).sum::<f64>().sqrt()))
    }
}

/// Per-sample routing for `x: [B, H, W, C]`.
pub fn route(x: &Tensor, cfg: &UdSsmConfig) -> Result<Vec<Routing>> {
    let [batch, h, w, c] = dims4(x.shape())?;
    if h * w == 0 || c == 0 {
        return Err(Error::Shape(format!("ud_ssm: empty feature map {:?}", x.shape())));
    }
    match cfg.mode {
        ScanMode::Raster => {
            let orders = raster_orders(h, w);
            Ok(vec![Routing { uncertainty: None, orders, block: 1 }; batch])
        }
        ScanMode::Uncertainty => {
            let a = cfg.block.block_size(h, w)?;
            x.data()
                .chunks_exact(h * w * c)
                .map(|sample| {
                    let u = channel_uncertainty_hwc(sample, h, w, cfg.metric)?;
                    let orders = uncertainty_orders(&u, a)?;
                    Ok(Routing { uncertainty: Some(u), orders, block: a })
                })
                .collect()
        }
    }
}

pub fn ud_ssm_forward(g: &mut Graph, x: Var, params: &UdSsmParams<Var>, cfg: &UdSsmConfig) -> Result<UdSsmOutput> {
    cfg.validate()?;
    let routing = route(g.value(x), cfg)?;
    let mut branch_recovered = [None; 4];
    let mut y: Option<Var> = None;
    // Fixed branch order keeps the sum reproducible.
    for branch in 0..4 {
        if !cfg.branches[branch] {
            continue;
        }
        let s6 = params
            .s6_for(branch)
            .ok_or_else(|| Error::Config(format!("branch y{} enabled without S6 parameters", branch + 1)))?;
        let perms: Vec<Vec<usize>> = routing.iter().map(|r| r.orders.get(branch).to_vec()).collect();
        let mut seq = g.permute_gather(x, &perms)?;
        if let Some(alpha) = params.alpha[branch] {
            seq = g.scale_by(seq, alpha)?;
        }
        let scanned = s6_forward(g, seq, s6, cfg.kernel)?;
        let recovered = g.permute_scatter(scanned, &perms)?;
        branch_recovered[branch] = Some(recovered);
        y = Some(match y {
            None => recovered,
            Some(acc) => g.add(acc, recovered)?,
        });
    }
    let y = y.expect("validated: at least one branch");
    Ok(UdSsmOutput { y, branch_recovered, routing })
}

/// `1 - (cos(y1, y3) + cos(y2, y4)) / 2`, each cosine taken over channels
/// per location and averaged over locations and batch.
pub fn cosine_consistency(g: &mut Graph, branches: [Var; 4]) -> Result<Var> {
    let [y1, y2, y3, y4] = branches;
    let c13 = g.cosine_similarity_last(y1, y3, COSINE_EPS)?;
    let c13 = g.mean_all(c13)?;
    let c24 = g.cosine_similarity_last(y2, y4, COSINE_EPS)?;
    let c24 = g.mean_all(c24)?;
    let s = g.add(c13, c24)?;
    g.affine(s, -0.5, 1.0)
}

pub fn consistency_loss(g: &mut Graph, out: &UdSsmOutput) -> Result<Var> {
    match out.branch_recovered {
        [Some(a), Some(b), Some(c), Some(d)] => cosine_consistency(g, [a, b, c, d]),
        _ => Err(Error::Contract("consistency loss needs all four scan branches".into())),
    }
}
