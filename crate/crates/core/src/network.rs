//! Encoder-decoder segmentation network of UD blocks.
//!
//! ```text
//! image NCHW -> NHWC -> patch embed (k = patch) -> LN
//!   encoder stage s: blocks, then stride-2 patch merge (except last)
//!   decoder stage S-1: blocks on the bottleneck
//!   decoder stage s < S-1: nearest x2 + linear, concat skip, linear, blocks
//! -> LN -> linear to K * patch^2 -> depth-to-space -> NCHW logits
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scan_order::ScanMode;
use crate::tensor::{dims4, Tensor};
use crate::ud_ssm::{consistency_loss, ud_ssm_forward, UdSsmConfig, UdSsmOutput, UdSsmParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub patch_size: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub ssm: UdSsmConfig,
    /// Train with the consistency loss on the last decoder block.
    pub l_cos: bool,
    pub ln_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            patch_size: 4,
            stage_channels: vec![32, 64, 128],
            blocks_per_stage: 2,
            ssm: UdSsmConfig::default(),
            l_cos: true,
            ln_eps: 1e-5,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.patch_size == 0 || self.blocks_per_stage == 0 {
            return bad("patch_size and blocks_per_stage must be positive".into());
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return bad(format!("stage_channels must be non-empty and positive, got {:?}", self.stage_channels));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return bad(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        if self.l_cos && !self.ssm.all_branches() {
            return bad("l_cos needs all four scan branches enabled".into());
        }
        self.ssm.validate()
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Total downsampling factor from input to bottleneck.
    pub fn reduction(&self) -> usize {
        self.patch_size << (self.stages() - 1)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = dims4(shape)?;
        if c != self.in_channels {
            return Err(Error::Shape(format!("image has {c} channels, network expects {}", self.in_channels)));
        }
        let r = self.reduction();
        if h == 0 || w == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::Config(format!("input {h}x{w} is not divisible by patch_size * 2^(stages-1) = {r}")));
        }
        Ok(())
    }
}

/// The eight scan/optimization configurations compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Position-based raster scan, one branch, no reweighting.
    Raster,
    Y3,
    Y4,
    Y1Y3,
    Y2Y4,
    AllBranches,
    AllReweight,
    /// All four branches, reweighting, and the consistency loss.
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::Raster,
        Ablation::Y3,
        Ablation::Y4,
        Ablation::Y1Y3,
        Ablation::Y2Y4,
        Ablation::AllBranches,
        Ablation::AllReweight,
        Ablation::Full,
    ];

    pub fn apply(self, cfg: &mut NetworkConfig) {
        let (branches, reweight, l_cos) = match self {
            Ablation::Raster => ([true, false, false, false], false, false),
            Ablation::Y3 => ([false, false, true, false], false, false),
            Ablation::Y4 => ([false, false, false, true], false, false),
            Ablation::Y1Y3 => ([true, false, true, false], false, false),
            Ablation::Y2Y4 => ([false, true, false, true], false, false),
            Ablation::AllBranches => ([true; 4], false, false),
            Ablation::AllReweight => ([true; 4], true, false),
            Ablation::Full => ([true; 4], true, true),
        };
        cfg.ssm.branches = branches;
        cfg.ssm.reweight = reweight;
        cfg.ssm.mode = if self == Ablation::Raster { ScanMode::Raster } else { ScanMode::Uncertainty };
        cfg.l_cos = l_cos;
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add_uniform(format!("{name}.weight"), &[fan_out, fan_in], fan_in, rng);
        let b = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self { w, b }
    }

    fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.w], self.b.map(|b| p[b]))
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[channels]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta }
    }

    fn apply(&self, g: &mut Graph, p: &Bound, x: Var, eps: f64) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta], eps)
    }
}

/// Non-overlapping `k x k` stride-`k` convolution.
#[derive(Clone, Debug)]
struct PatchConv {
    w: ParamId,
    b: ParamId,
    k: usize,
}

impl PatchConv {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = k * k * cin;
        let w = store.add_uniform(format!("{name}.weight"), &[cout, fan_in], fan_in, rng);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, k }
    }

    fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.patch_conv(x, p[self.w], Some(p[self.b]), self.k)
    }
}

/// LN -> linear -> depthwise 3x3 -> SiLU -> UD-SSM, residual add, then a
/// residual linear refinement.
#[derive(Clone, Debug)]
pub struct UdBlock {
    name: String,
    norm: Norm,
    lin_in: Linear,
    dw_w: ParamId,
    dw_b: ParamId,
    ssm: UdSsmParams<ParamId>,
    lin_out: Linear,
}

impl UdBlock {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, ssm: &UdSsmConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            norm: Norm::new(store, &format!("{name}.norm"), c),
            lin_in: Linear::new(store, &format!("{name}.lin_in"), c, c, rng),
            dw_w: store.add_uniform(format!("{name}.dw.weight"), &[c, 3, 3], 9, rng),
            dw_b: store.add(format!("{name}.dw.bias"), Tensor::zeros(&[c])),
            ssm: UdSsmParams::register(store, &format!("{name}.ssm"), c, ssm, rng)?,
            lin_out: Linear::new(store, &format!("{name}.lin_out"), c, c, rng),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn ssm(&self) -> &UdSsmParams<ParamId> {
        &self.ssm
    }

    /// `x: [B, H, W, C]`; returns the block output and the UD-SSM output.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, ssm: &UdSsmConfig, eps: f64) -> Result<(Var, UdSsmOutput)> {
        let h = self.norm.apply(g, p, x, eps)?;
        let h = self.lin_in.apply(g, p, h)?;
        let h = g.depthwise_conv3x3(h, p[self.dw_w], Some(p[self.dw_b]))?;
        let h = g.silu(h)?;
        let out = ud_ssm_forward(g, h, &self.ssm.bind(p), ssm)?;
        let h = g.add(x, out.y)?;
        let refined = self.lin_out.apply(g, p, h)?;
        Ok((g.add(h, refined)?, out))
    }
}

#[derive(Clone, Debug)]
struct UpStage {
    up: Linear,
    fuse: Linear,
}

pub struct NetOutput {
    /// `[B, K, H, W]`.
    pub logits: Var,
    /// UD-SSM output of the final decoder block.
    pub aux: UdSsmOutput,
    /// Patch-embedded features `[B, H/p, W/p, C0]` entering the encoder.
    pub embed: Var,
    /// Every UD-SSM output, labelled by block, in execution order.
    pub ssm: Vec<(String, UdSsmOutput)>,
}

pub struct Network {
    cfg: NetworkConfig,
    store: ParamStore,
    embed: PatchConv,
    embed_norm: Norm,
    encoder: Vec<Vec<UdBlock>>,
    down: Vec<PatchConv>,
    /// `decoder[d]` runs at encoder stage `S - 1 - d`.
    decoder: Vec<Vec<UdBlock>>,
    up: Vec<UpStage>,
    head_norm: Norm,
    head: Linear,
}

impl Network {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = cfg.stage_channels.clone();
        let s_count = ch.len();
        let p = cfg.patch_size;
        let embed = PatchConv::new(&mut store, "embed", cfg.in_channels, ch[0], p, &mut rng);
        let embed_norm = Norm::new(&mut store, "embed.norm", ch[0]);
        let blocks = |store: &mut ParamStore, rng: &mut ChaCha8Rng, tag: &str, c: usize| {
            (0..cfg.blocks_per_stage)
                .map(|b| UdBlock::new(store, &format!("{tag}.block{b}"), c, &cfg.ssm, rng))
                .collect::<Result<Vec<_>>>()
        };
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for s in 0..s_count {
            encoder.push(blocks(&mut store, &mut rng, &format!("enc{s}"), ch[s])?);
            if s + 1 < s_count {
                down.push(PatchConv::new(&mut store, &format!("down{s}"), ch[s], ch[s + 1], 2, &mut rng));
            }
        }
        let mut decoder = Vec::new();
        let mut up = Vec::new();
        for s in (0..s_count).rev() {
            if s + 1 < s_count {
                up.push(UpStage {
                    up: Linear::new(&mut store, &format!("up{s}"), ch[s + 1], ch[s], &mut rng),
                    fuse: Linear::new(&mut store, &format!("fuse{s}"), 2 * ch[s], ch[s], &mut rng),
                });
            }
            decoder.push(blocks(&mut store, &mut rng, &format!("dec{s}"), ch[s])?);
        }
        let head_norm = Norm::new(&mut store, "head.norm", ch[0]);
        let head = Linear::new(&mut store, "head", ch[0], cfg.num_classes * p * p, &mut rng);
        Ok(Self { cfg, store, embed, embed_norm, encoder, down, decoder, up, head_norm, head })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Blocks in execution order.
    pub fn blocks(&self) -> impl Iterator<Item = &UdBlock> {
        self.encoder.iter().chain(&self.decoder).flatten()
    }

    /// Reweighting scalars of the final decoder block.
    pub fn last_alphas(&self) -> [f64; 4] {
        let last = self.decoder.last().and_then(|s| s.last()).expect("at least one block");
        last.ssm.alpha_values(&self.store)
    }

    fn ssm_config(&self, width: usize) -> UdSsmConfig {
        let mut ssm = self.cfg.ssm.clone();
        ssm.block.a_v_max = width / self.cfg.patch_size;
        ssm.block.a_v_min = width / self.cfg.reduction();
        ssm
    }

    /// `image: [B, Cin, H, W]` on `g`, parameters bound by `p`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<NetOutput> {
        self.cfg.check_input(g.shape(image))?;
        let ssm_cfg = self.ssm_config(g.shape(image)[3]);
        let eps = self.cfg.ln_eps;
        let mut ssm = Vec::new();
        let mut run = |g: &mut Graph, blocks: &[UdBlock], mut x: Var| -> Result<Var> {
            for b in blocks {
                let (y, out) = b.forward(g, p, x, &ssm_cfg, eps)?;
                ssm.push((b.name.clone(), out));
                x = y;
            }
            Ok(x)
        };

        let x = g.to_channels_last(image)?;
        let x = self.embed.apply(g, p, x)?;
        let mut x = self.embed_norm.apply(g, p, x, eps)?;
        let embed = x;
        let mut skips = Vec::new();
        for (s, blocks) in self.encoder.iter().enumerate() {
            x = run(g, blocks, x)?;
            if let Some(d) = self.down.get(s) {
                skips.push(x);
                x = d.apply(g, p, x)?;
            }
        }
        for (d, blocks) in self.decoder.iter().enumerate() {
            if d > 0 {
                let stage = &self.up[d - 1];
                let u = g.upsample_nearest(x, 2)?;
                let u = stage.up.apply(g, p, u)?;
                let skip = skips.pop().expect("one skip per merge");
                let cat = g.concat_channels(u, skip)?;
                x = stage.fuse.apply(g, p, cat)?;
            }
            x = run(g, blocks, x)?;
        }
        let h = self.head_norm.apply(g, p, x, eps)?;
        let h = self.head.apply(g, p, h)?;
        let h = g.depth_to_space(h, self.cfg.patch_size)?;
        let logits = g.to_channels_first(h)?;
        let aux = ssm.last().expect("at least one block").1.clone();
        Ok(NetOutput { logits, aux, embed, ssm })
    }

    /// Consistency loss of the final decoder block when enabled.
    pub fn consistency(&self, g: &mut Graph, out: &NetOutput) -> Result<Option<Var>> {
        if self.cfg.l_cos {
            consistency_loss(g, &out.aux).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Fresh graph, parameters bound (trainable or frozen), forward run.
    pub fn run(&self, images: &Tensor, trainable: bool) -> Result<(Graph, Bound, NetOutput)> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, trainable)?;
        let x = g.constant(images.clone())?;
        let out = self.forward(&mut g, &p, x)?;
        Ok((g, p, out))
    }

    /// Per-pixel argmax class, row-major `[B, H, W]`.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let (g, _, out) = self.run(images, false)?;
        Ok(argmax_classes(g.value(out.logits)))
    }
}

/// Argmax over the class axis of `[B, K, H, W]` logits; ties go to the
/// lower class.
pub fn argmax_classes(logits: &Tensor) -> Vec<usize> {
    let [b, k, h, w] = dims4(logits.shape()).expect("rank-4 logits");
    let d = logits.data();
    let mut out = Vec::with_capacity(b * h * w);
    for n in 0..b {
        for px in 0..h * w {
            let mut best = 0;
            for c in 1..k {
                if d[(n * k + c) * h * w + px] > d[(n * k + best) * h * w + px] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        NetworkConfig { stage_channels: vec![8, 16], blocks_per_stage: 1, ..Default::default() }
    }

    #[test]
    fn logits_shape() {
        let net = Network::new(NetworkConfig::default(), 0).unwrap();
        let img = Tensor::uniform(&[1, 1, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let (g, _, out) = net.run(&img, false).unwrap();
        assert_eq!(g.shape(out.logits), &[1, 2, 64, 64]);
        assert_eq!(out.ssm.len(), 12);
        // Stage extents: 16, 8, 4 then mirrored.
        let widths: Vec<usize> = out.ssm.iter().map(|(_, o)| g.shape(o.y)[2]).collect();
        assert_eq!(widths, [16, 16, 8, 8, 4, 4, 4, 4, 8, 8, 16, 16]);
    }

    #[test]
    fn config_errors() {
        let net = Network::new(small(), 0).unwrap();
        assert!(matches!(net.run(&Tensor::zeros(&[1, 1, 12, 16]), false), Err(Error::Config(_))));
        assert!(matches!(net.run(&Tensor::zeros(&[1, 2, 16, 16]), false), Err(Error::Shape(_))));
        let mut cfg = small();
        cfg.ssm.branches = [true, true, false, true];
        assert!(matches!(Network::new(cfg.clone(), 0), Err(Error::Config(_))));
        cfg.l_cos = false;
        assert!(Network::new(cfg, 0).is_ok());
        assert!(Network::new(NetworkConfig { num_classes: 1, ..small() }, 0).is_err());
        assert!(Network::new(NetworkConfig { stage_channels: vec![], ..small() }, 0).is_err());
    }

    #[test]
    fn ablation_presets_are_valid() {
        for a in Ablation::ALL {
            let mut cfg = small();
            a.apply(&mut cfg);
            let net = Network::new(cfg, 0).unwrap();
            let (g, _, out) = net.run(&Tensor::zeros(&[1, 1, 16, 16]), false).unwrap();
            assert!(g.value(out.logits).is_finite(), "{a:?}");
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::new(&[1, 3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(argmax_classes(&t), vec![0, 1]);
    }
}
