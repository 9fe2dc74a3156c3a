//! Selective state-space scan (S6).
//!
//! Each channel `c` and state dimension `n` form an independent lane running
//! the scalar recurrence
//!
//! ```text
//! h_t = exp(Δ_t a) h_{t-1} + ((exp(Δ_t a) - 1) / a) B_t x_t
//! y_t = Σ_n C_t h_t + D x_t
//! ```
//!
//! where `Δ_t`, `B_t`, `C_t` are projections of the current input. The
//! recurrence is evaluated either step by step or by an associative
//! up-sweep/down-sweep scan under `(a₁, u₁) ∘ (a₂, u₂) = (a₁a₂, a₂u₁ + u₂)`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::graph::{Backward, Graph, Var};
use crate::tensor::Tensor;

/// Lane segment length of the parallel kernel's forward pass; segments are
/// scanned independently and chained through their final states.
const SCAN_TILE: usize = 1024;

/// Below this `|Δa|` the zero-order-hold input gain uses its series expansion.
pub const SERIES_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanKernel {
    Sequential,
    #[default]
    Parallel,
}

/// Zero-order-hold coefficients for one step of one lane, with the partial
/// derivatives the backward pass needs. `gain * b` is the discrete input
/// matrix entry.
#[derive(Clone, Copy, Debug)]
pub struct Zoh {
    pub abar: f64,
    pub gain: f64,
    pub dgain_ddelta: f64,
    pub dgain_da: f64,
}

/// `(Ā, gain)` alone; agrees bit for bit with [`Zoh::new`].
fn zoh_coefficients(delta: f64, a: f64) -> (f64, f64) {
    let z = delta * a;
    if z.abs() < SERIES_THRESHOLD {
        (z.exp(), delta * (1.0 + 0.5 * z))
    } else {
        let em1 = z.exp_m1();
        (1.0 + em1, em1 / a)
    }
}

impl Zoh {
    pub fn new(delta: f64, a: f64) -> Self {
        let z = delta * a;
        if z.abs() < SERIES_THRESHOLD {
            Self {
                abar: z.exp(),
                gain: delta * (1.0 + 0.5 * z),
                dgain_ddelta: 1.0 + z,
                dgain_da: 0.5 * delta * delta,
            }
        } else {
            let em1 = z.exp_m1();
            let abar = 1.0 + em1;
            Self { abar, gain: em1 / a, dgain_ddelta: abar, dgain_da: (z * abar - em1) / (a * a) }
        }
    }
}

/// Discretize one diagonal entry: returns `(Ā, B̄)` for step `delta >= 0`.
pub fn discretize(delta: f64, a: f64, b: f64) -> (f64, f64) {
    debug_assert!(delta >= 0.0, "negative step {delta}");
    let zoh = Zoh::new(delta, a);
    (zoh.abar, zoh.gain * b)
}

/// The associative combine for first-order linear recurrences.
pub fn combine(first: (f64, f64), second: (f64, f64)) -> (f64, f64) {
    (first.0 * second.0, second.0 * first.1 + second.1)
}

impl ScanKernel {
    /// `h_t = a_t h_{t-1} + u_t` with `h_{-1} = 0`.
    pub fn recurrence(self, a: &[f64], u: &[f64], h: &mut [f64]) {
        match self {
            ScanKernel::Sequential => linear_recurrence_sequential(a, u, h),
            ScanKernel::Parallel => linear_recurrence_parallel(a, u, h),
        }
    }
}

pub fn linear_recurrence_sequential(a: &[f64], u: &[f64], h: &mut [f64]) {
    let mut state = 0.0;
    for t in 0..h.len() {
        state = a[t] * state + u[t];
        h[t] = state;
    }
}

/// Work-efficient inclusive scan: an up-sweep builds partial compositions
/// on a implicit binary tree, a down-sweep fills the remaining prefixes.
/// At most `2n` combines; every level's combines are independent.
pub fn linear_recurrence_parallel(a: &[f64], u: &[f64], h: &mut [f64]) {
    let n = h.len();
    let mut acc = a[..n].to_vec();
    h.copy_from_slice(&u[..n]);
    linear_recurrence_in_place(&mut acc, h);
}

/// [`linear_recurrence_parallel`] on caller-owned storage: `acc` holds the
/// coefficients and `h` the inputs on entry; on exit `h` holds the states
/// and `acc` the inclusive prefix products of the coefficients.
pub fn linear_recurrence_in_place(acc: &mut [f64], h: &mut [f64]) {
    let n = h.len();
    let fold = |acc: &mut [f64], h: &mut [f64], left: usize, right: usize| {
        h[right] += acc[right] * h[left];
        acc[right] *= acc[left];
    };
    let mut stride = 1;
    while stride < n {
        let mut i = 2 * stride - 1;
        while i < n {
            fold(acc, h, i - stride, i);
            i += 2 * stride;
        }
        stride *= 2;
    }
    stride /= 2;
    while stride >= 1 {
        let mut i = 3 * stride - 1;
        while i < n {
            fold(acc, h, i - stride, i);
            i += 2 * stride;
        }
        stride /= 2;
    }
}

/// Borrowed scan operands. Rows are `(sample, step)` pairs.
struct Lanes<'a> {
    batch: usize,
    len: usize,
    channels: usize,
    state: usize,
    x: &'a [f64],
    delta: &'a [f64],
    a: &'a [f64],
    b: &'a [f64],
    c: &'a [f64],
    d: Option<&'a [f64]>,
}

/// Per-thread buffers reused across units.
#[derive(Default)]
struct Scratch {
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Scratch {
    fn zeroed(&mut self, n: usize) -> &mut [f64] {
        self.first.clear();
        self.first.resize(n, 0.0);
        &mut self.first
    }

    fn pair(&mut self, n: usize) -> (&mut [f64], &mut [f64]) {
        self.first.resize(n, 0.0);
        self.second.resize(n, 0.0);
        (&mut self.first[..n], &mut self.second[..n])
    }
}

impl Lanes<'_> {
    fn xi(&self, bi: usize, t: usize, ch: usize) -> usize {
        (bi * self.len + t) * self.channels + ch
    }

    fn si(&self, bi: usize, t: usize, s: usize) -> usize {
        (bi * self.len + t) * self.state + s
    }

    /// Output column `y[bi, :, ch]`. Each step's `B`/`C` rows are read once
    /// for all state dimensions.
    fn forward_unit(&self, bi: usize, ch: usize, kernel: ScanKernel, scratch: &mut Scratch) -> Vec<f64> {
        let (len, ns) = (self.len, self.state);
        let a_row = &self.a[ch * ns..(ch + 1) * ns];
        let mut y = vec![0.0; len];
        match kernel {
            ScanKernel::Sequential => {
                let h = scratch.zeroed(ns);
                for (t, yt) in y.iter_mut().enumerate() {
                    let xi = self.xi(bi, t, ch);
                    let (x, delta) = (self.x[xi], self.delta[xi]);
                    let row = self.si(bi, t, 0);
                    let (b_row, c_row) = (&self.b[row..row + ns], &self.c[row..row + ns]);
                    let mut acc = 0.0;
                    for s in 0..ns {
                        let (abar, gain) = zoh_coefficients(delta, a_row[s]);
                        h[s] = abar * h[s] + gain * b_row[s] * x;
                        acc += c_row[s] * h[s];
                    }
                    *yt = acc;
                }
            }
            ScanKernel::Parallel => {
                // Tiles keep the working set cache-resident for long lanes;
                // within a tile lane `s` occupies `[s * n, (s + 1) * n)`.
                let (abar, h) = scratch.pair(ns * SCAN_TILE.min(len));
                let mut carry = vec![0.0; ns];
                for t0 in (0..len).step_by(SCAN_TILE) {
                    let n = SCAN_TILE.min(len - t0);
                    for t in 0..n {
                        let xi = self.xi(bi, t0 + t, ch);
                        let (x, delta) = (self.x[xi], self.delta[xi]);
                        let row = self.si(bi, t0 + t, 0);
                        for s in 0..ns {
                            let (ab, gain) = zoh_coefficients(delta, a_row[s]);
                            abar[s * n + t] = ab;
                            h[s * n + t] = gain * self.b[row + s] * x;
                        }
                    }
                    for s in 0..ns {
                        let lane = s * n..(s + 1) * n;
                        linear_recurrence_in_place(&mut abar[lane.clone()], &mut h[lane.clone()]);
                        if t0 > 0 {
                            // abar now holds prefix products within the tile.
                            for i in lane.clone() {
                                h[i] += abar[i] * carry[s];
                            }
                        }
                        carry[s] = h[lane.end - 1];
                    }
                    for t in 0..n {
                        let row = self.si(bi, t0 + t, 0);
                        let mut acc = 0.0;
                        for s in 0..ns {
                            acc += self.c[row + s] * h[s * n + t];
                        }
                        y[t0 + t] = acc;
                    }
                }
            }
        }
        if let Some(d) = self.d {
            for (t, yt) in y.iter_mut().enumerate() {
                *yt += d[ch] * self.x[self.xi(bi, t, ch)];
            }
        }
        y
    }

    fn backward_unit(&self, bi: usize, ch: usize, gy: &[f64], kernel: ScanKernel) -> UnitGrad {
        let (len, ns) = (self.len, self.state);
        let mut out = UnitGrad {
            dx: vec![0.0; len],
            ddelta: vec![0.0; len],
            da: vec![0.0; ns],
            db: vec![0.0; len * ns],
            dc: vec![0.0; len * ns],
            dd: 0.0,
        };
        let a_row = &self.a[ch * ns..(ch + 1) * ns];
        // State-major buffers, as in the forward pass.
        let mut zoh = Vec::with_capacity(ns * len);
        let mut abar = vec![0.0; ns * len];
        let mut u = vec![0.0; ns * len];
        let mut g = vec![0.0; ns * len];
        for s in 0..ns {
            for t in 0..len {
                zoh.push(Zoh::new(self.delta[self.xi(bi, t, ch)], a_row[s]));
            }
        }
        for t in 0..len {
            let x = self.x[self.xi(bi, t, ch)];
            let row = self.si(bi, t, 0);
            for s in 0..ns {
                let k = s * len + t;
                abar[k] = zoh[k].abar;
                u[k] = zoh[k].gain * self.b[row + s] * x;
                g[k] = gy[t] * self.c[row + s];
            }
        }
        let mut h = vec![0.0; ns * len];
        let mut gh = vec![0.0; ns * len];
        let mut rev_a = vec![0.0; len];
        let mut rev_g = vec![0.0; len];
        let mut rev_h = vec![0.0; len];
        for s in 0..ns {
            let lane = s * len..(s + 1) * len;
            kernel.recurrence(&abar[lane.clone()], &u[lane.clone()], &mut h[lane.clone()]);
            // Adjoint recurrence gh_t = g_t + abar_{t+1} gh_{t+1}, run reversed.
            let (ab, gs) = (&abar[lane.clone()], &g[lane.clone()]);
            for k in 0..len {
                let t = len - 1 - k;
                rev_g[k] = gs[t];
                rev_a[k] = if k == 0 { 0.0 } else { ab[t + 1] };
            }
            kernel.recurrence(&rev_a, &rev_g, &mut rev_h);
            for (dst, src) in gh[lane].iter_mut().zip(rev_h.iter().rev()) {
                *dst = *src;
            }
        }
        for t in 0..len {
            let xi = self.xi(bi, t, ch);
            let row = self.si(bi, t, 0);
            let (x, delta) = (self.x[xi], self.delta[xi]);
            for s in 0..ns {
                let k = s * len + t;
                let z = zoh[k];
                let bv = self.b[row + s];
                out.dc[t * ns + s] += gy[t] * h[k];
                let du = gh[k];
                let prev = if t == 0 { 0.0 } else { h[k - 1] };
                let dabar = du * prev;
                let dgain = du * bv * x;
                out.db[t * ns + s] += du * z.gain * x;
                out.dx[t] += du * z.gain * bv;
                out.ddelta[t] += dabar * a_row[s] * z.abar + dgain * z.dgain_ddelta;
                out.da[s] += dabar * delta * z.abar + dgain * z.dgain_da;
            }
        }
        if let Some(d) = self.d {
            for t in 0..len {
                let x = self.x[self.xi(bi, t, ch)];
                out.dx[t] += gy[t] * d[ch];
                out.dd += gy[t] * x;
            }
        }
        out
    }

    fn forward(&self, kernel: ScanKernel) -> Vec<f64> {
        let cols: Vec<Vec<f64>> = (0..self.batch * self.channels)
            .into_par_iter()
            .map_init(Scratch::default, |scratch, unit| {
                self.forward_unit(unit / self.channels, unit % self.channels, kernel, scratch)
            })
            .collect();
        let mut y = vec![0.0; self.x.len()];
        for (unit, col) in cols.iter().enumerate() {
            let (bi, ch) = (unit / self.channels, unit % self.channels);
            for (t, v) in col.iter().enumerate() {
                y[self.xi(bi, t, ch)] = *v;
            }
        }
        y
    }
}

struct UnitGrad {
    dx: Vec<f64>,
    ddelta: Vec<f64>,
    da: Vec<f64>,
    db: Vec<f64>,
    dc: Vec<f64>,
    dd: f64,
}

struct S6ScanOp {
    batch: usize,
    len: usize,
    channels: usize,
    state: usize,
    kernel: ScanKernel,
}

impl Backward for S6ScanOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let lanes = Lanes {
            batch: self.batch,
            len: self.len,
            channels: self.channels,
            state: self.state,
            x: inputs[0].data(),
            delta: inputs[1].data(),
            a: inputs[2].data(),
            b: inputs[3].data(),
            c: inputs[4].data(),
            d: inputs.get(5).map(|t| t.data()),
        };
        let units: Vec<UnitGrad> = (0..self.batch * self.channels)
            .into_par_iter()
            .map(|unit| {
                let (bi, ch) = (unit / self.channels, unit % self.channels);
                let gy: Vec<f64> = (0..self.len).map(|t| grad[lanes.xi(bi, t, ch)]).collect();
                lanes.backward_unit(bi, ch, &gy, self.kernel)
            })
            .collect();

        let (ns, nc) = (self.state, self.channels);
        let mut dx = vec![0.0; lanes.x.len()];
        let mut ddelta = vec![0.0; lanes.x.len()];
        let mut da = vec![0.0; nc * ns];
        let mut db = vec![0.0; lanes.b.len()];
        let mut dc = vec![0.0; lanes.c.len()];
        let mut dd = vec![0.0; nc];
        // Fixed reduction order: units ascend by (sample, channel).
        for (unit, g) in units.iter().enumerate() {
            let (bi, ch) = (unit / nc, unit % nc);
            for t in 0..self.len {
                let xi = lanes.xi(bi, t, ch);
                dx[xi] = g.dx[t];
                ddelta[xi] = g.ddelta[t];
            }
            da[ch * ns..(ch + 1) * ns].iter_mut().zip(&g.da).for_each(|(o, v)| *o += v);
            let base = bi * self.len * ns;
            db[base..base + self.len * ns].iter_mut().zip(&g.db).for_each(|(o, v)| *o += v);
            dc[base..base + self.len * ns].iter_mut().zip(&g.dc).for_each(|(o, v)| *o += v);
            dd[ch] += g.dd;
        }
        let mut out = vec![
            needs[0].then_some(dx),
            needs[1].then_some(ddelta),
            needs[2].then_some(da),
            needs[3].then_some(db),
            needs[4].then_some(dc),
        ];
        if needs.len() == 6 {
            out.push(needs[5].then_some(dd));
        }
        out
    }
}

impl Graph {
    /// Fused selective scan.
    ///
    /// `x`, `delta`: `[B, ..., C]` with `L` rows per sample; `a`: `[C, N]`;
    /// `b`, `c`: `[B, ..., N]`; `d`: `[C]`. Output has the shape of `x`.
    #[allow(clippy::too_many_arguments)]
    pub fn s6_scan(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Option<Var>,
        kernel: ScanKernel,
    ) -> Result<Var> {
        self.same_shape(x, delta, "s6_scan(x, delta)")?;
        self.same_shape(b, c, "s6_scan(b, c)")?;
        let xs = self.shape(x);
        let &[channels, state] = self.shape(a) else {
            return shape_err(format!("s6_scan: a must be [C, N], got {:?}", self.shape(a)));
        };
        let batch = xs[0];
        if xs.len() < 2 || *xs.last().expect("rank") != channels || batch == 0 {
            return shape_err(format!("s6_scan: x {xs:?} does not end in {channels} channels"));
        }
        let len = self.value(x).len() / (batch * channels);
        if self.value(b).len() != batch * len * state || *self.shape(b).last().expect("rank") != state {
            return shape_err(format!("s6_scan: b {:?} is not [B, L, {state}]", self.shape(b)));
        }
        if let Some(d) = d {
            if self.shape(d) != [channels] {
                return shape_err(format!("s6_scan: d {:?}, expected [{channels}]", self.shape(d)));
            }
        }
        let lanes = Lanes {
            batch,
            len,
            channels,
            state,
            x: self.value(x).data(),
            delta: self.value(delta).data(),
            a: self.value(a).data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
            d: d.map(|d| self.value(d).data()),
        };
        let y = Tensor::new(xs, lanes.forward(kernel))?;
        let op = S6ScanOp { batch, len, channels, state, kernel };
        match d {
            Some(d) => self.push(y, &[x, delta, a, b, c, d], op),
            None => self.push(y, &[x, delta, a, b, c], op),
        }
    }
}

/// Trainable S6 parameters, generic over storage (tensors, parameter ids,
/// or graph handles).
#[derive(Clone, Debug, PartialEq)]
pub struct S6Params<T> {
    /// `[C, N]`, `A = -exp(a_log)` keeps the state matrix strictly negative.
    pub a_log: T,
    /// `[R, C]` low-rank step projection.
    pub dt_down: T,
    /// `[C, R]`.
    pub dt_up: T,
    /// `[C]`.
    pub dt_bias: T,
    /// `[N, C]`.
    pub b_proj: T,
    /// `[N, C]`.
    pub c_proj: T,
    /// `[C]` direct passthrough, absent when disabled.
    pub d: Option<T>,
}

impl<T> S6Params<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> S6Params<U> {
        S6Params {
            a_log: f(&self.a_log),
            dt_down: f(&self.dt_down),
            dt_up: f(&self.dt_up),
            dt_bias: f(&self.dt_bias),
            b_proj: f(&self.b_proj),
            c_proj: f(&self.c_proj),
            d: self.d.as_ref().map(f),
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&T) -> Result<U>) -> Result<S6Params<U>> {
        Ok(S6Params {
            a_log: f(&self.a_log)?,
            dt_down: f(&self.dt_down)?,
            dt_up: f(&self.dt_up)?,
            dt_bias: f(&self.dt_bias)?,
            b_proj: f(&self.b_proj)?,
            c_proj: f(&self.c_proj)?,
            d: self.d.as_ref().map(f).transpose()?,
        })
    }

    pub fn map_named<U>(&self, mut f: impl FnMut(&'static str, &T) -> U) -> S6Params<U> {
        S6Params {
            a_log: f("a_log", &self.a_log),
            dt_down: f("dt_down", &self.dt_down),
            dt_up: f("dt_up", &self.dt_up),
            dt_bias: f("dt_bias", &self.dt_bias),
            b_proj: f("b_proj", &self.b_proj),
            c_proj: f("c_proj", &self.c_proj),
            d: self.d.as_ref().map(|d| f("d", d)),
        }
    }

    /// Fields in a fixed order with their names.
    pub fn named(&self) -> Vec<(&'static str, &T)> {
        let mut v = vec![
            ("a_log", &self.a_log),
            ("dt_down", &self.dt_down),
            ("dt_up", &self.dt_up),
            ("dt_bias", &self.dt_bias),
            ("b_proj", &self.b_proj),
            ("c_proj", &self.c_proj),
        ];
        if let Some(d) = &self.d {
            v.push(("d", d));
        }
        v
    }
}

pub const DEFAULT_STATE: usize = 8;

pub fn dt_rank(channels: usize) -> usize {
    (channels / 16).max(1)
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl S6Params<Tensor> {
    /// `A[c, n] = -(n + 1)`, initial steps log-uniform in `[0.001, 0.1]`,
    /// projections fan-in-scaled uniform, `D = 1`.
    pub fn init<R: Rng + ?Sized>(channels: usize, state: usize, direct_term: bool, rng: &mut R) -> Self {
        let rank = dt_rank(channels);
        let mut a_log = Tensor::zeros(&[channels, state]);
        for (i, v) in a_log.data_mut().iter_mut().enumerate() {
            *v = ((i % state + 1) as f64).ln();
        }
        let bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let dt_bias = (0..channels).map(|_| inverse_softplus(rng.gen_range(lo..hi).exp())).collect();
        Self {
            a_log,
            dt_down: Tensor::uniform(&[rank, channels], -bound(channels), bound(channels), rng),
            dt_up: Tensor::uniform(&[channels, rank], -bound(rank), bound(rank), rng),
            dt_bias: Tensor::from_vec(dt_bias),
            b_proj: Tensor::uniform(&[state, channels], -bound(channels), bound(channels), rng),
            c_proj: Tensor::uniform(&[state, channels], -bound(channels), bound(channels), rng),
            d: direct_term.then(|| Tensor::ones(&[channels])),
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// The (negative) diagonal state matrix.
    pub fn a(&self) -> Tensor {
        let data = self.a_log.data().iter().map(|v| -v.exp()).collect();
        Tensor::new(self.a_log.shape(), data).expect("same shape")
    }
}

/// Selective scan over `x: [B, ..., C]` with input-dependent step and
/// projections.
pub fn s6_forward(g: &mut Graph, x: Var, p: &S6Params<Var>, kernel: ScanKernel) -> Result<Var> {
    let low = g.linear(x, p.dt_down, None)?;
    let pre = g.linear(low, p.dt_up, Some(p.dt_bias))?;
    let delta = g.softplus(pre)?;
    let b = g.linear(x, p.b_proj, None)?;
    let c = g.linear(x, p.c_proj, None)?;
    let a_pos = g.exp(p.a_log)?;
    let a = g.scale(a_pos, -1.0)?;
    g.s6_scan(x, delta, a, b, c, p.d, kernel)
}

fn s6_eval(x_seq: &Tensor, params: &S6Params<Tensor>, kernel: ScanKernel) -> Result<Tensor> {
    let &[len, channels] = x_seq.shape() else {
        return shape_err(format!("s6: expected [L, C] sequence, got {:?}", x_seq.shape()));
    };
    let mut g = Graph::new();
    let x = g.constant(x_seq.reshape(&[1, len, channels])?)?;
    let p = params.try_map(|t| g.constant(t.clone()))?;
    let y = s6_forward(&mut g, x, &p, kernel)?;
    g.value(y).reshape(&[len, channels])
}

/// Reference step-by-step evaluation of `x_seq: [L, C]`.
pub fn s6_sequential(x_seq: &Tensor, params: &S6Params<Tensor>) -> Result<Tensor> {
    s6_eval(x_seq, params, ScanKernel::Sequential)
}

/// Associative-scan evaluation of `x_seq: [L, C]`.
pub fn s6_parallel(x_seq: &Tensor, params: &S6Params<Tensor>) -> Result<Tensor> {
    s6_eval(x_seq, params, ScanKernel::Parallel)
}
