use crate::error::{shape_err, Error, Result};
use crate::graph::{Backward, Graph, Var};
use crate::tensor::{dims4, Tensor};

/// Check that `perm` is a bijection over `0..n`.
pub fn validate_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::Permutation(format!("length {} over {n} positions", perm.len())));
    }
    let mut seen = vec![false; n];
    for (k, &p) in perm.iter().enumerate() {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Permutation(format!("entry {k} = {p} is out of range or repeated")));
        }
    }
    Ok(())
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// Row `k` of sample `b` in the output is row `perms[b][k]` of the input.
/// Row maps are constants: only the moved values carry gradient.
struct RowGather {
    perms: Vec<Vec<usize>>,
    channels: usize,
}

impl RowGather {
    fn apply(&self, src: &[f64], scatter: bool) -> Vec<f64> {
        let c = self.channels;
        let n = self.perms[0].len();
        let batch = src.len() / (n * c).max(1);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let perm = &self.perms[if self.perms.len() == 1 { 0 } else { b }];
            let base = b * n * c;
            for (k, &p) in perm.iter().enumerate() {
                let (dst, from) = if scatter { (p, k) } else { (k, p) };
                out[base + dst * c..base + (dst + 1) * c]
                    .copy_from_slice(&src[base + from * c..base + (from + 1) * c]);
            }
        }
        out
    }
}

impl Backward for RowGather {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.apply(grad, true))]
    }
}

/// Channel-block rearrangement between `[B, H, W, C*f*f]` and `[B, H*f, W*f, C]`.
struct DepthSpace {
    /// Dims of the deep (low-resolution) side.
    deep: [usize; 4],
    factor: usize,
    to_space: bool,
}

impl DepthSpace {
    /// Visit (deep index, spatial index) pairs, one per value.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let [b, h, w, cd] = self.deep;
        let k = self.factor;
        let c = cd / (k * k);
        let (hs, ws) = (h * k, w * k);
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let deep_base = ((bi * h + y) * w + x) * cd;
                    for ky in 0..k {
                        for kx in 0..k {
                            let sp_base = ((bi * hs + y * k + ky) * ws + x * k + kx) * c;
                            let deep_off = deep_base + (ky * k + kx) * c;
                            for ch in 0..c {
                                f(deep_off + ch, sp_base + ch);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Backward for DepthSpace {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut g = vec![0.0; grad.len()];
        if self.to_space {
            self.for_each(|d, s| g[d] = grad[s]);
        } else {
            self.for_each(|d, s| g[s] = grad[d]);
        }
        vec![Some(g)]
    }
}

struct Upsample {
    dims: [usize; 4],
    factor: usize,
}

impl Upsample {
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let [b, h, w, c] = self.dims;
        let k = self.factor;
        for bi in 0..b {
            for y in 0..h * k {
                for x in 0..w * k {
                    let src = ((bi * h + y / k) * w + x / k) * c;
                    let dst = ((bi * h * k + y) * w * k + x) * c;
                    for ch in 0..c {
                        f(src + ch, dst + ch);
                    }
                }
            }
        }
    }
}

impl Backward for Upsample {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut g = vec![0.0; inputs[0].len()];
        self.for_each(|s, d| g[s] += grad[d]);
        vec![Some(g)]
    }
}

struct Concat {
    ca: usize,
    cb: usize,
}

impl Backward for Concat {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (ca, cb) = (self.ca, self.cb);
        let split = |lo: usize, n: usize| -> Vec<f64> {
            grad.chunks_exact(ca + cb).flat_map(|row| row[lo..lo + n].iter().copied()).collect()
        };
        vec![needs[0].then(|| split(0, ca)), needs[1].then(|| split(ca, cb))]
    }
}

struct Transpose {
    to_last: bool,
    /// Input dims.
    dims: Vec<usize>,
}

impl Backward for Transpose {
    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let g = Tensor::new(output.shape(), grad.to_vec()).expect("grad shape");
        let back = if self.to_last { g.to_channels_first() } else { g.to_channels_last() };
        let back = back.expect("rank 4");
        debug_assert_eq!(back.shape(), self.dims.as_slice());
        vec![Some(back.into_data())]
    }
}

struct Reshape;

impl Backward for Reshape {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec())]
    }
}

impl Graph {
    /// Reorder the spatial rows of every sample: output row `k` of sample
    /// `b` holds input row `perms[b][k]`. `x` is `[B, ..., C]`; a single
    /// permutation is shared by every sample.
    pub fn permute_gather(&mut self, x: Var, perms: &[Vec<usize>]) -> Result<Var> {
        self.row_permute(x, perms, false)
    }

    /// Inverse of [`Graph::permute_gather`]: input row `k` of sample `b`
    /// lands on output row `perms[b][k]`.
    pub fn permute_scatter(&mut self, x: Var, perms: &[Vec<usize>]) -> Result<Var> {
        self.row_permute(x, perms, true)
    }

    fn row_permute(&mut self, x: Var, perms: &[Vec<usize>], scatter: bool) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return shape_err(format!("permute: expected [B, ..., C], got {shape:?}"));
        }
        let (batch, c) = (shape[0], *shape.last().expect("rank >= 2"));
        let n = shape[1..shape.len() - 1].iter().product::<usize>();
        if perms.is_empty() || (perms.len() != 1 && perms.len() != batch) {
            return Err(Error::Permutation(format!("{} permutations for batch {batch}", perms.len())));
        }
        for p in perms {
            validate_permutation(p, n)?;
        }
        let op = RowGather {
            perms: if scatter { perms.iter().map(|p| inverse_permutation(p)).collect() } else { perms.to_vec() },
            channels: c,
        };
        let out = Tensor::new(shape, op.apply(self.value(x).data(), false))?;
        self.push(out, &[x], op)
    }

    /// `[B, H, W, C] -> [B, H/k, W/k, C*k*k]`, channel order `(ky, kx, c)`.
    pub fn space_to_depth(&mut self, x: Var, k: usize) -> Result<Var> {
        let [b, h, w, c] = dims4(self.shape(x))?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return shape_err(format!("space_to_depth: {h}x{w} not divisible by {k}"));
        }
        let op = DepthSpace { deep: [b, h / k, w / k, c * k * k], factor: k, to_space: false };
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        op.for_each(|d, s| out[d] = src[s]);
        let out = Tensor::new(&op.deep, out)?;
        self.push(out, &[x], op)
    }

    /// `[B, H, W, C*k*k] -> [B, H*k, W*k, C]`, inverse of [`Graph::space_to_depth`].
    pub fn depth_to_space(&mut self, x: Var, k: usize) -> Result<Var> {
        let deep = dims4(self.shape(x))?;
        if k == 0 || deep[3] % (k * k) != 0 {
            return shape_err(format!("depth_to_space: {} channels not divisible by {}", deep[3], k * k));
        }
        let op = DepthSpace { deep, factor: k, to_space: true };
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        op.for_each(|d, s| out[s] = src[d]);
        let out = Tensor::new(&[deep[0], deep[1] * k, deep[2] * k, deep[3] / (k * k)], out)?;
        self.push(out, &[x], op)
    }

    /// Nearest-neighbour upsampling of `[B, H, W, C]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, k: usize) -> Result<Var> {
        let dims = dims4(self.shape(x))?;
        if k == 0 {
            return shape_err("upsample_nearest: factor 0");
        }
        let op = Upsample { dims, factor: k };
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len() * k * k];
        op.for_each(|s, d| out[d] = src[s]);
        let out = Tensor::new(&[dims[0], dims[1] * k, dims[2] * k, dims[3]], out)?;
        self.push(out, &[x], op)
    }

    /// Concatenate along the trailing (channel) axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return shape_err(format!("concat_channels: {sa:?} vs {sb:?}"));
        }
        let (ca, cb) = (*sa.last().expect("rank"), *sb.last().expect("rank"));
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("rank") = ca + cb;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(xa.len() + xb.len());
        for (ra, rb) in xa.chunks_exact(ca).zip(xb.chunks_exact(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let out = Tensor::new(&shape, out)?;
        self.push(out, &[a, b], Concat { ca, cb })
    }

    /// `[B, C, H, W] -> [B, H, W, C]`.
    pub fn to_channels_last(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).to_channels_last()?;
        let dims = self.shape(x).to_vec();
        self.push(out, &[x], Transpose { to_last: true, dims })
    }

    /// `[B, H, W, C] -> [B, C, H, W]`.
    pub fn to_channels_first(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).to_channels_first()?;
        let dims = self.shape(x).to_vec();
        self.push(out, &[x], Transpose { to_last: false, dims })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, &[x], Reshape)
    }
}
