use crate::error::{shape_err, Result};
use crate::graph::{Backward, Graph, Var};
use crate::tensor::{dims4, Tensor};

struct DepthwiseConv3 {
    dims: [usize; 4],
}

/// Visit every (output index, input index, tap) triple of a zero-padded
/// 3x3 depthwise convolution on a `[B, H, W, C]` tensor.
fn for_each_tap(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let [b, h, w, c] = dims;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let out = ((bi * h + y) * w + x) * c;
                for ky in 0..3 {
                    let Some(sy) = (y + ky).checked_sub(1).filter(|&sy| sy < h) else { continue };
                    for kx in 0..3 {
                        let Some(sx) = (x + kx).checked_sub(1).filter(|&sx| sx < w) else { continue };
                        f(out, ((bi * h + sy) * w + sx) * c, ky * 3 + kx);
                    }
                }
            }
        }
    }
}

impl Backward for DepthwiseConv3 {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let c = self.dims[3];
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let mut gx = needs[0].then(|| vec![0.0; x.len()]);
        let mut gw = needs[1].then(|| vec![0.0; w.len()]);
        for_each_tap(self.dims, |o, i, tap| {
            for ch in 0..c {
                let g = grad[o + ch];
                if let Some(gx) = gx.as_mut() {
                    gx[i + ch] += g * w[ch * 9 + tap];
                }
                if let Some(gw) = gw.as_mut() {
                    gw[ch * 9 + tap] += g * x[i + ch];
                }
            }
        });
        let mut out = vec![gx, gw];
        if needs.len() == 3 {
            out.push(needs[2].then(|| {
                let mut gb = vec![0.0; c];
                for row in grad.chunks_exact(c) {
                    gb.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                gb
            }));
        }
        out
    }
}

impl Graph {
    /// Per-channel 3x3 convolution, stride 1, zero padding 1.
    /// `x: [B, H, W, C]`, `weight: [C, 3, 3]`, `bias: [C]`.
    pub fn depthwise_conv3x3(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let dims = dims4(self.shape(x))?;
        let c = dims[3];
        if self.shape(weight) != [c, 3, 3] {
            return shape_err(format!(
                "depthwise_conv3x3: weight {:?} does not match {c} channels",
                self.shape(weight)
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c] {
                return shape_err(format!("depthwise_conv3x3: bias {:?}, expected [{c}]", self.shape(b)));
            }
        }
        let (xs, w) = (self.value(x).data(), self.value(weight).data());
        let mut out = match bias {
            Some(b) => self.value(b).data().repeat(xs.len() / c.max(1)),
            None => vec![0.0; xs.len()],
        };
        for_each_tap(dims, |o, i, tap| {
            for ch in 0..c {
                out[o + ch] += xs[i + ch] * w[ch * 9 + tap];
            }
        });
        let out = Tensor::new(&dims, out)?;
        match bias {
            Some(b) => self.push(out, &[x, weight, b], DepthwiseConv3 { dims }),
            None => self.push(out, &[x, weight], DepthwiseConv3 { dims }),
        }
    }

    /// Non-overlapping `k x k` convolution with stride `k`.
    /// `weight: [C_out, k * k * C_in]`, taps ordered `(ky, kx, c_in)`.
    pub fn patch_conv(&mut self, x: Var, weight: Var, bias: Option<Var>, k: usize) -> Result<Var> {
        let patches = self.space_to_depth(x, k)?;
        self.linear(patches, weight, bias)
    }
}
