use crate::error::{shape_err, Result};
use crate::graph::{Backward, Graph, Var};
use crate::tensor::Tensor;

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for MatMul {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (inputs[0].data(), inputs[1].data());
        // dA = G · Bᵀ
        let ga = needs[0].then(|| {
            let mut ga = vec![0.0; m * k];
            for i in 0..m {
                let g_row = &grad[i * n..(i + 1) * n];
                for p in 0..k {
                    let b_row = &b[p * n..(p + 1) * n];
                    ga[i * k + p] = g_row.iter().zip(b_row).map(|(g, b)| g * b).sum();
                }
            }
            ga
        });
        // dB = Aᵀ · G
        let gb = needs[1].then(|| {
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                let g_row = &grad[i * n..(i + 1) * n];
                for p in 0..k {
                    let a_ip = a[i * k + p];
                    gb[p * n..(p + 1) * n].iter_mut().zip(g_row).for_each(|(d, g)| *d += a_ip * g);
                }
            }
            gb
        });
        vec![ga, gb]
    }
}

/// `y = x · Wᵀ + b` over the trailing axis.
struct Linear {
    rows: usize,
    fan_in: usize,
    fan_out: usize,
}

impl Backward for Linear {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (rows, fi, fo) = (self.rows, self.fan_in, self.fan_out);
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0; rows * fi];
            for r in 0..rows {
                let gx_row = &mut gx[r * fi..(r + 1) * fi];
                for o in 0..fo {
                    let g = grad[r * fo + o];
                    if g != 0.0 {
                        let w_row = &w[o * fi..(o + 1) * fi];
                        gx_row.iter_mut().zip(w_row).for_each(|(d, w)| *d += g * w);
                    }
                }
            }
            gx
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![0.0; fo * fi];
            for r in 0..rows {
                let x_row = &x[r * fi..(r + 1) * fi];
                for o in 0..fo {
                    let g = grad[r * fo + o];
                    if g != 0.0 {
                        gw[o * fi..(o + 1) * fi].iter_mut().zip(x_row).for_each(|(d, x)| *d += g * x);
                    }
                }
            }
            gw
        });
        let mut out = vec![gx, gw];
        if needs.len() == 3 {
            out.push(needs[2].then(|| {
                let mut gb = vec![0.0; fo];
                for row in grad.chunks_exact(fo) {
                    gb.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                gb
            }));
        }
        out
    }
}

pub(crate) fn linear_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let rows = x.len() / fan_in;
    let mut y = vec![0.0; rows * fan_out];
    for r in 0..rows {
        let x_row = &x[r * fan_in..(r + 1) * fan_in];
        let y_row = &mut y[r * fan_out..(r + 1) * fan_out];
        for (o, y) in y_row.iter_mut().enumerate() {
            let w_row = &w[o * fan_in..(o + 1) * fan_in];
            let dot: f64 = x_row.iter().zip(w_row).map(|(x, w)| x * w).sum();
            *y = dot + b.map_or(0.0, |b| b[o]);
        }
    }
    y
}

impl Graph {
    /// `[M, K] · [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[m, k], &[k2, n]) = (self.shape(a), self.shape(b)) else {
            return shape_err(format!("matmul: expected rank-2 operands, got {:?} and {:?}", self.shape(a), self.shape(b)));
        };
        if k != k2 {
            return shape_err(format!("matmul: inner extents {k} and {k2} differ"));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a_ip = x[i * k + p];
                out[i * n..(i + 1) * n].iter_mut().zip(&y[p * n..(p + 1) * n]).for_each(|(o, b)| *o += a_ip * b);
            }
        }
        let out = Tensor::new(&[m, n], out)?;
        self.push(out, &[a, b], MatMul { m, k, n })
    }

    /// Affine map over the trailing axis with `weight: [out, in]` and `bias: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let &[fan_out, fan_in] = self.shape(weight) else {
            return shape_err(format!("linear: weight must be rank 2, got {:?}", self.shape(weight)));
        };
        let (rows, last) = self.rows_last(x);
        if last != fan_in {
            return shape_err(format!("linear: input has {last} features, weight expects {fan_in}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [fan_out] {
                return shape_err(format!("linear: bias shape {:?}, expected [{fan_out}]", self.shape(b)));
            }
        }
        let y = linear_forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            fan_in,
            fan_out,
        );
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("rank >= 1") = fan_out;
        let out = Tensor::new(&shape, y)?;
        let op = Linear { rows, fan_in, fan_out };
        match bias {
            Some(b) => self.push(out, &[x, weight, b], op),
            None => self.push(out, &[x, weight], op),
        }
    }
}
