use crate::error::{shape_err, Error, Result};
use crate::graph::{Backward, Graph, Var};
use crate::tensor::Tensor;

struct LayerNorm {
    channels: usize,
    mean: Vec<f64>,
    rstd: Vec<f64>,
}

impl Backward for LayerNorm {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let c = self.channels;
        let (x, gamma) = (inputs[0].data(), inputs[1].data());
        let mut gx = needs[0].then(|| vec![0.0; x.len()]);
        let mut gg = needs[1].then(|| vec![0.0; c]);
        let mut gb = needs[2].then(|| vec![0.0; c]);
        let mut xhat = vec![0.0; c];
        let mut dxhat = vec![0.0; c];
        for (r, (x_row, g_row)) in x.chunks_exact(c).zip(grad.chunks_exact(c)).enumerate() {
            let (mu, rs) = (self.mean[r], self.rstd[r]);
            for i in 0..c {
                xhat[i] = (x_row[i] - mu) * rs;
                dxhat[i] = g_row[i] * gamma[i];
            }
            if let Some(gg) = gg.as_mut() {
                gg.iter_mut().zip(g_row.iter().zip(&xhat)).for_each(|(d, (g, xh))| *d += g * xh);
            }
            if let Some(gb) = gb.as_mut() {
                gb.iter_mut().zip(g_row).for_each(|(d, g)| *d += g);
            }
            if let Some(gx) = gx.as_mut() {
                let n = c as f64;
                let mean_d: f64 = dxhat.iter().sum::<f64>() / n;
                let mean_dx: f64 = dxhat.iter().zip(&xhat).map(|(d, xh)| d * xh).sum::<f64>() / n;
                for i in 0..c {
                    gx[r * c + i] = rs * (dxhat[i] - mean_d - xhat[i] * mean_dx);
                }
            }
        }
        vec![gx, gg, gb]
    }
}

impl Graph {
    /// Normalize each position over its channel (trailing) axis, then
    /// apply the per-channel affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm: eps must be positive, got {eps}")));
        }
        let (_, c) = self.rows_last(x);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!(
                "layer_norm: gamma {:?} / beta {:?} must both be [{c}]",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let (xs, gs, bs) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let rows = xs.len() / c.max(1);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks_exact(c) {
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            out.extend(row.iter().zip(gs.iter().zip(bs)).map(|(v, (g, b))| (v - mu) * rs * g + b));
            mean.push(mu);
            rstd.push(rs);
        }
        let out = Tensor::new(self.shape(x), out)?;
        self.push(out, &[x, gamma, beta], LayerNorm { channels: c, mean, rstd })
    }
}
