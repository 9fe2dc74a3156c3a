use crate::error::Result;
use crate::graph::{Backward, Graph, Var};
use crate::tensor::Tensor;

struct LogSoftmax {
    last: usize,
}

impl Backward for LogSoftmax {
    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let k = self.last;
        let mut g = vec![0.0; grad.len()];
        for ((gr, ls), out) in grad.chunks_exact(k).zip(output.data().chunks_exact(k)).zip(g.chunks_exact_mut(k)) {
            let total: f64 = gr.iter().sum();
            for i in 0..k {
                out[i] = gr[i] - ls[i].exp() * total;
            }
        }
        vec![Some(g)]
    }
}

struct Softmax {
    last: usize,
}

impl Backward for Softmax {
    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let k = self.last;
        let mut g = vec![0.0; grad.len()];
        for ((gr, p), out) in grad.chunks_exact(k).zip(output.data().chunks_exact(k)).zip(g.chunks_exact_mut(k)) {
            let dot: f64 = gr.iter().zip(p).map(|(g, p)| g * p).sum();
            for i in 0..k {
                out[i] = p[i] * (gr[i] - dot);
            }
        }
        vec![Some(g)]
    }
}

pub(crate) fn log_softmax_row(row: &[f64], out: &mut Vec<f64>) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    out.extend(row.iter().map(|v| v - lse));
}

impl Graph {
    /// Log-softmax over the trailing axis.
    pub fn log_softmax_last(&mut self, x: Var) -> Result<Var> {
        let (_, k) = self.rows_last(x);
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks_exact(k.max(1)) {
            log_softmax_row(row, &mut out);
        }
        let out = Tensor::new(self.shape(x), out)?;
        self.push(out, &[x], LogSoftmax { last: k })
    }

    /// Softmax over the trailing axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let (_, k) = self.rows_last(x);
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks_exact(k.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|v| (v - m).exp()));
            let total: f64 = out[start..].iter().sum();
            out[start..].iter_mut().for_each(|v| *v /= total);
        }
        let out = Tensor::new(self.shape(x), out)?;
        self.push(out, &[x], Softmax { last: k })
    }
}

#[cfg(test)]
mod tests {
    use crate::gradcheck::{check_gradients, GradCheck};
    use crate::graph::Graph;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 2], vec![3.0, 3.0]).unwrap()).unwrap();
        let ls = g.log_softmax_last(x).unwrap();
        assert!((g.value(ls).data()[0] + std::f64::consts::LN_2).abs() < 1e-15);
        let p = g.softmax_last(x).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::uniform(&[4, 3], -2.0, 2.0, &mut rng);
        let check = GradCheck::default();
        let r = check_gradients(std::slice::from_ref(&x), |g, v| g.log_softmax_last(v[0]), &check).unwrap();
        assert!(r.passed(), "log_softmax {r:?}");
        let r = check_gradients(&[x], |g, v| g.softmax_last(v[0]), &check).unwrap();
        assert!(r.passed(), "softmax {r:?}");
    }
}
