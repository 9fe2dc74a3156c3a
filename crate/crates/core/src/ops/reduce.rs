use crate::error::Result;
use crate::graph::{Backward, Graph, Var};
use crate::tensor::Tensor;

struct SumAll {
    scale: f64,
}

impl Backward for SumAll {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![grad[0] * self.scale; inputs[0].len()])]
    }
}

struct SumToLast {
    last: usize,
}

impl Backward for SumToLast {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let rows = inputs[0].len() / self.last.max(1);
        vec![Some(grad.repeat(rows))]
    }
}

/// Population standard deviation over the trailing axis.
struct StdLast {
    last: usize,
}

impl Backward for StdLast {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let c = self.last;
        let mut g = vec![0.0; inputs[0].len()];
        for (r, row) in inputs[0].data().chunks_exact(c).enumerate() {
            let sd = output.data()[r];
            // The derivative does not exist at zero spread; use zero there.
            if sd == 0.0 {
                continue;
            }
            let mu = row.iter().sum::<f64>() / c as f64;
            let k = grad[r] / (c as f64 * sd);
            for (i, v) in row.iter().enumerate() {
                g[r * c + i] = k * (v - mu);
            }
        }
        vec![Some(g)]
    }
}

impl Graph {
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), &[x], SumAll { scale: 1.0 })
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.value(x).data().iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), &[x], SumAll { scale: 1.0 / n })
    }

    /// Sum over every axis except the trailing one: `[..., K] -> [K]`.
    pub fn sum_to_last(&mut self, x: Var) -> Result<Var> {
        let (_, last) = self.rows_last(x);
        let mut out = vec![0.0; last];
        for row in self.value(x).data().chunks_exact(last.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        self.push(Tensor::from_vec(out), &[x], SumToLast { last })
    }

    /// Population standard deviation over the trailing axis, which is dropped.
    pub fn std_last(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.rows_last(x);
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(c.max(1))
            .map(|row| {
                let mu = row.iter().sum::<f64>() / c as f64;
                (row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64).sqrt()
            })
            .collect();
        let shape = self.shape(x);
        let shape = if shape.len() > 1 { shape[..shape.len() - 1].to_vec() } else { vec![1] };
        let out = Tensor::new(&shape, out)?;
        self.push(out, &[x], StdLast { last: c })
    }
}
