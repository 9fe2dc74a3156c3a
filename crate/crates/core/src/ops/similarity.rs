use crate::error::Result;
use crate::graph::{Backward, Graph, Var};
use crate::tensor::Tensor;

/// Row-wise cosine similarity with denominator `max(|a|, eps) * max(|b|, eps)`,
/// clamped to `[-1, 1]`.
struct Cosine {
    last: usize,
    eps: f64,
}

struct RowStats {
    dot: f64,
    na: f64,
    nb: f64,
}

fn row_stats(a: &[f64], b: &[f64]) -> RowStats {
    let mut s = RowStats { dot: 0.0, na: 0.0, nb: 0.0 };
    for (x, y) in a.iter().zip(b) {
        s.dot += x * y;
        s.na += x * x;
        s.nb += y * y;
    }
    s.na = s.na.sqrt();
    s.nb = s.nb.sqrt();
    s
}

impl Backward for Cosine {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let c = self.last;
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let mut ga = needs[0].then(|| vec![0.0; a.len()]);
        let mut gb = needs[1].then(|| vec![0.0; b.len()]);
        for (r, (ra, rb)) in a.chunks_exact(c).zip(b.chunks_exact(c)).enumerate() {
            let s = row_stats(ra, rb);
            let (da, db) = (s.na.max(self.eps), s.nb.max(self.eps));
            let cos = s.dot / (da * db);
            let g = grad[r];
            // Below eps the norm is the constant eps and contributes no radial term.
            let ka = if s.na > self.eps { cos / (s.na * s.na) } else { 0.0 };
            let kb = if s.nb > self.eps { cos / (s.nb * s.nb) } else { 0.0 };
            for i in 0..c {
                if let Some(ga) = ga.as_mut() {
                    ga[r * c + i] = g * (rb[i] / (da * db) - ka * ra[i]);
                }
                if let Some(gb) = gb.as_mut() {
                    gb[r * c + i] = g * (ra[i] / (da * db) - kb * rb[i]);
                }
            }
        }
        vec![ga, gb]
    }
}

impl Graph {
    /// Cosine similarity of matching trailing-axis vectors; the trailing axis is dropped.
    pub fn cosine_similarity_last(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape(a, b, "cosine_similarity_last")?;
        let (_, c) = self.rows_last(a);
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks_exact(c.max(1))
            .zip(self.value(b).data().chunks_exact(c.max(1)))
            .map(|(ra, rb)| {
                let s = row_stats(ra, rb);
                // Rounding can push |cos| a few ulps past 1.
                (s.dot / (s.na.max(eps) * s.nb.max(eps))).clamp(-1.0, 1.0)
            })
            .collect();
        let shape = self.shape(a);
        let shape = if shape.len() > 1 { shape[..shape.len() - 1].to_vec() } else { vec![1] };
        let out = Tensor::new(&shape, out)?;
        self.push(out, &[a, b], Cosine { last: c, eps })
    }
}
