use crate::error::{shape_err, Result};
use crate::graph::{Backward, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinaryOp(Binary);

impl Backward for BinaryOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let ga = needs[0].then(|| match self.0 {
            Binary::Add | Binary::Sub => grad.to_vec(),
            Binary::Mul => grad.iter().zip(b).map(|(g, b)| g * b).collect(),
            Binary::Div => grad.iter().zip(b).map(|(g, b)| g / b).collect(),
        });
        let gb = needs[1].then(|| match self.0 {
            Binary::Add => grad.to_vec(),
            Binary::Sub => grad.iter().map(|g| -g).collect(),
            Binary::Mul => grad.iter().zip(a).map(|(g, a)| g * a).collect(),
            Binary::Div => grad
                .iter()
                .zip(a.iter().zip(b))
                .map(|(g, (a, b))| -g * a / (b * b))
                .collect(),
        });
        vec![ga, gb]
    }
}

#[derive(Clone, Copy)]
enum Unary {
    Exp,
    Softplus,
    Sigmoid,
    Silu,
}

struct UnaryOp(Unary);

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

impl Unary {
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => silu(x),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

impl Backward for UnaryOp {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let g = inputs[0]
            .data()
            .iter()
            .zip(output.data())
            .zip(grad)
            .map(|((&x, &y), g)| g * self.0.derivative(x, y))
            .collect();
        vec![Some(g)]
    }
}

struct Affine {
    scale: f64,
}

impl Backward for Affine {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.iter().map(|g| g * self.scale).collect())]
    }
}

struct ScaleBy;

impl Backward for ScaleBy {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let s = inputs[1].data()[0];
        let gx = needs[0].then(|| grad.iter().map(|g| g * s).collect());
        let gs = needs[1].then(|| vec![grad.iter().zip(inputs[0].data()).map(|(g, x)| g * x).sum()]);
        vec![gx, gs]
    }
}

impl Graph {
    fn binary(&mut self, a: Var, b: Var, op: Binary, name: &str) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = match op {
            Binary::Add => x.iter().zip(y).map(|(p, q)| p + q).collect(),
            Binary::Sub => x.iter().zip(y).map(|(p, q)| p - q).collect(),
            Binary::Mul => x.iter().zip(y).map(|(p, q)| p * q).collect(),
            Binary::Div => x.iter().zip(y).map(|(p, q)| p / q).collect(),
        };
        let out = Tensor::new(self.shape(a), data)?;
        self.push(out, &[a, b], BinaryOp(op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div, "div")
    }

    fn unary(&mut self, x: Var, op: Unary) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| op.forward(v)).collect();
        let out = Tensor::new(self.shape(x), data)?;
        self.push(out, &[x], UnaryOp(op))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }

    /// `scale * x + shift` for constant scalars.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| scale * v + shift).collect();
        let out = Tensor::new(self.shape(x), data)?;
        self.push(out, &[x], Affine { scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, shift: f64) -> Result<Var> {
        self.affine(x, 1.0, shift)
    }

    /// Multiply every element of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return shape_err(format!("scale_by: scale has shape {:?}", self.shape(s)));
        }
        let k = self.value(s).data()[0];
        let data = self.value(x).data().iter().map(|v| v * k).collect();
        let out = Tensor::new(self.shape(x), data)?;
        self.push(out, &[x, s], ScaleBy)
    }
}
