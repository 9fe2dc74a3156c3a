//! The differentiable op set. Each submodule adds methods to [`Graph`].
//!
//! Spatial tensors are channels-last: `[B, H, W, C]`.
//!
//! [`Graph`]: crate::graph::Graph

mod conv;
mod elementwise;
mod layout;
mod linalg;
mod norm;
mod reduce;
mod similarity;
mod softmax;

pub use elementwise::{sigmoid as sigmoid_value, silu as silu_value, softplus as softplus_value};
pub use layout::{inverse_permutation, validate_permutation};

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};

impl Graph {
    pub(crate) fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    /// Size of the trailing axis and the number of rows before it.
    pub(crate) fn rows_last(&self, v: Var) -> (usize, usize) {
        let shape = self.shape(v);
        let last = *shape.last().unwrap_or(&1);
        let rows = self.value(v).len().checked_div(last).unwrap_or(0);
        (rows, last)
    }
}
