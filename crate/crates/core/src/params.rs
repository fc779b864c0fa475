//! Named parameter traversal used by the optimizer and checkpoints.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A model whose trainable tensors can be enumerated under stable,
/// hierarchical names such as `blocks.0.flows.3.coupling.conv1.weight`.
///
/// Both visitors must yield the same names in the same order.
pub trait Parameters<T: Scalar> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    /// Total number of scalar parameters.
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.len());
        n
    }

    /// `(name, tensor)` pairs in visiting order.
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, t| out.push((name, t)));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
