use std::sync::Arc;

use crate::error::TensorError;
use crate::scalar::Scalar;

use super::tape::Tape;

/// Dense multi-dimensional value array, optionally attached to a tape.
///
/// `data` is shared; tensors are immutable after construction. A tensor
/// carries `(tape, node_id)` when it was produced by a recorded computation.
#[derive(Clone)]
pub struct Tensor<F: Scalar> {
    pub(super) shape: Vec<usize>,
    pub(super) data: Arc<Vec<F>>,
    pub(super) node: Option<(Tape<F>, usize)>,
    pub(super) requires_grad: bool,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(TensorError::InvalidValue {
                op: "new",
                msg: format!(
                    "shape {:?} (numel {}) does not match data length {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
            requires_grad: false,
        })
    }

    pub fn vector(data: Vec<F>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("vector construction is infallible")
    }

    pub fn scalar(v: F) -> Self {
        Tensor::vector(vec![v])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![F::zero(); numel]).expect("zeros construction")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> F {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    /// Node id on the tape, if this tensor was recorded.
    pub fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|(_, id)| *id)
    }

    pub(super) fn tape(&self) -> Option<&Tape<F>> {
        self.node.as_ref().map(|(t, _)| t)
    }

    /// Same values, no tape attachment.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
            requires_grad: false,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(super) fn from_parts(
        shape: Vec<usize>,
        data: Arc<Vec<F>>,
        node: Option<(Tape<F>, usize)>,
        requires_grad: bool,
    ) -> Self {
        Tensor {
            shape,
            data,
            node,
            requires_grad,
        }
    }
}

impl<F: Scalar> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("requires_grad", &self.requires_grad)
            .field("node_id", &self.node_id())
            .finish()
    }
}
