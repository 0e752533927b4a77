use crate::error::TensorError;
use crate::scalar::Scalar;

use super::tape::{Op, Tape};
use super::tensor::Tensor;

type R<F> = Result<Tensor<F>, TensorError>;

fn same_shape<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<(), TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

/// Tape shared by the operands, if any of them is recorded.
fn active_tape<'a, F: Scalar>(inputs: &[&'a Tensor<F>]) -> Result<Option<&'a Tape<F>>, TensorError> {
    let mut found: Option<&Tape<F>> = None;
    for t in inputs {
        if let Some(tape) = t.tape() {
            match found {
                None => found = Some(tape),
                Some(prev) => {
                    if !std::sync::Arc::ptr_eq(&prev.inner, &tape.inner) {
                        return Err(TensorError::MixedTapes);
                    }
                }
            }
        }
    }
    Ok(found)
}

/// Evaluates an op: records on the active tape when an input is taped,
/// otherwise returns a plain tensor.
fn emit<F: Scalar>(
    inputs: &[&Tensor<F>],
    shape: Vec<usize>,
    value: Vec<F>,
    make_op: impl FnOnce(&[usize]) -> Op<F>,
) -> R<F> {
    match active_tape(inputs)? {
        Some(tape) => {
            let ids = inputs
                .iter()
                .map(|t| tape.node_of(t))
                .collect::<Result<Vec<_>, _>>()?;
            let requires_grad = inputs.iter().any(|t| t.requires_grad);
            Ok(tape.record(make_op(&ids), shape, value, requires_grad))
        }
        None => Tensor::new(shape, value),
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn add(&self, other: &Tensor<F>) -> R<F> {
        same_shape("add", self, other)?;
        let value = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        emit(&[self, other], self.shape.clone(), value, |ids| {
            Op::Add(ids[0], ids[1])
        })
    }

    pub fn sub(&self, other: &Tensor<F>) -> R<F> {
        same_shape("sub", self, other)?;
        let value = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        emit(&[self, other], self.shape.clone(), value, |ids| {
            Op::Sub(ids[0], ids[1])
        })
    }

    pub fn mul(&self, other: &Tensor<F>) -> R<F> {
        same_shape("mul", self, other)?;
        let value = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        emit(&[self, other], self.shape.clone(), value, |ids| {
            Op::Mul(ids[0], ids[1])
        })
    }

    pub fn div(&self, other: &Tensor<F>) -> R<F> {
        same_shape("div", self, other)?;
        let value = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a / b)
            .collect();
        emit(&[self, other], self.shape.clone(), value, |ids| {
            Op::Div(ids[0], ids[1])
        })
    }

    pub fn scale(&self, c: F) -> R<F> {
        let value = self.data().iter().map(|&a| a * c).collect();
        emit(&[self], self.shape.clone(), value, |ids| Op::Scale(ids[0], c))
    }

    pub fn add_scalar(&self, c: F) -> R<F> {
        let value = self.data().iter().map(|&a| a + c).collect();
        emit(&[self], self.shape.clone(), value, |ids| {
            Op::AddScalar(ids[0], c)
        })
    }

    pub fn neg(&self) -> R<F> {
        self.scale(-F::one())
    }

    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&self, other: &Tensor<F>) -> R<F> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let a = self.data();
        let b = other.data();
        let mut value = vec![F::zero(); m * n];
        for i in 0..m {
            for l in 0..k {
                let ail = a[i * k + l];
                for j in 0..n {
                    value[i * n + j] += ail * b[l * n + j];
                }
            }
        }
        emit(&[self, other], vec![m, n], value, |ids| {
            Op::MatMul(ids[0], ids[1])
        })
    }

    /// [m,k] x [k] -> [m]
    pub fn matvec(&self, x: &Tensor<F>) -> R<F> {
        if self.shape.len() != 2 || x.shape.len() != 1 || self.shape[1] != x.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                lhs: self.shape.clone(),
                rhs: x.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let a = self.data();
        let xv = x.data();
        let mut value = vec![F::zero(); m];
        for i in 0..m {
            let mut s = F::zero();
            for j in 0..k {
                s += a[i * k + j] * xv[j];
            }
            value[i] = s;
        }
        emit(&[self, x], vec![m], value, |ids| Op::MatVec(ids[0], ids[1]))
    }

    pub fn sum(&self) -> R<F> {
        let mut s = F::zero();
        for &v in self.data() {
            s += v;
        }
        emit(&[self], vec![1], vec![s], |ids| Op::Sum(ids[0]))
    }

    pub fn mean(&self) -> R<F> {
        let mut s = F::zero();
        for &v in self.data() {
            s += v;
        }
        let m = s / F::from_usize(self.numel()).unwrap();
        emit(&[self], vec![1], vec![m], |ids| Op::Mean(ids[0]))
    }

    pub fn square(&self) -> R<F> {
        let value = self.data().iter().map(|&a| a * a).collect();
        emit(&[self], self.shape.clone(), value, |ids| Op::Square(ids[0]))
    }

    pub fn sqrt(&self) -> R<F> {
        if let Some(&v) = self.data().iter().find(|v| **v < F::zero()) {
            return Err(TensorError::InvalidValue {
                op: "sqrt",
                msg: format!("negative input {v}"),
            });
        }
        let value = self.data().iter().map(|&a| a.sqrt()).collect();
        emit(&[self], self.shape.clone(), value, |ids| Op::Sqrt(ids[0]))
    }

    pub fn exp(&self) -> R<F> {
        let value = self.data().iter().map(|&a| a.exp()).collect();
        emit(&[self], self.shape.clone(), value, |ids| Op::Exp(ids[0]))
    }

    pub fn ln(&self) -> R<F> {
        if let Some(&v) = self.data().iter().find(|v| **v <= F::zero()) {
            return Err(TensorError::InvalidValue {
                op: "ln",
                msg: format!("non-positive input {v}"),
            });
        }
        let value = self.data().iter().map(|&a| a.ln()).collect();
        emit(&[self], self.shape.clone(), value, |ids| Op::Ln(ids[0]))
    }

    pub fn tanh(&self) -> R<F> {
        let value = self.data().iter().map(|&a| a.tanh()).collect();
        emit(&[self], self.shape.clone(), value, |ids| Op::Tanh(ids[0]))
    }

    /// Concatenation of 1-D tensors.
    pub fn concat(parts: &[&Tensor<F>]) -> R<F> {
        if parts.is_empty() {
            return Err(TensorError::InvalidValue {
                op: "concat",
                msg: "empty input list".into(),
            });
        }
        for p in parts {
            if p.shape.len() != 1 {
                return Err(TensorError::InvalidValue {
                    op: "concat",
                    msg: format!("expected 1-D inputs, got shape {:?}", p.shape),
                });
            }
        }
        let total: usize = parts.iter().map(|p| p.numel()).sum();
        let mut value = Vec::with_capacity(total);
        for p in parts {
            value.extend_from_slice(p.data());
        }
        emit(parts, vec![total], value, |ids| Op::Concat(ids.to_vec()))
    }

    /// Sub-range `[start, end)` of a 1-D tensor.
    pub fn slice(&self, start: usize, end: usize) -> R<F> {
        if self.shape.len() != 1 {
            return Err(TensorError::InvalidValue {
                op: "slice",
                msg: format!("expected 1-D input, got shape {:?}", self.shape),
            });
        }
        if start >= end || end > self.numel() {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice",
                start,
                end,
                len: self.numel(),
            });
        }
        let value = self.data()[start..end].to_vec();
        emit(&[self], vec![end - start], value, |ids| {
            Op::Slice(ids[0], start, end)
        })
    }

    /// L2 norm, recorded as sqrt(sum(x^2)).
    pub fn l2_norm(&self) -> R<F> {
        self.square()?.sum()?.sqrt()
    }
}
