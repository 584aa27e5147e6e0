//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Tensors are double-precision, shapes are explicit, and every forward
//! primitive records a backward closure when any input requires gradients.
//! A computation graph lives inside one execution context; graphs are built
//! fresh per forward pass and dropped afterwards.

mod attention;
mod ops;
mod optim;

pub use attention::{multi_head_attention, AttnMask, AttnParams};
pub use optim::{cosine_lr, load_checkpoint, save_checkpoint, Checkpoint, ParamStore};

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn = Box<dyn Fn(&[f64])>;

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

/// Dense tensor handle. Cloning is cheap (shared node).
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward_fn: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward_fn,
            }),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(Error::Shape {
                op: "constant",
                detail: format!(
                    "shape {shape:?} expects {} values, got {}",
                    numel_of(shape),
                    data.len()
                ),
            });
        }
        Ok(Tensor::build(shape.to_vec(), data, false, Vec::new(), None))
    }

    /// Leaf parameter tensor participating in gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(Error::Shape {
                op: "param",
                detail: format!(
                    "shape {shape:?} expects {} values, got {}",
                    numel_of(shape),
                    data.len()
                ),
            });
        }
        Ok(Tensor::build(shape.to_vec(), data, true, Vec::new(), None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(
            shape.to_vec(),
            vec![0.0; numel_of(shape)],
            false,
            Vec::new(),
            None,
        )
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        Tensor::build(
            shape.to_vec(),
            vec![value; numel_of(shape)],
            false,
            Vec::new(),
            None,
        )
    }

    /// New op node. `requires_grad` is inherited from parents; the backward
    /// closure is dropped when no parent tracks gradients.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward_fn: impl Fn(&[f64]) + 'static,
    ) -> Tensor {
        let requires = parents.iter().any(|p| p.inner.requires_grad);
        if requires {
            Tensor::build(shape, data, true, parents, Some(Box::new(backward_fn)))
        } else {
            Tensor::build(shape, data, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Rows of a 2-D tensor (or 1 for other ranks... callers use 2-D).
    pub fn rows(&self) -> usize {
        self.inner.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.inner.shape.len() >= 2 {
            self.inner.shape[1]
        } else {
            self.inner.shape.first().copied().unwrap_or(1)
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn value_at(&self, idx: usize) -> f64 {
        self.inner.data.borrow()[idx]
    }

    /// Scalar value of a 1-element tensor.
    pub fn scalar(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Shape {
                op: "scalar",
                detail: format!("expected 1 element, got shape {:?}", self.inner.shape),
            });
        }
        Ok(self.inner.data.borrow()[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// In-place data mutation for leaf parameters (between graphs).
    pub fn set_data(&self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::Shape {
                op: "set_data",
                detail: format!("expected {} values, got {}", self.numel(), values.len()),
            });
        }
        *self.inner.data.borrow_mut() = values;
        Ok(())
    }

    pub fn set_value(&self, idx: usize, value: f64) {
        self.inner.data.borrow_mut()[idx] = value;
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss: accumulates gradients into all
    /// gradient-tracking leaves reachable from this node. Deterministic.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", self.inner.shape),
            });
        }
        if !self.inner.requires_grad {
            return Err(Error::State(
                "backward on a graph with no gradient-tracking leaves".into(),
            ));
        }
        // Creation order is a topological order of the DAG, so a descending
        // id sweep visits every node after all of its consumers.
        let mut nodes: Vec<Rc<Inner>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<Rc<Inner>> = vec![Rc::clone(&self.inner)];
        while let Some(node) = stack.pop() {
            if !seen.insert(node.id) {
                continue;
            }
            for parent in &node.parents {
                if parent.inner.requires_grad {
                    stack.push(Rc::clone(&parent.inner));
                }
            }
            nodes.push(node);
        }
        nodes.sort_by(|a, b| b.id.cmp(&a.id));
        self.accumulate_grad(&[1.0]);
        for node in nodes {
            if let Some(back) = &node.backward_fn {
                let grad = node.grad.borrow().clone();
                if let Some(grad) = grad {
                    back(&grad);
                }
            }
        }
        Ok(())
    }
}

/// Xavier-uniform initialized parameter matrix.
pub fn xavier_param(rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::param(&[rows, cols], data).expect("shape matches data")
}

/// Zero-initialized parameter (used for output heads and biases).
pub fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::param(shape, vec![0.0; shape.iter().product()]).expect("shape matches data")
}

/// Constant-filled parameter (used for layer-norm gains).
pub fn filled_param(shape: &[usize], value: f64) -> Tensor {
    Tensor::param(shape, vec![value; shape.iter().product()]).expect("shape matches data")
}

/// Gaussian-initialized parameter.
pub fn normal_param(shape: &[usize], std: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    use rand_distr::Distribution;
    let normal = rand_distr::Normal::new(0.0, std).expect("valid std");
    let data: Vec<f64> = (0..shape.iter().product())
        .map(|_| normal.sample(rng))
        .collect();
    Tensor::param(shape, data).expect("shape matches data")
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::Tensor;

    /// Central finite-difference check (h = 1e-6) for every component of
    /// `x`, with a relative-error floor of 1 so near-zero gradients are
    /// compared absolutely.
    pub(crate) fn finite_diff_check(x: &Tensor, forward: impl Fn() -> Tensor, tol: f64) {
        x.zero_grad();
        let loss = forward();
        loss.backward().unwrap();
        let analytic = x.grad().unwrap();
        drop(loss);
        let h = 1e-6;
        for i in 0..x.numel() {
            let orig = x.value_at(i);
            x.set_value(i, orig + h);
            let fp = forward().scalar().unwrap();
            x.set_value(i, orig - h);
            let fm = forward().scalar().unwrap();
            x.set_value(i, orig);
            let numeric = (fp - fm) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
            assert!(
                (analytic[i] - numeric).abs() / denom < tol,
                "component {i}: analytic {} vs numeric {}",
                analytic[i],
                numeric
            );
        }
        x.zero_grad();
    }
}
