//! Dense f64 tensors with reverse-mode differentiation.
//!
//! Everything trainable in this crate is expressed through the ops in
//! [`ops`](self::ops): matrix products, convolutions, row softmax with an
//! additive mask, layer norm, activations and a handful of data-movement
//! ops. Each op records a backward closure on its output; calling
//! [`Tensor::backward`] on a scalar walks the graph in reverse topological
//! order and accumulates gradients into every reachable tensor that was
//! created with `requires_grad`.
//!
//! Tensors are immutable after forward construction except for gradient
//! accumulation; the optimizer mutates leaf parameter data between steps.
//! All arithmetic is in f64 and single-threaded, so identical inputs give
//! bit-identical outputs.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::SeedRng;

pub mod grad_check;
pub mod ops;

/// Additive attention-mask value for forbidden entries.
///
/// A large negative *finite* float rather than `-inf`: it keeps softmax
/// arithmetic NaN-free, and [`ops` softmax](Tensor::softmax_rows) treats
/// entries whose bias equals this sentinel exactly as hard-masked (their
/// weight is exactly zero).
pub const MASK_NEG: f64 = -1e9;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Run `f` without recording backward closures. Useful for sampling, where
/// gradients are never needed and graph bookkeeping would only cost memory.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    GRAD_ENABLED.with(|c| {
        let prev = c.get();
        c.set(false);
        let out = f();
        c.set(prev);
        out
    })
}

type BackwardFn = Box<dyn Fn(&[f64])>;

struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// N-dimensional array of f64 in row-major order, with optional gradient
/// tracking. Cloning is cheap (shared handle).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_shape_len(shape: &[usize], len: usize) -> Result<()> {
    let expect: usize = shape.iter().product();
    if expect != len {
        return Err(Error::shape(
            "from_vec",
            format!("shape {shape:?} wants {expect} values, got {len}"),
        ));
    }
    Ok(())
}

impl Tensor {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        Tensor {
            inner: Rc::new(TensorInner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Constant leaf tensor (no gradient tracking).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape_len(shape, data.len())?;
        Ok(Self::new_inner(shape.to_vec(), data, false, Vec::new(), None))
    }

    /// Trainable leaf tensor: gradients accumulate here during backward.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape_len(shape, data.len())?;
        Ok(Self::new_inner(shape.to_vec(), data, true, Vec::new(), None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![0.0; len], false, Vec::new(), None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let len = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![value; len], false, Vec::new(), None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::new_inner(vec![1], vec![value], false, Vec::new(), None)
    }

    /// Leaf filled with standard normal draws.
    pub fn randn(shape: &[usize], rng: &mut SeedRng) -> Tensor {
        let len: usize = shape.iter().product();
        let mut data = vec![0.0; len];
        rng.fill_normal(&mut data);
        Self::new_inner(shape.to_vec(), data, false, Vec::new(), None)
    }

    /// Trainable leaf filled with `N(0, std^2)` draws.
    pub fn randn_param(shape: &[usize], std: f64, rng: &mut SeedRng) -> Tensor {
        let len: usize = shape.iter().product();
        let mut data = vec![0.0; len];
        rng.fill_normal(&mut data);
        for v in data.iter_mut() {
            *v *= std;
        }
        Self::new_inner(shape.to_vec(), data, true, Vec::new(), None)
    }

    /// Trainable leaf of zeros (zero-initialized projections).
    pub fn zeros_param(shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![0.0; len], true, Vec::new(), None)
    }

    /// Output of an op. Gradient tracking is inherited from the parents and
    /// can be suppressed by [`no_grad`].
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let track = grad_enabled() && parents.iter().any(|p| p.inner.requires_grad);
        if track {
            Self::new_inner(shape, data, true, parents, Some(backward))
        } else {
            Self::new_inner(shape, data, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copy of the forward values.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of {} elements", d.len());
        d[0]
    }

    /// Run `f` over the raw forward buffer without copying.
    pub fn with_data<T>(&self, f: impl FnOnce(&[f64]) -> T) -> T {
        f(&self.inner.data.borrow())
    }

    /// Mutate raw values in place. Reserved for the optimizer and for
    /// finite-difference probes; using it on an interior graph node
    /// invalidates recorded backward closures.
    pub(crate) fn with_data_mut<T>(&self, f: impl FnOnce(&mut [f64]) -> T) -> T {
        f(&mut self.inner.data.borrow_mut())
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn add_grad(&self, delta: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut g = self.inner.grad.borrow_mut();
        let g = g.get_or_insert_with(|| vec![0.0; delta.len()]);
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Check that every stored value is finite.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        let d = self.inner.data.borrow();
        for (i, &v) in d.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::non_finite(op, format!("index {i} is {v}")));
            }
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar output.
    ///
    /// Seeds `d(self)/d(self) = 1` and visits every recorded op once in
    /// reverse topological order, accumulating into `requires_grad` leaves.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("expected scalar output, got shape {:?}", self.shape()),
            ));
        }
        if !self.inner.requires_grad {
            return Err(Error::invalid(
                "backward",
                "output does not depend on any tracked tensor",
            ));
        }

        // Iterative post-order DFS; graphs from long training chains can be
        // deep enough to make recursion risky.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx < node.inner.parents.len() {
                let parent = node.inner.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if parent.inner.requires_grad && visited.insert(parent.inner.id) {
                    stack.push((parent, 0));
                }
            } else {
                topo.push(node);
            }
        }

        self.add_grad(&[1.0]);
        for node in topo.iter().rev() {
            if let Some(back) = &node.inner.backward {
                let g = node.inner.grad.borrow();
                if let Some(g) = g.as_ref() {
                    back(g);
                }
            }
        }
        Ok(())
    }
}
