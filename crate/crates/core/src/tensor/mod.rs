//! Dense row-major tensors with a reverse-mode gradient tape.
//!
//! Every differentiable op records its parents and a backward closure on the
//! output node. Leaves created with [`Tensor::param`] (or
//! [`Tensor::requires_grad`]) accumulate gradients across calls to
//! [`Tensor::backward`] until [`Tensor::zero_grad`] is called.

mod archive;
pub mod gradcheck;
mod instrument;
mod ops;
mod param;

pub use archive::{read_archive, write_archive, Archive, ArchiveEntry};
pub use gradcheck::{gradcheck, op_suite, GradcheckReport};
pub use instrument::{mac_tally, record_macs, MacCounter};
#[cfg(test)]
pub(crate) use instrument::TEST_LOCK;
pub use ops::{concat, embedding_lookup};
pub use param::{ParamGroup, ParamId, ParamStore, Parameter};

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Receives the output gradient and a per-parent "needs grad" mask.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct GradFn {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("tracked", &self.is_tracked())
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().any(|&s| s == 0) || numel_of(shape) != data.len() {
            return Err(Error::Shape {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// A trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Self::new(data, shape)?.requires_grad())
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::leaf(vec![v], vec![], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::leaf(vec![0.0; numel_of(shape)], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Self::leaf(vec![v; numel_of(shape)], shape.to_vec(), false)
    }

    pub(crate) fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Rc::new(Node {
            shape,
            data: Rc::new(data),
            requires_grad,
            grad: RefCell::new(None),
            grad_fn: None,
        }))
    }

    /// Builds the output of an op. The backward closure is only kept when
    /// some parent needs a gradient and recording is enabled.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        Self::from_op_shared(Rc::new(data), shape, parents, backward)
    }

    pub(crate) fn from_op_shared(
        data: Rc<Vec<f64>>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        let tracked = grad_enabled() && parents.iter().any(Tensor::is_tracked);
        Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad: tracked,
            grad: RefCell::new(None),
            grad_fn: tracked.then(|| GradFn { parents, backward }),
        }))
    }

    /// Returns a fresh leaf sharing this tensor's values, with gradient tracking on.
    pub fn requires_grad(&self) -> Tensor {
        Tensor(Rc::new(Node {
            shape: self.0.shape.clone(),
            data: self.0.data.clone(),
            requires_grad: true,
            grad: RefCell::new(None),
            grad_fn: None,
        }))
    }

    /// Returns a leaf with the same values and no gradient tracking.
    pub fn detach(&self) -> Tensor {
        Tensor(Rc::new(Node {
            shape: self.0.shape.clone(),
            data: self.0.data.clone(),
            requires_grad: false,
            grad: RefCell::new(None),
            grad_fn: None,
        }))
    }

    pub fn is_tracked(&self) -> bool {
        self.0.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        self.0.data.clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    pub(crate) fn accumulate(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Nodes with a backward closure, ordered so that every node follows all
    /// of its inputs.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.key());
        while let Some((node, child)) = stack.pop() {
            let parents = match &node.0.grad_fn {
                Some(gf) => &gf.parents,
                None => continue,
            };
            if child < parents.len() {
                let next = parents[child].clone();
                stack.push((node, child + 1));
                if next.0.grad_fn.is_some() && seen.insert(next.key()) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }

    /// Back-propagates from a single-element tensor, accumulating into the
    /// `grad` of every tracked leaf it depends on.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad_flag() {
            return Ok(());
        }
        if self.is_leaf() {
            self.accumulate(&[1.0]);
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<*const Node, Vec<f64>> = HashMap::new();
        pending.insert(self.key(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.key()) else {
                continue;
            };
            let gf = node.0.grad_fn.as_ref().expect("topo order holds interior nodes");
            let needs: Vec<bool> = gf.parents.iter().map(Tensor::requires_grad_flag).collect();
            let grads = (gf.backward)(&g, &needs);
            for ((parent, pg), need) in gf.parents.iter().zip(grads).zip(needs) {
                if !need {
                    continue;
                }
                let pg = pg.expect("backward closure skipped a required gradient");
                debug_assert_eq!(pg.len(), parent.numel());
                if parent.is_leaf() {
                    parent.accumulate(&pg);
                } else {
                    match pending.get_mut(&parent.key()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(parent.key(), pg);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn requires_grad_flag(&self) -> bool {
        self.0.requires_grad
    }
}
