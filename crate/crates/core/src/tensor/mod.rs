//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Every forward op allocates a fresh output and, when any input requires a
//! gradient, records a backward closure together with its parents. The graph
//! is a DAG rooted at the loss; [`Tensor::backward`] visits each node once in
//! reverse topological order and accumulates gradients additively.

mod conv;
mod float;
pub mod gradcheck;
mod nn_ops;
mod ops;

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use conv::{conv3d_out_len, conv_transpose3d_out_len, Conv3dGeometry};
pub use float::{DType, Float};
pub use gradcheck::{finite_diff_check, finite_diff_check_inputs};
pub use ops::{broadcast_shape, matmul_raw, matmul_raw_nt};

use crate::error::{Error, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

type BackwardFn<F> = Box<dyn Fn(&[F]) -> Vec<Option<Vec<F>>>>;

struct Op<F: Float> {
    name: &'static str,
    parents: Vec<Tensor<F>>,
    backward: BackwardFn<F>,
}

struct Node<F: Float> {
    id: usize,
    shape: Vec<usize>,
    data: Rc<Vec<F>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<F>>>,
    retain_grad: Cell<bool>,
    op: Option<Op<F>>,
}

/// A dense tensor participating in the gradient tape.
///
/// Cloning is cheap (reference counted); the data is immutable after creation.
pub struct Tensor<F: Float = f32>(Rc<Node<F>>);

impl<F: Float> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<F: Float> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.op_name())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite<F: Float>(op: &'static str, data: &[F]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<F: Float> Tensor<F> {
    fn build(
        shape: Vec<usize>,
        data: Rc<Vec<F>>,
        requires_grad: bool,
        op: Option<Op<F>>,
    ) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            retain_grad: Cell::new(false),
            op,
        }))
    }

    /// Constant (non-differentiable) tensor.
    pub fn new(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// Leaf tensor, optionally tracked for gradients.
    pub fn leaf(data: Vec<F>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Shape {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        check_finite("new", &data)?;
        Ok(Self::build(shape.to_vec(), Rc::new(data), requires_grad, None))
    }

    pub fn from_f64(values: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(values.iter().map(|&v| F::of(v)).collect(), shape)
    }

    pub fn scalar(v: F) -> Self {
        Self::build(Vec::new(), Rc::new(vec![v]), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Self::build(shape.to_vec(), Rc::new(vec![v; numel(shape)]), false, None)
    }

    /// Normal samples with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::of(z * std)
            })
            .collect();
        Self::build(shape.to_vec(), Rc::new(data), false, None)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| F::of(rng.random_range(lo..hi)))
            .collect();
        Self::build(shape.to_vec(), Rc::new(data), false, None)
    }

    /// Records an op result. Parents that do not require gradients receive
    /// `None` from the backward closure; when no parent requires one, the
    /// closure is dropped and the result is a constant.
    pub(crate) fn from_op(
        name: &'static str,
        data: Vec<F>,
        shape: Vec<usize>,
        parents: Vec<Tensor<F>>,
        backward: impl Fn(&[F]) -> Vec<Option<Vec<F>>> + 'static,
    ) -> Result<Self> {
        debug_assert_eq!(numel(&shape), data.len(), "{name}: shape/data mismatch");
        check_finite(name, &data)?;
        Ok(Self::from_op_rc(name, Rc::new(data), shape, parents, backward))
    }

    pub(crate) fn from_op_rc(
        name: &'static str,
        data: Rc<Vec<F>>,
        shape: Vec<usize>,
        parents: Vec<Tensor<F>>,
        backward: impl Fn(&[F]) -> Vec<Option<Vec<F>>> + 'static,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let op = requires_grad.then(|| Op {
            name,
            parents,
            backward: Box::new(backward),
        });
        Self::build(shape, data, requires_grad, op)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.0.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<F>> {
        Rc::clone(&self.0.data)
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.0.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1);
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op.as_ref().map_or("leaf", |op| op.name)
    }

    /// Accumulated gradient; populated by [`Tensor::backward`] on leaves and
    /// on intermediates flagged with [`Tensor::retain_grad`].
    pub fn grad(&self) -> Option<Vec<F>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn retain_grad(&self) {
        self.0.retain_grad.set(true);
    }

    /// Same data, cut from the tape.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.data_rc(), false, None)
    }

    /// Same data as a fresh gradient-tracked leaf.
    pub fn detach_requires_grad(&self) -> Self {
        Self::build(self.0.shape.clone(), self.data_rc(), true, None)
    }

    /// Topological order (parents before children) of the gradient-tracked
    /// subgraph reachable from `self`.
    fn topo_order(&self) -> Vec<Tensor<F>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // (node, parents expanded?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = &node.0.op {
                for p in op.parents.iter().rev() {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Backpropagates from a scalar loss, accumulating into `grad` of every
    /// reachable gradient-tracked leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<F>> = HashMap::new();
        grads.insert(self.id(), vec![F::one()]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if node.is_leaf() || node.0.retain_grad.get() {
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    None => *slot = Some(g.clone()),
                }
            }
            if let Some(op) = &node.0.op {
                let parent_grads = (op.backward)(&g);
                for (p, pg) in op.parents.iter().zip(parent_grads) {
                    if let Some(pg) = pg {
                        if p.requires_grad() {
                            accumulate(&mut grads, p.id(), pg);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradients of a scalar loss with respect to `wrt`, without touching any
    /// stored `grad`. Only the part of the graph leading to `wrt` is visited.
    pub fn grad_wrt(&self, wrt: &[&Tensor<F>]) -> Result<Vec<Vec<F>>> {
        if self.numel() != 1 {
            return Err(Error::contract("grad_wrt requires a scalar loss"));
        }
        let zeros = |t: &Tensor<F>| vec![F::zero(); t.numel()];
        if !self.requires_grad() {
            return Ok(wrt.iter().map(|t| zeros(t)).collect());
        }
        let targets: HashSet<usize> = wrt.iter().map(|t| t.id()).collect();
        let order = self.topo_order();
        let mut relevant: HashSet<usize> = HashSet::new();
        for node in &order {
            let hit = targets.contains(&node.id())
                || node
                    .0
                    .op
                    .as_ref()
                    .is_some_and(|op| op.parents.iter().any(|p| relevant.contains(&p.id())));
            if hit {
                relevant.insert(node.id());
            }
        }
        let mut grads: HashMap<usize, Vec<F>> = HashMap::new();
        let mut out: HashMap<usize, Vec<F>> = HashMap::new();
        grads.insert(self.id(), vec![F::one()]);
        for node in order.iter().rev() {
            if !relevant.contains(&node.id()) {
                continue;
            }
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if let Some(op) = &node.0.op {
                if !targets.contains(&node.id()) || op.parents.iter().any(|p| relevant.contains(&p.id())) {
                    let parent_grads = (op.backward)(&g);
                    for (p, pg) in op.parents.iter().zip(parent_grads) {
                        if let Some(pg) = pg {
                            if relevant.contains(&p.id()) {
                                accumulate(&mut grads, p.id(), pg);
                            }
                        }
                    }
                }
            }
            if targets.contains(&node.id()) {
                out.insert(node.id(), g);
            }
        }
        Ok(wrt
            .iter()
            .map(|t| out.remove(&t.id()).unwrap_or_else(|| zeros(t)))
            .collect())
    }
}

fn accumulate<F: Float>(grads: &mut HashMap<usize, Vec<F>>, id: usize, g: Vec<F>) {
    match grads.get_mut(&id) {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
        None => {
            grads.insert(id, g);
        }
    }
}
