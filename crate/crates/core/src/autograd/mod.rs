//! Reverse-mode automatic differentiation over batched dense f32 tensors.
//!
//! Operations record themselves on a [`Tape`] during the forward pass; a
//! call to [`Tape::backward`] replays the recorded nodes in reverse and
//! accumulates gradients into every tensor that requires them. There is one
//! tape per training step; parameters outlive tapes and carry their own
//! gradient buffers across steps (gradients accumulate until explicitly
//! zeroed).
//!
//! ```
//! use siamsearch_core::autograd::{ops, Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = Tensor::param(&[2], vec![3.0, -1.0]).unwrap();
//! let loss = ops::sum_all(Some(&tape), &x).unwrap();
//! tape.backward(&loss).unwrap();
//! assert_eq!(x.grad_vec().unwrap(), vec![1.0, 1.0]);
//! ```

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub mod kernels;
pub mod ops;
pub mod optim;
pub mod sched;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

/// Whether a forward pass is a training pass (batch statistics, stat
/// updates) or an inference pass (running statistics, no side effects).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a forward pass needs to know: the recording tape (if any)
/// and the batch-norm mode.
#[derive(Clone, Copy)]
pub struct ForwardCtx<'t> {
    pub tape: Option<&'t Tape>,
    pub mode: Mode,
}

impl<'t> ForwardCtx<'t> {
    pub fn train(tape: &'t Tape) -> Self {
        Self {
            tape: Some(tape),
            mode: Mode::Train,
        }
    }

    pub fn eval() -> ForwardCtx<'static> {
        ForwardCtx {
            tape: None,
            mode: Mode::Eval,
        }
    }
}

/// Handle into the tape that produced a tensor.
#[derive(Clone, Copy, Debug)]
pub struct GraphRef {
    pub tape_id: u64,
    pub node: usize,
}

struct TensorInner {
    shape: Vec<usize>,
    values: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    graph: Option<GraphRef>,
}

/// A batched dense tensor of f32 values, row-major.
///
/// Cloning is shallow: clones share storage and gradients. Tensors are
/// leaves (parameters or constants) unless an op produced them, in which
/// case they hold a [`GraphRef`] into the recording tape.
#[derive(Clone)]
pub struct Tensor {
    uid: u64,
    inner: Rc<RefCell<TensorInner>>,
}

impl Tensor {
    fn build(shape: &[usize], values: Vec<f32>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                left: shape.to_vec(),
                right: vec![values.len()],
            });
        }
        Ok(Self {
            uid: fresh_uid(),
            inner: Rc::new(RefCell::new(TensorInner {
                shape: shape.to_vec(),
                values,
                grad: None,
                requires_grad,
                graph: None,
            })),
        })
    }

    /// A constant (non-trainable) tensor.
    pub fn constant(shape: &[usize], values: Vec<f32>) -> Result<Self> {
        Self::build(shape, values, false)
    }

    /// A trainable leaf tensor.
    pub fn param(shape: &[usize], values: Vec<f32>) -> Result<Self> {
        Self::build(shape, values, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::build(shape, vec![0.0; numel], false).expect("consistent")
    }

    pub fn scalar(v: f32) -> Self {
        Self::build(&[1], vec![v], false).expect("consistent")
    }

    pub(crate) fn from_op(shape: &[usize], values: Vec<f32>) -> Self {
        Self::build(shape, values, false).expect("op produced a consistent shape")
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn graph_ref(&self) -> Option<GraphRef> {
        self.inner.borrow().graph
    }

    /// Copies the values out.
    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.borrow().values.clone()
    }

    /// Runs `f` over the raw value slice without copying.
    pub fn with_values<R>(&self, f: impl FnOnce(&[f32]) -> R) -> R {
        f(&self.inner.borrow().values)
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f32 {
        let inner = self.inner.borrow();
        assert_eq!(inner.values.len(), 1, "item() on non-scalar");
        inner.values[0]
    }

    /// Value-identical tensor detached from any tape: no graph reference,
    /// `requires_grad = false`. Gradients never flow through it.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor {
            uid: fresh_uid(),
            inner: Rc::new(RefCell::new(TensorInner {
                shape: inner.shape.clone(),
                values: inner.values.clone(),
                grad: None,
                requires_grad: false,
                graph: None,
            })),
        }
    }

    /// Current gradient, if one has been accumulated.
    pub fn grad_vec(&self) -> Option<Vec<f32>> {
        self.inner.borrow().grad.clone()
    }

    /// Gradient, with zeros standing in for "never touched".
    pub fn grad_or_zeros(&self) -> Vec<f32> {
        let inner = self.inner.borrow();
        inner
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; inner.values.len()])
    }

    pub fn accumulate_grad(&self, g: &[f32]) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(g.len(), inner.values.len());
        match &mut inner.grad {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => inner.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrites the values in place (used by optimizers and loaders).
    pub fn set_values(&self, values: &[f32]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(values.len(), inner.values.len());
        inner.values.copy_from_slice(values);
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        let a = self.inner.borrow();
        let b = other.inner.borrow();
        a.shape == b.shape
            && a.values
                .iter()
                .zip(&b.values)
                .all(|(x, y)| x.to_bits() == y.to_bits())
    }

    fn mark_recorded(&self, graph: GraphRef) {
        let mut inner = self.inner.borrow_mut();
        inner.graph = Some(graph);
        inner.requires_grad = true;
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("uid", &self.uid)
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

/// Running gradient accumulator used during one backward traversal.
///
/// Gradients live here while the tape unwinds; only at the end are they
/// flushed into the tensors' own buffers, so repeated backward calls
/// accumulate cleanly.
pub struct GradStore {
    entries: HashMap<u64, (Tensor, Vec<f32>)>,
}

impl GradStore {
    fn new() -> Self {
        Self {
            entries: HashMap::new(),
        }
    }

    /// Whether a gradient for `t` is worth computing at all.
    pub fn wants(&self, t: &Tensor) -> bool {
        t.requires_grad()
    }

    /// Adds a gradient contribution for `t`; silently dropped when the
    /// tensor does not require gradients (this is what makes detached
    /// paths exactly zero rather than merely small).
    pub fn add(&mut self, t: &Tensor, g: Vec<f32>) {
        if !t.requires_grad() {
            return;
        }
        debug_assert_eq!(g.len(), t.numel());
        match self.entries.entry(t.uid) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                let buf = &mut e.get_mut().1;
                for (b, v) in buf.iter_mut().zip(&g) {
                    *b += v;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert((t.clone(), g));
            }
        }
    }

    fn grad_by_uid(&self, uid: u64) -> Option<&Vec<f32>> {
        self.entries.get(&uid).map(|(_, g)| g)
    }

    fn flush(self) {
        for (_, (t, g)) in self.entries {
            t.accumulate_grad(&g);
        }
    }
}

type BackwardFn = Box<dyn Fn(&[f32], &mut GradStore)>;

struct Node {
    output_uid: u64,
    backward: BackwardFn,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Recording tape for one forward/backward cycle.
///
/// Nodes are appended in topological order during the forward pass and
/// visited exactly once, in reverse, during [`Tape::backward`].
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn record(&self, output: &Tensor, backward: BackwardFn) {
        let mut nodes = self.nodes.borrow_mut();
        let node = nodes.len();
        nodes.push(Node {
            output_uid: output.uid,
            backward,
        });
        output.mark_recorded(GraphRef {
            tape_id: self.id,
            node,
        });
    }

    /// Propagates gradients from a scalar loss back through every
    /// recorded node, accumulating into the grad buffer of each tensor
    /// with `requires_grad`. Calling twice doubles the gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape()));
        }
        let graph = loss.graph_ref().ok_or(Error::NotOnTape)?;
        if graph.tape_id != self.id {
            return Err(Error::NotOnTape);
        }

        let mut store = GradStore::new();
        store.add(loss, vec![1.0]);

        let nodes = self.nodes.borrow();
        for node in nodes[..=graph.node].iter().rev() {
            let gout = match store.grad_by_uid(node.output_uid) {
                Some(g) => g.clone(),
                None => continue,
            };
            (node.backward)(&gout, &mut store);
        }
        drop(nodes);
        store.flush();
        Ok(())
    }
}

/// Records `backward` for `output` when a tape is active and at least one
/// input still requires gradients.
pub(crate) fn record_if_needed(
    tape: Option<&Tape>,
    any_input_requires: bool,
    output: &Tensor,
    backward: impl Fn(&[f32], &mut GradStore) + 'static,
) {
    if let Some(tape) = tape {
        if any_input_requires {
            tape.record(output, Box::new(backward));
        }
    }
}

/// Zeroes the gradients of every tensor in the slice.
pub fn zero_grads(params: &[Tensor]) {
    for p in params {
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detach_is_bitwise_identical_without_graph() {
        let t = Tensor::param(&[3], vec![1.5, -2.25, 0.0]).unwrap();
        let d = t.detach();
        assert!(t.bitwise_eq(&d));
        assert!(!d.requires_grad());
        assert!(d.graph_ref().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = Tensor::param(&[2, 2], vec![1.0; 4]).unwrap();
        let y = ops::scale(Some(&tape), &x, 2.0).unwrap();
        match tape.backward(&y) {
            Err(Error::NonScalarLoss(shape)) => assert_eq!(shape, vec![2, 2]),
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn backward_rejects_off_tape_loss() {
        let tape = Tape::new();
        let loss = Tensor::scalar(1.0);
        assert!(matches!(tape.backward(&loss), Err(Error::NotOnTape)));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = ops::sum_all(Some(&tape), &x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![1.0, 1.0, 1.0]);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![2.0, 2.0, 2.0]);
    }
}
