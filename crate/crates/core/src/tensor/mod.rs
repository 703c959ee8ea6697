//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The tape is define-by-run: ops record a node whenever an input is traced,
//! and a fresh tape is built every training iteration. Backward passes build
//! their vector-Jacobian products out of the same public ops, so gradients
//! are themselves differentiable when requested via [`Tensor::backward_retaining`]
//! (used for the discriminator gradient penalty).

mod kernels;
mod ops;

pub use ops::{elementwise, Activation};

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected shape {expected:?}, got {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("conv2d: kernel {kernel:?} larger than padded input {input:?} (padding {padding})")]
    KernelTooLarge {
        kernel: Vec<usize>,
        input: Vec<usize>,
        padding: usize,
    },
    #[error("unknown activation `{0}`")]
    UnknownActivation(String),
    #[error("backward: loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: loss is not on a tape")]
    LossNotOnTape,
    #[error("{op}: inputs recorded on different tapes")]
    TapeMismatch { op: &'static str },
    #[error("{op}: input belongs to a consumed tape generation")]
    StaleTape { op: &'static str },
    #[error("reshape: cannot view {from:?} ({from_len} elems) as {to:?} ({to_len} elems)")]
    BadReshape {
        from: Vec<usize>,
        from_len: usize,
        to: Vec<usize>,
        to_len: usize,
    },
}

type GradCell = Rc<RefCell<Option<Vec<f64>>>>;

/// A tensor value saved inside a tape node: data plus its node link, without
/// a tape back-reference (avoids Rc cycles between tape and nodes).
#[derive(Clone)]
struct Saved {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<NodeId>,
}

#[derive(Clone)]
pub(crate) enum Op {
    Leaf { cell: GradCell },
    Matmul,
    Transpose2d,
    Conv2d { stride: usize, padding: usize },
    TConv2d { stride: usize, padding: usize },
    ConvWGrad { stride: usize, padding: usize },
    Add,
    Sub,
    Mul,
    AddBias,
    AddChannelBias,
    Scale(f64),
    AddScalar(f64),
    SMul,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Softplus,
    Sqrt,
    Recip,
    SumAll,
    SumAxis0,
    BroadcastAxis0,
    SumChannels,
    BroadcastChannels,
    SumTrailing,
    BroadcastTrailing,
    Reshape,
    CrossEntropyLogits { labels: Rc<Vec<usize>> },
}

struct Node {
    op: Op,
    inputs: Vec<Saved>,
    output: Saved,
}

struct TapeInner {
    nodes: Vec<Node>,
    generation: u64,
}

/// Recording tape for one training actor. Cheap to clone (shared handle);
/// confined to a single sequential execution context.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                generation: 0,
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a constant tensor as a differentiable leaf on this tape.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let cell: GradCell = Rc::new(RefCell::new(None));
        let generation = self.inner.borrow().generation;
        let id = self.push(
            Op::Leaf { cell: cell.clone() },
            vec![],
            Saved {
                shape: t.shape.clone(),
                data: t.data.clone(),
                node: None,
            },
        );
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            trace: Some(Trace {
                tape: self.clone(),
                generation,
                id,
            }),
            grad: cell,
        }
    }

    /// Drop all recorded nodes and invalidate outstanding traces.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.generation += 1;
    }

    fn push(&self, op: Op, inputs: Vec<Saved>, mut output: Saved) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        output.node = Some(id);
        inner.nodes.push(Node { op, inputs, output });
        id
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn snapshot(&self, id: NodeId) -> (Op, Vec<Saved>, Saved) {
        let inner = self.inner.borrow();
        let node = &inner.nodes[id];
        (node.op.clone(), node.inputs.clone(), node.output.clone())
    }
}

#[derive(Clone)]
struct Trace {
    tape: Tape,
    generation: u64,
    id: NodeId,
}

/// Dense n-dimensional array of f64 in row-major order. Cloning shares the
/// underlying buffer; values are immutable once constructed.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    trace: Option<Trace>,
    grad: GradCell,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, traced={}, data[..4]={:?})",
            self.shape,
            self.trace.is_some(),
            &self.data[..self.data.len().min(4)]
        )
    }
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::BadShape {
                op: "new",
                expected: format!("{expected} elements for {shape:?}"),
                got: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            trace: None,
            grad: Rc::new(RefCell::new(None)),
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![v], &[1]).expect("scalar")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(vec![0.0; n], shape).expect("zeros")
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(vec![1.0; n], shape).expect("ones")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.trace.is_some()
    }

    /// Copy of this value with no tape participation.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            trace: None,
            grad: Rc::new(RefCell::new(None)),
        }
    }

    /// Leaf gradient populated by the most recent backward pass.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.grad.borrow().clone()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gradients of this scalar w.r.t. every traced tensor; consumes the tape.
    pub fn backward(&self) -> Result<Gradients, TensorError> {
        let grads = backward_impl(self, false)?;
        if let Some(trace) = &self.trace {
            trace.tape.reset();
        }
        Ok(grads)
    }

    /// Like [`Tensor::backward`] but keeps the tape alive and records the
    /// backward computation itself, so the returned gradients can be
    /// differentiated again (double backprop).
    pub fn backward_retaining(&self) -> Result<Gradients, TensorError> {
        backward_impl(self, true)
    }

    fn trace_ok(&self, op: &'static str) -> Result<Option<&Trace>, TensorError> {
        match &self.trace {
            None => Ok(None),
            Some(t) => {
                if t.tape.inner.borrow().generation != t.generation {
                    Err(TensorError::StaleTape { op })
                } else {
                    Ok(Some(t))
                }
            }
        }
    }

    fn saved(&self) -> Saved {
        Saved {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: self.trace.as_ref().map(|t| t.id),
        }
    }
}

/// Pick the recording tape for an op over the given inputs, verifying that
/// all traced inputs live on the same, current tape.
fn join_tape(op: &'static str, inputs: &[&Tensor]) -> Result<Option<Tape>, TensorError> {
    let mut found: Option<Tape> = None;
    for t in inputs {
        if let Some(trace) = t.trace_ok(op)? {
            match &found {
                None => found = Some(trace.tape.clone()),
                Some(tape) => {
                    if !tape.same_tape(&trace.tape) {
                        return Err(TensorError::TapeMismatch { op });
                    }
                }
            }
        }
    }
    Ok(found)
}

/// Record `op` producing `data`/`shape` from `inputs`, if any input is traced.
fn record(
    op_name: &'static str,
    op: Op,
    inputs: &[&Tensor],
    data: Vec<f64>,
    shape: Vec<usize>,
) -> Result<Tensor, TensorError> {
    debug_assert_eq!(data.len(), shape.iter().product::<usize>(), "{op_name}");
    let tape = join_tape(op_name, inputs)?;
    let data = Rc::new(data);
    let trace = match tape {
        None => None,
        Some(tape) => {
            let generation = tape.inner.borrow().generation;
            let saved_inputs = inputs.iter().map(|t| t.saved()).collect();
            let id = tape.push(
                op,
                saved_inputs,
                Saved {
                    shape: shape.clone(),
                    data: data.clone(),
                    node: None,
                },
            );
            Some(Trace {
                tape,
                generation,
                id,
            })
        }
    };
    Ok(Tensor {
        shape,
        data,
        trace,
        grad: Rc::new(RefCell::new(None)),
    })
}

/// Gradient tensors keyed by tape node, as returned by a backward pass.
pub struct Gradients {
    map: HashMap<NodeId, Tensor>,
}

impl Gradients {
    /// Gradient w.r.t. `t`, or zeros if no gradient flowed to it.
    pub fn wrt(&self, t: &Tensor) -> Tensor {
        t.trace
            .as_ref()
            .and_then(|trace| self.map.get(&trace.id))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()))
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        t.trace
            .as_ref()
            .map(|trace| self.map.contains_key(&trace.id))
            .unwrap_or(false)
    }
}

fn rehydrate(tape: &Tape, generation: u64, saved: &Saved, with_trace: bool) -> Tensor {
    let trace = if with_trace {
        saved.node.map(|id| Trace {
            tape: tape.clone(),
            generation,
            id,
        })
    } else {
        None
    };
    Tensor {
        shape: saved.shape.clone(),
        data: saved.data.clone(),
        trace,
        grad: Rc::new(RefCell::new(None)),
    }
}

fn backward_impl(loss: &Tensor, create_graph: bool) -> Result<Gradients, TensorError> {
    if loss.len() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape.clone()));
    }
    let trace = loss
        .trace_ok("backward")?
        .ok_or(TensorError::LossNotOnTape)?;
    let tape = trace.tape.clone();
    let generation = trace.generation;
    let loss_id = trace.id;

    let mut grads: Vec<Option<Tensor>> = vec![None; loss_id + 1];
    grads[loss_id] = Some(Tensor::ones(&loss.shape));

    for id in (0..=loss_id).rev() {
        let upstream = match &grads[id] {
            Some(g) => g.clone(),
            None => continue,
        };
        let (op, inputs, output) = tape.snapshot(id);
        if matches!(op, Op::Leaf { .. }) {
            continue;
        }
        let upstream = if create_graph {
            upstream
        } else {
            upstream.detach()
        };
        let input_tensors: Vec<Tensor> = inputs
            .iter()
            .map(|s| rehydrate(&tape, generation, s, create_graph))
            .collect();
        let output_tensor = rehydrate(&tape, generation, &output, create_graph);
        let vjps = ops::vjp(&op, &input_tensors, &output_tensor, &upstream)?;
        debug_assert_eq!(vjps.len(), inputs.len());
        for (saved, vjp) in inputs.iter().zip(vjps) {
            let (Some(pid), Some(g)) = (saved.node, vjp) else {
                continue;
            };
            debug_assert!(pid < id, "tape out of topological order");
            grads[pid] = Some(match grads[pid].take() {
                None => g,
                Some(prev) => prev.add(&g)?,
            });
        }
    }

    // Populate leaf grad cells and assemble the map.
    let mut map = HashMap::new();
    for (id, g) in grads.into_iter().enumerate() {
        let Some(g) = g else { continue };
        let (op, _, _) = tape.snapshot(id);
        if let Op::Leaf { cell } = op {
            *cell.borrow_mut() = Some(g.data().to_vec());
        }
        map.insert(id, g);
    }
    Ok(Gradients { map })
}
