//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every differentiable quantity in the pipeline (network weights, vertex
//! positions, texels) lives as a node on a [`Tape`]. Operations record a
//! backward rule when any input is tracked; [`Tape::backward`] replays the
//! records in reverse and accumulates gradients into the tracked leaves.
//!
//! A tape is scoped to one optimization step and one thread. Values are
//! 64-bit floats throughout.

mod gradcheck;
mod ops;

pub use gradcheck::finite_diff_check;

use crate::error::{Error, Result};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(pub(crate) usize);

/// Dense n-dimensional value. `data` is row-major; `grad`, when present,
/// matches `data` in length.
#[derive(Clone, Debug, Default)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// NaN/Inf anywhere is an error state.
    pub fn validate(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "non-finite value {} at flat index {} of shape {:?}",
                self.data[i], i, self.shape
            ))),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum UnaryKind {
    Relu,
    Tanh,
    Sigmoid,
    Abs,
    Sqrt,
    Sin,
    Cos,
    /// Natural log with the argument clamped at 1e-8.
    Ln,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ReduceKind {
    Sum,
    Mean,
    L1Norm,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Padding {
    Valid,
    Same,
}

/// Read-only view of tape values available to a custom backward rule.
pub struct ValueCtx<'a> {
    nodes: &'a [Tensor],
}

impl<'a> ValueCtx<'a> {
    pub fn data(&self, id: TensorId) -> &'a [f64] {
        &self.nodes[id.0].data
    }
    pub fn shape(&self, id: TensorId) -> &'a [usize] {
        &self.nodes[id.0].shape
    }
}

/// Gradient accumulator handed to backward rules. Buffers are lazily
/// zero-initialized; untracked nodes yield `None` and are skipped.
pub struct GradSink<'a> {
    nodes: &'a [Tensor],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> GradSink<'a> {
    pub fn buf(&mut self, id: TensorId) -> Option<&mut [f64]> {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        let slot = &mut self.grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; node.data.len()]);
        }
        slot.as_mut().map(|v| v.as_mut_slice())
    }

    pub fn add_scaled(&mut self, id: TensorId, src: &[f64], scale: f64) {
        if let Some(buf) = self.buf(id) {
            for (b, s) in buf.iter_mut().zip(src) {
                *b += s * scale;
            }
        }
    }
}

/// Backward rule for an operation whose forward pass is opaque to the tape
/// (rasterizers, mesh operators). Implementations read input values through
/// the context and scatter contributions into the sink.
pub trait CustomOp {
    fn backward(&self, ctx: &ValueCtx<'_>, out: TensorId, out_grad: &[f64], sink: &mut GradSink<'_>);
}

pub(crate) enum Op {
    MatMul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Unary {
        x: TensorId,
        kind: UnaryKind,
    },
    Affine {
        x: TensorId,
        a: f64,
    },
    Binary {
        a: TensorId,
        b: TensorId,
        kind: BinaryKind,
    },
    Reduce {
        x: TensorId,
        kind: ReduceKind,
        axes: Option<Vec<usize>>,
    },
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
    },
    Narrow {
        x: TensorId,
        axis: usize,
        start: usize,
    },
    Reshape {
        x: TensorId,
    },
    Conv2d {
        x: TensorId,
        kernel: TensorId,
        stride: usize,
        pad: usize,
    },
    BiasAdd {
        x: TensorId,
        b: TensorId,
    },
    Upsample2 {
        x: TensorId,
    },
    ClampElems {
        x: TensorId,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    Custom {
        op: Box<dyn CustomOp>,
    },
}

pub(crate) struct Record {
    pub out: TensorId,
    pub op: Op,
}

/// Arena of tensors plus the ordered operation records of one session.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    records: Vec<Record>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears all nodes and records; ids from before the reset are invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.records.clear();
        self.backward_done = false;
    }

    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(t);
        id
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn scalar(&mut self, x: f64) -> TensorId {
        self.leaf(Tensor::scalar(x))
    }

    /// Leaf that participates in gradient flow.
    pub fn param(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        Ok(self.leaf(Tensor::new(shape, data)?.with_grad()))
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn tracked(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of a node after [`Tape::backward`]; `None` if none flowed.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Copies a node's current values into a fresh untracked leaf.
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let t = Tensor {
            shape: self.nodes[id.0].shape.clone(),
            data: self.nodes[id.0].data.clone(),
            requires_grad: false,
            grad: None,
        };
        self.leaf(t)
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        tracked: bool,
        op: Op,
    ) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad: tracked,
            grad: None,
        });
        if tracked {
            self.records.push(Record { out: id, op });
        }
        id
    }

    /// Records an externally computed operation with its backward rule.
    pub fn push_custom(
        &mut self,
        inputs: &[TensorId],
        out: Tensor,
        op: Box<dyn CustomOp>,
    ) -> TensorId {
        let tracked = inputs.iter().any(|&i| self.tracked(i));
        let mut out = out;
        out.requires_grad = tracked;
        let id = TensorId(self.nodes.len());
        self.nodes.push(out);
        if tracked {
            self.records.push(Record {
                out: id,
                op: Op::Custom { op },
            });
        }
        id
    }

    /// Propagates gradients from a scalar loss back to every tracked leaf.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward called twice without tape reset".into(),
            ));
        }
        let node = &self.nodes[loss.0];
        if !node.is_scalar() {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        if !node.requires_grad {
            return Err(Error::Autodiff(
                "loss is detached from every tracked tensor".into(),
            ));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        // Split borrows: records and nodes stay immutable, grads mutable.
        let records = std::mem::take(&mut self.records);
        for rec in records.iter().rev() {
            let Some(gout) = grads[rec.out.0].take() else {
                continue;
            };
            let (ctx, mut sink) = {
                let ctx = ValueCtx { nodes: &self.nodes };
                let sink = GradSink {
                    nodes: &self.nodes,
                    grads: &mut grads,
                };
                (ctx, sink)
            };
            ops::backward_record(rec, &ctx, &gout, &mut sink);
        }
        self.records = records;

        for (node, g) in self.nodes.iter_mut().zip(grads.into_iter()) {
            if let Some(g) = g {
                if node.requires_grad {
                    node.grad = Some(g);
                }
            }
        }
        Ok(())
    }
}
