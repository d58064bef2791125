//! Reverse-mode gradient tape.
//!
//! A [`Tape`] is an arena of values. Leaves are registered with
//! [`Tape::param`] (differentiable) or [`Tape::constant`]; every primitive
//! applied through the tape appends one node whose inputs all precede it,
//! so the arena order is a topological order and [`Tape::backward`] is a
//! single reverse sweep.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{AutodiffError, Result};
use crate::ops::{self, Primitive};
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value stored on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug)]
struct Record {
    primitive: Primitive,
    inputs: Vec<usize>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    record: Option<Record>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A scratch arena that evaluates primitives without recording anything
    /// for the backward pass.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded primitive applications.
    pub fn records(&self) -> usize {
        self.nodes.iter().filter(|n| n.record.is_some()).count()
    }

    fn push(&mut self, value: Tensor, record: Option<Record>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            record,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let rg = requires_grad && self.recording;
        self.push(value, None, rg)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape == self.id && v.index < self.nodes.len() {
            Ok(v.index)
        } else {
            Err(AutodiffError::ForeignVar)
        }
    }

    /// Value behind `v`.
    ///
    /// Panics if `v` was created on another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.check(v).expect("variable from another tape");
        &self.nodes[i].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v)
            .map(|i| self.nodes[i].requires_grad)
            .unwrap_or(false)
    }

    /// Moves the value out of the tape, leaving the tape unusable for `v`'s
    /// dependents' backward pass.
    pub fn take(mut self, v: Var) -> Result<Tensor> {
        let i = self.check(v)?;
        Ok(self.nodes.swap_remove(i).value)
    }

    pub fn apply(&mut self, primitive: Primitive, inputs: &[Var]) -> Result<Var> {
        let idx = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = ops::forward(&primitive, &values)?;
        let requires_grad = self.recording && idx.iter().any(|&i| self.nodes[i].requires_grad);
        let record = requires_grad.then_some(Record {
            primitive,
            inputs: idx,
        });
        Ok(self.push(out, record, requires_grad))
    }

    /// Gradients of the scalar `loss` with respect to every differentiable
    /// leaf that contributes to it.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let root = self.check(loss)?;
        let value = &self.nodes[root].value;
        if !value.is_scalar() {
            return Err(AutodiffError::NotScalar(value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        let mut out = GradientMap::default();
        if !self.nodes[root].requires_grad {
            return Ok(out);
        }
        grads[root] = Some(Tensor::full(value.shape(), 1.0));
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let Some(rec) = &node.record else {
                if node.requires_grad {
                    out.grads.insert(
                        Var {
                            tape: self.id,
                            index: i,
                        },
                        g,
                    );
                }
                continue;
            };
            let inputs: Vec<&Tensor> = rec.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> = rec
                .inputs
                .iter()
                .map(|&j| self.nodes[j].requires_grad)
                .collect();
            let parts = ops::backward(&rec.primitive, &inputs, &node.value, &g, &needs);
            for ((&j, part), need) in rec.inputs.iter().zip(parts).zip(needs) {
                let Some(part) = part.filter(|_| need) else {
                    continue;
                };
                grads[j] = Some(match grads[j].take() {
                    None => part,
                    Some(mut acc) => {
                        acc.data_mut()
                            .iter_mut()
                            .zip(part.data())
                            .for_each(|(a, b)| *a += b);
                        acc
                    }
                });
            }
        }
        Ok(out)
    }
}

macro_rules! unary {
    ($($name:ident => $prim:expr),* $(,)?) => {
        impl Tape {
            $(
                pub fn $name(&mut self, x: Var) -> Result<Var> {
                    self.apply($prim, &[x])
                }
            )*
        }
    };
}

macro_rules! binary {
    ($($name:ident => $prim:expr),* $(,)?) => {
        impl Tape {
            $(
                pub fn $name(&mut self, a: Var, b: Var) -> Result<Var> {
                    self.apply($prim, &[a, b])
                }
            )*
        }
    };
}

unary! {
    relu => Primitive::Relu,
    exp => Primitive::Exp,
    log => Primitive::Log,
    sum => Primitive::Sum,
    transpose => Primitive::Transpose,
}

binary! {
    add => Primitive::Add,
    sub => Primitive::Sub,
    mul => Primitive::Mul,
    matmul => Primitive::MatMul,
}

impl Tape {
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[x])
    }

    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Shift(c), &[x])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Primitive::Conv2d { stride, padding }, &[x, w, b])
    }

    pub fn conv_pool(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        pool: usize,
    ) -> Result<Var> {
        self.apply(
            Primitive::ConvPool {
                stride,
                padding,
                pool,
            },
            &[x, w, b],
        )
    }

    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        self.apply(Primitive::MaxPool2d { size }, &[x])
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Mean { axis }, &[x])
    }

    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Max { axis }, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Softmax { axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::LogSoftmax { axis }, &[x])
    }

    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::L2Normalize { axis }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[x],
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, xs)
    }

    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::GatherRows { indices }, &[x])
    }

    pub fn take_along_rows(&mut self, x: Var, indices: Vec<Vec<usize>>) -> Result<Var> {
        self.apply(Primitive::TakeAlongRows { indices }, &[x])
    }

    pub fn bias_add(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::BiasAdd { axis }, &[x, bias])
    }

    /// `x · w + b` for `x: [N, D]`, `w: [D, H]`, `b: [H]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.bias_add(y, b, 1)
    }
}

/// Gradient of a loss with respect to each differentiable leaf.
#[derive(Debug, Default, Clone)]
pub struct GradientMap {
    grads: HashMap<Var, Tensor>,
}

impl GradientMap {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when `v` did not
    /// participate in the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.grads
            .get(&v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn contains(&self, v: Var) -> bool {
        self.grads.contains_key(&v)
    }
}
