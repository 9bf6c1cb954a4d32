//! Reverse-mode differentiation over [`Tensor4`] values.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append nodes in execution order, so the node list is topologically sorted
//! by construction, and [`Tape::backward`] walks it once in reverse.

mod conv;
mod elementwise;
pub mod gradcheck;
mod norm;
mod pool;

pub use conv::ConvSpec;
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use norm::{BatchStats, BnMode, BN_EPS};

use std::hash::{DefaultHasher, Hash, Hasher};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Train or eval behaviour for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    Sum {
        x: Var,
    },
    /// Scalar computed outside the tape whose gradient w.r.t. `x` is known.
    ScalarHead {
        x: Var,
        grad: Tensor4<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Add { a, b } => vec![*a, *b],
            Op::MaxPool { x, .. }
            | Op::Relu { x }
            | Op::Dropout { x, .. }
            | Op::Softmax { x }
            | Op::Sum { x }
            | Op::ScalarHead { x, .. } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input. Gradients are reported only for leaves created with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor4<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    /// Hash of every ReLU on/off pattern and max-pool winner recorded so
    /// far. Two evaluations with equal signatures took the same branch at
    /// every kink.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { .. } => node.value.data().iter().for_each(|v| (*v > T::zero()).hash(&mut h)),
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub(crate) fn push(&mut self, name: &'static str, value: Tensor4<T>, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeReused);
        }
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::TapeReused)
        } else {
            Ok(())
        }
    }

    /// Reverse-mode sweep from a scalar root. The tape cannot record or
    /// differentiate again afterwards.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        self.check_live()?;
        let dims = self.nodes[root.0].value.dims();
        if dims != [1, 1, 1, 1] {
            return Err(Error::NonScalarRoot(dims));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor4::scalar(T::one()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let need = |v: &Var| self.nodes[v.0].needs_grad;
            let val = |v: &Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        out[i] = Some(g);
                    }
                }
                Op::Conv2d { x, w, b, spec } => {
                    let (dx, dw, db) = conv::conv2d_backward(
                        val(x),
                        val(w),
                        spec,
                        &g,
                        need(x),
                        need(w),
                        b.as_ref().is_some_and(need),
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::ConvTranspose2d { x, w, b } => {
                    let (dx, dw, db) = conv::conv_transpose2d_backward(
                        val(x),
                        val(w),
                        &g,
                        need(x),
                        need(w),
                        b.as_ref().is_some_and(need),
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let dx = pool::maxpool_backward(val(x).dims(), argmax, &g);
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let (dx, dgamma, dbeta) =
                        norm::batchnorm_backward(val(gamma), xhat, inv_std, *train, &g, need(x));
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, Some(dgamma));
                    accumulate(&mut grads, *beta, Some(dbeta));
                }
                Op::Relu { x } => {
                    let dx = elementwise::relu_backward(val(x), &g);
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::Add { a, b } => {
                    if need(a) && need(b) {
                        accumulate(&mut grads, *a, Some(g.clone()));
                    } else if need(a) {
                        accumulate(&mut grads, *a, Some(g));
                        continue;
                    }
                    accumulate(&mut grads, *b, Some(g));
                }
                Op::Dropout { x, mask } => {
                    let dx = elementwise::dropout_backward(mask, &g);
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::Softmax { x } => {
                    let dx = elementwise::softmax_backward(&node.value, &g);
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::Sum { x } => {
                    let dx = Tensor4::full(val(x).dims(), g.data()[0]);
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::ScalarHead { x, grad } => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *x, Some(grad.map(|v| v * s)));
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor4<T>>], v: Var, g: Option<Tensor4<T>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Gradients of the backward root with respect to every `requires_grad` leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` is not a `requires_grad` leaf or the root does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor4<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Like [`get`](Self::get) but returns zeros of `dims` for leaves the root
    /// does not depend on.
    pub fn get_or_zeros(&self, v: Var, dims: crate::tensor::Dims) -> Tensor4<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor4::zeros(dims))
    }
}
