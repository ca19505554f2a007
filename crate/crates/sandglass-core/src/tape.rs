//! Reverse-mode automatic differentiation over the nn_ops primitives.
//!
//! A [`Tape`] records operations eagerly (values are computed at record
//! time) as a flat list of nodes; [`Tape::backward`] then walks the nodes in
//! exact reverse recording order, accumulating vector-Jacobian products.
//! The tape is confined to one logical thread: it may be moved, not shared.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Element, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

enum Op<E: Element> {
    Leaf,
    Conv {
        x: NodeId,
        w: NodeId,
        stride: usize,
        groups: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Tensor<E>,
        var: Tensor<E>,
        eps: f64,
    },
    Relu6 {
        x: NodeId,
    },
    AvgPool {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    PartialAdd {
        residual: NodeId,
        identity: NodeId,
        split: usize,
    },
    Sum {
        x: NodeId,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
}

/// Gradients of a scalar root with respect to every node, indexed by
/// [`NodeId`]. Nodes the root does not depend on have no gradient.
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient with respect to the node, if the root depends on it.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Eager autodiff tape. All recording methods validate like their
/// [`crate::ops`] counterparts and store the forward value.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Register an input (differentiable) tensor.
    pub fn leaf(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Value computed at a node.
    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, groups: usize) -> Result<NodeId> {
        let y = ops::conv2d(self.value(x), self.value(w), stride, groups)?;
        Ok(self.push(y, Op::Conv { x, w, stride, groups }))
    }

    /// Inference-mode batch norm; `gamma` and `beta` are differentiable
    /// nodes, the running statistics are constants.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &Tensor<E>,
        var: &Tensor<E>,
        eps: f64,
    ) -> Result<NodeId> {
        let y = ops::batchnorm(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            mean,
            var,
            eps,
        )?;
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                var: var.clone(),
                eps,
            },
        ))
    }

    pub fn relu6(&mut self, x: NodeId) -> NodeId {
        let y = ops::relu6(self.value(x));
        self.push(y, Op::Relu6 { x })
    }

    pub fn global_avgpool(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::global_avgpool(self.value(x))?;
        Ok(self.push(y, Op::AvgPool { x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn partial_residual_add(
        &mut self,
        residual: NodeId,
        identity: NodeId,
        alpha: f64,
    ) -> Result<NodeId> {
        let y = ops::partial_residual_add(self.value(residual), self.value(identity), alpha)?;
        let split = ops::partial_split(alpha, self.value(residual).shape().c)?;
        Ok(self.push(
            y,
            Op::PartialAdd {
                residual,
                identity,
                split,
            },
        ))
    }

    /// Sum of all elements, as a `(1,1,1,1)` scalar node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let mut acc = E::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let y = Tensor::filled(Shape::new(1, 1, 1, 1), acc)?;
        Ok(self.push(y, Op::Sum { x }))
    }

    /// Reverse-mode sweep from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<E>> {
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward root must be scalar (1x1x1x1), got {}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(Shape::new(1, 1, 1, 1), E::ONE)?);

        fn accumulate<E: Element>(slot: &mut Option<Tensor<E>>, add: Tensor<E>) -> Result<()> {
            match slot {
                None => *slot = Some(add),
                Some(t) => *t = ops::add(t, &add)?,
            }
            Ok(())
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g); // keep for the caller
                    continue;
                }
                Op::Conv { x, w, stride, groups } => {
                    let (gx, gw) = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        *stride,
                        *groups,
                        &g,
                    )?;
                    accumulate(&mut grads[x.0], gx)?;
                    accumulate(&mut grads[w.0], gw)?;
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                } => {
                    let (gx, gg, gb) = ops::batchnorm_backward(
                        self.value(*x),
                        self.value(*gamma),
                        mean,
                        var,
                        *eps,
                        &g,
                    )?;
                    accumulate(&mut grads[x.0], gx)?;
                    accumulate(&mut grads[gamma.0], gg)?;
                    accumulate(&mut grads[beta.0], gb)?;
                }
                Op::Relu6 { x } => {
                    let gx = ops::relu6_backward(self.value(*x), &g)?;
                    accumulate(&mut grads[x.0], gx)?;
                }
                Op::AvgPool { x } => {
                    let gx = ops::global_avgpool_backward(self.value(*x).shape(), &g)?;
                    accumulate(&mut grads[x.0], gx)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[a.0], g.clone())?;
                    accumulate(&mut grads[b.0], g)?;
                }
                Op::PartialAdd {
                    residual,
                    identity,
                    split,
                } => {
                    // residual receives the full gradient; identity only the
                    // summed channel range.
                    let s = g.shape();
                    let mut gi = Tensor::zeros(s)?;
                    let plane = s.h * s.w;
                    for b in 0..s.n {
                        for c in 0..*split {
                            let base = (b * s.c + c) * plane;
                            for j in base..base + plane {
                                gi.data_mut()[j] = g.data()[j];
                            }
                        }
                    }
                    accumulate(&mut grads[residual.0], g)?;
                    accumulate(&mut grads[identity.0], gi)?;
                }
                Op::Sum { x } => {
                    let scalar = g.scalar()?;
                    let gx = Tensor::filled(self.value(*x).shape(), scalar)?;
                    accumulate(&mut grads[x.0], gx)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of
    /// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_err: f64,
    /// Flat coordinate index attaining the max.
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Compare the tape gradient of a scalar-valued computation against central
/// finite differences, coordinate by coordinate.
///
/// `f` receives a fresh tape and the [`NodeId`] of the tensor under test
/// (initially `x0`) and must return a scalar root node. It is re-invoked
/// `2 * numel(x0)` times for the numeric side, so keep shapes toy-sized.
pub fn gradcheck<F>(f: F, x0: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, NodeId) -> Result<NodeId>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Config(format!("step h must be positive, got {h}")));
    }

    let eval = |x: &Tensor<f64>, want_grad: bool| -> Result<(f64, Option<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let root = f(&mut tape, xid)?;
        let y = tape.value(root).scalar()?;
        if !y.is_finite() {
            return Err(Error::Numeric(format!(
                "gradcheck function produced a non-finite value: {y}"
            )));
        }
        if want_grad {
            let grads = tape.backward(root)?;
            let gx = grads
                .wrt(xid)
                .cloned()
                .unwrap_or(Tensor::zeros(x.shape())?);
            Ok((y, Some(gx)))
        } else {
            Ok((y, None))
        }
    };

    let (_, analytic) = eval(x0, true)?;
    let analytic = analytic.expect("requested gradient");

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        analytic_at_worst: analytic.data().first().copied().unwrap_or(0.0),
        numeric_at_worst: 0.0,
    };
    let mut probe = x0.clone();
    for i in 0..x0.numel() {
        let orig = x0.data()[i];
        probe.data_mut()[i] = orig + h;
        let (fp, _) = eval(&probe, false)?;
        probe.data_mut()[i] = orig - h;
        let (fm, _) = eval(&probe, false)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        if !a.is_finite() || !numeric.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at coordinate {i}: analytic={a}, numeric={numeric}"
            )));
        }
        let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}

/// Resample any coordinate that sits within `margin` of the ReLU6 kinks
/// (0 and 6) by nudging it away, so finite differences stay on one linear
/// piece. Used by gradcheck harnesses when drawing random inputs.
pub fn nudge_from_kinks(t: &mut Tensor<f64>, margin: f64) {
    for v in t.data_mut() {
        for kink in [0.0, 6.0] {
            let d = *v - kink;
            if d.abs() < margin {
                *v = if d >= 0.0 { kink + margin } else { kink - margin };
            }
        }
    }
}
