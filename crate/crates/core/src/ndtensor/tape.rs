//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its variables. Calling
//! [`Tape::backward`] walks the records in exact reverse order, summing
//! gradient contributions when a variable feeds several consumers, and
//! returns a [`Gradients`] table that parameter stores pick their share from.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use super::conv::{
    channel_sum, conv2d_geometry, conv2d_transpose_geometry, conv_forward_raw, conv_input_grad_raw,
    conv_weight_grad_raw, Padding,
};
use super::norm::{batchnorm, batchnorm_backward, BatchNormStats};
use super::ops::{self, Activation};
use super::params::ParamStore;
use super::tensor::{Scalar, Shape, Tensor4};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<E: Scalar> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        padding: Padding,
    },
    ConvTranspose {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        stats: BatchNormStats,
    },
    Act {
        x: usize,
        act: Activation,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Concat {
        a: usize,
        b: usize,
    },
    ZeroPad {
        x: usize,
        pad: usize,
    },
    GanBce {
        logits: usize,
        real: bool,
    },
    L1 {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        k: f64,
    },
    WeightedSum {
        x: usize,
        weights: Tensor4<E>,
    },
}

#[derive(Debug)]
struct Node<E: Scalar> {
    op: Op<E>,
    value: Arc<Tensor4<E>>,
    requires_grad: bool,
    param: Option<(u64, usize)>,
}

/// One entry of a forward shape trace: a layer label and its output shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub label: String,
    pub shape: Shape,
}

#[derive(Debug)]
pub struct Tape<E: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<E>>,
    trace: Vec<TraceEntry>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            trace: Vec::new(),
        }
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and its saved context. Variables issued
    /// before the call are invalidated.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.trace.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape("variable was not recorded on this tape".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, op: Op<E>, value: Tensor4<E>, requires_grad: bool) -> Var {
        self.push_arc(op, Arc::new(value), requires_grad, None)
    }

    fn push_arc(&mut self, op: Op<E>, value: Arc<Tensor4<E>>, requires_grad: bool, param: Option<(u64, usize)>) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            param,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> Result<&Tensor4<E>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor4<E>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// An input whose gradient [`Gradients::get`] reports.
    pub fn input_with_grad(&mut self, t: Tensor4<E>) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// A trainable parameter of `store`; its gradient is routed back by
    /// [`ParamStore::accumulate`].
    pub fn param(&mut self, store: &ParamStore<E>, name: &str) -> Result<Var> {
        let i = store.index_of(name)?;
        Ok(self.push_arc(Op::Leaf, store.shared_value(i), true, Some((store.id(), i))))
    }

    /// A parameter read as a constant (its network is frozen for this pass).
    pub fn frozen_param(&mut self, store: &ParamStore<E>, name: &str) -> Result<Var> {
        let i = store.index_of(name)?;
        Ok(self.push_arc(Op::Leaf, store.shared_value(i), false, None))
    }

    /// [`param`](Self::param) when `trainable`, otherwise [`frozen_param`](Self::frozen_param).
    pub fn param_as(&mut self, store: &ParamStore<E>, name: &str, trainable: bool) -> Result<Var> {
        if trainable {
            self.param(store, name)
        } else {
            self.frozen_param(store, name)
        }
    }

    /// Records `label` with the current shape of `v` in the forward trace.
    pub fn mark(&mut self, label: impl Into<String>, v: Var) -> Result<()> {
        let shape = self.value(v)?.shape();
        self.trace.push(TraceEntry {
            label: label.into(),
            shape,
        });
        Ok(())
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let out = super::conv::conv2d(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            bi.map(|b| &*self.nodes[b].value),
            stride,
            padding,
        )?;
        let rg = self.rg(xi) || self.rg(wi) || bi.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Op::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                stride,
                padding,
            },
            out,
            rg,
        ))
    }

    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let out = super::conv::conv2d_transpose(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            bi.map(|b| &*self.nodes[b].value),
            stride,
        )?;
        let rg = self.rg(xi) || self.rg(wi) || bi.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Op::ConvTranspose {
                x: xi,
                w: wi,
                b: bi,
                stride,
            },
            out,
            rg,
        ))
    }

    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, epsilon: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (out, stats) = batchnorm(
            &self.nodes[xi].value,
            &self.nodes[gi].value,
            &self.nodes[bi].value,
            epsilon,
        )?;
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        Ok(self.push(
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                stats,
            },
            out,
            rg,
        ))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        let xi = self.idx(x)?;
        if let Activation::LeakyRelu(s) = act {
            if !(s >= 0.0) {
                return Err(Error::InvalidArgument(format!("leaky relu slope {s}")));
            }
        }
        let out = ops::activate(&self.nodes[xi].value, act);
        let rg = self.rg(xi);
        Ok(self.push(Op::Act { x: xi, act }, out, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, active: bool) -> Result<Var> {
        let xi = self.idx(x)?;
        let (out, mask) = ops::dropout(&self.nodes[xi].value, rate, rng, active)?;
        match mask {
            None => Ok(x),
            Some(mask) => {
                let rg = self.rg(xi);
                Ok(self.push(Op::Dropout { x: xi, mask }, out, rg))
            }
        }
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = ops::concat_channels(&self.nodes[ai].value, &self.nodes[bi].value)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(Op::Concat { a: ai, b: bi }, out, rg))
    }

    pub fn zero_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = ops::zero_pad(&self.nodes[xi].value, pad);
        let rg = self.rg(xi);
        Ok(self.push(Op::ZeroPad { x: xi, pad }, out, rg))
    }

    /// Scalar mean sigmoid cross-entropy of `logits` against an all-real or all-fake target.
    pub fn gan_bce(&mut self, logits: Var, target_is_real: bool) -> Result<Var> {
        let li = self.idx(logits)?;
        let loss = ops::gan_bce(&self.nodes[li].value, target_is_real);
        let rg = self.rg(li);
        Ok(self.push(
            Op::GanBce {
                logits: li,
                real: target_is_real,
            },
            Tensor4::scalar(loss),
            rg,
        ))
    }

    /// Scalar mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let loss = ops::l1_loss(&self.nodes[ai].value, &self.nodes[bi].value)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(Op::L1 { a: ai, b: bi }, Tensor4::scalar(loss), rg))
    }

    /// Elementwise sum of two same-shaped values.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let mut out = (*self.nodes[ai].value).clone();
        out.add_assign(&self.nodes[bi].value)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(Op::Add { a: ai, b: bi }, out, rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.map(|v| v * k);
        let rg = self.rg(xi);
        Ok(self.push(Op::Scale { x: xi, k }, out, rg))
    }

    /// Scalar `Σ x ⊙ weights` for a constant `weights`.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor4<E>) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.dot(&weights)?;
        let rg = self.rg(xi);
        Ok(self.push(Op::WeightedSum { x: xi, weights }, Tensor4::scalar(s), rg))
    }

    /// Side of every kink the recorded values sit on: the sign of each input
    /// to a piecewise-linear activation and of each L1 difference. Two forward
    /// passes with equal signatures lie on one linear piece of those ops.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Act {
                    x,
                    act: Activation::Relu | Activation::LeakyRelu(_),
                } => sig.extend(self.nodes[*x].value.data().iter().map(|v| v.to_f64() > 0.0)),
                Op::L1 { a, b } => sig.extend(
                    self.nodes[*a]
                        .value
                        .data()
                        .iter()
                        .zip(self.nodes[*b].value.data())
                        .map(|(p, q)| p.to_f64() > q.to_f64()),
                ),
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        let li = self.idx(loss)?;
        let ls = self.nodes[li].value.shape();
        if ls != Shape::scalar() {
            return Err(Error::Tape(format!("loss must be 1×1×1×1, got {ls}")));
        }
        let mut grads: Vec<Option<Tensor4<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(Tensor4::scalar(1.0));

        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(node, &g)?;
            grads[i] = Some(g);
            for (target, contrib) in contributions {
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            params: self.nodes.iter().map(|n| n.param).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
            grads,
        })
    }

    /// [`backward`](Self::backward), then accumulate into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<E>) -> Result<Gradients<E>> {
        let g = self.backward(loss)?;
        store.accumulate(&g)?;
        Ok(g)
    }

    fn node_backward(&self, node: &Node<E>, g: &Tensor4<E>) -> Result<Vec<(usize, Tensor4<E>)>> {
        let v = |i: usize| &*self.nodes[i].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (geo, _) = conv2d_geometry(v(x).shape(), v(w).shape(), stride, padding)?;
                if self.rg(x) {
                    out.push((x, conv_input_grad_raw(g, v(w), &geo, v(x).shape())));
                }
                if self.rg(w) {
                    out.push((w, conv_weight_grad_raw(v(x), g, &geo, v(w).shape())));
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    out.push((b, channel_sum(g).reshape(v(b).shape())?));
                }
            }
            &Op::ConvTranspose { x, w, b, stride } => {
                let (geo, _) = conv2d_transpose_geometry(v(x).shape(), v(w).shape(), stride)?;
                if self.rg(x) {
                    out.push((x, conv_forward_raw(g, v(w), None, &geo, v(x).shape())));
                }
                if self.rg(w) {
                    out.push((w, conv_weight_grad_raw(g, v(x), &geo, v(w).shape())));
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    out.push((b, channel_sum(g).reshape(v(b).shape())?));
                }
            }
            Op::BatchNorm { x, gamma, beta, stats } => {
                let (dx, dg, db) = batchnorm_backward(v(*x), v(*gamma), stats, g);
                if self.rg(*x) {
                    out.push((*x, dx));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, dg.reshape(v(*gamma).shape())?));
                }
                if self.rg(*beta) {
                    out.push((*beta, db.reshape(v(*beta).shape())?));
                }
            }
            &Op::Act { x, act } => {
                out.push((x, ops::activate_backward(v(x), &node.value, g, act)));
            }
            Op::Dropout { x, mask } => {
                out.push((*x, ops::apply_mask(g, mask)));
            }
            &Op::Concat { a, b } => {
                let (ga, gb) = ops::split_channels(g, v(a).shape().c)?;
                if self.rg(a) {
                    out.push((a, ga));
                }
                if self.rg(b) {
                    out.push((b, gb));
                }
            }
            &Op::ZeroPad { x, pad } => {
                out.push((x, ops::zero_pad_backward(g, pad)?));
            }
            &Op::GanBce { logits, real } => {
                out.push((logits, ops::gan_bce_backward(v(logits), real, g.data()[0].to_f64())));
            }
            &Op::L1 { a, b } => {
                let up = g.data()[0].to_f64();
                if self.rg(a) {
                    out.push((a, ops::l1_loss_backward(v(a), v(b), up)));
                }
                if self.rg(b) {
                    out.push((b, ops::l1_loss_backward(v(b), v(a), up)));
                }
            }
            &Op::Add { a, b } => {
                if self.rg(a) {
                    out.push((a, g.clone()));
                }
                if self.rg(b) {
                    out.push((b, g.clone()));
                }
            }
            &Op::Scale { x, k } => {
                out.push((x, g.map(|u| u * k)));
            }
            Op::WeightedSum { x, weights } => {
                let up = g.data()[0].to_f64();
                out.push((*x, weights.map(|c| c * up)));
            }
        }
        Ok(out)
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients<E: Scalar = f32> {
    tape: u64,
    params: Vec<Option<(u64, usize)>>,
    requires: Vec<bool>,
    grads: Vec<Option<Tensor4<E>>>,
}

impl<E: Scalar> Gradients<E> {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// require gradients, does not reach the loss, or belongs to another tape.
    pub fn get(&self, v: Var) -> Option<Tensor4<E>> {
        if v.tape != self.tape || !self.requires.get(v.index).copied().unwrap_or(false) {
            return None;
        }
        self.grads[v.index].clone()
    }

    /// `(parameter index, gradient)` pairs routed to store `store_id`.
    pub(crate) fn param_grads(&self, store_id: u64) -> impl Iterator<Item = (usize, &Tensor4<E>)> {
        self.params
            .iter()
            .zip(&self.grads)
            .filter_map(move |(p, g)| match (p, g) {
                (Some((s, i)), Some(g)) if *s == store_id => Some((*i, g)),
                _ => None,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_gradient_is_the_coefficient() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor4::vector(&[0.5, -1.0, 2.0])).unwrap();
        let c = Tensor4::vector(&[3.0, 4.0, -5.0]);
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let loss = tape.weighted_sum(w, c.clone()).unwrap();
        tape.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.entry(0).grad().data(), c.data());

        // Without zeroing, a second sweep accumulates.
        tape.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.entry(0).grad().to_f64_vec(), vec![6.0, 8.0, -10.0]);
    }

    #[test]
    fn two_consumers_add() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor4::vector(&[1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let a = tape.weighted_sum(w, Tensor4::vector(&[1.0, 10.0])).unwrap();
        let b = tape.weighted_sum(w, Tensor4::vector(&[100.0, 1000.0])).unwrap();
        let loss = tape.add(a, b).unwrap();
        tape.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.entry(0).grad().to_f64_vec(), vec![101.0, 1010.0]);
    }

    #[test]
    fn rejects_foreign_and_non_scalar_losses() {
        let mut t1 = Tape::<f32>::new();
        let mut t2 = Tape::<f32>::new();
        let x = t1.input_with_grad(Tensor4::vector(&[1.0, 2.0]));
        let y = t2.input_with_grad(Tensor4::scalar(1.0));
        assert!(matches!(t1.backward(y), Err(Error::Tape(_))));
        assert!(matches!(t1.backward(x), Err(Error::Tape(_))));
        t1.clear();
        assert!(t1.value(x).is_err());
    }

    #[test]
    fn frozen_params_receive_nothing() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor4::vector(&[1.0])).unwrap();
        let mut tape = Tape::new();
        let w = tape.frozen_param(&store, "w").unwrap();
        let x = tape.input_with_grad(Tensor4::vector(&[3.0]));
        let p = tape.add(w, x).unwrap();
        let loss = tape.weighted_sum(p, Tensor4::vector(&[2.0])).unwrap();
        let g = tape.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.entry(0).grad().data(), &[0.0]);
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
        assert!(g.get(w).is_none());
    }
}
