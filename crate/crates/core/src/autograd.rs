//! Reverse-mode differentiation over a recorded operation graph.
//!
//! A [`Tape`] records every operation applied to [`Var`]s in execution order,
//! together with a closure producing the vector-Jacobian product for each
//! parent. [`Tape::backward`] walks the record once in reverse.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{dim_err, usage_err, Result};
use crate::fusion;
use crate::losses;
use crate::ops::conv::{self, ConvAlgo, ConvSpec};
use crate::ops::elementwise as ew;
use crate::ops::norm;
use crate::ops::pool::{self, Axes};
use crate::tensor::{Shape5, Tensor5};

type BackwardFn = Box<dyn Fn(&Tensor5, &[bool]) -> Result<Vec<Option<Tensor5>>>>;

struct Node {
    value: Rc<Tensor5>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    algo: ConvAlgo,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Accumulated gradients from one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor5>>,
    shapes: Vec<Shape5>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; all-zero when `var` did not
    /// influence the loss.
    pub fn of(&self, var: Var<'_>) -> Tensor5 {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor5::zeros(self.shapes[var.id]))
    }

    pub fn take(&mut self, var: Var<'_>) -> Tensor5 {
        self.grads[var.id]
            .take()
            .unwrap_or_else(|| Tensor5::zeros(self.shapes[var.id]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_algo(ConvAlgo::default())
    }

    pub fn with_algo(algo: ConvAlgo) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            algo,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor5, parents: Vec<usize>, backward: Option<BackwardFn>, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        nodes.len() - 1
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: Tensor5) -> Var<'_> {
        let id = self.push(value, Vec::new(), None, true);
        Var { tape: self, id }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor5) -> Var<'_> {
        let id = self.push(value, Vec::new(), None, false);
        Var { tape: self, id }
    }

    fn record<'t, F>(&'t self, value: Tensor5, parents: &[Var<'t>], backward: F) -> Var<'t>
    where
        F: Fn(&Tensor5, &[bool]) -> Result<Vec<Option<Tensor5>>> + 'static,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let backward: Option<BackwardFn> = requires_grad.then(|| Box::new(backward) as BackwardFn);
        let id = self.push(value, parents.iter().map(|p| p.id).collect(), backward, requires_grad);
        Var { tape: self, id }
    }

    /// Propagates `d loss / d loss = 1` back through the record.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(usage_err!("loss variable belongs to a different tape"));
        }
        let nodes = self.nodes.borrow();
        let shapes: Vec<Shape5> = nodes.iter().map(|n| n.value.shape()).collect();
        if nodes[loss.id].value.numel() != 1 {
            return Err(usage_err!(
                "backward needs a scalar loss, got shape {:?}",
                shapes[loss.id]
            ));
        }
        let mut grads: Vec<Option<Tensor5>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor5::full(shapes[loss.id], 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs)?;
            grads[id] = Some(g);
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, need) else { continue };
                if pg.shape() != shapes[p] {
                    return Err(dim_err!(
                        "gradient for node {p} has shape {:?}, value has {:?}",
                        pg.shape(),
                        shapes[p]
                    ));
                }
                match &mut grads[p] {
                    Some(acc) => acc.axpy(1.0, &pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

/// Result of a training-mode batch-norm node.
pub struct BnOutput<'t> {
    pub out: Var<'t>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

fn data_vec(t: &Tensor5) -> Vec<f64> {
    t.data().to_vec()
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor5> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Shape5 {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let y = ew::add(&self.value(), &other.value())?;
        Ok(self
            .tape
            .record(y, &[self, other], |g, _| Ok(vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let y = self.value().scale(k);
        self.tape.record(y, &[self], move |g, _| Ok(vec![Some(g.scale(k))]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape();
        self.tape.record(Tensor5::scalar(x.sum()), &[self], move |g, _| {
            Ok(vec![Some(Tensor5::full(shape, g.data()[0]))])
        })
    }

    /// `sum(self * weights)` for a constant tensor of the same shape.
    pub fn weighted_sum(self, weights: &Tensor5) -> Result<Var<'t>> {
        let v = self.value().dot(weights)?;
        let w = weights.clone();
        Ok(self
            .tape
            .record(Tensor5::scalar(v), &[self], move |g, _| Ok(vec![Some(w.scale(g.data()[0]))])))
    }

    /// Elementwise product with a constant tensor (e.g. a dropout mask).
    pub fn mul_const(self, mask: &Tensor5) -> Result<Var<'t>> {
        let y = self.value().zip_map(mask, |a, b| a * b)?;
        let m = mask.clone();
        Ok(self
            .tape
            .record(y, &[self], move |g, _| Ok(vec![Some(g.zip_map(&m, |a, b| a * b)?)])))
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let y = ew::relu(&x);
        self.tape.record(y, &[self], move |g, _| {
            Ok(vec![Some(g.zip_map(&x, |g, x| if x > 0.0 { g } else { 0.0 })?)])
        })
    }

    /// Channel-wise multiplication by a `(1, C, 1, 1, 1)` weight vector.
    pub fn channel_mul(self, weights: Var<'t>) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weights.value());
        let y = ew::channelwise_mul(&x, &w)?;
        Ok(self.tape.record(y, &[self, weights], move |g, need| {
            let dx = need[0].then(|| ew::channelwise_mul(g, &w)).transpose()?;
            let dw = need[1].then(|| ew::channel_dot(g, &x)).transpose()?;
            Ok(vec![dx, dw])
        }))
    }

    /// Channel-wise addition of a `(1, C, 1, 1, 1)` bias vector.
    pub fn channel_add(self, bias: Var<'t>) -> Result<Var<'t>> {
        let y = ew::channelwise_add(&self.value(), &bias.value())?;
        Ok(self.tape.record(y, &[self, bias], move |g, need| {
            let db = need[1].then(|| ew::sum_to_channels(g));
            Ok(vec![Some(g.clone()), db])
        }))
    }

    pub fn conv(self, weight: Var<'t>, spec: ConvSpec) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let algo = self.tape.algo;
        let y = conv::conv3d(&x, &w, &spec, algo)?;
        Ok(self.tape.record(y, &[self, weight], move |g, need| {
            let (dx, dw) = conv::conv3d_backward(&x, &w, g, &spec, algo, need[0], need[1])?;
            Ok(vec![dx, dw])
        }))
    }

    pub fn maxpool(self, window: (usize, usize, usize)) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        let (y, arg) = pool::maxpool3d(&x, window)?;
        Ok(self.tape.record(y, &[self], move |g, _| {
            Ok(vec![Some(pool::maxpool3d_backward(shape, &arg, g))])
        }))
    }

    pub fn avg_pool_spatial2(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let y = pool::avg_pool_spatial2(&self.value())?;
        Ok(self.tape.record(y, &[self], move |g, _| {
            Ok(vec![Some(pool::avg_pool_spatial2_backward(shape, g))])
        }))
    }

    pub fn mean_axes(self, axes: Axes) -> Result<Var<'t>> {
        let shape = self.shape();
        let y = pool::mean_axes(&self.value(), axes)?;
        Ok(self.tape.record(y, &[self], move |g, _| {
            Ok(vec![Some(pool::mean_axes_backward(shape, axes, g))])
        }))
    }

    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        self.mean_axes(Axes::THW)
    }

    pub fn narrow_channels(self, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let y = ew::narrow_channels(&self.value(), start, len)?;
        Ok(self.tape.record(y, &[self], move |g, _| {
            let mut dx = Tensor5::zeros(shape);
            let v = shape.volume();
            for n in 0..shape.n {
                let src = g.sample(n);
                let base = (n * shape.c + start) * v;
                dx.data_mut()[base..base + len * v].copy_from_slice(src);
            }
            Ok(vec![Some(dx)])
        }))
    }

    /// Splits into `parts` equal channel groups.
    pub fn split_groups(self, parts: usize) -> Result<Vec<Var<'t>>> {
        let c = self.shape().c;
        if parts == 0 || !c.is_multiple_of(parts) {
            return Err(crate::error::config_err!(
                "{c} channels cannot be split into {parts} equal groups"
            ));
        }
        let g = c / parts;
        (0..parts).map(|i| self.narrow_channels(i * g, g)).collect()
    }

    /// Leading `num / den` share of channels and the remainder.
    pub fn split_channels(self, num: usize, den: usize) -> Result<(Var<'t>, Var<'t>)> {
        let c = self.shape().c;
        let k = ew::proportion_channels(c, num, den)?;
        Ok((self.narrow_channels(0, k)?, self.narrow_channels(k, c - k)?))
    }

    pub fn concat_channels(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| dim_err!("concat of zero variables"))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor5>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor5> = values.iter().map(|v| v.as_ref()).collect();
        let y = ew::concat_channels(&refs)?;
        let widths: Vec<usize> = values.iter().map(|v| v.shape().c).collect();
        Ok(tape.record(y, parts, move |g, need| {
            let mut start = 0;
            let mut out = Vec::with_capacity(widths.len());
            for (&w, &nd) in widths.iter().zip(need) {
                out.push(nd.then(|| ew::narrow_channels(g, start, w)).transpose()?);
                start += w;
            }
            Ok(out)
        }))
    }

    /// Training-mode batch norm; batch statistics are returned so the caller can
    /// update running estimates.
    pub fn batchnorm_train(self, gamma: Var<'t>, beta: Var<'t>) -> Result<BnOutput<'t>> {
        let gv = data_vec(&gamma.value());
        let (y, cache) = norm::batchnorm_train(&self.value(), &gv, beta.value().data())?;
        let (batch_mean, batch_var) = (cache.batch_mean.clone(), cache.batch_var.clone());
        let c = gv.len();
        let out = self.tape.record(y, &[self, gamma, beta], move |g, _| {
            let (dx, dgamma, dbeta) = norm::batchnorm_train_backward(&cache, &gv, g);
            Ok(vec![
                Some(dx),
                Some(Tensor5::from_vec(Shape5::channels(c), dgamma)?),
                Some(Tensor5::from_vec(Shape5::channels(c), dbeta)?),
            ])
        });
        Ok(BnOutput {
            out,
            batch_mean,
            batch_var,
        })
    }

    /// Evaluation-mode batch norm with fixed statistics.
    pub fn batchnorm_eval(self, gamma: Var<'t>, beta: Var<'t>, mean: &[f64], var: &[f64]) -> Result<Var<'t>> {
        let x = self.value();
        let gv = data_vec(&gamma.value());
        let (y, inv_std) = norm::batchnorm_eval(&x, &gv, beta.value().data(), mean, var)?;
        let mean = mean.to_vec();
        Ok(self.tape.record(y, &[self, gamma, beta], move |g, need| {
            let c = gv.len();
            let scale = Tensor5::from_vec(
                Shape5::channels(c),
                gv.iter().zip(&inv_std).map(|(a, b)| a * b).collect(),
            )?;
            let dx = need[0].then(|| ew::channelwise_mul(g, &scale)).transpose()?;
            let dgamma = if need[1] {
                let xhat = Tensor5::from_fn(x.shape(), |[n, ch, t, h, w]| {
                    (x.get(n, ch, t, h, w) - mean[ch]) * inv_std[ch]
                });
                Some(ew::channel_dot(g, &xhat)?)
            } else {
                None
            };
            let dbeta = need[2].then(|| ew::sum_to_channels(g));
            Ok(vec![dx, dgamma, dbeta])
        }))
    }

    /// Mean cross-entropy of `(N, K, 1, 1, 1)` logits against class labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let logits = self.value();
        let (loss, grad) = losses::cross_entropy_with_grad(&logits, labels)?;
        Ok(self
            .tape
            .record(Tensor5::scalar(loss), &[self], move |g, _| Ok(vec![Some(grad.scale(g.data()[0]))])))
    }

    /// The fusion transform `Y_i = sum_j T_ij * X_j` with `T` stored as a
    /// `(G, G, c, 1, 1)` tensor.
    pub fn fusion_apply(self, matrix: Var<'t>) -> Result<Var<'t>> {
        let (x, t) = (self.value(), matrix.value());
        let y = fusion::apply_raw(&t, &x)?;
        Ok(self.tape.record(y, &[self, matrix], move |g, need| {
            let (dx, dt) = fusion::apply_raw_backward(&t, &x, g, need[0], need[1])?;
            Ok(vec![dx, dt])
        }))
    }

    /// Interaction regularizer of a `(G, G, c, 1, 1)` fusion tensor.
    pub fn interaction_loss(self) -> Result<Var<'t>> {
        let t = self.value();
        let (loss, grad) = losses::interaction_loss_with_grad(&t)?;
        Ok(self
            .tape
            .record(Tensor5::scalar(loss), &[self], move |g, _| Ok(vec![Some(grad.scale(g.data()[0]))])))
    }

    /// Capacity regularizer of the grouped fusion output.
    pub fn capacity_loss(self, groups: usize) -> Result<Var<'t>> {
        let y = self.value();
        let (report, grad) = losses::capacity_loss_with_grad(&y, groups)?;
        Ok(self.tape.record(Tensor5::scalar(report.value), &[self], move |g, _| {
            Ok(vec![Some(grad.scale(g.data()[0]))])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor5::full([1, 2, 2, 2, 2], 0.3));
        let loss = x.sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.of(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor5::full([1, 1, 1, 2, 3], -0.5));
        let loss = x.relu().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.of(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor5::full([1, 1, 1, 1, 2], 1.0));
        let unused = tape.leaf(Tensor5::full([1, 3, 1, 1, 1], 2.0));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.of(unused), Tensor5::zeros([1, 3, 1, 1, 1]));
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor5::zeros([1, 2, 1, 1, 1]));
        assert!(matches!(tape.backward(x.relu()), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor5::full([1, 1, 1, 1, 1], 2.0));
        let y = x.add(x).unwrap().scale(3.0).sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.of(x).data(), &[6.0]);
    }

    #[test]
    fn constants_do_not_record_backward() {
        let tape = Tape::new();
        let c = tape.constant(Tensor5::full([1, 1, 1, 1, 1], 2.0));
        let y = c.relu();
        assert!(!y.requires_grad());
    }
}
