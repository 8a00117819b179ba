//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles during a
//! forward pass; [`Tape::backward`] then walks the recording in exact
//! reverse order and accumulates chain-rule gradients. One tape per
//! training step, confined to a single thread. Tensors are immutable
//! after creation and safe to share read-only.

mod checkpoint;
mod gradcheck;
pub mod ops;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{finite_diff_check, FdReport};

use crate::error::{Error, Result};
use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

/// Dense row-major f64 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating shape/length agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Tensor(format!("zero dimension in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Tensor(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "Tensor::new".into(),
                index: i,
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Unvalidated constructor for internal use where finiteness is known.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::raw(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::raw(shape, vec![v; n])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::raw(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// 2D element access.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Rows of a (n, 3) tensor as fixed arrays.
    pub fn rows3(&self) -> Vec<[f64; 3]> {
        assert_eq!(self.shape.len(), 2);
        assert_eq!(self.shape[1], 3);
        self.data
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect()
    }

    pub fn from_rows3(rows: &[[f64; 3]]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * 3);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::raw(vec![rows.len(), 3], data)
    }

    fn check_finite(&self, op: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.into(),
                index: i,
            });
        }
        Ok(())
    }
}

/// Gradient rule of a recorded primitive: given the backward context,
/// return one gradient tensor per parent (same shapes as the parents).
pub type GradFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Tensor>>;

/// Values visible to a gradient rule.
pub struct BackwardCtx<'a> {
    /// Upstream gradient w.r.t. this node's output.
    pub grad: &'a Tensor,
    /// The node's recorded output value.
    pub out: &'a Tensor,
    /// The parents' recorded values, in parent order.
    pub inputs: Vec<&'a Tensor>,
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    grad_fn: Option<GradFn>,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    nan_check: bool,
}

/// Recording tape. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    idx: usize,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Enable NaN/Inf screening after every primitive (debug mode).
    pub fn with_nan_check() -> Tape {
        let t = Tape::new();
        t.inner.borrow_mut().nan_check = true;
        t
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var {
        let mut inner = self.inner.borrow_mut();
        if inner.nan_check {
            node.value
                .check_finite("primitive output")
                .expect("non-finite primitive output with nan_check enabled");
        }
        inner.nodes.push(node);
        Var {
            tape: self.clone(),
            idx: inner.nodes.len() - 1,
        }
    }

    /// Record a constant: no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Node {
            value,
            parents: vec![],
            grad_fn: None,
            requires_grad: false,
        })
    }

    /// Record a differentiable leaf input.
    pub fn input(&self, value: Tensor) -> Var {
        self.push(Node {
            value,
            parents: vec![],
            grad_fn: None,
            requires_grad: true,
        })
    }

    /// Record a named parameter leaf, reading its value from the store.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var> {
        let p = store
            .get(name)
            .ok_or_else(|| Error::Autodiff(format!("unknown parameter {name:?}")))?;
        let var = self.input(p.clone());
        self.inner
            .borrow_mut()
            .params
            .push((name.to_string(), var.idx));
        Ok(var)
    }

    /// Record a custom primitive with an explicit gradient rule. Used by
    /// fused operations (soft rasterizer, feature samplers, point-set
    /// matchers) whose backward pass is hand-derived and checked against
    /// finite differences.
    pub fn record(&self, value: Tensor, parents: &[&Var], grad_fn: GradFn) -> Var {
        let requires = parents.iter().any(|p| p.requires_grad());
        for p in parents {
            assert!(
                Rc::ptr_eq(&self.inner, &p.tape.inner),
                "custom primitive mixes tapes"
            );
        }
        self.push(Node {
            value,
            parents: parents.iter().map(|p| p.idx).collect(),
            grad_fn: if requires { Some(grad_fn) } else { None },
            requires_grad: requires,
        })
    }

    /// Reverse-mode sweep from a scalar loss. Returns per-node gradients;
    /// nodes off every path to the loss hold `None`.
    pub fn backward(&self, loss: &Var) -> Result<Vec<Option<Tensor>>> {
        let inner = self.inner.borrow();
        if inner.nodes.is_empty() {
            return Err(Error::Autodiff("backward on empty tape".into()));
        }
        assert!(
            Rc::ptr_eq(&self.inner, &loss.tape.inner),
            "loss recorded on a different tape"
        );
        let loss_node = &inner.nodes[loss.idx];
        if !loss_node.value.is_scalar() {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; inner.nodes.len()];
        grads[loss.idx] = Some(Tensor::scalar(1.0));
        // Visit in exact reverse recording order; recording order is a
        // valid topological order because inputs must exist when recorded.
        for i in (0..=loss.idx).rev() {
            let node = &inner.nodes[i];
            let Some(grad) = grads[i].as_ref() else {
                continue;
            };
            let Some(grad_fn) = node.grad_fn.as_ref() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad,
                out: &node.value,
                inputs: node
                    .parents
                    .iter()
                    .map(|&p| &inner.nodes[p].value)
                    .collect(),
            };
            let parent_grads = grad_fn(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                if !inner.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    inner.nodes[p].value.shape(),
                    "gradient shape mismatch for parent {p}"
                );
                match grads[p].as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.data.iter_mut().zip(g.data.iter()) {
                            *a += b;
                        }
                    }
                    None => grads[p] = Some(g),
                }
            }
        }
        // Inputs not on any path to the loss receive zero gradient.
        for (i, node) in inner.nodes.iter().enumerate() {
            if node.requires_grad && node.parents.is_empty() && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(grads)
    }

    /// Gradient map for every parameter bound on this tape.
    pub fn param_grads(
        &self,
        grads: &[Option<Tensor>],
    ) -> BTreeMap<String, Tensor> {
        let inner = self.inner.borrow();
        let mut out = BTreeMap::new();
        for (name, idx) in &inner.params {
            let g = grads[*idx]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(inner.nodes[*idx].value.shape().to_vec()));
            match out.entry(name.clone()) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(g);
                }
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    let acc = e.get_mut();
                    for (a, b) in acc.data.iter_mut().zip(g.data.iter()) {
                        *a += b;
                    }
                }
            }
        }
        out
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(shape={:?})", self.shape())
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        Ref::map(self.tape.inner.borrow(), |inner| {
            &inner.nodes[self.idx].value
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.idx].requires_grad
    }

    pub(crate) fn same_tape(&self, other: &Var) -> bool {
        Rc::ptr_eq(&self.tape.inner, &other.tape.inner)
    }

    /// Gradient of this var out of a `backward` result.
    pub fn grad<'a>(&self, grads: &'a [Option<Tensor>]) -> Option<&'a Tensor> {
        grads[self.idx].as_ref()
    }
}

/// Named parameter store: the single mutable state of a model. Keys are
/// ordered so iteration (checkpointing, optimizer steps) is deterministic.
#[derive(Default, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "ParamStore::set",
                        lhs: slot.shape().to_vec(),
                        rhs: value.shape().to_vec(),
                    });
                }
                *slot = value;
                Ok(())
            }
            None => Err(Error::Autodiff(format!("unknown parameter {name:?}"))),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::*;

    #[test]
    fn tensor_rejects_shape_length_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn tensor_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn backward_square_at_three() {
        let tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let y = mul(&x, &x).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert_eq!(x.grad(&grads).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_sum_sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.input(Tensor::new(vec![4], vec![0.0; 4]).unwrap());
        let y = reduce_sum(&sigmoid(&x)).unwrap();
        let grads = tape.backward(&y).unwrap();
        for &g in x.grad(&grads).unwrap().data() {
            assert!((g - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    fn backward_rejects_empty_tape() {
        let tape = Tape::new();
        let other = Tape::new();
        let x = other.input(Tensor::scalar(1.0));
        let _ = x;
        assert!(matches!(
            tape.backward(&Var {
                tape: tape.clone(),
                idx: 0
            }),
            Err(Error::Autodiff(_))
        ));
    }

    #[test]
    fn unreached_input_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.input(Tensor::scalar(2.0));
        let unused = tape.input(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = mul(&x, &x).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert_eq!(unused.grad(&grads).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gradient_linearity_over_sum_of_losses() {
        let tape = Tape::new();
        let x = tape.input(Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap());
        let a = reduce_sum(&square(&x)).unwrap();
        let b = reduce_sum(&sigmoid(&x)).unwrap();
        let total = add(&a, &b).unwrap();
        let g_total = tape.backward(&total).unwrap();
        let g_a = tape.backward(&a).unwrap();
        let g_b = tape.backward(&b).unwrap();
        let gt = x.grad(&g_total).unwrap();
        let ga = x.grad(&g_a).unwrap();
        let gb = x.grad(&g_b).unwrap();
        for i in 0..3 {
            assert!((gt.data()[i] - (ga.data()[i] + gb.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let tape = Tape::new();
            let x = tape.input(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
            let y = reduce_sum(&sigmoid(&mul(&x, &x).unwrap())).unwrap();
            let v = y.value().item();
            v
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }
}
