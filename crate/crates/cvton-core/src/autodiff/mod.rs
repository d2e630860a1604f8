//! Reverse-mode automatic differentiation over dynamically shaped `f64` arrays.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes, each
//! holding its value and (when gradients can flow to it) a one-shot backward
//! closure that maps the node's output gradient to contributions for its
//! parents. [`Tape::backward`] walks the list in reverse, accumulating
//! gradients; leaves created with [`Tape::leaf`] receive gradients, values
//! entered with [`Tape::constant`] terminate gradient flow.
//!
//! Everything is `f64`: the training loops are small enough that we buy exact
//! reproducibility and tight finite-difference agreement instead of speed.
//! A node whose inputs are all constants stores no closure, so running a
//! frozen network forward (or pure evaluation) through the tape costs only the
//! value buffers.
//!
//! The ops themselves live in [`ops`]; finite-difference verification helpers
//! in [`check`].

pub mod check;
pub mod ops;

use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicU32, Ordering};

use ndarray::ArrayD;

/// Handle to a node on a specific [`Tape`].
///
/// The handle remembers which tape it came from; using it with another tape
/// panics immediately instead of silently reading the wrong buffer.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var {
    tape_id: u32,
    index: u32,
}

impl Var {
    fn idx(self) -> usize {
        self.index as usize
    }
}

type BackwardFn = Box<dyn FnOnce(&ArrayD<f64>) -> Vec<(Var, ArrayD<f64>)>>;

struct Node {
    value: ArrayD<f64>,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Records a single forward computation for later differentiation.
pub struct Tape {
    id: u32,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
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

    fn assert_owns(&self, v: Var) {
        assert_eq!(
            v.tape_id, self.id,
            "Var belongs to tape {} but was used with tape {}",
            v.tape_id, self.id
        );
    }

    fn push_node(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let index = u32::try_from(nodes.len()).expect("tape overflow");
        nodes.push(node);
        Var {
            tape_id: self.id,
            index,
        }
    }

    /// Enter a value that gradients never reach (inputs, frozen weights).
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push_node(Node {
            value,
            needs_grad: false,
            backward: None,
        })
    }

    /// Enter a value that should receive a gradient (trainable parameters).
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push_node(Node {
            value,
            needs_grad: true,
            backward: None,
        })
    }

    /// Record an op result. `backward` is kept only when some parent can
    /// receive a gradient, so constant-only subgraphs store nothing.
    pub(crate) fn push_op<F>(&self, value: ArrayD<f64>, needs_grad: bool, backward: F) -> Var
    where
        F: FnOnce(&ArrayD<f64>) -> Vec<(Var, ArrayD<f64>)> + 'static,
    {
        self.push_node(Node {
            value,
            needs_grad,
            backward: if needs_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        })
    }

    /// Borrow a node's value. Drop the guard before recording further ops.
    pub fn value(&self, v: Var) -> Ref<'_, ArrayD<f64>> {
        self.assert_owns(v);
        Ref::map(self.nodes.borrow(), |nodes| &nodes[v.idx()].value)
    }

    /// Clone a node's value out of the tape.
    pub fn value_owned(&self, v: Var) -> ArrayD<f64> {
        self.value(v).clone()
    }

    /// Value of a 0-dimensional node as a plain scalar.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.ndim(), 0, "scalar_value on non-scalar of shape {:?}", val.shape());
        val[[]]
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.assert_owns(v);
        self.nodes.borrow()[v.idx()].needs_grad
    }

    /// Run the backward pass from `root` and collect gradients.
    ///
    /// `root` is typically a scalar loss. For non-scalar roots the seed is an
    /// all-ones array, i.e. gradients of the *sum* of the root's elements.
    /// Each node's backward closure is consumed, so a tape can be
    /// differentiated once per root; build separate roots before calling this
    /// if several losses must be differentiated independently.
    pub fn backward(&self, root: Var) -> GradStore {
        self.assert_owns(root);
        let mut nodes = self.nodes.borrow_mut();
        let n = nodes.len();
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..n).map(|_| None).collect();
        grads[root.idx()] = Some(ArrayD::ones(nodes[root.idx()].value.raw_dim()));

        for i in (0..=root.idx()).rev() {
            if grads[i].is_none() {
                continue;
            }
            let Some(f) = nodes[i].backward.take() else {
                continue;
            };
            // Op gradients are consumed here; leaves have no closure, so the
            // `else` above leaves theirs in place for the caller to read.
            let g_out = grads[i].take().expect("checked above");
            for (parent, contribution) in f(&g_out) {
                debug_assert!(parent.idx() < i, "backward edge must point to an earlier node");
                let slot = &mut grads[parent.idx()];
                match slot {
                    Some(acc) => *acc += &contribution,
                    None => *slot = Some(contribution),
                }
            }
        }

        GradStore {
            tape_id: self.id,
            grads,
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct GradStore {
    tape_id: u32,
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradStore {
    /// Gradient for `v`, if any reached it. Leaves that participated in the
    /// computation always have one; constants never do.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        assert_eq!(v.tape_id, self.tape_id, "GradStore/Var tape mismatch");
        self.grads.get(v.idx()).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        assert_eq!(v.tape_id, self.tape_id, "GradStore/Var tape mismatch");
        self.grads.get_mut(v.idx()).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr0;

    fn scalar(x: f64) -> ArrayD<f64> {
        arr0(x).into_dyn()
    }

    #[test]
    fn constants_block_gradient_flow_and_store_no_closure() {
        let t = Tape::new();
        let a = t.constant(scalar(2.0));
        let b = t.constant(scalar(3.0));
        let c = t.mul(a, b);
        assert!(!t.needs_grad(c), "op over constants must stay constant");
        let g = t.backward(c);
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_none());
    }

    #[test]
    fn product_rule_reaches_both_leaves() {
        let t = Tape::new();
        let a = t.leaf(scalar(2.0));
        let b = t.leaf(scalar(3.0));
        let c = t.mul(a, b);
        let g = t.backward(c);
        assert_eq!(g.get(a).unwrap()[[]], 3.0);
        assert_eq!(g.get(b).unwrap()[[]], 2.0);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let t = Tape::new();
        let x = t.leaf(scalar(4.0));
        let y = t.add(t.mul(x, x), x);
        let g = t.backward(y);
        assert_eq!(g.get(x).unwrap()[[]], 9.0);
    }

    #[test]
    #[should_panic(expected = "belongs to tape")]
    fn vars_cannot_cross_tapes() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(scalar(1.0));
        let _ = t2.value(a);
    }
}
