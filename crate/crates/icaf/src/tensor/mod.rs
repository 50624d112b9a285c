//! A small reverse-mode autodiff tape over `ndarray`.
//!
//! Values are dynamic-dimension arrays; the training graph is rebuilt every
//! step. The tape is generic over the element type so the same graph code
//! runs in `f32` for training throughput and in `f64` for finite-difference
//! gradient verification.

mod conv;
mod ops;

pub use ops::{BatchReduction, CeDivisor};

use std::iter::Sum;

use ndarray::{ArrayD, NdFloat};
use num_traits::FromPrimitive;

/// Element type of tape values: `f32` or `f64`.
pub trait Scalar: NdFloat + FromPrimitive + Sum<Self> {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Convert an `f64` literal into the tape element type.
pub fn sc<A: Scalar>(x: f64) -> A {
    <A as Scalar>::from_f64(x)
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

type BackFn<A> = Box<dyn Fn(&[ArrayD<A>], &ArrayD<A>, &mut GradSink<'_, A>)>;

/// Gradient accumulator passed to backward closures. `add` silently drops
/// gradients for nodes that no parameter depends on.
pub struct GradSink<'a, A: Scalar> {
    grads: &'a mut Vec<Option<ArrayD<A>>>,
    needs: &'a [bool],
}

impl<A: Scalar> GradSink<'_, A> {
    pub fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    pub fn add(&mut self, v: Var, g: ArrayD<A>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf `Var`s.
pub struct Grads<A: Scalar> {
    grads: Vec<Option<ArrayD<A>>>,
}

impl<A: Scalar> Grads<A> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<A>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<A>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<A: Scalar> {
    vals: Vec<ArrayD<A>>,
    backs: Vec<Option<BackFn<A>>>,
    needs: Vec<bool>,
}

impl<A: Scalar> Default for Tape<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A: Scalar> Tape<A> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            backs: Vec::new(),
            needs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<A> {
        &self.vals[v.0]
    }

    /// Scalar readout of a 0-d (or single-element) node.
    pub fn scalar(&self, v: Var) -> A {
        let a = &self.vals[v.0];
        debug_assert_eq!(a.len(), 1, "scalar() on non-scalar node");
        *a.iter().next().expect("empty tape value")
    }

    pub(crate) fn push(&mut self, value: ArrayD<A>, back: Option<BackFn<A>>, needs: bool) -> Var {
        let id = self.vals.len();
        self.vals.push(value);
        self.backs.push(back);
        self.needs.push(needs);
        Var(id)
    }

    pub(crate) fn needs_any(&self, parents: &[Var]) -> bool {
        parents.iter().any(|p| self.needs[p.0])
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<A>) -> Var {
        self.push(value, None, false)
    }

    /// Leaf whose gradient is retained by [`Tape::backward`].
    pub fn param(&mut self, value: ArrayD<A>) -> Var {
        self.push(value, None, true)
    }

    /// Reverse pass from `loss` (a scalar node). Intermediate gradients are
    /// freed as soon as they have been propagated; only leaf parameters keep
    /// theirs in the returned [`Grads`].
    pub fn backward(&self, loss: Var) -> Grads<A> {
        assert_eq!(
            self.vals[loss.0].len(),
            1,
            "backward() expects a scalar loss node"
        );
        let n = self.vals.len();
        let mut grads: Vec<Option<ArrayD<A>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(self.vals[loss.0].raw_dim()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.backs[id] {
                Some(back) => {
                    let mut sink = GradSink {
                        grads: &mut grads,
                        needs: &self.needs,
                    };
                    back(&self.vals, &g, &mut sink);
                }
                None => {
                    // Leaf: params keep their gradient for the caller.
                    if self.needs[id] {
                        grads[id] = Some(g);
                    }
                }
            }
        }
        Grads { grads }
    }
}
