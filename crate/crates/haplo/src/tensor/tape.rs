use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::core::{Element, Tensor};
use crate::error::{Error, Result};

/// Gradient buffers for one backward sweep.
///
/// Leaf gradients go straight into the tensor's persistent accumulator;
/// intermediate gradients live only for the duration of the sweep.
pub struct GradStore<E: Element> {
    tmp: HashMap<u64, Vec<E>>,
}

impl<E: Element> GradStore<E> {
    fn new() -> Self {
        GradStore {
            tmp: HashMap::new(),
        }
    }

    /// Adds `g` to the gradient of `t`. No-op for tensors outside the
    /// differentiated set.
    pub fn accum(&mut self, t: &Tensor<E>, g: &[E]) {
        if !t.requires_grad() {
            return;
        }
        debug_assert_eq!(t.numel(), g.len(), "gradient length mismatch");
        if t.is_leaf() {
            t.accum_grad(g);
        } else {
            match self.tmp.get_mut(&t.id()) {
                Some(buf) => {
                    for (b, &x) in buf.iter_mut().zip(g) {
                        *b = *b + x;
                    }
                }
                None => {
                    self.tmp.insert(t.id(), g.to_vec());
                }
            }
        }
    }

    fn output_grad(&self, t: &Tensor<E>) -> Option<Vec<E>> {
        if t.is_leaf() {
            t.grad()
        } else {
            self.tmp.get(&t.id()).cloned()
        }
    }
}

type BackwardFn<E> = Box<dyn Fn(&[E], &mut GradStore<E>)>;

struct Record<E: Element> {
    out: Tensor<E>,
    backward: BackwardFn<E>,
}

struct TapeInner<E: Element> {
    enabled: bool,
    records: Vec<Record<E>>,
}

/// Ordered record of executed operations for one forward pass.
///
/// Pass an enabled tape to build a differentiable graph, or
/// [`Tape::disabled`] for forward-only evaluation (teacher passes,
/// inference). A tape is meant to live for one training step; records hold
/// the participating tensors alive until the tape is dropped or cleared.
pub struct Tape<E: Element> {
    inner: Rc<RefCell<TapeInner<E>>>,
}

impl<E: Element> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                enabled: true,
                records: Vec::new(),
            })),
        }
    }

    /// Tape that records nothing; ops through it are forward-only.
    pub fn disabled() -> Self {
        let t = Self::new();
        t.inner.borrow_mut().enabled = false;
        t
    }

    pub fn is_enabled(&self) -> bool {
        self.inner.borrow().enabled
    }

    pub fn num_records(&self) -> usize {
        self.inner.borrow().records.len()
    }

    pub fn clear(&self) {
        self.inner.borrow_mut().records.clear();
    }

    /// Marks `out` as an op output and records its backward closure when
    /// recording is active and some input is differentiable.
    pub(crate) fn record(
        &self,
        out: &Tensor<E>,
        inputs: &[&Tensor<E>],
        backward: impl Fn(&[E], &mut GradStore<E>) + 'static,
    ) {
        let tracked = self.is_enabled() && inputs.iter().any(|t| t.requires_grad());
        out.mark_op_output(tracked);
        if tracked {
            self.inner.borrow_mut().records.push(Record {
                out: out.clone(),
                backward: Box::new(backward),
            });
        }
    }

    /// Reverse sweep from a scalar loss. Each recorded op is visited
    /// exactly once, in reverse execution order; gradients accumulate
    /// additively into every reachable `requires_grad` leaf.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        let mut store = GradStore::new();
        store.accum(loss, &[E::one()]);
        let inner = self.inner.borrow();
        for rec in inner.records.iter().rev() {
            let Some(gout) = store.output_grad(&rec.out) else {
                continue;
            };
            (rec.backward)(&gout, &mut store);
        }
        Ok(())
    }
}
