use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};

/// Scalar element of a [`Tensor`]: `f32` or `f64`.
pub trait Element:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + 'static
{
    const DTYPE: &'static str;

    fn of(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("finite literal")
    }

    fn to64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("element is a float")
    }

    /// Additive mask bias: large enough that stabilized softmax underflows
    /// to exactly 0 for masked keys, in both precisions.
    fn mask_bias() -> Self {
        Self::of(-1e9)
    }
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

struct Inner<E> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    requires_grad: Cell<bool>,
    is_leaf: Cell<bool>,
    grad: RefCell<Option<Vec<E>>>,
}

/// Dense N-dimensional array participating in reverse-mode differentiation.
///
/// Clone is shallow: both handles refer to the same storage and gradient
/// accumulator. Gradient accumulation is additive; two backward passes
/// without [`Tensor::clear_grad`] double the stored gradient.
pub struct Tensor<E: Element> {
    inner: Rc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self::new_leaf(shape, data))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new_leaf(shape, vec![E::zero(); numel])
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: E) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new_leaf(shape, vec![v; numel])
    }

    pub fn scalar(v: E) -> Self {
        Self::new_leaf(vec![], vec![v])
    }

    /// Seeded standard-normal init scaled by `std` (Box-Muller over the
    /// supplied RNG, so results are identical across element types' seeds).
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(E::of(r * theta.cos() * std));
            if data.len() < numel {
                data.push(E::of(r * theta.sin() * std));
            }
        }
        Self::new_leaf(shape, data)
    }

    fn new_leaf(shape: Vec<usize>, data: Vec<E>) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(false),
                is_leaf: Cell::new(true),
                grad: RefCell::new(None),
            }),
        }
    }

    pub(crate) fn new_result(shape: Vec<usize>, data: Vec<E>) -> Self {
        let t = Self::new_leaf(shape, data);
        t.inner.is_leaf.set(false);
        t
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.is_leaf.get()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Builder-style flag set, used when declaring parameters.
    pub fn with_grad(self) -> Self {
        self.inner.requires_grad.set(true);
        self
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.requires_grad.set(flag);
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().iter().map(|v| v.to64()).collect()
    }

    /// Scalar value of a 0-d or single-element tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// In-place data mutation (parameter updates). Only valid on leaves
    /// between training steps; the graph holds no copies.
    pub fn with_data_mut(&self, f: impl FnOnce(&mut [E])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Adds directly into the persistent gradient accumulator (used by
    /// gradient clipping and test harnesses).
    pub fn accum_grad_public(&self, g: &[E]) {
        self.accum_grad(g);
    }

    pub(crate) fn accum_grad(&self, g: &[E]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b = *b + x;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// New leaf sharing a copy of the data, detached from any graph.
    pub fn detach(&self) -> Tensor<E> {
        Self::new_leaf(self.inner.shape.clone(), self.to_vec())
    }

    /// Outputs of tracked ops join the graph; outputs produced without
    /// recording stay leaves (no gradient ever reaches them).
    pub(crate) fn mark_op_output(&self, tracked: bool) {
        self.inner.is_leaf.set(!tracked);
        self.inner.requires_grad.set(tracked);
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
