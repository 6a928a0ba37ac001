//! Structural, pointwise, contraction and reduction operations.

use super::core::{strides, Element, Tensor};
use super::tape::Tape;
use crate::error::{Error, Result};

fn same_shape<E: Element>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

// 2D kernels. `a` is [m,k], `b` is [k,n], `g` is [m,n]; all row-major.
fn mm<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

// gA = g · Bᵀ, shape [m,k]
fn mm_g_bt<E: Element>(g: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = E::zero();
            for j in 0..n {
                acc = acc + grow[j] * brow[j];
            }
            out[i * k + p] = out[i * k + p] + acc;
        }
    }
}

// gB = Aᵀ · g, shape [k,n]
fn mm_at_g<E: Element>(a: &[E], g: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * grow[j];
            }
        }
    }
}

impl<E: Element> Tensor<E> {
    fn pointwise_binary(
        &self,
        rhs: &Tensor<E>,
        tape: &Tape<E>,
        op: &'static str,
        fwd: impl Fn(E, E) -> E,
        bwd: impl Fn(E, E, E) -> (E, E) + 'static,
    ) -> Result<Tensor<E>> {
        same_shape(op, self, rhs)?;
        let out_data: Vec<E> = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&a, &b)| fwd(a, b))
            .collect();
        let out = Tensor::new_result(self.shape().to_vec(), out_data);
        let (a, b) = (self.clone(), rhs.clone());
        tape.record(&out, &[self, rhs], move |g, store| {
            let (ad, bd) = (a.data(), b.data());
            let mut ga = vec![E::zero(); g.len()];
            let mut gb = vec![E::zero(); g.len()];
            for i in 0..g.len() {
                let (da, db) = bwd(ad[i], bd[i], g[i]);
                ga[i] = da;
                gb[i] = db;
            }
            drop(ad);
            drop(bd);
            store.accum(&a, &ga);
            store.accum(&b, &gb);
        });
        Ok(out)
    }

    pub fn add(&self, rhs: &Tensor<E>, tape: &Tape<E>) -> Result<Tensor<E>> {
        self.pointwise_binary(rhs, tape, "add", |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, rhs: &Tensor<E>, tape: &Tape<E>) -> Result<Tensor<E>> {
        self.pointwise_binary(rhs, tape, "sub", |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, rhs: &Tensor<E>, tape: &Tape<E>) -> Result<Tensor<E>> {
        self.pointwise_binary(rhs, tape, "mul", |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn div(&self, rhs: &Tensor<E>, tape: &Tape<E>) -> Result<Tensor<E>> {
        self.pointwise_binary(
            rhs,
            tape,
            "div",
            |a, b| a / b,
            |a, b, g| (g / b, -g * a / (b * b)),
        )
    }

    fn pointwise_unary(
        &self,
        tape: &Tape<E>,
        fwd: impl Fn(E) -> E,
        // (input, output, upstream) -> input grad
        bwd: impl Fn(E, E, E) -> E + 'static,
    ) -> Tensor<E> {
        let out_data: Vec<E> = self.data().iter().map(|&a| fwd(a)).collect();
        let out = Tensor::new_result(self.shape().to_vec(), out_data);
        let (x, y) = (self.clone(), out.clone());
        tape.record(&out, &[self], move |g, store| {
            let (xd, yd) = (x.data(), y.data());
            let gx: Vec<E> = (0..g.len()).map(|i| bwd(xd[i], yd[i], g[i])).collect();
            drop(xd);
            drop(yd);
            store.accum(&x, &gx);
        });
        out
    }

    pub fn neg(&self, tape: &Tape<E>) -> Tensor<E> {
        self.pointwise_unary(tape, |a| -a, |_, _, g| -g)
    }

    pub fn scale(&self, c: E, tape: &Tape<E>) -> Tensor<E> {
        self.pointwise_unary(tape, |a| a * c, move |_, _, g| g * c)
    }

    pub fn add_scalar(&self, c: E, tape: &Tape<E>) -> Tensor<E> {
        self.pointwise_unary(tape, |a| a + c, |_, _, g| g)
    }

    pub fn exp(&self, tape: &Tape<E>) -> Tensor<E> {
        self.pointwise_unary(tape, |a| a.exp(), |_, y, g| g * y)
    }

    pub fn sqrt(&self, tape: &Tape<E>) -> Tensor<E> {
        self.pointwise_unary(
            tape,
            |a| a.sqrt(),
            |_, y, g| {
                let d = y + y;
                if d == E::zero() {
                    E::zero()
                } else {
                    g / d
                }
            },
        )
    }

    /// Elementwise multiply by a single-element tensor (learnable scalar).
    pub fn mul_scalar_tensor(&self, s: &Tensor<E>, tape: &Tape<E>) -> Result<Tensor<E>> {
        if s.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar_tensor",
                lhs: self.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let sv = s.item();
        let out_data: Vec<E> = self.data().iter().map(|&a| a * sv).collect();
        let out = Tensor::new_result(self.shape().to_vec(), out_data);
        let (x, sc) = (self.clone(), s.clone());
        tape.record(&out, &[self, s], move |g, store| {
            let sv = sc.item();
            let xd = x.data();
            let gx: Vec<E> = g.iter().map(|&gi| gi * sv).collect();
            let gs: E = g.iter().zip(xd.iter()).map(|(&gi, &xi)| gi * xi).sum();
            drop(xd);
            store.accum(&x, &gx);
            store.accum(&sc, &[gs]);
        });
        Ok(out)
    }

    /// Adds `rhs` broadcast over leading axes; `rhs.shape()` must equal a
    /// suffix of `self.shape()`.
    pub fn add_bcast(&self, rhs: &Tensor<E>, tape: &Tape<E>) -> Result<Tensor<E>> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if rs.len() > ls.len() || rs != &ls[ls.len() - rs.len()..] {
            return Err(Error::ShapeMismatch {
                op: "add_bcast",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let width = rhs.numel().max(1);
        let out_data: Vec<E> = {
            let (a, b) = (self.data(), rhs.data());
            a.iter()
                .enumerate()
                .map(|(i, &v)| v + b[i % width])
                .collect()
        };
        let out = Tensor::new_result(self.shape().to_vec(), out_data);
        let (x, y) = (self.clone(), rhs.clone());
        tape.record(&out, &[self, rhs], move |g, store| {
            store.accum(&x, g);
            if y.requires_grad() {
                let mut gy = vec![E::zero(); width];
                for (i, &gi) in g.iter().enumerate() {
                    gy[i % width] = gy[i % width] + gi;
                }
                store.accum(&y, &gy);
            }
        });
        Ok(out)
    }

    /// Contraction over the last axis of `self` and first non-batch axis of
    /// `rhs`. Supported layouts: `[m,k]x[k,n]`, `[b..,m,k]x[b..,k,n]`, and
    /// `[b..,m,k]x[k,n]` with the 2-d right operand broadcast over batches.
    pub fn matmul(&self, rhs: &Tensor<E>, tape: &Tape<E>) -> Result<Tensor<E>> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let err = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ls.to_vec(),
            rhs: rs.to_vec(),
        };
        if ls.len() < 2 || rs.len() < 2 {
            return Err(err());
        }
        let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let (k2, n) = (rs[rs.len() - 2], rs[rs.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let batch_l = &ls[..ls.len() - 2];
        let batch_r = &rs[..rs.len() - 2];
        let rhs_broadcast = batch_r.is_empty();
        if !rhs_broadcast && batch_l != batch_r {
            return Err(err());
        }
        let batch: usize = batch_l.iter().product();

        let mut out_data = vec![E::zero(); batch * m * n];
        {
            let (a, b) = (self.data(), rhs.data());
            for t in 0..batch {
                let a_off = t * m * k;
                let b_off = if rhs_broadcast { 0 } else { t * k * n };
                mm(
                    &a[a_off..a_off + m * k],
                    &b[b_off..b_off + k * n],
                    m,
                    k,
                    n,
                    &mut out_data[t * m * n..(t + 1) * m * n],
                );
            }
        }
        let mut out_shape = batch_l.to_vec();
        out_shape.extend_from_slice(&[m, n]);
        let out = Tensor::new_result(out_shape, out_data);

        let (at, bt) = (self.clone(), rhs.clone());
        tape.record(&out, &[self, rhs], move |g, store| {
            let (a, b) = (at.data(), bt.data());
            if at.requires_grad() {
                let mut ga = vec![E::zero(); a.len()];
                for t in 0..batch {
                    let b_off = if rhs_broadcast { 0 } else { t * k * n };
                    mm_g_bt(
                        &g[t * m * n..(t + 1) * m * n],
                        &b[b_off..b_off + k * n],
                        m,
                        k,
                        n,
                        &mut ga[t * m * k..(t + 1) * m * k],
                    );
                }
                store.accum(&at, &ga);
            }
            if bt.requires_grad() {
                let mut gb = vec![E::zero(); b.len()];
                for t in 0..batch {
                    let gb_off = if rhs_broadcast { 0 } else { t * k * n };
                    mm_at_g(
                        &a[t * m * k..(t + 1) * m * k],
                        &g[t * m * n..(t + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut gb[gb_off..gb_off + k * n],
                    );
                }
                store.accum(&bt, &gb);
            }
            drop(a);
            drop(b);
        });
        Ok(out)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>, tape: &Tape<E>) -> Result<Tensor<E>> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape,
            });
        }
        let out = Tensor::new_result(shape, self.to_vec());
        let x = self.clone();
        tape.record(&out, &[self], move |g, store| {
            store.accum(&x, g);
        });
        Ok(out)
    }

    /// Axis permutation; `axes` must be a permutation of `0..ndim`.
    pub fn permute(&self, axes: &[usize], tape: &Tape<E>) -> Result<Tensor<E>> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidAxis {
                op: "permute",
                shape: self.shape().to_vec(),
                axis: axes.iter().copied().max().unwrap_or(0),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let out_data = permute_raw(&self.data(), self.shape(), axes);
        let out = Tensor::new_result(out_shape.clone(), out_data);
        let x = self.clone();
        let mut inv = vec![0usize; nd];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        tape.record(&out, &[self], move |g, store| {
            let gx = permute_raw(g, &out_shape, &inv);
            store.accum(&x, &gx);
        });
        Ok(out)
    }

    /// Transpose of a 2-d tensor.
    pub fn transpose(&self, tape: &Tape<E>) -> Result<Tensor<E>> {
        self.permute(&[1, 0], tape)
    }

    /// Gathers rows along axis 0: output row `i` is `self[idx[i]]`.
    /// Doubles as embedding lookup. Backward scatter-adds.
    pub fn index_rows(&self, idx: &[usize], tape: &Tape<E>) -> Result<Tensor<E>> {
        if self.ndim() == 0 {
            return Err(Error::InvalidAxis {
                op: "index_rows",
                shape: vec![],
                axis: 0,
            });
        }
        let nrows = self.shape()[0];
        let width = self.numel() / nrows.max(1);
        for &i in idx {
            if i >= nrows {
                return Err(Error::IndexOutOfRange {
                    op: "index_rows",
                    index: i,
                    len: nrows,
                });
            }
        }
        let mut out_data = Vec::with_capacity(idx.len() * width);
        {
            let d = self.data();
            for &i in idx {
                out_data.extend_from_slice(&d[i * width..(i + 1) * width]);
            }
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[0] = idx.len();
        let out = Tensor::new_result(out_shape, out_data);
        let x = self.clone();
        let idx: Vec<usize> = idx.to_vec();
        tape.record(&out, &[self], move |g, store| {
            let mut gx = vec![E::zero(); x.numel()];
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..width {
                    gx[i * width + c] = gx[i * width + c] + g[r * width + c];
                }
            }
            store.accum(&x, &gx);
        });
        Ok(out)
    }

    /// Concatenation along axis 0. Trailing dims must agree.
    pub fn concat_rows(parts: &[&Tensor<E>], tape: &Tape<E>) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::EmptySequence);
        }
        let trailing = &parts[0].shape()[1..];
        let mut rows = 0usize;
        for p in parts {
            if p.ndim() != trailing.len() + 1 || &p.shape()[1..] != trailing {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows += p.shape()[0];
        }
        let width: usize = trailing.iter().product();
        let mut out_data = Vec::with_capacity(rows * width);
        for p in parts {
            out_data.extend_from_slice(&p.data());
        }
        let mut out_shape = vec![rows];
        out_shape.extend_from_slice(trailing);
        let out = Tensor::new_result(out_shape, out_data);
        let owned: Vec<Tensor<E>> = parts.iter().map(|p| (*p).clone()).collect();
        tape.record(&out, parts, move |g, store| {
            let mut off = 0usize;
            for p in &owned {
                let len = p.numel();
                store.accum(p, &g[off..off + len]);
                off += len;
            }
        });
        Ok(out)
    }

    pub fn sum_all(&self, tape: &Tape<E>) -> Tensor<E> {
        let s: E = self.data().iter().copied().sum();
        let out = Tensor::new_result(vec![], vec![s]);
        let x = self.clone();
        tape.record(&out, &[self], move |g, store| {
            let gx = vec![g[0]; x.numel()];
            store.accum(&x, &gx);
        });
        out
    }

    pub fn mean_all(&self, tape: &Tape<E>) -> Tensor<E> {
        let n = E::of(self.numel() as f64);
        let s: E = self.data().iter().copied().sum();
        let out = Tensor::new_result(vec![], vec![s / n]);
        let x = self.clone();
        tape.record(&out, &[self], move |g, store| {
            let gv = g[0] / n;
            let gx = vec![gv; x.numel()];
            store.accum(&x, &gx);
        });
        out
    }
}

fn permute_raw<E: Element>(data: &[E], in_shape: &[usize], axes: &[usize]) -> Vec<E> {
    let nd = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides(in_shape);
    let out_strides = strides(&out_shape);
    let numel: usize = in_shape.iter().product();
    let mut out = vec![E::zero(); numel];
    let mut coord = vec![0usize; nd];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        for (d, &st) in out_strides.iter().enumerate() {
            coord[d] = rem / st;
            rem %= st;
        }
        let mut in_off = 0usize;
        for d in 0..nd {
            in_off += coord[d] * in_strides[axes[d]];
        }
        *slot = data[in_off];
    }
    out
}
