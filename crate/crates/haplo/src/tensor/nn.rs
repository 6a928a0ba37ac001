//! Neural-network operations: activations, softmax, normalization,
//! cross-entropy, rotary embedding and the rowwise similarity kernels the
//! distillation losses are built from.

use super::core::{Element, Tensor};
use super::tape::Tape;
use crate::error::{Error, Result};

/// Sentinel target value excluded from cross-entropy.
pub const IGNORE_INDEX: usize = usize::MAX;

impl<E: Element> Tensor<E> {
    /// GELU, tanh form: `0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))`.
    pub fn gelu(&self, tape: &Tape<E>) -> Tensor<E> {
        let out_data: Vec<E> = self.data().iter().map(|&a| gelu_fwd(a)).collect();
        let out = Tensor::new_result(self.shape().to_vec(), out_data);
        let x = self.clone();
        tape.record(&out, &[self], move |g, store| {
            let xd = x.data();
            let gx: Vec<E> = xd.iter().zip(g).map(|(&a, &gi)| gi * gelu_bwd(a)).collect();
            drop(xd);
            store.accum(&x, &gx);
        });
        out
    }

    /// SiLU: `x * sigmoid(x)`.
    pub fn silu(&self, tape: &Tape<E>) -> Tensor<E> {
        let out_data: Vec<E> = self.data().iter().map(|&a| a * sigmoid(a)).collect();
        let out = Tensor::new_result(self.shape().to_vec(), out_data);
        let x = self.clone();
        tape.record(&out, &[self], move |g, store| {
            let xd = x.data();
            let gx: Vec<E> = xd
                .iter()
                .zip(g)
                .map(|(&a, &gi)| {
                    let s = sigmoid(a);
                    gi * s * (E::one() + a * (E::one() - s))
                })
                .collect();
            drop(xd);
            store.accum(&x, &gx);
        });
        out
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize, tape: &Tape<E>) -> Result<Tensor<E>> {
        if axis >= self.ndim() {
            return Err(Error::InvalidAxis {
                op: "softmax",
                shape: self.shape().to_vec(),
                axis,
            });
        }
        let shape = self.shape().to_vec();
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out_data = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut mx = E::neg_infinity();
                for j in 0..lane {
                    mx = mx.max(out_data[base + j * inner]);
                }
                let mut sum = E::zero();
                for j in 0..lane {
                    let e = (out_data[base + j * inner] - mx).exp();
                    out_data[base + j * inner] = e;
                    sum = sum + e;
                }
                for j in 0..lane {
                    out_data[base + j * inner] = out_data[base + j * inner] / sum;
                }
            }
        }
        let out = Tensor::new_result(shape, out_data);
        let (x, y) = (self.clone(), out.clone());
        tape.record(&out, &[self], move |g, store| {
            let s = y.data();
            let mut gx = vec![E::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * lane * inner + i;
                    let mut dot = E::zero();
                    for j in 0..lane {
                        let k = base + j * inner;
                        dot = dot + g[k] * s[k];
                    }
                    for j in 0..lane {
                        let k = base + j * inner;
                        gx[k] = s[k] * (g[k] - dot);
                    }
                }
            }
            drop(s);
            store.accum(&x, &gx);
        });
        Ok(out)
    }

    /// LayerNorm over the last axis with affine gain/bias.
    pub fn layer_norm(
        &self,
        gain: &Tensor<E>,
        bias: &Tensor<E>,
        eps: f64,
        tape: &Tape<E>,
    ) -> Result<Tensor<E>> {
        if eps <= 0.0 {
            return Err(Error::InvalidEps {
                op: "layer_norm",
                eps,
            });
        }
        let width = *self.shape().last().ok_or(Error::InvalidAxis {
            op: "layer_norm",
            shape: vec![],
            axis: 0,
        })?;
        if gain.shape() != [width] || bias.shape() != [width] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let rows = self.numel() / width;
        let epse = E::of(eps);
        let nw = E::of(width as f64);

        let mut xhat = vec![E::zero(); self.numel()];
        let mut inv_std = vec![E::zero(); rows];
        let mut out_data = vec![E::zero(); self.numel()];
        {
            let (xd, gd, bd) = (self.data(), gain.data(), bias.data());
            for r in 0..rows {
                let row = &xd[r * width..(r + 1) * width];
                let mean: E = row.iter().copied().sum::<E>() / nw;
                let var: E = row
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<E>()
                    / nw;
                let istd = E::one() / (var + epse).sqrt();
                inv_std[r] = istd;
                for c in 0..width {
                    let h = (row[c] - mean) * istd;
                    xhat[r * width + c] = h;
                    out_data[r * width + c] = gd[c] * h + bd[c];
                }
            }
        }
        let out = Tensor::new_result(self.shape().to_vec(), out_data);
        let (x, gn, bs) = (self.clone(), gain.clone(), bias.clone());
        tape.record(&out, &[self, gain, bias], move |g, store| {
            let gd = gn.data();
            let mut gx = vec![E::zero(); x.numel()];
            let mut ggain = vec![E::zero(); width];
            let mut gbias = vec![E::zero(); width];
            for r in 0..rows {
                let istd = inv_std[r];
                let mut mean_dh = E::zero();
                let mut mean_dh_h = E::zero();
                for c in 0..width {
                    let k = r * width + c;
                    let dh = g[k] * gd[c];
                    mean_dh = mean_dh + dh;
                    mean_dh_h = mean_dh_h + dh * xhat[k];
                    ggain[c] = ggain[c] + g[k] * xhat[k];
                    gbias[c] = gbias[c] + g[k];
                }
                mean_dh = mean_dh / nw;
                mean_dh_h = mean_dh_h / nw;
                for c in 0..width {
                    let k = r * width + c;
                    let dh = g[k] * gd[c];
                    gx[k] = istd * (dh - mean_dh - xhat[k] * mean_dh_h);
                }
            }
            drop(gd);
            store.accum(&x, &gx);
            store.accum(&gn, &ggain);
            store.accum(&bs, &gbias);
        });
        Ok(out)
    }

    /// RMSNorm over the last axis: `x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rms_norm(&self, gain: &Tensor<E>, eps: f64, tape: &Tape<E>) -> Result<Tensor<E>> {
        if eps <= 0.0 {
            return Err(Error::InvalidEps { op: "rms_norm", eps });
        }
        let width = *self.shape().last().ok_or(Error::InvalidAxis {
            op: "rms_norm",
            shape: vec![],
            axis: 0,
        })?;
        if gain.shape() != [width] {
            return Err(Error::ShapeMismatch {
                op: "rms_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let rows = self.numel() / width;
        let epse = E::of(eps);
        let nw = E::of(width as f64);

        let mut inv_rms = vec![E::zero(); rows];
        let mut out_data = vec![E::zero(); self.numel()];
        {
            let (xd, gd) = (self.data(), gain.data());
            for r in 0..rows {
                let row = &xd[r * width..(r + 1) * width];
                let ms: E = row.iter().map(|&v| v * v).sum::<E>() / nw;
                let ir = E::one() / (ms + epse).sqrt();
                inv_rms[r] = ir;
                for c in 0..width {
                    out_data[r * width + c] = gd[c] * row[c] * ir;
                }
            }
        }
        let out = Tensor::new_result(self.shape().to_vec(), out_data);
        let (x, gn) = (self.clone(), gain.clone());
        tape.record(&out, &[self, gain], move |g, store| {
            let (xd, gd) = (x.data(), gn.data());
            let mut gx = vec![E::zero(); x.numel()];
            let mut ggain = vec![E::zero(); width];
            for r in 0..rows {
                let ir = inv_rms[r];
                let mut mean_dh_h = E::zero();
                for c in 0..width {
                    let k = r * width + c;
                    let h = xd[k] * ir;
                    ggain[c] = ggain[c] + g[k] * h;
                    mean_dh_h = mean_dh_h + g[k] * gd[c] * h;
                }
                mean_dh_h = mean_dh_h / nw;
                for c in 0..width {
                    let k = r * width + c;
                    let h = xd[k] * ir;
                    gx[k] = ir * (g[k] * gd[c] - h * mean_dh_h);
                }
            }
            drop(xd);
            drop(gd);
            store.accum(&x, &gx);
            store.accum(&gn, &ggain);
        });
        Ok(out)
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `self` (`[rows, classes]`). Rows whose target equals `ignore_index`
    /// are excluded. Returns the scalar loss and a flag that is true when
    /// every position was ignored (loss defined as 0 in that case).
    pub fn cross_entropy(
        &self,
        targets: &[usize],
        ignore_index: Option<usize>,
        tape: &Tape<E>,
    ) -> Result<(Tensor<E>, bool)> {
        if self.ndim() != 2 || targets.len() != self.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (rows, classes) = (self.shape()[0], self.shape()[1]);
        let mut valid = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == ignore_index {
                continue;
            }
            if t >= classes {
                return Err(Error::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    len: classes,
                });
            }
            valid.push(r);
        }
        let all_ignored = valid.is_empty();
        let n_valid = valid.len();

        let mut loss = E::zero();
        {
            let xd = self.data();
            for &r in &valid {
                let row = &xd[r * classes..(r + 1) * classes];
                let mx = row.iter().copied().fold(E::neg_infinity(), E::max);
                let lse: E = row.iter().map(|&v| (v - mx).exp()).sum::<E>().ln() + mx;
                loss = loss + lse - row[targets[r]];
            }
        }
        if !all_ignored {
            loss = loss / E::of(n_valid as f64);
        }
        let out = Tensor::new_result(vec![], vec![loss]);
        let x = self.clone();
        let targets: Vec<usize> = targets.to_vec();
        tape.record(&out, &[self], move |g, store| {
            if n_valid == 0 {
                return;
            }
            let xd = x.data();
            let scale = g[0] / E::of(n_valid as f64);
            let mut gx = vec![E::zero(); x.numel()];
            for &r in &valid {
                let row = &xd[r * classes..(r + 1) * classes];
                let mx = row.iter().copied().fold(E::neg_infinity(), E::max);
                let sum: E = row.iter().map(|&v| (v - mx).exp()).sum();
                for c in 0..classes {
                    let p = (row[c] - mx).exp() / sum;
                    gx[r * classes + c] = scale * p;
                }
                gx[r * classes + targets[r]] = gx[r * classes + targets[r]] - scale;
            }
            drop(xd);
            store.accum(&x, &gx);
        });
        Ok((out, all_ignored))
    }

    /// Rotary position embedding over the last axis (half-split pairing):
    /// element pair `(t, t + dh/2)` of the row at sequence slot `s` is
    /// rotated by `positions[s] * base^(-2t/dh)`. Input is `[.., len, dh]`
    /// with `dh` even and `positions.len() == len`.
    pub fn rope(&self, positions: &[usize], base: f64, tape: &Tape<E>) -> Result<Tensor<E>> {
        if self.ndim() < 2 {
            return Err(Error::InvalidAxis {
                op: "rope",
                shape: self.shape().to_vec(),
                axis: 0,
            });
        }
        let dh = self.shape()[self.ndim() - 1];
        let len = self.shape()[self.ndim() - 2];
        if dh % 2 != 0 || positions.len() != len {
            return Err(Error::ShapeMismatch {
                op: "rope",
                lhs: self.shape().to_vec(),
                rhs: vec![positions.len()],
            });
        }
        let half = dh / 2;
        let batch = self.numel() / (len * dh);
        // cos/sin table per (slot, pair)
        let mut cos_t = vec![E::zero(); len * half];
        let mut sin_t = vec![E::zero(); len * half];
        for (s, &pos) in positions.iter().enumerate() {
            for t in 0..half {
                let theta = pos as f64 * base.powf(-2.0 * t as f64 / dh as f64);
                cos_t[s * half + t] = E::of(theta.cos());
                sin_t[s * half + t] = E::of(theta.sin());
            }
        }
        let rot = move |src: &[E], dst: &mut [E], invert: bool| {
            for b in 0..batch {
                for s in 0..len {
                    let off = (b * len + s) * dh;
                    for t in 0..half {
                        let (c, mut sn) = (cos_t[s * half + t], sin_t[s * half + t]);
                        if invert {
                            sn = -sn;
                        }
                        let (x1, x2) = (src[off + t], src[off + half + t]);
                        dst[off + t] = x1 * c - x2 * sn;
                        dst[off + half + t] = x1 * sn + x2 * c;
                    }
                }
            }
        };
        let mut out_data = vec![E::zero(); self.numel()];
        rot(&self.data(), &mut out_data, false);
        let out = Tensor::new_result(self.shape().to_vec(), out_data);
        let x = self.clone();
        tape.record(&out, &[self], move |g, store| {
            let mut gx = vec![E::zero(); g.len()];
            rot(g, &mut gx, true);
            store.accum(&x, &gx);
        });
        Ok(out)
    }

    /// Per-row cosine similarity of two `[n, d]` tensors. A row where
    /// either side has zero norm yields cosine 0 (and sets the returned
    /// flag) with zero gradient.
    pub fn cosine_rows(&self, rhs: &Tensor<E>, tape: &Tape<E>) -> Result<(Tensor<E>, bool)> {
        if self.ndim() != 2 || self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op: "cosine_rows",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let mut out_data = vec![E::zero(); n];
        let mut flagged = false;
        {
            let (ad, bd) = (self.data(), rhs.data());
            for r in 0..n {
                let a = &ad[r * d..(r + 1) * d];
                let b = &bd[r * d..(r + 1) * d];
                let (dot, na, nb) = dot_norms(a, b);
                if na == E::zero() || nb == E::zero() {
                    flagged = true;
                } else {
                    out_data[r] = dot / (na * nb);
                }
            }
        }
        let out = Tensor::new_result(vec![n], out_data);
        let (at, bt) = (self.clone(), rhs.clone());
        tape.record(&out, &[self, rhs], move |g, store| {
            let (ad, bd) = (at.data(), bt.data());
            let mut ga = vec![E::zero(); ad.len()];
            let mut gb = vec![E::zero(); bd.len()];
            for r in 0..n {
                let a = &ad[r * d..(r + 1) * d];
                let b = &bd[r * d..(r + 1) * d];
                let (dot, na, nb) = dot_norms(a, b);
                if na == E::zero() || nb == E::zero() {
                    continue;
                }
                let cos = dot / (na * nb);
                for c in 0..d {
                    ga[r * d + c] = g[r] * (b[c] / (na * nb) - cos * a[c] / (na * na));
                    gb[r * d + c] = g[r] * (a[c] / (na * nb) - cos * b[c] / (nb * nb));
                }
            }
            drop(ad);
            drop(bd);
            store.accum(&at, &ga);
            store.accum(&bt, &gb);
        });
        Ok((out, flagged))
    }

    /// Per-row Euclidean distance of two `[n, d]` tensors. Rows at zero
    /// distance get zero gradient.
    pub fn l2_rows(&self, rhs: &Tensor<E>, tape: &Tape<E>) -> Result<Tensor<E>> {
        if self.ndim() != 2 || self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op: "l2_rows",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let mut out_data = vec![E::zero(); n];
        {
            let (ad, bd) = (self.data(), rhs.data());
            for r in 0..n {
                let mut s = E::zero();
                for c in 0..d {
                    let diff = ad[r * d + c] - bd[r * d + c];
                    s = s + diff * diff;
                }
                out_data[r] = s.sqrt();
            }
        }
        let dist = out_data.clone();
        let out = Tensor::new_result(vec![n], out_data);
        let (at, bt) = (self.clone(), rhs.clone());
        tape.record(&out, &[self, rhs], move |g, store| {
            let (ad, bd) = (at.data(), bt.data());
            let mut ga = vec![E::zero(); ad.len()];
            let mut gb = vec![E::zero(); bd.len()];
            for r in 0..n {
                if dist[r] == E::zero() {
                    continue;
                }
                for c in 0..d {
                    let diff = (ad[r * d + c] - bd[r * d + c]) / dist[r];
                    ga[r * d + c] = g[r] * diff;
                    gb[r * d + c] = -g[r] * diff;
                }
            }
            drop(ad);
            drop(bd);
            store.accum(&at, &ga);
            store.accum(&bt, &gb);
        });
        Ok(out)
    }
}

fn dot_norms<E: Element>(a: &[E], b: &[E]) -> (E, E, E) {
    let mut dot = E::zero();
    let mut na = E::zero();
    let mut nb = E::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    (dot, na.sqrt(), nb.sqrt())
}

fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

const GELU_A: f64 = 0.044715;

fn gelu_fwd<E: Element>(x: E) -> E {
    let c = E::of((2.0 / std::f64::consts::PI).sqrt());
    let a = E::of(GELU_A);
    let half = E::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * x * (E::one() + t)
}

fn gelu_bwd<E: Element>(x: E) -> E {
    let c = E::of((2.0 / std::f64::consts::PI).sqrt());
    let a = E::of(GELU_A);
    let half = E::of(0.5);
    let three = E::of(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * c * (E::one() + three * a * x * x)
}
