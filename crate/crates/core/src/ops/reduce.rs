use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// `(outer, len, inner)` decomposition of `extents` around `axis`.
fn split_axis(extents: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= extents.len() {
        return Err(Error::shape(format!("axis {axis} out of range for {extents:?}")));
    }
    Ok((extents[..axis].iter().product(), extents[axis], extents[axis + 1..].iter().product()))
}

fn keepdim(extents: &[usize], axis: usize) -> Vec<usize> {
    let mut e = extents.to_vec();
    e[axis] = 1;
    e
}

impl<T: Scalar> Tape<T> {
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        self.record(
            Tensor::scalar(s),
            &[x],
            Box::new(move |gy, _vals, sink| {
                if let Some(gx) = sink.buf(x) {
                    gx.iter_mut().for_each(|g| *g += gy[0]);
                }
            }),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `Σ w ⊙ x` for a constant weight tensor of the same extents.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.extents(x) != weights.extents() {
            return Err(Error::shape(format!("weights {:?} do not match {:?}", weights.extents(), self.extents(x))));
        }
        let s: T = self.data(x).iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let w = weights.data().to_vec();
        Ok(self.record(
            Tensor::scalar(s),
            &[x],
            Box::new(move |gy, _vals, sink| {
                if let Some(gx) = sink.buf(x) {
                    for (g, &wi) in gx.iter_mut().zip(&w) {
                        *g += gy[0] * wi;
                    }
                }
            }),
        ))
    }

    /// Elementwise mean of equally shaped tensors, accumulated in f64.
    pub fn average(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("average of nothing"))?;
        let ext = self.extents(first).to_vec();
        if let Some(&bad) = xs.iter().find(|&&v| self.extents(v) != ext.as_slice()) {
            return Err(Error::shape(format!("average over {ext:?} and {:?}", self.extents(bad))));
        }
        let count = xs.len() as f64;
        let numel = self.value(first).numel();
        let mut acc = vec![0.0f64; numel];
        for &v in xs {
            for (a, &x) in acc.iter_mut().zip(self.data(v)) {
                *a += x.to_f64();
            }
        }
        let out = Tensor::new(&ext, acc.into_iter().map(|a| T::of(a / count)).collect())?;
        let parts = xs.to_vec();
        let inv = T::of(1.0 / count);
        Ok(self.record(
            out,
            xs,
            Box::new(move |gy, _vals, sink| {
                for &v in &parts {
                    if let Some(gx) = sink.buf(v) {
                        for (g, &d) in gx.iter_mut().zip(gy) {
                            *g += d * inv;
                        }
                    }
                }
            }),
        ))
    }

    /// Sum over one axis, kept with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ext = self.extents(x).to_vec();
        let (outer, len, inner) = split_axis(&ext, axis)?;
        let xs = self.data(x);
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let src = &xs[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let out = Tensor::new(&keepdim(&ext, axis), out)?;
        Ok(self.record(
            out,
            &[x],
            Box::new(move |gy, _vals, sink| {
                if let Some(gx) = sink.buf(x) {
                    for o in 0..outer {
                        for i in 0..len {
                            let dst = &mut gx[(o * len + i) * inner..(o * len + i + 1) * inner];
                            for (d, &g) in dst.iter_mut().zip(&gy[o * inner..(o + 1) * inner]) {
                                *d += g;
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Mean over one axis, kept with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self.extents(x).get(axis).ok_or_else(|| Error::shape(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Max over one axis, kept with extent 1; gradient goes to the first maximal element.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ext = self.extents(x).to_vec();
        let (outer, len, inner) = split_axis(&ext, axis)?;
        let xs = self.data(x);
        let mut out = vec![T::ZERO; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for r in 0..inner {
                let mut best = xs[o * len * inner + r];
                let mut at = 0;
                for i in 1..len {
                    let v = xs[(o * len + i) * inner + r];
                    if v > best {
                        best = v;
                        at = i;
                    }
                }
                out[o * inner + r] = best;
                arg[o * inner + r] = (o * len + at) * inner + r;
            }
        }
        let out = Tensor::new(&keepdim(&ext, axis), out)?;
        Ok(self.record(
            out,
            &[x],
            Box::new(move |gy, _vals, sink| {
                if let Some(gx) = sink.buf(x) {
                    for (o, &a) in arg.iter().enumerate() {
                        gx[a] += gy[o];
                    }
                }
            }),
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ext = self.extents(x).to_vec();
        let (outer, len, inner) = split_axis(&ext, axis)?;
        let xs = self.data(x);
        let mut out = vec![T::ZERO; xs.len()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| (o * len + i) * inner + r;
                let m = (0..len).map(|i| xs[at(i)]).fold(T::NEG_INFINITY, T::max);
                let mut total = T::ZERO;
                for i in 0..len {
                    let e = (xs[at(i)] - m).exp();
                    out[at(i)] = e;
                    total += e;
                }
                let inv = T::ONE / total;
                for i in 0..len {
                    out[at(i)] *= inv;
                }
            }
        }
        let out = Tensor::new(&ext, out)?;
        let out_idx = self.len();
        Ok(self.record(
            out,
            &[x],
            Box::new(move |gy, vals, sink| {
                let ys = vals[out_idx].data();
                if let Some(gx) = sink.buf(x) {
                    for o in 0..outer {
                        for r in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + r;
                            let dot: T = (0..len).map(|i| gy[at(i)] * ys[at(i)]).sum();
                            for i in 0..len {
                                gx[at(i)] += ys[at(i)] * (gy[at(i)] - dot);
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Layer normalization over all axes from `first_axis` to the last, with
    /// elementwise `gain` and `bias` covering those axes.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, first_axis: usize, eps: f64) -> Result<Var> {
        let ext = self.extents(x).to_vec();
        if first_axis >= ext.len() {
            return Err(Error::shape(format!("axis {first_axis} out of range for {ext:?}")));
        }
        let m: usize = ext[first_axis..].iter().product();
        let rows = self.value(x).numel() / m;
        if self.value(gain).numel() != m || self.value(bias).numel() != m {
            return Err(Error::shape(format!(
                "layer_norm gain/bias need {m} elements, got {} and {}",
                self.value(gain).numel(),
                self.value(bias).numel()
            )));
        }
        let eps = T::of(eps);
        let inv_m = T::of(1.0 / m as f64);
        let xs = self.data(x);
        let (gs, bs) = (self.data(gain), self.data(bias));
        let mut out = vec![T::ZERO; xs.len()];
        let mut xhat = vec![T::ZERO; xs.len()];
        let mut rstd = vec![T::ZERO; rows];
        for r in 0..rows {
            let row = &xs[r * m..(r + 1) * m];
            let mean = row.iter().copied().sum::<T>() * inv_m;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..m {
                let xh = (row[i] - mean) * rs;
                xhat[r * m + i] = xh;
                out[r * m + i] = gs[i] * xh + bs[i];
            }
        }
        let out = Tensor::new(&ext, out)?;
        Ok(self.record(
            out,
            &[x, gain, bias],
            Box::new(move |gy, vals, sink| {
                let gs = vals[gain.0].data();
                if let Some(gb) = sink.buf(bias) {
                    for r in 0..rows {
                        for i in 0..m {
                            gb[i] += gy[r * m + i];
                        }
                    }
                }
                if let Some(gg) = sink.buf(gain) {
                    for r in 0..rows {
                        for i in 0..m {
                            gg[i] += gy[r * m + i] * xhat[r * m + i];
                        }
                    }
                }
                if let Some(gx) = sink.buf(x) {
                    for r in 0..rows {
                        let dxh: Vec<T> = (0..m).map(|i| gy[r * m + i] * gs[i]).collect();
                        let mean_d = dxh.iter().copied().sum::<T>() * inv_m;
                        let mean_dx = (0..m).map(|i| dxh[i] * xhat[r * m + i]).sum::<T>() * inv_m;
                        for i in 0..m {
                            gx[r * m + i] += rstd[r] * (dxh[i] - mean_d - xhat[r * m + i] * mean_dx);
                        }
                    }
                }
            }),
        ))
    }
}
