use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{strides_of, Scalar, Tensor};

/// Flat source index for every destination element of a permutation.
fn permutation_gather(extents: &[usize], order: &[usize]) -> Vec<usize> {
    let src_strides = strides_of(extents);
    let out_ext: Vec<usize> = order.iter().map(|&a| extents[a]).collect();
    let strides: Vec<usize> = order.iter().map(|&a| src_strides[a]).collect();
    let numel: usize = extents.iter().product();
    let mut gather = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_ext.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        gather.push(off);
        for ax in (0..out_ext.len()).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_ext[ax] {
                break;
            }
            off -= strides[ax] * out_ext[ax];
            idx[ax] = 0;
        }
    }
    gather
}

pub fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &a) in order.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

impl<T: Scalar> Tape<T> {
    pub fn reshape(&mut self, x: Var, extents: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(extents)?;
        Ok(self.record(out, &[x], Box::new(move |gy, _vals, sink| sink.add(x, gy))))
    }

    /// Axis permutation: output axis `i` is input axis `order[i]`.
    pub fn permute(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        let ext = self.extents(x).to_vec();
        let mut seen = vec![false; ext.len()];
        if order.len() != ext.len() || order.iter().any(|&a| a >= ext.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!("{order:?} is not a permutation of {} axes", ext.len())));
        }
        let gather = permutation_gather(&ext, order);
        let xs = self.data(x);
        let data: Vec<T> = gather.iter().map(|&i| xs[i]).collect();
        let out_ext: Vec<usize> = order.iter().map(|&a| ext[a]).collect();
        let out = Tensor::new(&out_ext, data)?;
        Ok(self.record(
            out,
            &[x],
            Box::new(move |gy, _vals, sink| {
                if let Some(gx) = sink.buf(x) {
                    for (o, &i) in gather.iter().enumerate() {
                        gx[i] += gy[o];
                    }
                }
            }),
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.extents(*xs.first().ok_or_else(|| Error::shape("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {first:?}")));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for &v in xs {
            let e = self.extents(v);
            if e.len() != first.len() || e.iter().zip(&first).enumerate().any(|(a, (x, y))| a != axis && x != y) {
                return Err(Error::shape(format!("cannot concat {e:?} with {first:?} on axis {axis}")));
            }
            lens.push(e[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in xs.iter().zip(&lens) {
                out.extend_from_slice(&self.data(v)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_ext = first.clone();
        out_ext[axis] = total;
        let out = Tensor::new(&out_ext, out)?;
        let parts = xs.to_vec();
        Ok(self.record(
            out,
            xs,
            Box::new(move |gy, _vals, sink| {
                let mut base = 0;
                for (&v, &len) in parts.iter().zip(&lens) {
                    if let Some(gx) = sink.buf(v) {
                        for o in 0..outer {
                            let src = &gy[(o * total + base) * inner..(o * total + base + len) * inner];
                            for (d, &g) in gx[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *d += g;
                            }
                        }
                    }
                    base += len;
                }
            }),
        ))
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>> {
        let ext = self.extents(x).to_vec();
        if axis >= ext.len() || sizes.iter().sum::<usize>() != ext[axis] || sizes.contains(&0) {
            return Err(Error::shape(format!("cannot split {ext:?} into {sizes:?} on axis {axis}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ext = self.extents(x).to_vec();
        if axis >= ext.len() || start + len > ext[axis] || len == 0 {
            return Err(Error::shape(format!(
                "narrow [{start}, {}) out of range on axis {axis} of {ext:?}",
                start + len
            )));
        }
        let outer: usize = ext[..axis].iter().product();
        let inner: usize = ext[axis + 1..].iter().product();
        let full = ext[axis];
        let xs = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&xs[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_ext = ext;
        out_ext[axis] = len;
        let out = Tensor::new(&out_ext, data)?;
        Ok(self.record(
            out,
            &[x],
            Box::new(move |gy, _vals, sink| {
                if let Some(gx) = sink.buf(x) {
                    for o in 0..outer {
                        let dst = &mut gx[(o * full + start) * inner..(o * full + start + len) * inner];
                        for (d, &g) in dst.iter_mut().zip(&gy[o * len * inner..(o + 1) * len * inner]) {
                            *d += g;
                        }
                    }
                }
            }),
        ))
    }

    /// Nearest-neighbour 2× upsampling of an NCHW tensor.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let (oh, ow) = (2 * h, 2 * w);
        let xs = self.data(x);
        let mut out = vec![T::ZERO; n * c * oh * ow];
        for plane in 0..n * c {
            for p in 0..oh {
                for q in 0..ow {
                    out[(plane * oh + p) * ow + q] = xs[(plane * h + p / 2) * w + q / 2];
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.record(
            out,
            &[x],
            Box::new(move |gy, _vals, sink| {
                if let Some(gx) = sink.buf(x) {
                    for plane in 0..n * c {
                        for p in 0..oh {
                            for q in 0..ow {
                                gx[(plane * h + p / 2) * w + q / 2] += gy[(plane * oh + p) * ow + q];
                            }
                        }
                    }
                }
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_op, random_tensor};
    use crate::rng::Rng64;
    use proptest::prelude::*;

    #[test]
    fn permute_identity_and_shape_bookkeeping() {
        let mut rng = Rng64::new(1);
        let x: Tensor<f32> = random_tensor(&mut rng, &[2, 3, 4, 5], 1.0);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let id = t.permute(v, &[0, 1, 2, 3]).unwrap();
        assert_eq!(t.value(id).data(), x.data());
        let p = t.permute(v, &[0, 2, 1, 3]).unwrap();
        assert_eq!(t.extents(p), &[2, 4, 3, 5]);
        assert_eq!(t.value(p).at(&[1, 3, 2, 4]), x.at(&[1, 2, 3, 4]));
        assert!(t.permute(v, &[0, 1, 1, 3]).is_err());
        assert!(t.permute(v, &[0, 1, 2]).is_err());
    }

    #[test]
    fn upsample_single_pixel() {
        let mut t = Tape::<f32>::new();
        let v = t.constant(Tensor::full(&[1, 1, 1, 1], 2.5));
        let u = t.upsample_nearest2x(v).unwrap();
        assert_eq!(t.extents(u), &[1, 1, 2, 2]);
        assert_eq!(t.data(u), &[2.5; 4]);
    }

    #[test]
    fn shape_op_gradients() {
        let mut rng = Rng64::new(2);
        let x = random_tensor(&mut rng, &[2, 3, 2, 4], 1.0);
        let y = random_tensor(&mut rng, &[2, 2, 2, 4], 1.0);
        let r = check_op(std::slice::from_ref(&x), 1, |t, v| t.permute(v[0], &[3, 0, 2, 1]));
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        let r = check_op(&[x.clone(), y], 2, |t, v| t.concat(&[v[0], v[1]], 1));
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        let r = check_op(std::slice::from_ref(&x), 3, |t, v| {
            let parts = t.split(v[0], &[1, 2], 1)?;
            let b = t.scale(parts[1], 2.0);
            t.concat(&[b, parts[0]], 1)
        });
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        let r = check_op(&[x], 4, |t, v| t.upsample_nearest2x(v[0]));
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    proptest! {
        #[test]
        fn permute_then_inverse_is_exact(
            dims in proptest::collection::vec(1usize..4, 4),
            perm_seed in 0u64..1000,
        ) {
            let mut rng = Rng64::new(perm_seed);
            let mut order: Vec<usize> = (0..4).collect();
            for i in (1..4).rev() {
                order.swap(i, rng.below(i as u64 + 1) as usize);
            }
            let x: Tensor<f32> = random_tensor(&mut rng, &dims, 1.0);
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let p = t.permute(v, &order).unwrap();
            let back = t.permute(p, &inverse_permutation(&order)).unwrap();
            prop_assert_eq!(t.value(back).data(), x.data());
            prop_assert_eq!(t.extents(back), x.extents());
        }

        #[test]
        fn split_inverts_concat(a in 1usize..4, b in 1usize..4, axis in 0usize..3) {
            let mut rng = Rng64::new((a * 7 + b) as u64);
            let mut ea = vec![2, 3, 2];
            let mut eb = ea.clone();
            ea[axis] = a;
            eb[axis] = b;
            let xa: Tensor<f32> = random_tensor(&mut rng, &ea, 1.0);
            let xb: Tensor<f32> = random_tensor(&mut rng, &eb, 1.0);
            let mut t = Tape::new();
            let va = t.constant(xa.clone());
            let vb = t.constant(xb.clone());
            let c = t.concat(&[va, vb], axis).unwrap();
            let parts = t.split(c, &[a, b], axis).unwrap();
            prop_assert_eq!(t.value(parts[0]).data(), xa.data());
            prop_assert_eq!(t.value(parts[1]).data(), xb.data());
        }
    }
}
