use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{ConvSpec, Scalar, Tensor};

/// Copies the receptive fields of a `c × h × w` image into a
/// `(c·k²) × (oh·ow)` column matrix; row `(ch·k + i)·k + j` holds the padded
/// input at `(p·stride + i, q·stride + j)` for every output position `(p, q)`.
pub(crate) fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize, col: &mut [T]) {
    let k = spec.k;
    let (s, pad) = (spec.stride as isize, spec.padding as isize);
    let plane = oh * ow;
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..k {
            for j in 0..k {
                let row = (ch * k + i) * k + j;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for p in 0..oh {
                    let hi = p as isize * s + i as isize - pad;
                    let line = &mut dst[p * ow..(p + 1) * ow];
                    if hi < 0 || hi >= h as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let srow = &src[hi as usize * w..(hi as usize + 1) * w];
                    for (q, d) in line.iter_mut().enumerate() {
                        let wi = q as isize * s + j as isize - pad;
                        *d = if wi < 0 || wi >= w as isize { T::ZERO } else { srow[wi as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps.
pub(crate) fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize, x: &mut [T]) {
    let k = spec.k;
    let (s, pad) = (spec.stride as isize, spec.padding as isize);
    let plane = oh * ow;
    for ch in 0..c {
        let dst = &mut x[ch * h * w..(ch + 1) * h * w];
        for i in 0..k {
            for j in 0..k {
                let row = (ch * k + i) * k + j;
                let src = &col[row * plane..(row + 1) * plane];
                for p in 0..oh {
                    let hi = p as isize * s + i as isize - pad;
                    if hi < 0 || hi >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[hi as usize * w..(hi as usize + 1) * w];
                    for q in 0..ow {
                        let wi = q as isize * s + j as isize - pad;
                        if wi >= 0 && wi < w as isize {
                            drow[wi as usize] += src[p * ow + q];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.k == 1 && spec.stride == 1 && spec.padding == 0
}

fn check_bias<T: Scalar>(tape: &Tape<T>, bias: Option<Var>, c_out: usize) -> Result<()> {
    if let Some(b) = bias {
        if tape.value(b).numel() != c_out {
            return Err(Error::shape(format!("bias has {} elements, expected {c_out}", tape.value(b).numel())));
        }
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// 2-D convolution of an NCHW input with an `(C_out, C_in/groups, k, k)` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let (c_out, cg, kh, kw) = self.value(kernel).nchw()?;
        let g = spec.groups;
        if kh != spec.k || kw != spec.k {
            return Err(Error::shape(format!("kernel is {kh}x{kw} but spec says k = {}", spec.k)));
        }
        if g == 0 || c % g != 0 || c_out % g != 0 || cg != c / g {
            return Err(Error::shape(format!("channels in={c} out={c_out} kernel-in={cg} incompatible with groups={g}")));
        }
        check_bias(self, bias, c_out)?;
        let (oh, ow) = spec.output_hw(h, w)?;
        let og = c_out / g;
        let ckk = cg * spec.k * spec.k;
        let plane = oh * ow;
        let pointwise = is_pointwise(&spec);

        let xs = self.data(x);
        let ks = self.data(kernel);
        let mut out = vec![T::ZERO; n * c_out * plane];
        let mut col = if pointwise { Vec::new() } else { vec![T::ZERO; ckk * plane] };
        for ni in 0..n {
            for gi in 0..g {
                let xg = &xs[(ni * c + gi * cg) * h * w..(ni * c + (gi + 1) * cg) * h * w];
                let cols: &[T] = if pointwise {
                    xg
                } else {
                    im2col(xg, cg, h, w, &spec, oh, ow, &mut col);
                    &col
                };
                let wg = &ks[gi * og * ckk..(gi + 1) * og * ckk];
                let yg = &mut out[(ni * c_out + gi * og) * plane..(ni * c_out + (gi + 1) * og) * plane];
                T::gemm(og, ckk, plane, T::ONE, wg, cols, T::ZERO, yg);
            }
        }
        if let Some(b) = bias {
            let bs = self.data(b);
            for chunk in out.chunks_mut(plane).enumerate() {
                let bo = bs[chunk.0 % c_out];
                chunk.1.iter_mut().for_each(|v| *v += bo);
            }
        }
        let out = Tensor::new(&[n, c_out, oh, ow], out)?;
        let inputs: Vec<Var> = [Some(x), Some(kernel), bias].into_iter().flatten().collect();
        Ok(self.record(
            out,
            &inputs,
            Box::new(move |gy, vals, sink| {
                let xs = vals[x.0].data();
                let ks = vals[kernel.0].data();
                if let Some(b) = bias {
                    if let Some(gb) = sink.buf(b) {
                        for (idx, chunk) in gy.chunks(plane).enumerate() {
                            gb[idx % c_out] += chunk.iter().copied().sum();
                        }
                    }
                }
                let want_x = sink.wants(x);
                let want_k = sink.wants(kernel);
                let mut col = vec![T::ZERO; ckk * plane];
                let mut dcol = vec![T::ZERO; ckk * plane];
                for ni in 0..n {
                    for gi in 0..g {
                        let gyg = &gy[(ni * c_out + gi * og) * plane..(ni * c_out + (gi + 1) * og) * plane];
                        if want_k {
                            let xg = &xs[(ni * c + gi * cg) * h * w..(ni * c + (gi + 1) * cg) * h * w];
                            let cols: &[T] = if pointwise {
                                xg
                            } else {
                                im2col(xg, cg, h, w, &spec, oh, ow, &mut col);
                                &col
                            };
                            let gk = sink.buf(kernel).unwrap();
                            let gkg = &mut gk[gi * og * ckk..(gi + 1) * og * ckk];
                            T::gemm_bt(og, plane, ckk, T::ONE, gyg, cols, T::ONE, gkg);
                        }
                        if want_x {
                            let wg = &ks[gi * og * ckk..(gi + 1) * og * ckk];
                            let gx = sink.buf(x).unwrap();
                            let gxg = &mut gx[(ni * c + gi * cg) * h * w..(ni * c + (gi + 1) * cg) * h * w];
                            if pointwise {
                                T::gemm_at(ckk, og, plane, T::ONE, wg, gyg, T::ONE, gxg);
                            } else {
                                T::gemm_at(ckk, og, plane, T::ONE, wg, gyg, T::ZERO, &mut dcol);
                                col2im(&dcol, cg, h, w, &spec, oh, ow, gxg);
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Receptive-field patch extraction: `(N, C, H, W) -> (N, C, k², H', W')`.
    pub fn unfold(&mut self, x: Var, spec: ConvSpec) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let (oh, ow) = spec.output_hw(h, w)?;
        let kk = spec.k * spec.k;
        let per = c * kk * oh * ow;
        let xs = self.data(x);
        let mut out = vec![T::ZERO; n * per];
        for ni in 0..n {
            im2col(
                &xs[ni * c * h * w..(ni + 1) * c * h * w],
                c,
                h,
                w,
                &spec,
                oh,
                ow,
                &mut out[ni * per..(ni + 1) * per],
            );
        }
        let out = Tensor::new(&[n, c, kk, oh, ow], out)?;
        Ok(self.record(
            out,
            &[x],
            Box::new(move |gy, _vals, sink| {
                if let Some(gx) = sink.buf(x) {
                    for ni in 0..n {
                        col2im(
                            &gy[ni * per..(ni + 1) * per],
                            c,
                            h,
                            w,
                            &spec,
                            oh,
                            ow,
                            &mut gx[ni * c * h * w..(ni + 1) * c * h * w],
                        );
                    }
                }
            }),
        ))
    }

    /// Contracts receptive-field patches `(N, C, k², H', W')` against a kernel
    /// `(C_out, C, k, k)`: `y[n,o,p,q] = bias[o] + Σ K[o,c,i,j]·patches[n,c,i·k+j,p,q]`.
    pub fn contract_patches(&mut self, patches: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let pe = self.extents(patches).to_vec();
        let [n, c, kk, oh, ow] = pe[..] else {
            return Err(Error::shape(format!("patches must be 5-D, got {pe:?}")));
        };
        let (c_out, kc, kh, kw) = self.value(kernel).nchw()?;
        if kc != c || kh * kw != kk || kh != kw {
            return Err(Error::shape(format!("kernel {:?} does not match patches {pe:?}", self.extents(kernel))));
        }
        check_bias(self, bias, c_out)?;
        let plane = oh * ow;
        let ckk = c * kk;
        let ps = self.data(patches);
        let ks = self.data(kernel);
        let mut out = vec![T::ZERO; n * c_out * plane];
        for ni in 0..n {
            T::gemm(
                c_out,
                ckk,
                plane,
                T::ONE,
                ks,
                &ps[ni * ckk * plane..(ni + 1) * ckk * plane],
                T::ZERO,
                &mut out[ni * c_out * plane..(ni + 1) * c_out * plane],
            );
        }
        if let Some(b) = bias {
            let bs = self.data(b);
            for (idx, chunk) in out.chunks_mut(plane).enumerate() {
                let bo = bs[idx % c_out];
                chunk.iter_mut().for_each(|v| *v += bo);
            }
        }
        let out = Tensor::new(&[n, c_out, oh, ow], out)?;
        let inputs: Vec<Var> = [Some(patches), Some(kernel), bias].into_iter().flatten().collect();
        Ok(self.record(
            out,
            &inputs,
            Box::new(move |gy, vals, sink| {
                let ps = vals[patches.0].data();
                let ks = vals[kernel.0].data();
                if let Some(b) = bias {
                    if let Some(gb) = sink.buf(b) {
                        for (idx, chunk) in gy.chunks(plane).enumerate() {
                            gb[idx % c_out] += chunk.iter().copied().sum();
                        }
                    }
                }
                for ni in 0..n {
                    let gyn = &gy[ni * c_out * plane..(ni + 1) * c_out * plane];
                    if let Some(gk) = sink.buf(kernel) {
                        T::gemm_bt(c_out, plane, ckk, T::ONE, gyn, &ps[ni * ckk * plane..(ni + 1) * ckk * plane], T::ONE, gk);
                    }
                    if let Some(gp) = sink.buf(patches) {
                        T::gemm_at(ckk, c_out, plane, T::ONE, ks, gyn, T::ONE, &mut gp[ni * ckk * plane..(ni + 1) * ckk * plane]);
                    }
                }
            }),
        ))
    }
}
