use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{ConvSpec, Scalar, Tensor};

fn check_pool_spec(spec: &ConvSpec) -> Result<()> {
    if spec.groups != 1 {
        return Err(Error::InvalidSpec("pooling does not take groups".into()));
    }
    if spec.padding > spec.k / 2 {
        return Err(Error::InvalidSpec(format!("pool padding {} exceeds half the window {}", spec.padding, spec.k)));
    }
    Ok(())
}

#[derive(Clone, Copy)]
struct AvgWalk {
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: isize,
    s: isize,
    pad: isize,
}

impl AvgWalk {
    /// Visits every in-bounds `(output, input)` index pair.
    fn visit(&self, mut f: impl FnMut(usize, usize)) {
        let (h, w) = (self.h as isize, self.w as isize);
        for plane in 0..self.planes {
            for p in 0..self.oh {
                for q in 0..self.ow {
                    let o = (plane * self.oh + p) * self.ow + q;
                    for i in 0..self.k {
                        let hi = p as isize * self.s + i - self.pad;
                        if hi < 0 || hi >= h {
                            continue;
                        }
                        for j in 0..self.k {
                            let wi = q as isize * self.s + j - self.pad;
                            if wi >= 0 && wi < w {
                                f(o, plane * self.h * self.w + (hi * w + wi) as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Windowed max; padded cells never win. Ties go to the first element in
    /// row-major window order.
    pub fn maxpool2d(&mut self, x: Var, spec: ConvSpec) -> Result<Var> {
        check_pool_spec(&spec)?;
        let (n, c, h, w) = self.value(x).nchw()?;
        let (oh, ow) = spec.output_hw(h, w)?;
        let xs = self.data(x);
        let mut out = vec![T::ZERO; n * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        let (s, pad) = (spec.stride as isize, spec.padding as isize);
        for plane in 0..n * c {
            let src = &xs[plane * h * w..(plane + 1) * h * w];
            for p in 0..oh {
                for q in 0..ow {
                    let mut best = T::NEG_INFINITY;
                    let mut best_at = usize::MAX;
                    for i in 0..spec.k as isize {
                        let hi = p as isize * s + i - pad;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        for j in 0..spec.k as isize {
                            let wi = q as isize * s + j - pad;
                            if wi < 0 || wi >= w as isize {
                                continue;
                            }
                            let at = hi as usize * w + wi as usize;
                            if best_at == usize::MAX || src[at] > best {
                                best = src[at];
                                best_at = at;
                            }
                        }
                    }
                    let o = (plane * oh + p) * ow + q;
                    out[o] = best;
                    arg[o] = plane * h * w + best_at;
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
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

    /// Windowed mean; padded cells count as zeros (divisor is always k²).
    pub fn avgpool2d(&mut self, x: Var, spec: ConvSpec) -> Result<Var> {
        check_pool_spec(&spec)?;
        let (n, c, h, w) = self.value(x).nchw()?;
        let (oh, ow) = spec.output_hw(h, w)?;
        let inv = T::of(1.0 / (spec.k * spec.k) as f64);
        let (s, pad) = (spec.stride as isize, spec.padding as isize);
        let walk = AvgWalk {
            planes: n * c,
            h,
            w,
            oh,
            ow,
            k: spec.k as isize,
            s,
            pad,
        };
        let xs = self.data(x);
        let mut out = vec![T::ZERO; n * c * oh * ow];
        walk.visit(|o, i| out[o] += xs[i]);
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.record(
            out,
            &[x],
            Box::new(move |gy, _vals, sink| {
                if let Some(gx) = sink.buf(x) {
                    walk.visit(|o, i| gx[i] += gy[o] * inv);
                }
            }),
        ))
    }

    /// Per-channel mean over all spatial positions: `(N, C, H, W) -> (N, C, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let flat = self.reshape(x, &[n, c, h * w])?;
        let m = self.mean_axis(flat, 2)?;
        self.reshape(m, &[n, c, 1, 1])
    }

    /// Per-channel max over all spatial positions: `(N, C, H, W) -> (N, C, 1, 1)`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let flat = self.reshape(x, &[n, c, h * w])?;
        let m = self.max_axis(flat, 2)?;
        self.reshape(m, &[n, c, 1, 1])
    }
}
