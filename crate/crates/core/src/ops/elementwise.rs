use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{strides_of, Scalar, Tensor};

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

/// Output extents of a singleton-axis broadcast between equal-rank shapes.
fn broadcast_extents(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("rank mismatch in broadcast: {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

fn broadcast_strides(ext: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides_of(ext);
    ext.iter().zip(out).zip(s).map(|((&e, &o), s)| if e == 1 && o != 1 { 0 } else { s }).collect()
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..outer {
        for j in 0..last {
            f(o * last + j, oa + j * la, ob + j * lb);
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl<T: Scalar> Tape<T> {
    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var {
        let xt = self.value(x);
        let out = Tensor::new(xt.extents(), xt.data().iter().map(|&v| f(v)).collect()).unwrap();
        let out_idx = self.len();
        self.record(
            out,
            &[x],
            Box::new(move |gy, vals, sink| {
                let xs = vals[x.0].data();
                let ys = vals[out_idx].data();
                if let Some(gx) = sink.buf(x) {
                    for i in 0..gx.len() {
                        gx[i] += gy[i] * df(xs[i], ys[i]);
                    }
                }
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (T::ONE - y))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::ZERO { v } else { T::ZERO }, |v, _| if v > T::ZERO { T::ONE } else { T::ZERO })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v * sigmoid(v),
            |v, _| {
                let s = sigmoid(v);
                s * (T::ONE + v * (T::ONE - s))
            },
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(x, move |v| v * s, move |_, _| s)
    }

    fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        let ea = self.extents(a).to_vec();
        let eb = self.extents(b).to_vec();
        let out_ext = broadcast_extents(&ea, &eb)?;
        let sa = broadcast_strides(&ea, &out_ext);
        let sb = broadcast_strides(&eb, &out_ext);
        let numel: usize = out_ext.iter().product();
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![T::ZERO; numel];
        let apply = |x: T, y: T| match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        if ea == eb {
            for ((o, &x), &y) in out.iter_mut().zip(da).zip(db) {
                *o = apply(x, y);
            }
        } else {
            for_each_broadcast(&out_ext, &sa, &sb, |o, ia, ib| out[o] = apply(da[ia], db[ib]));
        }
        let out = Tensor::new(&out_ext, out)?;
        Ok(self.record(
            out,
            &[a, b],
            Box::new(move |gy, vals, sink| {
                let (da, db) = (vals[a.0].data(), vals[b.0].data());
                let (wa, wb) = (sink.wants(a), sink.wants(b));
                let mut ga = if wa { vec![T::ZERO; da.len()] } else { Vec::new() };
                let mut gb = if wb { vec![T::ZERO; db.len()] } else { Vec::new() };
                for_each_broadcast(&out_ext, &sa, &sb, |o, ia, ib| {
                    let g = gy[o];
                    let (dga, dgb) = match op {
                        Binary::Add => (g, g),
                        Binary::Sub => (g, -g),
                        Binary::Mul => (g * db[ib], g * da[ia]),
                    };
                    if wa {
                        ga[ia] += dga;
                    }
                    if wb {
                        gb[ib] += dgb;
                    }
                });
                if wa {
                    sink.add(a, &ga);
                }
                if wb {
                    sink.add(b, &gb);
                }
            }),
        ))
    }

    /// Elementwise sum; axes of extent 1 in either operand are broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    /// Elementwise product; axes of extent 1 in either operand are broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }
}
