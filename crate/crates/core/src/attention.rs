//! Z-pool, three-branch triplet attention, and the SE / CBAM / GC baselines.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamInit};
use crate::tape::{Tape, Var};
use crate::tensor::{ConvSpec, Scalar, Tensor};

/// 2-in, 1-out `k×k` convolution producing one attention gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateConv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl GateConv {
    fn init(init: &mut ParamInit, prefix: &str, k: usize) -> Result<Self> {
        Ok(GateConv {
            kernel: init.kernel(format!("{prefix}.kernel"), &[1, 2, k, k])?,
            bias: init.zeros(format!("{prefix}.bias"), &[1])?,
        })
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, pooled: Var, k: usize) -> Result<Var> {
        let logits = tape.conv2d(pooled, self.kernel.var(), Some(self.bias.var()), ConvSpec::same(k))?;
        Ok(tape.sigmoid(logits))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletAttentionParams {
    pub branch_cw: GateConv,
    pub branch_ch: GateConv,
    pub branch_hw: GateConv,
    pub k: usize,
}

impl TripletAttentionParams {
    pub fn init(init: &mut ParamInit, prefix: &str, k: usize) -> Result<Self> {
        check_odd(k)?;
        Ok(TripletAttentionParams {
            branch_cw: GateConv::init(init, &format!("{prefix}.cw"), k)?,
            branch_ch: GateConv::init(init, &format!("{prefix}.ch"), k)?,
            branch_hw: GateConv::init(init, &format!("{prefix}.hw"), k)?,
            k,
        })
    }

    /// Learnable scalars added by one triplet attention module.
    pub fn param_count(k: usize) -> usize {
        3 * (2 * k * k + 1)
    }
}

fn check_odd(k: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(Error::InvalidSpec(format!("attention kernel size {k} must be odd to preserve spatial size")));
    }
    Ok(())
}

/// Max and mean over `axis`, stacked (max first) along that axis.
pub fn z_pool<T: Scalar>(tape: &mut Tape<T>, x: Var, axis: usize) -> Result<Var> {
    if axis >= tape.extents(x).len() {
        return Err(Error::shape(format!("z_pool axis {axis} out of range for {:?}", tape.extents(x))));
    }
    let max = tape.max_axis(x, axis)?;
    let mean = tape.mean_axis(x, axis)?;
    tape.concat(&[max, mean], axis)
}

/// One rotated branch: permute, gate the permuted tensor, rotate back.
fn rotated_branch<T: Scalar>(tape: &mut Tape<T>, x: Var, order: &[usize; 4], gate: &GateConv, k: usize) -> Result<Var> {
    let rotated = tape.permute(x, order)?;
    let pooled = z_pool(tape, rotated, 1)?;
    let g = gate.apply(tape, pooled, k)?;
    let gated = tape.mul(rotated, g)?;
    // every order used here is its own inverse
    tape.permute(gated, order)
}

/// Triplet attention: the mean of the C–W, C–H and H–W gated branches.
pub fn triplet_attention<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &TripletAttentionParams) -> Result<Var> {
    tape.value(x).nchw()?;
    check_odd(p.k)?;
    let y_cw = rotated_branch(tape, x, &[0, 2, 1, 3], &p.branch_cw, p.k)?;
    let y_ch = rotated_branch(tape, x, &[0, 3, 2, 1], &p.branch_ch, p.k)?;
    let pooled = z_pool(tape, x, 1)?;
    let g = p.branch_hw.apply(tape, pooled, p.k)?;
    let y_hw = tape.mul(x, g)?;
    tape.average(&[y_cw, y_ch, y_hw])
}

fn check_ratio(c: usize, r: usize) -> Result<usize> {
    if r == 0 || !c.is_multiple_of(r) || c / r == 0 {
        return Err(Error::Config(format!("reduction ratio {r} incompatible with {c} channels")));
    }
    Ok(c / r)
}

/// 1×1 convolution with bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pointwise {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Pointwise {
    pub fn init(init: &mut ParamInit, prefix: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Pointwise {
            kernel: init.kernel(format!("{prefix}.kernel"), &[c_out, c_in, 1, 1])?,
            bias: init.zeros(format!("{prefix}.bias"), &[c_out])?,
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.conv2d(x, self.kernel.var(), Some(self.bias.var()), ConvSpec::new(1, 1, 0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SEParams {
    pub reduce: Pointwise,
    pub expand: Pointwise,
    pub r: usize,
}

impl SEParams {
    pub fn init(init: &mut ParamInit, prefix: &str, c: usize, r: usize) -> Result<Self> {
        let hidden = check_ratio(c, r)?;
        Ok(SEParams {
            reduce: Pointwise::init(init, &format!("{prefix}.reduce"), c, hidden)?,
            expand: Pointwise::init(init, &format!("{prefix}.expand"), hidden, c)?,
            r,
        })
    }
}

pub fn se_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &SEParams) -> Result<Var> {
    let s = tape.global_avg_pool(x)?;
    let s = p.reduce.apply(tape, s)?;
    let s = tape.relu(s);
    let s = p.expand.apply(tape, s)?;
    let s = tape.sigmoid(s);
    tape.mul(x, s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CBAMParams {
    pub reduce: Pointwise,
    pub expand: Pointwise,
    pub spatial: GateConv,
    pub r: usize,
}

impl CBAMParams {
    pub const SPATIAL_K: usize = 7;

    pub fn init(init: &mut ParamInit, prefix: &str, c: usize, r: usize) -> Result<Self> {
        let hidden = check_ratio(c, r)?;
        Ok(CBAMParams {
            reduce: Pointwise::init(init, &format!("{prefix}.reduce"), c, hidden)?,
            expand: Pointwise::init(init, &format!("{prefix}.expand"), hidden, c)?,
            spatial: GateConv::init(init, &format!("{prefix}.spatial"), Self::SPATIAL_K)?,
            r,
        })
    }
}

pub fn cbam_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &CBAMParams) -> Result<Var> {
    let mlp = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
        let h = p.reduce.apply(tape, v)?;
        let h = tape.relu(h);
        p.expand.apply(tape, h)
    };
    let avg = tape.global_avg_pool(x)?;
    let max = tape.global_max_pool(x)?;
    let a = mlp(tape, avg)?;
    let m = mlp(tape, max)?;
    let logits = tape.add(a, m)?;
    let channel_gate = tape.sigmoid(logits);
    let refined = tape.mul(x, channel_gate)?;
    let maps = z_pool(tape, refined, 1)?;
    let spatial_gate = p.spatial.apply(tape, maps, CBAMParams::SPATIAL_K)?;
    tape.mul(refined, spatial_gate)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GCParams {
    pub context: ParamId,
    pub reduce: Pointwise,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub expand: Pointwise,
    pub r: usize,
}

impl GCParams {
    pub const LN_EPS: f64 = 1e-5;

    pub fn init(init: &mut ParamInit, prefix: &str, c: usize, r: usize) -> Result<Self> {
        let hidden = check_ratio(c, r)?;
        Ok(GCParams {
            context: init.kernel(format!("{prefix}.context"), &[1, c, 1, 1])?,
            reduce: Pointwise::init(init, &format!("{prefix}.reduce"), c, hidden)?,
            ln_gain: init.ones(format!("{prefix}.ln_gain"), &[hidden])?,
            ln_bias: init.zeros(format!("{prefix}.ln_bias"), &[hidden])?,
            expand: Pointwise::init(init, &format!("{prefix}.expand"), hidden, c)?,
            r,
        })
    }
}

/// Softmax attention over the flattened spatial positions, shaped `(N, 1, H, W)`.
pub fn gc_attention<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &GCParams) -> Result<Var> {
    let (n, _, h, w) = tape.value(x).nchw()?;
    let logits = tape.conv2d(x, p.context.var(), None, ConvSpec::new(1, 1, 0))?;
    let flat = tape.reshape(logits, &[n, 1, h * w])?;
    let attn = tape.softmax(flat, 2)?;
    tape.reshape(attn, &[n, 1, h, w])
}

pub fn gc_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &GCParams) -> Result<Var> {
    let (n, c, h, w) = tape.value(x).nchw()?;
    let attn = gc_attention(tape, x, p)?;
    let weighted = tape.mul(x, attn)?;
    let weighted = tape.reshape(weighted, &[n, c, h * w])?;
    let ctx = tape.sum_axis(weighted, 2)?;
    let ctx = tape.reshape(ctx, &[n, c, 1, 1])?;
    let t = p.reduce.apply(tape, ctx)?;
    let t = tape.layer_norm(t, p.ln_gain.var(), p.ln_bias.var(), 1, GCParams::LN_EPS)?;
    let t = tape.relu(t);
    let t = p.expand.apply(tape, t)?;
    tape.add(x, t)
}

/// Swaps the spatial axes of a `(O, I, k, k)` kernel.
pub fn transpose_kernel<T: Scalar>(k: &Tensor<T>) -> Tensor<T> {
    let (o, i, h, w) = k.nchw().expect("4-D kernel");
    let mut out = Tensor::zeros(&[o, i, w, h]);
    for a in 0..o {
        for b in 0..i {
            for y in 0..h {
                for x in 0..w {
                    out.set(&[a, b, x, y], k.at(&[a, b, y, x]));
                }
            }
        }
    }
    out
}
