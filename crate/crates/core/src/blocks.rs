//! Composite blocks: conv + affine + SiLU, bottleneck, C2f (plain and with
//! receptive-field attention convolutions), SPPF, and stage-output attention.

use crate::attention::{triplet_attention, TripletAttentionParams};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamInit};
use crate::rfaconv::{rfa_conv, RfaConvConfig, RfaConvParams};
use crate::tape::{Tape, Var};
use crate::tensor::{ConvSpec, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// Bias-free convolution with a shared kernel.
    Standard { kernel: ParamId, spec: ConvSpec },
    /// Receptive-field attention convolution (bias-free).
    Rfa(RfaConvParams),
}

/// Convolution followed by a per-channel affine (in place of batch norm) and
/// an activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlockParams {
    pub conv: ConvKind,
    /// `(1, C_out, 1, 1)`, initialized to 1.
    pub gamma: ParamId,
    /// `(1, C_out, 1, 1)`, initialized to 0.
    pub beta: ParamId,
    pub act: Activation,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvBlockParams {
    pub fn init(init: &mut ParamInit, prefix: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let kernel = init.kernel(format!("{prefix}.kernel"), &[c_out, c_in, k, k])?;
        let spec = ConvSpec::new(k, stride, k / 2);
        Self::finish(init, prefix, ConvKind::Standard { kernel, spec }, c_in, c_out)
    }

    pub fn init_rfa(init: &mut ParamInit, prefix: &str, c_in: usize, c_out: usize, k: usize, share: bool) -> Result<Self> {
        let rfa = RfaConvParams::init(
            init,
            &format!("{prefix}.rfa"),
            RfaConvConfig {
                c_in,
                c_out,
                k,
                stride: 1,
                bias: false,
                share_attention_across_channels: share,
            },
        )?;
        Self::finish(init, prefix, ConvKind::Rfa(rfa), c_in, c_out)
    }

    fn finish(init: &mut ParamInit, prefix: &str, conv: ConvKind, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(ConvBlockParams {
            conv,
            gamma: init.ones(format!("{prefix}.gamma"), &[1, c_out, 1, 1])?,
            beta: init.zeros(format!("{prefix}.beta"), &[1, c_out, 1, 1])?,
            act: Activation::Silu,
            c_in,
            c_out,
        })
    }

    pub fn is_rfa(&self) -> bool {
        matches!(self.conv, ConvKind::Rfa(_))
    }
}

pub fn conv_block<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &ConvBlockParams) -> Result<Var> {
    let y = match &p.conv {
        ConvKind::Standard { kernel, spec } => tape.conv2d(x, kernel.var(), None, *spec)?,
        ConvKind::Rfa(rfa) => rfa_conv(tape, x, rfa)?,
    };
    let y = tape.mul(y, p.gamma.var())?;
    let y = tape.add(y, p.beta.var())?;
    Ok(match p.act {
        Activation::Silu => tape.silu(y),
        Activation::Identity => y,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BottleneckParams {
    pub cv_a: ConvBlockParams,
    pub cv_b: ConvBlockParams,
    pub residual: bool,
}

/// How the 3×3 convolutions inside C2f bottlenecks are built.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BottleneckKind {
    Standard,
    Rfa {
        share_attention_across_channels: bool,
        /// Replace only the second 3×3 convolution.
        single_conv: bool,
    },
}

impl BottleneckParams {
    pub fn init(init: &mut ParamInit, prefix: &str, c: usize, kind: BottleneckKind) -> Result<Self> {
        let (cv_a, cv_b) = match kind {
            BottleneckKind::Standard => (
                ConvBlockParams::init(init, &format!("{prefix}.cv_a"), c, c, 3, 1)?,
                ConvBlockParams::init(init, &format!("{prefix}.cv_b"), c, c, 3, 1)?,
            ),
            BottleneckKind::Rfa {
                share_attention_across_channels: share,
                single_conv,
            } => {
                let cv_a = if single_conv {
                    ConvBlockParams::init(init, &format!("{prefix}.cv_a"), c, c, 3, 1)?
                } else {
                    ConvBlockParams::init_rfa(init, &format!("{prefix}.cv_a"), c, c, 3, share)?
                };
                (cv_a, ConvBlockParams::init_rfa(init, &format!("{prefix}.cv_b"), c, c, 3, share)?)
            }
        };
        Ok(BottleneckParams {
            cv_a,
            cv_b,
            residual: cv_a.c_in == cv_b.c_out,
        })
    }
}

pub fn bottleneck<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &BottleneckParams) -> Result<Var> {
    let y = conv_block(tape, x, &p.cv_a)?;
    let y = conv_block(tape, y, &p.cv_b)?;
    if p.residual {
        tape.add(x, y)
    } else {
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct C2fParams {
    pub cv1: ConvBlockParams,
    pub bottlenecks: Vec<BottleneckParams>,
    pub cv2: ConvBlockParams,
    pub hidden: usize,
}

impl C2fParams {
    pub fn init(init: &mut ParamInit, prefix: &str, c_in: usize, c_out: usize, n: usize, kind: BottleneckKind) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config(format!("{prefix}: C2f needs at least one bottleneck")));
        }
        if !c_out.is_multiple_of(2) {
            return Err(Error::Config(format!("{prefix}: C2f output width {c_out} cannot be split into two halves")));
        }
        let hidden = c_out / 2;
        let cv1 = ConvBlockParams::init(init, &format!("{prefix}.cv1"), c_in, 2 * hidden, 1, 1)?;
        let bottlenecks = (0..n)
            .map(|i| BottleneckParams::init(init, &format!("{prefix}.m{i}"), hidden, kind))
            .collect::<Result<Vec<_>>>()?;
        let cv2 = ConvBlockParams::init(init, &format!("{prefix}.cv2"), (2 + n) * hidden, c_out, 1, 1)?;
        Ok(C2fParams { cv1, bottlenecks, cv2, hidden })
    }

    pub fn uses_rfa(&self) -> bool {
        self.bottlenecks.iter().any(|b| b.cv_b.is_rfa())
    }
}

pub fn c2f<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &C2fParams) -> Result<Var> {
    let u = conv_block(tape, x, &p.cv1)?;
    let halves = tape.split(u, &[p.hidden, p.hidden], 1)?;
    let mut chunks = halves.clone();
    let mut b = halves[1];
    for bn in &p.bottlenecks {
        b = bottleneck(tape, b, bn)?;
        chunks.push(b);
    }
    let cat = tape.concat(&chunks, 1)?;
    conv_block(tape, cat, &p.cv2)
}

/// C2f whose bottleneck convolutions are receptive-field attention convolutions.
pub fn c2f_rfaconv<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &C2fParams) -> Result<Var> {
    if !p.uses_rfa() {
        return Err(Error::Config("c2f_rfaconv called with standard bottlenecks".into()));
    }
    c2f(tape, x, p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SppfParams {
    pub cv1: ConvBlockParams,
    pub cv2: ConvBlockParams,
}

impl SppfParams {
    pub const POOL_K: usize = 5;

    pub fn init(init: &mut ParamInit, prefix: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let hidden = (c_in / 2).max(1);
        Ok(SppfParams {
            cv1: ConvBlockParams::init(init, &format!("{prefix}.cv1"), c_in, hidden, 1, 1)?,
            cv2: ConvBlockParams::init(init, &format!("{prefix}.cv2"), 4 * hidden, c_out, 1, 1)?,
        })
    }
}

pub fn sppf<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &SppfParams) -> Result<Var> {
    let pool = ConvSpec::same(SppfParams::POOL_K);
    let x1 = conv_block(tape, x, &p.cv1)?;
    let m1 = tape.maxpool2d(x1, pool)?;
    let m2 = tape.maxpool2d(m1, pool)?;
    let m3 = tape.maxpool2d(m2, pool)?;
    let cat = tape.concat(&[x1, m1, m2, m3], 1)?;
    conv_block(tape, cat, &p.cv2)
}

/// Applies triplet attention to a stage output when enabled.
pub fn attach_triplet<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &TripletAttentionParams, enabled: bool) -> Result<Var> {
    if enabled {
        triplet_attention(tape, x, p)
    } else {
        Ok(x)
    }
}
