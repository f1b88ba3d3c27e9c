//! Receptive-field attention convolution.
//!
//! Each receptive field gets its own softmax-normalized weighting `A` over its
//! k² cells; the output is `Σ K · A · X` over the unfolded field, so the
//! effective kernel `A ⊙ K` differs from position to position.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamInit, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{ConvSpec, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RfaConvParams {
    /// Attention generator kernel: `(C_in·k², 1, 1, 1)` grouped per channel,
    /// or `(k², C_in, 1, 1)` when attention is shared across channels.
    pub attn_kernel: ParamId,
    pub attn_bias: ParamId,
    /// Main kernel `K`, `(C_out, C_in, k, k)`.
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub c_in: usize,
    pub c_out: usize,
    pub share_attention_across_channels: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RfaConvConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub bias: bool,
    pub share_attention_across_channels: bool,
}

impl RfaConvParams {
    pub fn init(init: &mut ParamInit, prefix: &str, cfg: RfaConvConfig) -> Result<Self> {
        let RfaConvConfig { c_in, c_out, k, stride, .. } = cfg;
        if k % 2 == 0 || k == 0 {
            return Err(Error::InvalidSpec(format!("RFAConv kernel size {k} must be odd")));
        }
        let kk = k * k;
        let (attn_ext, attn_out) = if cfg.share_attention_across_channels {
            ([kk, c_in, 1, 1], kk)
        } else {
            ([c_in * kk, 1, 1, 1], c_in * kk)
        };
        Ok(RfaConvParams {
            attn_kernel: init.kernel(format!("{prefix}.attn.kernel"), &attn_ext)?,
            attn_bias: init.zeros(format!("{prefix}.attn.bias"), &[attn_out])?,
            // Kaiming on the effective kernel A⊙K, with A ≈ 1/k² at init
            kernel: init.kernel_with_gain(format!("{prefix}.kernel"), &[c_out, c_in, k, k], kk as f64)?,
            bias: if cfg.bias {
                Some(init.zeros(format!("{prefix}.bias"), &[c_out])?)
            } else {
                None
            },
            spec: ConvSpec::new(k, stride, (k - 1) / 2),
            c_in,
            c_out,
            share_attention_across_channels: cfg.share_attention_across_channels,
        })
    }

    fn attn_spec(&self) -> ConvSpec {
        let groups = if self.share_attention_across_channels { 1 } else { self.c_in };
        ConvSpec::new(1, 1, 0).with_groups(groups)
    }
}

/// Per-field attention weights `(N, C_in, k², H', W')` (channel axis of extent
/// 1 when shared), normalized over the k² axis.
pub fn rfa_attention<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &RfaConvParams) -> Result<Var> {
    let (n, c, _, _) = tape.value(x).nchw()?;
    if c != p.c_in {
        return Err(Error::shape(format!("RFAConv expects {} input channels, got {c}", p.c_in)));
    }
    let pool = ConvSpec::new(p.spec.k, p.spec.stride, p.spec.padding);
    let pooled = tape.avgpool2d(x, pool)?;
    let logits = tape.conv2d(pooled, p.attn_kernel.var(), Some(p.attn_bias.var()), p.attn_spec())?;
    let (_, _, oh, ow) = tape.value(logits).nchw()?;
    let groups = if p.share_attention_across_channels { 1 } else { c };
    let kk = p.spec.k * p.spec.k;
    let logits = tape.reshape(logits, &[n, groups, kk, oh, ow])?;
    tape.softmax(logits, 2)
}

pub fn rfa_conv<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &RfaConvParams) -> Result<Var> {
    let attn = rfa_attention(tape, x, p)?;
    let patches = tape.unfold(x, p.spec)?;
    let weighted = tape.mul(patches, attn)?;
    tape.contract_patches(weighted, p.kernel.var(), p.bias.map(ParamId::var))
}

/// Largest deviation from 1 of any k²-slice sum of an attention map.
pub fn attention_normalization_error<T: Scalar>(attn: &Tensor<T>) -> f64 {
    let e = attn.extents();
    let (outer, kk, inner) = (e[0] * e[1], e[2], e[3] * e[4]);
    let d = attn.data();
    let mut worst = 0.0f64;
    for o in 0..outer {
        for r in 0..inner {
            let s: f64 = (0..kk).map(|i| d[(o * kk + i) * inner + r].to_f64()).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    worst
}

/// Direct loop evaluation of receptive-field attention convolution, with the
/// attention recomputed from scratch. Test oracle for [`rfa_conv`].
pub fn rfa_conv_reference(x: &Tensor<f64>, store: &ParamStore<f64>, p: &RfaConvParams) -> Result<Tensor<f64>> {
    let (n, c, h, w) = x.nchw()?;
    if c != p.c_in {
        return Err(Error::shape(format!("expected {} channels, got {c}", p.c_in)));
    }
    let ConvSpec { k, stride, padding, .. } = p.spec;
    let (oh, ow) = p.spec.output_hw(h, w)?;
    let kk = k * k;
    let at = |ni: usize, ci: usize, hi: isize, wi: isize| -> f64 {
        if hi < 0 || wi < 0 || hi >= h as isize || wi >= w as isize {
            0.0
        } else {
            x.at(&[ni, ci, hi as usize, wi as usize])
        }
    };
    let attn_k = store.get(p.attn_kernel).data();
    let attn_b = store.get(p.attn_bias).data();
    let kernel = store.get(p.kernel);
    let bias = p.bias.map(|b| store.get(b).data().to_vec());
    let mut out = Tensor::zeros(&[n, p.c_out, oh, ow]);
    for ni in 0..n {
        for pi in 0..oh {
            for qi in 0..ow {
                let row0 = (pi * stride) as isize - padding as isize;
                let col0 = (qi * stride) as isize - padding as isize;
                let pooled: Vec<f64> = (0..c)
                    .map(|ci| {
                        let mut s = 0.0;
                        for i in 0..k {
                            for j in 0..k {
                                s += at(ni, ci, row0 + i as isize, col0 + j as isize);
                            }
                        }
                        s / kk as f64
                    })
                    .collect();
                // attention[ci][cell]
                let mut attention = vec![vec![0.0; kk]; c];
                for (ci, row) in attention.iter_mut().enumerate() {
                    for (cell, a) in row.iter_mut().enumerate() {
                        *a = if p.share_attention_across_channels {
                            attn_b[cell] + (0..c).map(|cj| attn_k[cell * c + cj] * pooled[cj]).sum::<f64>()
                        } else {
                            attn_b[ci * kk + cell] + attn_k[ci * kk + cell] * pooled[ci]
                        };
                    }
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    for a in row.iter_mut() {
                        *a = (*a - m).exp() / total;
                    }
                }
                for o in 0..p.c_out {
                    let mut acc = bias.as_ref().map_or(0.0, |b| b[o]);
                    for (ci, row) in attention.iter().enumerate() {
                        for i in 0..k {
                            for j in 0..k {
                                acc += kernel.at(&[o, ci, i, j]) * row[i * k + j] * at(ni, ci, row0 + i as isize, col0 + j as isize);
                            }
                        }
                    }
                    out.set(&[ni, o, pi, qi], acc);
                }
            }
        }
    }
    Ok(out)
}
