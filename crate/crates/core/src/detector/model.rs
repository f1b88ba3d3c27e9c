use crate::attention::{Pointwise, TripletAttentionParams};
use crate::blocks::{attach_triplet, c2f, c2f_rfaconv, conv_block, sppf, BottleneckKind, C2fParams, ConvBlockParams, SppfParams};
use crate::error::{Error, Result};
use crate::params::{ParamInit, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Feature strides of the four pyramid levels P2..P5.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Square input side; a multiple of 32.
    pub img_size: usize,
    /// Stem width C₀. Stage widths are 2C₀, 4C₀, 8C₀, 16C₀.
    pub base_width: usize,
    /// Bottleneck count of each backbone stage.
    pub depths: [usize; 4],
    pub use_rfaconv: bool,
    pub use_triplet: bool,
    /// Which backbone stages (P2..P5) receive triplet attention when enabled.
    pub triplet_stages: [bool; 4],
    pub use_p2: bool,
    pub num_classes: usize,
    pub triplet_k: usize,
    pub share_attention_across_channels: bool,
    pub rfa_single_conv: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            img_size: 64,
            base_width: 16,
            depths: [1; 4],
            use_rfaconv: false,
            use_triplet: false,
            triplet_stages: [true; 4],
            use_p2: false,
            num_classes: 3,
            triplet_k: 7,
            share_attention_across_channels: false,
            rfa_single_conv: false,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.img_size < 32 || !self.img_size.is_multiple_of(32) {
            return bad(format!("img_size {} must be a positive multiple of 32", self.img_size));
        }
        if self.base_width == 0 {
            return bad("base_width must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.depths.contains(&0) {
            return bad(format!("stage depths {:?} must be positive", self.depths));
        }
        if self.triplet_k.is_multiple_of(2) {
            return bad(format!("triplet_k {} must be odd", self.triplet_k));
        }
        Ok(())
    }

    /// Strides of the head levels, finest first.
    pub fn head_strides(&self) -> &'static [usize] {
        if self.use_p2 {
            &STRIDES
        } else {
            &STRIDES[1..]
        }
    }

    fn bottleneck_kind(&self) -> BottleneckKind {
        if self.use_rfaconv {
            BottleneckKind::Rfa {
                share_attention_across_channels: self.share_attention_across_channels,
                single_conv: self.rfa_single_conv,
            }
        } else {
            BottleneckKind::Standard
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage {
    /// Stride-2 3×3 downsampling block.
    pub down: ConvBlockParams,
    pub c2f: C2fParams,
    pub triplet: Option<TripletAttentionParams>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadParams {
    pub stride: usize,
    pub cv1: ConvBlockParams,
    pub cv2: ConvBlockParams,
    pub box_proj: Pointwise,
    pub obj_proj: Pointwise,
    pub cls_proj: Pointwise,
}

#[derive(Clone, Debug)]
pub struct DetectorModel {
    pub config: ModelConfig,
    pub stem: ConvBlockParams,
    /// Stages producing P2, P3, P4, P5.
    pub stages: Vec<Stage>,
    pub sppf: SppfParams,
    /// Top-down fusion blocks producing N4, N3 and (with P2) N2.
    pub neck: Vec<C2fParams>,
    /// One head per level, finest first.
    pub heads: Vec<HeadParams>,
    pub params: ParamStore<f32>,
}

pub fn build_model(cfg: &ModelConfig) -> Result<DetectorModel> {
    cfg.validate()?;
    let mut init = ParamInit::new(cfg.seed);
    let c0 = cfg.base_width;
    let widths: [usize; 4] = std::array::from_fn(|i| c0 << (i + 1));
    let kind = cfg.bottleneck_kind();

    let stem = ConvBlockParams::init(&mut init, "stem", 3, c0, 3, 2)?;
    let mut stages = Vec::with_capacity(4);
    let mut c_prev = c0;
    for (i, &w) in widths.iter().enumerate() {
        let p = format!("stage{}", i + 2);
        let down = ConvBlockParams::init(&mut init, &format!("{p}.down"), c_prev, w, 3, 2)?;
        let c2f = C2fParams::init(&mut init, &format!("{p}.c2f"), w, w, cfg.depths[i], kind)?;
        let triplet = if cfg.use_triplet && cfg.triplet_stages[i] {
            Some(TripletAttentionParams::init(&mut init, &format!("{p}.triplet"), cfg.triplet_k)?)
        } else {
            None
        };
        stages.push(Stage { down, c2f, triplet });
        c_prev = w;
    }
    let sppf = SppfParams::init(&mut init, "sppf", widths[3], widths[3])?;

    // Top-down: each fusion block sees upsample(coarser) ++ lateral feature.
    let finest = if cfg.use_p2 { 0 } else { 1 };
    let mut neck = Vec::new();
    for lvl in (finest..3).rev() {
        let c_in = widths[lvl + 1] + widths[lvl];
        neck.push(C2fParams::init(&mut init, &format!("neck.n{}", lvl + 2), c_in, widths[lvl], 1, kind)?);
    }

    let mut heads = Vec::new();
    for lvl in finest..4 {
        let p = format!("head.p{}", lvl + 2);
        let hw = widths[lvl].min(4 * c0);
        heads.push(HeadParams {
            stride: STRIDES[lvl],
            cv1: ConvBlockParams::init(&mut init, &format!("{p}.cv1"), widths[lvl], hw, 3, 1)?,
            cv2: ConvBlockParams::init(&mut init, &format!("{p}.cv2"), hw, hw, 3, 1)?,
            box_proj: Pointwise::init(&mut init, &format!("{p}.box"), hw, 4)?,
            obj_proj: Pointwise::init(&mut init, &format!("{p}.obj"), hw, 1)?,
            cls_proj: Pointwise::init(&mut init, &format!("{p}.cls"), hw, cfg.num_classes)?,
        });
    }

    Ok(DetectorModel {
        config: cfg.clone(),
        stem,
        stages,
        sppf,
        neck,
        heads,
        params: init.finish(),
    })
}

impl DetectorModel {
    /// Fresh tape whose first vars are this model's parameters.
    pub fn tape<T: Scalar>(&self, requires_grad: bool) -> Tape<T> {
        Tape::with_params(&self.params.cast::<T>(), requires_grad)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }
}

/// Head output vars for one level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelVars {
    pub stride: usize,
    /// `(N, 4, G, G)` raw box parameters.
    pub boxes: Var,
    /// `(N, 1, G, G)` objectness logits.
    pub obj: Var,
    /// `(N, num_classes, G, G)` class logits.
    pub cls: Var,
}

fn fuse<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &C2fParams) -> Result<Var> {
    if p.uses_rfa() {
        c2f_rfaconv(tape, x, p)
    } else {
        c2f(tape, x, p)
    }
}

/// Runs the detector on `images` `(N, 3, S, S)`. The tape must come from
/// [`DetectorModel::tape`] (or otherwise hold the parameters as its first vars).
pub fn forward<T: Scalar>(model: &DetectorModel, tape: &mut Tape<T>, images: Var) -> Result<Vec<LevelVars>> {
    let cfg = &model.config;
    let (_, c, h, w) = tape.value(images).nchw()?;
    if c != 3 || h != cfg.img_size || w != cfg.img_size {
        return Err(Error::shape(format!(
            "detector expects (N, 3, {s}, {s}) images, got (_, {c}, {h}, {w})",
            s = cfg.img_size
        )));
    }
    if tape.len() < model.params.len() {
        return Err(Error::shape("tape does not hold this model's parameters"));
    }

    let mut x = conv_block(tape, images, &model.stem)?;
    let mut feats = Vec::with_capacity(4);
    for stage in &model.stages {
        x = conv_block(tape, x, &stage.down)?;
        x = fuse(tape, x, &stage.c2f)?;
        if let Some(t) = &stage.triplet {
            x = attach_triplet(tape, x, t, true)?;
        }
        feats.push(x);
    }

    let top = sppf(tape, feats[3], &model.sppf)?;
    let mut head_inputs = vec![top];
    let mut coarse = top;
    for (p, lateral) in model.neck.iter().zip(feats[..3].iter().rev()) {
        let up = tape.upsample_nearest2x(coarse)?;
        let cat = tape.concat(&[up, *lateral], 1)?;
        coarse = fuse(tape, cat, p)?;
        head_inputs.push(coarse);
    }
    head_inputs.reverse();

    model
        .heads
        .iter()
        .zip(head_inputs)
        .map(|(hp, feat)| {
            let y = conv_block(tape, feat, &hp.cv1)?;
            let y = conv_block(tape, y, &hp.cv2)?;
            Ok(LevelVars {
                stride: hp.stride,
                boxes: hp.box_proj.apply(tape, y)?,
                obj: hp.obj_proj.apply(tape, y)?,
                cls: hp.cls_proj.apply(tape, y)?,
            })
        })
        .collect()
}
