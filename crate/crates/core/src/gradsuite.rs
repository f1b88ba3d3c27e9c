//! Registry of finite-difference checks over every differentiable op and
//! block, run at f64.

use std::time::Instant;

use crate::attention::{cbam_forward, gc_forward, se_forward, triplet_attention, z_pool, CBAMParams, GCParams, SEParams, TripletAttentionParams};
use crate::blocks::{bottleneck, c2f, c2f_rfaconv, conv_block, sppf, BottleneckKind, BottleneckParams, C2fParams, ConvBlockParams, SppfParams};
use crate::detector::{assign_targets, build_model, detection_loss, forward, LevelVars, LossWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{random_tensor, try_check_op_with, GradCheckConfig, GradReport};
use crate::metrics::{BBox, GroundTruth};
use crate::params::{ParamInit, ParamStore};
use crate::rfaconv::{rfa_attention, rfa_conv, RfaConvConfig, RfaConvParams};
use crate::rng::Rng64;
use crate::tape::{Tape, Var};
use crate::tensor::{ConvSpec, Tensor};

/// Default acceptance threshold on the maximum relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Composite entries are held to this multiple of the requested tolerance.
pub const COMPOSITE_FACTOR: f64 = 10.0;

#[derive(Clone, Copy, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub description: &'static str,
    /// Whole-network checks (the full detector) accumulate more roundoff.
    pub composite: bool,
    /// Excluded from the full run; only reachable by name.
    pub hidden: bool,
    run: fn(u64) -> Result<GradReport>,
}

impl SuiteEntry {
    pub fn tolerance(&self, tol: f64) -> f64 {
        if self.composite {
            tol * COMPOSITE_FACTOR
        } else {
            tol
        }
    }

    pub fn run(&self, seed: u64, tol: f64) -> Result<SuiteResult> {
        let start = Instant::now();
        let report = (self.run)(seed)?;
        let tolerance = self.tolerance(tol);
        Ok(SuiteResult {
            name: self.name,
            passed: report.max_rel_err < tolerance,
            report,
            tolerance,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub report: GradReport,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

const fn entry(name: &'static str, description: &'static str, run: fn(u64) -> Result<GradReport>) -> SuiteEntry {
    SuiteEntry {
        name,
        description,
        composite: false,
        hidden: false,
        run,
    }
}

static ENTRIES: &[SuiteEntry] = &[
    entry("elementwise", "sigmoid, relu, silu, exp, broadcast add/sub/mul", elementwise),
    entry("shape", "permute, concat, split, narrow, upsample", shape),
    entry("conv2d", "dense, strided and grouped convolution", conv2d),
    entry("unfold", "patch extraction and patch contraction", unfold),
    entry("pools", "max/avg pooling and global pools", pools),
    entry("softmax", "softmax along each axis", softmax),
    entry("reductions", "sum/mean/max along an axis", reductions),
    entry("layer_norm", "layer normalization with gain and bias", layer_norm),
    entry("z_pool", "max and mean concatenation along each axis", z_pool_entry),
    entry("triplet_attention", "three-branch rotated attention", triplet),
    entry("se", "squeeze-and-excitation", se),
    entry("cbam", "channel then spatial attention", cbam),
    entry("gc", "global context block", gc),
    entry("rfa_attention", "receptive-field attention weights", rfa_attention_entry),
    entry("rfa_conv", "receptive-field attention convolution (per-channel and shared)", rfa_conv_entry),
    entry("conv_block", "conv, affine, SiLU", conv_block_entry),
    entry("bottleneck", "residual bottleneck", bottleneck_entry),
    entry("c2f", "split, bottlenecks, concat, fuse", c2f_entry),
    entry("c2f_rfaconv", "C2f with RFAConv bottlenecks", c2f_rfaconv_entry),
    entry("sppf", "serial max-pool pyramid", sppf_entry),
    SuiteEntry {
        composite: true,
        ..entry(
            "detector",
            "tiny detector forward with RFAConv, triplet and P2, plus the loss through it",
            detector,
        )
    },
    entry("detection_loss", "objectness, box and class loss over head outputs", detection_loss_entry),
    SuiteEntry {
        hidden: true,
        ..entry("fixture_wrong_backward", "cube with a deliberately wrong derivative", wrong_backward)
    },
];

/// All registered entries, hidden ones included.
pub fn entries() -> &'static [SuiteEntry] {
    ENTRIES
}

pub fn find(name: &str) -> Result<&'static SuiteEntry> {
    ENTRIES.iter().find(|e| e.name == name).ok_or_else(|| {
        let known: Vec<&str> = ENTRIES.iter().filter(|e| !e.hidden).map(|e| e.name).collect();
        Error::Config(format!("unknown gradcheck module '{name}' (known: {})", known.join(", ")))
    })
}

/// Runs every visible entry, or only `module`.
pub fn run_suite(module: Option<&str>, seed: u64, tol: f64) -> Result<Vec<SuiteResult>> {
    let selected: Vec<&SuiteEntry> = match module {
        Some(name) => vec![find(name)?],
        None => ENTRIES.iter().filter(|e| !e.hidden).collect(),
    };
    selected.into_iter().map(|e| e.run(seed, tol)).collect()
}

fn merge(reports: impl IntoIterator<Item = GradReport>) -> GradReport {
    let mut out = GradReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for r in reports {
        out.coords_checked += r.coords_checked;
        if out.worst.is_none() || r.max_rel_err > out.max_rel_err {
            out.max_rel_err = r.max_rel_err;
            out.worst = r.worst;
        }
    }
    out
}

fn cfg(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    }
}

fn check(inputs: &[Tensor<f64>], seed: u64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<GradReport> {
    try_check_op_with(inputs, &cfg(seed), f)
}

/// Parameters first, then the input `x`; `f` receives the input var.
fn check_block(store: &ParamStore<f32>, x: Tensor<f64>, seed: u64, f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) -> Result<GradReport> {
    let mut inputs = store.cast::<f64>().tensors().to_vec();
    inputs.push(x);
    check(&inputs, seed, |t, v| f(t, *v.last().expect("input var")))
}

/// Moves every parameter off its initial value so biases, gains and
/// zero-initialized generators all carry gradient signal.
fn jitter(mut store: ParamStore<f32>, seed: u64) -> ParamStore<f32> {
    let mut rng = Rng64::new(seed ^ 0x6a17);
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.range(-0.3, 0.3) as f32;
        }
    }
    store
}

fn elementwise(seed: u64) -> Result<GradReport> {
    let mut rng = Rng64::new(seed);
    // keep relu inputs away from its kink
    let x: Tensor<f64> = Tensor::from_fn(&[2, 3, 4], |_| {
        let v = rng.range(0.05, 2.0);
        if rng.uniform() < 0.5 {
            -v
        } else {
            v
        }
    });
    let b = random_tensor(&mut rng, &[2, 1, 4], 1.0);
    let mut reports = Vec::new();
    let unary: [fn(&mut Tape<f64>, Var) -> Var; 4] = [Tape::sigmoid, Tape::relu, Tape::silu, Tape::exp];
    for (i, f) in unary.into_iter().enumerate() {
        reports.push(check(std::slice::from_ref(&x), seed + i as u64, |t, v| Ok(f(t, v[0])))?);
    }
    reports.push(check(&[x.clone(), b.clone()], seed + 4, |t, v| t.add(v[0], v[1]))?);
    reports.push(check(&[x.clone(), b.clone()], seed + 5, |t, v| t.sub(v[0], v[1]))?);
    reports.push(check(&[x, b], seed + 6, |t, v| t.mul(v[0], v[1]))?);
    Ok(merge(reports))
}

fn shape(seed: u64) -> Result<GradReport> {
    let mut rng = Rng64::new(seed);
    let x = random_tensor(&mut rng, &[2, 3, 2, 4], 1.0);
    let y = random_tensor(&mut rng, &[2, 2, 2, 4], 1.0);
    Ok(merge([
        check(std::slice::from_ref(&x), seed, |t, v| t.permute(v[0], &[3, 0, 2, 1]))?,
        check(&[x.clone(), y], seed + 1, |t, v| t.concat(&[v[0], v[1]], 1))?,
        check(std::slice::from_ref(&x), seed + 2, |t, v| {
            let parts = t.split(v[0], &[1, 2], 1)?;
            let a = t.scale(parts[0], 2.0);
            t.concat(&[parts[1], a], 1)
        })?,
        check(std::slice::from_ref(&x), seed + 3, |t, v| t.narrow(v[0], 3, 1, 2))?,
        check(&[x], seed + 4, |t, v| t.upsample_nearest2x(v[0]))?,
    ]))
}

fn conv2d(seed: u64) -> Result<GradReport> {
    let mut rng = Rng64::new(seed);
    let mut reports = Vec::new();
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 2, 2)] {
        let x = random_tensor(&mut rng, &[2, 3, 7, 6], 1.0);
        let w = random_tensor(&mut rng, &[4, 3, k, k], 0.5);
        let b = random_tensor(&mut rng, &[4], 0.5);
        let spec = ConvSpec::new(k, stride, pad);
        reports.push(check(&[x, w, b], seed + k as u64, |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec))?);
    }
    let x = random_tensor(&mut rng, &[2, 4, 5, 5], 1.0);
    let w = random_tensor(&mut rng, &[6, 2, 3, 3], 0.5);
    reports.push(check(&[x, w], seed + 9, |t, v| {
        t.conv2d(v[0], v[1], None, ConvSpec::new(3, 1, 1).with_groups(2))
    })?);
    Ok(merge(reports))
}

fn unfold(seed: u64) -> Result<GradReport> {
    let mut rng = Rng64::new(seed);
    let x = random_tensor(&mut rng, &[2, 3, 5, 6], 1.0);
    let spec = ConvSpec::new(3, 2, 1);
    let patches: Tensor<f64> = {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let p = tape.unfold(v, spec)?;
        tape.value(p).clone()
    };
    let k = random_tensor(&mut rng, &[4, 3, 3, 3], 0.5);
    let b = random_tensor(&mut rng, &[4], 0.5);
    Ok(merge([
        check(&[x], seed, |t, v| t.unfold(v[0], spec))?,
        check(&[patches, k, b], seed + 1, |t, v| t.contract_patches(v[0], v[1], Some(v[2])))?,
    ]))
}

fn pools(seed: u64) -> Result<GradReport> {
    let mut rng = Rng64::new(seed);
    let x = random_tensor(&mut rng, &[2, 3, 6, 5], 1.0);
    let mut reports = Vec::new();
    for spec in [ConvSpec::new(2, 2, 0), ConvSpec::same(3), ConvSpec::same(5)] {
        reports.push(check(std::slice::from_ref(&x), seed, |t, v| t.maxpool2d(v[0], spec))?);
        reports.push(check(std::slice::from_ref(&x), seed + 1, |t, v| t.avgpool2d(v[0], spec))?);
    }
    reports.push(check(std::slice::from_ref(&x), seed + 2, |t, v| t.global_max_pool(v[0]))?);
    reports.push(check(&[x], seed + 3, |t, v| t.global_avg_pool(v[0]))?);
    Ok(merge(reports))
}

fn softmax(seed: u64) -> Result<GradReport> {
    let mut rng = Rng64::new(seed);
    let x = random_tensor(&mut rng, &[2, 3, 4, 5], 2.0);
    (0..4)
        .map(|axis| check(std::slice::from_ref(&x), seed + axis as u64, |t, v| t.softmax(v[0], axis)))
        .collect::<Result<Vec<_>>>()
        .map(merge)
}

fn reductions(seed: u64) -> Result<GradReport> {
    let mut rng = Rng64::new(seed);
    let x = random_tensor(&mut rng, &[2, 3, 4, 5], 1.0);
    let mut reports = Vec::new();
    for axis in 0..4 {
        reports.push(check(std::slice::from_ref(&x), seed, |t, v| t.sum_axis(v[0], axis))?);
        reports.push(check(std::slice::from_ref(&x), seed + 1, |t, v| t.mean_axis(v[0], axis))?);
        reports.push(check(std::slice::from_ref(&x), seed + 2, |t, v| t.max_axis(v[0], axis))?);
    }
    Ok(merge(reports))
}

fn layer_norm(seed: u64) -> Result<GradReport> {
    let mut rng = Rng64::new(seed);
    let x = random_tensor(&mut rng, &[2, 3, 4, 5], 1.0);
    let mut reports = Vec::new();
    for first in 1..4 {
        let ext = &x.extents()[first..];
        let g = random_tensor(&mut rng, ext, 1.0);
        let b = random_tensor(&mut rng, ext, 1.0);
        reports.push(check(&[x.clone(), g, b], seed + first as u64, |t, v| {
            t.layer_norm(v[0], v[1], v[2], first, 1e-5)
        })?);
    }
    Ok(merge(reports))
}

fn z_pool_entry(seed: u64) -> Result<GradReport> {
    let mut rng = Rng64::new(seed);
    let x = random_tensor(&mut rng, &[2, 3, 4, 5], 1.0);
    (1..4)
        .map(|axis| check(std::slice::from_ref(&x), seed + axis as u64, |t, v| z_pool(t, v[0], axis)))
        .collect::<Result<Vec<_>>>()
        .map(merge)
}

fn triplet(seed: u64) -> Result<GradReport> {
    let mut init = ParamInit::new(seed);
    let p = TripletAttentionParams::init(&mut init, "ta", 3)?;
    let store = jitter(init.finish(), seed);
    let mut rng = Rng64::new(seed + 1);
    check_block(&store, random_tensor(&mut rng, &[2, 3, 4, 5], 1.0), seed, |t, v| triplet_attention(t, v, &p))
}

fn se(seed: u64) -> Result<GradReport> {
    let mut init = ParamInit::new(seed);
    let p = SEParams::init(&mut init, "se", 4, 2)?;
    let store = jitter(init.finish(), seed);
    let mut rng = Rng64::new(seed + 1);
    check_block(&store, random_tensor(&mut rng, &[2, 4, 3, 5], 1.0), seed, |t, v| se_forward(t, v, &p))
}

fn cbam(seed: u64) -> Result<GradReport> {
    let mut init = ParamInit::new(seed);
    let p = CBAMParams::init(&mut init, "cbam", 4, 2)?;
    let store = jitter(init.finish(), seed);
    let mut rng = Rng64::new(seed + 1);
    check_block(&store, random_tensor(&mut rng, &[2, 4, 3, 5], 1.0), seed, |t, v| cbam_forward(t, v, &p))
}

fn gc(seed: u64) -> Result<GradReport> {
    let mut init = ParamInit::new(seed);
    let p = GCParams::init(&mut init, "gc", 4, 2)?;
    let store = jitter(init.finish(), seed);
    let mut rng = Rng64::new(seed + 1);
    check_block(&store, random_tensor(&mut rng, &[2, 4, 3, 5], 1.0), seed, |t, v| gc_forward(t, v, &p))
}

fn rfa_layer(seed: u64, share: bool, stride: usize) -> Result<(RfaConvParams, ParamStore<f32>)> {
    let mut init = ParamInit::new(seed);
    let p = RfaConvParams::init(
        &mut init,
        "rfa",
        RfaConvConfig {
            c_in: 2,
            c_out: 3,
            k: 3,
            stride,
            bias: true,
            share_attention_across_channels: share,
        },
    )?;
    Ok((p, jitter(init.finish(), seed)))
}

fn rfa_attention_entry(seed: u64) -> Result<GradReport> {
    let mut reports = Vec::new();
    for (i, share) in [false, true].into_iter().enumerate() {
        let (p, store) = rfa_layer(seed + i as u64, share, 1)?;
        let mut rng = Rng64::new(seed + 10 + i as u64);
        reports.push(check_block(&store, random_tensor(&mut rng, &[2, 2, 5, 4], 1.0), seed, |t, v| {
            rfa_attention(t, v, &p)
        })?);
    }
    Ok(merge(reports))
}

fn rfa_conv_entry(seed: u64) -> Result<GradReport> {
    let mut reports = Vec::new();
    for (i, (share, stride)) in [(false, 1), (false, 2), (true, 1)].into_iter().enumerate() {
        let (p, store) = rfa_layer(seed + i as u64, share, stride)?;
        let mut rng = Rng64::new(seed + 10 + i as u64);
        reports.push(check_block(&store, random_tensor(&mut rng, &[2, 2, 5, 4], 1.0), seed, |t, v| {
            rfa_conv(t, v, &p)
        })?);
    }
    Ok(merge(reports))
}

const RFA: BottleneckKind = BottleneckKind::Rfa {
    share_attention_across_channels: false,
    single_conv: false,
};

fn conv_block_entry(seed: u64) -> Result<GradReport> {
    let mut init = ParamInit::new(seed);
    let plain = ConvBlockParams::init(&mut init, "cb", 3, 4, 3, 2)?;
    let rfa = ConvBlockParams::init_rfa(&mut init, "cb_rfa", 3, 4, 3, false)?;
    let store = jitter(init.finish(), seed);
    let mut rng = Rng64::new(seed + 1);
    let x = random_tensor(&mut rng, &[2, 3, 5, 5], 1.0);
    Ok(merge([
        check_block(&store, x.clone(), seed, |t, v| conv_block(t, v, &plain))?,
        check_block(&store, x, seed + 1, |t, v| conv_block(t, v, &rfa))?,
    ]))
}

fn bottleneck_entry(seed: u64) -> Result<GradReport> {
    let mut init = ParamInit::new(seed);
    let plain = BottleneckParams::init(&mut init, "bn", 4, BottleneckKind::Standard)?;
    let rfa = BottleneckParams::init(&mut init, "bn_rfa", 4, RFA)?;
    let store = jitter(init.finish(), seed);
    let mut rng = Rng64::new(seed + 1);
    let x = random_tensor(&mut rng, &[2, 4, 4, 5], 1.0);
    Ok(merge([
        check_block(&store, x.clone(), seed, |t, v| bottleneck(t, v, &plain))?,
        check_block(&store, x, seed + 1, |t, v| bottleneck(t, v, &rfa))?,
    ]))
}

fn c2f_entry(seed: u64) -> Result<GradReport> {
    let mut init = ParamInit::new(seed);
    let p = C2fParams::init(&mut init, "c2f", 4, 6, 2, BottleneckKind::Standard)?;
    let store = jitter(init.finish(), seed);
    let mut rng = Rng64::new(seed + 1);
    check_block(&store, random_tensor(&mut rng, &[2, 4, 4, 5], 1.0), seed, |t, v| c2f(t, v, &p))
}

fn c2f_rfaconv_entry(seed: u64) -> Result<GradReport> {
    let mut init = ParamInit::new(seed);
    let p = C2fParams::init(&mut init, "c2f", 4, 4, 1, RFA)?;
    let single = C2fParams::init(
        &mut init,
        "c2f_single",
        4,
        4,
        1,
        BottleneckKind::Rfa {
            share_attention_across_channels: true,
            single_conv: true,
        },
    )?;
    let store = jitter(init.finish(), seed);
    let mut rng = Rng64::new(seed + 1);
    let x = random_tensor(&mut rng, &[2, 4, 4, 5], 1.0);
    Ok(merge([
        check_block(&store, x.clone(), seed, |t, v| c2f_rfaconv(t, v, &p))?,
        check_block(&store, x, seed + 1, |t, v| c2f_rfaconv(t, v, &single))?,
    ]))
}

fn sppf_entry(seed: u64) -> Result<GradReport> {
    let mut init = ParamInit::new(seed);
    let p = SppfParams::init(&mut init, "sppf", 4, 4)?;
    let store = jitter(init.finish(), seed);
    let mut rng = Rng64::new(seed + 1);
    check_block(&store, random_tensor(&mut rng, &[2, 4, 4, 5], 1.0), seed, |t, v| sppf(t, v, &p))
}

fn gt(cx: f64, cy: f64, w: f64, h: f64, class_id: usize) -> GroundTruth {
    GroundTruth {
        bbox: BBox::from_center(cx, cy, w, h),
        class_id,
        image_id: 0,
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        img_size: 32,
        base_width: 8,
        use_p2: true,
        use_rfaconv: true,
        use_triplet: true,
        triplet_k: 3,
        num_classes: 2,
        ..ModelConfig::default()
    }
}

/// Sampled coordinates per tensor in the detector check (≈ 150 tensors).
const DETECTOR_COORDS_PER_INPUT: usize = 12;

fn detector(seed: u64) -> Result<GradReport> {
    let cfg = tiny_config();
    let model = build_model(&cfg)?;
    let mut rng = Rng64::new(seed + 9);
    let mut inputs = model.params.cast::<f64>().tensors().to_vec();
    let np = inputs.len();
    inputs.push(random_tensor(&mut rng, &[1, 3, 32, 32], 1.0));
    let composite = GradCheckConfig {
        coords_per_input: DETECTOR_COORDS_PER_INPUT,
        ..GradCheckConfig::composite(seed)
    };
    let heads = try_check_op_with(&inputs, &composite, |tape, vars| {
        let outs = forward(&model, tape, vars[np])?;
        let parts: Vec<Var> = outs
            .iter()
            .flat_map(|o| [o.boxes, o.obj, o.cls])
            .map(|v| {
                let n = tape.value(v).numel();
                tape.reshape(v, &[n])
            })
            .collect::<Result<_>>()?;
        tape.concat(&parts, 0)
    })?;
    let targets = assign_targets(&[vec![gt(8.0, 9.0, 10.0, 12.0, 1), gt(20.0, 20.0, 24.0, 20.0, 0)]], &cfg);
    let loss = try_check_op_with(&inputs, &composite, |tape, vars| {
        let outs = forward(&model, tape, vars[np])?;
        Ok(detection_loss(tape, &outs, &targets, LossWeights::default())?.0)
    })?;
    Ok(merge([heads, loss]))
}

fn detection_loss_entry(seed: u64) -> Result<GradReport> {
    let cfg = tiny_config();
    let gts = vec![
        vec![gt(6.0, 5.0, 8.0, 7.0, 0), gt(16.0, 17.0, 20.0, 22.0, 1)],
        vec![gt(20.0, 12.0, 12.0, 6.0, 1), gt(11.0, 22.0, 30.0, 30.0, 0)],
    ];
    let targets = assign_targets(&gts, &cfg);
    let mut rng = Rng64::new(seed);
    let strides = cfg.head_strides();
    let mut inputs = Vec::new();
    for &stride in strides {
        let g = cfg.img_size / stride;
        for c in [4, 1, cfg.num_classes] {
            inputs.push(random_tensor::<f64>(&mut rng, &[2, c, g, g], 1.0));
        }
    }
    check(&inputs, seed, |tape, vars| {
        let outs: Vec<LevelVars> = vars
            .chunks(3)
            .zip(strides)
            .map(|(v, &stride)| LevelVars {
                stride,
                boxes: v[0],
                obj: v[1],
                cls: v[2],
            })
            .collect();
        Ok(detection_loss(tape, &outs, &targets, LossWeights::default())?.0)
    })
}

/// `x³` whose backward returns `2x²`.
fn wrong_backward(seed: u64) -> Result<GradReport> {
    let mut rng = Rng64::new(seed);
    let x = random_tensor(&mut rng, &[3, 4], 1.0);
    check(&[x], seed, |tape, v| {
        let x = v[0];
        let xt = tape.value(x);
        let out = Tensor::from_fn(xt.extents(), |i| xt.data()[i].powi(3));
        Ok(tape.record(
            out,
            &[x],
            Box::new(move |gy, vals, sink| {
                let xs = vals[x.index()].data().to_vec();
                if let Some(gx) = sink.buf(x) {
                    for i in 0..gx.len() {
                        gx[i] += gy[i] * 2.0 * xs[i] * xs[i];
                    }
                }
            }),
        ))
    })
}
