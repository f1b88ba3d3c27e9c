use super::assign::Targets;
use super::model::LevelVars;
use crate::error::{Error, Result};
use crate::ops::elementwise::sigmoid;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Upper clamp on the exponent of width/height.
pub(crate) const SIZE_LOGIT_MAX: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub box_: f64,
    pub obj: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { box_: 5.0, obj: 1.0, cls: 1.0 }
    }
}

/// Weighted, normalized components; `total = box_ + obj + cls`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub box_: f64,
    pub obj: f64,
    pub cls: f64,
    pub num_positives: usize,
}

/// `BCE(σ(z), t)` and its derivative `σ(z) − t`.
fn bce(z: f64, t: f64) -> (f64, f64) {
    (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p(), sigmoid(z) - t)
}

/// IoU of two center-form boxes and its gradient with respect to the first
/// box's `(cx, cy, w, h)`.
fn iou_with_grad(p: [f64; 4], t: [f64; 4]) -> (f64, [f64; 4]) {
    let edges = |b: [f64; 4]| [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0];
    let (pe, te) = (edges(p), edges(t));
    // a contained span overlaps by exactly its own width, independent of its center
    let overlap = |a: usize| match (pe[a] >= te[a], pe[a + 2] <= te[a + 2]) {
        (true, true) => p[a + 2],
        (false, false) => t[a + 2],
        _ => pe[a + 2].min(te[a + 2]) - pe[a].max(te[a]),
    };
    let (iw, ih) = (overlap(0), overlap(1));
    let area_p = p[2] * p[3];
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = area_p + t[2] * t[3] - inter;
    let iou = inter / union;
    let d_inter = (union + inter) / (union * union);
    let d_area = -inter / (union * union);
    // d inter / d pred edges (x1, y1, x2, y2)
    let de = [
        if pe[0] >= te[0] { -ih } else { 0.0 },
        if pe[1] >= te[1] { -iw } else { 0.0 },
        if pe[2] <= te[2] { ih } else { 0.0 },
        if pe[3] <= te[3] { iw } else { 0.0 },
    ];
    let g = [
        d_inter * (de[0] + de[2]),
        d_inter * (de[1] + de[3]),
        d_inter * (de[2] - de[0]) / 2.0 + d_area * p[3],
        d_inter * (de[3] - de[1]) / 2.0 + d_area * p[2],
    ];
    (iou, g)
}

/// Fused detection loss over all head levels, normalized by the positive
/// count (at least 1):
///
/// `(λ_box Σ_pos (1 − IoU) + λ_obj Σ_cells BCE_obj + λ_cls Σ_pos Σ_c BCE_cls) / max(P, 1)`.
///
/// Predicted boxes are `cx = g_x + σ(t_x)`, `w = exp(min(t_w, 4))` in cell
/// units (IoU is scale-invariant, so the stride cancels).
pub fn detection_loss<T: Scalar>(tape: &mut Tape<T>, outputs: &[LevelVars], targets: &Targets, weights: LossWeights) -> Result<(Var, LossReport)> {
    if outputs.len() != targets.levels.len() {
        return Err(Error::shape(format!(
            "{} head levels but {} target levels",
            outputs.len(),
            targets.levels.len()
        )));
    }
    let norm = targets.num_positives().max(1) as f64;
    let mut sums = [0.0f64; 3];
    let mut grads: Vec<[Vec<f64>; 3]> = Vec::with_capacity(outputs.len());
    for (o, lt) in outputs.iter().zip(&targets.levels) {
        let (n, _, gh, gw) = tape.value(o.boxes).nchw()?;
        let nc = tape.value(o.cls).nchw()?.1;
        if o.stride != lt.stride || gh != lt.grid || gw != lt.grid || n != targets.batch {
            return Err(Error::shape(format!(
                "level stride {} grid {gh}×{gw} batch {n} does not match targets (stride {}, grid {}, batch {})",
                o.stride, lt.stride, lt.grid, targets.batch
            )));
        }
        let g = lt.grid;
        let boxes = tape.data(o.boxes);
        let obj = tape.data(o.obj);
        let cls = tape.data(o.cls);
        let mut g_box = vec![0.0; boxes.len()];
        let mut g_cls = vec![0.0; cls.len()];

        let obj_t = lt.objectness(n);
        let mut g_obj = vec![0.0; obj.len()];
        for ((z, t), gz) in obj.iter().zip(&obj_t).zip(&mut g_obj) {
            let (l, d) = bce(z.to_f64(), *t);
            sums[1] += l;
            *gz = weights.obj * d / norm;
        }

        let plane = g * g;
        for p in &lt.positives {
            let cell = p.gy * g + p.gx;
            let at = |c: usize, ch: usize| (p.image * ch + c) * plane + cell;
            let t: [f64; 4] = std::array::from_fn(|c| boxes[at(c, 4)].to_f64());
            let (sx, sy) = (sigmoid(t[0]), sigmoid(t[1]));
            let (ew, eh) = (t[2].min(SIZE_LOGIT_MAX).exp(), t[3].min(SIZE_LOGIT_MAX).exp());
            let pred = [p.gx as f64 + sx, p.gy as f64 + sy, ew, eh];
            let tgt = [p.gx as f64 + p.offset[0], p.gy as f64 + p.offset[1], p.size[0], p.size[1]];
            let (iou, d) = iou_with_grad(pred, tgt);
            sums[0] += 1.0 - iou;
            let k = -weights.box_ / norm;
            let chain = [
                sx * (1.0 - sx),
                sy * (1.0 - sy),
                if t[2] < SIZE_LOGIT_MAX { ew } else { 0.0 },
                if t[3] < SIZE_LOGIT_MAX { eh } else { 0.0 },
            ];
            for c in 0..4 {
                g_box[at(c, 4)] += k * d[c] * chain[c];
            }
            for c in 0..nc {
                let (l, dz) = bce(cls[at(c, nc)].to_f64(), (c == p.class_id) as u8 as f64);
                sums[2] += l;
                g_cls[at(c, nc)] += weights.cls * dz / norm;
            }
        }
        grads.push([g_box, g_obj, g_cls]);
    }

    let report = LossReport {
        box_: weights.box_ * sums[0] / norm,
        obj: weights.obj * sums[1] / norm,
        cls: weights.cls * sums[2] / norm,
        total: (weights.box_ * sums[0] + weights.obj * sums[1] + weights.cls * sums[2]) / norm,
        num_positives: targets.num_positives(),
    };
    if !report.total.is_finite() {
        let dump: Vec<String> = outputs
            .iter()
            .map(|o| {
                let stat = |v: Var| {
                    let d = tape.data(v);
                    let bad = d.iter().filter(|x| !x.is_finite()).count();
                    let max = d.iter().map(|x| x.abs().to_f64()).fold(0.0, f64::max);
                    format!("max|x|={max:.3e} non-finite={bad}")
                };
                format!("stride {}: box {} obj {} cls {}", o.stride, stat(o.boxes), stat(o.obj), stat(o.cls))
            })
            .collect();
        return Err(Error::NonFinite(format!("detection loss {report:?}; head outputs: {}", dump.join("; "))));
    }

    let inputs: Vec<Var> = outputs.iter().flat_map(|o| [o.boxes, o.obj, o.cls]).collect();
    let cast: Vec<Vec<T>> = grads.into_iter().flatten().map(|g| g.into_iter().map(T::of).collect()).collect();
    let in_vars = inputs.clone();
    let loss = tape.record(
        Tensor::scalar(T::of(report.total)),
        &inputs,
        Box::new(move |gy, _, sink| {
            let s = gy[0];
            for (v, g) in in_vars.iter().zip(&cast) {
                if let Some(buf) = sink.buf(*v) {
                    for (b, &x) in buf.iter_mut().zip(g) {
                        *b += s * x;
                    }
                }
            }
        }),
    );
    Ok((loss, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{assign_targets, build_model, encode_box, forward, ModelConfig};
    use crate::gradcheck::{random_tensor, try_check_op, try_check_op_with, GradCheckConfig};
    use crate::metrics::{iou, BBox, GroundTruth};
    use crate::rng::Rng64;

    fn gt(cx: f64, cy: f64, w: f64, h: f64, class_id: usize) -> GroundTruth {
        GroundTruth {
            bbox: BBox::from_center(cx, cy, w, h),
            class_id,
            image_id: 0,
        }
    }

    /// Leaf head tensors for `cfg` filled by `f(stride, kind)`.
    fn leaf_outputs(tape: &mut Tape<f64>, cfg: &ModelConfig, batch: usize, rng: &mut Rng64) -> Vec<LevelVars> {
        cfg.head_strides()
            .iter()
            .map(|&stride| {
                let g = cfg.img_size / stride;
                let mut mk = |c| tape.leaf(random_tensor(rng, &[batch, c, g, g], 2.0), true);
                LevelVars {
                    stride,
                    boxes: mk(4),
                    obj: mk(1),
                    cls: mk(cfg.num_classes),
                }
            })
            .collect()
    }

    #[test]
    fn iou_gradient_matches_differences() {
        let mut rng = Rng64::new(2);
        for _ in 0..200 {
            let p = [rng.range(0.0, 2.0), rng.range(0.0, 2.0), rng.range(0.5, 3.0), rng.range(0.5, 3.0)];
            let t = [rng.range(0.0, 2.0), rng.range(0.0, 2.0), rng.range(0.5, 3.0), rng.range(0.5, 3.0)];
            let (v, g) = iou_with_grad(p, t);
            let corners = |b: [f64; 4]| BBox::from_center(b[0], b[1], b[2], b[3]);
            assert!((v - iou(&corners(p), &corners(t))).abs() < 1e-12);
            for c in 0..4 {
                let h = 1e-6;
                let (mut a, mut b) = (p, p);
                a[c] += h;
                b[c] -= h;
                let num = (iou_with_grad(a, t).0 - iou_with_grad(b, t).0) / (2.0 * h);
                assert!((num - g[c]).abs() < 1e-5, "coord {c}: {num} vs {}", g[c]);
            }
        }
    }

    #[test]
    fn perfect_fit_is_near_zero() {
        let cfg = ModelConfig::default();
        let boxes = vec![gt(20.0, 28.0, 24.0, 18.0, 1)];
        let targets = assign_targets(std::slice::from_ref(&boxes), &cfg);
        let mut tape = Tape::<f64>::new();
        let mut outs = Vec::new();
        for lt in &targets.levels {
            let g = lt.grid;
            let mut b = Tensor::zeros(&[1, 4, g, g]);
            let mut o = Tensor::full(&[1, 1, g, g], -10.0);
            let mut c = Tensor::full(&[1, cfg.num_classes, g, g], -10.0);
            for p in &lt.positives {
                let enc = encode_box(p.offset, p.size);
                for k in 0..4 {
                    b.set(&[0, k, p.gy, p.gx], enc[k]);
                }
                o.set(&[0, 0, p.gy, p.gx], 10.0);
                c.set(&[0, p.class_id, p.gy, p.gx], 10.0);
            }
            outs.push(LevelVars {
                stride: lt.stride,
                boxes: tape.constant(b),
                obj: tape.constant(o),
                cls: tape.constant(c),
            });
        }
        let (_, report) = detection_loss(&mut tape, &outs, &targets, LossWeights::default()).unwrap();
        assert_eq!(report.num_positives, 1);
        assert!(report.total >= 0.0 && report.total < 0.01, "{report:?}");
        assert!(report.box_ < 1e-9);
    }

    #[test]
    fn no_ground_truth_is_objectness_only() {
        let cfg = ModelConfig::default();
        let targets = assign_targets(&[vec![], vec![]], &cfg);
        let mut tape = Tape::<f64>::new();
        let mut rng = Rng64::new(3);
        let outs = leaf_outputs(&mut tape, &cfg, 2, &mut rng);
        let (loss, report) = detection_loss(&mut tape, &outs, &targets, LossWeights::default()).unwrap();
        let expected: f64 = outs.iter().flat_map(|o| tape.data(o.obj).to_vec()).map(|z| bce(z, 0.0).0).sum();
        assert!((report.total - expected).abs() < 1e-12);
        assert_eq!(report.box_ + report.cls, 0.0);
        assert_eq!(tape.data(loss)[0], report.total);
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let cfg = ModelConfig {
            img_size: 32,
            use_p2: true,
            num_classes: 2,
            ..ModelConfig::default()
        };
        let gts = vec![
            vec![gt(6.0, 5.0, 8.0, 7.0, 0), gt(16.0, 17.0, 20.0, 22.0, 1)],
            vec![gt(20.0, 12.0, 12.0, 6.0, 1), gt(11.0, 22.0, 30.0, 30.0, 0)],
        ];
        let targets = assign_targets(&gts, &cfg);
        assert_eq!(targets.num_positives(), 4);
        let mut rng = Rng64::new(5);
        let mut inputs = Vec::new();
        for &stride in cfg.head_strides() {
            let g = 32 / stride;
            for c in [4, 1, 2] {
                inputs.push(random_tensor::<f64>(&mut rng, &[2, c, g, g], 1.0));
            }
        }
        let strides = cfg.head_strides();
        let report = try_check_op(&inputs, 8, |tape, vars| {
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
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn loss_through_tiny_detector() {
        let cfg = ModelConfig {
            img_size: 32,
            base_width: 2,
            use_p2: true,
            num_classes: 2,
            ..ModelConfig::default()
        };
        let model = build_model(&cfg).unwrap();
        let targets = assign_targets(&[vec![gt(8.0, 9.0, 10.0, 12.0, 1), gt(20.0, 20.0, 24.0, 20.0, 0)]], &cfg);
        let mut rng = Rng64::new(6);
        let mut inputs = model.params.cast::<f64>().tensors().to_vec();
        let np = inputs.len();
        inputs.push(random_tensor(&mut rng, &[1, 3, 32, 32], 1.0));
        let report = try_check_op_with(&inputs, &GradCheckConfig::composite(2), |tape, vars| {
            let outs = forward(&model, tape, vars[np])?;
            Ok(detection_loss(tape, &outs, &targets, LossWeights::default())?.0)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    #[test]
    fn mismatched_levels_are_rejected() {
        let cfg = ModelConfig::default();
        let targets = assign_targets(&[vec![]], &ModelConfig { use_p2: true, ..cfg.clone() });
        let mut tape = Tape::<f64>::new();
        let mut rng = Rng64::new(1);
        let outs = leaf_outputs(&mut tape, &cfg, 1, &mut rng);
        assert!(detection_loss(&mut tape, &outs, &targets, LossWeights::default()).is_err());
    }
}
