use super::loss::SIZE_LOGIT_MAX;
use super::model::LevelVars;
use crate::metrics::{nms, BBox, Detection};
use crate::ops::elementwise::sigmoid;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// Head output values for one level.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T: Scalar = f32> {
    pub stride: usize,
    pub boxes: Tensor<T>,
    pub obj: Tensor<T>,
    pub cls: Tensor<T>,
}

impl LevelVars {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> HeadOutput<T> {
        HeadOutput {
            stride: self.stride,
            boxes: tape.value(self.boxes).clone(),
            obj: tape.value(self.obj).clone(),
            cls: tape.value(self.cls).clone(),
        }
    }
}

/// Raw box parameters reproducing a cell-relative center `offset` in (0, 1)
/// and a size in cell units.
pub fn encode_box(offset: [f64; 2], size: [f64; 2]) -> [f64; 4] {
    let logit = |p: f64| (p / (1.0 - p)).ln();
    [logit(offset[0]), logit(offset[1]), size[0].ln(), size[1].ln()]
}

/// Per-image detections (image ids are batch indices), each list sorted by
/// descending score after class-wise NMS.
pub fn decode_predictions<T: Scalar>(outputs: &[HeadOutput<T>], img_size: usize, conf_thresh: f64, nms_iou: f64) -> Vec<Vec<Detection>> {
    let Some(first) = outputs.first() else {
        return Vec::new();
    };
    let batch = first.obj.extents()[0];
    let limit = img_size as f64;
    let mut per_image: Vec<Vec<Detection>> = vec![Vec::new(); batch];
    for o in outputs {
        let e = o.cls.extents();
        let (nc, gh, gw) = (e[1], e[2], e[3]);
        let plane = gh * gw;
        let s = o.stride as f64;
        let (bd, od, cd) = (o.boxes.data(), o.obj.data(), o.cls.data());
        for (n, dets) in per_image.iter_mut().enumerate() {
            for gy in 0..gh {
                for gx in 0..gw {
                    let cell = gy * gw + gx;
                    let p_obj = sigmoid(od[n * plane + cell].to_f64());
                    if p_obj < conf_thresh {
                        continue;
                    }
                    let (class_id, p_cls) = (0..nc)
                        .map(|c| (c, cd[(n * nc + c) * plane + cell].to_f64()))
                        .fold((0, f64::NEG_INFINITY), |best, (c, z)| if z > best.1 { (c, z) } else { best });
                    let score = p_obj * sigmoid(p_cls);
                    if score < conf_thresh {
                        continue;
                    }
                    let t = |c: usize| bd[(n * 4 + c) * plane + cell].to_f64();
                    let cx = (gx as f64 + sigmoid(t(0))) * s;
                    let cy = (gy as f64 + sigmoid(t(1))) * s;
                    let w = s * t(2).min(SIZE_LOGIT_MAX).exp();
                    let h = s * t(3).min(SIZE_LOGIT_MAX).exp();
                    dets.push(Detection {
                        bbox: BBox::from_center(cx, cy, w, h).clamp(limit),
                        class_id,
                        score,
                        image_id: n,
                    });
                }
            }
        }
    }
    per_image.into_iter().map(|d| nms(&d, nms_iou)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng64;

    fn blank(stride: usize, img: usize, batch: usize, nc: usize) -> HeadOutput<f64> {
        let g = img / stride;
        HeadOutput {
            stride,
            boxes: Tensor::zeros(&[batch, 4, g, g]),
            obj: Tensor::full(&[batch, 1, g, g], -10.0),
            cls: Tensor::zeros(&[batch, nc, g, g]),
        }
    }

    #[test]
    fn low_objectness_gives_nothing() {
        let outs = vec![blank(8, 64, 2, 3), blank(16, 64, 2, 3)];
        let dets = decode_predictions(&outs, 64, 0.25, 0.5);
        assert_eq!(dets.len(), 2);
        assert!(dets.iter().all(Vec::is_empty));
    }

    #[test]
    fn single_hot_cell_decodes_to_hand_corners() {
        let mut o = blank(16, 64, 1, 3);
        o.obj.set(&[0, 0, 1, 2], 10.0);
        o.cls.set(&[0, 2, 1, 2], 5.0);
        // offset (0.5, 0.5), width 2 cells, height 1 cell
        o.boxes.set(&[0, 2, 1, 2], 2f64.ln());
        let dets = decode_predictions(&[o], 64, 0.25, 0.5);
        let d = dets[0][0];
        assert_eq!(dets[0].len(), 1);
        assert_eq!(d.class_id, 2);
        // center (2.5·16, 1.5·16) = (40, 24), size 32×16
        let b = d.bbox;
        for (got, want) in [(b.x1, 24.0), (b.y1, 16.0), (b.x2, 56.0), (b.y2, 32.0)] {
            assert!((got - want).abs() < 1e-9, "{b:?}");
        }
    }

    #[test]
    fn decode_inverts_encode() {
        let mut rng = Rng64::new(4);
        let mut checked = 0;
        while checked < 200 {
            let stride = [4, 8, 16, 32][rng.below(4) as usize];
            let (w, h) = (rng.range(2.0, 60.0), rng.range(2.0, 60.0));
            let want = BBox::from_center(rng.range(w / 2.0, 64.0 - w / 2.0), rng.range(h / 2.0, 64.0 - h / 2.0), w, h);
            let s = stride as f64;
            let (cx, cy) = want.center();
            let (gx, gy) = ((cx / s).floor(), (cy / s).floor());
            let offset = [cx / s - gx, cy / s - gy];
            if offset.iter().any(|&o| !(1e-6..1.0 - 1e-6).contains(&o)) {
                continue;
            }
            let mut o = blank(stride, 64, 1, 1);
            for (c, v) in encode_box(offset, [w / s, h / s]).iter().enumerate() {
                o.boxes.set(&[0, c, gy as usize, gx as usize], *v);
            }
            o.obj.set(&[0, 0, gy as usize, gx as usize], 10.0);
            o.cls.set(&[0, 0, gy as usize, gx as usize], 10.0);
            let d = decode_predictions(&[o], 64, 0.5, 0.5)[0][0];
            let err = [d.bbox.x1 - want.x1, d.bbox.y1 - want.y1, d.bbox.x2 - want.x2, d.bbox.y2 - want.y2]
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-3, "{err}");
            checked += 1;
        }
    }

    #[test]
    fn boxes_are_clamped_and_sorted() {
        let mut rng = Rng64::new(8);
        let mut o = blank(8, 64, 1, 3);
        o.boxes = crate::gradcheck::random_tensor(&mut rng, &[1, 4, 8, 8], 6.0);
        o.obj = crate::gradcheck::random_tensor(&mut rng, &[1, 1, 8, 8], 4.0);
        o.cls = crate::gradcheck::random_tensor(&mut rng, &[1, 3, 8, 8], 4.0);
        let dets = decode_predictions(&[o], 64, 0.05, 0.5);
        assert!(!dets[0].is_empty());
        for d in &dets[0] {
            let b = d.bbox;
            assert!(0.0 <= b.x1 && b.x1 <= b.x2 && b.x2 <= 64.0);
            assert!(0.0 <= b.y1 && b.y1 <= b.y2 && b.y2 <= 64.0);
        }
        assert!(dets[0].windows(2).all(|w| w[0].score >= w[1].score));
    }
}
