use super::model::{ModelConfig, STRIDES};
use crate::metrics::GroundTruth;

/// One positive cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Positive {
    /// Batch index of the image.
    pub image: usize,
    pub gx: usize,
    pub gy: usize,
    /// Center offset within the cell, in cell units.
    pub offset: [f64; 2],
    /// Width and height in cell units.
    pub size: [f64; 2],
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub stride: usize,
    pub grid: usize,
    /// Positives in order of first assignment; at most one per cell.
    pub positives: Vec<Positive>,
}

impl LevelTargets {
    /// Objectness target map `(N, 1, G, G)` flattened.
    pub fn objectness(&self, batch: usize) -> Vec<f64> {
        let g = self.grid;
        let mut t = vec![0.0; batch * g * g];
        for p in &self.positives {
            t[(p.image * g + p.gy) * g + p.gx] = 1.0;
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub batch: usize,
    /// One entry per head level, finest first.
    pub levels: Vec<LevelTargets>,
    /// Boxes with a side of at most one pixel.
    pub skipped_degenerate: usize,
    /// Positives overwritten by a later box centered in the same cell.
    pub collisions: usize,
}

impl Targets {
    pub fn num_positives(&self) -> usize {
        self.levels.iter().map(|l| l.positives.len()).sum()
    }
}

/// Stride of the level responsible for a box of the given pixel size.
pub fn level_for_size(w: f64, h: f64, use_p2: bool) -> usize {
    let s = (w * h).sqrt();
    if s < 16.0 {
        if use_p2 {
            4
        } else {
            8
        }
    } else if s < 32.0 {
        8
    } else if s < 64.0 {
        16
    } else {
        32
    }
}

/// Routes each box to one level by size and to the cell containing its
/// center. `gts[i]` lists the boxes of batch image `i`.
pub fn assign_targets(gts: &[Vec<GroundTruth>], cfg: &ModelConfig) -> Targets {
    let mut levels: Vec<LevelTargets> = cfg
        .head_strides()
        .iter()
        .map(|&stride| LevelTargets {
            stride,
            grid: cfg.img_size / stride,
            positives: Vec::new(),
        })
        .collect();
    debug_assert!(levels.iter().all(|l| STRIDES.contains(&l.stride)));
    let mut skipped = 0;
    let mut collisions = 0;
    for (image, boxes) in gts.iter().enumerate() {
        for g in boxes {
            let (w, h) = (g.bbox.width(), g.bbox.height());
            if w <= 1.0 || h <= 1.0 {
                skipped += 1;
                continue;
            }
            let stride = level_for_size(w, h, cfg.use_p2);
            let lvl = levels.iter_mut().find(|l| l.stride == stride).expect("level exists");
            let s = stride as f64;
            let (cx, cy) = g.bbox.center();
            let cell = |c: f64| ((c / s).floor().max(0.0) as usize).min(lvl.grid - 1);
            let (gx, gy) = (cell(cx), cell(cy));
            let pos = Positive {
                image,
                gx,
                gy,
                offset: [cx / s - gx as f64, cy / s - gy as f64],
                size: [w / s, h / s],
                class_id: g.class_id,
            };
            match lvl.positives.iter_mut().find(|p| p.image == image && p.gx == gx && p.gy == gy) {
                Some(slot) => {
                    *slot = pos;
                    collisions += 1;
                }
                None => lvl.positives.push(pos),
            }
        }
    }
    Targets {
        batch: gts.len(),
        levels,
        skipped_degenerate: skipped,
        collisions,
    }
}
