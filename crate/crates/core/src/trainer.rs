//! Mini-batch SGD training and batched evaluation of the detector.

use std::time::Instant;

use crate::config::RunConfig;
use crate::data::Sample;
use crate::detector::{assign_targets, build_model, decode_predictions, detection_loss, forward, sgd_step, DetectorModel, LossWeights, SgdConfig, TrainState};
use crate::error::{Error, Result};
use crate::metrics::{Detection, EvalSummary, GroundTruth};
use crate::params::ParamStore;
use crate::rng::Rng64;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One row of `metrics.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub loss_box: f64,
    pub loss_obj: f64,
    pub loss_cls: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub summary: EvalSummary,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub summary: EvalSummary,
    /// All kept detections; `image_id` indexes the evaluated samples.
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
}

pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    Eval { record: &'a EvalRecord, params: &'a ParamStore<f32> },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DetectorModel,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub train_seconds: f64,
}

impl TrainOutcome {
    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }
}

/// Stacks `(3, S, S)` images into `(N, 3, S, S)`.
pub fn batch_images(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let first = samples.first().ok_or_else(|| Error::shape("empty batch"))?;
    let e = first.image.extents().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    for s in samples {
        if s.image.extents() != e.as_slice() {
            return Err(Error::shape("images in a batch differ in size"));
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor::new(&[samples.len(), e[0], e[1], e[2]], data)
}

/// Forward, loss, backward and one SGD update on `batch`.
pub fn train_step(model: &DetectorModel, state: &mut TrainState, batch: &[&Sample], sgd: SgdConfig) -> Result<StepRecord> {
    let mut tape = Tape::with_params(&state.params, true);
    let images = tape.constant(batch_images(batch)?);
    let outs = forward(model, &mut tape, images)?;
    let gts: Vec<Vec<GroundTruth>> = batch.iter().map(|s| s.labels.clone()).collect();
    let targets = assign_targets(&gts, &model.config);
    let (loss, report) = detection_loss(&mut tape, &outs, &targets, LossWeights::default())?;
    tape.backward(loss)?;
    let grads = tape.param_grads();
    if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| g.is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
        return Err(Error::NonFinite(format!(
            "gradient of `{}` at step {}",
            state.params.names()[i],
            state.step + 1
        )));
    }
    sgd_step(state, &grads, sgd);
    Ok(StepRecord {
        step: state.step,
        loss: report.total,
        loss_box: report.box_,
        loss_obj: report.obj,
        loss_cls: report.cls,
        lr: sgd.lr,
    })
}

const EVAL_BATCH: usize = 16;

/// Decodes every sample and scores the detections against its labels.
pub fn evaluate(model: &DetectorModel, samples: &[Sample], conf_thresh: f64, nms_iou: f64) -> Result<Evaluation> {
    let mut detections = Vec::new();
    let mut ground_truth = Vec::new();
    for (chunk_idx, chunk) in samples.chunks(EVAL_BATCH).enumerate() {
        let base = chunk_idx * EVAL_BATCH;
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut tape = model.tape::<f32>(false);
        let images = tape.constant(batch_images(&refs)?);
        let outs = forward(model, &mut tape, images)?;
        let heads: Vec<_> = outs.iter().map(|o| o.values(&tape)).collect();
        for (i, dets) in decode_predictions(&heads, model.config.img_size, conf_thresh, nms_iou).into_iter().enumerate() {
            detections.extend(dets.into_iter().map(|d| Detection { image_id: base + i, ..d }));
        }
        for (i, s) in chunk.iter().enumerate() {
            ground_truth.extend(s.labels.iter().map(|g| GroundTruth { image_id: base + i, ..*g }));
        }
    }
    Ok(Evaluation {
        summary: EvalSummary::compute(&detections, &ground_truth)?,
        detections,
        ground_truth,
    })
}

fn shuffle(rng: &mut Rng64, order: &mut [usize]) {
    for i in (1..order.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
}

/// Trains a freshly built model for `cfg.epochs` epochs, evaluating on `val`
/// every `cfg.eval_every` steps (when non-zero) and after the last step.
pub fn train(cfg: &RunConfig, train_set: &[Sample], val: &[Sample], mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut model = build_model(&cfg.model)?;
    // batch order uses a stream distinct from parameter initialization
    let rng = Rng64::new(cfg.model.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut state = TrainState::new(model.params.clone(), rng);
    let mut steps = Vec::new();
    let mut evals = Vec::new();
    let started = Instant::now();
    let mut eval_time = 0.0;
    let total = cfg.epochs * cfg.steps_per_epoch(train_set.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut run_eval =
        |model: &mut DetectorModel, state: &TrainState, evals: &mut Vec<EvalRecord>, on_event: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>| -> Result<()> {
            let t0 = Instant::now();
            model.params = state.params.clone();
            let ev = evaluate(model, val, cfg.conf_thresh, cfg.nms_iou)?;
            evals.push(EvalRecord {
                step: state.step,
                summary: ev.summary,
            });
            eval_time += t0.elapsed().as_secs_f64();
            on_event(TrainEvent::Eval {
                record: evals.last().unwrap(),
                params: &state.params,
            })
        };

    for _ in 0..cfg.epochs {
        shuffle(&mut state.rng, &mut order);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let sgd = SgdConfig {
                lr: cfg.lr_at(state.step + 1),
                ..cfg.sgd()
            };
            let rec = train_step(&model, &mut state, &batch, sgd)?;
            on_event(TrainEvent::Step(&rec))?;
            steps.push(rec);
            let last = state.step == total;
            if !val.is_empty() && (last || (cfg.eval_every > 0 && state.step.is_multiple_of(cfg.eval_every))) {
                run_eval(&mut model, &state, &mut evals, &mut on_event)?;
            }
        }
    }
    model.params = state.params;
    let train_seconds = started.elapsed().as_secs_f64() - eval_time;
    Ok(TrainOutcome {
        model,
        steps,
        evals,
        train_seconds,
    })
}

/// Mean training loss of the final `window` steps.
pub fn tail_mean_loss(steps: &[StepRecord], window: usize) -> f64 {
    let tail = &steps[steps.len().saturating_sub(window)..];
    tail.iter().map(|s| s.loss).sum::<f64>() / tail.len().max(1) as f64
}
