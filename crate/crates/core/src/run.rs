//! Training, evaluation and A/B runs that persist their artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use crate::artifacts::{
    pr_svg, step_checkpoint_name, write_compare_csv, write_eval_summary, write_pr_csvs, CsvLog, VariantReport, CONFIG_SNAPSHOT, EVAL_CSV, FINAL_CHECKPOINT,
    METRICS_CSV, PR_SVG,
};
use crate::checkpoint::{load_checkpoint, restore, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{load_dataset, Dataset, Sample, CLASS_NAMES};
use crate::detector::{build_model, DetectorModel};
use crate::error::{Error, Result};
use crate::metrics::{Detection, EvalSummary, GroundTruth};
use crate::trainer::{evaluate, train, TrainEvent, TrainOutcome};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Loads a dataset and checks that its images match the model input size.
pub fn load_run_data(cfg: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<Dataset> {
    let data = load_dataset(&cfg.data_dir)?;
    for w in &data.warnings {
        log(&format!("warning: {w}"));
    }
    if data.manifest.spec.img_size != cfg.model.img_size {
        return Err(Error::Config(format!(
            "dataset {} has img_size {} but the model expects {}",
            cfg.data_dir.display(),
            data.manifest.spec.img_size,
            cfg.model.img_size
        )));
    }
    Ok(data)
}

/// Trains `cfg` into `out_dir`: `config.snapshot`, `metrics.csv`, `eval.csv`,
/// `model_step<N>.ckpt` at each periodic evaluation and `model.ckpt`.
pub fn train_run(cfg: &RunConfig, out_dir: &Path, log: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_run_data(cfg, log)?;
    create_dir(out_dir)?;
    let cfg = RunConfig {
        out_dir: out_dir.to_path_buf(),
        ..cfg.clone()
    };
    write_file(&out_dir.join(CONFIG_SNAPSHOT), cfg.to_snapshot())?;
    let nc = cfg.model.num_classes;
    let mut metrics = CsvLog::metrics(&out_dir.join(METRICS_CSV))?;
    let mut evals = CsvLog::evals(&out_dir.join(EVAL_CSV), nc)?;
    let total = cfg.epochs * cfg.steps_per_epoch(data.train.len());
    let outcome = train(&cfg, &data.train, &data.val, |event| match event {
        TrainEvent::Step(r) => {
            if r.step == 1 || r.step % 10 == 0 || r.step == total {
                log(&format!(
                    "step {:>5}/{total}  loss {:.4}  box {:.4}  obj {:.4}  cls {:.4}  lr {:.5}",
                    r.step, r.loss, r.loss_box, r.loss_obj, r.loss_cls, r.lr
                ));
            }
            metrics.step(r)
        }
        TrainEvent::Eval { record, params } => {
            log(&format!(
                "eval step {}  mAP50 {:.4}  mAP50-95 {:.4}",
                record.step, record.summary.map50, record.summary.map50_95
            ));
            evals.eval(record.step, &record.summary, nc)?;
            if record.step < total {
                save_checkpoint(&out_dir.join(step_checkpoint_name(record.step)), params)?;
            }
            Ok(())
        }
    })?;
    save_checkpoint(&out_dir.join(FINAL_CHECKPOINT), &outcome.model.params)?;
    Ok(outcome)
}

/// Model described by the `config.snapshot` beside `checkpoint`, with the
/// checkpoint's weights.
pub fn load_trained_model(checkpoint: &Path) -> Result<(RunConfig, DetectorModel)> {
    let dir = checkpoint.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let snapshot = dir.join(CONFIG_SNAPSHOT);
    if !snapshot.exists() {
        return Err(Error::Config(format!("no {CONFIG_SNAPSHOT} next to checkpoint {}", checkpoint.display())));
    }
    let cfg = RunConfig::load(&snapshot)?;
    let mut model = build_model(&cfg.model)?;
    restore(&mut model.params, load_checkpoint(checkpoint)?)?;
    Ok((cfg, model))
}

/// Ground truth replayed as detections with score 1.
pub fn oracle_detections(samples: &[Sample]) -> (Vec<Detection>, Vec<GroundTruth>) {
    let gts: Vec<GroundTruth> = samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.labels.iter().map(move |g| GroundTruth { image_id: i, ..*g }))
        .collect();
    let dets = gts
        .iter()
        .map(|g| Detection {
            bbox: g.bbox,
            class_id: g.class_id,
            score: 1.0,
            image_id: g.image_id,
        })
        .collect();
    (dets, gts)
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub conf_thresh: f64,
    pub nms_iou: f64,
    /// Score the labels themselves instead of the model.
    pub oracle: bool,
}

/// Evaluates a checkpoint on the validation split of `data_dir` and writes
/// `eval.csv`, `pr_class<k>.csv` and `pr.svg` into `out_dir`. Returns the
/// summary and the model's class count.
pub fn eval_run(checkpoint: &Path, data_dir: &Path, out_dir: &Path, opts: EvalOptions, log: &mut dyn FnMut(&str)) -> Result<(EvalSummary, usize)> {
    let (cfg, model) = load_trained_model(checkpoint)?;
    let cfg = RunConfig {
        data_dir: data_dir.to_path_buf(),
        ..cfg
    };
    let data = load_run_data(&cfg, log)?;
    let samples = if data.val.is_empty() {
        log("validation split is empty; evaluating the training split");
        &data.train
    } else {
        &data.val
    };
    let summary = if opts.oracle {
        let (dets, gts) = oracle_detections(samples);
        EvalSummary::compute(&dets, &gts)?
    } else {
        evaluate(&model, samples, opts.conf_thresh, opts.nms_iou)?.summary
    };
    create_dir(out_dir)?;
    let nc = cfg.model.num_classes;
    write_eval_summary(&out_dir.join(EVAL_CSV), &summary, nc)?;
    write_pr_csvs(out_dir, &summary.at50, nc)?;
    write_file(&out_dir.join(PR_SVG), pr_svg(&summary.at50, nc, &CLASS_NAMES))?;
    Ok((summary, nc))
}

pub fn variant_report(outcome: &TrainOutcome) -> Result<VariantReport> {
    let last = outcome
        .final_eval()
        .ok_or_else(|| Error::Config("run has no validation evaluation (empty val split)".into()))?;
    Ok(VariantReport {
        map50: last.summary.map50,
        map50_95: last.summary.map50_95,
        ap50: last.summary.ap50_by_class(outcome.model.config.num_classes),
        params: outcome.model.num_scalars(),
        train_seconds: outcome.train_seconds,
    })
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub a: VariantReport,
    pub b: VariantReport,
}

/// Trains both configs on the same data into `out_dir/a` and `out_dir/b` and
/// writes `compare.csv`.
pub fn compare_run(a: &RunConfig, b: &RunConfig, out_dir: &Path, log: &mut dyn FnMut(&str)) -> Result<Comparison> {
    if a.data_dir != b.data_dir {
        return Err(Error::Config(format!(
            "configs use different data_dir ('{}' vs '{}'); a comparison must share data",
            a.data_dir.display(),
            b.data_dir.display()
        )));
    }
    if a.model.seed != b.model.seed {
        return Err(Error::Config(format!("configs use different seeds ({} vs {})", a.model.seed, b.model.seed)));
    }
    if a.model.num_classes != b.model.num_classes {
        return Err(Error::Config("configs disagree on num_classes".into()));
    }
    let mut reports = Vec::new();
    for (name, cfg) in [("a", a), ("b", b)] {
        log(&format!("== variant {name}"));
        let outcome = train_run(cfg, &out_dir.join(name), log)?;
        reports.push(variant_report(&outcome)?);
    }
    let b = reports.pop().expect("two variants");
    let a = reports.pop().expect("two variants");
    write_compare_csv(&out_dir.join(crate::artifacts::COMPARE_CSV), &a, &b)?;
    Ok(Comparison { a, b })
}
