//! Run-directory files: CSV logs, PR curves and their SVG plot.
//!
//! | file | columns |
//! |------|---------|
//! | `metrics.csv` | step, loss, loss_box, loss_obj, loss_cls, lr |
//! | `eval.csv` (training) | step, map50, map50_95, ap50_class0.. |
//! | `eval.csv` (eval command) | map50, map50_95, ap50_class0.. |
//! | `pr_class<k>.csv` | recall, precision, score |
//! | `compare.csv` | variant, map50, map50_95, ap50_class0.., params, train_seconds |
//!
//! AP cells of classes without ground truth are left empty.

use std::fmt::Write as _;
use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{EvalSummary, ThresholdEval};
use crate::trainer::StepRecord;

pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const METRICS_CSV: &str = "metrics.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const PR_SVG: &str = "pr.svg";
pub const COMPARE_CSV: &str = "compare.csv";

pub fn step_checkpoint_name(step: usize) -> String {
    format!("model_step{step}.ckpt")
}

pub fn pr_csv_name(class_id: usize) -> String {
    format!("pr_class{class_id}.csv")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::data(path, format!("{other:?}")),
    }
}

fn ap_columns(num_classes: usize) -> impl Iterator<Item = String> {
    (0..num_classes).map(|k| format!("ap50_class{k}"))
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Streaming CSV file flushed after every row, so a crashed run keeps its log.
pub struct CsvLog {
    path: std::path::PathBuf,
    writer: csv::Writer<File>,
}

impl CsvLog {
    pub fn create(path: &Path, header: &[String]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = CsvLog {
            path: path.to_path_buf(),
            writer: csv::Writer::from_writer(file),
        };
        log.row(header)?;
        Ok(log)
    }

    pub fn row<S: AsRef<[u8]>>(&mut self, cells: &[S]) -> Result<()> {
        self.writer.write_record(cells).map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn metrics(path: &Path) -> Result<Self> {
        let header = ["step", "loss", "loss_box", "loss_obj", "loss_cls", "lr"].map(String::from);
        CsvLog::create(path, &header)
    }

    pub fn step(&mut self, r: &StepRecord) -> Result<()> {
        self.row(&[
            r.step.to_string(),
            r.loss.to_string(),
            r.loss_box.to_string(),
            r.loss_obj.to_string(),
            r.loss_cls.to_string(),
            r.lr.to_string(),
        ])
    }

    /// Training `eval.csv`, one row per evaluation.
    pub fn evals(path: &Path, num_classes: usize) -> Result<Self> {
        let header: Vec<String> = ["step", "map50", "map50_95"]
            .map(String::from)
            .into_iter()
            .chain(ap_columns(num_classes))
            .collect();
        CsvLog::create(path, &header)
    }

    pub fn eval(&mut self, step: usize, s: &EvalSummary, num_classes: usize) -> Result<()> {
        let mut row = vec![step.to_string(), s.map50.to_string(), s.map50_95.to_string()];
        row.extend(s.ap50_by_class(num_classes).into_iter().map(opt_cell));
        self.row(&row)
    }
}

/// Single-row `eval.csv` written by the eval command.
pub fn write_eval_summary(path: &Path, s: &EvalSummary, num_classes: usize) -> Result<()> {
    let header: Vec<String> = ["map50", "map50_95"].map(String::from).into_iter().chain(ap_columns(num_classes)).collect();
    let mut log = CsvLog::create(path, &header)?;
    let mut row = vec![s.map50.to_string(), s.map50_95.to_string()];
    row.extend(s.ap50_by_class(num_classes).into_iter().map(opt_cell));
    log.row(&row)
}

/// One `pr_class<k>.csv` per class; classes without ground truth get a
/// header-only file.
pub fn write_pr_csvs(dir: &Path, at50: &ThresholdEval, num_classes: usize) -> Result<()> {
    for k in 0..num_classes {
        let path = dir.join(pr_csv_name(k));
        let mut log = CsvLog::create(&path, &["recall", "precision", "score"].map(String::from))?;
        if let Some(c) = at50.classes.iter().find(|c| c.class_id == k) {
            for p in &c.curve.points {
                log.row(&[p.recall.to_string(), p.precision.to_string(), p.score.to_string()])?;
            }
        }
    }
    Ok(())
}

const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#bcbd22", "#2ca02c", "#9467bd", "#8c564b"];

/// Precision–recall plot on `[0,1]²`, one polyline per class.
pub fn pr_svg(at50: &ThresholdEval, num_classes: usize, class_names: &[&str]) -> String {
    const SIZE: f64 = 400.0;
    const MARGIN: f64 = 50.0;
    let px = |r: f64| MARGIN + r * SIZE;
    let py = |p: f64| MARGIN + (1.0 - p) * SIZE;
    let total = SIZE + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">"#
    );
    let _ = writeln!(
        s,
        r#"  <rect x="{MARGIN}" y="{MARGIN}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    for i in 0..=10 {
        let v = i as f64 / 10.0;
        let _ = writeln!(
            s,
            r#"  <text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{v:.1}</text>"#,
            px(v),
            MARGIN + SIZE + 15.0
        );
        let _ = writeln!(
            s,
            r#"  <text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{v:.1}</text>"#,
            MARGIN - 5.0,
            py(v) + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"  <text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">recall</text>"#,
        px(0.5),
        total - 10.0
    );
    let _ = writeln!(
        s,
        r#"  <text x="12" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 12 {:.1})">precision</text>"#,
        py(0.5),
        py(0.5)
    );
    for k in 0..num_classes {
        let points: Vec<String> = at50
            .classes
            .iter()
            .find(|c| c.class_id == k)
            .map(|c| c.curve.points.iter().map(|p| format!("{:.2},{:.2}", px(p.recall), py(p.precision))).collect())
            .unwrap_or_default();
        let color = PALETTE[k % PALETTE.len()];
        let name = class_names.get(k).copied().unwrap_or("class");
        let _ = writeln!(
            s,
            r#"  <polyline data-class="{k}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{name} (class {k})</title></polyline>"#,
            points.join(" ")
        );
        let _ = writeln!(
            s,
            r#"  <text x="{:.1}" y="{:.1}" font-size="11" fill="{color}">{name}</text>"#,
            MARGIN + SIZE - 80.0,
            MARGIN + 15.0 + 14.0 * k as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Final metrics of one trained variant.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantReport {
    pub map50: f64,
    pub map50_95: f64,
    pub ap50: Vec<Option<f64>>,
    pub params: usize,
    pub train_seconds: f64,
}

/// `b − a` for every column; AP deltas are empty when either side is.
pub fn variant_delta(a: &VariantReport, b: &VariantReport) -> Vec<String> {
    let mut row = vec!["delta".to_string(), (b.map50 - a.map50).to_string(), (b.map50_95 - a.map50_95).to_string()];
    row.extend(a.ap50.iter().zip(&b.ap50).map(|(x, y)| opt_cell(x.zip(*y).map(|(x, y)| y - x))));
    row.push((b.params as i64 - a.params as i64).to_string());
    row.push((b.train_seconds - a.train_seconds).to_string());
    row
}

/// Rows `a`, `b` and `delta`.
pub fn write_compare_csv(path: &Path, a: &VariantReport, b: &VariantReport) -> Result<()> {
    let nc = a.ap50.len();
    if b.ap50.len() != nc {
        return Err(Error::Config(format!("variants disagree on class count ({nc} vs {})", b.ap50.len())));
    }
    let header: Vec<String> = ["variant", "map50", "map50_95"]
        .map(String::from)
        .into_iter()
        .chain(ap_columns(nc))
        .chain(["params", "train_seconds"].map(String::from))
        .collect();
    let mut log = CsvLog::create(path, &header)?;
    for (name, v) in [("a", a), ("b", b)] {
        let mut row = vec![name.to_string(), v.map50.to_string(), v.map50_95.to_string()];
        row.extend(v.ap50.iter().map(|&x| opt_cell(x)));
        row.push(v.params.to_string());
        row.push(v.train_seconds.to_string());
        log.row(&row)?;
    }
    log.row(&variant_delta(a, b))
}
