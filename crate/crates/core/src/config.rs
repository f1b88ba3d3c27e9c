//! Run configuration in a flat `key = value` text format. `#` starts a
//! comment; unknown keys are errors. Lists are comma-separated.
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `img_size` | square input side, multiple of 32 | 64 |
//! | `base_width` | stem width C₀ | 16 |
//! | `depths` | bottlenecks per stage: one value or four | 1 |
//! | `use_rfaconv` | receptive-field attention convs in every C2f | false |
//! | `use_triplet` | triplet attention on stage outputs | false |
//! | `triplet_stages` | stages receiving triplet attention (`p2,p3,p4,p5`) | all |
//! | `use_p2` | stride-4 neck branch and head | false |
//! | `num_classes` | | 3 |
//! | `triplet_k` | triplet gate kernel size (odd) | 7 |
//! | `share_attention_across_channels` | one RFA attention map for all channels | false |
//! | `rfa_single_conv` | only the second bottleneck conv uses RFA | false |
//! | `seed` | parameter init and batch order | 7 |
//! | `epochs`, `batch_size` | | 10, 8 |
//! | `lr`, `momentum`, `weight_decay` | SGD | 0.01, 0.9, 0.0005 |
//! | `warmup_steps` | linear warmup length (0 disables) | 20 |
//! | `conf_thresh`, `nms_iou` | decoding during evaluation | 0.25, 0.5 |
//! | `data_dir`, `out_dir` | paths | `data`, `runs/default` |
//! | `grad_clip` | global gradient-norm clip (0 disables) | 10 |
//! | `eval_every` | evaluate every N steps (0: only after training) | 0 |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::detector::{ModelConfig, SgdConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: usize,
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            epochs: 10,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: 10.0,
            warmup_steps: 20,
            conf_thresh: 0.25,
            nms_iou: 0.5,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            eval_every: 0,
        }
    }
}

const STAGE_NAMES: [&str; 4] = ["p2", "p3", "p4", "p5"];

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

impl RunConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
        }
    }

    /// Learning rate of 1-based step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.warmup_steps == 0 || t >= self.warmup_steps {
            self.lr
        } else {
            self.lr * t as f64 / self.warmup_steps as f64
        }
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("momentum must be in [0, 1); weight_decay and grad_clip non-negative");
        }
        if !(0.0..=1.0).contains(&self.conf_thresh) || !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("conf_thresh and nms_iou must be in [0, 1]");
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let num = |v: &str| v.parse::<usize>().map_err(|_| format!("`{key}` expects a non-negative integer, got `{v}`"));
        let real = |v: &str| v.parse::<f64>().map_err(|_| format!("`{key}` expects a number, got `{v}`"));
        let flag = |v: &str| parse_bool(v).ok_or_else(|| format!("`{key}` expects true/false, got `{v}`"));
        let m = &mut self.model;
        match key {
            "img_size" => m.img_size = num(v)?,
            "base_width" => m.base_width = num(v)?,
            "depths" => {
                let d = v.split(',').map(|x| num(x.trim())).collect::<std::result::Result<Vec<_>, _>>()?;
                m.depths = match d[..] {
                    [n] => [n; 4],
                    [a, b, c, e] => [a, b, c, e],
                    _ => return Err(format!("`depths` expects one or four values, got {}", d.len())),
                };
            }
            "use_rfaconv" => m.use_rfaconv = flag(v)?,
            "use_triplet" => m.use_triplet = flag(v)?,
            "triplet_stages" => {
                let mut s = [false; 4];
                for name in v.split(',').map(str::trim).filter(|x| !x.is_empty()) {
                    let i = STAGE_NAMES
                        .iter()
                        .position(|n| *n == name)
                        .ok_or_else(|| format!("unknown stage `{name}` (expected p2..p5)"))?;
                    s[i] = true;
                }
                m.triplet_stages = s;
            }
            "use_p2" => m.use_p2 = flag(v)?,
            "num_classes" => m.num_classes = num(v)?,
            "triplet_k" => m.triplet_k = num(v)?,
            "share_attention_across_channels" => m.share_attention_across_channels = flag(v)?,
            "rfa_single_conv" => m.rfa_single_conv = flag(v)?,
            "seed" => m.seed = v.parse().map_err(|_| format!("`seed` expects an unsigned integer, got `{v}`"))?,
            "epochs" => self.epochs = num(v)?,
            "batch_size" => self.batch_size = num(v)?,
            "lr" => self.lr = real(v)?,
            "momentum" => self.momentum = real(v)?,
            "weight_decay" => self.weight_decay = real(v)?,
            "grad_clip" => self.grad_clip = real(v)?,
            "warmup_steps" => self.warmup_steps = num(v)?,
            "conf_thresh" => self.conf_thresh = real(v)?,
            "nms_iou" => self.nms_iou = real(v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "eval_every" => self.eval_every = num(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::Config(format!("line {}: {m}: `{}`", i + 1, raw.trim()));
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            cfg.set(k.trim(), v.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fully resolved configuration; parses back to an identical value.
    pub fn to_snapshot(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("img_size", &m.img_size);
        kv("base_width", &m.base_width);
        kv("depths", &m.depths.map(|d| d.to_string()).join(","));
        kv("use_rfaconv", &m.use_rfaconv);
        kv("use_triplet", &m.use_triplet);
        let stages: Vec<&str> = STAGE_NAMES.iter().zip(m.triplet_stages).filter(|(_, on)| *on).map(|(n, _)| *n).collect();
        kv("triplet_stages", &stages.join(","));
        kv("use_p2", &m.use_p2);
        kv("num_classes", &m.num_classes);
        kv("triplet_k", &m.triplet_k);
        kv("share_attention_across_channels", &m.share_attention_across_channels);
        kv("rfa_single_conv", &m.rfa_single_conv);
        kv("seed", &m.seed);
        kv("epochs", &self.epochs);
        kv("batch_size", &self.batch_size);
        kv("lr", &self.lr);
        kv("momentum", &self.momentum);
        kv("weight_decay", &self.weight_decay);
        kv("grad_clip", &self.grad_clip);
        kv("warmup_steps", &self.warmup_steps);
        kv("conf_thresh", &self.conf_thresh);
        kv("nms_iou", &self.nms_iou);
        kv("data_dir", &self.data_dir.display());
        kv("out_dir", &self.out_dir.display());
        kv("eval_every", &self.eval_every);
        s
    }
}
