//! End-to-end tests of the `rfadet` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn rfadet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfadet")).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = rfadet(args);
    assert!(out.status.success(), "rfadet {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn exit_code(args: &[&str]) -> (i32, String) {
    let out = rfadet(args);
    (out.status.code().expect("exit code"), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn gen_data(dir: &Path, seed: u64, train: usize, val: usize) {
    run_ok(&[
        "gen-data",
        "--out",
        s(dir),
        "--seed",
        &seed.to_string(),
        "--train",
        &train.to_string(),
        "--val",
        &val.to_string(),
        "--img-size",
        "32",
    ]);
}

fn tiny_config(data: &Path) -> String {
    format!(
        "img_size = 32\nbase_width = 4\nepochs = 2\nbatch_size = 4\neval_every = 2\ndata_dir = {}\n",
        data.display()
    )
}

/// A small dataset and one trained run shared by the tests.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("tiny.cfg")
    }

    fn run(&self) -> PathBuf {
        self.dir.path().join("run")
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let f = Fixture {
            dir: tempfile::tempdir().expect("tempdir"),
        };
        gen_data(&f.data(), 3, 10, 6);
        fs::write(f.config(), tiny_config(&f.data())).expect("write config");
        run_ok(&["train", "--config", s(&f.config()), "--out", s(&f.run())]);
        f
    })
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let header = r.headers().expect("header").iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.expect("row").iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn gen_data_is_deterministic_and_seed_dependent() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    gen_data(&a, 5, 4, 2);
    gen_data(&b, 5, 4, 2);
    gen_data(&c, 6, 4, 2);
    let files = |dir: &Path, ext: &str| {
        let mut n = 0;
        for split in ["train", "val"] {
            n += fs::read_dir(dir.join(split))
                .unwrap()
                .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext))
                .count();
        }
        n
    };
    assert_eq!(files(&a, "ppm"), 6);
    assert_eq!(files(&a, "txt"), 6);
    for rel in ["manifest.txt", "train/000000.ppm", "train/000003.txt", "val/000001.ppm"] {
        let (x, y) = (fs::read(a.join(rel)), fs::read(b.join(rel)));
        assert!(x.is_ok(), "missing {rel}");
        assert_eq!(x.unwrap(), y.unwrap(), "{rel} differs between runs");
    }
    assert_ne!(fs::read(a.join("manifest.txt")).unwrap(), fs::read(c.join("manifest.txt")).unwrap());
}

#[test]
fn unknown_config_key_exits_2_and_names_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 1\nlearning_rate = 0.1\n").unwrap();
    let (code, err) = exit_code(&["train", "--config", s(&cfg)]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("line 2") && err.contains("learning_rate"), "{err}");
}

#[test]
fn training_is_reproducible_and_relaunchable_from_snapshot() {
    let f = fixture();
    let (header, rows) = read_csv(&f.run().join("metrics.csv"));
    assert_eq!(header, ["step", "loss", "loss_box", "loss_obj", "loss_cls", "lr"]);
    // 10 images, batch 4, 2 epochs
    assert_eq!(rows.len(), 6);
    assert!(f.run().join("model.ckpt").exists());
    assert!(f.run().join("model_step2.ckpt").exists());

    let again = f.dir.path().join("again");
    run_ok(&["train", "--config", s(&f.config()), "--out", s(&again)]);
    let relaunch = f.dir.path().join("relaunch");
    run_ok(&["train", "--config", s(&f.run().join("config.snapshot")), "--out", s(&relaunch)]);
    let metrics = fs::read(f.run().join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read(again.join("metrics.csv")).unwrap());
    assert_eq!(metrics, fs::read(relaunch.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(f.run().join("model.ckpt")).unwrap(), fs::read(relaunch.join("model.ckpt")).unwrap());
}

#[test]
fn oracle_eval_scores_one() {
    let f = fixture();
    let out = f.dir.path().join("eval-oracle");
    let stdout = run_ok(&[
        "eval",
        "--checkpoint",
        s(&f.run().join("model.ckpt")),
        "--data",
        s(&f.data()),
        "--out",
        s(&out),
        "--oracle",
    ]);
    assert!(stdout.contains("mAP(50): 1.0000"), "{stdout}");
    let (header, rows) = read_csv(&out.join("eval.csv"));
    assert_eq!(header[..2], ["map50", "map50_95"]);
    assert_eq!(rows[0][0].parse::<f64>().unwrap(), 1.0);
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn eval_writes_monotone_pr_curves_and_a_valid_svg() {
    let f = fixture();
    let out = f.dir.path().join("eval");
    run_ok(&[
        "eval",
        "--checkpoint",
        s(&f.run().join("model.ckpt")),
        "--data",
        s(&f.data()),
        "--out",
        s(&out),
        "--conf",
        "0.001",
    ]);
    let mut points = 0;
    for k in 0..3 {
        let (header, rows) = read_csv(&out.join(format!("pr_class{k}.csv")));
        assert_eq!(header, ["recall", "precision", "score"]);
        let recall: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
        assert!(recall.windows(2).all(|w| w[0] <= w[1]), "class {k} recall decreases");
        let scores: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]), "class {k} scores not ranked");
        points += rows.len();
    }
    assert!(points > 0, "no detections at conf 0.001");

    let svg = fs::read_to_string(out.join("pr.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).expect("well-formed SVG");
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    let classes: Vec<&str> = doc
        .descendants()
        .filter(|n| n.has_tag_name("polyline"))
        .filter_map(|n| n.attribute("data-class"))
        .collect();
    assert_eq!(classes, ["0", "1", "2"]);
}

#[test]
fn checkpoint_config_mismatch_lists_problems() {
    let f = fixture();
    let dir = f.dir.path().join("mismatch");
    fs::create_dir_all(&dir).unwrap();
    fs::copy(f.run().join("model.ckpt"), dir.join("model.ckpt")).unwrap();
    let snapshot = fs::read_to_string(f.run().join("config.snapshot"))
        .unwrap()
        .replace("base_width = 4", "base_width = 8");
    fs::write(dir.join("config.snapshot"), snapshot).unwrap();
    let (code, err) = exit_code(&[
        "eval",
        "--checkpoint",
        s(&dir.join("model.ckpt")),
        "--data",
        s(&f.data()),
        "--out",
        s(&dir.join("eval")),
    ]);
    assert_eq!(code, 4, "{err}");
    assert!(err.contains("problems") && err.contains("model expects"), "{err}");
}

#[test]
fn gradcheck_module_selection_and_failures() {
    let stdout = run_ok(&["gradcheck", "--module", "triplet_attention"]);
    let rows: Vec<&str> = stdout.lines().skip(1).collect();
    assert_eq!(rows.len(), 1, "{stdout}");
    assert!(rows[0].starts_with("triplet_attention") && rows[0].ends_with("PASS"), "{stdout}");

    let (code, err) = exit_code(&["gradcheck", "--module", "no_such_module"]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("triplet_attention"), "error should list modules: {err}");

    let (code, _) = exit_code(&["gradcheck", "--module", "fixture_wrong_backward"]);
    assert_eq!(code, 3);
}

#[test]
fn self_compare_has_zero_deltas() {
    let f = fixture();
    let out = f.dir.path().join("compare");
    run_ok(&["compare", "--config-a", s(&f.config()), "--config-b", s(&f.config()), "--out", s(&out)]);
    let (header, rows) = read_csv(&out.join("compare.csv"));
    assert_eq!(
        header,
        [
            "variant",
            "map50",
            "map50_95",
            "ap50_class0",
            "ap50_class1",
            "ap50_class2",
            "params",
            "train_seconds"
        ]
    );
    let delta = rows.iter().find(|r| r[0] == "delta").expect("delta row");
    for (name, cell) in header.iter().zip(delta).skip(1) {
        if name != "train_seconds" && !cell.is_empty() {
            assert_eq!(cell.parse::<f64>().unwrap(), 0.0, "{name} delta");
        }
    }
    assert_eq!(rows[0][1..7], rows[1][1..7]);
}

#[test]
fn compare_rejects_different_data() {
    let f = fixture();
    let other = f.dir.path().join("other.cfg");
    fs::write(&other, tiny_config(&f.dir.path().join("elsewhere"))).unwrap();
    let (code, err) = exit_code(&[
        "compare",
        "--config-a",
        s(&f.config()),
        "--config-b",
        s(&other),
        "--out",
        s(&f.dir.path().join("cmp-bad")),
    ]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("data_dir"), "{err}");
}

#[test]
fn missing_data_dir_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.cfg");
    fs::write(&cfg, tiny_config(&tmp.path().join("absent"))).unwrap();
    let (code, err) = exit_code(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(code, 4, "{err}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(exit_code(&["train"]).0, 2);
    assert_eq!(exit_code(&["frobnicate"]).0, 2);
    assert_eq!(exit_code(&["--help"]).0, 0);
}
