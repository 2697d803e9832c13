use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clreg::io::{read_dataset, read_table, ModelFile};
use clreg::model::build_workspace;
use clreg::optimizer::{fit, predict_centered, FitConfig};
use clreg::select::cross_validate;
use clreg::simulate::{generate, generate_lines, r_squared, GenConfig, LinesConfig};
use clreg::ModelParams;
use nalgebra::{dmatrix, dvector, DMatrix};
use tempfile::TempDir;

fn clreg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clreg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn simulate(dir: &Path, prefix: &str, n: &str, p: &str, d: &str, seed: &str) {
    let out = clreg(
        dir,
        &[
            "simulate",
            "--n",
            n,
            "--m",
            n,
            "--p",
            p,
            "--d",
            d,
            "--seed",
            seed,
            "--out-prefix",
            prefix,
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn fit_args<'a>(prefix_fg: &'a str, prefix_bg: &'a str, d: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "fit",
        "--foreground",
        prefix_fg,
        "--background",
        prefix_bg,
        "--response-col",
        "r",
        "-d",
        d,
        "--out",
        out,
    ]
}

#[test]
fn fit_is_byte_identical_and_predicts_like_the_library() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    simulate(dir, "s", "200", "20", "2", "4");
    let a = clreg(
        dir,
        &fit_args("s_foreground.csv", "s_background.csv", "2", "a.json"),
    );
    assert_eq!(code(&a), 0);
    let report: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert!(report["final_ll"].as_f64().unwrap().is_finite());
    assert!(report["converged"].as_bool().unwrap());
    let b = clreg(
        dir,
        &fit_args("s_foreground.csv", "s_background.csv", "2", "b.json"),
    );
    assert_eq!(code(&b), 0);
    let bytes_a = fs::read(dir.join("a.json")).unwrap();
    assert_eq!(bytes_a, fs::read(dir.join("b.json")).unwrap());

    // round trip through the model file
    let model = ModelFile::read(&dir.join("a.json")).unwrap();
    assert_eq!(model.to_json().into_bytes(), bytes_a);

    // in-process fit gives the same model
    let data = read_dataset(
        &dir.join("s_foreground.csv"),
        &dir.join("s_background.csv"),
        "r",
    )
    .unwrap();
    let lib = fit(&data, &FitConfig::new(2)).unwrap();
    assert_eq!(model.params().unwrap(), lib.params);

    // held-in R² against the true conditional mean
    let truth = ModelFile::read(&dir.join("s_truth.json"))
        .unwrap()
        .params()
        .unwrap();
    let oracle = build_workspace(&truth)
        .unwrap()
        .predict_rows(&data.x)
        .unwrap();
    let pred = lib.predict_means(&data.x).unwrap();
    assert!(r_squared(&pred, oracle.as_slice()).unwrap() >= 0.9);

    let out = clreg(
        dir,
        &[
            "predict",
            "--model",
            "a.json",
            "--input",
            "s_foreground.csv",
            "--out",
            "pred.csv",
        ],
    );
    assert_eq!(code(&out), 0);
    let table = read_table(&dir.join("pred.csv")).unwrap();
    assert_eq!(table.header, vec!["row", "mean", "variance"]);
    let expected = lib.predict(&data.x).unwrap();
    for (i, e) in expected.iter().enumerate() {
        assert_eq!(table.values[(i, 0)], (i + 1) as f64);
        assert!((table.values[(i, 1)] - e.mean).abs() <= 1e-12 * e.mean.abs().max(1.0));
        assert!((table.values[(i, 2)] - e.variance).abs() <= 1e-12 * e.variance);
    }
}

#[test]
fn predict_centering_and_shape_errors() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    simulate(dir, "s", "40", "3", "1", "2");
    assert_eq!(
        code(&clreg(
            dir,
            &fit_args("s_foreground.csv", "s_background.csv", "1", "m.json")
        )),
        0
    );
    let model = ModelFile::read(&dir.join("m.json")).unwrap();
    let c = &model.center_x;
    let row = format!("{},{},{}", c[0], c[1], c[2]);
    fs::write(dir.join("in.csv"), format!("x1,x2,x3\n{row}\n{row}\n")).unwrap();
    let out = clreg(
        dir,
        &[
            "predict", "--model", "m.json", "--input", "in.csv", "--out", "p.csv",
        ],
    );
    assert_eq!(code(&out), 0);
    let t = read_table(&dir.join("p.csv")).unwrap();
    assert!((t.values[(0, 1)] - model.center_r).abs() < 1e-12);
    assert_eq!(t.values.row(0).columns(1, 2), t.values.row(1).columns(1, 2));

    fs::write(dir.join("bad.csv"), "a,b\n1,2\n").unwrap();
    let out = clreg(
        dir,
        &[
            "predict", "--model", "m.json", "--input", "bad.csv", "--out", "p2.csv",
        ],
    );
    assert_eq!(code(&out), 3);
}

#[test]
fn malformed_input_names_file_and_line() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("fg.csv"), "x1,x2,r\n1,2,3\n4,five,6\n").unwrap();
    fs::write(dir.join("bg.csv"), "x1,x2\n1,2\n").unwrap();
    let out = clreg(dir, &fit_args("fg.csv", "bg.csv", "1", "m.json"));
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("fg.csv") && err.contains("line 3"), "{err}");

    fs::write(dir.join("fg.csv"), "x1,x2,r\n1,2,3\n4,5,6\n").unwrap();
    fs::write(dir.join("bg.csv"), "x1\n1\n").unwrap();
    assert_eq!(
        code(&clreg(dir, &fit_args("fg.csv", "bg.csv", "1", "m.json"))),
        3
    );

    let out = clreg(dir, &fit_args("fg.csv", "bg.csv", "1", "fg.csv"));
    assert_eq!(code(&out), 2);
}

#[test]
fn zero_alpha_equals_empty_background_file() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    simulate(dir, "s", "50", "4", "1", "6");
    fs::write(dir.join("empty.csv"), "x1,x2,x3,x4\n").unwrap();
    let mut args = fit_args("s_foreground.csv", "s_background.csv", "1", "a.json");
    args.extend(["--alpha", "0"]);
    let a = clreg(dir, &args);
    let b = clreg(
        dir,
        &fit_args("s_foreground.csv", "empty.csv", "1", "b.json"),
    );
    let ra: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    let rb: serde_json::Value = serde_json::from_slice(&b.stdout).unwrap();
    assert_eq!(ra["final_ll"], rb["final_ll"]);
}

#[test]
fn simulate_writes_generator_output() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    simulate(dir, "a", "30", "5", "2", "17");
    simulate(dir, "b", "30", "5", "2", "17");
    for suffix in ["_foreground.csv", "_background.csv", "_truth.json"] {
        assert_eq!(
            fs::read(dir.join(format!("a{suffix}"))).unwrap(),
            fs::read(dir.join(format!("b{suffix}"))).unwrap()
        );
    }
    let (data, truth) = generate(&GenConfig::new(30, 30, 5, 2, 17)).unwrap();
    let back = read_dataset(
        &dir.join("a_foreground.csv"),
        &dir.join("a_background.csv"),
        "r",
    )
    .unwrap();
    assert_eq!(back.x, data.x);
    assert_eq!(back.y, data.y);
    assert_eq!(back.r, data.r);
    assert_eq!(
        ModelFile::read(&dir.join("a_truth.json"))
            .unwrap()
            .params()
            .unwrap(),
        truth
    );

    let out = clreg(
        dir,
        &[
            "simulate",
            "--n",
            "5",
            "--m",
            "5",
            "--p",
            "2",
            "--d",
            "3",
            "--out-prefix",
            "c",
        ],
    );
    assert_eq!(code(&out), 2);
    let out = clreg(
        dir,
        &[
            "simulate",
            "--n",
            "5",
            "--m",
            "5",
            "--p",
            "0",
            "--d",
            "0",
            "--out-prefix",
            "c",
        ],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn simulate_noiseless_truth() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let s = dmatrix![1.0, 0.0; 0.5, 1.0; -1.0, 2.0];
    let truth = ModelParams {
        s: s.clone(),
        w: DMatrix::zeros(3, 2),
        beta: dvector![0.0, 0.0],
        sigma2: 0.0,
        tau2: 0.0,
    };
    ModelFile::from_params(&truth, 1.0, None)
        .write(&dir.join("t.json"))
        .unwrap();
    let out = clreg(
        dir,
        &[
            "simulate",
            "--n",
            "20",
            "--m",
            "5",
            "--p",
            "3",
            "--d",
            "2",
            "--truth",
            "t.json",
            "--out-prefix",
            "z",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let data = read_dataset(
        &dir.join("z_foreground.csv"),
        &dir.join("z_background.csv"),
        "r",
    )
    .unwrap();
    assert!(data.r.iter().all(|&v| v == 0.0));
    let proj = &s * (s.transpose() * &s).try_inverse().unwrap() * s.transpose();
    assert!((&data.x - &data.x * proj).amax() < 1e-12);
}

#[test]
fn simulate_lines_matches_generator() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let out = clreg(
        dir,
        &[
            "simulate",
            "--lines",
            "--n",
            "20",
            "--m",
            "10",
            "--seed",
            "3",
            "--out-prefix",
            "l",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let data = read_dataset(
        &dir.join("l_foreground.csv"),
        &dir.join("l_background.csv"),
        "r",
    )
    .unwrap();
    let lib = generate_lines(&LinesConfig {
        n_fg: 20,
        n_bg: 10,
        seed: 3,
        ..LinesConfig::default()
    })
    .unwrap();
    assert_eq!(data.x, lib.x);
    assert_eq!(data.y, lib.y);
    assert_eq!(data.r, lib.r);
    assert!(!dir.join("l_truth.json").exists());
}

#[test]
fn gradcheck_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&clreg(dir, &["gradcheck"])), 0);
    let out = clreg(dir, &["gradcheck", "--rtol", "0"]);
    assert_eq!(code(&out), 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("seeds"));
    let out = clreg(dir, &["gradcheck", "--n", "0"]);
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for block in ["w", "beta", "tau2"] {
        assert_eq!(report["worst"][block].as_f64(), Some(0.0));
    }
}

fn rank_model(dir: &Path, w: DMatrix<f64>, beta: nalgebra::DVector<f64>) {
    let p = w.nrows();
    let d = w.ncols();
    let params = ModelParams::new(DMatrix::identity(p, d), w, beta, 1.0, 1.0).unwrap();
    ModelFile::from_params(&params, 1.0, None)
        .write(&dir.join("r.json"))
        .unwrap();
}

#[test]
fn rank_examples() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    rank_model(dir, dmatrix![3.0; -5.0; 0.0; 1.0], dvector![1.5]);
    assert_eq!(
        code(&clreg(
            dir,
            &["rank", "--model", "r.json", "--out", "rank.csv"]
        )),
        0
    );
    let text = fs::read_to_string(dir.join("rank.csv")).unwrap();
    let features: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(features, vec!["2", "1", "4", "3"]);

    rank_model(dir, dmatrix![1.0; 2.0; -2.0], dvector![1.0]);
    assert_eq!(
        code(&clreg(
            dir,
            &["rank", "--model", "r.json", "--out", "rank.csv"]
        )),
        0
    );
    let text = fs::read_to_string(dir.join("rank.csv")).unwrap();
    let features: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(features, vec!["2", "3", "1"]);

    rank_model(
        dir,
        dmatrix![1.0, 4.0; 2.0, -1.0; 0.5, 3.0],
        dvector![0.0, 0.7],
    );
    for flag in [None, Some("--no-canonical-rotation")] {
        let mut args = vec!["rank", "--model", "r.json", "--out", "rank.csv"];
        args.extend(flag);
        assert_eq!(code(&clreg(dir, &args)), 0);
        let text = fs::read_to_string(dir.join("rank.csv")).unwrap();
        let scores: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        let expected = [4.0, 3.0, -1.0];
        for (a, b) in scores.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    rank_model(dir, dmatrix![1.0; 2.0], dvector![0.0]);
    assert_eq!(
        code(&clreg(
            dir,
            &["rank", "--model", "r.json", "--out", "rank.csv"]
        )),
        4
    );
}

#[test]
fn cv_report_matches_library() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    simulate(dir, "s", "60", "5", "2", "8");
    let out = clreg(
        dir,
        &[
            "cv",
            "--foreground",
            "s_foreground.csv",
            "--background",
            "s_background.csv",
            "--response-col",
            "r",
            "--d-grid",
            "1,2,4",
            "--k",
            "5",
            "--seed",
            "2",
            "--out",
            "cv.json",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let data = read_dataset(
        &dir.join("s_foreground.csv"),
        &dir.join("s_background.csv"),
        "r",
    )
    .unwrap();
    let lib = cross_validate(
        &data,
        &[1, 2, 4],
        5,
        &FitConfig {
            seed: 2,
            ..FitConfig::new(1)
        },
    )
    .unwrap();
    let file: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("cv.json")).unwrap()).unwrap();
    assert_eq!(file, serde_json::to_value(&lib).unwrap());
    let tidy = fs::read_to_string(dir.join("cv.csv")).unwrap();
    assert_eq!(tidy.lines().count(), 1 + 3 * 5);
    assert!(tidy.starts_with("d,fold,train_r2,test_r2\n"));

    // leave-one-out on ten rows reports ten cells per d
    simulate(dir, "t", "10", "3", "1", "1");
    let out = clreg(
        dir,
        &[
            "cv",
            "--foreground",
            "t_foreground.csv",
            "--background",
            "t_background.csv",
            "--response-col",
            "r",
            "--d-grid",
            "1,2",
            "--k",
            "10",
            "--out",
            "loo.json",
        ],
    );
    assert_eq!(code(&out), 0);
    let loo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("loo.json")).unwrap()).unwrap();
    assert_eq!(loo["test_r2"][0].as_array().unwrap().len(), 10);
    assert_eq!(loo["test_r2"][1].as_array().unwrap().len(), 10);

    // constant response: every cell invalid
    let fg = fs::read_to_string(dir.join("t_foreground.csv")).unwrap();
    let mut lines = fg.lines();
    let mut constant = format!("{}\n", lines.next().unwrap());
    for line in lines {
        let (head, _) = line.rsplit_once(',').unwrap();
        constant.push_str(&format!("{head},1\n"));
    }
    fs::write(dir.join("const_fg.csv"), constant).unwrap();
    let out = clreg(
        dir,
        &[
            "cv",
            "--foreground",
            "const_fg.csv",
            "--background",
            "t_background.csv",
            "--response-col",
            "r",
            "--d-grid",
            "1",
            "--k",
            "5",
            "--out",
            "c.json",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let c: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("c.json")).unwrap()).unwrap();
    assert!(c["test_r2"][0]
        .as_array()
        .unwrap()
        .iter()
        .all(|v| v.is_null()));
    assert!(c["best_d"].is_null());
}

#[test]
fn predict_matches_library_on_stored_offsets() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    simulate(dir, "s", "30", "4", "1", "12");
    assert_eq!(
        code(&clreg(
            dir,
            &fit_args("s_foreground.csv", "s_background.csv", "1", "m.json")
        )),
        0
    );
    let model = ModelFile::read(&dir.join("m.json")).unwrap();
    let x = read_table(&dir.join("s_background.csv")).unwrap().values;
    let out = clreg(
        dir,
        &[
            "predict",
            "--model",
            "m.json",
            "--input",
            "s_background.csv",
            "--out",
            "p.csv",
        ],
    );
    assert_eq!(code(&out), 0);
    let t = read_table(&dir.join("p.csv")).unwrap();
    let lib = predict_centered(
        &model.params().unwrap(),
        &model.center_x(),
        model.center_r,
        &x,
    )
    .unwrap();
    for (i, e) in lib.iter().enumerate() {
        assert!((t.values[(i, 1)] - e.mean).abs() <= 1e-12 * e.mean.abs().max(1.0));
    }
}
