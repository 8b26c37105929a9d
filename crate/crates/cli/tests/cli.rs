use std::path::Path;
use std::process::{Command, Output};

fn odeformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odeformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = odeformer(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "d_emb = 8\nn_heads = 2\nenc_layers = 1\ndec_layers = 1\nd_max = 2\nmax_target_length = 48\nffn_mult = 2\n";

#[test]
fn help_documents_every_subcommand() {
    let out = ok(&["--help"]);
    for cmd in ["generate", "train", "infer", "evaluate", "bench", "plot"] {
        assert!(out.contains(cmd), "missing {cmd}");
    }
    let train = ok(&["train", "--help"]);
    for flag in ["--data", "--steps", "--out", "--resume", "--lr", "--log", "--seed"] {
        assert!(train.contains(flag), "missing {flag}");
    }
    let eval = ok(&["evaluate", "--help"]);
    for flag in ["--noise", "--subsample", "--beam", "--temperature", "--opt"] {
        assert!(eval.contains(flag), "missing {flag}");
    }
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    assert_eq!(odeformer(&["generate", "--bogus"]).status.code(), Some(1));
    assert_eq!(odeformer(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = odeformer(&["generate", "--count", "1", "--out", p(dir.path()), "--grid-min", "9", "--grid-max", "3"]);
    assert_eq!(out.status.code(), Some(1));
    let missing = dir.path().join("nope.ckpt");
    let out = odeformer(&["infer", "--model", p(&missing), "--input", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn plot_with_empty_results_warns() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("empty.csv");
    std::fs::write(&csv, "").unwrap();
    let out = odeformer(&["plot", "--results", p(&csv), "--out-dir", p(&dir.path().join("figs"))]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn generate_train_infer_evaluate_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    ok(&[
        "--seed", "3", "generate", "--count", "6", "--out", p(&data), "--dmax", "2", "--bmax", "2", "--umax", "1",
        "--grid-min", "20", "--grid-max", "30", "--timeout-ms", "200",
    ]);
    let lines = std::fs::read_to_string(data.join("records.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 6);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);

    let mc = d.join("tiny.toml");
    std::fs::write(&mc, TINY).unwrap();
    let ckpt = d.join("m.ckpt");
    let log = d.join("loss.csv");
    let args = |steps: &'static str| {
        vec![
            "train".to_string(), "--data".into(), p(&data).into(), "--out".into(), p(&ckpt).into(), "--steps".into(),
            steps.into(), "--model-config".into(), p(&mc).into(), "--log".into(), p(&log).into(), "--batch-tokens".into(),
            "200".into(),
        ]
    };
    let run = |a: Vec<String>| ok(&a.iter().map(String::as_str).collect::<Vec<_>>());

    // zero steps saves the initialization
    run(args("0"));
    assert!(ckpt.exists());
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 1);

    run(args("3"));
    let mut resume = args("2");
    resume.extend(["--resume".into(), p(&ckpt).into()]);
    let out = run(resume);
    assert!(out.contains("step 5"), "{out}");
    let log_text = std::fs::read_to_string(&log).unwrap();
    let steps: Vec<&str> = log_text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "3", "4", "5"]);

    let traj = d.join("traj.csv");
    let mut text = String::from("t,x0\n");
    for i in 0..30 {
        let t = 1.0 + i as f64 * 0.3;
        text.push_str(&format!("{t},{}\n", (-0.4 * t).exp()));
    }
    std::fs::write(&traj, text).unwrap();
    // an untrained model may produce nothing usable; only the exit code
    // contract is checked
    let out = odeformer(&["infer", "--model", p(&ckpt), "--input", p(&traj), "--beam", "4"]);
    assert!(matches!(out.status.code(), Some(0) | Some(2)));

    let results = d.join("results.csv");
    ok(&[
        "--seed", "1", "evaluate", "--model", p(&ckpt), "--entries", "1,2", "--noise", "0,0.05", "--subsample", "0",
        "--beam", "2", "--out", p(&results),
    ]);
    let rows = std::fs::read_to_string(&results).unwrap();
    // header + 2 entries x 2 noise levels x 2 tasks
    assert_eq!(rows.lines().count(), 1 + 8);
    assert!(d.join("results.csv.json").exists());

    let figs = d.join("figs");
    let out = ok(&["plot", "--results", p(&results), "--out-dir", p(&figs)]);
    assert_eq!(out.lines().count(), 4);
    for name in ["accuracy_vs_noise_reconstruction.svg", "r2_histogram_generalization.svg"] {
        let svg = std::fs::read_to_string(figs.join(name)).unwrap();
        assert!(svg.starts_with("<svg") || svg.contains("<svg"));
    }

    let out = ok(&["bench", "--model", p(&ckpt), "--data", p(&data), "--beam", "2", "--limit", "3", "--no-rescale"]);
    assert!(out.contains("reconstruction accuracy"));
}
