use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 14] = [
    "--set",
    "generator.num_units=150",
    "--set",
    "model.gtransformer.hidden_dim=8",
    "--set",
    "model.gtransformer.num_layers=1",
    "--set",
    "model.gtransformer.feedforward_dim=16",
    "--set",
    "model.train.max_epochs=2",
    "--set",
    "model.train.patience=1",
    "--set",
    "simulation.draws=20",
];

fn gformer(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gformer"))
        .args(args)
        .args(["--output", out.to_str().unwrap(), "--quiet"])
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn with_small<'a>(cmd: &[&'a str]) -> Vec<&'a str> {
    cmd.iter().copied().chain(SMALL).collect()
}

#[test]
fn oracle_commands_compose_by_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let gen = ok(&gformer(&with_small(&["gen"]), out));
    assert!(gen.contains("cf_withhold.gfd"));
    ok(&gformer(&with_small(&["train", "--set", "model.policy=true"]), out));
    assert!(out.join("model/checkpoint.gfc").exists());
    assert!(out.join("model/train_log.csv").exists());
    let sim = ok(&gformer(&with_small(&["simulate", "--regime", "treat_high"]), out));
    let sim_path = sim.trim().to_string();
    let eval = ok(&gformer(&with_small(&["eval", "--results", &sim_path]), out));
    assert!(eval.contains("treat_high individual_rmse"));
    assert!(out.join("eval/gtransformer_treat_high_calibration.svg").exists());
    let check = ok(&gformer(&with_small(&["check"]), out));
    assert!(check.contains("observational_policy individual_rmse"));
    let verify = ok(&gformer(
        &with_small(&[
            "verify-oracle",
            "--set",
            "generator.verify_draws=20000",
            "--set",
            "generator.verify_tolerance=0.04",
            "--set",
            "generator.verify_units=1",
        ]),
        out,
    ));
    assert!(verify.lines().skip(1).all(|l| l.ends_with(",pass")), "{verify}");
    assert_eq!(verify.lines().count(), 5);
    let export = Command::new(env!("CARGO_BIN_EXE_gformer"))
        .args(["export", "--data", out.join("data/test.gfd").to_str().unwrap()])
        .args(["--dir", out.join("csv").to_str().unwrap()])
        .output()
        .unwrap();
    ok(&export);
    assert!(out.join("csv/data.csv").exists());
}

#[test]
fn identical_inputs_give_identical_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        ok(&gformer(&with_small(&["gen", "--seed", "11"]), d));
        ok(&gformer(&with_small(&["train", "--seed", "11"]), d));
        ok(&gformer(&with_small(&["simulate", "--seed", "11", "--regime", "withhold"]), d));
    }
    for f in ["data/train.gfd", "data/cf_treat_high.gfd", "model/checkpoint.gfc", "sim/sim_gtransformer_withhold.gfs"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn output_root_comes_from_the_environment() {
    let root = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_gformer"))
        .args(["gen", "--set", "output_dir=\"rel\""])
        .args(SMALL)
        .env("GFORMER_OUTPUT_ROOT", root.path())
        .output()
        .unwrap();
    ok(&o);
    assert!(root.path().join("rel/data/train.gfd").exists());
    assert!(root.path().join("rel/data/config.effective.toml").exists());
}

#[test]
fn exit_codes_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(gformer(&["frobnicate"], out).status.code(), Some(1));
    assert_eq!(gformer(&["gen", "--set", "evaluation.metrics=[\"auc\"]"], out).status.code(), Some(1));
    assert_eq!(gformer(&["train"], out).status.code(), Some(2));
    ok(&gformer(&with_small(&["gen"]), out));
    ok(&gformer(&with_small(&["train", "--set", "model.kind=\"linear\""]), out));
    let missing = gformer(&with_small(&["simulate", "--regime", "nope"]), out);
    assert_eq!(missing.status.code(), Some(6));
    let no_policy = gformer(&with_small(&["simulate", "--regime", "observational_policy"]), out);
    assert_eq!(no_policy.status.code(), Some(6));

    let data = out.join("data/test.gfd");
    let bytes = fs::read(&data).unwrap();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    let bumped = out.join("bumped.gfd");
    fs::write(&bumped, [b"GFORMER dataset v7".as_slice(), &bytes[nl..]].concat()).unwrap();
    let v = gformer(&with_small(&["simulate", "--regime", "withhold", "--data", bumped.to_str().unwrap()]), out);
    assert_eq!(v.status.code(), Some(4));

    let tumor = tempfile::tempdir().unwrap();
    ok(&gformer(
        &[
            "gen",
            "--set",
            "generator.kind=tumor",
            "--set",
            "generator.num_train=4",
            "--set",
            "generator.num_val=4",
            "--set",
            "generator.num_test=4",
        ],
        tumor.path(),
    ));
    let other = tumor.path().join("data/test.gfd");
    let s = gformer(&with_small(&["simulate", "--regime", "withhold", "--data", other.to_str().unwrap()]), out);
    assert_eq!(s.status.code(), Some(5));
}
