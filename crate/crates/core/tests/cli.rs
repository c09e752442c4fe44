use std::fs;
use std::path::Path;

use meanflow::cli::run_command;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["meanflow"];
    argv.extend_from_slice(args);
    run_command(argv)
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SHORT_DELTA: &str = r#"
seed = 1

[data]
kind = "delta"
points = [[1.0, 1.0]]

[train]
steps = 40
batch_size = 16
warmup_steps = 4
decay_milestones = [{ step = 30, lr = 1e-4 }]

[eval]
samples = 64
seeds = [0]
"#;

#[test]
fn train_sample_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "delta.toml", SHORT_DELTA);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    assert_eq!(run(&["train", "--config", &cfg, "--out", out_s]), 0);
    for f in ["model.json", "model.bin", "loss.csv", "train_config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 41);

    let ckpt = out.join("model");
    let ckpt_s = ckpt.to_str().unwrap();
    let samples = dir.path().join("samples");
    let code = run(&[
        "sample", "--ckpt", ckpt_s, "--out", samples.to_str().unwrap(), "--steps", "1",
        "--cfg-mode", "scaled", "--omega", "1.5", "--n", "10",
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(samples.join("samples.csv")).unwrap();
    assert!(csv.starts_with("class,x,y\n"));
    assert_eq!(csv.lines().count(), 11);
    let svg = fs::read_to_string(samples.join("samples.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    // The dataset came from the checkpoint's training echo.
    let echo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(samples.join("sample_config.json")).unwrap()).unwrap();
    assert_eq!(echo["data"]["kind"], "delta");
    assert_eq!(echo["guidance"]["mode"], "scaled");
    assert_eq!(echo["guidance"]["omega"], 1.5);

    let eval = dir.path().join("eval");
    assert_eq!(run(&["eval", "--ckpt", ckpt_s, "--out", eval.to_str().unwrap()]), 0);
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["metrics"]["energy_distance.mean"].as_f64().unwrap() >= 0.0);
    assert_eq!(metrics["evaluations"]["meanflow-1"], 1);
}

#[test]
fn bench_and_sweeps_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "tiny.toml",
        r#"
        [model]
        hidden_dims = [8]
        time_embed_dim = 4

        [train]
        steps = 6
        batch_size = 8
        warmup_steps = 1
        decay_milestones = []

        [eval]
        samples = 30
        seeds = [0, 1]
        ratios = [0.1, 0.9]
        ratio_seeds = [0]
        bench_batch = 8
        bench_repeats = 1
        "#,
    );
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    assert_eq!(run(&["bench", "--config", &cfg, "--out", out_s, "--cfg-mode", "scaled"]), 0);
    let bench = fs::read_to_string(out.join("bench.csv")).unwrap();
    assert!(bench.contains("meanflow-1,scaled@1,2,"));
    assert!(bench.contains("meanflow-25,scaled@1,50,"));

    assert_eq!(run(&["train", "--config", &cfg, "--out", out_s]), 0);
    let ckpt = out.join("model");
    assert_eq!(
        run(&["ablate", "cfg-sweep", "--ckpt", ckpt.to_str().unwrap(), "--out", out_s]),
        0
    );
    let sweep = fs::read_to_string(out.join("cfg_sweep.csv")).unwrap();
    assert!(sweep.starts_with("sampler,mode,omega,seed,energy_distance\n"));
    // 2 samplers x 2 modes x 5 strengths x 2 seeds
    assert_eq!(sweep.lines().count(), 1 + 40);
    assert!(out.join("cfg_sweep").join("meanflow-1_scaled_w2.5.svg").exists());

    assert_eq!(run(&["ablate", "rt-ratio", "--config", &cfg, "--out", out_s]), 0);
    let ratio = fs::read_to_string(out.join("rt_ratio.csv")).unwrap();
    assert_eq!(ratio.lines().count(), 3);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    let bad_key = write(dir.path(), "bad.toml", "[train]\nlearning_rate = 1.0\n");
    assert_eq!(run(&["train", "--config", &bad_key, "--out", out_s]), 1);
    let bad_value = write(dir.path(), "neg.toml", "[guidance]\nmode = \"scaled\"\nomega = 0.5\n");
    assert_eq!(run(&["train", "--config", &bad_value, "--out", out_s]), 1);
    assert_eq!(run(&["train", "--config", "/nonexistent/run.toml"]), 1);
    assert_eq!(run(&["sample", "--ckpt", "/nonexistent/model", "--out", out_s]), 1);
    assert_eq!(run(&["ablate"]), 1);
}

#[test]
fn divergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "hot.toml",
        r#"
        [train]
        steps = 200
        batch_size = 16
        warmup_steps = 1
        lr_max = 1e30
        decay_milestones = []
        "#,
    );
    let out = dir.path().join("out");
    assert_eq!(run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]), 2);
}

#[test]
fn flags_override_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "delta.toml", SHORT_DELTA);
    let out = dir.path().join("out");
    let code = run(&[
        "train", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "9",
        "--train-steps", "8", "--objective", "fm",
    ]);
    assert_eq!(code, 0);
    let echo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("train_config.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 9);
    assert_eq!(echo["train"]["steps"], 8);
    assert_eq!(echo["train"]["objective"], "fm");
    assert_eq!(echo["train"]["batch_size"], 16);
}

#[test]
fn shipped_configs_parse() {
    use meanflow::config::RunConfig;
    let delta = RunConfig::from_toml(include_str!("../../../configs/delta.toml")).unwrap();
    delta.validate().unwrap();
    assert_eq!(delta.data.num_classes(), 1);
    let mixture = RunConfig::from_toml(include_str!("../../../configs/mixture.toml")).unwrap();
    mixture.validate().unwrap();
    let defaults = RunConfig::default();
    assert_eq!(mixture.model, defaults.model);
    assert_eq!(mixture.data, defaults.data);
    assert_eq!(mixture.train.decay_milestones, defaults.train.decay_milestones);
    assert_eq!(mixture.eval, defaults.eval);
}
