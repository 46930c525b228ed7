//! End-to-end checks of the command-line surface via the built binary.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sits-tempo"))
}

fn run_ok(cmd: &mut Command) -> String {
    let output = cmd.output().expect("binary runs");
    let stdout = String::from_utf8_lossy(&output.stdout).into_owned();
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(output.status.success(), "command failed:\n{stdout}\n{stderr}");
    stdout
}

#[test]
fn synth_train_evaluate_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();

    // Small synthetic dataset file.
    let spec_path = dir.path().join("synth.cfg");
    std::fs::write(
        &spec_path,
        "classes = 3\ntimesteps = 12\nchannels = 4\nn_samples = 240\nnoise_sigma = 0.1\nseed = 9\n",
    )
    .unwrap();
    let out = run_ok(bin().args([
        "synth",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        data.join("synth.txt").to_str().unwrap(),
    ]));
    assert!(out.contains("240 samples"));
    assert!(data.join("synth.txt.meta").exists());

    // Train a small explicit config on it.
    let cfg_path = dir.path().join("model.cfg");
    std::fs::write(
        &cfg_path,
        "model = temporal_cnn\nnb_conv_layers = 2\nnb_conv_units = 8\nnb_fc_units = 16\n\
         filter_size = 3\ndropout = 0.1\n\
         optimizer = adam\nlearning_rate = 0.001\nbatch_size = 32\nmax_epochs = 25\n\
         loss = cross_entropy\nearly_stopping = off\nseed = 4\n",
    )
    .unwrap();
    let run_dir = dir.path().join("run");
    let out = run_ok(bin().args([
        "train",
        "--dataset",
        "synth",
        "--data-dir",
        data.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]));
    assert!(out.contains("finished"), "{out}");
    for artifact in ["model.stm", "train_log.csv", "train_log.txt", "report.md", "confusion.csv"] {
        assert!(run_dir.join(artifact).exists(), "missing {artifact}");
    }

    // Evaluate the saved model on the same dataset directory.
    let eval_dir = dir.path().join("eval");
    let out = run_ok(bin().args([
        "evaluate",
        "--model-file",
        run_dir.join("model.stm").to_str().unwrap(),
        "--dataset",
        "synth",
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]));
    assert!(out.contains("evaluated 240 samples"), "{out}");

    // Grid from a spec file, then re-emit the report.
    let grid_spec = dir.path().join("grid.cfg");
    std::fs::write(
        &grid_spec,
        format!(
            "name = mini\ndataset = file\ndata_path = {}\n\
             train_fraction = 0.6\nval_fraction = 0.2\n\
             model = temporal_cnn\nnb_conv_layers = 2\nnb_conv_units = 4\nnb_fc_units = 8\n\
             filter_size = 3\ndropout = 0.1\ngrid.nb_conv_units = 4,6\n\
             batch_size = 32\nmax_epochs = 3\nearly_stopping = off\nseeds = 1\n",
            data.join("synth.txt").display()
        ),
    )
    .unwrap();
    let grid_dir = dir.path().join("grid");
    let out = run_ok(bin().args([
        "grid",
        "--spec",
        grid_spec.to_str().unwrap(),
        "--out",
        grid_dir.to_str().unwrap(),
    ]));
    assert!(out.contains("2 trials executed"), "{out}");
    assert!(grid_dir.join("results.csv").exists());
    assert!(grid_dir.join("manifest.txt").exists());

    // Rerun resumes every trial from the manifest.
    let out = run_ok(bin().args([
        "grid",
        "--spec",
        grid_spec.to_str().unwrap(),
        "--out",
        grid_dir.to_str().unwrap(),
    ]));
    assert!(out.contains("0 trials executed, 2 resumed"), "{out}");

    let out = run_ok(bin().args(["report", "--in", grid_dir.to_str().unwrap(), "--format", "markdown"]));
    assert!(out.contains("| Config |"), "{out}");
}

#[test]
fn seed_env_var_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    run_ok(bin().args([
        "synth",
        "--out",
        data.join("synth.txt").to_str().unwrap(),
    ]));

    let train_once = |out_name: &str, env: Option<(&str, &str)>| -> String {
        let run_dir = dir.path().join(out_name);
        let mut cmd = bin();
        cmd.args([
            "train",
            "--dataset",
            "synth",
            "--data-dir",
            data.to_str().unwrap(),
            "--model",
            "temporal_cnn",
            "--out",
            run_dir.to_str().unwrap(),
        ]);
        if let Some((k, v)) = env {
            cmd.env(k, v);
        }
        run_ok(&mut cmd)
    };
    let out = train_once("env_run", Some(("SITS_TEMPO_SEED", "77")));
    assert!(out.contains("seed 77"), "{out}");
}

#[test]
fn unknown_grid_preset_lists_known_names() {
    let dir = tempfile::tempdir().unwrap();
    let output = bin()
        .args(["grid", "--preset", "bogus", "--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("width_tiselac") && stderr.contains("desk_synthetic"), "{stderr}");
}

#[test]
fn tiselac_layout_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tiselac");
    std::fs::create_dir_all(&data).unwrap();

    // Construct a tiny well-formed archive: 60 train rows, 20 test rows.
    let write_pair = |prefix: &str, n: usize, seed: u64| {
        let mut features = String::new();
        let mut labels = String::new();
        let mut state = seed;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        for i in 0..n {
            let class = i % 3 + 1;
            let row: Vec<String> = (0..230)
                .map(|j| format!("{:.4}", class as f64 * 100.0 + j as f64 * 0.1 + next()))
                .collect();
            features.push_str(&row.join(","));
            features.push('\n');
            labels.push_str(&format!("{class}\n"));
        }
        std::fs::write(data.join(format!("{prefix}_features.txt")), features).unwrap();
        std::fs::write(data.join(format!("{prefix}_labels.txt")), labels).unwrap();
    };
    write_pair("train", 60, 5);
    write_pair("test", 20, 9);

    let run_dir = dir.path().join("run");
    let cfg_path = dir.path().join("model.cfg");
    std::fs::write(
        &cfg_path,
        "model = time_cnn\ndropout = 0.1\noptimizer = adam\nlearning_rate = 0.001\n\
         batch_size = 16\nmax_epochs = 3\nloss = mse\nearly_stopping = off\nseed = 2\n",
    )
    .unwrap();
    let out = run_ok(bin().args([
        "train",
        "--dataset",
        "tiselac",
        "--data-dir",
        data.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]));
    // Train/val carved from the train pair; the test pair is held out.
    assert!(out.contains("48 train / 12 val / 20 test"), "{out}");
}

#[test]
fn report_respects_format(){
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("results.csv"),
        "config,hash,seed,status,oa,f1,train_seconds,epoch_seconds,best_epoch,error\n\
         model=x,abc,1,ok,91.5,91.2,10,0.5,7,\n",
    )
    .unwrap();
    let out = run_ok(bin().args(["report", "--in", dir.path().to_str().unwrap(), "--format", "csv"]));
    assert!(out.contains("results.csv"), "{out}");
    assert!(dir.path().join("results.md").exists() == false);
}
