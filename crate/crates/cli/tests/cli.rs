use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adann::Mlp;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_adann");

fn smoke_config() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json");
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn adann(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn assert_artifacts_exist(dir: &Path) {
    let m = manifest(dir);
    for (key, rel) in m["artifacts"].as_object().unwrap() {
        assert!(dir.join(rel.as_str().unwrap()).is_file(), "{key} -> {rel} missing");
    }
}

/// Simulate + train once; several tests reuse the result.
fn prepared(tmp: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let cfg = write_config(tmp, "cfg.json", &smoke_config());
    let sim = tmp.join("sim");
    assert_ok(&adann(&["simulate", "--config", s(&cfg), "--out-dir", s(&sim)]));
    let train = tmp.join("train");
    let data = sim.join("data");
    assert_ok(&adann(&[
        "train-offline",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out-dir",
        s(&train),
    ]));
    (cfg, data, train.join("model.json"))
}

#[test]
fn simulate_is_byte_identical_and_sized() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", &smoke_config());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_ok(&adann(&["simulate", "--config", s(&cfg), "--out-dir", s(&a)]));
    assert_ok(&adann(&["simulate", "--config", s(&cfg), "--out-dir", s(&b)]));
    assert_eq!(files(&a), files(&b));
    assert_artifacts_exist(&a);
    let sidecar: Value = serde_json::from_str(&fs::read_to_string(a.join("data/set2.json")).unwrap()).unwrap();
    assert_eq!(sidecar["n_seq"], smoke_config()["scenario"]["n_seq"]);

    let c = tmp.path().join("c");
    assert_ok(&adann(&["simulate", "--config", s(&cfg), "--seed", "5", "--out-dir", s(&c)]));
    assert_ne!(fs::read(a.join("data/set1.f64")).unwrap(), fs::read(c.join("data/set1.f64")).unwrap());
    assert_eq!(manifest(&c)["seed"], 5);
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config();
    cfg["scenario"].as_object_mut().unwrap().remove("n_seq");
    let path = write_config(tmp.path(), "bad.json", &cfg);
    let out = adann(&["simulate", "--config", s(&path), "--out-dir", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("n_seq") && err.contains("line"), "{err}");

    fs::write(&path, "{ \"scenario\": ").unwrap();
    let out = adann(&["simulate", "--config", s(&path)]);
    assert_eq!(out.status.code(), Some(2));

    let mut cfg = smoke_config();
    cfg["online"]["batch_size"] = 0.into();
    let path = write_config(tmp.path(), "zero.json", &cfg);
    let out = adann(&["simulate", "--config", s(&path), "--out-dir", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let out = adann(&["simulate", "--config", s(&tmp.path().join("nope.json"))]);
    assert_eq!(out.status.code(), Some(4));
    let cfg = write_config(tmp.path(), "cfg.json", &smoke_config());
    let out = adann(&[
        "train-offline",
        "--config",
        s(&cfg),
        "--data",
        s(tmp.path()),
        "--out-dir",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn offline_online_and_shape_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, data, model) = prepared(tmp.path());
    let train = model.parent().unwrap();
    assert_artifacts_exist(train);

    // Checkpoint round-trips value-exactly.
    let loaded = Mlp::load(&model).unwrap();
    let again = tmp.path().join("again.json");
    loaded.save(&again).unwrap();
    assert_eq!(fs::read(&model).unwrap(), fs::read(&again).unwrap());
    assert_eq!(Mlp::load(&again).unwrap(), loaded);

    let m = manifest(train);
    let held_out = m["summary"]["held_out_ber"].as_f64().unwrap();
    assert!((0.0..0.5).contains(&held_out));

    // The hash follows the config, not the file.
    let same = write_config(tmp.path(), "same.json", &smoke_config());
    let t2 = tmp.path().join("t2");
    assert_ok(&adann(&["train-offline", "--config", s(&same), "--data", s(&data), "--out-dir", s(&t2)]));
    assert_eq!(manifest(&t2)["config_hash"], m["config_hash"]);
    let t3 = tmp.path().join("t3");
    assert_ok(&adann(&[
        "train-offline",
        "--config",
        s(&same),
        "--seed",
        "1",
        "--data",
        s(&data),
        "--out-dir",
        s(&t3),
    ]));
    assert_ne!(manifest(&t3)["config_hash"], m["config_hash"]);

    let online = tmp.path().join("online");
    assert_ok(&adann(&[
        "run-online",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&model),
        "--data",
        s(&data),
        "--out-dir",
        s(&online),
    ]));
    assert_artifacts_exist(&online);
    let n_seq = smoke_config()["scenario"]["n_seq"].as_u64().unwrap() as usize;
    let nb = smoke_config()["online"]["batch_size"].as_u64().unwrap() as usize;
    let per_set = (n_seq - 10) / nb;
    let trace = fs::read_to_string(online.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 2 * per_set);
    let summary: Value = serde_json::from_str(&fs::read_to_string(online.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config_hash"], m["config_hash"]);
    assert!(online.join("weights.csv").is_file());

    let mut frozen = smoke_config();
    frozen["online"]["adaptive"] = false.into();
    let frozen_cfg = write_config(tmp.path(), "frozen.json", &frozen);
    let still = tmp.path().join("still");
    assert_ok(&adann(&[
        "run-online",
        "--config",
        s(&frozen_cfg),
        "--checkpoint",
        s(&model),
        "--data",
        s(&data),
        "--out-dir",
        s(&still),
    ]));
    let summary: Value = serde_json::from_str(&fs::read_to_string(still.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["method"], "non_adaptive");
    assert_eq!(summary["adaptive"], false);
    assert!(!still.join("weights.csv").exists());

    let mut narrow = smoke_config();
    narrow["online"]["half_window"] = 3.into();
    let narrow_cfg = write_config(tmp.path(), "narrow.json", &narrow);
    let out = adann(&[
        "run-online",
        "--config",
        s(&narrow_cfg),
        "--checkpoint",
        s(&model),
        "--data",
        s(&data),
        "--out-dir",
        s(&tmp.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn compare_writes_one_row_per_method_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, data, model) = prepared(tmp.path());
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        assert_ok(&adann(&[
            "compare",
            "--config",
            s(&cfg),
            "--checkpoint",
            s(&model),
            "--data",
            s(&data),
            "--out-dir",
            s(&dir),
        ]));
        dir
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(files(&a), files(&b));
    assert_artifacts_exist(&a);
    let table = fs::read_to_string(a.join("summary.csv")).unwrap();
    let methods: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        methods,
        [
            "adann",
            "non_adaptive",
            "adann_self_training",
            "mlse_l1",
            "mlse_l3",
            "finetune_gamma_1_8",
            "adann_nb256"
        ]
    );
    for m in &methods {
        assert!(a.join("methods").join(m).join("trace.csv").is_file());
    }
}

#[test]
fn compare_without_inputs_simulates_and_trains() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", &smoke_config());
    let dir = tmp.path().join("full");
    assert_ok(&adann(&["compare", "--config", s(&cfg), "--out-dir", s(&dir)]));
    assert_artifacts_exist(&dir);
    assert!(dir.join("model.json").is_file());
    assert!(dir.join("data/set1.json").is_file());
}

#[test]
fn analyze_weights_reproduces_the_published_ratios() {
    let tmp = tempfile::tempdir().unwrap();
    let sums = tmp.path().join("sums.csv");
    fs::write(
        &sums,
        "k,S_init,S_delta\n1,71.122,5.788\n2,30.641,0.929\n3,31.368,0.250\n4,34.080,0.189\n5,21.338,0.172\n",
    )
    .unwrap();
    let out_dir = tmp.path().join("w");
    let out = adann(&["analyze-weights", "--sums", s(&sums), "--out-dir", s(&out_dir)]);
    assert_ok(&out);
    let csv = fs::read_to_string(out_dir.join("weights.csv")).unwrap();
    let ratios: Vec<String> = csv
        .lines()
        .skip(1)
        .map(|l| format!("{:.3}", l.rsplit(',').next().unwrap().parse::<f64>().unwrap()))
        .collect();
    assert_eq!(ratios, ["0.081", "0.030", "0.008", "0.006", "0.008"]);

    fs::write(&sums, "k,S_init,S_delta\n1,0,1\n").unwrap();
    let out = adann(&["analyze-weights", "--sums", s(&sums), "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
}
