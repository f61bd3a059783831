use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wdaseg_core::synthdata::BenchmarkSpec;
use wdaseg_nn::{AblationModel, BlockKind, RunConfig};

fn wdaseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wdaseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_spec(dir: &Path) -> PathBuf {
    let mut spec = BenchmarkSpec::desk_default(3);
    spec.n_source = 3;
    spec.n_target_train = 2;
    spec.n_target_test = 2;
    spec.size = 64;
    spec.source.blob_count_range = (2, 4);
    spec.target.blob_count_range = (2, 4);
    let path = dir.join("spec.toml");
    fs::write(&path, toml::to_string(&spec).unwrap()).unwrap();
    path
}

fn tiny_config(dir: &Path, edit: impl FnOnce(&mut RunConfig)) -> PathBuf {
    let mut cfg = RunConfig::desk();
    cfg.train.z_max = 3;
    cfg.train.crop = 32;
    cfg.train.network.base_channels = 8;
    cfg.train.network.depth = 2;
    cfg.train.network.block_kind = BlockKind::Standard;
    cfg.train.disc_width = 4;
    cfg.train.g2_epochs = 1;
    cfg.train.g2_scales = vec![32];
    cfg.weights.sigma1 = 4.0;
    cfg.weights.sigma2 = 2.0;
    edit(&mut cfg);
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn synth(dir: &Path, out: &str) -> PathBuf {
    let spec = tiny_spec(dir);
    let bench = dir.join(out);
    let o = wdaseg(&[
        "synth",
        "--spec",
        s(&spec),
        "--out",
        s(&bench),
        "--ratio",
        "0.5",
        "--seed",
        "7",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    bench
}

fn file_contents(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = file_contents(&synth(dir.path(), "a"));
    let b = file_contents(&synth(dir.path(), "b"));
    assert!(a.len() > 10);
    assert_eq!(a, b);
}

#[test]
fn flags_off_run_logs_only_source_and_adversarial_terms() {
    let dir = tempfile::tempdir().unwrap();
    let bench = synth(dir.path(), "bench");
    let cfg = tiny_config(dir.path(), |_| {});
    let run = dir.path().join("run");
    let o = wdaseg(&[
        "train",
        "--bench",
        s(&bench),
        "--config",
        s(&cfg),
        "--out",
        s(&run),
        "--seed",
        "1",
        "--no-detect",
        "--no-count",
        "--no-pl",
        "--no-cpaug",
        "--no-filter",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let mut r = csv::Reader::from_path(run.join("logs/losses.csv")).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        ["iter", "L_s_src", "L_s_pl", "L_adv", "L_d", "L_c", "lambda_c", "total"]
    );
    let mut rows = 0;
    for rec in r.records() {
        let v: Vec<f64> = rec.unwrap().iter().map(|x| x.parse().unwrap()).collect();
        assert!(v[1] > 0.0 && v[3] > 0.0, "{v:?}");
        assert_eq!(&v[2..3], &[0.0]);
        assert_eq!(&v[4..6], &[0.0, 0.0]);
        rows += 1;
    }
    assert_eq!(rows, 3);
    assert!(run.join("checkpoints/final/g1.safetensors").exists());
    assert!(run.join("eval/metrics.json").exists());
    assert!(fs::read_dir(run.join("previews")).unwrap().count() >= 2);
}

#[test]
fn ablate_prints_eight_rows_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let bench = synth(dir.path(), "bench");
    let cfg = tiny_config(dir.path(), |c| c.train.z_max = 2);
    let g2 = dir.path().join("g2");
    let o = wdaseg(&[
        "pretrain-count",
        "--bench",
        s(&bench),
        "--out",
        s(&g2),
        "--epochs",
        "1",
        "--config",
        s(&cfg),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let out = dir.path().join("ablate");
    let o = wdaseg(&[
        "ablate",
        "--bench",
        s(&bench),
        "--config",
        s(&cfg),
        "--g2",
        s(&g2),
        "--out",
        s(&out),
        "--seed",
        "5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    let models: Vec<&str> = table
        .lines()
        .skip(2)
        .map(|l| l.split('|').nth(1).unwrap().trim())
        .collect();
    let expected: Vec<String> = AblationModel::ALL.iter().map(|m| m.to_string()).collect();
    assert_eq!(models, expected);
    assert_eq!(fs::read_to_string(out.join("ablation.md")).unwrap(), table);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bench = synth(dir.path(), "bench");

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nz_max = \"many\"\n").unwrap();
    let o = wdaseg(&[
        "train",
        "--bench",
        s(&bench),
        "--config",
        s(&bad),
        "--out",
        s(&dir.path().join("r1")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().filter(|l| l.starts_with("error:")).count(), 1);

    let o = wdaseg(&[
        "train",
        "--bench",
        s(&bench),
        "--out",
        s(&dir.path().join("r2")),
        "--bogus",
    ]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = tiny_config(dir.path(), |_| {});
    let o = wdaseg(&[
        "train",
        "--bench",
        s(&bench),
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("r3")),
    ]);
    assert_eq!(o.status.code(), Some(2), "counting on without --g2");

    let missing = dir.path().join("nowhere");
    let o = wdaseg(&[
        "train",
        "--bench",
        s(&missing),
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("r4")),
        "--no-count",
    ]);
    assert_eq!(o.status.code(), Some(3));

    let exploding = tiny_config(dir.path(), |c| {
        c.train.z_max = 20;
        c.train.g1_lr = 1e30;
    });
    let run = dir.path().join("r5");
    let o = wdaseg(&[
        "train",
        "--bench",
        s(&bench),
        "--config",
        s(&exploding),
        "--out",
        s(&run),
        "--no-count",
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}
