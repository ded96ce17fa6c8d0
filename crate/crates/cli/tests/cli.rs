use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_ksynth");

fn ksynth(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("KSYNTH_THREADS", "1")
        .output()
        .expect("spawn ksynth")
}

fn tiny_config(dir: &Path, epochs: usize) -> String {
    let path = dir.join("tiny.cfg");
    fs::write(
        &path,
        format!(
            "# small run\nseed = 3\ndata.train_per_class = 2\ndata.val_per_class = 1\n\
             train.epochs = {epochs}\ntrain.batch_size = 4\n"
        ),
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn verify_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = ksynth(&["verify", "--out", "v"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let csv = fs::read_to_string(dir.path().join("v/verify.csv")).unwrap();
    let rows = csv.lines().count() - 1;
    assert!(rows > 100);
    assert!(stdout.contains(&format!("{rows} checks, 0 failed")));
    assert!(dir.path().join("v/resolved.cfg").is_file());
}

#[test]
fn injected_fault_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let out = ksynth(&["verify", "--inject-fault", "--out", "v"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let csv = fs::read_to_string(dir.path().join("v/verify.csv")).unwrap();
    assert!(csv.lines().any(|l| l.ends_with(",false")));
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1);
    for out in ["a", "b"] {
        let o = ksynth(&["gen-data", "--config", &cfg, "--out", out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for split in ["train", "val"] {
        let a = dir.path().join("a/data").join(split);
        let b = dir.path().join("b/data").join(split);
        let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert!(names.len() > 1);
        for n in names {
            assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{split}/{n:?}");
        }
    }
    let o = ksynth(&["gen-data", "--config", &cfg, "--seed", "4", "--out", "c"], dir.path());
    assert!(o.status.success());
    assert_ne!(
        fs::read(dir.path().join("a/data/train/00000.t5")).unwrap(),
        fs::read(dir.path().join("c/data/train/00000.t5")).unwrap()
    );
}

fn heatmaps(dir: &Path) -> Vec<(String, String)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name().to_string_lossy().starts_with("heatmap_"))
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read_to_string(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn train_then_export_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1);
    let o = ksynth(&["train", "--config", &cfg, "--out", "run"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,cls,interaction,capacity,total,val_top1"));
    assert_eq!(log.lines().count(), 2);
    assert!(fs::read_to_string(run.join("eval.csv")).unwrap().starts_with("class,accuracy\n"));
    assert!(run.join("checkpoint/resolved.cfg").is_file());

    let o = ksynth(&["export-heatmap", "--checkpoint", "run/checkpoint", "--out", "maps"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let maps = heatmaps(&dir.path().join("maps"));
    assert_eq!(maps.len(), 4);
    for (name, text) in &maps {
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("i,j,l1"), "{name}");
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 16, "{name}");
        assert!(rows.iter().any(|r| r.rsplit(',').next().unwrap().parse::<f64>().unwrap() > 0.0));
    }
}

#[test]
fn untrained_checkpoint_exports_zero_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 0);
    let o = ksynth(&["train", "--config", &cfg, "--out", "run"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = ksynth(&["export-heatmap", "--checkpoint", "run/checkpoint", "--out", "maps"], dir.path());
    assert!(o.status.success());
    let maps = heatmaps(&dir.path().join("maps"));
    assert!(!maps.is_empty());
    for (_, text) in maps {
        for row in text.lines().skip(1) {
            assert_eq!(row.rsplit(',').next().unwrap().parse::<f64>().unwrap(), 0.0);
        }
    }
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "train.epochs = many\n").unwrap();
    let o = ksynth(&["train", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.epochs"));

    fs::write(&bad, "no.such.key = 1\n").unwrap();
    assert_eq!(ksynth(&["verify", "--config", "bad.cfg"], dir.path()).status.code(), Some(2));

    let o = ksynth(&["export-heatmap", "--checkpoint", "missing"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = Command::new(BIN).args(["verify"]).env("KSYNTH_THREADS", "zero").current_dir(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
