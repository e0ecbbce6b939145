use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn idennet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idennet")).args(args).output().expect("run idennet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn gradcheck_passes_and_injected_fault_fails() {
    let ok = idennet(&["gradcheck"]);
    assert!(ok.status.success(), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("relu"));
    let bad = idennet(&["gradcheck", "--inject-fault", "relu", "--seed", "3"]);
    assert!(!bad.status.success());
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn bad_arguments_are_rejected() {
    assert!(!idennet(&["pretrain", "--stream", "emotion", "--depth", "30", "--out", "x"]).status.success());
    assert!(!idennet(&["finetune", "--variant", "g", "--emotion", "e.ckpt"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epochs = many\n");
    let out = idennet(&["synth", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

/// Synthetic data, both pretraining streams, a two-fold IF fine-tune,
/// evaluation of one fold checkpoint and a heatmap export.
#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(
        d,
        "# tiny run\nnum_identities = 2\nnum_expressions = 2\nsamples_per_cell = 4\nsessions = 2\n\
         epochs = 1\nbatch_size = 8\nfolds = 2\naugment = false\ntrain_crop = center\n",
    );
    let data_dir = d.join("data");
    let s = |p: &Path| p.to_string_lossy().into_owned();

    let out = idennet(&["synth", "--config", &cfg, "--seed", "4", "--out", &s(&data_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = s(&data_dir.join("manifest.tsv"));
    assert_eq!(fs::read_to_string(&manifest).unwrap().lines().filter(|l| !l.starts_with('#')).count(), 16);

    let pre = d.join("pre");
    for stream in ["emotion", "identity"] {
        let out = idennet(&["pretrain", "--config", &cfg, "--data", &manifest, "--stream", stream, "--depth", "16", "--out", &s(&pre)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(stdout(&out).contains("stage=pretrain epoch=0"));
        assert!(pre.join(format!("{stream}_best.ckpt")).exists());
        assert!(pre.join(format!("{stream}_epoch_000.ckpt")).exists());
    }

    let ft = d.join("ft");
    let out = idennet(&[
        "finetune",
        "--config",
        &cfg,
        "--data",
        &manifest,
        "--variant",
        "if",
        "--emotion",
        &s(&pre.join("emotion_best.ckpt")),
        "--identity",
        &s(&pre.join("identity_best.ckpt")),
        "--out",
        &s(&ft),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("stage=finetune fold=1 epoch=0"), "{text}");
    assert!(text.contains("variant=if"));
    assert!(fs::read_to_string(ft.join("report.txt")).unwrap().contains("accuracy="));
    assert_eq!(fs::read_to_string(ft.join("epochs.log")).unwrap().lines().count(), 2);

    let ckpt = s(&ft.join("fold_01.ckpt"));
    let e1 = idennet(&["eval", "--config", &cfg, "--data", &manifest, "--checkpoint", &ckpt, "--fold", "1"]);
    let e2 = idennet(&["eval", "--config", &cfg, "--data", &manifest, "--checkpoint", &ckpt, "--fold", "1"]);
    assert!(e1.status.success(), "{}", String::from_utf8_lossy(&e1.stderr));
    assert_eq!(stdout(&e1), stdout(&e2));
    assert!(stdout(&e1).contains("accuracy="));

    let hm = d.join("heat");
    let out = idennet(&["heatmap", "--config", &cfg, "--data", &manifest, "--checkpoint", &ckpt, "--limit", "3", "--out", &s(&hm)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pgms = fs::read_dir(&hm).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")).count();
    assert_eq!(pgms, 6);
    assert!(hm.join("index.tsv").exists());
}
