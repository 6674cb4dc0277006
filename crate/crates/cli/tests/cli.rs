use std::path::Path;
use std::process::{Command, Output};

fn voxdet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxdet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("run voxdet")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = voxdet(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn plan_shapes_prints_preset_dims() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["plan-shapes", "--preset", "afdetv2-lite"], dir.path());
    assert!(out.contains("grid 1504x1504x40"), "{out}");
    assert!(out.contains("pseudo-image 188x188 with 5 z-slabs"), "{out}");
    let out = ok(&["plan-shapes", "--preset", "nuscenes"], dir.path());
    assert!(out.contains("grid 1440x1440x40"), "{out}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(voxdet(&["plan-shapes", "--preset", "bogus"], p).status.code(), Some(2));
    assert_eq!(voxdet(&["frobnicate"], p).status.code(), Some(2));
    let missing = voxdet(&["rescore", "--dets", "nope.jsonl", "--out", "x.jsonl"], p);
    assert_eq!(missing.status.code(), Some(1));
    std::fs::write(p.join("bad.jsonl"), "{\"frame_id\":0}\n").unwrap();
    let bad = voxdet(&["rescore", "--dets", "bad.jsonl", "--out", "x.jsonl"], p);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 1"));
    // nuscenes preset has no rescoring section
    std::fs::write(p.join("d.jsonl"), "").unwrap();
    let no_rescore = voxdet(&["--preset", "nuscenes", "rescore", "--dets", "d.jsonl", "--out", "x.jsonl"], p);
    assert_eq!(no_rescore.status.code(), Some(2));
}

#[test]
fn pipeline_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["simulate", "--count", "6", "--out", "frames", "--seed", "4"], p);
    ok(&["ablate", "--frames", "frames", "--alphas", "0,1", "--out", "ab.csv", "--dump-dets", "d.jsonl"], p);
    let table = std::fs::read_to_string(p.join("ab.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 2 * 4);

    ok(&["rescore", "--dets", "d.jsonl", "--alpha", "0", "--out", "r.jsonl"], p);
    assert_eq!(
        std::fs::read(p.join("d.jsonl")).unwrap(),
        std::fs::read(p.join("r.jsonl")).unwrap()
    );

    // ground truth scored as detections evaluates perfectly
    ok(&["encode", "--gt", "frames/gt.jsonl", "--out", "maps"], p);
    ok(&["decode", "--targets", "maps", "--out", "dec.jsonl"], p);
    ok(&["eval", "--dets", "dec.jsonl", "--gt", "frames/gt.jsonl", "--out", "rep.json"], p);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("rep.json")).unwrap()).unwrap();
    for level in ["all_l1", "all_l2"] {
        assert_eq!(report[level]["ap"], 1.0);
        assert_eq!(report[level]["aph"], 1.0);
    }
    assert!(p.join("rep.pr.csv").exists());

    ok(&["nms", "--dets", "d.jsonl", "--out", "n.jsonl"], p);
    ok(&["fuse", "--inputs", "d.jsonl", "n.jsonl", "--out", "f.jsonl"], p);
    ok(&["augment", "--frames", "frames", "--out", "aug", "--save-db", "db"], p);
    assert!(p.join("db/index.json").exists());
    assert!(p.join("aug/gt.jsonl").exists());
}
