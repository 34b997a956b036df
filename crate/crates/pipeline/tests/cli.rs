use std::path::Path;
use std::process::Command;

fn stda(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_stda")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "stda {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn corpus_fit_augment_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    stda(&["gen-corpus", "--count", "6", "--seed", "3", "--out-dir", s(&data)]);

    let model = tmp.path().join("placement.json");
    let fitted = stda(&[
        "fit-placement",
        "--annotations",
        s(&data.join("annotations.jsonl")),
        "--out-model",
        s(&model),
        "--image-height",
        "240",
        "--image-width",
        "320",
    ]);
    // Planted boxes lie exactly on the rescaled law.
    assert!(String::from_utf8_lossy(&fitted.stdout).starts_with("h = 1.1500 * y_bottom + -97.120"));

    stda(&[
        "augment",
        "--manifest",
        s(&data.join("manifest.jsonl")),
        "--out-dir",
        s(&out),
        "--seed",
        "1",
        "--bank",
        s(&data.join("bank.jsonl")),
        "--placement-model",
        s(&model),
        "--preview",
        "2",
    ]);
    assert_eq!(std::fs::read_dir(out.join("images")).unwrap().count(), 6);
    assert_eq!(std::fs::read_dir(out.join("preview")).unwrap().count(), 2);
    stda(&["eval", "--out-dir", s(&out)]);
}

#[test]
fn solve_writes_field_and_patch() {
    use rand::SeedableRng;
    use stda_core::io::{load_field, save_mask, save_patch};
    use stda_core::synth::{make_pair, PairMode};

    let tmp = tempfile::tempdir().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let pair = make_pair(PairMode::Translate { dx: 2, dy: -1 }, 48, 48, &mut rng).unwrap();
    let p = |n: &str| tmp.path().join(n);
    save_patch(&pair.source.patch, p("z.png")).unwrap();
    save_mask(&pair.source.mask, p("s.png")).unwrap();
    save_mask(&pair.target, p("t.png")).unwrap();
    stda(&[
        "solve",
        "--exemplar-image",
        s(&p("z.png")),
        "--exemplar-mask",
        s(&p("s.png")),
        "--target-mask",
        s(&p("t.png")),
        "--out-field",
        s(&p("f.bin")),
        "--out-patch",
        s(&p("w.png")),
    ]);
    assert_eq!(load_field(p("f.bin")).unwrap().dims(), (48, 48));
    assert!(p("w.png").exists());
}

#[test]
fn bad_manifest_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("m.jsonl");
    std::fs::write(&manifest, "{\"id\":\"a\"}\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_stda"))
        .args([
            "augment",
            "--manifest",
            s(&manifest),
            "--out-dir",
            s(&tmp.path().join("o")),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("m.jsonl:1:"));
}
