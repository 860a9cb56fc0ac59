use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to train in seconds
resolution = 32
batch_size = 2
iters_decomp = 4
iters_diffusion = 4
iters_restore = 4
checkpoint_every = 0
schedule_test = 5,0.0001,0.5
";

fn relume(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relume"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pngs(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "png")
        })
        .count()
}

#[test]
fn train_infer_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let run = root.join("run");
    let config = root.join("tiny.cfg");
    std::fs::write(&config, TINY).unwrap();

    ok(relume(&[
        "gen-data",
        "--out",
        s(&data),
        "--count",
        "3",
        "--size",
        "32",
        "--seed",
        "4",
    ]));
    assert_eq!(pngs(&data.join("shadow")), 3);

    let common = [
        "--data",
        s(&data),
        "--run",
        s(&run),
        "--config",
        s(&config),
        "--seed",
        "2",
    ];
    for stage in ["train-decomp", "train-diffusion", "train-restore"] {
        let mut args = vec![stage];
        args.extend(common);
        ok(relume(&args));
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 2);
    for kind in ["decomposition", "diffusion", "restoration"] {
        assert_eq!(
            manifest["checkpoints"][kind]["sha256"]
                .as_str()
                .unwrap()
                .len(),
            64,
            "{kind}"
        );
        assert_eq!(
            manifest["metric_history"][format!("{kind}.loss")]
                .as_array()
                .unwrap()
                .len(),
            4
        );
    }

    let pred = root.join("pred");
    ok(relume(&[
        "infer",
        "--run",
        s(&run),
        "--images",
        s(&data.join("shadow")),
        "--masks",
        s(&data.join("mask")),
        "--out",
        s(&pred),
        "--dump-intermediates",
    ]));
    assert_eq!(pngs(&pred), 3);
    assert_eq!(pngs(&pred.join("intermediates")), 3 * 3);

    let report = root.join("report");
    let out = ok(relume(&[
        "eval",
        "--pred",
        s(&data.join("shadow_free")),
        "--gt",
        s(&data.join("shadow_free")),
        "--mask",
        s(&data.join("mask")),
        "--out",
        s(&report),
    ]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("3 images"));
    let csv = std::fs::read_to_string(report.join("report.csv")).unwrap();
    assert!(csv.starts_with("id,rmse_S,rmse_NS,rmse_All,psnr_S"));
    assert_eq!(
        std::fs::read_to_string(report.join("report.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let first = std::fs::read_dir(&pred)
        .unwrap()
        .filter_map(|e| e.ok())
        .find(|e| e.path().is_file())
        .unwrap();
    std::fs::remove_file(first.path()).unwrap();
    let out = relume(&[
        "eval",
        "--pred",
        s(&pred),
        "--gt",
        s(&data.join("shadow_free")),
        "--mask",
        s(&data.join("mask")),
        "--out",
        s(&report),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unmatched"));
}

#[test]
fn variant_and_preset_flags_are_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(relume(&[
        "gen-data",
        "--out",
        s(&data),
        "--count",
        "1",
        "--size",
        "32",
    ]));
    let run = tmp.path().join("run");
    let bad_variant = relume(&[
        "train-decomp",
        "--data",
        s(&data),
        "--run",
        s(&run),
        "--variant",
        "nope",
    ]);
    assert!(!bad_variant.status.success());
    assert!(String::from_utf8_lossy(&bad_variant.stderr).contains("unknown variant"));
    let bad_preset = relume(&[
        "train-decomp",
        "--data",
        s(&data),
        "--run",
        s(&run),
        "--preset",
        "huge",
    ]);
    assert!(!bad_preset.status.success());
}

#[test]
fn infer_reports_missing_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let out = relume(&[
        "infer",
        "--run",
        s(tmp.path()),
        "--images",
        s(tmp.path()),
        "--masks",
        s(tmp.path()),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing checkpoint"));
}
