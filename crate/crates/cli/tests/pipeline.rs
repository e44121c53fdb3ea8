use std::path::Path;
use std::process::Command;

use arinv::data::{synthetic_blobs, write_png};

const CONFIG: &str = r#"
id = "cli"
seeds = [3]
scales = [1, 2]
eval_batch_size = 8
robust_eval_samples = 4

[train_data]
kind = "synthetic-blobs"
classes = 2
per_class = 4

[test_data]
kind = "synthetic-blobs"
split = "test"
classes = 2
per_class = 3

[attack]
eps = [0.0, 0.03]
steps = 2

[encoder]
epochs = 1
batch_size = 4

[decoder]
epochs = 1
batch_size = 4
mode = "pixfeat"

[denoiser.train]
epochs = 1
batch_size = 4

[anomaly]
i_max = 3
batch_size = 8
"#;

fn arinv(dir: &Path, args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_arinv"))
        .current_dir(dir)
        .arg("--config")
        .arg("config.toml")
        .args(args)
        .output()
        .unwrap();
    out
}

fn ok(dir: &Path, args: &[&str]) {
    let out = arinv(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn csv_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(String::from)
        .collect()
}

#[test]
fn full_command_surface() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("config.toml"), CONFIG).unwrap();
    let imgs = d.join("imgs");
    std::fs::create_dir_all(&imgs).unwrap();
    let ds = synthetic_blobs(1, 2, 32, 11).unwrap();
    for i in 0..2 {
        write_png(&imgs.join(format!("img{i}.png")), &ds.images.get(i).unwrap()).unwrap();
    }

    ok(d, &["train-encoder", "--out", "enc", "--log", "enc.csv"]);
    assert!(d.join("enc/manifest.json").exists());
    assert_eq!(csv_rows(&d.join("enc.csv")).len(), 2);
    ok(d, &["--seed", "4", "train-decoder", "--encoder", "enc", "--out", "dec"]);
    ok(
        d,
        &["train-decoder", "--encoder", "enc", "--level", "conv2", "--out", "dec2"],
    );

    ok(
        d,
        &[
            "invert",
            "--encoder",
            "enc",
            "--decoder",
            "dec",
            "--input",
            "imgs",
            "--out",
            "rec",
        ],
    );
    ok(
        d,
        &[
            "invert",
            "--encoder",
            "enc",
            "--input",
            "imgs/img0.png",
            "--out",
            "opt",
            "--steps",
            "3",
        ],
    );
    assert!(d.join("rec/img1.png").exists() && d.join("opt/img0.png").exists());

    for metric in ["psnr", "ssim", "gram", "featdist"] {
        let out = format!("{metric}.csv");
        ok(
            d,
            &[
                "eval",
                "--metric",
                metric,
                "--ref",
                "imgs",
                "--pred",
                "rec",
                "--encoder",
                "enc",
                "--out",
                &out,
            ],
        );
        let rows = csv_rows(&d.join(&out));
        assert_eq!(rows.len(), 2);
        assert!(rows[1].contains(metric));
    }
    let missing = arinv(
        d,
        &[
            "eval", "--metric", "gram", "--ref", "imgs", "--pred", "rec", "--out", "x.csv",
        ],
    );
    assert!(!missing.status.success());

    ok(d, &["train-denoiser", "--encoder", "enc", "--out", "den"]);
    ok(
        d,
        &[
            "denoise", "--model", "den", "--input", "imgs", "--out", "dn", "--sigma", "0.2", "--report", "dn.csv",
        ],
    );
    assert_eq!(csv_rows(&d.join("dn.csv")).len(), 3);
    let wrong = arinv(d, &["denoise", "--model", "enc", "--input", "imgs", "--out", "dn2"]);
    assert!(!wrong.status.success());
    assert!(String::from_utf8_lossy(&wrong.stderr).contains("expected"));

    ok(
        d,
        &[
            "stylize",
            "--encoder",
            "enc",
            "--decoders",
            "dec,dec2",
            "--content",
            "imgs/img0.png",
            "--style",
            "imgs/img1.png",
            "--out",
            "st.png",
        ],
    );
    assert!(d.join("st.png").exists());

    ok(
        d,
        &["detect-anomaly", "--encoder", "enc", "--classes", "0,1", "--out", "an"],
    );
    assert_eq!(csv_rows(&d.join("an/auroc.csv")).len(), 4);
    assert_eq!(csv_rows(&d.join("an/scores.csv")).len(), 1 + 2 * 6);

    ok(
        d,
        &[
            "sweep-scale",
            "--encoder",
            "enc",
            "--decoder",
            "dec",
            "--out",
            "scale.csv",
        ],
    );
    assert_eq!(csv_rows(&d.join("scale.csv")).len(), 1 + 2 * 3);
}

#[test]
fn robustness_sweep_repeats_bit_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("config.toml"), CONFIG).unwrap();
    ok(d, &["sweep-robustness", "--out", "a"]);
    ok(d, &["sweep-robustness", "--out", "b", "--no-checkpoints"]);
    for f in ["robustness.csv", "scale.csv", "epochs.csv"] {
        let a = std::fs::read(d.join("a").join(f)).unwrap();
        let b = std::fs::read(d.join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let rows = csv_rows(&d.join("a/robustness.csv"));
    assert_eq!(rows.len(), 3);
    let hash = rows[1].split(',').next().unwrap().to_string();
    assert_eq!(hash.len(), 16);
    for f in ["robustness.csv", "scale.csv", "epochs.csv"] {
        assert!(
            csv_rows(&d.join("a").join(f))[1..].iter().all(|r| r.starts_with(&hash)),
            "{f}"
        );
    }
    assert!(d.join("a/seed-3/eps-0.030000/encoder/manifest.json").exists());
    assert!(!d.join("b/seed-3").exists());
}
