use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[data.synthetic]
num_classes = 3
train_per_class = 4
test_per_class = 2
image_size = 32

[model]
image_size = 32
num_classes = 3
channels = [3, 4, 5]
decoder_channels = [2, 2]
primary_channels = 8
capsule_dim = 4
digit_dim = 4
align_dim = 8
projector_hidden = 32
predictor_hidden = 16

[train]
batch_size = 4
epochs = 2

[eval]
saliency_chips = 3
"#;

fn hdanet(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdanet"))
        .args(args)
        .env("HDANET_OUT", out)
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = vec![];
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn write_tiny(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn help_matches_golden_files() {
    let tmp = tempfile::tempdir().unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for (args, file) in [(&["--help"][..], "help.txt"), (&["sweep", "--help"][..], "help_sweep.txt")] {
        let text = ok(&hdanet(tmp.path(), args));
        assert_eq!(text, fs::read_to_string(golden.join(file)).unwrap(), "{file}");
    }
    let text = ok(&hdanet(tmp.path(), &["--help"]));
    for flag in ["--config", "--seed", "--workers", "--checkpoint", "--help", "--version"] {
        assert!(text.contains(flag), "{flag}");
    }
    for cmd in ["gen-data", "train", "eval", "sweep", "shapley", "saliency", "gradcheck"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}

#[test]
fn missing_checkpoint_exits_with_two_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("nowhere/model.ckpt");
    for cmd in ["eval", "sweep", "shapley", "saliency"] {
        let mut args = vec![cmd, "--checkpoint", ckpt.to_str().unwrap()];
        if cmd == "sweep" {
            args.extend(["--setting", "gaussian"]);
        }
        let o = hdanet(tmp.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{cmd}");
        let err = String::from_utf8(o.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error[missing-checkpoint]:") && err.contains(ckpt.to_str().unwrap()), "{err}");
    }
}

#[test]
fn invalid_config_fails_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("zero.toml");
    fs::write(&cfg, "[data.synthetic]\ntrain_per_class = 0\ntest_per_class = 0\n").unwrap();
    let out = tmp.path().join("out");
    let o = hdanet(&out, &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8(o.stderr).unwrap().starts_with("error[config]:"));
    assert!(!out.exists());

    fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    let o = hdanet(&out, &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_writes_the_layout_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let text = ok(&hdanet(&a, &["gen-data"]));
    assert!(text.starts_with("train 1000 test 500 classes 10"), "{text}");
    for split in ["train", "test"] {
        let dirs = fs::read_dir(a.join("data").join(split)).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
        assert_eq!(dirs, 10);
    }
    ok(&hdanet(&b, &["gen-data"]));
    let (fa, fb) = (files_under(&a), files_under(&b));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let c = cfg.to_str().unwrap();
    let (a, b, c2) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&hdanet(&a, &["gen-data", "--config", c]));
    ok(&hdanet(&b, &["gen-data", "--config", c, "--seed", "3"]));
    ok(&hdanet(&c2, &["gen-data", "--config", c, "--seed", "4"]));
    let png = "data/train/class00/train_00_0000.png";
    assert_eq!(fs::read(a.join(png)).unwrap(), fs::read(b.join(png)).unwrap());
    assert_ne!(fs::read(a.join(png)).unwrap(), fs::read(c2.join(png)).unwrap());
}

#[test]
fn train_then_evaluate_keeps_every_file_under_out() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let c = cfg.to_str().unwrap();
    let out = tmp.path().join("run");

    let text = ok(&hdanet(&out, &["train", "--config", c]));
    assert!(text.starts_with("epoch,l_cls,l_con,l_seg,l_spa,total,oa,seconds\n"));
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 3);
    assert!(out.join("model.ckpt").is_file());

    let text = ok(&hdanet(&out, &["eval", "--config", c]));
    assert!(text.starts_with("oa "), "{text}");

    ok(&hdanet(&out, &["sweep", "--config", c, "--setting", "gaussian", "--params", "10,5,0,-5,-10"]));
    let sweep = fs::read_to_string(out.join("sweep_gaussian.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().skip(1).collect();
    assert_eq!(sweep.lines().next(), Some("setting,param,seed,oa"));
    assert_eq!(rows.len(), 5 * 3);
    for seed in ["1", "2", "3"] {
        assert_eq!(rows.iter().filter(|r| r.split(',').nth(2) == Some(seed)).count(), 5);
    }
    ok(&hdanet(&out, &["sweep", "--config", c, "--setting", "scene", "--params", "10,11"]));

    let text = ok(&hdanet(&out, &["shapley", "--config", c]));
    assert!(text.starts_with("clutter_ratio "), "{text}");
    assert_eq!(
        fs::read_to_string(out.join("shapley.csv")).unwrap().lines().next(),
        Some("chip_id,sh_target,sh_clutter")
    );

    ok(&hdanet(&out, &["saliency", "--config", c]));
    let maps = fs::read_dir(out.join("saliency")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(maps, 3);

    for f in files_under(tmp.path()) {
        assert!(f.starts_with(&out) || f == cfg, "{}", f.display());
    }

    let o = hdanet(&out, &["sweep", "--config", c, "--setting", "azimuth"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_command_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&hdanet(tmp.path(), &["gradcheck"]));
    assert!(text.lines().all(|l| l.ends_with(" ok")), "{text}");
    let csv = fs::read_to_string(tmp.path().join("gradcheck.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("full_model,")));
}
