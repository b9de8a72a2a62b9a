use std::path::Path;
use std::process::{Command, Output};

fn pxpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pxpo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run pxpo")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &[&str] = &[
    "--image-height", "8", "--image_width", "8", "--base_channels", "4", "--time_dim", "4",
    "--train_steps", "10", "--rollout_steps", "3",
];

#[test]
fn overrides_reach_the_config() {
    let o = pxpo(&["show-config", "--preset", "segmenter", "--lr=0.5", "--epochs", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("lr = 0.5"), "{text}");
    assert!(text.contains("epochs = 3"), "{text}");
    assert!(text.contains("feedback = toy_segmenter"), "{text}");
}

#[test]
fn config_errors_exit_with_two() {
    assert_eq!(pxpo(&["show-config", "--lr", "fast"]).status.code(), Some(2));
    assert_eq!(pxpo(&["show-config", "--preset", "nope"]).status.code(), Some(2));
    assert_eq!(pxpo(&["evaluate"]).status.code(), Some(2));
    assert_eq!(pxpo(&["show-config", "--config", "/does/not/exist.ini"]).status.code(), Some(2));
    // unknown flags are clap's business
    assert_eq!(pxpo(&["show-config", "--bogus", "1"]).status.code(), Some(2));
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let ini = dir.path().join("run.ini");
    std::fs::write(&ini, "[optimizer]\nlr = 0.25\n[run]\nepochs = 7\n").unwrap();
    let o = pxpo(&["show-config", "--config", ini.to_str().unwrap(), "--epochs", "2"]);
    let text = stdout(&o);
    assert!(text.contains("lr = 0.25") && text.contains("epochs = 2"), "{text}");
}

fn run_in(dir: &Path, cmd: &[&str], extra: &[&str]) -> Output {
    let mut args: Vec<&str> = cmd.to_vec();
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    let o = pxpo(&args);
    assert!(
        o.status.success(),
        "{args:?} in {}: {}",
        dir.display(),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

#[test]
fn pretrain_train_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let pre = dir.path().join("pre");
    let rl = dir.path().join("rl");
    let dump = dir.path().join("dump");
    run_in(
        dir.path(),
        &["pretrain"],
        &["--output_dir", pre.to_str().unwrap(), "--pretrain_steps", "20", "--pretrain_batch", "2"],
    );
    let ckpt = pre.join("pretrained.ckpt");
    assert!(ckpt.exists() && pre.join("pretrain_loss.csv").exists());

    let common = [
        "--checkpoint", ckpt.to_str().unwrap(),
        "--output_dir", rl.to_str().unwrap(),
        "--batch_size", "2",
    ];
    let mut args = common.to_vec();
    args.extend(["--epochs", "2"]);
    let o = run_in(dir.path(), &["train"], &args);
    assert_eq!(stdout(&o).matches("epoch").count(), 2);
    let csv = std::fs::read_to_string(rl.join("rewards.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let mut args = common.to_vec();
    args.extend(["--epochs", "3"]);
    run_in(dir.path(), &["train", "--resume"], &args);
    let csv = std::fs::read_to_string(rl.join("rewards.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let o = run_in(
        dir.path(),
        &["evaluate", "--n", "3", "--dump", dump.to_str().unwrap()],
        &["--checkpoint", ckpt.to_str().unwrap(), "--feedback", "zero"],
    );
    assert!(stdout(&o).starts_with("zero: 0.00000"), "{}", stdout(&o));
    assert_eq!(std::fs::read_dir(&dump).unwrap().count(), 3);
}
