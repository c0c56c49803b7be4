use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fdabnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdabnn"))
        .args(args)
        .output()
        .expect("spawn fdabnn")
}

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn have_mnist() -> bool {
    mnist_dir().join("train-images-idx3-ubyte").is_file()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    fs::write(&p, body).unwrap();
    p
}

fn tiny_config(dir: &Path) -> PathBuf {
    write_config(
        dir,
        &format!(
            "preset = mnist-toycnn\ndata_dir = {}\noutput_dir = {}\nepochs = 1\ntrain_limit = 256\ntest_limit = 128\nbatch_size = 64\n",
            mnist_dir().display(),
            dir.join("out").display()
        ),
    )
}

#[test]
fn missing_config_is_a_config_error() {
    let o = fdabnn(&["train", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "epochs = 2\n");
    let o = fdabnn(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--override",
        "no_such_key=1",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = fdabnn(&["train", "--config", cfg.to_str().unwrap(), "--override", "epochs=zero"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_arguments_exit_with_config_code() {
    assert_eq!(fdabnn(&["train"]).status.code(), Some(1));
    assert_eq!(fdabnn(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(fdabnn(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_data_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!("data_dir = {}\n", tmp.path().join("empty").display()),
    );
    let o = fdabnn(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("none.ckpt");
    let o = fdabnn(&["eval", "--checkpoint", ck.to_str().unwrap(), "--dataset", "."]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analyze_mse_table() {
    let o = fdabnn(&["analyze", "mse", "--terms", "0,1,4"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "n,fs_mse,parseval_mse");
    assert_eq!(lines.len(), 4);
    let row: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[0], 0.0);
    assert!((row[1] - 0.18943).abs() < 1e-5);
}

#[test]
fn analyze_spectrum_to_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("s.csv");
    let o = fdabnn(&[
        "analyze",
        "spectrum",
        "--function",
        "fda",
        "--terms",
        "2",
        "--max-harmonic",
        "7",
        "--samples",
        "65536",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("function,harmonic,sine,cosine,sign_sine,delta_sine"));
    assert_eq!(lines.len(), 8);
    let h7: Vec<&str> = lines[7].split(',').collect();
    assert_eq!(h7[1], "7");
    assert!(h7[2].parse::<f64>().unwrap().abs() < 1e-9);
    let h5: Vec<&str> = lines[5].split(',').collect();
    // sign's own coefficient carries an O((kπ/N)²) quadrature error on this coarse grid.
    assert!(h5[5].parse::<f64>().unwrap().abs() < 1e-8);
}

#[test]
fn analyze_rejects_coarse_grids() {
    assert_eq!(fdabnn(&["analyze", "mse", "--samples", "100"]).status.code(), Some(1));
}

#[test]
fn train_then_eval_roundtrip() {
    if !have_mnist() {
        eprintln!("skipping: MNIST not present in {}", mnist_dir().display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let o = fdabnn(&["train", "--config", cfg.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(tmp.path().join("out/metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next(),
        Some("epoch,train_loss,train_acc,test_acc,n_terms,alpha,seconds")
    );
    assert_eq!(metrics.lines().count(), 2);

    let ck = tmp.path().join("out/model.ckpt");
    let o = fdabnn(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--dataset",
        mnist_dir().to_str().unwrap(),
        "--limit",
        "128",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let reported = String::from_utf8(o.stdout).unwrap();
    let last_row = metrics.lines().last().unwrap();
    let acc: f64 = last_row.split(',').nth(3).unwrap().parse().unwrap();
    assert!(reported.contains(&format!("{acc:.2}%")), "{reported} vs {last_row}");
}

#[test]
fn diverging_run_is_a_numerical_error() {
    if !have_mnist() {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let o = fdabnn(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--override",
        "optimizer=sgd",
        "--override",
        "lr=1e300",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sweep_writes_one_row_per_variant() {
    if !have_mnist() {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("sweep.cfg");
    fs::write(
        &spec,
        format!(
            "grid = shortcut\npreset = mnist-toycnn\ndata_dir = {}\noutput_dir = {}\nepochs = 1\ntrain_limit = 128\ntest_limit = 64\nsweep_output = {}\n",
            mnist_dir().display(),
            tmp.path().join("runs").display(),
            tmp.path().join("table.csv").display()
        ),
    )
    .unwrap();
    let o = fdabnn(&["sweep", "--spec", spec.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(tmp.path().join("table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(
        lines[0],
        "variant,surrogate,adapter,shortcut,final_test_acc,best_test_acc"
    );
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("fda-shortcut_sine,"));
}
