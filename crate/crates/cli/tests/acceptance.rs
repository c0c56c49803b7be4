//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! The MNIST criteria read IDX files from `data/mnist` at the workspace root
//! (override with `FDABNN_MNIST`); `scripts/fetch_mnist.sh` downloads them.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fdabnn::adapter::{NoiseAdapter, ShortcutKind};
use fdabnn::analysis::{finite_diff_check, fs_mse, parseval_mse, spectrum, CompositeProbe, GradientProbe, SpectrumFn};
use fdabnn::autograd::kernels::{conv2d, ConvGeometry};
use fdabnn::autograd::Graph;
use fdabnn::binary::pack::{pack_activations, pack_weights};
use fdabnn::binary::{build_model, xnor_popcount_conv, Arch, InferencePath, ModelConfig};
use fdabnn::surrogate::{sign, SurrogateSpec};
use fdabnn::train::{alpha_at, ScheduleSetting};
use fdabnn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradient_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (d, k) = (32, 4);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in [1, 10] {
        for alpha in [0.0, 0.5] {
            for shortcut in [ShortcutKind::Zero, ShortcutKind::Linear, ShortcutKind::Sine] {
                let mut probe = CompositeProbe {
                    d,
                    reduction: k,
                    shortcut,
                    gain: 0.1,
                    alpha,
                    n,
                    omega: PI,
                    upstream: Vec::new(),
                };
                let h = probe.hidden();
                let b1 = 1.0 / (d as f64).sqrt();
                let b2 = 1.0 / (h as f64).sqrt();
                let mut done = 0;
                while done < 100 {
                    probe.upstream = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let mut x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    x.extend((0..d * h).map(|_| rng.gen_range(-b1..b1)));
                    x.extend((0..h * d).map(|_| rng.gen_range(-b2..b2)));
                    match Ok::<_, fdabnn::Error>(probe.pre_activations(&x)) {
                        Ok(p) if p.iter().all(|v| v.abs() > 1e-3) => {}
                        Ok(_) => continue,
                        Err(e) => return outcome(false, e.to_string()),
                    }
                    match finite_diff_check(&probe, &x, 1e-4) {
                        Ok(e) => worst = worst.max(e),
                        Err(e) => return outcome(false, e.to_string()),
                    }
                    done += 1;
                    cases += 1;
                }
                debug_assert_eq!(probe.dim(), d + 2 * d * h);
            }
        }
    }
    outcome(worst <= 1e-6, format!("max rel err {worst:.3e} over {cases} points"))
}

fn series_convergence() -> Outcome {
    let mut prev = f64::INFINITY;
    let mut worst = 0.0f64;
    let mut monotone = true;
    let mut m0 = 0.0;
    for n in [0, 1, 2, 4, 8, 16, 32, 64] {
        let m = match fs_mse(n, PI, 200_000) {
            Ok(m) => m,
            Err(e) => return outcome(false, e.to_string()),
        };
        if n == 0 {
            m0 = m;
        }
        monotone &= m < prev;
        worst = worst.max((m - parseval_mse(n)).abs());
        prev = m;
    }
    let base_ok = (m0 - 0.18943).abs() < 1e-5;
    outcome(
        monotone && worst <= 1e-3 && base_ok,
        format!("monotone={monotone} max |mse - parseval| {worst:.2e} fs_mse(0)={m0:.5}"),
    )
}

fn spectrum_match() -> Outcome {
    let samples = 1 << 20;
    let reference = match spectrum(SpectrumFn::Sign, 2.0, 40, samples) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let mut low = 0.0f64;
    let mut high = 0.0f64;
    let mut fundamental = 0.0f64;
    for n in [1, 5, 10] {
        let s = match spectrum(SpectrumFn::Fda { n }, 2.0, 40, samples) {
            Ok(s) => s,
            Err(e) => return outcome(false, e.to_string()),
        };
        fundamental = fundamental.max((s.harmonics[0].sine - 4.0 / PI).abs());
        for (h, r) in s.harmonics.iter().zip(&reference.harmonics) {
            if h.index <= 2 * n + 1 {
                low = low.max((h.sine - r.sine).abs()).max((h.cosine - r.cosine).abs());
            } else {
                high = high.max(h.sine.abs()).max(h.cosine.abs());
            }
        }
    }
    outcome(
        low <= 1e-9 && high <= 1e-9 && fundamental <= 1e-9,
        format!("low-band diff {low:.2e}, high-band max {high:.2e}, |b1 - 4/pi| {fundamental:.2e}"),
    )
}

fn inference_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pm = |shape: &[usize], rng: &mut ChaCha8Rng| {
        Tensor::<f64>::from_fn(shape, |_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
    };
    let mut mismatches = 0;
    for _ in 0..1000 {
        let c = rng.gen_range(1..=96);
        let k = [1, 3][rng.gen_range(0..2)];
        let size = rng.gen_range(k..=k + 6);
        let geom = ConvGeometry::new(rng.gen_range(1..=2), rng.gen_range(0..=k / 2));
        let a = pm(&[1, c, size, size], &mut rng);
        let w = pm(&[rng.gen_range(1..=8), c, k, k], &mut rng);
        let float = conv2d(&a, &w, geom);
        let packed = pack_weights(&w)
            .and_then(|pw| Ok((pw, pack_activations(&a)?)))
            .and_then(|(pw, pa)| xnor_popcount_conv(&pw, &pa, geom));
        match (float, packed) {
            (Ok(f), Ok(p)) if p.to_tensor::<f64>() == f => {}
            _ => mismatches += 1,
        }
    }
    let model = match build_model::<f32>(&ModelConfig::new(Arch::ToyCnn, 1, 28, 10), &mut rng) {
        Ok(m) => m,
        Err(e) => return outcome(false, e.to_string()),
    };
    let x = Tensor::from_fn(&[16, 1, 28, 28], |_| rng.gen_range(-0.5f32..2.8));
    let diff = match (
        model.forward_eval(&x, InferencePath::FloatSign),
        model.forward_eval(&x, InferencePath::Packed),
    ) {
        (Ok(a), Ok(b)) => a.max_abs_diff(&b),
        _ => f64::INFINITY,
    };
    outcome(
        mismatches == 0 && diff <= 1e-4,
        format!("{mismatches}/1000 conv mismatches, ToyCNN logit diff {diff:.2e}"),
    )
}

fn schedule_contracts() -> Outcome {
    let mut ok = true;
    for (n_s, epochs) in [(2, 5), (10, 400), (3, 1), (7, 2)] {
        let s = ScheduleSetting::doubling(n_s);
        ok &= s.n_at(epochs - 1, epochs).ok() == Some(2 * n_s);
        ok &= alpha_at(0.1, epochs - 1, epochs).ok() == Some(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut adapter = match NoiseAdapter::<f64>::new(32, 4, ShortcutKind::Sine, 0.1, &mut rng) {
        Ok(a) => a,
        Err(e) => return outcome(false, e.to_string()),
    };
    for v in adapter.w2.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let t = Tensor::from_fn(&[64, 32], |_| rng.gen_range(-1.5..1.5));
    let mut g = Graph::new();
    let binary = (|| {
        let tv = g.constant(t.clone())?;
        let w1 = g.param(adapter.w1.clone())?;
        let w2 = g.param(adapter.w2.clone())?;
        let z = g.composite_sign(tv, w1, w2, &adapter, 0.0, SurrogateSpec::fda(4))?;
        Ok::<_, fdabnn::Error>(g.value(z).data().iter().zip(t.data()).all(|(&z, &t)| z == sign(t)))
    })()
    .unwrap_or(false);
    outcome(
        ok && binary,
        format!("terminal n/alpha ok={ok}, operands exactly sign at alpha=0: {binary}"),
    )
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fdabnn")
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("FDABNN_MNIST")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn workspace_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mnist_toycnn.cfg")
}

fn run_train(out: &Path, extra: &[&str]) -> Result<(), String> {
    let mut cmd = Command::new(bin());
    cmd.arg("train").arg("--config").arg(workspace_config()).arg("--quiet");
    cmd.arg("--override").arg(format!("data_dir={}", mnist_dir().display()));
    cmd.arg("--override").arg(format!("output_dir={}", out.display()));
    for e in extra {
        cmd.arg("--override").arg(e);
    }
    let o = cmd.output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!(
            "exit {:?}: {}",
            o.status.code(),
            String::from_utf8_lossy(&o.stderr).trim()
        ))
    }
}

fn final_test_acc(metrics: &Path) -> Result<f64, String> {
    let text = std::fs::read_to_string(metrics).map_err(|e| e.to_string())?;
    let last = text.lines().last().ok_or("empty metrics")?;
    last.split(',')
        .nth(3)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format!("bad row '{last}'"))
}

fn desk_scale_training(tmp: &Path) -> Outcome {
    if !mnist_dir().join("train-images-idx3-ubyte").is_file() {
        return outcome(false, format!("MNIST not found in {}", mnist_dir().display()));
    }
    let start = Instant::now();
    let fda = tmp.join("fda");
    let ste = tmp.join("ste");
    let res = run_train(&fda, &[])
        .and_then(|_| run_train(&ste, &["surrogate=ste"]))
        .and_then(|_| {
            Ok((
                final_test_acc(&fda.join("metrics.csv"))?,
                final_test_acc(&ste.join("metrics.csv"))?,
            ))
        });
    let elapsed = start.elapsed();
    match res {
        Ok((a, b)) => outcome(
            a >= 97.0 && a >= b - 0.5 && elapsed <= Duration::from_secs(30 * 60),
            format!("fda {a:.2}% ste {b:.2}% in {:.0}s for both runs", elapsed.as_secs_f64()),
        ),
        Err(e) => outcome(false, e),
    }
}

fn determinism(tmp: &Path) -> Outcome {
    if !mnist_dir().join("train-images-idx3-ubyte").is_file() {
        return outcome(false, format!("MNIST not found in {}", mnist_dir().display()));
    }
    let extra = ["epochs=2", "train_limit=3000", "test_limit=1000", "record_time=false"];
    let (a, b) = (tmp.join("det_a"), tmp.join("det_b"));
    let res = run_train(&a, &extra).and_then(|_| run_train(&b, &extra)).and_then(|_| {
        let x = std::fs::read(a.join("metrics.csv")).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join("metrics.csv")).map_err(|e| e.to_string())?;
        Ok(x == y && !x.is_empty())
    });
    match res {
        Ok(same) => outcome(same, format!("metrics byte-identical: {same}")),
        Err(e) => outcome(false, e),
    }
}

fn main() {
    // `cargo test --test acceptance -- 2 spectrum` runs only the criteria
    // whose name contains one of the words.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let tmp = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<(&str, Duration, Box<dyn Fn() -> Outcome>)> = vec![
        (
            "1 gradient fidelity",
            Duration::from_secs(10),
            Box::new(gradient_fidelity),
        ),
        (
            "2 series convergence",
            Duration::from_secs(5),
            Box::new(series_convergence),
        ),
        ("3 spectrum", Duration::from_secs(5), Box::new(spectrum_match)),
        (
            "4 inference identity",
            Duration::from_secs(30),
            Box::new(inference_identity),
        ),
        ("5 desk-scale training", Duration::from_secs(30 * 60), {
            let p = tmp.path().to_path_buf();
            Box::new(move || desk_scale_training(&p))
        }),
        (
            "6 schedule contracts",
            Duration::from_secs(1),
            Box::new(schedule_contracts),
        ),
        ("7 determinism", Duration::from_secs(30 * 60), {
            let p = tmp.path().to_path_buf();
            Box::new(move || determinism(&p))
        }),
    ];
    let mut failed = 0;
    for (name, budget, check) in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let took = start.elapsed();
        let pass = o.pass && took <= *budget;
        failed += usize::from(!pass);
        println!(
            "{} criterion {name}: {} ({:.2}s, budget {}s)",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
