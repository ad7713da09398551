//! Acceptance suite: one PASS/FAIL line per criterion. Criterion 8 is
//! reported but does not fail the run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::Rng;
use tsadv_bench::gradcheck::{check_models, check_ops, TOLERANCE};
use tsadv_bench::ExperimentConfig;
use tsadv_core::attack::{bim, fgsm, pgd, run_attack, AttackConfig, AttackKind, AttackTarget};
use tsadv_core::autodiff::Tensor;
use tsadv_core::data::PREDICTORS;
use tsadv_core::defense::{adversarial_step, clean_step, epoch_order, Optimizer, Stepper, TrainConfig};
use tsadv_core::model::{Architecture, Model, ModelSpec, Task};
use tsadv_core::rng::stream_rng;
use tsadv_core::Result;

struct Outcome {
    passed: bool,
    gated: bool,
    detail: String,
}

fn gated(passed: bool, detail: String) -> Outcome {
    Outcome { passed, gated: true, detail }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn tsadv_all(config: &Path, out: &Path) -> std::result::Result<(), String> {
    let res = Command::new(env!("CARGO_BIN_EXE_tsadv"))
        .args(["all", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if res.status.success() {
        Ok(())
    } else {
        Err(format!("tsadv all exited with {:?}: {}", res.status.code(), String::from_utf8_lossy(&res.stderr)))
    }
}

/// `report.csv` as `(model, row, attack) -> value`.
fn read_report(path: &Path) -> BTreeMap<(String, String, String), f64> {
    fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let v = f.get(5)?.parse().ok()?;
            Some(((f[1].to_string(), f[2].to_string(), f[3].to_string()), v))
        })
        .collect()
}

fn small_model(arch: Architecture, channels: usize, task: Task, seed: u64) -> Result<Model> {
    Model::init(ModelSpec::new(arch, PREDICTORS, channels, task, seed).with_hidden(3).with_filters(2))
}

fn random_batch(rng: &mut impl Rng, n: usize, channels: usize, task: Task, edges: bool) -> Result<(Tensor, Tensor)> {
    let x: Vec<f64> = (0..n * PREDICTORS * channels)
        .map(|_| match rng.random_range(0..10) {
            0 if edges => 0.0,
            1 if edges => 1.0,
            _ => rng.random(),
        })
        .collect();
    let y: Vec<f64> = (0..n)
        .map(|_| match task {
            Task::Regression => rng.random(),
            Task::Classification => f64::from(rng.random_bool(0.5)),
        })
        .collect();
    Ok((Tensor::new(vec![n, PREDICTORS, channels], x)?, Tensor::column(y)))
}

fn gradient_correctness() -> Result<Outcome> {
    let start = Instant::now();
    let rows: Vec<_> = check_ops(100)?.into_iter().chain(check_models(100)?).collect();
    let secs = start.elapsed().as_secs_f64();
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    Ok(gated(
        failed.is_empty() && secs < 120.0,
        format!(
            "{} op kinds + 7 architectures x 100 seeds, worst rel err {worst:.2e} (< {TOLERANCE:e}), failed {failed:?}, {secs:.1}s (< 120s)",
            rows.len() - 7
        ),
    ))
}

fn attack_containment() -> Result<Outcome> {
    let mut violations = 0;
    let mut pairs = 0;
    for kind in AttackKind::ALL {
        let mut rng = stream_rng(0xC0A7, kind as u64);
        for i in 0..1000 {
            let arch = Architecture::ALL[rng.random_range(0..7)];
            let task = if rng.random_bool(0.5) { Task::Regression } else { Task::Classification };
            let channels = rng.random_range(1..=2);
            let model = small_model(arch, channels, task, rng.random())?;
            let (x, y) = random_batch(&mut rng, 1, channels, task, true)?;
            let eps = rng.random_range(0.0..0.3);
            let alpha = eps * rng.random_range(0.1..=1.0);
            let cfg = AttackConfig::of_kind(kind, eps, alpha)
                .with_iterations(rng.random_range(1..=5))
                .with_restarts(if kind == AttackKind::Pgd { rng.random_range(0..=2) } else { 0 })
                .with_seed(i);
            let adv = run_attack(&model, &x, &y, &cfg)?;
            let d = adv.delta.data();
            let p = adv.perturbed.data();
            let bad = d.iter().any(|v| v.abs() > eps + 1e-12)
                || p.iter().any(|v| !(0.0..=1.0).contains(v))
                || p.iter().zip(x.data()).zip(d).any(|((p, x), d)| *p != x + d)
                || (kind == AttackKind::Fgsm && d.iter().any(|&v| v != 0.0 && v != eps && v != -eps));
            violations += usize::from(bad);
            pairs += 1;
        }
    }
    Ok(gated(violations == 0, format!("{pairs} (model, input) pairs over 3 attacks, {violations} violations")))
}

/// `f(x) = w . x` under squared error, differentiated by hand.
struct HandLinear {
    w: Vec<f64>,
}

impl HandLinear {
    fn residuals(&self, x: &Tensor, y: &Tensor) -> Vec<f64> {
        x.data().chunks(self.w.len()).zip(y.data()).map(|(xi, yi)| dot(&self.w, xi) - yi).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

impl AttackTarget for HandLinear {
    fn loss_gradient(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let g = self.residuals(x, y).iter().flat_map(|r| self.w.iter().map(move |w| 2.0 * r * w)).collect();
        Tensor::new(x.shape().to_vec(), g)
    }

    fn sample_losses(&self, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        Ok(self.residuals(x, y).iter().map(|r| r * r).collect())
    }
}

fn linear_oracle() -> Result<Outcome> {
    let model = HandLinear { w: vec![1.0, -2.0] };
    let x = Tensor::new(vec![1, 2], vec![0.5, 0.5])?;
    let y = Tensor::column(vec![0.0]);
    let expected = [0.4, 0.6];
    let err = |t: &Tensor| t.data().iter().zip(expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let f = fgsm(&model, &x, &y, &AttackConfig::fgsm(0.1))?;
    let b = bim(&model, &x, &y, &AttackConfig::bim(0.1, 0.05, 10))?;
    let (ef, eb) = (err(&f.perturbed), err(&b.perturbed));
    Ok(gated(
        ef <= 1e-9 && eb <= 1e-9,
        format!(
            "FGSM {:?} (err {ef:.1e}), BIM {:?} (err {eb:.1e}), expected [0.4, 0.6]",
            f.perturbed.data(),
            b.perturbed.data()
        ),
    ))
}

fn reduction_identities() -> Result<Outcome> {
    let mut failures = Vec::new();
    let mut rng = stream_rng(0x1DE, 0);
    for arch in Architecture::ALL {
        for task in [Task::Regression, Task::Classification] {
            let model = small_model(arch, 2, task, rng.random())?;
            let (x, y) = random_batch(&mut rng, 4, 2, task, true)?;
            let eps = 0.1;
            let f = fgsm(&model, &x, &y, &AttackConfig::fgsm(eps))?;
            let b1 = bim(&model, &x, &y, &AttackConfig::bim(eps, eps, 1))?;
            if f.perturbed.data() != b1.perturbed.data() {
                failures.push(format!("{arch}/{task:?}: BIM(1, eps) != FGSM"));
            }
            let b = bim(&model, &x, &y, &AttackConfig::bim(eps, 0.03, 7))?;
            let p = pgd(&model, &x, &y, &AttackConfig::pgd(eps, 0.03, 7).with_init_scale(0.0).with_seed(9))?;
            if b.perturbed.data() != p.perturbed.data() {
                failures.push(format!("{arch}/{task:?}: PGD(no start, no restarts) != BIM"));
            }
            for kind in AttackKind::ALL {
                let z = run_attack(&model, &x, &y, &AttackConfig::of_kind(kind, 0.0, 0.0).with_seed(3))?;
                if z.perturbed.data() != x.data() {
                    failures.push(format!("{arch}/{task:?}: {kind} with eps 0 moved the input"));
                }
            }
        }
    }
    Ok(gated(failures.is_empty(), format!("7 architectures x 2 tasks, bit-exact; failures {failures:?}")))
}

fn zero_budget_collapse() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    let mut rng = stream_rng(0x2E80, 0);
    let (x_all, y_all) = random_batch(&mut rng, 96, 1, Task::Classification, false)?;
    for arch in [Architecture::Lstm, Architecture::Gru, Architecture::Cnn, Architecture::ConvLstm] {
        for kind in AttackKind::ALL {
            for optimizer in [Optimizer::Sgd, Optimizer::Adam] {
                let cfg = TrainConfig::new(1, 16, 0.05, 4)
                    .with_optimizer(optimizer)
                    .with_adversary(AttackConfig::of_kind(kind, 0.0, 0.0));
                let mut adv_model = small_model(arch, 1, Task::Classification, 5)?;
                let mut clean_model = adv_model.clone();
                let mut s1 = Stepper::new(optimizer, 0.05, &adv_model.params);
                let mut s2 = Stepper::new(optimizer, 0.05, &clean_model.params);
                for (step, idx) in epoch_order(4, 0, 96).chunks(16).enumerate() {
                    let (x, y) = (x_all.select_rows(idx), y_all.select_rows(idx));
                    let attack = cfg.inner_attack(step).expect("adversary");
                    adversarial_step(&mut adv_model, &mut s1, &x, &y, &attack)?;
                    let xx = Tensor::cat_rows(&[&x, &x])?;
                    let yy = Tensor::cat_rows(&[&y, &y])?;
                    clean_step(&mut clean_model, &mut s2, &xx, &yy)?;
                    worst = worst.max(adv_model.params.max_abs_diff(&clean_model.params));
                    steps += 1;
                }
            }
        }
    }
    Ok(gated(worst <= 1e-12, format!("{steps} steps, worst per-step param difference {worst:.1e} (<= 1e-12)")))
}

/// Runs one directional scenario config and returns its report, window count
/// and runtime.
fn scenario(name: &str) -> std::result::Result<(BTreeMap<(String, String, String), f64>, usize, f64), String> {
    let config = configs().join(format!("{name}.toml"));
    let cfg = ExperimentConfig::load(&config).map_err(|e| e.to_string())?;
    let (train, test) = cfg.build_dataset().map_err(|e| e.to_string())?;
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    tsadv_all(&config, out.path())?;
    Ok((read_report(&out.path().join("report.csv")), train.len() + test.len(), start.elapsed().as_secs_f64()))
}

fn cell(report: &BTreeMap<(String, String, String), f64>, model: &str, row: &str, attack: &str) -> f64 {
    report.get(&(model.to_string(), row.to_string(), attack.to_string())).copied().unwrap_or(f64::NAN)
}

fn classification_direction() -> std::result::Result<Outcome, String> {
    let (r, windows, secs) = scenario("square")?;
    let clean = cell(&r, "LSTM", "clean", "none");
    let attacked = cell(&r, "LSTM", "attacked", "FGSM");
    let defended = cell(&r, "LSTM", "defended", "FGSM");
    let drop = clean - attacked;
    let recovered = (defended - attacked) / drop;
    Ok(gated(
        windows >= 2000 && clean >= 0.70 && drop >= 0.10 && recovered >= 0.5 && secs <= 600.0,
        format!(
            "square wave, {windows} windows: LSTM accuracy clean {clean:.4} (>= 0.70), FGSM {attacked:.4} (drop {drop:.4} >= 0.10), defended {defended:.4} (recovers {:.1}% >= 50%), {secs:.0}s (<= 600s)",
            100.0 * recovered
        ),
    ))
}

fn regression_direction() -> std::result::Result<Outcome, String> {
    let (r, windows, secs) = scenario("sine")?;
    let clean = cell(&r, "GRU", "clean", "none");
    let attacked = cell(&r, "GRU", "attacked", "FGSM");
    let defended = cell(&r, "GRU", "defended", "FGSM");
    let reduction = 1.0 - defended / attacked;
    Ok(gated(
        windows >= 2000 && clean <= 0.05 && attacked >= 2.0 * clean && reduction >= 0.3 && secs <= 600.0,
        format!(
            "sine wave, {windows} windows: GRU RMSE clean {clean:.4} (<= 0.05), FGSM {attacked:.4} ({:.1}x >= 2x), defended {defended:.4} (-{:.1}% >= 30%), {secs:.0}s (<= 600s)",
            attacked / clean,
            100.0 * reduction
        ),
    ))
}

fn qualitative_ordering() -> std::result::Result<Outcome, String> {
    let (r, _, _) = scenario("desk")?;
    let models: Vec<String> =
        r.keys().map(|k| k.0.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mean_over = |row: &str, attack: &str| {
        models.iter().map(|m| cell(&r, m, row, attack) - cell(&r, m, "clean", "none")).sum::<f64>()
            / models.len() as f64
    };
    let (fgsm_deg, bim_deg) = (mean_over("attacked", "FGSM"), mean_over("attacked", "BIM"));
    let (pgd_res, fgsm_res) = (mean_over("defended", "PGD"), mean_over("defended", "FGSM"));
    let holds = fgsm_deg >= bim_deg && pgd_res >= fgsm_res;
    Ok(Outcome {
        passed: holds,
        gated: false,
        detail: format!(
            "7-model sine matrix, mean RMSE increase: FGSM {fgsm_deg:.4} vs BIM {bim_deg:.4} ({}); after defense PGD {pgd_res:.4} vs FGSM {fgsm_res:.4} ({})",
            if fgsm_deg >= bim_deg { "FGSM >= BIM" } else { "FGSM < BIM" },
            if pgd_res >= fgsm_res { "PGD >= FGSM" } else { "PGD < FGSM" }
        ),
    })
}

struct MatrixRuns {
    first: tempfile::TempDir,
    second: tempfile::TempDir,
}

fn matrix_runs() -> std::result::Result<MatrixRuns, String> {
    let config = configs().join("quick.toml");
    let first = tempfile::tempdir().map_err(|e| e.to_string())?;
    let second = tempfile::tempdir().map_err(|e| e.to_string())?;
    tsadv_all(&config, first.path())?;
    tsadv_all(&config, second.path())?;
    Ok(MatrixRuns { first, second })
}

fn determinism(runs: &MatrixRuns) -> std::result::Result<Outcome, String> {
    let read = |d: &Path| fs::read(d.join("report.csv")).map_err(|e| e.to_string());
    let (a, b) = (read(runs.first.path())?, read(runs.second.path())?);
    let mut differing = Vec::new();
    for entry in fs::read_dir(runs.first.path().join("checkpoints")).map_err(|e| e.to_string())? {
        let name = entry.map_err(|e| e.to_string())?.file_name();
        let p = Path::new("checkpoints").join(&name);
        if fs::read(runs.first.path().join(&p)).ok() != fs::read(runs.second.path().join(&p)).ok() {
            differing.push(name.to_string_lossy().into_owned());
        }
    }
    Ok(gated(
        a == b && !a.is_empty(),
        format!(
            "two `all` runs, seed 7: report.csv identical = {} ({} bytes), differing checkpoints {differing:?}",
            a == b,
            a.len()
        ),
    ))
}

fn completeness(runs: &MatrixRuns) -> std::result::Result<Outcome, String> {
    let dir = runs.first.path();
    let text = fs::read_to_string(dir.join("report.csv")).map_err(|e| e.to_string())?;
    let cells = text.lines().skip(1).count();
    let filled = read_report(&dir.join("report.csv")).len();
    let defended = fs::read_dir(dir.join("checkpoints"))
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .filter(|e| !e.file_name().to_string_lossy().ends_with("__clean.ckpt"))
        .count();
    Ok(gated(
        cells == 49 && filled == 49 && defended == 21,
        format!("{cells} cells, {filled} filled (49), {defended} defended checkpoints (21)"),
    ))
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let fail = |e: String| Outcome { passed: false, gated: true, detail: format!("error: {e}") };
    let mut record = |n: u32, name: &'static str, o: std::result::Result<Outcome, String>| {
        let o = o.unwrap_or_else(fail);
        println!(
            "{} {n:>2} {name}: {}",
            match (o.passed, o.gated) {
                (true, _) => "PASS",
                (false, true) => "FAIL",
                (false, false) => "FAIL (soft, not gated)",
            },
            o.detail
        );
        results.push((n, name, o));
    };
    let core = |r: Result<Outcome>| r.map_err(|e| e.to_string());

    record(1, "gradient correctness", core(gradient_correctness()));
    record(2, "attack containment", core(attack_containment()));
    record(3, "closed-form oracle", core(linear_oracle()));
    record(4, "reduction identities", core(reduction_identities()));
    record(5, "zero-budget defense collapse", core(zero_budget_collapse()));
    record(6, "classification direction", classification_direction());
    record(7, "regression direction", regression_direction());
    record(8, "qualitative ordering", qualitative_ordering());
    match matrix_runs() {
        Ok(runs) => {
            record(9, "determinism", determinism(&runs));
            record(10, "matrix completeness", completeness(&runs));
        }
        Err(e) => {
            record(9, "determinism", Err(e.clone()));
            record(10, "matrix completeness", Err(e));
        }
    }

    let failed: Vec<u32> = results.iter().filter(|(_, _, o)| o.gated && !o.passed).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all gated criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
