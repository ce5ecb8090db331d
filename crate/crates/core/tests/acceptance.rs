//! End-to-end acceptance criteria. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails. Criteria run sequentially so the
//! timing limits measure one criterion at a time.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitsvm::checkpoint::{load_checkpoint, AnyCheckpoint};
use vitsvm::data::synth;
use vitsvm::gradcheck::{gradcheck_all, GradcheckOptions};
use vitsvm::heads::{create_head, HeadSettings};
use vitsvm::loss::{categorical_cross_entropy, one_hot, squared_hinge_loss};
use vitsvm::metrics::{self, confusion_matrix, ClassReport, ConfusionMatrix, EvalReport, SUMMARY_ORDER};
use vitsvm::optim::{adam_step, AdamConfig, AdamState, LrSchedule, PlateauConfig};
use vitsvm::params::ParamStore;
use vitsvm::vit::{forward_image, init_params, Ctx};
use vitsvm::{autodiff::Graph, cmd_eval, cmd_predict, cmd_train, RunConfig, Tensor, VitConfig};

const GRADCHECK_MAX_REL: f64 = 1e-4;
const GRADCHECK_TIME_LIMIT: Duration = Duration::from_secs(60);
const ROW_SUM_TOL: f64 = 1e-6;
const NORMALIZATION_ROWS: usize = 1000;
const HINGE_UNIFORM: f64 = 1.3125;
const HINGE_TOL: f64 = 1e-9;
const CE_TOL: f64 = 1e-6;
const METRIC_PAIRS: usize = 10_000;
const OVERFIT_IMAGES_PER_CLASS: usize = 8;
const OVERFIT_MAX_EPOCHS: usize = 200;
const OVERFIT_TIME_LIMIT: Duration = Duration::from_secs(300);
const GENERALIZATION_TRAIN_PER_CLASS: usize = 50;
const GENERALIZATION_TEST_PER_CLASS: usize = 10;
const GENERALIZATION_EPOCHS: usize = 50;
const GENERALIZATION_MIN_ACC: f64 = 0.90;
const ADAM_TOL: f64 = 1e-12;

type Check = Result<(bool, String), Box<dyn std::error::Error>>;

fn tiny_config(dir: &Path, manifest: &Path, val: Option<&Path>, head: &str, epochs: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.model.preset = "tiny".into();
    c.model.head = head.into();
    c.train.epochs = epochs;
    // Flips map one quadrant class onto another, so the synthetic task
    // trains without augmentation.
    c.train.augment = false;
    c.data.manifest = manifest.to_path_buf();
    c.data.val_manifest = val.map(Path::to_path_buf);
    c.output.checkpoint_dir = dir.join("checkpoints");
    c
}

fn gradient_soundness() -> Check {
    let start = Instant::now();
    let reports = gradcheck_all(&VitConfig::tiny(), &GradcheckOptions::default())?;
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel).fold(0.0, f64::max);
    let cases: Vec<String> = reports
        .iter()
        .map(|r| format!("{}/{} {:.2e}", r.head, r.mode.name(), r.max_rel))
        .collect();
    let passed = reports.len() == 4 && worst < GRADCHECK_MAX_REL && elapsed < GRADCHECK_TIME_LIMIT;
    Ok((
        passed,
        format!("{} in {:.1}s (limit {GRADCHECK_MAX_REL:e}, {:?})", cases.join(", "), elapsed.as_secs_f64(), GRADCHECK_TIME_LIMIT),
    ))
}

fn normalization_invariants() -> Check {
    let cfg = VitConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f32>::new();
    init_params(&cfg, &mut store, &mut rng)?;
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    while rows < NORMALIZATION_ROWS {
        let pixels: Vec<f64> = (0..cfg.image_size * cfg.image_size * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let image = Tensor::<f32>::from_f64(vec![cfg.image_size, cfg.image_size, 3], &pixels)?;
        let mut g = Graph::new();
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx { training: false, rng: &mut drng };
        let trace = forward_image(&mut g, &cfg, &store, &image, &mut ctx)?;
        for attn in &trace.attention {
            for &w in &attn.weights {
                let t = g.value(w);
                let n = t.shape()[1];
                for row in t.data().chunks(n) {
                    let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
                    worst = worst.max((s - 1.0).abs());
                    rows += 1;
                }
            }
        }
    }
    let attention_rows = rows;

    let mut head_rows = 0;
    for head in ["dense-softmax", "svm-hinge"] {
        let h = create_head::<f32>(head, HeadSettings::new(cfg.hidden_dim, cfg.num_classes))?;
        let mut hs = ParamStore::new();
        h.init_params(&mut hs, &mut rng)?;
        let feats: Vec<f64> = (0..NORMALIZATION_ROWS * cfg.hidden_dim).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_f64(vec![NORMALIZATION_ROWS, cfg.hidden_dim], &feats)?);
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx { training: false, rng: &mut drng };
        let out = h.forward(&mut g, &hs, x, &mut ctx)?;
        for row in g.value(out.probs).data().chunks(cfg.num_classes) {
            let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
            worst = worst.max((s - 1.0).abs());
            head_rows += 1;
        }
    }
    Ok((
        attention_rows >= NORMALIZATION_ROWS && head_rows == 2 * NORMALIZATION_ROWS && worst < ROW_SUM_TOL,
        format!("{attention_rows} attention rows, {head_rows} head rows (f32), max |sum-1| {worst:.2e} (limit {ROW_SUM_TOL:e})"),
    ))
}

fn loss_hand_values() -> Check {
    let p = Tensor::<f64>::full(vec![1, 4], 0.25);
    let y = one_hot::<f64>(&[2], 4)?;
    let hinge = squared_hinge_loss(&p, &y)?;
    // (1 − 0.25)² once and (1 + 0.25)² three times, averaged over 4 classes.
    let oracle = (0.75f64.powi(2) + 3.0 * 1.25f64.powi(2)) / 4.0;
    let ce = categorical_cross_entropy(&p, &y)?;
    let ln4 = 4f64.ln();
    let passed = oracle == HINGE_UNIFORM && (hinge - HINGE_UNIFORM).abs() < HINGE_TOL && (ce - ln4).abs() < CE_TOL;
    Ok((
        passed,
        format!("hinge {hinge} vs {HINGE_UNIFORM} (tol {HINGE_TOL:e}), CE {ce} vs ln4 {ln4} (tol {CE_TOL:e})"),
    ))
}

fn metrics_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for k in 2..=4usize {
        let truth: Vec<usize> = (0..METRIC_PAIRS).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..METRIC_PAIRS).map(|_| rng.random_range(0..k)).collect();
        let cm = confusion_matrix(&truth, &pred, k)?;
        let correct = truth.iter().zip(&pred).filter(|(t, p)| t == p).count() as u64;
        // Accuracy as the integer ratio correct/total.
        if cm.trace() != correct || cm.total() != METRIC_PAIRS as u64 {
            mismatches += 1;
        }
        if metrics::accuracy(&cm)? != correct as f64 / METRIC_PAIRS as f64 {
            mismatches += 1;
        }
        let scores = metrics::precision_recall(&cm);
        for c in 0..k {
            let tp = truth.iter().zip(&pred).filter(|(&t, &p)| t == c && p == c).count() as u64;
            let predicted = pred.iter().filter(|&&p| p == c).count() as u64;
            let actual = truth.iter().filter(|&&t| t == c).count() as u64;
            let same = |got: Option<f64>, num: u64, den: u64| match got {
                Some(v) => den > 0 && v == num as f64 / den as f64,
                None => den == 0,
            };
            if cm.counts[c][c] != tp || cm.col_sum(c) != predicted || cm.row_sum(c) != actual {
                mismatches += 1;
            }
            if !same(scores[c].precision, tp, predicted) || !same(scores[c].recall, tp, actual) {
                mismatches += 1;
            }
        }
    }
    Ok((mismatches == 0, format!("{METRIC_PAIRS} pairs for each K in 2..=4, {mismatches} mismatches")))
}

fn synthetic_overfit(tmp: &Path) -> Check {
    let data = tmp.join("overfit");
    synth::generate(&data, OVERFIT_IMAGES_PER_CLASS, 1, synth::DEFAULT_SYNTH_SIZE)?;
    let manifest = data.join("manifest.csv");
    let cfg = tiny_config(&data, &manifest, Some(&manifest), "svm-hinge", OVERFIT_MAX_EPOCHS);
    let start = Instant::now();
    let outcome = cmd_train(&cfg, None)?;
    let elapsed = start.elapsed();
    let first_perfect = outcome.history.iter().find(|e| e.val_acc == 1.0).map(|e| e.epoch);
    let report = cmd_eval(&outcome.final_checkpoint, &manifest)?;
    let probe = cmd_predict(&outcome.final_checkpoint, &data.join("c2_00003.png"))?;
    let passed = report.accuracy == 1.0 && probe.class == 2 && elapsed < OVERFIT_TIME_LIMIT;
    Ok((
        passed,
        format!(
            "{} images, train accuracy first 1.0 at epoch {:?}, final {} after {OVERFIT_MAX_EPOCHS} epochs, {:.1}s",
            OVERFIT_IMAGES_PER_CLASS * 4,
            first_perfect,
            report.accuracy,
            elapsed.as_secs_f64()
        ),
    ))
}

fn synthetic_generalization(tmp: &Path) -> Check {
    let train_dir = tmp.join("gen-train");
    let test_dir = tmp.join("gen-test");
    synth::generate(&train_dir, GENERALIZATION_TRAIN_PER_CLASS, 100, synth::DEFAULT_SYNTH_SIZE)?;
    synth::generate(&test_dir, GENERALIZATION_TEST_PER_CLASS, 200, synth::DEFAULT_SYNTH_SIZE)?;
    let (train_m, test_m) = (train_dir.join("manifest.csv"), test_dir.join("manifest.csv"));
    let mut parts = Vec::new();
    let mut passed = true;
    for head in ["svm-hinge", "dense-softmax"] {
        let cfg = tiny_config(&tmp.join(head), &train_m, Some(&test_m), head, GENERALIZATION_EPOCHS);
        let outcome = cmd_train(&cfg, None)?;
        let report = cmd_eval(&outcome.final_checkpoint, &test_m)?;
        passed &= report.samples == 40 && report.accuracy >= GENERALIZATION_MIN_ACC;
        parts.push(format!("{head} {:.3}", report.accuracy));
    }
    Ok((
        passed,
        format!(
            "{} train / {} held-out images, {GENERALIZATION_EPOCHS} epochs: {} (min {GENERALIZATION_MIN_ACC})",
            GENERALIZATION_TRAIN_PER_CLASS * 4,
            GENERALIZATION_TEST_PER_CLASS * 4,
            parts.join(", ")
        ),
    ))
}

fn params_of(path: &Path) -> Result<AnyCheckpoint, Box<dyn std::error::Error>> {
    let mut ck = load_checkpoint(path)?;
    // Output paths differ between runs; compare training state only.
    if let AnyCheckpoint::F32(c) = &mut ck {
        c.config.output = Default::default();
    }
    Ok(ck)
}

fn determinism_and_resume(tmp: &Path) -> Check {
    let data = tmp.join("determinism");
    synth::generate(&data, 8, 3, synth::DEFAULT_SYNTH_SIZE)?;
    let manifest = data.join("manifest.csv");
    let run = |name: &str| -> Result<RunConfig, Box<dyn std::error::Error>> {
        let mut cfg = tiny_config(&tmp.join(name), &manifest, None, "svm-hinge", 6);
        // Exercise the split, the flips and dropout RNG here.
        cfg.train.augment = true;
        cfg.model.dropout_rate = Some(0.1);
        Ok(cfg)
    };
    let a = run("run-a")?;
    let b = run("run-b")?;
    let oa = cmd_train(&a, None)?;
    let ob = cmd_train(&b, None)?;
    let log_a = std::fs::read(&oa.log_path)?;
    let identical = log_a == std::fs::read(&ob.log_path)?;

    let c = run("run-c")?;
    let resume_from: PathBuf = a.output.checkpoint_dir.join("epoch-0003.ckpt");
    let oc = cmd_train(&c, Some(&resume_from))?;
    let resumed_log = log_a == std::fs::read(&oc.log_path)?;
    let resumed_state = params_of(&oa.final_checkpoint)? == params_of(&oc.final_checkpoint)?;
    Ok((
        identical && resumed_log && resumed_state,
        format!(
            "identical logs: {identical}; resume from epoch 3 of 6: log bit-exact {resumed_log}, final state bit-exact {resumed_state}"
        ),
    ))
}

fn adam_and_plateau() -> Check {
    let c = AdamConfig::default();
    let g = 0.37;
    let mut p = ParamStore::<f64>::new();
    p.insert("w", Tensor::scalar(0.5))?;
    let mut st = AdamState::new(c, &p);
    let mut grads = vitsvm::autodiff::Gradients::new();
    grads.insert("w".to_string(), Tensor::scalar(g));
    adam_step(&mut p, &grads, &mut st)?;
    let m_hat = (1.0 - c.beta1) * g / (1.0 - c.beta1);
    let v_hat = (1.0 - c.beta2) * g * g / (1.0 - c.beta2);
    let expected = 0.5 - c.lr * m_hat / (v_hat.sqrt() + c.eps);
    let got = p.get("w").unwrap().item();
    let adam_ok = (got - expected).abs() < ADAM_TOL;

    let plateau = PlateauConfig::default();
    let mut s = LrSchedule::new(plateau, c.lr);
    let lrs: Vec<f64> = (0..=plateau.patience).map(|_| s.observe(0.7)).collect();
    let reductions = lrs.windows(2).filter(|w| w[1] != w[0]).count();
    let halved_once = reductions == 1 && *lrs.last().unwrap() == c.lr / 2.0;
    Ok((
        adam_ok && halved_once,
        format!(
            "first step {got} vs {expected} (tol {ADAM_TOL:e}); lr over {} constant epochs {:?}",
            plateau.patience + 1,
            lrs
        ),
    ))
}

fn report_fidelity() -> Check {
    let names = metrics::default_class_names(4);
    // Class indices: 0 central serous, 1 diabetic, 2 macular hole, 3 normal.
    let stated = EvalReport {
        model: "vit-b32".into(),
        head: "svm-hinge".into(),
        samples: 0,
        accuracy: 0.94,
        classes: [(0.89, 0.80), (1.00, 1.00), (0.82, 0.90), (1.00, 1.00)]
            .iter()
            .zip(&names)
            .map(|(&(p, r), n)| ClassReport { name: n.clone(), precision: Some(p), recall: Some(r) })
            .collect(),
        confusion: vec![],
    };
    // A matrix whose exact ratios round to the same strings: 8/9, 9/11,
    // 8/10, 9/10 and 45/48.
    let counts = vec![
        vec![8, 0, 2, 0],
        vec![0, 14, 0, 0],
        vec![1, 0, 9, 0],
        vec![0, 0, 0, 14],
    ];
    let derived = EvalReport::from_matrix("vit-b32", "svm-hinge", &ConfusionMatrix { class_names: names, counts })?;
    let want = ("1.00/1.00/0.89/0.82", "1.00/1.00/0.80/0.90", "94%");
    let mut ok = true;
    let mut shown = String::new();
    for r in [&stated, &derived] {
        let (p, rc, acc) = metrics::summary_strings(r, &SUMMARY_ORDER)?;
        ok &= (p.as_str(), rc.as_str(), acc.as_str()) == want;
        shown = format!("precision {p}, recall {rc}, accuracy {acc}");
    }
    Ok((ok, format!("{shown} (stated values and a matching confusion matrix)")))
}

fn main() -> std::process::ExitCode {
    let tmp = tempfile::tempdir().expect("tempdir");
    let criteria: Vec<(&str, Box<dyn Fn() -> Check>)> = vec![
        ("gradient soundness", Box::new(gradient_soundness)),
        ("normalization invariants", Box::new(normalization_invariants)),
        ("loss hand values", Box::new(loss_hand_values)),
        ("metrics oracle", Box::new(metrics_oracle)),
        ("synthetic overfit", Box::new(|| synthetic_overfit(tmp.path()))),
        ("synthetic generalization", Box::new(|| synthetic_generalization(tmp.path()))),
        ("determinism and resume", Box::new(|| determinism_and_resume(tmp.path()))),
        ("adam and plateau", Box::new(adam_and_plateau)),
        ("report fidelity", Box::new(report_fidelity)),
    ];
    let mut failed = Vec::new();
    for (name, check) in &criteria {
        let (passed, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        if !passed {
            failed.push(*name);
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed.len(), criteria.len());
    if failed.is_empty() {
        std::process::ExitCode::SUCCESS
    } else {
        eprintln!("failed criteria: {failed:?}");
        std::process::ExitCode::FAILURE
    }
}
