//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! A FAIL is always printed. The exit status turns nonzero on a FAIL only
//! when `ACCEPTANCE_STRICT=1`, so `cargo test` keeps running the rest of the
//! workspace while the report stays visible.

use std::process::ExitCode;
use std::time::Instant;

use mstgnn::checkpoint::Checkpoint;
use mstgnn::config::{ClipMode, ConvOrder, ModelConfig, TrainConfig};
use mstgnn::conv::decomposition_equivalence_check;
use mstgnn::data::{synth_generate, windows, MotionSequence, Window};
use mstgnn::gradcheck::GradCheckConfig;
use mstgnn::gradsuite::run_suite;
use mstgnn::graphs::init_temporal_cyclic;
use mstgnn::init::{seeded, uniform};
use mstgnn::losses::{entropy_loss, gram_matrix_loss, l1_prediction_loss, mean_row_entropy};
use mstgnn::multiscale::{temporal_pool_operator, ScaleSpec};
use mstgnn::params::ParamKind;
use mstgnn::train::{StepStats, Trainer};
use mstgnn::{MstGnn, Tape, Tensor};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn overfit_data() -> Vec<Window> {
    windows(&synth_generate(6, 40, 7).unwrap(), 10, 5, 1).unwrap()
}

fn overfit_run(model: ModelConfig, train: TrainConfig) -> Trainer {
    Trainer::from_config(model, train).unwrap()
}

fn row_sum_error(t: &Tensor) -> f64 {
    t.data()
        .chunks(t.cols())
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let entries = match run_suite(GradCheckConfig::default(), 1) {
        Ok(e) => e,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<_> = entries
        .iter()
        .filter(|e| !e.report.passed())
        .map(|e| e.name)
        .collect();
    let worst = entries
        .iter()
        .max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))
        .unwrap();
    outcome(
        failed.is_empty() && secs < 120.0,
        format!(
            "{} checks, worst {} rel err {:.2e} (< 1e-4), failed {:?}, {:.1} s (< 120 s)",
            entries.len(),
            worst.name,
            worst.report.max_rel_err,
            failed,
            secs
        ),
    )
}

fn decomposition() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded(2);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let m = rng.gen_range(1..=6);
        let t = rng.gen_range(1..=6);
        let d = rng.gen_range(1..=3);
        let x = uniform(&mut rng, &[t, m, d], 1.0);
        let s = uniform(&mut rng, &[m, m], 1.0);
        let tg = uniform(&mut rng, &[t, t], 1.0);
        match decomposition_equivalence_check(&x, &s, &tg) {
            Ok(r) => worst = worst.max(r.max_abs_err),
            Err(e) => return outcome(false, format!("error: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-10 && secs < 5.0,
        format!("20 instances, max abs err {worst:.2e} (< 1e-10), {secs:.2} s (< 5 s)"),
    )
}

fn stochasticity() -> Outcome {
    let data = overfit_data();
    let batch: Vec<&Window> = data.iter().take(4).collect();
    let mut t = overfit_run(ModelConfig::desk(6), TrainConfig::desk());
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for _ in 0..100 {
        let s: StepStats = match t.step(&batch) {
            Ok(s) => s,
            Err(e) => return outcome(false, format!("training error: {e}")),
        };
        for psi in s.pool_ops.iter().chain(&s.unpool_ops) {
            worst = worst.max(row_sum_error(psi));
            count += 1;
        }
    }
    let scales = ScaleSpec::new(6, 10, 3, 3).unwrap();
    let mut phi_exact = true;
    for &tr in scales.temporal() {
        let phi = temporal_pool_operator(10, tr).unwrap();
        for c in 0..tr {
            let s: f64 = (0..10).map(|i| phi.at2(i, c)).sum();
            phi_exact &= s == 1.0;
        }
    }
    outcome(
        worst < 1e-12 && phi_exact,
        format!(
            "{count} Ψ operators over 100 steps, max |row sum - 1| {worst:.2e} (< 1e-12); Φ columns sum to exactly 1: {phi_exact}"
        ),
    )
}

fn mask_invariant() -> Outcome {
    let data = overfit_data();
    let mut t = overfit_run(ModelConfig::desk(6), TrainConfig::desk());
    for k in 0..500 {
        if let Err(e) = t.step(&[&data[k % data.len()]]) {
            return outcome(false, format!("training error at step {k}: {e}"));
        }
    }
    let mask = init_temporal_cyclic(10).unwrap().trainable;
    let mut masked = 0;
    let mut violations = 0;
    let mut moved = false;
    for p in t.model.store().params().iter().filter(|p| p.mask.is_some()) {
        for (i, &v) in p.value.data().iter().enumerate() {
            if !mask[i] {
                masked += 1;
                if v != 0.0 {
                    violations += 1;
                }
            } else if v != 1.0 {
                moved = true;
            }
        }
    }
    outcome(
        violations == 0 && masked > 0 && moved,
        format!("{masked} masked entries after 500 steps, {violations} nonzero; trainable entries moved: {moved}"),
    )
}

fn l1_oracle(p: &Tensor, t: &Tensor) -> f64 {
    p.data()
        .iter()
        .zip(t.data())
        .map(|(a, b)| (a - b).abs())
        .sum()
}

/// `[x^{t-1} x^t][x^{t-1} x^t]ᵀ` built explicitly as a C×2 matrix.
fn gram_oracle(p: &Tensor, t: &Tensor, last: &Tensor) -> f64 {
    let [n, m, c] = [p.shape()[0], p.shape()[1], p.shape()[2]];
    let frame = |seq: &Tensor, k: isize, j: usize, ch: usize| {
        if k < 0 {
            last.at2(j, ch)
        } else {
            seq.at3(k as usize, j, ch)
        }
    };
    let mut total = 0.0;
    for k in 0..n as isize {
        for j in 0..m {
            for a in 0..c {
                for b in 0..c {
                    let g = |s: &Tensor| {
                        let v = [
                            [frame(s, k - 1, j, a), frame(s, k, j, a)],
                            [frame(s, k - 1, j, b), frame(s, k, j, b)],
                        ];
                        v[0][0] * v[1][0] + v[0][1] * v[1][1]
                    };
                    total += (g(p) - g(t)).powi(2);
                }
            }
        }
    }
    total / n as f64
}

fn entropy_oracle(psis: &[Tensor]) -> f64 {
    let mut total = 0.0;
    for psi in psis {
        let mut h = 0.0;
        for i in 0..psi.rows() {
            for j in 0..psi.cols() {
                let v = psi.at2(i, j);
                if v > 0.0 {
                    h -= v * v.ln();
                }
            }
        }
        total += h / psi.rows() as f64;
    }
    total / psis.len() as f64
}

fn losses() -> Outcome {
    let mut rng = seeded(5);
    let eval = |f: &dyn Fn(&mut Tape) -> mstgnn::Result<mstgnn::Var>| -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item()
    };
    // Ideal points.
    let x = uniform(&mut rng, &[5, 4, 3], 1.0);
    let last = uniform(&mut rng, &[4, 3], 1.0);
    let onehot = Tensor::from_fn(&[4, 2], |i| if i[0] % 2 == i[1] { 1.0 } else { 0.0 });
    let z_pred = eval(&|t| {
        let a = t.constant(x.clone());
        l1_prediction_loss(t, a, a)
    });
    let z_gram = eval(&|t| {
        let a = t.constant(x.clone());
        let l = t.constant(last.clone());
        gram_matrix_loss(t, a, a, l)
    });
    let z_ent = eval(&|t| {
        let a = t.constant(onehot.clone());
        entropy_loss(t, &[a])
    });
    let ideal = z_pred == 0.0 && z_gram == 0.0 && z_ent == 0.0;

    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (n, m, c) = (
            rng.gen_range(1..6),
            rng.gen_range(1..6),
            rng.gen_range(1..4),
        );
        let p = uniform(&mut rng, &[n, m, c], 2.0);
        let q = uniform(&mut rng, &[n, m, c], 2.0);
        let l = uniform(&mut rng, &[m, c], 2.0);
        let psis: Vec<Tensor> = (0..2)
            .map(|_| {
                let cols = rng.gen_range(2..5);
                // One exact zero per operator exercises the log floor.
                let mut raw = uniform(&mut rng, &[m, cols], 1.0).map(|v| v.abs() + 0.01);
                raw.set2(0, 0, 0.0);
                Tensor::from_fn(&[m, cols], |i| {
                    raw.at2(i[0], i[1]) / (0..cols).map(|k| raw.at2(i[0], k)).sum::<f64>()
                })
            })
            .collect();
        let l1 = eval(&|t| {
            let (a, b) = (t.constant(p.clone()), t.constant(q.clone()));
            l1_prediction_loss(t, a, b)
        });
        let gram = eval(&|t| {
            let (a, b, c) = (
                t.constant(p.clone()),
                t.constant(q.clone()),
                t.constant(l.clone()),
            );
            gram_matrix_loss(t, a, b, c)
        });
        let ent = eval(&|t| {
            let vars: Vec<_> = psis.iter().map(|s| t.constant(s.clone())).collect();
            entropy_loss(t, &vars)
        });
        worst = worst
            .max((l1 - l1_oracle(&p, &q)).abs())
            .max((gram - gram_oracle(&p, &q, &l)).abs())
            .max((ent - entropy_oracle(&psis)).abs());
    }
    outcome(
        ideal && worst < 1e-10,
        format!("ideal points zero: {ideal}; 10 random instances, max |loss - oracle| {worst:.2e} (< 1e-10)"),
    )
}

/// Trains until the batch MAE over all windows drops below `target`.
fn train_to(
    model: ModelConfig,
    train: TrainConfig,
    data: &[Window],
    target: f64,
    max_steps: u64,
) -> Result<(Trainer, u64, f64, f64), String> {
    let mut t = overfit_run(model, train);
    let start = Instant::now();
    let refs: Vec<&Window> = data.iter().collect();
    let mut last_mae = f64::INFINITY;
    while t.step_count() < max_steps {
        let s = t.step(&refs).map_err(|e| e.to_string())?;
        last_mae = s.mae;
        if s.mae < target {
            break;
        }
    }
    let (n, secs) = (t.step_count(), start.elapsed().as_secs_f64());
    Ok((t, n, last_mae, secs))
}

fn mean_pool_entropy(model: &MstGnn, data: &[Window]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for w in data {
        let mut tape = Tape::new();
        let p = model.store().bind(&mut tape);
        let fwd = model.forward(&mut tape, &p, &w.observed, None).unwrap();
        for v in fwd.pool_operators() {
            total += mean_row_entropy(tape.value(v));
            count += 1;
        }
    }
    total / count as f64
}

fn overfit() -> Outcome {
    let data = overfit_data();
    let full = train_to(ModelConfig::desk(6), TrainConfig::desk(), &data, 0.05, 2000);
    let mut no_ent_cfg = TrainConfig::desk();
    no_ent_cfg.weights.gamma = 0.0;
    let no_ent = train_to(ModelConfig::desk(6), no_ent_cfg, &data, 0.05, 2000);
    match (full, no_ent) {
        (Ok((tf, nf, mf, sf)), Ok((tn, nn, mn, sn))) => {
            let ef = mean_pool_entropy(&tf.model, &data);
            let en = mean_pool_entropy(&tn.model, &data);
            let full_ok = mf < 0.05 && nf <= 2000 && sf < 60.0;
            let no_ent_ok = mn < 0.05 && nn <= 2000;
            outcome(
                full_ok && no_ent_ok && en > ef,
                format!(
                    "{} windows; full loss: MAE {mf:.4} (< 0.05) at step {nf} (<= 2000) in {sf:.1} s (< 60 s); \
                     without L_ent: MAE {mn:.4} at step {nn} in {sn:.1} s; mean Ψ row entropy {ef:.4} (full) vs {en:.4} (no L_ent, must be higher)",
                    data.len()
                ),
            )
        }
        (f, n) => outcome(
            false,
            format!("training failed: {:?} / {:?}", f.err(), n.err()),
        ),
    }
}

fn ablations() -> Outcome {
    let data = overfit_data();
    let refs: Vec<&Window> = data.iter().collect();
    let base = ModelConfig::desk(6);
    let variants: Vec<(&str, ModelConfig)> = vec![
        (
            "R=1",
            ModelConfig {
                spatial_scales: 1,
                temporal_scales: 1,
                ..base.clone()
            },
        ),
        ("R=3", base.clone()),
        (
            "fixed graphs",
            ModelConfig {
                trainable_graphs: false,
                ..base.clone()
            },
        ),
        (
            "plain GRU",
            ModelConfig {
                attention: false,
                ..base.clone()
            },
        ),
        (
            "temporal-first",
            ModelConfig {
                conv_order: ConvOrder::TemporalFirst,
                ..base.clone()
            },
        ),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, cfg) in variants {
        let fixed = !cfg.trainable_graphs;
        let mut t = overfit_run(cfg, TrainConfig::desk());
        let graphs_before: Vec<Tensor> = graph_values(&t);
        let mut result = Ok(0.0);
        for _ in 0..30 {
            match t.step(&refs) {
                Ok(s) => result = Ok(s.mae),
                Err(e) => {
                    result = Err(e.to_string());
                    break;
                }
            }
        }
        match result {
            Ok(mae) if mae.is_finite() => {
                let frozen_ok = !fixed || graph_values(&t) == graphs_before;
                ok &= frozen_ok;
                parts.push(format!(
                    "{name}: MAE {mae:.4}{}",
                    if fixed {
                        format!(", graphs unchanged {frozen_ok}")
                    } else {
                        String::new()
                    }
                ));
            }
            other => {
                ok = false;
                parts.push(format!("{name}: {other:?}"));
            }
        }
    }
    outcome(ok, format!("30 steps each; {}", parts.join("; ")))
}

fn graph_values(t: &Trainer) -> Vec<Tensor> {
    t.model
        .store()
        .params()
        .iter()
        .filter(|p| p.kind == ParamKind::Graph)
        .map(|p| p.value.clone())
        .collect()
}

fn determinism() -> Outcome {
    let run = || {
        let data = overfit_data();
        let mut train = TrainConfig::desk();
        train.batch_size = 8;
        train.max_steps = Some(12);
        train.clip_mode = ClipMode::Global;
        let mut t = Trainer::from_config(ModelConfig::desk(6), train).unwrap();
        let mut log = Vec::new();
        t.fit(&data, &mut log).unwrap();
        let ck = Checkpoint::from_trainer(&t).to_bytes();
        let pred = t.model.predict(&data[0].observed).unwrap();
        let csv = MotionSequence::new("synthetic", pred).unwrap().to_csv();
        (log, ck, csv)
    };
    let (a, b) = (run(), run());
    outcome(
        a == b,
        format!(
            "two seeded runs: log identical {} ({} bytes), checkpoint identical {} ({} bytes), predictions identical {}",
            a.0 == b.0,
            a.0.len(),
            a.1 == b.1,
            a.1.len(),
            a.2 == b.2
        ),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let data = overfit_data();
    let mut t = Trainer::from_config(ModelConfig::desk(6), TrainConfig::desk()).unwrap();
    for w in data.iter().take(3) {
        t.step(&[w]).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mstg");
    Checkpoint::from_trainer(&t).save(&path).unwrap();
    let loaded = match Checkpoint::load(&path).and_then(|c| c.to_model()) {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("load failed: {e}")),
    };
    let mut rng = seeded(9);
    let mut identical = 0;
    for _ in 0..10 {
        let x = uniform(&mut rng, &[10, 6, 3], 1.5);
        let a = t.model.predict(&x).unwrap();
        let b = loaded.predict(&x).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&a) == bits(&b) {
            identical += 1;
        }
    }
    outcome(
        identical == 10,
        format!("{identical}/10 random inputs bit-identical after save/load"),
    )
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("gradient suite", gradient_suite),
        ("decomposition oracle", decomposition),
        ("stochasticity invariants", stochasticity),
        ("structural mask", mask_invariant),
        ("loss sanity", losses),
        ("overfit demonstration", overfit),
        ("ablation switches", ablations),
        ("determinism", determinism),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = f();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "[{tag}] {} {name}: {} [{:.1} s]",
            i + 1,
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed += 1;
        }
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed == 0 || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
