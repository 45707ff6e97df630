//! Acceptance suite: one PASS/FAIL line per criterion. Criterion 8 is a soft
//! gate and never fails the run.
//!
//! `HAFX_COLLAPSE_SCALE=quick` shrinks the collapse run for smoke testing.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use hafx::attention::{
    band_softmax_attention_tape, feature_map_apply, hybrid_attention, linear_attention_quadratic_oracle,
    linear_attention_streaming, linear_attention_tape, rope_tape, softmax_attention_causal, AblationMode, Activation,
    AttentionInputs, FeatureMapParams, FeatureMapVars, HybridSpec, KeyBand, RopeParams, WindowSpec, LA_EPS,
};
use hafx::cli::RunConfig;
use hafx::conversion::{
    run_attention_transfer, run_pretrain, ssd_sample, transfer_loss_tape, FinetuneSetup, Finetuner, SSDSchedule,
    TrainConfig, TransferObjective, TransferSetup,
};
use hafx::evalbench::{
    base_scores, benchmark_scaling, evaluate_ablations, recovered_performance, BenchPath, TaskKind, TaskSpec,
};
use hafx::model::{forward_logits, init_model, AttentionKind, LoraConfig, ModelConfig, ParamGroup};
use hafx::tensor::{finite_diff_check_multi, SeededRng, Tape, Tensor, Var};

type Outcome = (bool, String);

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn c1_streaming_matches_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let mut rng = SeededRng::new(case, "accept-c1");
        let t = 1 + rng.below(64);
        let d_prime = if case % 2 == 0 { 4 } else { 8 };
        let hd = 8;
        let lag = match case % 3 {
            0 => 0,
            1 => 1 + rng.below(8),
            _ => t + 1,
        };
        let fm = FeatureMapParams::identity_init(hd, d_prime, Activation::ALL[(case % 4) as usize], 0.1, &mut rng);
        let q = Tensor::randn(&[t, hd], 1.0, &mut rng);
        let k = Tensor::randn(&[t, hd], 1.0, &mut rng);
        let v = Tensor::randn(&[t, hd], 1.0, &mut rng);
        let (fq, fk) = (feature_map_apply(&fm, &q).unwrap(), feature_map_apply(&fm, &k).unwrap());
        let s = linear_attention_streaming(&fq, &fk, &v, lag).unwrap();
        let o = linear_attention_quadratic_oracle(&fq, &fk, &v, lag).unwrap();
        worst = worst.max(max_abs(&s.output, &o.output));
        if s.guard_hits != o.guard_hits {
            return (false, format!("case {case}: guard hits differ"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst < 1e-10 && secs < 10.0,
        format!("max |streaming − oracle| = {worst:.2e} over 100 cases (< 1e-10), {secs:.2}s (< 10s)"),
    )
}

/// Relative finite-difference error of `Σ W ⊙ f(x…)`, with every input
/// of at most 32 elements.
fn probe<F>(f: F, inputs: &[Tensor], seed: u64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> hafx::error::Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let w = Tensor::randn(tape.value(out).shape(), 1.0, &mut SeededRng::new(seed, "probe"));
    finite_diff_check_multi(
        |tape, v| {
            let y = f(tape, v)?;
            let w = tape.constant(w.clone());
            let p = tape.mul(y, w)?;
            tape.sum(p)
        },
        inputs,
        1e-5,
    )
    .unwrap()
}

/// As [`probe`], plus a fixed linear term in every input. Attention rows
/// whose output ignores an input (the first query, for instance) have a
/// structurally zero gradient, which the relative metric cannot score; the
/// linear term keeps every entry away from zero without hiding the kernel's
/// own contribution.
fn probe_with_skip<F>(f: F, inputs: &[Tensor], seed: u64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> hafx::error::Result<Var>,
{
    let mut rng = SeededRng::new(seed, "skip");
    let skips: Vec<Tensor> = inputs.iter().map(|t| Tensor::randn(t.shape(), 1.0, &mut rng)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let w = Tensor::randn(tape.value(out).shape(), 1.0, &mut rng);
    finite_diff_check_multi(
        |tape, v| {
            let y = f(tape, v)?;
            let w = tape.constant(w.clone());
            let mut total = tape.mul(y, w)?;
            total = tape.sum(total)?;
            for (x, s) in v.iter().zip(&skips) {
                let s = tape.constant(s.clone());
                let p = tape.mul(*x, s)?;
                let p = tape.sum(p)?;
                total = tape.add(total, p)?;
            }
            Ok(total)
        },
        inputs,
        1e-5,
    )
    .unwrap()
}

fn c2_gradients() -> Outcome {
    let mut rng = SeededRng::new(2, "accept-c2");
    let mut m = |r: usize, c: usize| Tensor::randn(&[r, c], 1.0, &mut rng);
    let (a, b, c, d) = (m(4, 5), m(5, 3), m(4, 5), m(3, 5));
    let row5 = m(1, 5);
    let away = |t: &Tensor| {
        let mut t = t.clone();
        t.data_mut().iter_mut().for_each(|x| *x += 0.2 * x.signum());
        t
    };
    let pos = |t: &Tensor| {
        let mut t = t.clone();
        t.data_mut().iter_mut().for_each(|x| *x = 0.5 + x.abs());
        t
    };
    let (qa, ka, va) = (m(6, 4), m(6, 4), m(6, 4));
    let mut results: Vec<(&str, f64)> = vec![
        ("matmul", probe(|t, v| t.matmul(v[0], v[1]), &[a.clone(), b.clone()], 1)),
        ("matmul_bt", probe(|t, v| t.matmul_bt(v[0], v[1]), &[a.clone(), d.clone()], 2)),
        ("transpose", probe(|t, v| t.transpose(v[0]), &[a.clone()], 3)),
        ("add", probe(|t, v| t.add(v[0], v[1]), &[a.clone(), c.clone()], 4)),
        ("sub", probe(|t, v| t.sub(v[0], v[1]), &[a.clone(), c.clone()], 5)),
        ("mul", probe(|t, v| t.mul(v[0], v[1]), &[a.clone(), c.clone()], 6)),
        ("scale", probe(|t, v| t.scale(v[0], -1.7), &[a.clone()], 7)),
        ("neg", probe(|t, v| t.neg(v[0]), &[a.clone()], 8)),
        ("add_row", probe(|t, v| t.add_row(v[0], v[1]), &[a.clone(), row5.clone()], 9)),
        ("mul_row", probe(|t, v| t.mul_row(v[0], v[1]), &[a.clone(), row5.clone()], 10)),
        ("exp", probe(|t, v| t.exp(v[0]), &[a.clone()], 11)),
        ("relu", probe(|t, v| t.relu(v[0]), &[away(&a)], 12)),
        ("elu1p", probe(|t, v| t.elu1p(v[0]), &[away(&a)], 13)),
        ("gelu", probe(|t, v| t.gelu(v[0]), &[a.clone()], 14)),
        ("square", probe(|t, v| t.square(v[0]), &[a.clone()], 15)),
        ("log_eps", probe(|t, v| t.log_eps(v[0], 1e-12), &[pos(&a)], 16)),
        ("row_softmax", probe(|t, v| t.row_softmax(v[0]), &[a.clone()], 17)),
        ("row_normalize", probe(|t, v| t.row_normalize(v[0], LA_EPS), &[pos(&a)], 18)),
        (
            "layer_norm",
            probe(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5), &[a.clone(), pos(&row5), row5.clone()], 19),
        ),
        ("concat_cols", probe(|t, v| t.concat_cols(&[v[0], v[1]]), &[a.clone(), m(4, 2)], 20)),
        ("slice_cols", probe(|t, v| t.slice_cols(v[0], 1, 3), &[a.clone()], 21)),
        ("embedding", probe(|t, v| t.embedding(v[0], &[2, 0, 2, 5, 1]), &[m(6, 4)], 22)),
        ("sum", probe(|t, v| t.sum(v[0]), &[a.clone()], 23)),
        ("mean", probe(|t, v| t.mean(v[0]), &[a.clone()], 24)),
        (
            "cross_entropy",
            probe(|t, v| t.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)]), &[a.clone()], 25),
        ),
        ("rope", probe(|t, v| rope_tape(t, v[0], RopeParams::default()), &[m(6, 4)], 26)),
    ];
    for (name, lag) in [("linear_attention (overlap)", 0), ("linear_attention (lag 2)", 2)] {
        let (fq, fk) = (pos(&qa), pos(&ka));
        let e = probe_with_skip(|t, v| Ok(linear_attention_tape(t, v[0], v[1], v[2], lag)?.0), &[fq, fk, va.clone()], 27);
        results.push((name, e));
    }
    for (name, band) in [
        ("softmax_attention (causal)", KeyBand::Causal),
        ("softmax_attention (window)", KeyBand::Window(3)),
        ("softmax_attention (sinks)", KeyBand::Sinks(2)),
        ("softmax_attention (window+sinks)", KeyBand::WindowWithSinks { window: 2, sinks: 1 }),
    ] {
        let e = probe_with_skip(
            |t, v| band_softmax_attention_tape(t, v[0], v[1], v[2], band),
            &[qa.clone(), ka.clone(), va.clone()],
            28,
        );
        results.push((name, e));
    }
    let fm = FeatureMapParams::identity_init(4, 4, Activation::Softmax, 0.3, &mut SeededRng::new(4, "phi"));
    for objective in [
        TransferObjective::WeightsCE,
        TransferObjective::OutputsMSE,
        TransferObjective::HybridOutputsMSE,
    ] {
        let (q, k, v) = (qa.clone(), ka.clone(), va.clone());
        let e = finite_diff_check_multi(
            |t, p| {
                let phi = FeatureMapVars {
                    weight: p[0],
                    bias: p[1],
                    activation: Activation::Softmax,
                };
                let (q, k, v) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
                transfer_loss_tape(t, objective, q, k, v, phi, WindowSpec::with_window(2), HybridSpec::default())
            },
            &[fm.weight.clone(), fm.bias.clone()],
            1e-5,
        )
        .unwrap();
        results.push((objective.name(), e));
    }
    let failing: Vec<String> = results
        .iter()
        .filter(|(_, e)| !(*e < 1e-4))
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect();
    let (name, worst) = results.iter().fold(("", 0.0f64), |acc, (n, e)| if *e > acc.1 { (n, *e) } else { acc });
    (
        failing.is_empty(),
        if failing.is_empty() {
            format!("{} checks, worst relative error {worst:.2e} ({name}) < 1e-4", results.len())
        } else {
            format!("failing: {}", failing.join(", "))
        },
    )
}

fn c3_branch_algebra() -> Outcome {
    let (mut add_err, mut none_max, mut sink_err) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..20u64 {
        let mut rng = SeededRng::new(seed, "accept-c3");
        let t = 2 + rng.below(40);
        let hd = 8;
        let inputs = AttentionInputs::new(
            Tensor::randn(&[t, hd], 1.0, &mut rng),
            Tensor::randn(&[t, hd], 1.0, &mut rng),
            Tensor::randn(&[t, hd], 1.0, &mut rng),
        )
        .unwrap();
        let fm = FeatureMapParams::identity_init(hd, hd / 2, Activation::Softmax, 0.1, &mut rng);
        let win = WindowSpec::with_window(1 + rng.below(12));
        for overlap in [false, true] {
            let hy = HybridSpec { g: 0.5, overlap };
            let run = |mode| hybrid_attention(&inputs, &fm, win, hy, mode).unwrap();
            let sum = run(AblationMode::SWAOnly).add(&run(AblationMode::LAOnly)).unwrap();
            add_err = add_err.max(max_abs(&run(AblationMode::FullHybrid), &sum));
            none_max = none_max.max(run(AblationMode::NoAttention).data().iter().fold(0.0, |m, x| m.max(x.abs())));
        }
        let full = softmax_attention_causal(&inputs).unwrap();
        for sinks in [t, t + 3] {
            let w = WindowSpec {
                sink_count: sinks,
                ..win
            };
            let s = hybrid_attention(&inputs, &fm, w, HybridSpec::default(), AblationMode::SinksOnly).unwrap();
            sink_err = sink_err.max(max_abs(&s, &full));
        }
    }
    (
        add_err < 1e-10 && none_max == 0.0 && sink_err < 1e-12,
        format!(
            "|full − (swa + la)| = {add_err:.2e} (< 1e-10), max |no-attention| = {none_max}, |sinks≥T − softmax| = {sink_err:.2e} (< 1e-12)"
        ),
    )
}

fn c4_schedules() -> Outcome {
    let decay = SSDSchedule {
        dropout_per_epoch: vec![0.9, 0.75, 0.5],
        window_per_epoch: vec![64],
    };
    let grow = SSDSchedule {
        dropout_per_epoch: vec![0.0],
        window_per_epoch: vec![4, 8, 16, 32, 64],
    };
    let mut ok = decay.rate(1).unwrap() == 0.9
        && decay.rate(2).unwrap() == 0.75
        && decay.rate(3).unwrap() == 0.5
        && decay.rate(9).unwrap() == 0.5
        && grow.window(3).unwrap() == 16
        && grow.window(5).unwrap() == 64
        && grow.window(12).unwrap() == 64;
    let mut rng = SeededRng::new(0, "ssd");
    let sampled = (0..20_000).filter(|_| ssd_sample(&decay, 1, &mut rng).unwrap().0).count() as f64 / 20_000.0;
    let sigma = (0.9f64 * 0.1 / 20_000.0).sqrt();
    ok &= (sampled - 0.9).abs() < 4.0 * sigma;
    ok &= (0..50).all(|_| ssd_sample(&grow, 3, &mut rng).unwrap() == (false, 16));

    let model_cfg = ModelConfig {
        vocab_size: 32,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        mlp_width: 32,
        max_t: 32,
        ..ModelConfig::default()
    };
    let mut model = init_model(&model_cfg).unwrap();
    model.lora_attach(&LoraConfig::default()).unwrap();
    let data = TaskSpec::new(TaskKind::AssocRecall, 18, 32, 24, 0).generate().unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        grad_accum: 1,
        ..TrainConfig::default()
    };
    let full = SSDSchedule {
        dropout_per_epoch: vec![1.0],
        window_per_epoch: vec![4],
    };
    let setup = FinetuneSetup {
        ssd: Some(full),
        ..FinetuneSetup::hybrid(WindowSpec::with_window(4), HybridSpec::default())
    };
    let rec = Finetuner::new(&cfg, setup)
        .unwrap()
        .epoch(&mut model, &data.train, &data.eval, 1)
        .unwrap();
    let zero_grads = rec.swa_grad_norms.iter().all(|&n| n == 0.0);
    ok &= zero_grads && rec.swa_dropped_steps == rec.step_losses.len() && !rec.step_losses.is_empty();
    (
        ok,
        format!(
            "rate(1)=0.9, window(3)=16, hold-last at epochs 9/12, sampled drop rate {sampled:.4}; rate-1.0 epoch: {}/{} steps dropped, SWA gradient norms all zero: {zero_grads}",
            rec.swa_dropped_steps,
            rec.step_losses.len()
        ),
    )
}

fn c5_lora() -> Outcome {
    let cfg = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        mlp_width: 64,
        max_t: 32,
        ..ModelConfig::default()
    };
    let tokens: Vec<usize> = (0..24).map(|i| (i * 11 + 3) % 60).collect();
    let attention = AttentionKind::Hybrid {
        win: WindowSpec::with_window(4),
        hy: HybridSpec::default(),
        mode: AblationMode::FullHybrid,
    };
    let mut model = init_model(&cfg).unwrap();
    let before = forward_logits(&model, &tokens, &attention).unwrap();
    model.lora_attach(&LoraConfig::default()).unwrap();
    let noop = forward_logits(&model, &tokens, &attention).unwrap() == before;

    let mut rng = SeededRng::new(5, "accept-c5");
    for (_, t) in model.params.iter_mut().filter(|(n, _)| n.contains(".lora_b")) {
        *t = Tensor::randn(t.shape(), 0.1, &mut rng);
    }
    let adapted = forward_logits(&model, &tokens, &attention).unwrap();
    let mut merged = model.clone();
    merged.lora_merge().unwrap();
    let merge_err = max_abs(&adapted, &forward_logits(&merged, &tokens, &attention).unwrap());

    let mut student = init_model(&cfg).unwrap();
    let before = student.params.clone();
    let data = TaskSpec::new(TaskKind::Copy, 16, 64, 16, 0).generate().unwrap();
    let train = TrainConfig {
        batch_size: 4,
        grad_accum: 1,
        ..TrainConfig::default()
    };
    let setup = TransferSetup {
        objective: TransferObjective::WeightsCE,
        win: WindowSpec::with_window(4),
        hy: HybridSpec::default(),
    };
    run_attention_transfer(&mut student, setup, &train, &data.train).unwrap();
    let mut others_identical = true;
    let mut phi_changed = false;
    for (name, t) in &student.params {
        if ParamGroup::of(name) == ParamGroup::FeatureMap {
            phi_changed |= t != &before[name];
        } else {
            others_identical &= t == &before[name];
        }
    }
    (
        noop && merge_err < 1e-12 && others_identical && phi_changed,
        format!(
            "zero-init logits bit-identical: {noop}; merge max |Δ| = {merge_err:.2e} (< 1e-12); transfer: non-φ bit-identical {others_identical}, φ updated {phi_changed}"
        ),
    )
}

fn c6_recovered() -> Outcome {
    let a = recovered_performance(65.56, 68.26).unwrap();
    let b = recovered_performance(34.40, 68.26).unwrap();
    (
        (a - 96.04).abs() <= 0.01 && (b - 50.39).abs() <= 0.01,
        format!("(65.56, 68.26) → {a:.4}, (34.40, 68.26) → {b:.4}"),
    )
}

fn c7_scaling() -> Outcome {
    let start = Instant::now();
    let report = benchmark_scaling(&[256, 512, 1024, 2048], 32, 16, 5, 0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let la = report.growth_ratios(BenchPath::StreamingLa);
    let quad = report.growth_ratios(BenchPath::QuadraticSoftmax);
    let gated = |rs: &[(usize, f64)], lo: f64, hi: f64| rs.iter().filter(|(t, _)| *t >= 1024).all(|(_, r)| (lo..=hi).contains(r));
    let aux: Vec<usize> = report.rows_for(BenchPath::StreamingLa).iter().map(|r| r.aux_bytes).collect();
    let flat = aux.windows(2).all(|w| w[0] == w[1]);
    let fmt = |rs: &[(usize, f64)]| rs.iter().map(|(t, r)| format!("{}→{t}: {r:.2}", t / 2)).collect::<Vec<_>>().join(", ");
    (
        gated(&la, 1.6, 2.6) && gated(&quad, 3.2, 5.2) && flat && secs < 120.0,
        format!(
            "streaming [{}] in [1.6, 2.6]; quadratic [{}] in [3.2, 5.2] (gated for T ≥ 512); streaming state {} B at every T; {secs:.1}s",
            fmt(&la),
            fmt(&quad),
            aux[0]
        ),
    )
}

struct CollapseNumbers {
    chance: f64,
    /// Scored positions in the evaluation set.
    n: usize,
    rows: BTreeMap<(String, AblationMode), f64>,
    base: f64,
}

fn collapse_run(quick: bool) -> CollapseNumbers {
    let text = std::fs::read_to_string(recipe("collapse.cfg")).unwrap();
    let mut cfg = RunConfig::parse(&text).unwrap();
    if quick {
        for t in &mut cfg.tasks {
            t.n_examples = t.n_examples.min(400);
        }
        cfg.train.pretrain_epochs = 1;
    }
    let train_cfg = cfg.train_config();
    let spec = cfg.task_specs().into_iter().find(|s| s.kind == TaskKind::AssocRecall).unwrap();
    let (_, task) = cfg.generate_tasks().unwrap().into_iter().find(|(k, _)| *k == TaskKind::AssocRecall).unwrap();
    let mut base = init_model(&cfg.model_config()).unwrap();
    run_pretrain(&mut base, &train_cfg, &task.train, &task.eval).unwrap();
    base.quantize_f32();
    let tasks = [(TaskKind::AssocRecall, &task.eval)];
    let reference = base_scores(&base, &tasks).unwrap();

    let eval_win = cfg.eval_window();
    let mut rows = BTreeMap::new();
    for objective in [TransferObjective::HybridOutputsMSE, TransferObjective::WeightsCE] {
        let mut m = base.clone();
        let setup = TransferSetup {
            objective,
            win: cfg.window(),
            hy: cfg.hybrid(),
        };
        run_attention_transfer(&mut m, setup, &train_cfg, &task.train).unwrap();
        m.quantize_f32();
        let report =
            evaluate_ablations(&m, objective.name(), &tasks, &AblationMode::ALL, cfg.hybrid(), eval_win, &reference)
                .unwrap();
        for r in report.rows {
            rows.insert((objective.name().to_string(), r.mode), r.score.accuracy);
        }
    }
    let n: usize = task.eval.examples.iter().map(|e| e.scored()).sum();
    let chance = 1.0 / spec.value_count() as f64;
    CollapseNumbers {
        chance,
        n,
        rows,
        base: reference["assoc-recall"],
    }
}

fn c8_collapse() -> Outcome {
    let quick = std::env::var("HAFX_COLLAPSE_SCALE").is_ok_and(|v| v == "quick");
    let start = Instant::now();
    let r = collapse_run(quick);
    let mins = start.elapsed().as_secs_f64() / 60.0;
    let get = |obj: &str, mode| r.rows[&(obj.to_string(), mode)];
    let h = "hybrid-outputs-mse";
    let (h_la, h_swa, h_full) = (
        get(h, AblationMode::LAOnly),
        get(h, AblationMode::SWAOnly),
        get(h, AblationMode::FullHybrid),
    );
    let w_la = get("weights-ce", AblationMode::LAOnly);
    let sigma = |p: f64| (p * (1.0 - p) / r.n as f64).sqrt();
    let three = 3.0 * sigma(r.chance);
    let la_collapsed = (h_la - r.chance).abs() <= three;
    let swa_carries = (h_swa - h_full).abs() <= 3.0 * sigma(h_full);
    let ce_la_alive = w_la - r.chance > three;
    (
        la_collapsed && swa_carries && ce_la_alive && mins < 30.0,
        format!(
            "{}base {:.3}, chance {:.3} ± 3σ {:.4}; hybrid-MSE: la-only {h_la:.3} (within 3σ of chance: {la_collapsed}), swa-only {h_swa:.3} vs full {h_full:.3} (within 3σ: {swa_carries}); weights-CE la-only {w_la:.3} (> chance + 3σ: {ce_la_alive}); {mins:.1} min",
            if quick { "[quick scale] " } else { "" },
            r.base,
            r.chance,
            three
        ),
    )
}

fn recipe(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes").join(name)
}

/// Runs a recipe's CLI pipeline at reduced data scale in `dir`, returning
/// every emitted checkpoint and CSV file.
fn run_recipe(name: &str, dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let text = std::fs::read_to_string(recipe(name)).unwrap();
    let mut cfg = RunConfig::parse(&text).unwrap();
    for t in &mut cfg.tasks {
        t.n_examples = t.n_examples.min(16);
    }
    cfg.train.pretrain_epochs = cfg.train.pretrain_epochs.min(1);
    cfg.train.finetune_epochs = cfg.train.finetune_epochs.min(2);
    cfg.output_dir = dir.join("out").to_string_lossy().into_owned();
    let cfg_path = dir.join(name);
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let hafx = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_hafx"))
            .args(args)
            .current_dir(dir)
            .env_remove("HAFX_OUT_DIR")
            .output()
            .unwrap();
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let c = cfg_path.to_str().unwrap();
    let run = dir.join("out").join(&cfg.run_id);
    let p = |f: &str| run.join(f).to_string_lossy().into_owned();
    let csv = p("eval.csv");
    match name {
        "collapse.cfg" => {
            hafx(&["transfer", "--config", c]);
            hafx(&["ablate", "--config", c, "--ckpt", &p("post-transfer.hafx"), "--base", &p("base.hafx"), "--out", &csv]);
        }
        "hedgecats.cfg" => {
            hafx(&["hedgecats", "--config", c]);
            hafx(&["ablate", "--config", c, "--ckpt", &p("hedgecats-selected.hafx"), "--base", &p("base.hafx"), "--out", &csv]);
        }
        _ => {
            hafx(&["transfer", "--config", c]);
            hafx(&["ssd-run", "--config", c, "--ckpt", &p("post-transfer.hafx")]);
            hafx(&["ablate", "--config", c, "--ckpt", &p("post-ssd.hafx"), "--base", &p("base.hafx"), "--out", &csv]);
        }
    }
    std::fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "hafx" || x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn c9_determinism() -> Outcome {
    let mut notes = vec![];
    let mut ok = true;
    for name in ["collapse.cfg", "hedgecats.cfg", "ssd_decay.cfg"] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (ra, rb) = (run_recipe(name, a.path()), run_recipe(name, b.path()));
        let same = !ra.is_empty() && ra == rb;
        ok &= same;
        notes.push(format!("{name}: {} files {}", ra.len(), if same { "identical" } else { "DIFFER" }));
    }
    (ok, notes.join("; "))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, bool); 9] = [
        ("1 streaming LA equals kernel-matrix oracle", c1_streaming_matches_oracle, true),
        ("2 gradients match finite differences", c2_gradients, true),
        ("3 hybrid branch algebra", c3_branch_algebra, true),
        ("4 SSD schedule semantics", c4_schedules, true),
        ("5 LoRA and transfer contracts", c5_lora, true),
        ("6 recovered-performance arithmetic", c6_recovered, true),
        ("7 scaling benchmark", c7_scaling, true),
        ("8 collapse signature (soft)", c8_collapse, false),
        ("9 recipe reruns are byte-identical", c9_determinism, true),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut hard_failures = 0;
    for (name, f, hard) in criteria {
        if filter.as_ref().is_some_and(|p| !name.contains(p.as_str())) {
            continue;
        }
        let (pass, detail) = f();
        println!("{} criterion {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass && hard {
            hard_failures += 1;
        }
    }
    if hard_failures > 0 {
        eprintln!("{hard_failures} hard criteria failed");
        std::process::exit(1);
    }
}
