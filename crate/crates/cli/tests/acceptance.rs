//! Acceptance checks. Each criterion prints one `PASS` or `FAIL` line; the
//! process exits non-zero if any fails.
//!
//! Reference values come from oracles written here, independent of the
//! engine: a quadrature Beta CDF, a direct cross-entropy formula, and plain
//! re-execution for determinism.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mixpro::autodiff::Tape;
use mixpro::gradcheck::{finite_difference_check, DEFAULT_STEP};
use mixpro::harness::ablation::{identity_samples, run_ablation, ExperimentConfig, RunReport, Variant};
use mixpro::harness::eval::inference_cost_check;
use mixpro::harness::{gen_synthetic_task, SyntheticTaskSpec};
use mixpro::mixup::{label_mixup, one_hot, sample_lambda, LambdaDraw, MixupConfig};
use mixpro::model::{ModelConfig, ModelParams, ParamVars};
use mixpro::prompting::{build_prompt, Prompt, Template, TokenId, Vocab};
use mixpro::tensor::Tensor;
use mixpro::training::{
    mixed_loss_on_tape, plain_loss_on_tape, select_epoch_templates, train, MixLevels, TemplateSchedule, TrainingConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("mixup boundary identities", boundary_identities),
        ("pipeline gradients vs finite differences", gradient_correctness),
        ("cross-entropy linearity in the mixed target", ce_linearity),
        ("Beta(alpha, alpha) sampler", beta_sampler),
        ("template scheduler uniformity", scheduler_uniformity),
        ("inference cost 1/n", inference_cost),
        ("directional comparison against PET and ablations", directional),
        ("seed variance: full <= no-aug-PET", variance),
        ("CLI reruns are byte-identical", cli_determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let out = run();
        let status = if out.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!out.pass);
        println!("{status}  {name}: {} ({:.1}s)", out.detail, start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn prompt_vocab() -> (Vocab, Vec<Template>) {
    let vocab = Vocab::with_words("a b c d e f g h it was review verdict : .".split(' ')).unwrap();
    let templates = vec![
        Template::parse(0, "{x} it was [MASK] .").unwrap(),
        Template::parse(1, "review : {x} verdict : [MASK]").unwrap(),
    ];
    (vocab, templates)
}

fn random_prompt(rng: &mut ChaCha8Rng, vocab: &Vocab, templates: &[Template], max_x: usize) -> Prompt {
    let n = rng.random_range(1..=max_x);
    let x: Vec<TokenId> = (0..n).map(|_| TokenId(rng.random_range(3..11))).collect();
    let t = &templates[rng.random_range(0..templates.len())];
    build_prompt(&x, t, rng.random_range(0..2), vocab).unwrap()
}

fn boundary_identities() -> Outcome {
    let (vocab, templates) = prompt_vocab();
    let params = ModelParams::init(&ModelConfig::desk(vocab.len(), 2), 17).unwrap();
    let levels = MixLevels { token: true, sentence: true };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let loss = |build: &dyn Fn(&mut Tape, &ParamVars) -> mixpro::Result<mixpro::autodiff::Var>| {
        let mut tape = Tape::new();
        let pv = params.constants(&mut tape);
        let v = build(&mut tape, &pv).unwrap();
        tape.value(v).item().unwrap()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p = random_prompt(&mut rng, &vocab, &templates, 12);
        let pa = random_prompt(&mut rng, &vocab, &templates, 12);
        for (lambda, reference) in [(1.0, &p), (0.0, &pa)] {
            let mixed = loss(&|t, pv| Ok(mixed_loss_on_tape(t, pv, &p, &pa, LambdaDraw::fixed(lambda, 0), levels)?.0));
            let plain = loss(&|t, pv| plain_loss_on_tape(t, pv, reference));
            worst = worst.max((mixed - plain).abs());
        }
    }
    check(worst <= 1e-12, format!("1000 pairs, max |loss(mixed) - loss(unmixed)| = {worst:e} (tol 1e-12)"))
}

fn gradient_correctness() -> Outcome {
    let (vocab, templates) = prompt_vocab();
    let config =
        ModelConfig { hidden: 8, layers: 1, heads: 2, ffn: 16, max_len: 12, ..ModelConfig::desk(vocab.len(), 2) };
    let params = ModelParams::init(&config, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for lambda in [0.23, 0.71] {
        let p = random_prompt(&mut rng, &vocab, &templates[..1], 6);
        let pa = random_prompt(&mut rng, &vocab, &templates[1..], 7);
        let err = finite_difference_check(
            |tape, vars| {
                let pv = ParamVars::from_vars(config.clone(), vars.to_vec())?;
                let levels = MixLevels { token: true, sentence: true };
                Ok(mixed_loss_on_tape(tape, &pv, &p, &pa, LambdaDraw::fixed(lambda, 0), levels)?.0)
            },
            params.tensors(),
            DEFAULT_STEP,
        )
        .unwrap();
        worst = worst.max(err);
    }
    check(
        worst < 1e-4,
        format!("{} parameters, d=8, L=1, S<=12, max relative error {worst:e} (tol 1e-4)", params.num_parameters()),
    )
}

fn ce_linearity() -> Outcome {
    let ce = |z: &[f64], y: &[f64]| -> f64 {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        y.iter().zip(z).map(|(t, v)| t * (lse - v)).sum()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c = rng.random_range(2..6);
        let z: Vec<f64> = (0..c).map(|_| rng.random_range(-10.0..10.0)).collect();
        let (a, b) = (rng.random_range(0..c), rng.random_range(0..c));
        let lambda = rng.random::<f64>();
        let (ya, yb) = (one_hot(a, c).unwrap(), one_hot(b, c).unwrap());
        let mut tape = Tape::new();
        let zv = tape.constant(Tensor::vector(z.clone()).unwrap());
        let l = tape.soft_cross_entropy(zv, &label_mixup(&ya, &yb, lambda).unwrap()).unwrap();
        let lhs = tape.value(l).item().unwrap();
        worst = worst.max((lhs - (lambda * ce(&z, &ya) + (1.0 - lambda) * ce(&z, &yb))).abs());
    }
    check(worst <= 1e-10, format!("100 draws, max deviation {worst:e} (tol 1e-10)"))
}

/// `P(λ < x)` for `λ ~ Beta(a, a)` by composite Simpson quadrature.
///
/// With `t = u^(1/a)` the density term `t^(a-1) dt` becomes `du / a`, which
/// removes the singularity at zero; symmetry gives the normaliser as twice
/// the mass below one half.
fn beta_cdf_symmetric(a: f64, x: f64) -> f64 {
    let g = |u: f64| (1.0 - u.powf(1.0 / a)).powf(a - 1.0);
    let simpson = |hi: f64| {
        let n = 20_000;
        let h = hi / n as f64;
        let mut s = g(0.0) + g(hi);
        for i in 1..n {
            s += g(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    simpson(x.powf(a)) / (2.0 * simpson(0.5f64.powf(a)))
}

fn beta_sampler() -> Outcome {
    // The oracle first reproduces two closed forms.
    let uniform = beta_cdf_symmetric(1.0, 0.1);
    let arcsine = beta_cdf_symmetric(0.5, 0.1);
    let arcsine_exact = 2.0 / std::f64::consts::PI * 0.1f64.sqrt().asin();
    if (uniform - 0.1).abs() > 1e-9 || (arcsine - arcsine_exact).abs() > 1e-6 {
        return check(false, format!("oracle self-check failed: {uniform} vs 0.1, {arcsine} vs {arcsine_exact}"));
    }
    let mut details = Vec::new();
    let mut pass = true;
    for (k, alpha) in [0.1, 0.5, 1.0].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
        let mut draws: Vec<f64> = (0..100_000).map(|_| sample_lambda(alpha, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        pass &= (mean - 0.5).abs() < 0.01;
        // Two-sample Kolmogorov distance between λ and 1 − λ.
        let mut mirrored: Vec<f64> = draws.iter().map(|v| 1.0 - v).collect();
        draws.sort_by(f64::total_cmp);
        mirrored.sort_by(f64::total_cmp);
        let (mut i, mut j, mut ks) = (0usize, 0usize, 0.0f64);
        let n = draws.len() as f64;
        while i < draws.len() && j < mirrored.len() {
            if draws[i] <= mirrored[j] {
                i += 1;
            } else {
                j += 1;
            }
            ks = ks.max((i as f64 - j as f64).abs() / n);
        }
        pass &= ks < 0.02;
        let mut line = format!("alpha={alpha}: mean {mean:.4}, KS {ks:.4}");
        if alpha == 0.1 {
            let tails = draws.iter().filter(|&&v| !(0.1..=0.9).contains(&v)).count() as f64 / n;
            let oracle = 2.0 * beta_cdf_symmetric(alpha, 0.1);
            pass &= (tails - oracle).abs() <= 0.03;
            line.push_str(&format!(", tail mass {tails:.4} vs oracle {oracle:.4}"));
        }
        details.push(line);
    }
    check(pass, details.join("; "))
}

fn scheduler_uniformity() -> Outcome {
    let templates: Vec<Template> = (0..3).map(|i| Template::parse(i, &format!("{{x}} t{i} [MASK]")).unwrap()).collect();
    let mut schedule = TemplateSchedule::new(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..3000 {
        select_epoch_templates(&templates, &templates, &mut schedule, &mut rng).unwrap();
    }
    let counts_ok = schedule.counts.iter().all(|c| (900..=1100).contains(c));

    // The training loop itself over 3000 epochs, one step per epoch.
    let spec = SyntheticTaskSpec { train_size: 2, dev_size: 2, ..SyntheticTaskSpec::default() };
    let task = gen_synthetic_task(&spec, 0).unwrap();
    let model =
        ModelConfig { hidden: 4, layers: 0, heads: 1, ffn: 4, max_len: 24, ..ModelConfig::desk(task.vocab.len(), 2) };
    let config = TrainingConfig {
        batch_size: 2,
        grad_accumulation_steps: 1,
        max_steps: 3000,
        learning_rate: 1e-3,
        ..TrainingConfig::default()
    };
    let out = train(
        &task.train,
        &identity_samples(&task.train),
        &task.templates,
        &task.templates,
        ModelParams::init(&model, 0).unwrap(),
        &MixupConfig::default(),
        &config,
        &task.vocab,
    )
    .unwrap();
    let mut per_epoch: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for r in &out.history {
        per_epoch.entry(r.epoch).or_default().push(r.template_index);
    }
    let one_each =
        per_epoch.len() == 3000 && per_epoch.iter().all(|(e, ts)| ts.iter().all(|&t| t == out.schedule.chosen[*e]));
    let loop_counts_ok = out.schedule.counts.iter().all(|c| (900..=1100).contains(c));
    check(
        counts_ok && one_each && loop_counts_ok,
        format!(
            "selector counts {:?}, training-loop counts {:?} (bounds [900, 1100]), one template per epoch: {one_each}",
            schedule.counts, out.schedule.counts
        ),
    )
}

fn inference_cost() -> Outcome {
    let mut pass = true;
    let mut details = Vec::new();
    for n in [3usize, 4, 6] {
        let spec = SyntheticTaskSpec { num_templates: n, dev_size: 32, ..SyntheticTaskSpec::default() };
        let task = gen_synthetic_task(&spec, 1).unwrap();
        let config = ModelConfig { hidden: 8, layers: 1, heads: 2, ffn: 16, ..ModelConfig::desk(task.vocab.len(), 2) };
        let models: Vec<ModelParams> = (0..n as u64).map(|s| ModelParams::init(&config, s).unwrap()).collect();
        let cost = inference_cost_check(&models[0], &models, &task.templates, &task.dev, &task.vocab).unwrap();
        let exact = cost.single_passes * n == cost.ensemble_passes && cost.ratio == 1.0 / n as f64;
        pass &= exact;
        details.push(format!("n={n}: {}/{} = {}", cost.single_passes, cost.ensemble_passes, cost.ratio));
    }
    check(pass, details.join("; "))
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const TASK_SEEDS: [u64; 3] = [0, 1, 2];
const GRID: [Variant; 5] =
    [Variant::Full, Variant::NoAugPet, Variant::WithoutToken, Variant::WithoutSentence, Variant::WithoutTemplate];

fn grid() -> &'static Vec<RunReport> {
    static REPORTS: std::sync::OnceLock<Vec<RunReport>> = std::sync::OnceLock::new();
    REPORTS.get_or_init(|| {
        let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
        TASK_SEEDS
            .iter()
            .map(|&task_seed| {
                let config = ExperimentConfig { task_seed, ..ExperimentConfig::default() };
                run_ablation(&config, &GRID, &SEEDS, jobs).unwrap()
            })
            .collect()
    })
}

fn mean_of(report: &RunReport, v: Variant) -> f64 {
    report.aggregate(v).unwrap().mean_accuracy
}

fn directional() -> Outcome {
    let reports = grid();
    let default = &reports[0];
    let full = mean_of(default, Variant::Full);
    let pet = mean_of(default, Variant::NoAugPet);
    let mut pass = full >= pet;
    let mut details = vec![format!("default task: full {full:.4} vs no-aug-PET {pet:.4}")];
    let avg = |v: Variant| reports.iter().map(|r| mean_of(r, v)).sum::<f64>() / reports.len() as f64;
    let full_avg = avg(Variant::Full);
    for v in [Variant::WithoutToken, Variant::WithoutSentence, Variant::WithoutTemplate] {
        let a = avg(v);
        pass &= full_avg >= a;
        details.push(format!("{v} {a:.4}"));
    }
    details.insert(1, format!("3-task average: full {full_avg:.4}"));
    check(pass, details.join("; "))
}

fn variance() -> Outcome {
    let default = &grid()[0];
    let full = default.aggregate(Variant::Full).unwrap().std_accuracy.unwrap();
    let pet = default.aggregate(Variant::NoAugPet).unwrap().std_accuracy.unwrap();
    check(full <= pet, format!("std over 5 seeds: full {full:.4} vs no-aug-PET {pet:.4}"))
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn cli_determinism() -> Outcome {
    let config = r#"{"hidden": 8, "layers": 1, "heads": 2, "ffn": 16, "max_steps": 6, "dev_size": 32}"#;
    let commands: [&[&str]; 6] = [
        &["synth", "--config", "c.json", "--seed", "4", "--out", "out/task"],
        &["augment", "--config", "c.json", "--input", "out/task", "--seed", "2", "--out", "out/aug"],
        &["train", "--config", "c.json", "--input", "out/task", "--seed", "2", "--out", "out/run"],
        &[
            "eval",
            "--config",
            "c.json",
            "--input",
            "out/task",
            "--checkpoint",
            "out/run/model.ckpt",
            "--out",
            "out/eval",
        ],
        &[
            "ablate",
            "--config",
            "c.json",
            "--variants",
            "full,w/o-sent",
            "--seeds",
            "1,2",
            "--jobs",
            "2",
            "--out",
            "out/ablate",
        ],
        &["report", "--config", "c.json", "--input", "out/ablate", "--out", "out/report"],
    ];
    let run_all = || -> Result<BTreeMap<String, Vec<u8>>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        std::fs::write(dir.path().join("c.json"), config).map_err(|e| e.to_string())?;
        for args in commands {
            let out = Command::new(env!("CARGO_BIN_EXE_mixpro"))
                .args(args)
                .current_dir(dir.path())
                .env_remove("MIXPRO_OUT")
                .output()
                .map_err(|e| e.to_string())?;
            if !out.status.success() {
                return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
            }
        }
        Ok(snapshot(&dir.path().join("out")))
    };
    match (run_all(), run_all()) {
        (Ok(a), Ok(b)) => {
            let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
            check(
                differing.is_empty() && a.len() == b.len() && a.len() >= 15,
                format!("{} output files across 6 commands, differing: {differing:?}", a.len()),
            )
        }
        (Err(e), _) | (_, Err(e)) => check(false, e),
    }
}
