use mixpro::augmentation::{
    augment_dataset, augment_templates, AugMode, AugmentedPair, AugmentedSample, RuleAugmenter,
};
use mixpro::harness::ablation::identity_samples;
use mixpro::harness::{gen_synthetic_task, SyntheticTaskSpec};
use mixpro::mixup::{LambdaDraw, MixupConfig};
use mixpro::model::{ModelConfig, ModelParams};
use mixpro::prompting::{Example, Template, TokenId, Vocab};
use mixpro::training::{train, LambdaMode, StepSample, TrainOutcome, Trainer, TrainingConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model(vocab: &Vocab) -> ModelConfig {
    ModelConfig { hidden: 16, layers: 1, heads: 2, ffn: 32, max_len: 32, ..ModelConfig::desk(vocab.len(), 2) }
}

fn desk_training(max_steps: usize) -> TrainingConfig {
    TrainingConfig { learning_rate: 3e-3, max_steps, seed: 5, ..TrainingConfig::default() }
}

fn toy() -> (Vocab, Vec<Example>, Vec<Template>) {
    let vocab = Vocab::with_words("good bad movie it was .".split(' ')).unwrap();
    let ex = |w: &str, y| Example::new(vec![vocab.id("movie"), vocab.id(w)], y);
    let data = vec![ex("good", 1), ex("bad", 0)];
    let t = vec![Template::parse(0, "{x} it was [MASK] .").unwrap()];
    (vocab, data, t)
}

fn samples(data: &[Example]) -> Vec<StepSample> {
    data.iter().enumerate().map(|(i, e)| StepSample { index: i, pair: AugmentedPair::identity(e.clone()) }).collect()
}

fn ones(n: usize) -> Vec<LambdaDraw> {
    vec![LambdaDraw::fixed(1.0, 1); n]
}

#[test]
fn one_step_on_a_separable_pair_lowers_the_loss() {
    let (vocab, data, t) = toy();
    let params = ModelParams::init(&small_model(&vocab), 1).unwrap();
    let config = TrainingConfig { learning_rate: 1e-2, ..TrainingConfig::default() };
    let mut trainer = Trainer::new(params, config, MixupConfig::disabled(0.5), vocab).unwrap();
    let batch = samples(&data);
    let before = trainer.batch_gradient(&batch, &t[0], &t[0], &ones(2)).unwrap().1.loss;
    trainer.train_step_with(&batch, &t[0], &t[0], &ones(2)).unwrap();
    let after = trainer.batch_gradient(&batch, &t[0], &t[0], &ones(2)).unwrap().1.loss;
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn first_adam_step_moves_by_learning_rate_times_sign() {
    let (vocab, data, t) = toy();
    let params = ModelParams::init(&small_model(&vocab), 2).unwrap();
    let lr = 1e-3;
    let config =
        TrainingConfig { learning_rate: lr, weight_decay: 0.0, max_grad_norm: 1e9, ..TrainingConfig::default() };
    let mut trainer = Trainer::new(params.clone(), config, MixupConfig::disabled(0.5), vocab).unwrap();
    let batch = samples(&data);
    let (grads, _) = trainer.batch_gradient(&batch, &t[0], &t[0], &ones(2)).unwrap();
    trainer.train_step_with(&batch, &t[0], &t[0], &ones(2)).unwrap();
    let mut checked = 0;
    for ((old, new), g) in params.tensors().iter().zip(trainer.params().tensors()).zip(&grads) {
        for ((a, b), gi) in old.data().iter().zip(new.data()).zip(g.data()) {
            if gi.abs() > 1e-4 {
                assert!(((b - a) + lr * gi.signum()).abs() < lr * 1e-3);
                checked += 1;
            } else if *gi == 0.0 {
                assert_eq!(a, b);
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn accumulating_micro_batches_equals_one_big_batch() {
    let task = gen_synthetic_task(&SyntheticTaskSpec::default(), 1).unwrap();
    let params = ModelParams::init(&small_model(&task.vocab), 3).unwrap();
    let batch: Vec<StepSample> = task.train[..8]
        .iter()
        .enumerate()
        .map(|(i, e)| StepSample { index: i, pair: AugmentedPair::identity(e.clone()) })
        .collect();
    let lambdas: Vec<LambdaDraw> = (0..8).map(|i| LambdaDraw::fixed(0.1 * i as f64 + 0.05, 1)).collect();
    let grad = |batch_size, grad_accumulation_steps| {
        let config = TrainingConfig { batch_size, grad_accumulation_steps, ..TrainingConfig::default() };
        let trainer = Trainer::new(params.clone(), config, MixupConfig::default(), task.vocab.clone()).unwrap();
        trainer.batch_gradient(&batch, &task.templates[0], &task.templates[1], &lambdas).unwrap().0
    };
    let (a, b) = (grad(2, 4), grad(8, 1));
    for (x, y) in a.iter().zip(&b) {
        assert!(x.max_abs_diff(y).unwrap() <= 1e-8);
    }
}

#[test]
fn weight_decay_is_decoupled_and_zero_decay_is_plain_adam() {
    let (vocab, data, t) = toy();
    let params = ModelParams::init(&small_model(&vocab), 4).unwrap();
    let batch = samples(&data);
    let lr = 1e-2;
    let run = |wd: f64, steps: usize| {
        let config = TrainingConfig { learning_rate: lr, weight_decay: wd, ..TrainingConfig::default() };
        let mut tr = Trainer::new(params.clone(), config, MixupConfig::disabled(0.5), vocab.clone()).unwrap();
        let mut grads = Vec::new();
        for _ in 0..steps {
            let (g, _) = tr.batch_gradient(&batch, &t[0], &t[0], &ones(2)).unwrap();
            grads.push(mixpro::optim::clip_global_norm(&g, 1.0));
            tr.train_step_with(&batch, &t[0], &t[0], &ones(2)).unwrap();
        }
        (tr.into_params(), grads)
    };

    // Textbook Adam, written out independently.
    let (adam_params, grads) = run(0.0, 3);
    let mut expect: Vec<Vec<f64>> = params.tensors().iter().map(|p| p.data().to_vec()).collect();
    let mut m: Vec<Vec<f64>> = expect.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut v = m.clone();
    for (k, g) in grads.iter().enumerate() {
        let t = (k + 1) as i32;
        for (i, gi) in g.iter().enumerate() {
            for j in 0..gi.numel() {
                let gj = gi.data()[j];
                m[i][j] = 0.9 * m[i][j] + 0.1 * gj;
                v[i][j] = 0.999 * v[i][j] + 0.001 * gj * gj;
                let mh = m[i][j] / (1.0 - 0.9f64.powi(t));
                let vh = v[i][j] / (1.0 - 0.999f64.powi(t));
                expect[i][j] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
    }
    for (got, want) in adam_params.tensors().iter().zip(&expect) {
        for (a, b) in got.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    // One decayed step: the decay term is lr·wd·p, independent of the gradient.
    let wd = 0.5;
    let (decayed, _) = run(wd, 1);
    let (undecayed, _) = run(0.0, 1);
    for ((d, u), p0) in decayed.tensors().iter().zip(undecayed.tensors()).zip(params.tensors()) {
        for ((a, b), w) in d.data().iter().zip(u.data()).zip(p0.data()) {
            assert!((a - (b - lr * wd * w)).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_steps_leave_parameters_untouched() {
    let task = gen_synthetic_task(&SyntheticTaskSpec::default(), 0).unwrap();
    let params = ModelParams::init(&small_model(&task.vocab), 6).unwrap();
    let out = train(
        &task.train,
        &identity_samples(&task.train),
        &task.templates,
        &task.templates,
        params.clone(),
        &MixupConfig::default(),
        &desk_training(0),
        &task.vocab,
    )
    .unwrap();
    assert_eq!(out.params, params);
    assert!(out.history.is_empty());
}

#[test]
fn misaligned_augmentations_are_rejected() {
    let task = gen_synthetic_task(&SyntheticTaskSpec::default(), 0).unwrap();
    let params = ModelParams::init(&small_model(&task.vocab), 6).unwrap();
    let mut aug = identity_samples(&task.train);
    aug.swap(0, 1);
    let run = |aug: &[AugmentedSample]| {
        train(
            &task.train,
            aug,
            &task.templates,
            &task.templates,
            params.clone(),
            &MixupConfig::default(),
            &desk_training(1),
            &task.vocab,
        )
    };
    assert!(run(&aug).is_err());
    assert!(run(&aug[..5]).is_err());
}

fn full_run(seed: u64, steps: usize, mixup: &MixupConfig) -> TrainOutcome {
    let task = gen_synthetic_task(&SyntheticTaskSpec::default(), 0).unwrap();
    let augmenter = RuleAugmenter::new(task.rules.clone(), task.vocab.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aug = augment_dataset(&task.train, &augmenter, &mut rng).unwrap();
    let aug_t = augment_templates(&task.templates, &augmenter, &mut rng).unwrap();
    let params = ModelParams::init(&small_model(&task.vocab), seed).unwrap();
    let config = TrainingConfig { seed, ..desk_training(steps) };
    train(&task.train, &aug, &task.templates, &aug_t, params, mixup, &config, &task.vocab).unwrap()
}

#[test]
fn same_seed_gives_bitwise_identical_weights() {
    let a = full_run(3, 6, &MixupConfig::default());
    let b = full_run(3, 6, &MixupConfig::default());
    assert_eq!(a.history, b.history);
    for (x, y) in a.params.tensors().iter().zip(b.params.tensors()) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    assert_ne!(a.params, full_run(4, 6, &MixupConfig::default()).params);
}

#[test]
fn one_template_per_epoch_and_training_loss_falls() {
    let out = full_run(1, 250, &MixupConfig::default());
    assert_eq!(out.history.len(), 250);
    for r in &out.history {
        assert_eq!(r.template_index, out.schedule.chosen[r.epoch]);
    }
    // 32 samples at 16 per step: two steps per epoch.
    assert_eq!(out.history.last().unwrap().epoch, 124);
    let first: f64 = out.history[..10].iter().map(|r| r.loss).sum();
    let last: f64 = out.history[240..].iter().map(|r| r.loss).sum();
    assert!(last < first, "{last} >= {first}");
}

#[test]
fn without_template_level_a_single_template_is_used() {
    let mixup = MixupConfig { enable_template: false, ..MixupConfig::default() };
    let out = full_run(2, 20, &mixup);
    assert!(out.schedule.chosen.iter().all(|&i| i == 0));
    assert!(out.history.iter().all(|r| r.template_index == 0));
}

#[test]
fn one_lambda_feeds_all_three_mixing_points() {
    let task = gen_synthetic_task(&SyntheticTaskSpec::default(), 0).unwrap();
    let params = ModelParams::init(&small_model(&task.vocab), 1).unwrap();
    let batch: Vec<StepSample> = task.train[..6]
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let flipped = Example::new(e.tokens.clone(), 1 - e.label);
            StepSample { index: i, pair: AugmentedPair::new(e.clone(), flipped, AugMode::Flipping).unwrap() }
        })
        .collect();
    for mode in [LambdaMode::PerSample, LambdaMode::PerBatch] {
        let config = TrainingConfig { lambda_mode: mode, ..desk_training(1) };
        let mut tr = Trainer::new(params.clone(), config, MixupConfig::default(), task.vocab.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = tr.train_step(&batch, &task.templates[0], &task.templates[0], &mut rng).unwrap();
        for u in &report.lambdas {
            let t = u.token.unwrap();
            assert_eq!(t.value.to_bits(), u.sentence.unwrap().value.to_bits());
            assert_eq!(t.value.to_bits(), u.label.unwrap().value.to_bits());
            assert_eq!(t.step, 1);
        }
        let values: Vec<f64> = report.lambdas.iter().map(|u| u.token.unwrap().value).collect();
        let distinct_in_first_micro_batch = values[0] != values[1];
        assert_eq!(distinct_in_first_micro_batch, mode == LambdaMode::PerSample);
    }
}

#[test]
fn overlong_prompts_name_the_sample() {
    let (vocab, _, t) = toy();
    let config = ModelConfig { max_len: 6, ..small_model(&vocab) };
    let params = ModelParams::init(&config, 0).unwrap();
    let mut tr = Trainer::new(params, TrainingConfig::default(), MixupConfig::default(), vocab).unwrap();
    let long = Example::new(vec![TokenId(3); 4], 1);
    let batch = vec![StepSample { index: 9, pair: AugmentedPair::identity(long) }];
    let err = tr.train_step_with(&batch, &t[0], &t[0], &ones(1)).unwrap_err();
    assert!(err.to_string().contains("sample 9"));
}
