use mixpro::harness::ablation::{run_cell, ExperimentConfig, Variant};
use mixpro::harness::eval::{evaluate, inference_cost_check};
use mixpro::harness::{gen_synthetic_task, run_ablation, SyntheticTaskSpec};
use mixpro::model::{ModelConfig, ModelParams};

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        hidden: 8,
        layers: 1,
        heads: 2,
        ffn: 16,
        max_steps: 4,
        dev_size: 16,
        ..ExperimentConfig::default()
    }
}

#[test]
fn labels_agree_with_a_recount_of_the_lexicon() {
    let spec = SyntheticTaskSpec::default();
    let task = gen_synthetic_task(&spec, 12).unwrap();
    for ex in task.train.iter().chain(&task.dev) {
        let (mut pos, mut neg) = (0, 0);
        for &t in &ex.tokens {
            let w = task.vocab.token(t).unwrap().to_string();
            pos += spec.positive.iter().filter(|c| c.contains(&w)).count();
            neg += spec.negative.iter().filter(|c| c.contains(&w)).count();
        }
        assert_ne!(pos, neg);
        assert_eq!(ex.label, usize::from(pos > neg));
    }
}

#[test]
fn evaluation_makes_one_forward_pass_per_example() {
    let task = gen_synthetic_task(&SyntheticTaskSpec::default(), 0).unwrap();
    let params = ModelParams::init(&ModelConfig::desk(task.vocab.len(), 2), 0).unwrap();
    let m = evaluate(&params, &task.dev, &task.templates[1], &task.verbalizer, &task.vocab).unwrap();
    assert_eq!(m.forward_passes, task.dev.len());
    assert!((0.0..=1.0).contains(&m.accuracy));
    assert!(evaluate(&params, &[], &task.templates[0], &task.verbalizer, &task.vocab).is_err());
}

#[test]
fn ensemble_cost_scales_with_model_count() {
    let spec = SyntheticTaskSpec { num_templates: 4, dev_size: 10, ..SyntheticTaskSpec::default() };
    let task = gen_synthetic_task(&spec, 0).unwrap();
    let config = ModelConfig { hidden: 8, layers: 1, heads: 2, ..ModelConfig::desk(task.vocab.len(), 2) };
    let models: Vec<ModelParams> = (0..4).map(|s| ModelParams::init(&config, s).unwrap()).collect();
    for n in [1, 4] {
        let cost =
            inference_cost_check(&models[0], &models[..n], &task.templates[..n], &task.dev, &task.vocab).unwrap();
        assert_eq!(cost.single_passes, 10);
        assert_eq!(cost.ensemble_passes, 10 * n);
        assert_eq!(cost.ratio, 1.0 / n as f64);
    }
}

#[test]
fn single_variant_single_seed_gives_one_row() {
    let report = run_ablation(&tiny_config(), &[Variant::NoAugPet], &[3], 1).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.aggregates.len(), 1);
    assert_eq!(report.aggregates[0].std_accuracy, None);
    assert_eq!(report.to_csv().lines().count(), 3);
}

#[test]
fn grid_rows_and_parallel_runs_match_sequential_ones() {
    let config = tiny_config();
    let seeds = [1, 2, 3, 4, 5];
    let variants = [Variant::Full, Variant::NoAugPet];
    let seq = run_ablation(&config, &variants, &seeds, 1).unwrap();
    let par = run_ablation(&config, &variants, &seeds, 3).unwrap();
    assert_eq!(seq.to_csv(), par.to_csv());
    let csv = seq.to_csv();
    assert_eq!(csv.lines().filter(|l| l.starts_with("cell,")).count(), 10);
    assert_eq!(csv.lines().filter(|l| l.starts_with("mean,")).count(), 2);
    assert_eq!(seq.plot_data().lines().count(), 3);
}

#[test]
fn cells_are_reproducible_and_ablations_behave_as_named() {
    let config = tiny_config();
    let task = config.task().unwrap();
    let a = run_cell(&config, &task, Variant::Full, 9).unwrap();
    let b = run_cell(&config, &task, Variant::Full, 9).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let no_tmpl = run_cell(&config, &task, Variant::WithoutTemplate, 9).unwrap();
    assert_eq!(no_tmpl.template_counts.iter().filter(|&&c| c > 0).count(), 1);
    assert_eq!(a.forward_passes, task.dev.len() * task.templates.len());
}

#[test]
fn unknown_variants_are_errors() {
    assert!(mixpro::harness::ablation::parse_variants("full,w/o-nothing").is_err());
}
