use hypsel_core::acoustic_model::model_bytes;
use hypsel_core::corpus::GenerationConfig;
use hypsel_core::experiment::{initial_model, prepare, ArmKind, ExperimentConfig, NetworkConfig};
use hypsel_core::feedback::{Selection, SelectionSource};
use hypsel_core::report::{emit_report, selection_error_sweep, SweepSpec};
use hypsel_core::trainer::{evaluate_model, run_campaign, simulated_selector, OracleSelector, PairContext, Selector};
use hypsel_core::Result;

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        corpus: GenerationConfig {
            vocab_size: 6,
            num_labeled: 60,
            num_batches: 2,
            batch_size: 30,
            num_eval: 30,
            ..GenerationConfig::default()
        },
        network: NetworkConfig { splice: 1, hidden_layers: vec![16] },
        ..ExperimentConfig::default()
    };
    c.baseline.max_epochs = 4;
    c.stage.max_iterations_per_epoch = 2;
    c
}

/// Always answers that Candidate 1 is better.
struct FirstAlways;

impl Selector for FirstAlways {
    fn select(&mut self, _stage: usize, pairs: &[PairContext<'_>]) -> Result<Vec<Selection>> {
        Ok(pairs
            .iter()
            .map(|_| Selection { r: 1, source: SelectionSource::Oracle, candidate_wers: None })
            .collect())
    }
}

#[test]
fn rl_with_zero_alpha_and_first_choice_equals_unsupervised_adaptation() {
    let mut config = tiny();
    config.rl.alpha = 0.0;
    config.rl.skip_identical_candidates = false;
    let prepared = prepare(&config).unwrap();
    let initial = initial_model::<f64>(&config, &prepared).unwrap().model;
    let rl = run_campaign(&initial, &prepared.data(), &config.arm(ArmKind::Rl), &mut FirstAlways).unwrap();
    let unsup = run_campaign(&initial, &prepared.data(), &config.arm(ArmKind::Unsup), &mut FirstAlways).unwrap();
    for (a, b) in rl.models.iter().zip(&unsup.models) {
        assert_eq!(model_bytes(a.as_ref()), model_bytes(b.as_ref()));
    }
}

#[test]
fn baseline_training_is_deterministic() {
    let config = tiny();
    let prepared = prepare(&config).unwrap();
    let a = initial_model::<f64>(&config, &prepared).unwrap();
    let b = initial_model::<f64>(&config, &prepared).unwrap();
    assert_eq!(model_bytes(&a.model), model_bytes(&b.model));
    assert_eq!(a.epochs, b.epochs);
}

#[test]
fn noiseless_corpus_is_learned_almost_perfectly() {
    let mut config = tiny();
    config.corpus.emission_noise_sigma = 0.0;
    config.corpus.batch_shift_magnitude = 0.0;
    config.corpus.num_labeled = 150;
    config.baseline.max_epochs = 25;
    let prepared = prepare(&config).unwrap();
    let model = initial_model::<f64>(&config, &prepared).unwrap().model;
    let wer = evaluate_model(&model, &prepared.split.eval_set, &prepared.graph).unwrap();
    assert!(wer.wer <= 0.05, "eval WER {}", wer.wer);
}

#[test]
fn campaign_without_batches_reports_only_the_initial_model() {
    let mut config = tiny();
    config.corpus.num_batches = 0;
    let prepared = prepare(&config).unwrap();
    let initial = initial_model::<f64>(&config, &prepared).unwrap().model;
    let arm = config.arm(ArmKind::Rl);
    let out = run_campaign(&initial, &prepared.data(), &arm, &mut OracleSelector).unwrap();
    assert_eq!(out.models.len(), 1);
    assert_eq!(out.reports.len(), 1);
    assert!(out.reports[0].batch_wer.is_none());
    assert_eq!(
        out.reports[0].eval_wer,
        evaluate_model(&initial, &prepared.split.eval_set, &prepared.graph).unwrap()
    );
}

#[test]
fn oracle_campaign_selects_the_per_pair_minimum() {
    let config = tiny();
    let prepared = prepare(&config).unwrap();
    let initial = initial_model::<f64>(&config, &prepared).unwrap().model;
    let arm = config.arm(ArmKind::Rl);
    let out = run_campaign(&initial, &prepared.data(), &arm, simulated_selector(&arm).as_mut()).unwrap();
    assert_eq!(out.models.len(), 3);
    assert_eq!(out.reports.iter().map(|r| r.stage).collect::<Vec<_>>(), [0, 1, 2]);
    for records in &out.pairs {
        assert_eq!(records.len(), config.corpus.batch_size);
        for r in records {
            assert_eq!(r.selected_wer().wer, r.candidate1_wer.wer.min(r.candidate2_wer.wer));
        }
    }
    let table = selection_error_sweep(&out.pairs[0], &SweepSpec::default()).unwrap();
    let n = out.pairs[0].len() as f64;
    let min = out.pairs[0].iter().map(|r| r.selected_wer().wer).sum::<f64>() / n;
    assert!((table.rows[0].mean_selected_wer - min).abs() < 1e-12);

    let dir = tempfile::tempdir().unwrap();
    emit_report(&out.reports, dir.path()).unwrap();
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert!(summary.starts_with("stage,arm,alpha,p,batch_wer,eval_wer,selected_wer"));
}

#[test]
fn invalid_stage_rates_are_rejected_before_training() {
    let mut config = tiny();
    config.stage.stage_learning_rates = vec![0.004];
    let err = prepare(&config).unwrap_err();
    assert_eq!(err.kind(), "config");
    assert!(err.to_string().contains("stage.stage_learning_rates"));
}
