use bd3lm::config::ExperimentConfig;
use bd3lm::data::{MarkovSource, TokenSequence};
use bd3lm::denoiser::{Bd3Model, BlockDenoiser};
use bd3lm::objectives::{eval_nelbo_linear, exact_nelbo_linear, MarkovOracle};
use bd3lm::sampling::{generate, LengthMode, SamplerConfig, StopReason};
use bd3lm::training::{load_training_checkpoint, train_run, TrainRun};
use bd3lm::SplitRng;

const CONFIG: &str = r#"
seed = 1
[model]
layers = 1
heads = 2
d_model = 8
d_ff = 16
max_len = 8
block_size = 2
[data]
kind = "markov"
symbols = 3
train_sequences = 32
val_sequences = 8
[train]
steps = 30
batch_size = 4
eval_interval = 15
eval_draws = 2
"#;

#[test]
fn config_to_checkpoint_to_samples() {
    let cfg = ExperimentConfig::from_toml(CONFIG).unwrap();
    let data = cfg.prepare_data(std::path::Path::new(".")).unwrap();
    assert_eq!(data.vocab_size, 4);
    let model = Bd3Model::new(cfg.model.denoiser(data.vocab_size), &mut SplitRng::new(cfg.seed)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = TrainRun {
        config: &cfg.train,
        train: &data.train,
        val: &data.val,
        out_dir: Some(dir.path()),
    };
    let outcome = train_run(&run, model, None).unwrap();
    assert_eq!(outcome.state.step, 30);
    assert!(outcome.metrics.iter().filter(|m| m.eval_nelbo.is_some()).count() >= 2);

    let (loaded, _, state) = load_training_checkpoint(&outcome.last_checkpoint.unwrap(), cfg.train.optim).unwrap();
    assert_eq!(state.step, 30);
    assert_eq!(loaded.params.flatten_values(), outcome.model.params.flatten_values());

    let eval = eval_nelbo_linear(&loaded, &data.val, 2, 4, &mut SplitRng::new(0)).unwrap();
    assert!(eval.nats_per_token.is_finite() && eval.std_error > 0.0);

    let sliding = generate(
        &loaded,
        &[],
        &SamplerConfig {
            max_blocks: 8,
            ..SamplerConfig::default()
        },
    )
    .unwrap();
    assert_eq!(sliding.generated().len(), 16);
    let fixed = SamplerConfig {
        max_blocks: 8,
        length_mode: LengthMode::Fixed,
        ..SamplerConfig::default()
    };
    let g = generate(&loaded, &[], &fixed).unwrap();
    assert_eq!((g.stats.length, g.stats.stop_reason), (8, StopReason::ContextLimit));
}

#[test]
fn oracle_bound_is_exact_at_every_block_size() {
    let mut rng = SplitRng::new(4);
    let source = MarkovSource::random(1, 4, 1.5, &mut rng).unwrap();
    for _ in 0..5 {
        let x = source.sample(8, &mut rng);
        let nll = source.exact_nll(&x).unwrap();
        for bs in [1, 2, 4, 8] {
            let oracle = MarkovOracle::new(source.clone(), bs).unwrap();
            let v = exact_nelbo_linear(&TokenSequence::new(x.clone(), bs).unwrap(), &oracle)
                .unwrap()
                .total;
            assert!((v - nll).abs() < 1e-9, "L'={bs}: {v} vs {nll}");
        }
    }
}

#[test]
fn oracle_samples_follow_the_source() {
    let mut rng = SplitRng::new(5);
    let source = MarkovSource::random(1, 3, 2.0, &mut rng).unwrap();
    let oracle = MarkovOracle::new(source.clone(), 4).unwrap();
    assert_eq!(oracle.max_context(), None);
    let cfg = SamplerConfig {
        max_blocks: 250,
        seed: 2,
        ..SamplerConfig::default()
    };
    let g = generate(&oracle, &[], &cfg).unwrap();
    let x = g.generated();
    // empirical transition frequencies against the source
    let mut counts = [0.0; 9];
    for w in x.windows(2) {
        counts[w[0] * 3 + w[1]] += 1.0;
    }
    for a in 0..3 {
        let row: f64 = counts[a * 3..a * 3 + 3].iter().sum();
        for b in 0..3 {
            let p = source.transitions()[a * 3 + b];
            let sd = (p * (1.0 - p) / row).sqrt();
            assert!((counts[a * 3 + b] / row - p).abs() < 5.0 * sd + 1e-9, "{a}->{b}");
        }
    }
}
