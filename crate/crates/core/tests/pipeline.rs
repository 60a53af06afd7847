//! Training, inference, checkpoints and benchmarking on small episodes.

use std::sync::OnceLock;

use spotlighter::features::{generate_base_novel, Episode, SynthSpec};
use spotlighter::pipeline::{
    bench_throughput, decode_state, encode_state, evaluate, evaluate_split, inference_flops, load_state, predict,
    predict_all, save_state, train, BenchOptions, ClassSet, PredictOptions, RunConfig, TrainedState,
    CHECKPOINT_VERSION,
};
use spotlighter::numerics::TransformerBlockParams;
use spotlighter::representative::{FusionParams, TierMode};
use spotlighter::Error;

fn small_config() -> RunConfig {
    RunConfig { width: 16, heads: 2, n_proto: 3, k_act: 8, epochs: 6, ..RunConfig::default() }
}

fn small_spec() -> SynthSpec {
    SynthSpec { n_classes: 4, n_tok: 16, d: 16, signal_tokens: 3, ..SynthSpec::default() }
}

fn episode() -> &'static Episode {
    static EP: OnceLock<Episode> = OnceLock::new();
    EP.get_or_init(|| generate_base_novel(&small_spec(), 6, 10).unwrap())
}

fn trained() -> &'static TrainedState {
    static ST: OnceLock<TrainedState> = OnceLock::new();
    ST.get_or_init(|| train(&small_config(), &episode().base_train).unwrap())
}

#[test]
fn zero_epochs_leaves_the_initial_state() {
    let cfg = RunConfig { epochs: 0, ..small_config() };
    let state = train(&cfg, &episode().base_train).unwrap();
    assert!(state.history.is_empty());
    let init = TrainedState::init(&cfg, &episode().base_train.text_embeddings).unwrap();
    assert_eq!(state.params, init.params);
    assert_eq!(state.theta, init.theta);
}

#[test]
fn training_records_every_epoch_and_is_deterministic() {
    let state = trained();
    assert_eq!(state.history.len(), 6);
    assert!(state.history.iter().all(|r| r.loss.total.is_finite()));
    let again = train(&small_config(), &episode().base_train).unwrap();
    assert_eq!(encode_state(&again).unwrap(), encode_state(state).unwrap());
}

#[test]
fn training_rejects_unlabelled_or_empty_data() {
    let mut data = episode().base_train.clone();
    data.labels = None;
    assert!(matches!(train(&small_config(), &data), Err(Error::MissingLabels)));
    data.items.clear();
    assert!(matches!(train(&small_config(), &data), Err(Error::EmptySplit)));
    let wide = RunConfig { width: 32, ..small_config() };
    assert!(matches!(train(&wide, &episode().base_train), Err(Error::DimMismatch(_))));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let state = trained();
    let bytes = encode_state(state).unwrap();
    let back = decode_state(&bytes).unwrap();
    assert_eq!(&back, state);
    assert_eq!(encode_state(&back).unwrap(), bytes);
}

#[test]
fn checkpoint_corruption_is_detected() {
    let bytes = encode_state(trained()).unwrap();
    assert!(matches!(decode_state(&bytes[..bytes.len() - 3]), Err(Error::TruncatedFile)));
    assert!(matches!(decode_state(&bytes[..5]), Err(Error::TruncatedFile)));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_state(&bad), Err(Error::BadMagic)));
    let mut bad = bytes.clone();
    bad[8] = CHECKPOINT_VERSION + 1;
    assert!(matches!(decode_state(&bad), Err(Error::VersionMismatch { .. })));
    let mut bad = bytes;
    bad.extend_from_slice(&[0; 4]);
    assert!(matches!(decode_state(&bad), Err(Error::HeaderMismatch(_))));
}

#[test]
fn loaded_checkpoint_predicts_like_the_original() {
    let state = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_state(state, &path).unwrap();
    let loaded = load_state(&path).unwrap();
    let test = &episode().base_test;
    let classes = ClassSet::new(&test.text_embeddings, &state.bank).unwrap();
    let opts = PredictOptions::from_state(state);
    for tokens in test.items.iter().take(20) {
        let a = predict(state, tokens, classes, opts).unwrap();
        let b = predict(&loaded, tokens, ClassSet::new(&test.text_embeddings, &loaded.bank).unwrap(), opts).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn evaluation_tallies_predictions() {
    let state = trained();
    let ep = episode();
    let m = evaluate(state, &ep.base_test, &ep.novel_test).unwrap();
    let preds = predict_all(state, &ep.base_test, &state.bank, PredictOptions::from_state(state)).unwrap();
    let labels = ep.base_test.labels.as_ref().unwrap();
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    assert_eq!(m.base.correct, hits);
    assert_eq!(m.base.total, labels.len());
    assert!((m.base.accuracy - 100.0 * hits as f64 / labels.len() as f64).abs() < 1e-12);
    let hm = 2.0 * m.base.accuracy * m.novel.accuracy / (m.base.accuracy + m.novel.accuracy);
    assert!((m.hm - hm).abs() < 1e-9);
}

#[test]
fn evaluation_errors() {
    let state = trained();
    let mut data = episode().base_test.clone();
    let opts = PredictOptions::from_state(state);
    let too_many = PredictOptions { k: 17, ..opts };
    assert!(matches!(evaluate_split(state, &data, &state.bank, too_many), Err(Error::KOutOfRange { .. })));
    data.labels = None;
    assert!(matches!(evaluate_split(state, &data, &state.bank, opts), Err(Error::MissingLabels)));
    data.items.clear();
    assert!(matches!(evaluate_split(state, &data, &state.bank, opts), Err(Error::EmptySplit)));
}

#[test]
fn every_tier_mode_predicts() {
    let state = trained();
    let test = &episode().base_test;
    for tier_mode in TierMode::ALL {
        let opts = PredictOptions { tier_mode, ..PredictOptions::from_state(state) };
        let m = evaluate_split(state, test, &state.bank, opts).unwrap();
        assert_eq!(m.total, test.len());
    }
}

#[test]
fn clean_items_are_classified_correctly() {
    let spec = SynthSpec { noise_sigma: 0.0, ..small_spec() };
    let ep = generate_base_novel(&spec, 1, 1).unwrap();
    let state = trained();
    let classes = ClassSet::new(&ep.base_test.text_embeddings, &state.bank).unwrap();
    let opts = PredictOptions::from_state(state);
    let item = &ep.base_test.items[3];
    assert_eq!(ep.base_test.labels.as_ref().unwrap()[3], 3);
    assert_eq!(predict(state, item, classes, opts).unwrap().class, 3);
}

#[test]
fn default_parameter_count_matches_formula_and_tensors() {
    let cfg = RunConfig::default();
    let text = spotlighter::Matrix::from_fn(3, cfg.width, |i, j| ((i + 1) * (j + 2)) as f64);
    let state = TrainedState::init(&cfg, &text).unwrap();
    let enumerated: usize = state.params.tensors().iter().map(|(_, m)| m.len()).sum();
    let formula = FusionParams::param_count_formula(cfg.width, cfg.ffn_width(), cfg.shared_irm);
    assert_eq!(state.trainable_param_count(), 75_456);
    assert_eq!(enumerated, 75_456);
    assert_eq!(formula, 75_456);
    let block = TransformerBlockParams::param_count_formula(64, 128);
    assert_eq!(2 * block + 2 * 64 * 64 + 64, 75_456);
}

#[test]
fn flops_grow_with_k() {
    let state = trained();
    for mode in TierMode::ALL {
        let f: Vec<u64> = (1..=16).map(|k| inference_flops(state, 16, 4, k, mode)).collect();
        assert!(f.windows(2).all(|w| w[0] < w[1]), "{mode:?}");
    }
    assert!(inference_flops(state, 16, 4, 8, TierMode::Lev1) < inference_flops(state, 16, 4, 8, TierMode::Both));
}

#[test]
fn bench_requires_a_real_workload() {
    let state = trained();
    let small = &episode().base_test;
    assert!(matches!(
        bench_throughput(state, small, &BenchOptions::default()),
        Err(Error::WorkloadTooSmall(40))
    ));
    let big = generate_base_novel(&small_spec(), 1, 25).unwrap().base_test;
    let opts = BenchOptions { k_values: vec![4, 8], reps: 5, warmup: 0 };
    let report = bench_throughput(state, &big, &opts).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.n_items, 100);
    assert!(report.rows.iter().all(|r| r.items_per_sec > 0.0 && r.accuracy.is_some()));
    assert!(report.rows[0].flops_per_item < report.rows[1].flops_per_item);
    assert_eq!(report.full_token.k, 16);
}

