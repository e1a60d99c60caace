use std::sync::Arc;

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ptss::data::{Level, MultivariateSeries, Split};
use ptss::exec::Execution;
use ptss::network::{ModelConfig, ModelParams};
use ptss::prompt::{boundaries_from_states, grow_prompt_set, BoundaryKind, BoundaryPrompt, LabelPrompt, Prompt, PromptKind, PromptSet};
use ptss::session::{predict_series, Session};
use ptss::synth::{synthesize_dataset, SynthSpec};
use ptss::trainer::{config_for, fit, prepare_data, validation_score, TrainConfig};

fn small_model(window: usize, k_total: usize) -> ModelConfig {
    ModelConfig {
        window,
        channels: 2,
        k_total,
        d_model: 32,
        mlp_hidden: 64,
        heads: 4,
        encoder_layers: 1,
        decoder_layers: 2,
        ..Default::default()
    }
}

#[test]
fn two_state_data_is_learned() {
    let spec: SynthSpec = serde_json::from_str(
        r#"{"channels": 2, "duration": [50, 200], "length": 4000,
            "states": [{"mean": [-2, 2], "std": [0.5, 0.5]}, {"mean": [2, -2], "std": [0.5, 0.5]}]}"#,
    )
    .unwrap();
    let ds = synthesize_dataset(&spec, 3).unwrap();
    let base = small_model(64, 2);
    let prepared = prepare_data(&ds, base.window, 16).unwrap();
    let mc = config_for(&base, &ds, &prepared.stats);
    let tc = TrainConfig {
        iterations: 4,
        batch_size: 8,
        learning_rate: 1e-3,
        max_epochs: 50,
        window_stride: 16,
        ..Default::default()
    };
    let out = fit(&prepared.train, &prepared.val, &mc, &tc, Execution::default()).unwrap();
    let best = out.report.best();
    assert!(out.report.epochs.iter().all(|e| e.val_loss >= best.val_loss));
    let score = validation_score(&out.params, &prepared.train, 0.05, 1, Execution::default()).unwrap();
    assert!(score.accuracy >= 0.99, "train accuracy {}", score.accuracy);
}

#[test]
fn patience_zero_stops_after_first_regression() {
    let mut spec = SynthSpec::hypercube(2, 2, 4.0, 1.0);
    spec.length = 1200;
    spec.coarsen.clear();
    let ds = synthesize_dataset(&spec, 0).unwrap();
    let base = small_model(32, 2);
    let prepared = prepare_data(&ds, 32, 32).unwrap();
    let mc = config_for(&base, &ds, &prepared.stats);
    let tc = TrainConfig {
        iterations: 1,
        learning_rate: 0.5,
        patience: 0,
        max_epochs: 30,
        batch_size: 4,
        window_stride: 32,
        ..Default::default()
    };
    let out = fit(&prepared.train, &prepared.val, &mc, &tc, Execution::default()).unwrap();
    let epochs = &out.report.epochs;
    if out.report.stopped_early {
        let last = epochs.last().unwrap();
        assert!(last.val_loss >= epochs[out.report.best_epoch].val_loss);
        assert_eq!(out.report.best_epoch + 2, epochs.len());
    } else {
        assert_eq!(epochs.len(), 30);
    }
}

fn series(len: usize, seed: u64) -> MultivariateSeries {
    let mut spec = SynthSpec::hypercube(2, 4, 3.0, 1.0);
    spec.length = len;
    spec.duration = [5, 30];
    let mut s = synthesize_dataset(&spec, seed).unwrap().series.remove(0);
    s.values = s.values.slice(ndarray::s![..len, ..]).to_owned();
    s.label_tracks.iter_mut().for_each(|t| t.truncate(len));
    s
}

fn untrained() -> Arc<ModelParams<f32>> {
    let cfg = ModelConfig {
        levels: vec![Level { name: "fine".into(), k: 4 }, Level { name: "coarse".into(), k: 2 }],
        ..small_model(16, 6)
    };
    Arc::new(ModelParams::init(&cfg, 2).unwrap())
}

#[derive(Debug, Clone)]
enum Op {
    Label(usize, usize),
    Boundary(usize, bool),
    Remove(usize),
    Undo,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0usize..1000, 0usize..6).prop_map(|(t, s)| Op::Label(t, s)),
        (0usize..1000, any::<bool>()).prop_map(|(t, b)| Op::Boundary(t, b)),
        (0usize..1000).prop_map(Op::Remove),
        Just(Op::Undo),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stitched_rows_are_distributions(len in 16usize..90, stride in 1usize..=16, seed in 0u64..50) {
        let params = untrained();
        let res = predict_series(&params, &series(len, seed), &PromptSet::new(), stride, Execution::default()).unwrap();
        prop_assert_eq!(res.probs.dim(), (len, 6));
        for row in res.probs.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn incremental_edits_match_full_recompute(len in 16usize..70, stride in 3usize..12, ops in prop::collection::vec(op(), 1..8)) {
        let params = untrained();
        let s = series(len, len as u64);
        let mut session = Session::new("p", params.clone(), s.clone(), stride).unwrap();
        for op in ops {
            let _ = match op {
                Op::Label(t, st) => session.add_prompt(Prompt::Label(LabelPrompt::positive(t % len, st)), true),
                Op::Boundary(t, b) => session.add_prompt(
                    Prompt::Boundary(BoundaryPrompt { t: t % len, kind: BoundaryKind::from_transition(b) }),
                    true,
                ),
                Op::Remove(t) => session.remove_prompt(t % len, PromptKind::Label),
                Op::Undo => session.undo(),
            };
        }
        let full = predict_series(&params, &s, session.prompts(), stride, Execution::Sequential).unwrap();
        let diff: Array2<f64> = &full.probs - &session.result().probs;
        prop_assert!(diff.iter().all(|d| d.abs() <= 1e-12));
        prop_assert_eq!(&full.states, &session.result().states);
    }

    #[test]
    fn grown_prompts_agree_with_ground_truth(seed in 0u64..500, n_min in 1usize..4, extra in 0usize..3) {
        let s = series(40, seed);
        let truth = s.label_tracks[0].clone();
        let bounds = boundaries_from_states(&truth);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = PromptSet::new();
        for _ in 0..4 {
            let next = grow_prompt_set(&truth, &bounds, &set, n_min, n_min + extra, 0..4, &mut rng).prompts;
            prop_assert!(set.is_subset_of(&next));
            set = next;
        }
        for p in set.iter() {
            match p {
                Prompt::Label(l) => {
                    if let Some(pos) = l.positive {
                        prop_assert_eq!(pos, truth[l.t]);
                    }
                    prop_assert!(!l.negatives.contains(&truth[l.t]));
                    prop_assert!(l.negatives.iter().all(|&n| n < 4));
                }
                Prompt::Boundary(b) => prop_assert_eq!(b.kind, BoundaryKind::from_transition(bounds[b.t])),
            }
        }
    }
}

#[test]
fn split_windows_never_cross_split_boundaries() {
    let ds = synthesize_dataset(&SynthSpec::hypercube(3, 8, 4.0, 1.0), 1).unwrap();
    let ranges = ds.ranges(64).unwrap();
    for (i, split) in [Split::Train, Split::Validation, Split::Test].into_iter().enumerate() {
        for w in ds.split_windows(split, 64, 32).unwrap() {
            let r = &ranges[0][i];
            assert!(r.start <= w.offset && w.offset + 64 <= r.end);
        }
    }
}
