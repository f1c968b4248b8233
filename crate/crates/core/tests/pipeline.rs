//! End-to-end runs on the seeded, untrained backbone.

use std::sync::OnceLock;

use villm_core::base::{BaseConfig, ImageLlm};
use villm_core::harness::{ablation_sweep, evaluate, generate_examples, SweepAxis, SweepConfig, SyntheticTask, TaskKind};
use villm_core::lm::build_prompt;
use villm_core::tuning::trainer::sample_prompt;
use villm_core::tuning::{batch_gradients, train, Checkpoint, Sample, TrainConfig, Trainer, Variant};
use villm_core::VillmError;

fn base() -> &'static ImageLlm {
    static BASE: OnceLock<ImageLlm> = OnceLock::new();
    BASE.get_or_init(|| ImageLlm::build(&BaseConfig::default()).unwrap())
}

fn samples(kind: TaskKind, n: usize, frames: usize, seed: u64) -> Vec<Sample> {
    generate_examples(&SyntheticTask::new(kind, n, frames, seed))
        .unwrap()
        .iter()
        .map(|e| Sample::from_video(&e.id, &e.video, &base().encoder, frames, &e.instruction, &e.answer).unwrap())
        .collect()
}

fn cfg(variant: Variant) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 4,
        epochs: 2,
        variant,
        ..Default::default()
    }
}

#[test]
fn step_zero_loss_is_near_uniform() {
    let data = samples(TaskKind::Direction, 8, 8, 0);
    let mut t = Trainer::new(base(), cfg(Variant::Full)).unwrap();
    let batch: Vec<&Sample> = data.iter().collect();
    let loss = t.training_step(&batch).unwrap();
    let uniform = (villm_core::lm::tokenizer::VOCAB_SIZE as f64).ln();
    assert!((loss - uniform).abs() < 0.2 * uniform, "{loss} vs {uniform}");
}

#[test]
fn only_adapters_change_during_training() {
    let data = samples(TaskKind::Order, 8, 4, 1);
    for v in Variant::ALL {
        let before = base().tensor_hashes();
        let ckpt = train(base(), &data, &cfg(v)).unwrap();
        assert_eq!(base().tensor_hashes(), before);
        let init = villm_core::tuning::AdapterStack::new(&base().g_z, &cfg(v));
        let changed: Vec<String> = ckpt
            .adapters
            .named_tensors()
            .into_iter()
            .zip(init.named_tensors())
            .filter(|((_, a), (_, b))| a != b)
            .map(|((n, _), _)| n)
            .collect();
        let trainable: Vec<String> = init.trainable().iter().map(|(n, _)| n.to_string()).collect();
        let mut expected: Vec<String> = init
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| trainable.iter().any(|t| n.starts_with(t.split('.').next().unwrap())))
            .collect();
        expected.sort();
        let mut changed = changed;
        changed.sort();
        assert_eq!(changed, expected, "{v}");
        assert_eq!(ckpt.epoch_losses.len(), 2);
    }
}

#[test]
fn same_seed_gives_the_same_loss_curve() {
    let data = samples(TaskKind::Static, 12, 4, 2);
    let a = train(base(), &data, &cfg(Variant::Full)).unwrap();
    let b = train(base(), &data, &cfg(Variant::Full)).unwrap();
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_eq!(a.state_hash(), b.state_hash());
    let c = train(base(), &data, &TrainConfig { seed: 5, ..cfg(Variant::Full) }).unwrap();
    assert_ne!(a.epoch_losses, c.epoch_losses);
}

#[test]
fn checkpoint_survives_save_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = samples(TaskKind::Direction, 10, 4, 3);
    let whole = train(base(), &data, &cfg(Variant::WithExtraMlp)).unwrap();
    let mut first = Trainer::new(base(), cfg(Variant::WithExtraMlp)).unwrap();
    first.train_steps(&data, Some(3)).unwrap();
    first.state.save(dir.path()).unwrap();
    let loaded = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(loaded, first.state);
    let mut second = Trainer::resume(base(), loaded).unwrap();
    second.train_steps(&data, None).unwrap();
    assert_eq!(second.state, whole);
}

#[test]
fn resume_rejects_a_different_backbone() {
    let other = ImageLlm::build(&BaseConfig {
        decoder: villm_core::lm::DecoderConfig { seed: 9, ..Default::default() },
        ..Default::default()
    })
    .unwrap();
    let t = Trainer::new(base(), cfg(Variant::Full)).unwrap();
    assert!(matches!(Trainer::resume(&other, t.state), Err(VillmError::Manifest(_))));
}

#[test]
fn batch_gradient_is_the_token_weighted_mean() {
    let data = samples(TaskKind::Direction, 4, 4, 4);
    let stack = villm_core::tuning::AdapterStack::new(&base().g_z, &cfg(Variant::Full));
    let batch: Vec<&Sample> = data.iter().collect();
    let g = batch_gradients(&base().decoder, &stack, &batch).unwrap();
    let (mut nll, mut count) = (0.0, 0);
    for s in &data {
        let (p, _) = sample_prompt(&base().decoder, &stack, s).unwrap();
        let (n, c) = base().decoder.sequence_nll(&p.embeddings, &p.target_ids, &p.loss_mask).unwrap();
        nll += n;
        count += c;
    }
    assert!((g.nll_sum - nll / count as f64).abs() < 1e-12);
}

#[test]
fn long_clips_need_a_wider_budget() {
    let data = samples(TaskKind::Direction, 1, 300, 5);
    let (q_v, _) = villm_core::tuning::AdapterStack::new(&base().g_z, &cfg(Variant::Full))
        .forward(&data[0].features)
        .unwrap();
    let err = build_prompt(&base().decoder, &q_v, &data[0].instruction, Some(&data[0].answer)).unwrap_err();
    assert!(matches!(err, VillmError::Length { total, budget: 256, .. } if total > 316));
    let wide = base().decoder.with_max_seq_len(400);
    assert!(build_prompt(&wide, &q_v, &data[0].instruction, Some(&data[0].answer)).is_ok());
}

#[test]
fn evaluation_is_deterministic_and_bounded() {
    let data = samples(TaskKind::Order, 6, 4, 6);
    let stack = villm_core::tuning::AdapterStack::new(&base().g_z, &cfg(Variant::Full));
    let a = evaluate(&base().decoder, &stack, &data, "order", "x").unwrap();
    let b = evaluate(&base().decoder, &stack, &data, "order", "x").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.accuracy, a.correct as f64 / a.n as f64);
}

#[test]
fn sweeps_emit_one_row_per_value() {
    let sweep = SweepConfig {
        task: TaskKind::Direction,
        n_train: 4,
        n_eval: 4,
        raw_frames: 8,
        data_seed: 1,
        train: TrainConfig { epochs: 1, batch_size: 4, ..Default::default() },
        record_time: false,
    };
    let values: Vec<String> = ["full", "no-temporal-module", "spatial-only", "temporal-only", "with-extra-mlp"]
        .map(String::from)
        .to_vec();
    let r = ablation_sweep(base(), SweepAxis::Variant, &values, &sweep).unwrap();
    assert_eq!(r.rows.len(), 5);
    assert_eq!(r.to_csv(), ablation_sweep(base(), SweepAxis::Variant, &values, &sweep).unwrap().to_csv());
    let st = ablation_sweep(base(), SweepAxis::SpatialTokens, &["16".into(), "4".into()], &sweep).unwrap();
    assert_eq!(st.rows.len(), 2);
    assert!(ablation_sweep(base(), SweepAxis::SpatialTokens, &["5".into()], &sweep).is_err());
}
