use super::*;
use crate::data::{generate_synthetic, tokenize_pairs, SynthSpec};
use crate::nn::leaves;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        max_len: 40,
        ffn_hidden: 16,
        num_paths: 2,
        prefix_len: 2,
        batch_size: 3,
        total_steps: 6,
        warmup_steps: 2,
        peak_lr: 1e-2,
        lambda_mim: 0.1,
        ..Default::default()
    }
}

fn tiny_data(config: &TrainConfig) -> Vec<Example> {
    let spec = SynthSpec { num_entities: 16, ..Default::default() };
    let corpus = generate_synthetic(&spec).unwrap();
    tokenize_pairs(&corpus.train(), &config.model().vocab()).unwrap()
}

fn flat<P: crate::nn::ParamTree<DenseArray>>(p: &P) -> Vec<u64> {
    leaves(p).iter().flat_map(|t| t.value.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn schedule_matches_hand_values() {
    let c = TrainConfig::default();
    assert_eq!(lr_schedule(0, &c).unwrap(), 0.0);
    assert_eq!(lr_schedule(100, &c).unwrap(), c.peak_lr);
    assert!((lr_schedule(1050, &c).unwrap() - 0.5 * c.peak_lr).abs() < 1e-15);
    assert!((lr_schedule(50, &c).unwrap() - 0.5 * c.peak_lr).abs() < 1e-15);
    assert_eq!(lr_schedule(2000, &c).unwrap(), 0.0);
    assert!(lr_schedule(2001, &c).is_err());
}

#[test]
fn one_step_moves_both_groups() {
    let config = tiny_config();
    let data = tiny_data(&config);
    let mut state = TrainState::new(config).unwrap();
    let before = state.clone();
    let m = train_step(&mut state, &data[..3]).unwrap();
    assert_eq!(m.step, 1);
    assert_ne!(flat(&state.model), flat(&before.model));
    assert_ne!(flat(&state.estimators), flat(&before.estimators));
    assert!(m.loss.total.is_finite() && m.loss_estimator.is_finite());
    assert!(m.grad_norm_model > 0.0 && m.grad_norm_estimators > 0.0);
}

#[test]
fn switching_off_the_estimator_freezes_it() {
    let config = TrainConfig { lambda_mim: 0.0, estimator_lr: Some(0.0), ..tiny_config() };
    let data = tiny_data(&config);
    let mut state = TrainState::new(config).unwrap();
    let before = state.clone();
    train_step(&mut state, &data[..3]).unwrap();
    assert_ne!(flat(&state.model), flat(&before.model));
    assert_eq!(flat(&state.estimators), flat(&before.estimators));
}

#[test]
fn stages_touch_disjoint_groups() {
    let config = tiny_config();
    let data = tiny_data(&config);
    let mut state = TrainState::new(config).unwrap();
    for s in 0..3 {
        let mut snaps = Vec::new();
        train_step_observed(&mut state, &data[s..s + 3], &mut |stage, st| {
            snaps.push((stage, flat(&st.model), flat(&st.estimators)))
        })
        .unwrap();
        let [(_, m0, e0), (_, m1, e1), (_, m2, e2)] = &snaps[..] else { panic!() };
        assert_eq!(m0, m1);
        assert_ne!(e0, e1);
        assert_ne!(m1, m2);
        assert_eq!(e1, e2);
    }
}

#[test]
fn replay_is_bitwise_identical() {
    let config = tiny_config();
    let data = tiny_data(&config);
    let run = || {
        let mut state = TrainState::new(config.clone()).unwrap();
        let metrics = fit(&mut state, &data, Hooks::default()).unwrap();
        (metrics_csv(&metrics), write_checkpoint(&state))
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.0.lines().count(), config.total_steps + 1);
    assert_eq!(a.0.lines().next().unwrap(), METRICS_HEADER);
}

#[test]
fn zero_steps_leave_the_initial_state() {
    let config = TrainConfig { total_steps: 0, warmup_steps: 0, ..tiny_config() };
    let data = tiny_data(&config);
    let mut state = TrainState::new(config).unwrap();
    let before = state.clone();
    let mut saved = 0;
    let mut on_checkpoint = |_: usize, _: &TrainState| {
        saved += 1;
        Ok(())
    };
    let metrics =
        fit(&mut state, &data, Hooks { on_checkpoint: Some(&mut on_checkpoint), ..Default::default() }).unwrap();
    assert!(metrics.is_empty());
    assert_eq!(state, before);
    assert_eq!(saved, 1);
}

#[test]
fn hooks_fire_on_schedule() {
    let config = TrainConfig { eval_every: 2, checkpoint_every: 4, ..tiny_config() };
    let data = tiny_data(&config);
    let mut state = TrainState::new(config).unwrap();
    let (mut evals, mut ckpts) = (Vec::new(), Vec::new());
    let mut on_eval = |s: usize, _: &TrainState| {
        evals.push(s);
        Ok(())
    };
    let mut on_checkpoint = |s: usize, _: &TrainState| {
        ckpts.push(s);
        Ok(())
    };
    fit(&mut state, &data, Hooks { on_eval: Some(&mut on_eval), on_checkpoint: Some(&mut on_checkpoint) }).unwrap();
    assert_eq!(evals, vec![2, 4, 6]);
    assert_eq!(ckpts, vec![4, 6]);
}

#[test]
fn hook_errors_carry_the_step() {
    let config = TrainConfig { eval_every: 3, ..tiny_config() };
    let data = tiny_data(&config);
    let mut state = TrainState::new(config).unwrap();
    let mut on_eval = |_: usize, _: &TrainState| Err(Error::InvalidInput("disk full".into()));
    let err = fit(&mut state, &data, Hooks { on_eval: Some(&mut on_eval), ..Default::default() }).unwrap_err();
    assert!(matches!(err, Error::AtStep { step: 3, .. }), "{err}");
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let config = TrainConfig { total_steps: 3, ..tiny_config() };
    let data = tiny_data(&config);
    let mut state = TrainState::new(config).unwrap();
    fit(&mut state, &data, Hooks::default()).unwrap();
    let bytes = write_checkpoint(&state);
    let loaded = read_checkpoint(&bytes).unwrap();
    assert_eq!(loaded, state);
    assert_eq!(write_checkpoint(&loaded), bytes);
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let config = TrainConfig { checkpoint_every: 3, ..tiny_config() };
    let data = tiny_data(&config);
    let mut straight = TrainState::new(config).unwrap();
    let mut midway = Vec::new();
    let mut on_checkpoint = |s: usize, st: &TrainState| {
        if s == 3 {
            midway = write_checkpoint(st);
        }
        Ok(())
    };
    fit(&mut straight, &data, Hooks { on_checkpoint: Some(&mut on_checkpoint), ..Default::default() }).unwrap();

    let mut resumed = read_checkpoint(&midway).unwrap();
    assert_eq!(resumed.step, 3);
    fit(&mut resumed, &data, Hooks::default()).unwrap();
    assert_eq!(write_checkpoint(&resumed), write_checkpoint(&straight));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let state = TrainState::new(tiny_config()).unwrap();
    let bytes = write_checkpoint(&state);
    assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    assert!(read_checkpoint(b"NOTACKPT").is_err());
    let mut bad = bytes.clone();
    bad[8] = 99;
    assert!(matches!(read_checkpoint(&bad), Err(Error::Checkpoint(_))));
    let mut longer = bytes;
    longer.push(0);
    assert!(read_checkpoint(&longer).is_err());
}

#[test]
fn single_path_runs_without_estimators() {
    let config = TrainConfig { num_paths: 1, prefix_len: 0, ..tiny_config() };
    let data = tiny_data(&config);
    let mut state = TrainState::new(config).unwrap();
    assert!(state.estimators.pairs.is_empty());
    let m = train_step(&mut state, &data[..3]).unwrap();
    assert_eq!((m.loss.mim, m.loss_estimator), (0.0, 0.0));
    assert!(m.path_cosine_mean.is_nan());
}

#[test]
fn tiny_batches_are_rejected() {
    let config = tiny_config();
    let data = tiny_data(&config);
    let mut state = TrainState::new(config).unwrap();
    assert!(train_step(&mut state, &data[..1]).is_err());
}
