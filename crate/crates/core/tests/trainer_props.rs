mod common;

use twinlm::model::{AttentionMode, TransformerModel};
use twinlm::objectives::ObjectiveKind;
use twinlm::trainer::{
    adamw_step, read_metrics, AdamState, Arch, Checkpoint, OptimizerConfig, RunDir, Trainer,
};
use twinlm::Error;

fn finished(arch: Arch) -> Checkpoint {
    let run = common::desk_run(arch, 1, 1e8, 2);
    let corpora = common::desk_corpora(&run);
    let mut t = Trainer::new(run, &corpora).unwrap();
    t.run(None).unwrap();
    t.checkpoint()
}

#[test]
fn checkpoint_bytes_round_trip() {
    let ckpt = finished(Arch::Encoder);
    let bytes = ckpt.to_bytes();
    let again = Checkpoint::from_bytes(&bytes).unwrap().to_bytes();
    assert_eq!(bytes, again);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.meta.mode, AttentionMode::Bidirectional);
    assert_eq!(loaded.meta.objective, ObjectiveKind::Mlm);
    assert!(loaded.meta.completed);
    assert_eq!(
        loaded.model.parameter_digest(),
        ckpt.model.parameter_digest()
    );

    for cut in [0, 7, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(
            matches!(Checkpoint::load(&path), Err(Error::Integrity(_))),
            "cut {cut}"
        );
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    assert!(matches!(
        Checkpoint::from_bytes(&flipped),
        Err(Error::Integrity(_))
    ));
}

#[test]
fn resume_rejects_a_different_run_and_finishes_cleanly_when_done() {
    let ckpt = finished(Arch::Decoder);
    let run = ckpt.meta.run.clone();
    let corpora = common::desk_corpora(&run);

    let mut other = run.clone();
    other.seed += 1;
    let err = Trainer::resume(
        Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap(),
        other,
        &corpora,
    )
    .err();
    assert!(matches!(err, Some(Error::Config(_))), "{err:?}");

    let mut t = Trainer::resume(
        Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap(),
        run,
        &corpora,
    )
    .unwrap();
    assert!(t.is_complete());
    let digest = t.model().parameter_digest();
    t.run(None).unwrap();
    assert_eq!(t.model().parameter_digest(), digest);
    assert!(t.metrics().is_empty());

    let mut bare = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    bare.optimizer = None;
    let run = bare.meta.run.clone();
    assert!(matches!(
        Trainer::resume(bare, run, &corpora),
        Err(Error::Config(_))
    ));
}

#[test]
fn cadence_writes_floor_budget_over_interval_files() {
    // 2_000 divides the total exactly, so the last point lands on the end.
    for interval in [3_000, 2_000] {
        let mut run = common::desk_run(Arch::Decoder, 0, 1e8, 2);
        run.checkpoint_interval_tokens = interval;
        let expected = run.total_tokens() / interval;
        assert_eq!(run.checkpoint_count(), expected);
        let corpora = common::desk_corpora(&run);
        let dir = tempfile::tempdir().unwrap();
        let rd = RunDir::create(dir.path()).unwrap();
        let mut t = Trainer::new(run, &corpora)
            .unwrap()
            .with_run_dir(rd.clone())
            .unwrap();
        t.run(None).unwrap();
        let n = std::fs::read_dir(rd.checkpoints())
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .starts_with("ckpt_")
            })
            .count() as u64;
        assert_eq!(n, expected);
        assert!(rd.final_checkpoint().exists());
        let logged = read_metrics(&rd.metrics_log()).unwrap();
        assert_eq!(logged, t.metrics());
    }
}

#[test]
fn tokens_are_counted_per_sequence_and_cover_every_budget() {
    let run = common::desk_run(Arch::Encoder, 2, 1e8, 2);
    let corpora = common::desk_corpora(&run);
    let mut t = Trainer::new(run.clone(), &corpora).unwrap();
    t.run(None).unwrap();
    let mut prev = 0;
    for m in t.metrics() {
        let seq_len = run.phases[m.phase].seq_len as u64;
        assert_eq!(m.tokens - prev, m.batch_size as u64 * seq_len);
        let phase = &run.phases[m.phase];
        let phase_used: u64 = t
            .metrics()
            .iter()
            .filter(|o| o.phase == m.phase && o.step < m.step)
            .map(|o| o.batch_size as u64 * seq_len)
            .sum();
        let left = (phase.token_budget - phase_used) / seq_len;
        let expected = (run.schedule.batch_size_at(prev) as u64).min(left);
        assert_eq!(m.batch_size as u64, expected, "step {}", m.step);
        prev = m.tokens;
    }
    assert_eq!(t.tokens_seen(), prev);
    for (i, phase) in run.phases.iter().enumerate() {
        let used: u64 = t
            .metrics()
            .iter()
            .filter(|m| m.phase == i)
            .map(|m| m.batch_size as u64 * phase.seq_len as u64)
            .sum();
        assert!(used <= phase.token_budget, "phase {i}");
        assert!(
            phase.token_budget - used < phase.seq_len as u64,
            "phase {i}"
        );
        assert_eq!(t.manifests()[i].total_tokens(), used);
    }
}

#[test]
fn same_seed_runs_are_bit_identical() {
    let run = common::desk_run(Arch::Decoder, 4, 1e8, 2);
    let corpora = common::desk_corpora(&run);
    let mut a = Trainer::new(run.clone(), &corpora).unwrap();
    let mut b = Trainer::new(run, &corpora).unwrap();
    a.run(Some(30)).unwrap();
    b.run(Some(30)).unwrap();
    let bits = |t: &Trainer| {
        t.metrics()
            .iter()
            .map(|m| m.loss.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.model().parameter_digest(), b.model().parameter_digest());
}

#[test]
fn weight_decay_is_decoupled_and_skips_norms() {
    let cfg = common::small_config(1, 8, 2, 8, 12);
    let mut model = TransformerModel::<f32>::build(cfg, 0).unwrap();
    let before = model.clone();
    let mut state = AdamState::zeros(&model);
    let zeros: Vec<Vec<f32>> = model
        .parameters()
        .iter()
        .map(|p| vec![0.0; p.value.numel()])
        .collect();
    let (lr, wd) = (1e-2, 0.5);
    adamw_step(
        &mut model,
        &mut state,
        &zeros,
        lr,
        &OptimizerConfig::with_weight_decay(wd),
    )
    .unwrap();
    for (i, (a, b)) in before
        .parameters()
        .iter()
        .zip(model.parameters())
        .enumerate()
    {
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            let want = if model.decays(i) {
                (*x as f64 * (1.0 - lr * wd)) as f32
            } else {
                *x
            };
            assert_eq!(*y, want, "{}", a.name);
        }
    }
    assert!(model
        .parameters()
        .iter()
        .enumerate()
        .any(|(i, _)| !model.decays(i)));
}

#[test]
fn non_finite_gradient_is_a_numerical_error() {
    let cfg = common::small_config(1, 8, 2, 8, 12);
    let mut model = TransformerModel::<f32>::build(cfg, 0).unwrap();
    let mut state = AdamState::zeros(&model);
    let mut grads: Vec<Vec<f32>> = model
        .parameters()
        .iter()
        .map(|p| vec![0.0; p.value.numel()])
        .collect();
    grads[0][0] = f32::NAN;
    let err = adamw_step(
        &mut model,
        &mut state,
        &grads,
        1e-3,
        &OptimizerConfig::with_weight_decay(0.0),
    );
    assert!(matches!(err, Err(Error::Numerical { .. })));
}
