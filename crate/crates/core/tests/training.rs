use fas_gnn::checkpoint;
use fas_gnn::dataset::sample_dataset;
use fas_gnn::pipeline::loss_value;
use fas_gnn::training::*;
use fas_gnn::{evaluate, ArchConfig, Metrics, SystemConfig, TwoStageModel, Utility};

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        gal_layers: [1; 4],
        heads: 2,
        head_dim: 4,
        fl_width: 8,
        ..ArchConfig::default()
    }
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 16,
        max_epochs: 3,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn adam_minimizes_a_quadratic() {
    let tc = TrainConfig {
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    let mut w = vec![1.5, -2.0, 0.3, 4.0];
    let mut state = AdamState::new(w.len());
    for _ in 0..2000 {
        let g: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        adam_step(&mut w, &g, &mut state, &tc).unwrap();
    }
    assert!(w.iter().map(|v| v * v).sum::<f64>() < 1e-4, "{w:?}");
}

#[test]
fn adam_skips_non_finite_gradients() {
    let tc = TrainConfig::default();
    let mut w = vec![1.0, 2.0];
    let mut state = AdamState::new(2);
    assert!(!adam_step(&mut w, &[f64::NAN, 0.0], &mut state, &tc).unwrap());
    assert_eq!((w, state.step, state.skipped), (vec![1.0, 2.0], 0, 1));
}

#[test]
fn loss_is_positive_and_falls_as_any_utility_rises() {
    let base = [3.0, 0.5, 12.0];
    assert!(loss_value(&base) > 0.0);
    for i in 0..3 {
        let mut up = base;
        up[i] += 0.25;
        assert!(loss_value(&up) < loss_value(&base));
    }
}

#[test]
fn patience_stops_after_first_non_improving_epoch() {
    let cfg = SystemConfig::reference(4, 2);
    let data = sample_dataset(&cfg, 64, 1);
    let model = TwoStageModel::new(&tiny_arch(), 4, 1).unwrap();
    let tc = TrainConfig {
        patience: 1,
        max_epochs: 10,
        ..quick_config()
    };
    let mut calls = 0;
    let scores = [5.0, 7.0, 6.0, 9.0];
    let res = fit_with(model, &data.samples, &cfg, &tc, |_| {
        calls += 1;
        Ok(scores[calls - 1])
    })
    .unwrap();
    assert_eq!(res.report.epochs.len(), 2);
    assert_eq!(res.report.stop_reason, StopReason::EarlyStopping);
    assert_eq!(
        (res.report.best_epoch, res.report.best_val_utility),
        (1, 7.0)
    );
    assert_eq!(res.report.initial_val_utility, 5.0);
    assert_ne!(res.best.params, res.last.params);
}

#[test]
fn best_checkpoint_is_never_below_any_epoch() {
    let cfg = SystemConfig::reference(4, 2);
    let data = sample_dataset(&cfg, 96, 2);
    let res = fit(
        TwoStageModel::new(&tiny_arch(), 4, 2).unwrap(),
        &data.samples[..80],
        &data.samples[80..],
        &cfg,
        &quick_config(),
    )
    .unwrap();
    let best = res.report.best_val_utility;
    assert!(res.report.epochs.iter().all(|e| e.val_utility <= best));
    let again = mean_utility(&res.best, &data.samples[80..], &cfg, Utility::SumRate, 256).unwrap();
    assert_eq!(again, best);
    let mut csv = Vec::new();
    res.report.write_csv(&mut csv).unwrap();
    assert!(String::from_utf8(csv)
        .unwrap()
        .starts_with("epoch,train_loss,val_utility,seconds\n"));
}

#[test]
fn training_is_bitwise_reproducible() {
    let cfg = SystemConfig::reference(4, 2);
    let data = sample_dataset(&cfg, 96, 3);
    let run = || {
        let model = TwoStageModel::new(&tiny_arch(), 4, 3).unwrap();
        fit(
            model,
            &data.samples[..80],
            &data.samples[80..],
            &cfg,
            &quick_config(),
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.report.without_timing(), b.report.without_timing());
    let bits = |m: &TwoStageModel| {
        m.params
            .flatten()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a.last), bits(&b.last));
    assert_eq!(a.last.bn, b.last.bn);
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let cfg = SystemConfig::reference(4, 2);
    let data = sample_dataset(&cfg, 40, 4);
    let res = fit(
        TwoStageModel::new(&tiny_arch(), 4, 4).unwrap(),
        &data.samples[..32],
        &data.samples[32..],
        &cfg,
        &quick_config(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&res.best, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, res.best);
    let a = evaluate(&res.best, &data.samples, &cfg, Utility::SumRate).unwrap();
    let b = evaluate(&back, &data.samples, &cfg, Utility::SumRate).unwrap();
    assert_eq!(a.without_timing(), b.without_timing());

    let bytes = checkpoint::to_bytes(&back).unwrap();
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    assert!(checkpoint::from_bytes(b"not a checkpoint at all").is_err());
}

#[test]
fn evaluation_accepts_unseen_user_counts() {
    let model = TwoStageModel::new(&tiny_arch(), 8, 5).unwrap();
    let cfg = SystemConfig::reference(8, 4);
    let mut rows = Vec::new();
    for k in [1, 3, 5, 8] {
        let data = sample_dataset(&cfg.with_users(k), 12, k as u64);
        let m = evaluate(&model, &data.samples, &cfg, Utility::EnergyEfficiency).unwrap();
        assert_eq!((m.n_users, m.samples, m.feasibility_rate), (k, 12, 1.0));
        rows.push((format!("k{k}"), m));
    }
    let mut out = Vec::new();
    Metrics::write_csv(&rows, &mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap().lines().count(), 5);

    let too_many = sample_dataset(&cfg.with_users(9), 2, 0);
    assert!(evaluate(&model, &too_many.samples, &cfg, Utility::SumRate).is_err());
    let wrong_n = SystemConfig::reference(6, 2);
    assert!(evaluate(
        &model,
        &sample_dataset(&wrong_n, 2, 0).samples,
        &wrong_n,
        Utility::SumRate
    )
    .is_err());
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for kind in [Utility::SumRate, Utility::EnergyEfficiency] {
        let cfg = SystemConfig::reference(4, 2);
        let model = TwoStageModel::new(&ArchConfig::desk(), 4, 9).unwrap();
        let batch = sample_dataset(&cfg, 8, 9).samples;
        let report = pipeline_gradcheck(&model, &batch, &cfg, kind, 200, 9, 1e-5, 1e-3).unwrap();
        assert_eq!(report.entries.len(), 200);
        assert!(
            report.passed(),
            "{} max rel {}",
            report.name,
            report.max_rel_error
        );
    }
}

#[test]
fn invalid_training_settings_are_rejected() {
    let bad = [
        TrainConfig {
            batch_size: 1,
            ..quick_config()
        },
        TrainConfig {
            learning_rate: 0.0,
            ..quick_config()
        },
        TrainConfig {
            patience: 0,
            ..quick_config()
        },
    ];
    for tc in bad {
        assert!(tc.validate().is_err());
    }
}
