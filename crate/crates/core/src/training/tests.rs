use std::collections::BTreeSet;

use super::*;
use crate::model::Variant;

fn reads(t: usize, k: usize, h: usize) -> BTreeSet<usize> {
    let mut r: BTreeSet<usize> = (0..k).map(|j| (t + j + 1).saturating_sub(k)).collect();
    r.insert(t + h);
    r
}

#[test]
fn folds_are_equal_contiguous_blocks() {
    let folds = split_folds(100, 5, 5, 1).unwrap();
    assert_eq!(folds.len(), 5);
    for (i, f) in folds.iter().enumerate() {
        assert_eq!(f.validation, i * 20..(i + 1) * 20);
    }
}

#[test]
fn validation_blocks_partition_the_range() {
    for (len, folds) in [(100, 5), (103, 4), (57, 3)] {
        let split = split_folds(len, folds, 3, 2).unwrap();
        let mut seen = vec![0; len];
        for f in &split {
            for t in f.validation.clone() {
                seen[t] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }
}

#[test]
fn fold_samples_match_boundary_enumeration() {
    let (len, k, h) = (60, 4, 3);
    for f in split_folds(len, 3, k, h).unwrap() {
        let val: BTreeSet<usize> = f.validation.clone().collect();
        let mut train = vec![];
        let mut valid = vec![];
        for t in 0..len - h {
            let r = reads(t, k, h);
            if r.is_disjoint(&val) {
                train.push(t);
            } else if r.is_subset(&val) {
                valid.push(t);
            }
        }
        assert_eq!(f.train_samples, train, "fold {}", f.index);
        assert_eq!(f.validation_samples, valid, "fold {}", f.index);
    }
}

#[test]
fn short_series_is_rejected() {
    assert!(matches!(split_folds(20, 5, 3, 2), Err(Error::Argument(_))));
    assert!(split_folds(25, 5, 3, 2).is_ok());
    assert!(split_folds(100, 1, 3, 2).is_err());
}

#[test]
fn early_stopping_rule() {
    let mut s = EarlyStopping::new(2);
    let losses = [5.0, 4.0, 3.0, 3.5, 4.0, 5.0, 6.0];
    let mut stopped = None;
    for (i, &l) in losses.iter().enumerate() {
        if s.observe(i + 1, l) == StopDecision::Stop {
            stopped = Some(i + 1);
            break;
        }
    }
    assert_eq!(stopped, Some(5));
    assert_eq!(s.best(), (3, 3.0));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            lr: 0.0,
            ..Default::default()
        },
        TrainConfig {
            patience: 0,
            ..Default::default()
        },
        TrainConfig {
            folds: 1,
            ..Default::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
}

fn wave_series(t: usize, n: usize) -> FeatureSeries {
    let data = (0..t)
        .flat_map(|s| (0..n).map(move |i| (s as f64 * 0.3 + i as f64).sin() * 10.0 + 50.0))
        .collect();
    FeatureSeries::new((t, n, 1), data, 0, 300, FeatureSeries::default_names(1)).unwrap()
}

fn small_model(seed: u64) -> RadNet {
    RadNet::new(RadNetConfig {
        window: 3,
        decoder_hidden: vec![8],
        seed,
        ..RadNetConfig::new(3, 1)
    })
    .unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 5e-3,
        max_epochs: epochs,
        batch: 8,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn identical_seeds_give_identical_curves() {
    let s = wave_series(60, 3);
    let g = RoadGraph::path(3);
    let folds = split_folds(60, 3, 3, 1).unwrap();
    let f = &folds[2];
    let run = |exec| {
        let mut m = small_model(1);
        let cfg = TrainConfig { exec, ..quick(3) };
        let r = train(
            &mut m,
            &s,
            &g,
            &f.train_samples,
            &f.validation_samples,
            &cfg,
        )
        .unwrap();
        (r, m.params)
    };
    let (a, pa) = run(ExecMode::Parallel);
    let (b, pb) = run(ExecMode::Parallel);
    let (c, pc) = run(ExecMode::Sequential);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(pa, pb);
    assert_eq!(pa, pc);
}

#[test]
fn returns_best_validation_parameters() {
    let s = wave_series(60, 3);
    let g = RoadGraph::path(3);
    let f = &split_folds(60, 3, 3, 1).unwrap()[2];
    let mut m = small_model(2);
    let r = train(
        &mut m,
        &s,
        &g,
        &f.train_samples,
        &f.validation_samples,
        &quick(6),
    )
    .unwrap();
    let best = r
        .history
        .iter()
        .map(|e| e.val_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(r.best_val_loss, best);
    let again = evaluate_loss(&m, &s, &g, &f.validation_samples, ExecMode::Sequential).unwrap();
    assert_eq!(again, best);
}

#[test]
fn constant_series_is_learned() {
    let s = FeatureSeries::new(
        (80, 3, 1),
        vec![12.5; 240],
        0,
        300,
        FeatureSeries::default_names(1),
    )
    .unwrap();
    let g = RoadGraph::path(3);
    let f = &split_folds(80, 4, 3, 1).unwrap()[3];
    let mut m = small_model(4);
    let cfg = TrainConfig {
        max_epochs: 50,
        patience: 50,
        ..quick(50)
    };
    let r = train(
        &mut m,
        &s,
        &g,
        &f.train_samples,
        &f.validation_samples,
        &cfg,
    )
    .unwrap();
    assert!(r.best_val_loss < 0.05, "{:?}", r.history.last());
    let p = m.predict(&s, &g, 70).unwrap();
    assert!(p.prediction.data().iter().all(|v| (v - 12.5).abs() < 0.05));
}

#[test]
fn nan_input_aborts_with_diagnostic() {
    let mut s = wave_series(60, 3);
    s.data_mut()[10] = f64::NAN;
    let g = RoadGraph::path(3);
    let f = &split_folds(60, 3, 3, 1).unwrap()[2];
    let mut m = small_model(5);
    let err = train(
        &mut m,
        &s,
        &g,
        &f.train_samples,
        &f.validation_samples,
        &quick(2),
    )
    .unwrap_err();
    match err {
        Error::NonFiniteLoss { step, lr, .. } => {
            assert_eq!(step, 0);
            assert_eq!(lr, 5e-3);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn autoregressive_training_runs() {
    let s = wave_series(60, 3);
    let g = RoadGraph::path(3);
    let cfg = TrainConfig {
        rollout_steps: 2,
        ..quick(2)
    };
    let f = &split_folds(60, 3, 3, 2).unwrap()[2];
    let mut m = small_model(6);
    let r = train(
        &mut m,
        &s,
        &g,
        &f.train_samples,
        &f.validation_samples,
        &cfg,
    )
    .unwrap();
    assert!(r.history.iter().all(|e| e.train_loss.is_finite()));

    let mut h3 = RadNet::new(RadNetConfig {
        horizon: 3,
        ..small_model(6).config
    })
    .unwrap();
    assert!(train(
        &mut h3,
        &s,
        &g,
        &f.train_samples,
        &f.validation_samples,
        &cfg
    )
    .is_err());
}

#[test]
fn cross_validation_runs_every_fold() {
    let s = wave_series(48, 3);
    let g = RoadGraph::path(3);
    let config = RadNetConfig {
        variant: Variant::NoSkip,
        ..small_model(7).config
    };
    let cfg = TrainConfig {
        folds: 3,
        ..quick(1)
    };
    let runs = cross_validate(&config, &s, &g, &cfg).unwrap();
    assert_eq!(runs.len(), 3);
    assert!(runs.iter().all(|(_, r)| r.history.len() == 1));
}

#[test]
fn loss_csv_layout() {
    let mut buf = Vec::new();
    let h = [EpochLoss {
        epoch: 1,
        train_loss: 0.5,
        val_loss: 0.25,
    }];
    write_loss_csv(&h, &mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "epoch,train_loss,val_loss\n1,0.5,0.25\n"
    );
}
