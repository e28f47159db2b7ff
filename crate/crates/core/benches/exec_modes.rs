use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use radnet::data::{synth_traffic, SynthConfig, SynthData};
use radnet::incident::{Calibration, PotConfig, Scores};
use radnet::model::{RadNet, RadNetConfig};
use radnet::parallel::ExecMode;
use radnet::pipeline::forecast_sweep;
use radnet::training::{train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [ExecMode; 2] = [ExecMode::Sequential, ExecMode::Parallel];

fn data() -> SynthData {
    synth_traffic(&SynthConfig {
        n_nodes: 8,
        days: 2,
        seed: 1,
        ..Default::default()
    })
    .unwrap()
}

fn epoch(c: &mut Criterion) {
    let d = data();
    let config = RadNetConfig::new(8, 1);
    let train_samples: Vec<usize> = (10..138).collect();
    let val_samples: Vec<usize> = (300..332).collect();
    let mut group = c.benchmark_group("train_epoch_128_samples");
    group.sample_size(10);
    for mode in MODES {
        let cfg = TrainConfig {
            max_epochs: 1,
            exec: mode,
            ..Default::default()
        };
        group.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter(|| {
                let mut m = RadNet::new(config.clone()).unwrap();
                train(
                    &mut m,
                    &d.series,
                    &d.graph,
                    &train_samples,
                    &val_samples,
                    &cfg,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn forecasting(c: &mut Criterion) {
    let d = data();
    let model = RadNet::new(RadNetConfig::new(8, 1)).unwrap();
    let targets: Vec<usize> = (10..266).collect();
    let mut group = c.benchmark_group("forecast_256_targets");
    group.sample_size(10);
    for mode in MODES {
        group.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter(|| forecast_sweep(&model, &d.series, &d.graph, &targets, mode).unwrap())
        });
    }
    group.finish();
}

fn threshold_fits(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (len, n_links) = (5000, 64);
    let links: Vec<f64> = (0..len * n_links)
        .map(|_| -rng.random::<f64>().ln())
        .collect();
    let network = (0..len)
        .map(|i| links[i * n_links..(i + 1) * n_links].iter().sum())
        .collect();
    let scores = Scores {
        timesteps: (0..len).collect(),
        network,
        links,
        n_links,
    };
    let cfg = PotConfig {
        percentile: 95.0,
        ..Default::default()
    };
    let mut group = c.benchmark_group("pot_fit_64_links");
    group.sample_size(10);
    for mode in MODES {
        group.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter(|| Calibration::fit(&scores, &cfg, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, epoch, forecasting, threshold_fits);
criterion_main!(benches);
