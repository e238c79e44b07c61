use chrono::NaiveDate;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kalman_trend::backtest::{
    bars_from_closes, calibrate, Bar, CalibrationOptions, InstrumentSpec, ShortRule, Strategy, StrategyParams,
};
use kalman_trend::estimation::{cmaes_minimize, CmaesOptions, Objective};
use kalman_trend::lgssm::ModelParams;
use kalman_trend::Execution;
use nalgebra::DVector;

fn bars(n: usize) -> Vec<Bar> {
    let closes: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64;
            ((2000.0 + 0.3 * t + 30.0 * (t / 17.0).sin() + 8.0 * (t / 3.1).cos()) * 4.0).round() / 4.0
        })
        .collect();
    bars_from_closes(NaiveDate::from_ymd_opt(2015, 1, 2).unwrap(), &closes)
}

fn start() -> Strategy {
    Strategy::Kf(StrategyParams {
        model: ModelParams::new(4, vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.3, 4.0, 1.0, 1.0, 0.1, 0.0, 0.1, 0.0]),
        signal_offset: 0.5,
        profit_target_ticks: 150,
        stop_loss_ticks: 80,
        short_rule: ShortRule::Symmetric,
    })
}

fn calibration(c: &mut Criterion) {
    let data = bars(500);
    let inst = InstrumentSpec::default();
    let mut group = c.benchmark_group("calibrate_model4_500_bars");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        let opts = CalibrationOptions {
            cmaes: CmaesOptions {
                max_iter: 10,
                lambda: Some(32),
                execution: exec,
                ..CalibrationOptions::default().cmaes
            },
            ..Default::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &opts, |b, opts| {
            b.iter(|| calibrate(&data, &start(), &inst, opts).unwrap())
        });
    }
    group.finish();
}

fn rosenbrock(c: &mut Criterion) {
    let obj = Objective::new(20, |x: &DVector<f64>| {
        x.as_slice()
            .windows(2)
            .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
            .sum::<f64>()
    });
    let mut group = c.benchmark_group("cmaes_rosenbrock_20d");
    for exec in [Execution::Sequential, Execution::Parallel] {
        let opts = CmaesOptions {
            max_iter: 50,
            lambda: Some(64),
            execution: exec,
            ..Default::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &opts, |b, opts| {
            b.iter(|| cmaes_minimize(&obj, &DVector::zeros(20), 0.5, opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, calibration, rosenbrock);
criterion_main!(benches);
