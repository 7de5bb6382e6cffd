use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cvqem::daem::{self, DaemConfig};
use cvqem::fock::{self, CoherentAmplitude};
use cvqem::model::{Model, ModelConfig, Variant};
use cvqem::parallel::Execution;
use cvqem::training;
use cvqem::wigner::{self, PhaseGrid};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn wigner_raster(c: &mut Criterion) {
    let rho = fock::coherent(CoherentAmplitude::new(1.2, -0.7), 24).unwrap();
    let grid = PhaseGrid::default();
    let mut g = c.benchmark_group("wigner_48x48");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| wigner::wigner_with(&rho, &grid, exec).unwrap()));
    }
    g.finish();
}

fn dataset_generation(c: &mut Criterion) {
    let cfg = DaemConfig {
        time_samples: vec![0.0, 0.5, 1.0],
        tau_samples: vec![0.0, 0.5, 1.0],
        n_initial_states: 4,
        max_amplitude: 1.0,
        grid: PhaseGrid::square(16, 4.0),
        cutoff: 12,
        dt: 1e-2,
        ..DaemConfig::kerr()
    };
    let mut g = c.benchmark_group("daem_generation");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| daem::generate(&cfg, exec).unwrap()));
    }
    g.finish();
}

fn batch_gradients(c: &mut Criterion) {
    let cfg = DaemConfig {
        time_samples: vec![0.0, 1.0],
        tau_samples: vec![0.0, 0.5, 1.0],
        n_initial_states: 2,
        max_amplitude: 1.0,
        grid: PhaseGrid::square(16, 4.0),
        cutoff: 12,
        dt: 1e-2,
        ..DaemConfig::kerr()
    };
    let ds = daem::generate(&cfg, Execution::Sequential).unwrap();
    let model = Model::new(ModelConfig { grid_side: 16, ..ModelConfig::reduced(Variant::SwinAdaLN) }).unwrap();
    let params = model.init_params(0);
    let batch: Vec<_> = ds.records.iter().take(8).collect();
    let mut g = c.benchmark_group("batch_gradient_8");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| training::batch_gradient(&model, &params, &batch, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, wigner_raster, dataset_generation, batch_gradients);
criterion_main!(benches);
