//! Sequential against multi-worker execution of the partitioned E-step and
//! of block kriging. Without the `parallel` feature both arms run
//! sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fhdgm::basis::{BasisSpec, BasisTriple};
use fhdgm::estimation::{simulate, Layout, Model, ModelParams};
use fhdgm::exec::Executor;
use fhdgm::ingest::Unit;
use fhdgm::partition::fit_kmeans;
use fhdgm::predict::{krige, KrigingGrid, KrigingModel, KrigingOptions};
use fhdgm::spatial::SpatialParams;
use nalgebra::DVector;

fn setup() -> (fhdgm::ingest::ProfileDataset, BasisTriple, ModelParams) {
    let r = (0.0, 1.0);
    let bt = BasisTriple::new(
        BasisSpec::bspline_equispaced(r, 2, 2).unwrap(),
        BasisSpec::bspline_equispaced(r, 2, 2).unwrap(),
        BasisSpec::constant(r).unwrap(),
    )
    .unwrap();
    let params = ModelParams::new(
        DVector::from_vec(vec![(0.1f64).ln()]),
        DVector::from_vec(vec![2.0, -1.0]),
        DVector::from_vec(vec![0.7, 0.4]),
        SpatialParams::new(vec![1.0, 0.5], vec![0.2, 0.2]).unwrap(),
    )
    .unwrap();
    let layout = Layout {
        n_sites: 64,
        t_len: 50,
        h_points: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        domain: r,
        n_covariates: 1,
        unit: Unit::Km,
        extent: 1.0,
    };
    let ds = simulate(&layout.generate(1).unwrap(), &bt, &params, 2).unwrap();
    (ds, bt, params)
}

fn estep(c: &mut Criterion) {
    let (ds, bt, params) = setup();
    let part = fit_kmeans(&ds.sites, 4, 1e6, 4, 0, &Executor::sequential()).unwrap();
    let model = Model::new(&ds, &bt, Some(&part)).unwrap();
    let mut group = c.benchmark_group("estep_k4");
    group.sample_size(10);
    for workers in [1, 4] {
        let ex = Executor::new(workers);
        group.bench_with_input(BenchmarkId::from_parameter(workers), &workers, |b, _| {
            b.iter(|| model.estep(&params, &ex).unwrap())
        });
    }
    group.finish();
}

fn kriging(c: &mut Criterion) {
    let (ds, bt, params) = setup();
    let model = KrigingModel::new(&ds, &bt, &params).unwrap();
    let grid = KrigingGrid::regular((0.0, 1.0, 0.05), (0.0, 1.0, 0.05), Unit::Km).unwrap();
    let mut group = c.benchmark_group("krige_nn8");
    group.sample_size(10);
    for workers in [1, 4] {
        let opts = KrigingOptions {
            nn_size: Some(8),
            block_size: 40,
            workers,
            compute_variance: true,
        };
        group.bench_with_input(BenchmarkId::from_parameter(workers), &workers, |b, _| {
            b.iter(|| krige(&model, &grid, &[10, 50], &[0.0, 0.5, 1.0], &opts, None).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, estep, kriging);
criterion_main!(benches);
