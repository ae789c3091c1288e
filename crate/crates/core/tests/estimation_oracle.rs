mod common;

use common::*;
use fhdgm::basis::{BasisSpec, BasisTriple};
use fhdgm::estimation::*;
use fhdgm::exec::Executor;
use fhdgm::ingest::{Coordinate, ProfileDataset, ProfileRecord, Unit};
use fhdgm::partition::{fit_kmeans, Partitioning};
use fhdgm::spatial::SpatialParams;
use fhdgm::statespace::kalman_filter;
use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn simulated(n: usize, t: usize, seed: u64, truth: &ModelParams) -> ProfileDataset {
    let lay = layout(n, t, 1.0);
    simulate(
        &lay.generate(seed).unwrap(),
        &spline_bases(),
        truth,
        seed + 1,
    )
    .unwrap()
}

fn default_truth() -> ModelParams {
    spline_truth([0.7, 0.4], [1.0, 0.5], [0.2, 0.2], 0.1)
}

#[test]
fn model_loglik_is_the_filter_loglik() {
    let truth = default_truth();
    let ds = simulated(6, 12, 4, &truth);
    let bt = spline_bases();
    let model = Model::new(&ds, &bt, None).unwrap();
    let direct = kalman_filter(&build_system(&ds, &bt, &truth).unwrap())
        .unwrap()
        .loglik;
    assert!(rel_err(model.loglik(&truth).unwrap(), direct) <= 1e-12);
}

#[test]
fn em_never_decreases_the_loglik() {
    let truth = default_truth();
    let bt = spline_bases();
    for seed in 0..4 {
        let ds = simulated(8, 30, seed, &truth);
        let init = initialize(&ds, &bt).unwrap();
        let opts = EmOptions {
            exit_toll_par: 1e-9,
            exit_toll_loglike: 1e-12,
            max_iterations: 15,
            ..Default::default()
        };
        let fit = em_fit(&ds, &bt, &init, &opts).unwrap();
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "seed {seed}: {} -> {}", w[0], w[1]);
        }
        assert!(fit.params.g().iter().all(|g| g.abs() < 1.0));
    }
}

#[test]
fn single_partition_follows_the_unpartitioned_path() {
    let truth = default_truth();
    let bt = spline_bases();
    let ds = simulated(7, 25, 9, &truth);
    let init = initialize(&ds, &bt).unwrap();
    let plain = em_fit(&ds, &bt, &init, &EmOptions::default()).unwrap();
    let opts = EmOptions {
        partitions: Some(Partitioning::single(&ds.sites).unwrap()),
        ..Default::default()
    };
    let one = em_fit(&ds, &bt, &init, &opts).unwrap();
    assert_eq!(plain.loglik_trace.len(), one.loglik_trace.len());
    for (a, b) in plain.loglik_trace.iter().zip(&one.loglik_trace) {
        assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }
    for (a, b) in plain.params.to_vec().iter().zip(one.params.to_vec()) {
        assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }
}

/// Two groups of sites so far apart that their innovations are
/// uncorrelated to machine precision.
fn two_groups(seed: u64, per_group: usize, t: usize, truth: &ModelParams) -> ProfileDataset {
    let mut template = layout(2 * per_group, t, 1.0).generate(seed).unwrap();
    for s in template.sites.iter_mut().skip(per_group) {
        s.lon_or_x += 1.0e4;
    }
    simulate(&template, &spline_bases(), truth, seed + 7).unwrap()
}

#[test]
fn partitioned_likelihood_is_exact_for_block_diagonal_truth() {
    let truth = default_truth();
    let bt = spline_bases();
    let ds = two_groups(3, 5, 20, &truth);
    let part = fit_kmeans(&ds.sites, 2, 0.0, 3, 0, &Executor::sequential()).unwrap();
    assert_eq!(part.sizes, vec![5, 5]);
    let joint = Model::new(&ds, &bt, None).unwrap();
    let split = Model::new(&ds, &bt, Some(&part)).unwrap();
    for params in [
        truth.clone(),
        spline_truth([0.2, -0.5], [2.0, 0.1], [0.5, 0.05], 0.3),
    ] {
        let a = joint.loglik(&params).unwrap();
        let b = split.loglik(&params).unwrap();
        assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn first_iteration_from_the_truth_moves_less_than_from_afar() {
    let truth = default_truth();
    let bt = spline_bases();
    let ds = simulated(10, 60, 12, &truth);
    let model = Model::new(&ds, &bt, None).unwrap();
    let ex = Executor::sequential();
    let far = ModelParams::new(
        DVector::from_vec(vec![0.0]),
        DVector::from_vec(vec![0.0, 0.0]),
        DVector::from_vec(vec![0.0, 0.0]),
        SpatialParams::new(vec![5.0, 5.0], vec![0.6, 0.6]).unwrap(),
    )
    .unwrap();
    let step = |p: &ModelParams| {
        let e = model.estep(p, &ex).unwrap();
        let next = model.mstep(p, &e).unwrap();
        p.to_vec()
            .iter()
            .zip(next.to_vec())
            .map(|(a, b)| (a - b).abs())
            .collect::<Vec<_>>()
    };
    let near = step(&truth);
    let away = step(&far);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm(&near) < norm(&away), "{near:?} vs {away:?}");
}

#[test]
fn exit_rules() {
    let truth = default_truth();
    let bt = spline_bases();
    let ds = simulated(5, 15, 2, &truth);
    let init = initialize(&ds, &bt).unwrap();
    let one = em_fit(
        &ds,
        &bt,
        &init,
        &EmOptions {
            max_iterations: 1,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!((one.iterations, one.exit_reason), (1, ExitReason::MaxIter));
    assert_eq!(one.loglik_trace.len(), 2);
    let loose = em_fit(
        &ds,
        &bt,
        &init,
        &EmOptions {
            exit_toll_par: 1e3,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(
        (loose.iterations, loose.exit_reason),
        (1, ExitReason::ParToll)
    );
    assert!(em_fit(
        &ds,
        &bt,
        &init,
        &EmOptions {
            exit_toll_par: 0.0,
            ..Default::default()
        }
    )
    .is_err());
}

#[test]
fn initial_slope_matches_least_squares() {
    // y = 2 x + noise with a single constant basis for beta.
    let mut r = rng(8);
    let n = 12;
    let t_len = 10;
    let sites: Vec<Coordinate> = (0..n)
        .map(|i| Coordinate::planar(i as f64, 0.0, Unit::Km))
        .collect();
    let h = vec![0.0, 0.5, 1.0];
    let mut records = Vec::new();
    let (mut sxx, mut sxy) = (0.0, 0.0);
    let mut pairs = Vec::new();
    for site in 0..n {
        for time in 1..=t_len {
            let x: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = x
                .iter()
                .map(|xi| {
                    2.0 * xi
                        + 0.3
                            * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r)
                })
                .collect();
            for k in 0..3 {
                sxx += x[k] * x[k];
                sxy += x[k] * y[k];
                pairs.push((x[k], y[k]));
            }
            records.push(ProfileRecord {
                site,
                time,
                h: h.clone(),
                y,
                covariates: vec![x],
            });
        }
    }
    let (ds, _) = ProfileDataset::new(
        sites,
        records,
        t_len,
        (0.0, 1.0),
        vec!["x".into()],
        Unit::Km,
    )
    .unwrap();
    let c = BasisSpec::constant((0.0, 1.0)).unwrap();
    let bt = BasisTriple::new(BasisSpec::fourier((0.0, 1.0), 1).unwrap(), c.clone(), c).unwrap();
    let init = initialize(&ds, &bt).unwrap();
    let slope = sxy / sxx;
    let rss: f64 = pairs.iter().map(|(x, y)| (y - slope * x).powi(2)).sum();
    let se = (rss / (pairs.len() - 1) as f64 / sxx).sqrt();
    assert!((init.c_beta[0] - slope).abs() <= 1e-10);
    assert!((init.c_beta[0] - 2.0).abs() <= 3.0 * se);
    assert_eq!(init.g().as_slice(), &[0.5]);
}

#[test]
fn white_latent_process_has_no_lag_one_correlation() {
    let truth = spline_truth([0.0, 0.0], [1.0, 1.0], [0.2, 0.2], 1e-6);
    let t_len = 400;
    let ds = simulated(3, t_len, 5, &truth);
    for site in 0..3 {
        // At h = 0 only the first latent basis function is non-zero.
        let series: Vec<f64> = ds
            .records
            .iter()
            .filter(|r| r.site == site)
            .map(|r| r.y[0])
            .collect();
        let m = series.iter().sum::<f64>() / t_len as f64;
        let c0: f64 = series.iter().map(|y| (y - m).powi(2)).sum();
        let c1: f64 = series.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
        assert!(
            (c1 / c0).abs() <= 3.0 / (t_len as f64).sqrt(),
            "site {site}: {}",
            c1 / c0
        );
    }
}

#[test]
fn degenerate_simulation_is_zero() {
    let tiny = ModelParams::new(
        DVector::from_vec(vec![-700.0]),
        DVector::from_vec(vec![0.0, 0.0]),
        DVector::from_vec(vec![0.5, 0.5]),
        SpatialParams::new(vec![1e-300, 1e-300], vec![0.2, 0.2]).unwrap(),
    )
    .unwrap();
    let ds = simulated(4, 5, 1, &tiny);
    assert!(ds
        .records
        .iter()
        .flat_map(|r| &r.y)
        .all(|y| y.abs() < 1e-100));
    let a = simulated(4, 5, 1, &default_truth());
    let b = simulated(4, 5, 1, &default_truth());
    assert_eq!(a, b);
}
