//! Acceptance run: one line per criterion, non-zero exit if any fails.

mod common;

use std::time::{Duration, Instant};

use common::*;
use fhdgm::basis::BasisSpec;
use fhdgm::estimation::*;
use fhdgm::exec::Executor;
use fhdgm::inference::*;
use fhdgm::ingest::{split_validation, Unit};
use fhdgm::partition::{fit_kmeans, Partitioning};
use fhdgm::predict::*;
use fhdgm::spatial::SpatialParams;
use fhdgm::statespace::{kalman_filter, kalman_smoother};
use fhdgm::Error;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    check(elapsed < limit, format!("{detail}; {:.2} s of {} s", elapsed.as_secs_f64(), limit.as_secs()))
}

fn instance(seed: u64) -> fhdgm::statespace::StateSpaceSystem {
    let mut r = rng(seed ^ 0x5eed);
    let n = r.random_range(1..=4);
    let p = r.random_range(1..=3);
    let t = r.random_range(1..=5);
    let q = r.random_range(1..=3);
    random_system(seed, n, p, t, q, 0.3)
}

fn likelihood_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let sys = instance(seed);
        let got = kalman_filter(&sys).map_err(|e| e.to_string())?.loglik;
        worst = worst.max(rel_err(got, brute_force(&sys).loglik));
    }
    let detail = format!("max relative error {worst:.1e} over 50 instances");
    if worst > 1e-8 {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(10), detail)
}

fn smoother_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let sys = instance(seed);
        let sm = kalman_smoother(&sys).map_err(|e| e.to_string())?;
        let bf = brute_force(&sys);
        for t in 0..=sys.t_len() {
            worst = worst.max((&sm.z_smooth[t] - &bf.mean[t]).amax());
            worst = worst.max(max_abs_diff(&sm.p_smooth[t], &bf.block(t, t)));
        }
    }
    let detail = format!("max abs error {worst:.1e} over 50 instances");
    if worst > 1e-8 {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(10), detail)
}

fn em_monotonicity() -> Outcome {
    let start = Instant::now();
    let bt = spline_bases();
    let truth = spline_truth([0.7, 0.4], [1.0, 0.5], [0.2, 0.2], 0.1);
    let mut worst = f64::INFINITY;
    let mut iterations = 0;
    for seed in 0..20 {
        let ds = simulate(&layout(15, 60, 1.0).generate(seed).unwrap(), &bt, &truth, seed + 100).unwrap();
        let init = initialize(&ds, &bt).map_err(|e| e.to_string())?;
        let fit = em_fit(&ds, &bt, &init, &EmOptions::default()).map_err(|e| format!("seed {seed}: {e}"))?;
        iterations += fit.iterations;
        for w in fit.loglik_trace.windows(2) {
            worst = worst.min(w[1] - w[0]);
        }
    }
    let detail = format!("smallest loglik step {worst:.1e} over 20 fits, {iterations} iterations");
    if worst < -1e-8 {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(60), detail)
}

fn parameter_recovery() -> Outcome {
    let start = Instant::now();
    let bt = spline_bases();
    let truth = spline_truth([0.7, 0.4], [1.0, 0.5], [2.0, 2.0], 0.1);
    let names = vec!["const".to_string()];
    let runs = 50;
    let (mut g_ok, mut th_ok, mut cb_ok, mut all_ok) = (0, 0, 0, 0);
    for seed in 0..runs {
        let ds = simulate(&layout(30, 200, 10.0).generate(seed).unwrap(), &bt, &truth, seed + 1000).unwrap();
        let init = initialize(&ds, &bt).map_err(|e| e.to_string())?;
        let fit = em_fit(&ds, &bt, &init, &EmOptions::default()).map_err(|e| format!("seed {seed}: {e}"))?;
        let model = Model::new(&ds, &bt, None).map_err(|e| e.to_string())?;
        let vc = varcov_truncated(&model, &fit.params, &names, 0.0, &InfoOptions::default())
            .map_err(|e| format!("seed {seed}: {e}"))?;
        let se = vc.standard_errors();
        let est = &fit.params;
        let g = (0..2).all(|j| (est.g()[j] - truth.g()[j]).abs() <= 0.1);
        let th = (0..2).all(|j| (est.sp.theta[j] / truth.sp.theta[j] - 1.0).abs() <= 0.3);
        let cb = (0..2).all(|j| (est.c_beta[j] - truth.c_beta[j]).abs() <= 3.0 * se[1 + j]);
        g_ok += g as usize;
        th_ok += th as usize;
        cb_ok += cb as usize;
        all_ok += (g && th && cb) as usize;
    }
    let need = (0.9 * runs as f64).ceil() as usize;
    let detail = format!("all three in {all_ok}/{runs} runs (g {g_ok}, theta {th_ok}, c_beta {cb_ok}; need {need})");
    if all_ok < need {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(300), detail)
}

fn partition_exactness() -> Outcome {
    let bt = spline_bases();
    let truth = spline_truth([0.7, 0.4], [1.0, 0.5], [0.2, 0.2], 0.1);
    let ds = simulate(&layout(10, 40, 1.0).generate(5).unwrap(), &bt, &truth, 6).unwrap();
    let init = initialize(&ds, &bt).map_err(|e| e.to_string())?;
    let plain = em_fit(&ds, &bt, &init, &EmOptions::default()).map_err(|e| e.to_string())?;
    let single = EmOptions {
        partitions: Some(Partitioning::single(&ds.sites).unwrap()),
        ..Default::default()
    };
    let one = em_fit(&ds, &bt, &init, &single).map_err(|e| e.to_string())?;
    let mut gap1 = rel_err(one.loglik(), plain.loglik());
    for (a, b) in one.params.to_vec().iter().zip(plain.params.to_vec()) {
        gap1 = gap1.max(rel_err(*a, b));
    }

    // Two groups of sites too far apart for their innovations to correlate.
    let mut template = layout(12, 40, 1.0).generate(7).unwrap();
    for s in template.sites.iter_mut().skip(6) {
        s.lon_or_x += 1.0e4;
    }
    let ds = simulate(&template, &bt, &truth, 8).unwrap();
    let part = fit_kmeans(&ds.sites, 2, 0.0, 3, 0, &Executor::sequential()).map_err(|e| e.to_string())?;
    let joint = em_fit(&ds, &bt, &truth, &EmOptions::default()).map_err(|e| e.to_string())?;
    let split_opts = EmOptions {
        partitions: Some(part),
        ..Default::default()
    };
    let split = em_fit(&ds, &bt, &truth, &split_opts).map_err(|e| e.to_string())?;
    let gap2 = (joint.loglik() - split.loglik()).abs() / joint.loglik().abs();
    check(
        gap1 <= 1e-10 && gap2 <= 1e-8,
        format!("k = 1 gap {gap1:.1e}; block-diagonal fit loglik gap {gap2:.1e}"),
    )
}

fn balanced_kmeans() -> Outcome {
    let ex = Executor::sequential();
    let mut r = rng(606);
    let mut lloyd_gap = 0.0f64;
    for case in 0..10u64 {
        let k = 2 + (case % 3) as usize;
        let mut pts = Vec::new();
        for j in 0..k {
            let (cy, cx) = (j as f64 * 40.0, (j % 2) as f64 * 40.0);
            for _ in 0..8 {
                pts.push((cy + r.random_range(-3.0..3.0), cx + r.random_range(-3.0..3.0)));
            }
        }
        let p = fit_kmeans(&coords(&pts), k, 0.0, 5, case * 100, &ex).map_err(|e| e.to_string())?;
        let classic = (0..5).filter_map(|i| classic_kmeans(&pts, k, case * 100 + i)).fold(f64::INFINITY, f64::min);
        lloyd_gap = lloyd_gap.max((p.objective - classic).abs() / classic);
    }
    let mut worst_size = 0.0f64;
    for case in 0..20u64 {
        let k = 2 + (case % 4) as usize;
        let n = k * r.random_range(1..=60 / k);
        let pts = random_points(&mut r, n, 100.0);
        let p = fit_kmeans(&coords(&pts), k, 1e6, 4, case, &ex).map_err(|e| e.to_string())?;
        for &s in &p.sizes {
            worst_size = worst_size.max((s as f64 - (n / k) as f64).abs());
        }
    }
    let mut enum_gap = 0.0f64;
    for case in 0..40u64 {
        let n = 3 + (case % 6) as usize;
        let pts = random_points(&mut r, n, 10.0);
        for &lambda in &[0.0, 0.5, 5.0, 1e6] {
            let p = fit_kmeans(&coords(&pts), 2, lambda, 10, case, &ex).map_err(|e| e.to_string())?;
            let best = enumerate_two(&pts, lambda);
            enum_gap = enum_gap.max((p.objective - best).abs() / best.max(1.0));
        }
    }
    check(
        lloyd_gap <= 1e-10 && worst_size <= 1.0 && enum_gap <= 1e-9,
        format!("Lloyd gap {lloyd_gap:.1e}; max |r_j - n/k| {worst_size}; enumeration gap {enum_gap:.1e}"),
    )
}

fn frob_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

fn truncated_varcov() -> Outcome {
    let start = Instant::now();
    let bt = spline_bases();
    let truth = spline_truth([0.7, 0.4], [1.0, 0.5], [0.2, 0.2], 0.1);
    let ds = simulate(&layout(10, 300, 1.0).generate(1).unwrap(), &bt, &truth, 2).unwrap();
    let fit = em_fit(&ds, &bt, &initialize(&ds, &bt).unwrap(), &EmOptions::default()).map_err(|e| e.to_string())?;
    let model = Model::new(&ds, &bt, None).map_err(|e| e.to_string())?;
    let names = ds.covariate_names.clone();
    let opts = InfoOptions {
        kind: InformationKind::Hessian,
        ..Default::default()
    };
    let info = observed_information(&model, &fit.params, &names, ds.t_len, &opts).map_err(|e| e.to_string())?;
    let full = info.try_inverse().ok_or("full information is singular")?;
    let tiny = varcov_truncated(&model, &fit.params, &names, 1e-300, &opts).map_err(|e| e.to_string())?;
    let exact_gap = frob_gap(&tiny.matrix, &full);
    let vc = varcov_truncated(&model, &fit.params, &names, 1e-3, &opts).map_err(|e| e.to_string())?;
    let gap = frob_gap(&vc.matrix, &full);
    let detail = format!(
        "delta -> 0 gap {exact_gap:.1e} (t* {}); delta 1e-3 gap {:.1}% at t* {} of {}",
        tiny.t_star,
        100.0 * gap,
        vc.t_star,
        ds.t_len
    );
    if !(exact_gap <= 1e-10 && tiny.t_star == ds.t_len && gap <= 0.05 && vc.t_star < ds.t_len) {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(120), detail)
}

fn kriging_equivalences() -> Outcome {
    let bt = spline_bases();
    let params = spline_truth([0.7, 0.4], [1.0, 0.5], [0.3, 0.2], 0.1);
    let ds = simulate(&layout(12, 15, 1.0).generate(21).unwrap(), &bt, &params, 22).unwrap();
    let model = KrigingModel::new(&ds, &bt, &params).map_err(|e| e.to_string())?;
    let grid = KrigingGrid::regular((0.0, 1.0, 0.1), (0.0, 1.0, 0.2), Unit::Km).map_err(|e| e.to_string())?;
    let times = [1, 8, 15];
    let h = [0.0, 0.5, 1.0];
    let reference =
        krige_block(&model, &grid.targets, &times, &h, &KrigingOptions::default(), None).map_err(|e| e.to_string())?;
    let mut block_gap = 0.0f64;
    for (block_size, workers) in [(1, 1), (9, 1), (9, 4), (66, 2), (1000, 3)] {
        let opts = KrigingOptions {
            block_size,
            workers,
            ..Default::default()
        };
        let got = krige(&model, &grid, &times, &h, &opts, None).map_err(|e| e.to_string())?;
        let vs = got.var_f.as_ref().unwrap().iter().zip(reference.var_f.as_ref().unwrap());
        for (a, b) in got.f_hat.iter().zip(&reference.f_hat).chain(vs) {
            block_gap = block_gap.max((a - b).abs());
        }
    }

    let mut quiet = params.clone();
    quiet.c_eps[0] = (1e-14f64).ln();
    let qds = simulate(&layout(6, 8, 1.0).generate(23).unwrap(), &bt, &quiet, 24).unwrap();
    let qmodel = KrigingModel::new(&qds, &bt, &quiet).map_err(|e| e.to_string())?;
    let hq = qds.records[0].h.clone();
    let all_t: Vec<usize> = (1..=qds.t_len).collect();
    let x = TargetCovariates::new(vec![1.0; all_t.len() * hq.len()], 1, all_t.len(), hq.len(), 1).unwrap();
    let mut interp_gap = 0.0f64;
    for site in 0..qds.n_sites() {
        let res = krige_block(&qmodel, &qds.sites[site..=site], &all_t, &hq, &KrigingOptions::default(), Some(&x))
            .map_err(|e| e.to_string())?;
        for r in qds.records.iter().filter(|r| r.site == site) {
            for (k, y) in r.y.iter().enumerate() {
                interp_gap = interp_gap.max((res.f_hat[res.index(0, r.time - 1, k)] - y).abs());
            }
        }
    }

    let (est, val) = split_validation(&ds, &[0, 5, 9]).map_err(|e| e.to_string())?;
    let emodel = KrigingModel::new(&est, &bt, &params).map_err(|e| e.to_string())?;
    let rep = validate(&emodel, &val, 3, &KrigingOptions::default()).map_err(|e| e.to_string())?;
    let binned: f64 = rep.by_bin.iter().map(|b| b.metrics.mse.unwrap_or(0.0) * b.metrics.count as f64).sum();
    let timed: f64 = rep.by_time.iter().map(|r| r.mse.unwrap_or(0.0) * r.count as f64).sum();
    let acct = (binned - timed).abs() / timed;
    check(
        block_gap <= 1e-12 && interp_gap <= 1e-6 && acct <= 1e-9,
        format!("block/worker gap {block_gap:.1e}; interpolation gap {interp_gap:.1e}; binned accounting {acct:.1e}"),
    )
}

fn validation_metrics() -> Outcome {
    let bt = spline_bases();
    let quiet = ModelParams::new(
        DVector::from_vec(vec![(1e-10f64).ln()]),
        DVector::from_vec(vec![2.0, -1.0, 0.5, 1.0]),
        DVector::from_vec(vec![0.7, 0.4]),
        SpatialParams::new(vec![1.0, 0.5], vec![500.0, 500.0]).unwrap(),
    )
    .unwrap();
    let lay = Layout {
        n_covariates: 2,
        ..layout(40, 30, 1.0)
    };
    let all = simulate(&lay.generate(31).unwrap(), &bt, &quiet, 32).unwrap();
    let val_ids: Vec<usize> = (0..40).step_by(4).collect();
    let (est, val) = split_validation(&all, &val_ids).map_err(|e| e.to_string())?;
    let model = KrigingModel::new(&est, &bt, &quiet).map_err(|e| e.to_string())?;
    let rep = validate(&model, &val, 4, &KrigingOptions::default()).map_err(|e| e.to_string())?;
    let min_r2 = rep.by_time.iter().map(|r| r.r2.unwrap_or(f64::NEG_INFINITY)).fold(f64::INFINITY, f64::min);
    let exact: Vec<Vec<f64>> = val.records.iter().map(|r| r.y.clone()).collect();
    let perfect = ValidationReport::from_predictions(&val, &exact, 4).map_err(|e| e.to_string())?;
    let rows = perfect.by_time.iter().chain(&perfect.by_site).chain(perfect.by_bin.iter().map(|b| &b.metrics));
    let perfect_ok = rows.filter(|r| r.count > 0).all(|r| r.mse == Some(0.0) && r.r2 == Some(1.0));
    check(
        min_r2 >= 0.99 && perfect_ok,
        format!("min R2_t {min_r2:.4} over {} times; perfect predictions exact: {perfect_ok}", val.t_len),
    )
}

fn chi2_oracles() -> Outcome {
    let mut worst = 0.0f64;
    for k in 1..=20 {
        for &x in &[0.1, 0.5, 1.0, 2.5, 5.0, 10.0, 17.3, 30.0, 55.0, 80.0, 100.0] {
            worst = worst.max((chi2_sf(x, k) - chi2_tail_oracle(x, k)).abs());
        }
    }
    let c = DVector::from_vec(vec![3.0, 4.0]);
    let w = wald_statistic(&c, &DMatrix::identity(2, 2)).ok_or("singular covariance")?;
    let p = chi2_sf(w, 2);
    let want = (-12.5f64).exp();
    check(
        worst <= 1e-10 && (w - 25.0).abs() <= 1e-12 && (p - want).abs() <= 1e-12 * want,
        format!("max p-value error {worst:.1e} for df <= 20; W = {w}, p = {p:.6e}"),
    )
}

fn partition_speedup() -> Outcome {
    let bt = spline_bases();
    let truth = spline_truth([0.7, 0.4], [1.0, 0.5], [0.2, 0.2], 0.1);
    let ds = simulate(&layout(64, 50, 1.0).generate(41).unwrap(), &bt, &truth, 42).unwrap();
    let ex = Executor::sequential();
    let part = fit_kmeans(&ds.sites, 4, 1e6, 4, 43, &ex).map_err(|e| e.to_string())?;
    if part.sizes.iter().any(|&s| s != 16) {
        return Err(format!("partition sizes {:?}", part.sizes));
    }
    let median = |model: &Model| -> Result<f64, String> {
        let mut t = Vec::new();
        for _ in 0..3 {
            let start = Instant::now();
            model.estep(&truth, &ex).map_err(|e| e.to_string())?;
            t.push(start.elapsed().as_secs_f64());
        }
        t.sort_by(f64::total_cmp);
        Ok(t[1])
    };
    let one = median(&Model::new(&ds, &bt, None).map_err(|e| e.to_string())?)?;
    let four = median(&Model::new(&ds, &bt, Some(&part)).map_err(|e| e.to_string())?)?;
    check(
        four < 0.5 * one,
        format!("E-step median {:.1} ms with k = 4 vs {:.1} ms with k = 1 (ratio {:.3})", four * 1e3, one * 1e3, four / one),
    )
}

fn fourier_rule() -> Outcome {
    let even: Vec<usize> = (1..=10).map(|k| 2 * k).collect();
    let rejected = even.iter().all(|&p| matches!(BasisSpec::fourier((0.0, 24.0), p), Err(Error::Basis(_))));
    let odd_ok = (0..10).all(|k| BasisSpec::fourier((0.0, 24.0), 2 * k + 1).is_ok());
    let msg = BasisSpec::fourier((0.0, 24.0), 4).err().map(|e| e.to_string()).unwrap_or_default();
    check(rejected && odd_ok, format!("even sizes rejected with \"{msg}\""))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("likelihood oracle", likelihood_oracle),
        ("smoother oracle", smoother_oracle),
        ("EM monotonicity", em_monotonicity),
        ("parameter recovery", parameter_recovery),
        ("partition exactness", partition_exactness),
        ("balanced k-means", balanced_kmeans),
        ("truncated varcov", truncated_varcov),
        ("kriging equivalences", kriging_equivalences),
        ("validation metrics", validation_metrics),
        ("chi2 and quantile oracles", chi2_oracles),
        ("partitioned E-step speed", partition_speedup),
        ("Fourier odd-count rule", fourier_rule),
    ];
    // A name filter as the only argument runs just the matching criteria.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if filter.as_ref().is_some_and(|f| !name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {name}: {detail} [{secs:.2} s]", i + 1);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
