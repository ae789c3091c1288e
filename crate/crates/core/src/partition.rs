//! Balanced geographical partitioning of sites.
//!
//! Minimizes `sum_j sum_{s in S_j} d(s, c_j) + lambda * sum_j (r_j - n/k)^2`
//! with `c_j` the mean location of cluster `j` (normalized 3-D mean on the
//! sphere). A trial alternates centroid and assignment steps: the
//! assignment step moves one site at a time to the cluster with the lowest
//! distance-plus-penalty change, then (for `lambda > 0`) exchanges pairs of
//! sites when that shortens the distance term at unchanged sizes. With
//! `lambda = 0` this is Lloyd's algorithm. Because a mean does not minimize
//! a sum of distances, these sweeps need not lower the objective; the trial
//! therefore ends with a descent that re-evaluates the objective exactly,
//! centroids included, for every candidate move.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::ingest::{Coordinate, ProfileDataset, Unit};
use crate::spatial::distance;

pub const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Partitioning {
    pub k: usize,
    /// Cluster of each site, in `0..k`.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Coordinate>,
    pub sizes: Vec<usize>,
    pub objective: f64,
}

impl Partitioning {
    /// A single partition holding every site.
    pub fn single(sites: &[Coordinate]) -> Result<Self> {
        let c = centroid(sites).ok_or_else(|| Error::Argument("no sites".into()))?;
        let assignment = vec![0; sites.len()];
        let objective = objective(sites, &assignment, &[c], 0.0)?;
        Ok(Partitioning {
            k: 1,
            assignment,
            centroids: vec![c],
            sizes: vec![sites.len()],
            objective,
        })
    }

    /// Site indices of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

fn sizes_of(assignment: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![0; k];
    for &a in assignment {
        sizes[a] += 1;
    }
    sizes
}

/// Evaluates the penalized objective for a given assignment and centroids.
pub fn objective(
    sites: &[Coordinate],
    assignment: &[usize],
    centroids: &[Coordinate],
    lambda: f64,
) -> Result<f64> {
    let k = centroids.len();
    if assignment.len() != sites.len() || assignment.iter().any(|&a| a >= k) {
        return Err(Error::Argument(
            "assignment does not match sites/centroids".into(),
        ));
    }
    let mut dist = 0.0;
    for (s, &a) in sites.iter().zip(assignment) {
        dist += distance(s, &centroids[a])?;
    }
    let target = sites.len() as f64 / k as f64;
    let penalty: f64 = sizes_of(assignment, k)
        .iter()
        .map(|&r| (r as f64 - target).powi(2))
        .sum();
    Ok(dist + lambda * penalty)
}

/// Mean location: arithmetic mean in the plane, normalized mean of unit
/// vectors on the sphere.
pub fn centroid(points: &[Coordinate]) -> Option<Coordinate> {
    let first = points.first()?;
    let n = points.len() as f64;
    match first.unit {
        Unit::Deg => {
            let (mut x, mut y, mut z) = (0.0, 0.0, 0.0);
            for c in points {
                let (la, lo) = (c.lat_or_y.to_radians(), c.lon_or_x.to_radians());
                x += la.cos() * lo.cos();
                y += la.cos() * lo.sin();
                z += la.sin();
            }
            let norm = (x * x + y * y + z * z).sqrt();
            if norm < 1e-12 * n {
                return Some(*first);
            }
            let lat = (z / norm).clamp(-1.0, 1.0).asin().to_degrees();
            let lon = y.atan2(x).to_degrees();
            Some(Coordinate {
                lat_or_y: lat.clamp(-90.0, 90.0),
                lon_or_x: lon.clamp(-180.0, 180.0),
                unit: Unit::Deg,
            })
        }
        unit => {
            let y = points.iter().map(|c| c.lat_or_y).sum::<f64>() / n;
            let x = points.iter().map(|c| c.lon_or_x).sum::<f64>() / n;
            Some(Coordinate::planar(y, x, unit))
        }
    }
}

/// One randomized run: the final state and the objective after
/// initialization and after every sweep.
#[derive(Debug, Clone)]
pub struct Trial {
    pub partitioning: Partitioning,
    pub trace: Vec<f64>,
}

fn dist(a: &Coordinate, b: &Coordinate) -> f64 {
    distance(a, b).expect("sites share a unit")
}

fn nearest(site: &Coordinate, centroids: &[Coordinate]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = dist(site, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// Moves the farthest member of the largest cluster into each empty one.
fn repair_empty(
    sites: &[Coordinate],
    assignment: &mut [usize],
    centroids: &mut [Coordinate],
    sizes: &mut [usize],
) {
    while let Some(empty) = sizes.iter().position(|&r| r == 0) {
        let largest = (0..sizes.len())
            .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
            .expect("k >= 1");
        let far = (0..sites.len())
            .filter(|&i| assignment[i] == largest)
            .max_by(|&a, &b| {
                dist(&sites[a], &centroids[largest])
                    .total_cmp(&dist(&sites[b], &centroids[largest]))
                    .then(b.cmp(&a))
            })
            .expect("largest cluster is non-empty");
        assignment[far] = empty;
        centroids[empty] = sites[far];
        sizes[largest] -= 1;
        sizes[empty] += 1;
    }
}

/// Mean location of `members` and their distance sum around it.
fn spread(sites: &[Coordinate], members: &[usize]) -> (Coordinate, f64) {
    let pts: Vec<Coordinate> = members.iter().map(|&i| sites[i]).collect();
    let c = centroid(&pts).expect("cluster is non-empty");
    (c, pts.iter().map(|p| dist(p, &c)).sum())
}

fn members_of(assignment: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut m = vec![Vec::new(); k];
    for (i, &a) in assignment.iter().enumerate() {
        m[a].push(i);
    }
    m
}

/// Largest site count for which pair exchanges are tried while polishing.
const SWAP_LIMIT: usize = 200;

/// Descent on the objective with every centroid at its cluster mean:
/// single-site moves, then (for `lambda > 0`) pair exchanges. Each accepted
/// change lowers the objective by more than a relative `1e-12`.
fn polish(
    sites: &[Coordinate],
    assignment: &mut [usize],
    k: usize,
    lambda: f64,
    trace: &mut Vec<f64>,
) {
    let n = sites.len();
    let target = n as f64 / k as f64;
    let pen = |r: usize| (r as f64 - target).powi(2);
    let mut members = members_of(assignment, k);
    let mut cost: Vec<f64> = members.iter().map(|m| spread(sites, m).1).collect();
    let total = |cost: &[f64], members: &[Vec<usize>]| -> f64 {
        cost.iter().sum::<f64>() + lambda * members.iter().map(|m| pen(m.len())).sum::<f64>()
    };
    let without =
        |m: &[usize], s: usize| -> Vec<usize> { m.iter().copied().filter(|&i| i != s).collect() };
    let with = |m: &[usize], s: usize| -> Vec<usize> {
        let mut v = m.to_vec();
        let at = v.partition_point(|&i| i < s);
        v.insert(at, s);
        v
    };
    for _ in 0..MAX_SWEEPS {
        let mut improved = false;
        for s in 0..n {
            let a = assignment[s];
            if members[a].len() == 1 {
                continue;
            }
            let tol = 1e-12 * total(&cost, &members).abs().max(1.0);
            let rest = without(&members[a], s);
            let rest_cost = spread(sites, &rest).1;
            let mut best: Option<(f64, usize, Vec<usize>, f64)> = None;
            for j in 0..k {
                if j == a {
                    continue;
                }
                let grown = with(&members[j], s);
                let grown_cost = spread(sites, &grown).1;
                let delta = rest_cost + grown_cost - cost[a] - cost[j]
                    + lambda
                        * (pen(rest.len()) + pen(grown.len())
                            - pen(members[a].len())
                            - pen(members[j].len()));
                if delta < -tol && best.as_ref().is_none_or(|b| delta < b.0) {
                    best = Some((delta, j, grown, grown_cost));
                }
            }
            if let Some((_, j, grown, grown_cost)) = best {
                members[a] = rest;
                cost[a] = rest_cost;
                members[j] = grown;
                cost[j] = grown_cost;
                assignment[s] = j;
                improved = true;
            }
        }
        if lambda > 0.0 && n <= SWAP_LIMIT {
            for s in 0..n {
                for u in s + 1..n {
                    let (a, b) = (assignment[s], assignment[u]);
                    if a == b {
                        continue;
                    }
                    let tol = 1e-12 * total(&cost, &members).abs().max(1.0);
                    let ma = with(&without(&members[a], s), u);
                    let mb = with(&without(&members[b], u), s);
                    let (ca, cb) = (spread(sites, &ma).1, spread(sites, &mb).1);
                    if ca + cb - cost[a] - cost[b] < -tol {
                        members[a] = ma;
                        members[b] = mb;
                        cost[a] = ca;
                        cost[b] = cb;
                        assignment[s] = b;
                        assignment[u] = a;
                        improved = true;
                    }
                }
            }
        }
        trace.push(total(&cost, &members));
        if !improved {
            break;
        }
    }
}

/// Runs one trial from the given seed.
pub fn run_trial(sites: &[Coordinate], k: usize, lambda: f64, seed: u64) -> Result<Trial> {
    let n = sites.len();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("k = {k} must be in 1..={n}")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Argument("lambda must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Coordinate> = sample(&mut rng, n, k)
        .into_iter()
        .map(|i| sites[i])
        .collect();
    let mut assignment: Vec<usize> = sites.iter().map(|s| nearest(s, &centroids)).collect();
    let mut sizes = sizes_of(&assignment, k);
    repair_empty(sites, &mut assignment, &mut centroids, &mut sizes);
    let target = n as f64 / k as f64;
    let mut trace = vec![objective(sites, &assignment, &centroids, lambda)?];

    for _ in 0..MAX_SWEEPS {
        let mut changed = false;
        // Centroid step.
        for (j, m) in members_of(&assignment, k).iter().enumerate() {
            let pts: Vec<Coordinate> = m.iter().map(|&i| sites[i]).collect();
            if let Some(c) = centroid(&pts) {
                if c != centroids[j] {
                    centroids[j] = c;
                    changed = true;
                }
            }
        }
        // Assignment step: single-site moves against the size penalty.
        for s in 0..n {
            let a = assignment[s];
            sizes[a] -= 1;
            let mut best = a;
            let mut best_cost = f64::INFINITY;
            for j in 0..k {
                let r = sizes[j] as f64;
                let cost = dist(&sites[s], &centroids[j])
                    + lambda * ((r + 1.0 - target).powi(2) - (r - target).powi(2));
                if cost < best_cost {
                    best = j;
                    best_cost = cost;
                }
            }
            sizes[best] += 1;
            if best != a {
                assignment[s] = best;
                changed = true;
            }
        }
        // Size-preserving exchanges.
        if lambda > 0.0 && k > 1 {
            let d: Vec<Vec<f64>> = sites
                .iter()
                .map(|s| centroids.iter().map(|c| dist(s, c)).collect())
                .collect();
            for s in 0..n {
                for u in s + 1..n {
                    let (a, b) = (assignment[s], assignment[u]);
                    if a == b {
                        continue;
                    }
                    if d[s][b] + d[u][a] - d[s][a] - d[u][b] < -1e-12 {
                        assignment[s] = b;
                        assignment[u] = a;
                        changed = true;
                    }
                }
            }
        }
        repair_empty(sites, &mut assignment, &mut centroids, &mut sizes);
        trace.push(objective(sites, &assignment, &centroids, lambda)?);
        if !changed {
            break;
        }
    }
    if k > 1 {
        polish(sites, &mut assignment, k, lambda, &mut trace);
    }
    let centroids: Vec<Coordinate> = members_of(&assignment, k)
        .iter()
        .map(|m| spread(sites, m).0)
        .collect();
    let objective = objective(sites, &assignment, &centroids, lambda)?;
    Ok(Trial {
        partitioning: Partitioning {
            k,
            sizes: sizes_of(&assignment, k),
            assignment,
            centroids,
            objective,
        },
        trace,
    })
}

/// Best of `trials` randomized runs; trial `i` is seeded with `seed + i`.
/// Ties go to the lowest trial index.
pub fn fit_kmeans(
    sites: &[Coordinate],
    k: usize,
    lambda: f64,
    trials: usize,
    seed: u64,
    exec: &Executor,
) -> Result<Partitioning> {
    if trials == 0 {
        return Err(Error::Argument("trials must be at least 1".into()));
    }
    if k == 0 || k > sites.len() {
        return Err(Error::Argument(format!(
            "k = {k} must be in 1..={}",
            sites.len()
        )));
    }
    let runs = exec.map_range(trials, |i| {
        run_trial(sites, k, lambda, seed.wrapping_add(i as u64))
    });
    let mut best: Option<Partitioning> = None;
    for r in runs {
        let p = r?.partitioning;
        if best.as_ref().is_none_or(|b| p.objective < b.objective) {
            best = Some(p);
        }
    }
    Ok(best.expect("trials >= 1"))
}

/// A site-disjoint piece of a dataset.
#[derive(Debug, Clone)]
pub struct Block {
    /// Indices into the parent dataset's sites, ascending.
    pub sites: Vec<usize>,
    pub dataset: ProfileDataset,
}

pub fn partition_dataset(ds: &ProfileDataset, part: &Partitioning) -> Result<Vec<Block>> {
    if part.assignment.len() != ds.n_sites() {
        return Err(Error::Argument(format!(
            "partitioning covers {} sites, dataset has {}",
            part.assignment.len(),
            ds.n_sites()
        )));
    }
    Ok(part
        .members()
        .into_iter()
        .map(|sites| Block {
            dataset: ds.subset_sites(&sites),
            sites,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> Vec<Coordinate> {
        xs.iter()
            .map(|&x| Coordinate::planar(0.0, x, Unit::Km))
            .collect()
    }

    #[test]
    fn objective_examples() {
        let one = line(&[3.0]);
        assert_eq!(objective(&one, &[0], &one, 0.0).unwrap(), 0.0);

        let pts = line(&[0.0, 1.0, 10.0, 11.0]);
        let cs = line(&[0.5, 10.5]);
        assert_eq!(objective(&pts, &[0, 0, 1, 1], &cs, 0.0).unwrap(), 2.0);
        assert_eq!(objective(&pts, &[0, 0, 1, 1], &cs, 5000.0).unwrap(), 2.0);
        assert_eq!(
            objective(&pts, &[0, 0, 0, 1], &cs, 1.0).unwrap(),
            0.5 + 0.5 + 9.5 + 0.5 + 2.0
        );
    }

    #[test]
    fn two_far_pairs() {
        let pts = line(&[0.0, 1.0, 10.0, 11.0]);
        let p = fit_kmeans(&pts, 2, 0.0, 5, 1, &Executor::sequential()).unwrap();
        let mut sizes = p.sizes.clone();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2]);
        assert!((p.objective - 2.0).abs() < 1e-12);
    }

    #[test]
    fn k_equals_n() {
        let pts = line(&[0.0, 2.0, 7.0]);
        let p = fit_kmeans(&pts, 3, 1.0, 3, 0, &Executor::sequential()).unwrap();
        assert_eq!(p.sizes, vec![1, 1, 1]);
        assert_eq!(p.objective, 0.0);
    }

    #[test]
    fn argument_errors() {
        let pts = line(&[0.0, 1.0]);
        let ex = Executor::sequential();
        assert!(fit_kmeans(&pts, 3, 0.0, 1, 0, &ex).is_err());
        assert!(fit_kmeans(&pts, 1, 0.0, 0, 0, &ex).is_err());
        assert!(fit_kmeans(&pts, 1, -1.0, 1, 0, &ex).is_err());
    }

    #[test]
    fn spherical_centroid_of_symmetric_pair() {
        let c = centroid(&[Coordinate::deg(10.0, 20.0), Coordinate::deg(-10.0, 20.0)]).unwrap();
        assert!(c.lat_or_y.abs() < 1e-12);
        assert!((c.lon_or_x - 20.0).abs() < 1e-12);
    }

    #[test]
    fn trials_are_deterministic_across_workers() {
        let pts: Vec<Coordinate> = (0..40)
            .map(|i| {
                Coordinate::deg(
                    (i as f64 * 7.3) % 60.0 - 30.0,
                    (i as f64 * 13.1) % 300.0 - 150.0,
                )
            })
            .collect();
        let a = fit_kmeans(&pts, 4, 0.01, 8, 42, &Executor::sequential()).unwrap();
        let b = fit_kmeans(&pts, 4, 0.01, 8, 42, &Executor::new(3)).unwrap();
        assert_eq!(a, b);
    }
}
