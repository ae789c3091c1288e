//! Distances and the spatial covariance of the latent innovations.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::ingest::{Coordinate, Unit};

/// Mean Earth radius in km, for converting central angles to lengths.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Great-circle central angle in degrees for `Unit::Deg` (haversine form),
/// Euclidean distance in the coordinate unit otherwise.
pub fn distance(a: &Coordinate, b: &Coordinate) -> Result<f64> {
    if a.unit != b.unit {
        return Err(Error::Unit(a.unit.to_string(), b.unit.to_string()));
    }
    Ok(match a.unit {
        Unit::Deg => haversine_deg(a.lat_or_y, a.lon_or_x, b.lat_or_y, b.lon_or_x),
        Unit::Km | Unit::M => (a.lat_or_y - b.lat_or_y).hypot(a.lon_or_x - b.lon_or_x),
    })
}

fn haversine_deg(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    (2.0 * a.clamp(0.0, 1.0).sqrt().asin()).to_degrees()
}

/// Symmetric matrix of pairwise distances.
pub fn distance_matrix(sites: &[Coordinate]) -> Result<DMatrix<f64>> {
    let n = sites.len();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = distance(&sites[i], &sites[j])?;
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(d)
}

/// Distances from `targets` (rows) to `sites` (columns).
pub fn cross_distances(targets: &[Coordinate], sites: &[Coordinate]) -> Result<DMatrix<f64>> {
    let mut d = DMatrix::zeros(targets.len(), sites.len());
    for (i, a) in targets.iter().enumerate() {
        for (j, b) in sites.iter().enumerate() {
            d[(i, j)] = distance(a, b)?;
        }
    }
    Ok(d)
}

pub fn max_distance(d: &DMatrix<f64>) -> f64 {
    d.iter().copied().fold(0.0, f64::max)
}

/// Spatial correlation families. Only the exponential family is provided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Correlation {
    #[default]
    Exponential,
}

impl Correlation {
    pub fn eval(self, d: f64, theta: f64) -> f64 {
        match self {
            Correlation::Exponential => exp_correlation(d, theta),
        }
    }
}

/// `exp(-d / theta)`.
pub fn exp_correlation(d: f64, theta: f64) -> f64 {
    debug_assert!(d >= 0.0 && theta > 0.0);
    (-d / theta).exp()
}

/// Correlation matrix `exp(-D / theta)`.
pub fn correlation_matrix(d: &DMatrix<f64>, theta: f64) -> DMatrix<f64> {
    d.map(|x| exp_correlation(x, theta))
}

/// Per-basis innovation variances `v` and ranges `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialParams {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

impl SpatialParams {
    pub fn new(v: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        if v.len() != theta.len() || v.is_empty() {
            return Err(Error::Argument(
                "v and theta must be non-empty and of equal length".into(),
            ));
        }
        if v.iter().chain(&theta).any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::Argument(
                "v and theta entries must be positive and finite".into(),
            ));
        }
        Ok(SpatialParams { v, theta })
    }

    pub fn p(&self) -> usize {
        self.v.len()
    }
}

/// The `p` blocks `v_j * exp(-D / theta_j)`, one `n x n` matrix per basis
/// function. Fails if two distinct sites are at zero distance.
pub fn innovation_covariance(d: &DMatrix<f64>, sp: &SpatialParams) -> Result<Vec<DMatrix<f64>>> {
    let n = d.nrows();
    for i in 0..n {
        for j in 0..i {
            if !(d[(i, j)] > 0.0) {
                return Err(Error::Degenerate(format!(
                    "sites {j} and {i} coincide; covariance would be singular"
                )));
            }
        }
    }
    Ok(sp
        .v
        .iter()
        .zip(&sp.theta)
        .map(|(&v, &theta)| correlation_matrix(d, theta) * v)
        .collect())
}

/// Assembles the `np x np` covariance in site-major order (state index
/// `i * p + j` for site `i`, basis `j`) from per-basis blocks.
pub fn site_major(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let p = blocks.len();
    let n = blocks.first().map_or(0, |b| b.nrows());
    let mut out = DMatrix::zeros(n * p, n * p);
    for (j, b) in blocks.iter().enumerate() {
        for i in 0..n {
            for k in 0..n {
                out[(i * p + j, k * p + j)] = b[(i, k)];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn canonical_distances() {
        let d = |a: Coordinate, b: Coordinate| distance(&a, &b).unwrap();
        assert!(close(
            d(Coordinate::deg(0.0, 0.0), Coordinate::deg(0.0, 90.0)),
            90.0,
            1e-12
        ));
        assert!(close(
            d(Coordinate::deg(90.0, 0.0), Coordinate::deg(-90.0, 0.0)),
            180.0,
            1e-12
        ));
        let a = Coordinate::planar(0.0, 0.0, Unit::Km);
        let b = Coordinate::planar(3.0, 4.0, Unit::Km);
        assert_eq!(d(a, b), 5.0);
        assert!(distance(&a, &Coordinate::deg(0.0, 0.0)).is_err());
    }

    #[test]
    fn haversine_agrees_with_spherical_law_of_cosines() {
        let (lat1, lon1, lat2, lon2) = (40.0f64, 116.0f64, 39.4f64, 115.4f64);
        let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
        let dl = (lon2 - lon1).to_radians();
        let cos_c = p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos();
        let oracle = cos_c.clamp(-1.0, 1.0).acos().to_degrees();
        let got = distance(&Coordinate::deg(lat1, lon1), &Coordinate::deg(lat2, lon2)).unwrap();
        assert!(close(got, oracle, 1e-9), "{got} vs {oracle}");
    }

    #[test]
    fn exponential_values() {
        assert_eq!(exp_correlation(0.0, 2.0), 1.0);
        assert!(close(exp_correlation(2.0, 2.0), 0.367879441171, 1e-9));
        assert!(close(exp_correlation(6.0, 2.0), 0.049787068368, 1e-9));
        assert!(exp_correlation(1.0, 1.0) > exp_correlation(1.1, 1.0));
        assert!(exp_correlation(1.0, 1.1) > exp_correlation(1.0, 1.0));
    }

    #[test]
    fn covariance_blocks() {
        let sp = SpatialParams::new(vec![10.0, 2.0], vec![1.5, 0.5]).unwrap();
        let one = innovation_covariance(&DMatrix::zeros(1, 1), &sp).unwrap();
        assert_eq!(one.len(), 2);
        assert_eq!(one[0][(0, 0)], 10.0);
        assert_eq!(one[1][(0, 0)], 2.0);

        let d = DMatrix::from_row_slice(2, 2, &[0.0, 1.5, 1.5, 0.0]);
        let two = innovation_covariance(&d, &sp).unwrap();
        assert!(close(two[0][(0, 1)], 10.0 * (-1.0f64).exp(), 1e-12));
        assert_eq!(two[0][(1, 1)], 10.0);

        let dup = DMatrix::zeros(2, 2);
        assert!(matches!(
            innovation_covariance(&dup, &sp),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn params_validation() {
        assert!(SpatialParams::new(vec![1.0], vec![0.0]).is_err());
        assert!(SpatialParams::new(vec![1.0, 2.0], vec![1.0]).is_err());
        assert!(SpatialParams::new(vec![f64::INFINITY], vec![1.0]).is_err());
    }
}
