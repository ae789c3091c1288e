//! Building library inputs from the effective configuration.

use std::path::{Path, PathBuf};

use fhdgm::basis::{BasisSpec, BasisTriple};
use fhdgm::estimation::ModelParams;
use fhdgm::ingest::{parse_csv, ProfileDataset, Schema, Unit};
use fhdgm::spatial::SpatialParams;
use nalgebra::DVector;

use crate::config::Config;
use crate::error::{CliError, Result};

pub fn unit(cfg: &Config) -> Result<Unit> {
    Ok(cfg.str("data.unit").unwrap_or("km").parse::<Unit>()?)
}

pub fn domain(cfg: &Config) -> Result<(f64, f64)> {
    let d: Vec<f64> = cfg
        .list("data.domain")?
        .ok_or_else(|| CliError::Usage("missing required setting `data.domain`".into()))?;
    match d[..] {
        [lo, hi] if lo < hi => Ok((lo, hi)),
        _ => Err(CliError::Usage(
            "`data.domain` must be `lo, hi` with lo < hi".into(),
        )),
    }
}

pub fn out_dir(cfg: &Config) -> Result<PathBuf> {
    let dir = PathBuf::from(cfg.str("run.out").unwrap_or("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn seed(cfg: &Config) -> Result<u64> {
    cfg.get_or("run.seed", 0)
}

/// `run.workers`, then `FHDGM_WORKERS`, then 1.
pub fn workers(cfg: &Config) -> Result<usize> {
    match cfg.get::<usize>("run.workers")? {
        Some(0) => Err(CliError::Usage("`run.workers` must be at least 1".into())),
        Some(w) => Ok(w),
        None => Ok(fhdgm::exec::workers_from_env()),
    }
}

fn one_basis(cfg: &Config, key: &str, p: usize, range: (f64, f64)) -> Result<BasisSpec> {
    if p == 0 {
        return Err(CliError::Usage(format!("`{key}` must be at least 1")));
    }
    if p == 1 {
        return Ok(BasisSpec::constant(range)?);
    }
    let kind = cfg.str("basis.kind").unwrap_or("bspline");
    match kind {
        "fourier" => Ok(BasisSpec::fourier(range, p)?),
        "bspline" => {
            let order: usize = cfg.get_or("basis.order", 2)?;
            if let Some(knots) = cfg.list::<f64>("basis.knots")? {
                let spec = BasisSpec::bspline(range, order, knots)?;
                if spec.count() != p {
                    return Err(CliError::Usage(format!(
                        "`basis.knots` give {} functions but `{key}` is {p}",
                        spec.count()
                    )));
                }
                Ok(spec)
            } else if p + 2 > order + 1 {
                Ok(BasisSpec::bspline_equispaced(range, order, p + 2 - order)?)
            } else {
                Err(CliError::Usage(format!(
                    "`{key}` = {p} is too small for order {order}"
                )))
            }
        }
        other => Err(CliError::Usage(format!(
            "unknown basis kind `{other}` (expected bspline or fourier)"
        ))),
    }
}

pub fn bases(cfg: &Config) -> Result<BasisTriple> {
    let range = match cfg.list::<f64>("basis.range")? {
        Some(r) if r.len() == 2 => (r[0], r[1]),
        Some(_) => return Err(CliError::Usage("`basis.range` must be `lo, hi`".into())),
        None => domain(cfg)?,
    };
    let z = one_basis(cfg, "basis.p_z", cfg.get_or("basis.p_z", 2)?, range)?;
    let beta = one_basis(cfg, "basis.p_beta", cfg.get_or("basis.p_beta", 2)?, range)?;
    let sigma = one_basis(cfg, "basis.p_sigma", cfg.get_or("basis.p_sigma", 1)?, range)?;
    Ok(BasisTriple::new(z, beta, sigma)?)
}

pub fn schema(cfg: &Config) -> Result<Schema> {
    let mut s = Schema::new(unit(cfg)?, domain(cfg)?);
    for (key, field) in [
        ("data.column.y", &mut s.y),
        ("data.column.h", &mut s.h),
        ("data.column.time", &mut s.time),
        ("data.column.coord_y", &mut s.coord_y),
        ("data.column.coord_x", &mut s.coord_x),
        ("data.covariate_prefix", &mut s.covariate_prefix),
    ] {
        if let Some(v) = cfg.str(key) {
            *field = v.to_string();
        }
    }
    Ok(s)
}

pub fn load_data(cfg: &Config) -> Result<ProfileDataset> {
    let path = cfg.require_str("data.path")?;
    if !Path::new(path).is_file() {
        return Err(CliError::Usage(format!("data file {path} does not exist")));
    }
    let parsed = parse_csv(path, &schema(cfg)?)?;
    if parsed.dropped_profiles > 0 {
        eprintln!(
            "warning: {} profile(s) with no observed values were dropped",
            parsed.dropped_profiles
        );
    }
    Ok(parsed.dataset)
}

/// Parameters listed by `simulate.c_eps`, `simulate.c_beta`, `simulate.g`,
/// `simulate.v` and `simulate.theta`.
pub fn simulation_params(cfg: &Config) -> Result<ModelParams> {
    let get = |k: &str| -> Result<Vec<f64>> {
        cfg.list(k)?
            .ok_or_else(|| CliError::Usage(format!("missing required setting `{k}`")))
    };
    Ok(ModelParams::new(
        DVector::from_vec(get("simulate.c_eps")?),
        DVector::from_vec(get("simulate.c_beta")?),
        DVector::from_vec(get("simulate.g")?),
        SpatialParams::new(get("simulate.v")?, get("simulate.theta")?)?,
    )?)
}

pub fn write_params(path: &Path, params: &ModelParams, covariates: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["name", "index", "estimate"])?;
    for (label, value) in params.labels(covariates).iter().zip(params.to_vec()) {
        w.write_record([
            label.name.clone(),
            label.index.to_string(),
            value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a parameter table and checks its covariates against `covariates`.
pub fn read_params(path: &Path, covariates: &[String]) -> Result<ModelParams> {
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "parameter file {} does not exist",
            path.display()
        )));
    }
    let mut r = csv::Reader::from_path(path)?;
    let (mut c_eps, mut c_beta, mut g, mut v, mut theta) = (vec![], vec![], vec![], vec![], vec![]);
    let mut names: Vec<String> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let value: f64 = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| {
            CliError::Usage(format!("{}: malformed row {:?}", path.display(), rec))
        })?;
        match rec.get(0).unwrap_or("") {
            "c_eps" => c_eps.push(value),
            "g" => g.push(value),
            "v" => v.push(value),
            "theta" => theta.push(value),
            other => match other.strip_prefix("c_beta:") {
                Some(name) => {
                    if names.last().map(String::as_str) != Some(name) {
                        names.push(name.to_string());
                    }
                    c_beta.push(value);
                }
                None => {
                    return Err(CliError::Usage(format!(
                        "{}: unknown parameter `{other}`",
                        path.display()
                    )))
                }
            },
        }
    }
    if names != covariates {
        return Err(CliError::Usage(format!(
            "parameter covariates {names:?} differ from the data covariates {covariates:?}"
        )));
    }
    Ok(ModelParams::new(
        DVector::from_vec(c_eps),
        DVector::from_vec(c_beta),
        DVector::from_vec(g),
        SpatialParams::new(v, theta)?,
    )?)
}
