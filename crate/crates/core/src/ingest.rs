//! Profile data: coordinates, per-(site, time) records and CSV I/O.
//!
//! Input is long format, one measurement per row. Rows are grouped by
//! (coordinate pair, time) into profiles. Site identity is exact: two
//! coordinates name the same site only if both values are bitwise equal.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime};

use crate::error::{Error, Result};
use crate::spatial;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Unit {
    Deg,
    Km,
    M,
}

impl Unit {
    pub fn is_geodetic(self) -> bool {
        self == Unit::Deg
    }
}

impl FromStr for Unit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "deg" => Ok(Unit::Deg),
            "km" => Ok(Unit::Km),
            "m" => Ok(Unit::M),
            other => Err(Error::Argument(format!(
                "unknown coordinate unit `{other}` (expected deg, km or m)"
            ))),
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Unit::Deg => "deg",
            Unit::Km => "km",
            Unit::M => "m",
        })
    }
}

/// A site location. For `Unit::Deg` the first value is latitude and the
/// second longitude; otherwise they are planar y and x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coordinate {
    pub lat_or_y: f64,
    pub lon_or_x: f64,
    pub unit: Unit,
}

impl Coordinate {
    pub fn new(lat_or_y: f64, lon_or_x: f64, unit: Unit) -> Result<Self> {
        if !lat_or_y.is_finite() || !lon_or_x.is_finite() {
            return Err(Error::Argument("coordinates must be finite".into()));
        }
        if unit == Unit::Deg
            && (!(-90.0..=90.0).contains(&lat_or_y) || !(-180.0..=180.0).contains(&lon_or_x))
        {
            return Err(Error::Argument(format!(
                "({lat_or_y}, {lon_or_x}) is not a valid latitude/longitude pair"
            )));
        }
        Ok(Coordinate {
            lat_or_y,
            lon_or_x,
            unit,
        })
    }

    pub fn deg(lat: f64, lon: f64) -> Self {
        Coordinate::new(lat, lon, Unit::Deg).expect("valid lat/lon")
    }

    pub fn planar(y: f64, x: f64, unit: Unit) -> Self {
        Coordinate {
            lat_or_y: y,
            lon_or_x: x,
            unit,
        }
    }

    fn key(&self) -> (u64, u64) {
        (self.lat_or_y.to_bits(), self.lon_or_x.to_bits())
    }
}

/// Measurements taken at one site and time.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRecord {
    /// Index into `ProfileDataset::sites`.
    pub site: usize,
    /// 1-based time index.
    pub time: usize,
    pub h: Vec<f64>,
    /// `NaN` marks a missing measurement.
    pub y: Vec<f64>,
    /// One sequence per covariate, each the length of `h`.
    pub covariates: Vec<Vec<f64>>,
}

impl ProfileRecord {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn observed(&self) -> usize {
        self.y.iter().filter(|v| !v.is_nan()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileDataset {
    /// Sorted by (site, time).
    pub records: Vec<ProfileRecord>,
    pub sites: Vec<Coordinate>,
    /// Number of time steps; every record has `1 <= time <= t_len`.
    pub t_len: usize,
    pub domain: (f64, f64),
    pub covariate_names: Vec<String>,
    pub units: BTreeMap<String, String>,
    pub unit: Unit,
    /// Site index in the dataset this one was derived from, per local site.
    pub source_sites: Vec<usize>,
}

impl ProfileDataset {
    /// Validates and normalizes a dataset. Records whose measurements are
    /// all missing are dropped; the number dropped is returned alongside.
    pub fn new(
        sites: Vec<Coordinate>,
        mut records: Vec<ProfileRecord>,
        t_len: usize,
        domain: (f64, f64),
        covariate_names: Vec<String>,
        unit: Unit,
    ) -> Result<(Self, usize)> {
        if !(domain.0 < domain.1) {
            return Err(Error::Argument(format!(
                "functional domain [{}, {}] is empty",
                domain.0, domain.1
            )));
        }
        if sites.iter().any(|c| c.unit != unit) {
            return Err(Error::Argument(
                "all sites must share the dataset unit".into(),
            ));
        }
        let b = covariate_names.len();
        let before = records.len();
        records.retain(|r| r.observed() > 0);
        let dropped = before - records.len();
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if r.site >= sites.len() {
                return Err(Error::Argument(format!(
                    "record site {} out of range",
                    r.site
                )));
            }
            if r.time == 0 || r.time > t_len {
                return Err(Error::Argument(format!(
                    "record time {} outside 1..={t_len}",
                    r.time
                )));
            }
            if r.y.len() != r.h.len() || r.covariates.len() != b {
                return Err(Error::Argument(
                    "record sequences have inconsistent lengths".into(),
                ));
            }
            if r.covariates.iter().any(|c| c.len() != r.h.len()) {
                return Err(Error::Argument(
                    "covariate length differs from profile length".into(),
                ));
            }
            if let Some(&h) = r.h.iter().find(|&&h| !(h >= domain.0 && h <= domain.1)) {
                return Err(Error::Domain {
                    h,
                    lo: domain.0,
                    hi: domain.1,
                });
            }
            if r.covariates.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Argument("covariates must be finite".into()));
            }
            if !seen.insert((r.site, r.time)) {
                return Err(Error::Argument(format!(
                    "two profiles for site {} at time {}",
                    r.site, r.time
                )));
            }
        }
        check_distinct(&sites)?;
        records.sort_by_key(|r| (r.site, r.time));
        let n = sites.len();
        Ok((
            ProfileDataset {
                records,
                sites,
                t_len,
                domain,
                covariate_names,
                units: BTreeMap::new(),
                unit,
                source_sites: (0..n).collect(),
            },
            dropped,
        ))
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    /// Record indices grouped by time; entry `t - 1` lists records at time `t`.
    pub fn by_time(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.t_len];
        for (i, r) in self.records.iter().enumerate() {
            out[r.time - 1].push(i);
        }
        out
    }

    pub fn n_observations(&self) -> usize {
        self.records.iter().map(|r| r.observed()).sum()
    }

    /// Keeps only the listed sites, re-based in the given order.
    pub fn subset_sites(&self, keep: &[usize]) -> ProfileDataset {
        let mut remap = vec![usize::MAX; self.sites.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let mut records: Vec<ProfileRecord> = self
            .records
            .iter()
            .filter(|r| remap[r.site] != usize::MAX)
            .map(|r| ProfileRecord {
                site: remap[r.site],
                ..r.clone()
            })
            .collect();
        records.sort_by_key(|r| (r.site, r.time));
        ProfileDataset {
            records,
            sites: keep.iter().map(|&i| self.sites[i]).collect(),
            t_len: self.t_len,
            domain: self.domain,
            covariate_names: self.covariate_names.clone(),
            units: self.units.clone(),
            unit: self.unit,
            source_sites: keep.iter().map(|&i| self.source_sites[i]).collect(),
        }
    }

    /// Fraction of measurements missing at each time, counting a site with
    /// no profile at `t` as fully missing with the site's typical length.
    pub fn missing_rate_by_time(&self) -> Vec<f64> {
        let n = self.n_sites().max(1);
        let mut obs = vec![0usize; self.t_len];
        let mut tot = vec![0usize; self.t_len];
        for r in &self.records {
            obs[r.time - 1] += r.observed();
            tot[r.time - 1] += r.len();
        }
        let avg_len = if self.records.is_empty() {
            1.0
        } else {
            self.records.iter().map(|r| r.len()).sum::<usize>() as f64 / self.records.len() as f64
        };
        (0..self.t_len)
            .map(|t| {
                let expected = (n as f64 * avg_len).max(tot[t] as f64);
                1.0 - obs[t] as f64 / expected
            })
            .collect()
    }
}

fn check_distinct(sites: &[Coordinate]) -> Result<()> {
    for i in 0..sites.len() {
        for j in 0..i {
            let d = spatial::distance(&sites[i], &sites[j])?;
            if !(d > 0.0) {
                return Err(Error::Degenerate(format!(
                    "sites {j} and {i} are at zero distance"
                )));
            }
        }
    }
    Ok(())
}

/// Column mapping and declared metadata for CSV input.
#[derive(Debug, Clone)]
pub struct Schema {
    pub y: String,
    pub h: String,
    pub time: String,
    pub coord_y: String,
    pub coord_x: String,
    /// Columns starting with this prefix are covariates, in header order.
    pub covariate_prefix: String,
    pub unit: Unit,
    pub domain: (f64, f64),
    pub units: BTreeMap<String, String>,
}

impl Schema {
    pub fn new(unit: Unit, domain: (f64, f64)) -> Self {
        Schema {
            y: "y".into(),
            h: "h".into(),
            time: "time".into(),
            coord_y: "coord_y".into(),
            coord_x: "coord_x".into(),
            covariate_prefix: "x_beta_".into(),
            unit,
            domain,
            units: BTreeMap::new(),
        }
    }
}

/// A parsed dataset plus the number of (site, time) groups removed because
/// every measurement in them was missing.
#[derive(Debug, Clone)]
pub struct Parsed {
    pub dataset: ProfileDataset,
    pub dropped_profiles: usize,
}

pub fn parse_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Parsed> {
    let file = std::fs::File::open(path)?;
    parse_csv_reader(file, schema)
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("nan")
}

fn parse_num(cell: &str, row: usize, col: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        row,
        msg: format!("column `{col}`: `{cell}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            msg: format!("column `{col}`: `{cell}` is not finite"),
        });
    }
    Ok(v)
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum TimeKey {
    Index(i64),
    Stamp(NaiveDateTime),
}

fn parse_time(cell: &str, row: usize) -> Result<TimeKey> {
    let c = cell.trim();
    if let Ok(i) = c.parse::<i64>() {
        return Ok(TimeKey::Index(i));
    }
    if let Ok(d) = NaiveDate::parse_from_str(c, "%Y-%m-%d") {
        return Ok(TimeKey::Stamp(d.and_hms_opt(0, 0, 0).expect("midnight")));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(c, fmt) {
            return Ok(TimeKey::Stamp(dt));
        }
    }
    Err(Error::Parse {
        row,
        msg: format!("`{c}` is neither an integer time index nor an ISO-8601 date"),
    })
}

struct RawRow {
    line: usize,
    coord: Coordinate,
    time: TimeKey,
    h: f64,
    y: f64,
    x: Vec<f64>,
}

pub fn parse_csv_reader<R: Read>(reader: R, schema: &Schema) -> Result<Parsed> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse {
                row: 1,
                msg: format!("missing column `{name}`"),
            })
    };
    let (cy, cx, ct, ch, cv) = (
        col(&schema.coord_y)?,
        col(&schema.coord_x)?,
        col(&schema.time)?,
        col(&schema.h)?,
        col(&schema.y)?,
    );
    let cov_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            h.strip_prefix(schema.covariate_prefix.as_str())
                .filter(|s| !s.is_empty())
                .map(|s| (i, s.to_string()))
        })
        .collect();

    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let get = |i: usize| rec.get(i).unwrap_or("");
        let lat = parse_num(get(cy), line, &schema.coord_y)?;
        let lon = parse_num(get(cx), line, &schema.coord_x)?;
        let coord = Coordinate::new(lat, lon, schema.unit).map_err(|e| Error::Parse {
            row: line,
            msg: e.to_string(),
        })?;
        let time = parse_time(get(ct), line)?;
        let h = parse_num(get(ch), line, &schema.h)?;
        if !(h >= schema.domain.0 && h <= schema.domain.1) {
            return Err(Error::Domain {
                h,
                lo: schema.domain.0,
                hi: schema.domain.1,
            });
        }
        let ycell = get(cv);
        let y = if is_missing(ycell) {
            f64::NAN
        } else {
            parse_num(ycell, line, &schema.y)?
        };
        let mut x = Vec::with_capacity(cov_cols.len());
        for (i, name) in &cov_cols {
            let cell = get(*i);
            if is_missing(cell) {
                return Err(Error::CovariateMissing {
                    row: line,
                    name: name.clone(),
                });
            }
            x.push(parse_num(cell, line, name)?);
        }
        rows.push(RawRow {
            line,
            coord,
            time,
            h,
            y,
            x,
        });
    }

    // Time keys: integers are used as-is, dates map to 1..T by sorted value.
    let has_index = rows.iter().any(|r| matches!(r.time, TimeKey::Index(_)));
    let has_stamp = rows.iter().any(|r| matches!(r.time, TimeKey::Stamp(_)));
    if has_index && has_stamp {
        let row = rows
            .iter()
            .find(|r| matches!(r.time, TimeKey::Stamp(_)))
            .map(|r| r.line)
            .unwrap_or(0);
        return Err(Error::Parse {
            row,
            msg: "time column mixes integer indices and dates".into(),
        });
    }
    let time_of: HashMap<TimeKey, usize> = if has_stamp {
        let mut keys: Vec<TimeKey> = rows.iter().map(|r| r.time.clone()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .enumerate()
            .map(|(i, k)| (k, i + 1))
            .collect()
    } else {
        let mut map = HashMap::new();
        for r in &rows {
            if let TimeKey::Index(i) = r.time {
                if i < 1 {
                    return Err(Error::Parse {
                        row: r.line,
                        msg: format!("time index {i} must be >= 1"),
                    });
                }
                map.insert(r.time.clone(), i as usize);
            }
        }
        map
    };
    let t_len = time_of.values().copied().max().unwrap_or(0);

    // Group by (site, time), keeping first-appearance order of sites.
    let mut groups: Vec<((u64, u64), usize, Coordinate, Vec<&RawRow>)> = Vec::new();
    let mut group_of: HashMap<((u64, u64), usize), usize> = HashMap::new();
    for r in &rows {
        let t = time_of[&r.time];
        let key = (r.coord.key(), t);
        let gi = *group_of.entry(key).or_insert_with(|| {
            groups.push((r.coord.key(), t, r.coord, Vec::new()));
            groups.len() - 1
        });
        let g = &mut groups[gi].3;
        if g.iter().any(|o| o.h.to_bits() == r.h.to_bits()) {
            return Err(Error::Duplicate { row: r.line });
        }
        g.push(r);
    }

    let mut dropped = 0;
    let mut site_of: HashMap<(u64, u64), usize> = HashMap::new();
    let mut sites = Vec::new();
    let mut records = Vec::new();
    for (key, t, coord, members) in groups {
        if members.iter().all(|r| r.y.is_nan()) {
            dropped += 1;
            continue;
        }
        let site = *site_of.entry(key).or_insert_with(|| {
            sites.push(coord);
            sites.len() - 1
        });
        let b = cov_cols.len();
        records.push(ProfileRecord {
            site,
            time: t,
            h: members.iter().map(|r| r.h).collect(),
            y: members.iter().map(|r| r.y).collect(),
            covariates: (0..b)
                .map(|j| members.iter().map(|r| r.x[j]).collect())
                .collect(),
        });
    }
    if dropped > 0 {
        log::warn!("{dropped} profile(s) with no observed values were removed");
    }
    let names = cov_cols.into_iter().map(|(_, n)| n).collect();
    let (mut dataset, _) =
        ProfileDataset::new(sites, records, t_len, schema.domain, names, schema.unit)?;
    dataset.units = schema.units.clone();
    Ok(Parsed {
        dataset,
        dropped_profiles: dropped,
    })
}

/// Writes the dataset in the canonical long format.
pub fn write_csv<W: Write>(ds: &ProfileDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "coord_y".to_string(),
        "coord_x".into(),
        "time".into(),
        "h".into(),
        "y".into(),
    ];
    header.extend(ds.covariate_names.iter().map(|n| format!("x_beta_{n}")));
    w.write_record(&header)?;
    for r in &ds.records {
        let c = ds.sites[r.site];
        for k in 0..r.len() {
            let mut row = vec![
                c.lat_or_y.to_string(),
                c.lon_or_x.to_string(),
                r.time.to_string(),
                r.h[k].to_string(),
                if r.y[k].is_nan() {
                    "NaN".to_string()
                } else {
                    r.y[k].to_string()
                },
            ];
            row.extend(r.covariates.iter().map(|x| x[k].to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(ds: &ProfileDataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv(ds, std::fs::File::create(path)?)
}

/// 0-based index of the site with exactly this coordinate.
pub fn site_index(ds: &ProfileDataset, c: &Coordinate) -> Result<usize> {
    ds.sites
        .iter()
        .position(|s| s.key() == c.key() && s.unit == c.unit)
        .ok_or(Error::Lookup(c.lat_or_y, c.lon_or_x))
}

/// Splits sites into estimation and validation subsets. Both outputs carry
/// `source_sites`, mapping their local indices back to `ds`.
pub fn split_validation(
    ds: &ProfileDataset,
    val_sites: &[usize],
) -> Result<(ProfileDataset, ProfileDataset)> {
    let n = ds.n_sites();
    if val_sites.is_empty() {
        return Err(Error::Split("no validation sites given".into()));
    }
    let mut is_val = vec![false; n];
    for &s in val_sites {
        if s >= n {
            return Err(Error::Split(format!("site {s} out of range (n = {n})")));
        }
        if is_val[s] {
            return Err(Error::Split(format!("site {s} listed twice")));
        }
        is_val[s] = true;
    }
    let est: Vec<usize> = (0..n).filter(|&i| !is_val[i]).collect();
    if est.is_empty() {
        return Err(Error::Split("no estimation sites remain".into()));
    }
    let mut val: Vec<usize> = val_sites.to_vec();
    val.sort_unstable();
    Ok((ds.subset_sites(&est), ds.subset_sites(&val)))
}
