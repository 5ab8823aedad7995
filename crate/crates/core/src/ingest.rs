//! Track/environment CSV parsing, derived intensity series, the ocean
//! feedback predictor, standardization and storm segmentation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Utc};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::domain::{CovariateSet, CovariateVector, EnvRecord, LandSegment, Observation, OceanSequence, Scaler, StormRecord, TrackPoint, VarStats, KT_PER_MS};
use crate::error::{Error, Result};

/// Mean Earth radius (m).
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

pub const REQUIRED_COLUMNS: [&str; 11] = [
    "storm_id",
    "time",
    "lat",
    "lon",
    "wind_kt",
    "over_land",
    "mpi_kt",
    "shr_ms",
    "rh_pct",
    "hm_m",
    "gamma_k_per_100m",
];

const OCEAN_COLUMNS: [&str; 2] = ["hm_m", "gamma_k_per_100m"];
const KNOWN_OPTIONAL: [&str; 1] = ["name"];

/// Substitutes used when the ocean predictor is evaluated outside its domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcnFloors {
    /// K per 100 m.
    pub gamma: f64,
    /// kt.
    pub v: f64,
}

impl Default for OcnFloors {
    fn default() -> Self {
        Self { gamma: 0.01, v: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParseOptions {
    /// Fraction of the translation speed removed from the reported wind.
    pub bg_fraction: f64,
    /// Require `hm_m` and `gamma_k_per_100m` on every row.
    pub require_ocean: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            bg_fraction: 0.55,
            require_ocean: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub bg_fraction: f64,
    pub min_ocean_len: usize,
    pub min_land_len: usize,
    pub min_land_v0: f64,
    pub covariate_set: CovariateSet,
    pub floors: OcnFloors,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            bg_fraction: 0.55,
            min_ocean_len: 12,
            min_land_len: 2,
            min_land_v0: 20.0,
            covariate_set: CovariateSet::Full,
            floors: OcnFloors::default(),
        }
    }
}

impl IngestConfig {
    pub fn parse_options(&self) -> ParseOptions {
        ParseOptions {
            bg_fraction: self.bg_fraction,
            require_ocean: self.covariate_set.uses_ocn(),
        }
    }
}

pub fn parse_tracks(path: &Path, options: &ParseOptions) -> Result<Vec<StormRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_tracks_reader(file, options)
}

pub fn parse_tracks_reader<R: Read>(reader: R, options: &ParseOptions) -> Result<Vec<StormRecord>> {
    if !(0.0..=1.0).contains(&options.bg_fraction) {
        return Err(Error::Validation(format!("background-wind fraction {} outside [0, 1]", options.bg_fraction)));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();

    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = BTreeMap::new();
    for name in REQUIRED_COLUMNS {
        match col(name) {
            Some(i) => {
                idx.insert(name, i);
            }
            None if !options.require_ocean && OCEAN_COLUMNS.contains(&name) => {}
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("missing required column `{name}`"),
                })
            }
        }
    }
    let name_col = col("name");
    for h in headers.iter() {
        if !REQUIRED_COLUMNS.contains(&h) && !KNOWN_OPTIONAL.contains(&h) {
            warn!("ignoring unknown column `{h}`");
        }
    }

    // storm_id -> (first-seen order, name, rows)
    let mut groups: BTreeMap<String, (usize, Option<String>, Vec<Observation>)> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |name: &str| -> Result<&str> {
            let s = idx.get(name).and_then(|&i| record.get(i)).unwrap_or("");
            if s.is_empty() {
                Err(Error::Parse {
                    line,
                    message: format!("missing value for `{name}`"),
                })
            } else {
                Ok(s)
            }
        };
        let num = |name: &str| -> Result<f64> {
            let s = field(name)?;
            let v: f64 = s.parse().map_err(|_| Error::Parse {
                line,
                message: format!("`{name}`: cannot parse `{s}` as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("`{name}`: non-finite value"),
                });
            }
            Ok(v)
        };
        let opt_num = |name: &str| -> Result<Option<f64>> {
            let present = idx.get(name).and_then(|&i| record.get(i)).is_some_and(|s| !s.is_empty());
            if present {
                num(name).map(Some)
            } else if options.require_ocean {
                Err(Error::Parse {
                    line,
                    message: format!("missing value for `{name}`"),
                })
            } else {
                Ok(None)
            }
        };

        let storm_id = field("storm_id")?.to_string();
        let time = parse_time(field("time")?).ok_or_else(|| Error::Parse {
            line,
            message: format!("`time`: cannot parse `{}` as ISO-8601", field("time").unwrap_or("")),
        })?;
        let over_land = parse_bool(field("over_land")?).ok_or_else(|| Error::Parse {
            line,
            message: "`over_land`: expected 0 or 1".into(),
        })?;
        let track = TrackPoint {
            time,
            lat: num("lat")?,
            lon: num("lon")?,
            observed_wind: num("wind_kt")?,
            over_land,
        };
        let env = EnvRecord {
            mpi: num("mpi_kt")?,
            shr: num("shr_ms")?,
            rh: num("rh_pct")?,
            h_m: opt_num("hm_m")?,
            gamma: opt_num("gamma_k_per_100m")?,
        };
        validate_row(&track, &env).map_err(|message| Error::Parse { line, message })?;

        let n = groups.len();
        let entry = groups.entry(storm_id).or_insert_with(|| (n, None, Vec::new()));
        if entry.1.is_none() {
            entry.1 = name_col.and_then(|i| record.get(i)).filter(|s| !s.is_empty()).map(str::to_string);
        }
        entry.2.push(Observation { track, env });
    }

    let mut ordered: Vec<_> = groups.into_iter().collect();
    ordered.sort_by_key(|(_, (order, _, _))| *order);

    let mut storms = Vec::with_capacity(ordered.len());
    for (storm_id, (_, name, mut points)) in ordered {
        points.sort_by_key(|p| p.track.time);
        for w in points.windows(2) {
            if w[1].track.time <= w[0].track.time {
                return Err(Error::Validation(format!(
                    "storm {storm_id}: duplicated or non-monotone time {}",
                    w[1].track.time.format("%Y-%m-%dT%H:%M:%SZ")
                )));
            }
        }
        if points.len() < 2 {
            warn!("storm {storm_id}: skipped, fewer than 2 points");
            continue;
        }
        storms.push(derive_storm(storm_id, name, points, options.bg_fraction)?);
    }
    Ok(storms)
}

fn validate_row(track: &TrackPoint, env: &EnvRecord) -> std::result::Result<(), String> {
    if !(-90.0..=90.0).contains(&track.lat) {
        return Err(format!("lat {} outside [-90, 90]", track.lat));
    }
    if track.observed_wind < 0.0 {
        return Err(format!("wind_kt {} is negative", track.observed_wind));
    }
    if env.mpi < 0.0 {
        return Err(format!("mpi_kt {} is negative", env.mpi));
    }
    if env.shr < 0.0 {
        return Err(format!("shr_ms {} is negative", env.shr));
    }
    if !(0.0..=100.0).contains(&env.rh) {
        return Err(format!("rh_pct {} outside [0, 100]", env.rh));
    }
    if env.h_m.is_some_and(|h| h < 0.0) {
        return Err("hm_m is negative".into());
    }
    if env.gamma.is_some_and(|g| g < 0.0) {
        return Err("gamma_k_per_100m is negative".into());
    }
    Ok(())
}

pub fn parse_time(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    const FORMATS: [&str; 4] = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"];
    let s = s.trim_end_matches('Z');
    FORMATS.iter().find_map(|f| NaiveDateTime::parse_from_str(s, f).ok()).map(|t| t.and_utc())
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "0" | "false" | "False" | "FALSE" => Some(false),
        "1" | "true" | "True" | "TRUE" => Some(true),
        _ => None,
    }
}

/// Build a storm with translation speed, background-removed intensity and
/// forward differences.
pub fn derive_storm(storm_id: String, name: Option<String>, points: Vec<Observation>, bg_fraction: f64) -> Result<StormRecord> {
    if points.len() < 2 {
        return Err(Error::Validation(format!("storm {storm_id}: at least 2 points required")));
    }
    let tracks: Vec<&TrackPoint> = points.iter().map(|p| &p.track).collect();
    let translation_speed = compute_translation(&tracks).map_err(|e| Error::Validation(format!("storm {storm_id}: {e}")))?;
    let v: Vec<f64> = points
        .iter()
        .zip(&translation_speed)
        .map(|(p, &u)| remove_background_wind(p.track.observed_wind, u, bg_fraction))
        .collect();
    let dv = v.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(StormRecord {
        storm_id,
        name,
        points,
        translation_speed,
        v,
        dv,
    })
}

/// Great-circle distance (m).
pub fn haversine(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dphi = p2 - p1;
    let dlambda = (lon2 - lon1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// Translation speed (m/s) per point: centered differences inside, one-sided
/// at the ends, using actual elapsed times.
pub fn compute_translation(points: &[&TrackPoint]) -> Result<Vec<f64>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Validation("translation needs at least 2 points".into()));
    }
    let speed = |a: &TrackPoint, b: &TrackPoint| -> Result<f64> {
        let dt = (b.time - a.time).num_milliseconds() as f64 / 1000.0;
        if dt <= 0.0 {
            return Err(Error::Validation(format!(
                "zero or negative elapsed time at {}",
                b.time.format("%Y-%m-%dT%H:%M:%SZ")
            )));
        }
        Ok(haversine(a.lat, a.lon, b.lat, b.lon) / dt)
    };
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            speed(points[lo], points[hi])
        })
        .collect()
}

/// Storm intensity with the surface background wind removed (kt).
pub fn remove_background_wind(observed_wind: f64, translation_ms: f64, fraction: f64) -> f64 {
    (observed_wind - fraction * translation_ms * KT_PER_MS).max(0.0)
}

/// Ocean feedback predictor: `1 - 0.87 exp(-z)` with
/// `z = 0.01 gamma^-0.4 h_m u_t (pi / v)`.
///
/// `gamma` in K per 100 m, `h_m` in m, `u_t` in m/s; `pi` and `v` share units.
pub fn compute_ocn(gamma: f64, h_m: f64, u_t: f64, pi: f64, v: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
    }
    if !(v > 0.0) {
        return Err(Error::Domain(format!("intensity must be positive, got {v}")));
    }
    let z = 0.01 * gamma.powf(-0.4) * h_m * u_t * (pi / v);
    Ok(1.0 - 0.87 * (-z).exp())
}

/// `compute_ocn` with out-of-domain `gamma` and `v` replaced by floors.
/// Returns the value and whether a floor was used.
pub fn ocn_with_floors(gamma: f64, h_m: f64, u_t: f64, pi: f64, v: f64, floors: &OcnFloors) -> (f64, bool) {
    let mut floored = false;
    let g = if gamma > 0.0 {
        gamma
    } else {
        floored = true;
        floors.gamma
    };
    let vv = if v > 0.0 {
        v
    } else {
        floored = true;
        floors.v
    };
    let z = 0.01 * g.powf(-0.4) * h_m * u_t * (pi / vv);
    (1.0 - 0.87 * (-z).exp(), floored)
}

/// Raw covariates at every point of a storm. `dv_p` at the first point is 0.
/// Returns the vectors and the number of floor substitutions.
pub fn raw_covariates(storm: &StormRecord, set: CovariateSet, floors: &OcnFloors) -> Result<(Vec<CovariateVector>, usize)> {
    let mut n_floored = 0;
    let mut out = Vec::with_capacity(storm.len());
    for (t, p) in storm.points.iter().enumerate() {
        let dv_p = if t == 0 { 0.0 } else { storm.dv[t - 1] };
        let v = storm.v[t];
        let ocn = if set.uses_ocn() {
            let (h_m, gamma) = match (p.env.h_m, p.env.gamma) {
                (Some(h), Some(g)) => (h, g),
                _ => {
                    return Err(Error::Validation(format!(
                        "storm {} point {t}: ocean fields required for the full covariate set",
                        storm.storm_id
                    )))
                }
            };
            let (ocn, floored) = ocn_with_floors(gamma, h_m, storm.translation_speed[t], p.env.mpi, v, floors);
            if floored {
                n_floored += 1;
                log::debug!("storm {} point {t}: ocean predictor floor applied", storm.storm_id);
            }
            ocn
        } else {
            f64::NAN
        };
        out.push(CovariateVector::raw([dv_p, v, p.env.mpi, p.env.shr, p.env.rh, ocn]));
    }
    Ok((out, n_floored))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentOptions {
    pub min_ocean_len: usize,
    pub min_land_len: usize,
    pub min_land_v0: f64,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self {
            min_ocean_len: 12,
            min_land_len: 2,
            min_land_v0: 20.0,
        }
    }
}

/// Maximal runs of equal `over_land` flag as `(start, end_inclusive, land)`.
pub fn runs(over_land: &[bool]) -> Vec<(usize, usize, bool)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=over_land.len() {
        if i == over_land.len() || over_land[i] != over_land[start] {
            if !over_land.is_empty() {
                out.push((start, i - 1, over_land[start]));
            }
            start = i;
        }
    }
    out
}

/// Split a storm into ocean training sequences (raw units) and land segments.
///
/// A point belongs to an ocean sequence when it is over ocean and has a
/// forward difference, i.e. the final point of the record never does.
pub fn segment_storm(storm: &StormRecord, covariates: &[CovariateVector], options: &SegmentOptions) -> (Vec<OceanSequence>, Vec<LandSegment>) {
    let n = storm.len();
    let mut sequences = Vec::new();
    let mut segments = Vec::new();
    for (a, b, land) in runs(&storm.over_land()) {
        if land {
            let (v0, intensities) = if a == 0 {
                (storm.v[0], storm.v[1..=b].to_vec())
            } else {
                (storm.v[a - 1], storm.v[a..=b].to_vec())
            };
            if intensities.len() >= options.min_land_len && v0 >= options.min_land_v0 {
                segments.push(LandSegment {
                    storm_id: storm.storm_id.clone(),
                    start_index: a,
                    v0,
                    intensities,
                });
            }
        } else {
            let end = if b + 1 < n { b } else { b.saturating_sub(1) };
            if b + 1 >= n && a > end {
                continue;
            }
            let len = end + 1 - a;
            if len < options.min_ocean_len || len == 0 {
                continue;
            }
            sequences.push(OceanSequence {
                storm_id: storm.storm_id.clone(),
                start_index: a,
                responses: storm.dv[a..=end].to_vec(),
                covariates: covariates[a..=end].to_vec(),
            });
        }
    }
    (sequences, segments)
}

/// Sample mean and (n - 1) standard deviation.
pub fn mean_sd(values: impl IntoIterator<Item = f64>) -> Option<VarStats> {
    let xs: Vec<f64> = values.into_iter().collect();
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some(VarStats { mean, sd: var.sqrt() })
}

/// Fit standardization on raw-unit sequences.
pub fn fit_scaler(sequences: &[OceanSequence], set: CovariateSet) -> Result<Scaler> {
    let mut covariates = [VarStats::IDENTITY; 6];
    for c in set.columns() {
        let stats = mean_sd(sequences.iter().flat_map(|s| s.covariates.iter().map(|x| x.get(*c))))
            .ok_or_else(|| Error::Fit(format!("scaler: fewer than 2 observations for `{}`", c.name())))?;
        if !(stats.sd > 0.0) {
            return Err(Error::Fit(format!("scaler: zero variance in `{}`", c.name())));
        }
        covariates[c.index()] = stats;
    }
    let response =
        mean_sd(sequences.iter().flat_map(|s| s.responses.iter().copied())).ok_or_else(|| Error::Fit("scaler: fewer than 2 observations for `dv`".into()))?;
    if !(response.sd > 0.0) {
        return Err(Error::Fit("scaler: zero variance in `dv`".into()));
    }
    Ok(Scaler { covariates, response, ddof: 1 })
}

/// Standardize a raw sequence.
pub fn apply_scaler(scaler: &Scaler, seq: &OceanSequence) -> OceanSequence {
    OceanSequence {
        storm_id: seq.storm_id.clone(),
        start_index: seq.start_index,
        responses: seq.responses.iter().map(|&y| scaler.standardize_response(y)).collect(),
        covariates: seq.covariates.iter().map(|x| scaler.apply(x)).collect(),
    }
}

/// Map a standardized sequence back to raw units.
pub fn invert_scaler(scaler: &Scaler, seq: &OceanSequence) -> OceanSequence {
    OceanSequence {
        storm_id: seq.storm_id.clone(),
        start_index: seq.start_index,
        responses: seq.responses.iter().map(|&y| scaler.unstandardize_response(y)).collect(),
        covariates: seq.covariates.iter().map(|x| scaler.invert(x)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub n_storms: usize,
    pub n_sequences: usize,
    pub n_observations: usize,
    pub n_land_segments: usize,
    pub n_ocn_floored: usize,
}

/// Storms plus standardized training sequences and land segments.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub storms: Vec<StormRecord>,
    pub sequences: Vec<OceanSequence>,
    pub land_segments: Vec<LandSegment>,
    pub scaler: Scaler,
    pub covariate_set: CovariateSet,
    pub counts: DatasetCounts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub counts: DatasetCounts,
    pub covariate_set: CovariateSet,
    pub scaler: Scaler,
    pub config: IngestConfig,
}

impl Dataset {
    /// Pooled standardized design rows and responses.
    pub fn pooled(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut x = Vec::with_capacity(self.counts.n_observations);
        let mut y = Vec::with_capacity(self.counts.n_observations);
        for s in &self.sequences {
            for (c, r) in s.covariates.iter().zip(&s.responses) {
                x.push(c.select(self.covariate_set));
                y.push(*r);
            }
        }
        (x, y)
    }

    pub fn summary(&self, config: &IngestConfig) -> DatasetSummary {
        DatasetSummary {
            counts: self.counts,
            covariate_set: self.covariate_set,
            scaler: self.scaler.clone(),
            config: config.clone(),
        }
    }
}

pub fn build_dataset(storms: Vec<StormRecord>, config: &IngestConfig) -> Result<Dataset> {
    let seg = SegmentOptions {
        min_ocean_len: config.min_ocean_len,
        min_land_len: config.min_land_len,
        min_land_v0: config.min_land_v0,
    };
    let mut raw = Vec::new();
    let mut land_segments = Vec::new();
    let mut n_ocn_floored = 0;
    for storm in &storms {
        let (covs, floored) = raw_covariates(storm, config.covariate_set, &config.floors)?;
        n_ocn_floored += floored;
        let (s, l) = segment_storm(storm, &covs, &seg);
        raw.extend(s);
        land_segments.extend(l);
    }
    if n_ocn_floored > 0 {
        warn!("ocean predictor floors applied at {n_ocn_floored} points");
    }
    let scaler = fit_scaler(&raw, config.covariate_set)?;
    let sequences: Vec<OceanSequence> = raw.iter().map(|s| apply_scaler(&scaler, s)).collect();
    let counts = DatasetCounts {
        n_storms: storms.len(),
        n_sequences: sequences.len(),
        n_observations: sequences.iter().map(OceanSequence::len).sum(),
        n_land_segments: land_segments.len(),
        n_ocn_floored,
    };
    Ok(Dataset {
        storms,
        sequences,
        land_segments,
        scaler,
        covariate_set: config.covariate_set,
        counts,
    })
}
