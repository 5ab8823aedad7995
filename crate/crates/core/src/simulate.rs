//! Monte Carlo intensity ensembles along prescribed tracks.
//!
//! The first two intensities are observed. Over ocean the fitted model draws
//! each 6-h change from covariates built with the simulated intensity; over
//! land intensity follows the decay model from the last ocean value. The
//! previous change and the hidden state are held while over land.

use std::fmt::Write as _;
use std::path::Path;

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{CovariateVector, StormRecord, INITIAL_COVARIATES};
use crate::error::{Error, Result};
use crate::ingest::{ocn_with_floors, OcnFloors};
use crate::landdecay::{land_apply, LandModel};
use crate::mixture::fmr_sample_dv;
use crate::model::{IntensityModel, ModelBundle};
use crate::rng::{categorical, derive_seed, normal, SimRng};

/// Length of a forced extreme-state window, in 6-h steps.
pub const RI_WINDOW_STEPS: usize = 4;
/// Rise over 24 h (kt) that counts as rapid intensification.
pub const RI_THRESHOLD_KT: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "times")]
pub enum RiCorrection {
    Off,
    /// Windows derived from the observed intensity of each storm.
    Observed,
    /// Window start times applied to every simulated storm.
    Explicit(Vec<DateTime<Utc>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_realizations: usize,
    pub master_seed: u64,
    /// Simulation stops once intensity falls below this value (kt).
    pub stop_threshold: f64,
    /// Background-wind fraction used when deriving intensity from tracks.
    pub bg_fraction: f64,
    pub ri_correction: RiCorrection,
    pub ri_steps: usize,
    pub floors: OcnFloors,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_realizations: 100,
            master_seed: 0,
            stop_threshold: 10.0,
            bg_fraction: 0.55,
            ri_correction: RiCorrection::Off,
            ri_steps: RI_WINDOW_STEPS,
            floors: OcnFloors::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_realizations == 0 {
            return Err(Error::Validation("n_realizations must be at least 1".into()));
        }
        if !(self.stop_threshold > 0.0) {
            return Err(Error::Validation("stop_threshold must be positive".into()));
        }
        Ok(())
    }
}

/// A window of forced extreme state starting at a storm point index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiWindow {
    pub start_index: usize,
    pub start_time: DateTime<Utc>,
    pub n_steps: usize,
}

impl RiWindow {
    pub fn covers(&self, t: usize) -> bool {
        t >= self.start_index && t < self.start_index + self.n_steps
    }
}

/// Indices `t` with a 24-h rise `v[t+4] - v[t] >= 30` kt over ocean.
pub fn ri_onsets(v: &[f64], over_land: &[bool]) -> Vec<bool> {
    (0..v.len())
        .map(|t| t + 4 < v.len() && !over_land[t..=t + 4].iter().any(|l| *l) && v[t + 4] - v[t] >= RI_THRESHOLD_KT)
        .collect()
}

/// Correction windows from observed rapid intensification: one window per
/// maximal run of RI steps, starting at its first step.
pub fn ri_correct_schedule(storm: &StormRecord) -> Vec<RiWindow> {
    let ri = ri_onsets(&storm.v, &storm.over_land());
    (0..ri.len())
        .filter(|&t| ri[t] && (t == 0 || !ri[t - 1]))
        .map(|t| RiWindow {
            start_index: t,
            start_time: storm.points[t].track.time,
            n_steps: RI_WINDOW_STEPS,
        })
        .collect()
}

/// Windows for explicit start times. One list serves every storm, so times
/// not on this track are skipped quietly.
pub fn explicit_windows(storm: &StormRecord, times: &[DateTime<Utc>], n_steps: usize) -> Vec<RiWindow> {
    let mut out = Vec::new();
    for time in times {
        match storm.points.iter().position(|p| p.track.time == *time) {
            Some(start_index) => out.push(RiWindow {
                start_index,
                start_time: *time,
                n_steps,
            }),
            None => log::debug!("storm {}: correction time {time} not on track", storm.storm_id),
        }
    }
    out
}

pub fn windows_for(storm: &StormRecord, config: &SimConfig) -> Vec<RiWindow> {
    match &config.ri_correction {
        RiCorrection::Off => Vec::new(),
        RiCorrection::Observed => ri_correct_schedule(storm)
            .into_iter()
            .map(|w| RiWindow { n_steps: config.ri_steps, ..w })
            .collect(),
        RiCorrection::Explicit(times) => explicit_windows(storm, times, config.ri_steps),
    }
}

/// State recorded for models without hidden states.
pub const NO_STATE: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Realization {
    pub index: usize,
    pub seed: u64,
    /// Intensity at each recorded track point, kt.
    pub v: Vec<f64>,
    /// `v[t + 1] - v[t]`; one shorter than `v`.
    pub dv: Vec<f64>,
    /// Hidden state used for the change out of each point, 0-based, or
    /// `NO_STATE`.
    pub states: Vec<usize>,
    /// Index of the sub-threshold value that ended the run, if any.
    pub stopped_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub storm_id: String,
    pub model_type: String,
    pub model_hash: String,
    pub config: SimConfig,
    pub windows: Vec<RiWindow>,
    pub realizations: Vec<Realization>,
}

/// Per-storm inputs precomputed once for all realizations.
struct Track<'a> {
    storm: &'a StormRecord,
    over_land: Vec<bool>,
}

fn raw_covariates(track: &Track, t: usize, dv_p: f64, v: f64, bundle: &ModelBundle, floors: &OcnFloors) -> Result<CovariateVector> {
    let p = &track.storm.points[t];
    let set = bundle.model.covariate_set();
    let ocn = if set.uses_ocn() {
        match (p.env.h_m, p.env.gamma) {
            (Some(h_m), Some(gamma)) => ocn_with_floors(gamma, h_m, track.storm.translation_speed[t], p.env.mpi, v, floors).0,
            _ => {
                return Err(Error::Validation(format!(
                    "storm {} point {t}: ocean fields required by the model",
                    track.storm.storm_id
                )))
            }
        }
    } else {
        f64::NAN
    };
    Ok(CovariateVector::raw([dv_p, v, p.env.mpi, p.env.shr, p.env.rh, ocn]))
}

/// One realization along `storm`.
pub fn simulate_storm(bundle: &ModelBundle, storm: &StormRecord, config: &SimConfig, windows: &[RiWindow], index: usize) -> Result<Realization> {
    let seed = derive_seed(config.master_seed, &storm.storm_id, index as u64);
    let mut rng = SimRng::seed_from_u64(seed);
    run(
        bundle,
        &Track {
            storm,
            over_land: storm.over_land(),
        },
        config,
        windows,
        index,
        seed,
        &mut rng,
    )
}

fn run(bundle: &ModelBundle, track: &Track, config: &SimConfig, windows: &[RiWindow], index: usize, seed: u64, rng: &mut SimRng) -> Result<Realization> {
    let storm = track.storm;
    let n = storm.len();
    if n < 3 {
        return Err(Error::Validation(format!(
            "storm {}: simulation needs at least 3 points, got {n}",
            storm.storm_id
        )));
    }
    let scaler = bundle.model.scaler();
    let set = bundle.model.covariate_set();
    let land = bundle.land.as_ref();
    let mehim = match &bundle.model {
        IntensityModel::Mehim(m) => Some(m),
        _ => None,
    };
    let extreme = mehim.map_or(0, |m| m.k - 1);

    let mut v = vec![storm.v[0], storm.v[1]];
    let mut states = Vec::with_capacity(n);
    let mut stopped_at = None;
    let mut state = NO_STATE;
    if let Some(m) = mehim {
        let x0 = scaler.apply(&CovariateVector::raw({
            let p = &storm.points[0].env;
            [0.0, storm.v[0], p.mpi, p.shr, p.rh, 0.0]
        }));
        let x0: Vec<f64> = INITIAL_COVARIATES.iter().map(|c| x0.get(*c)).collect();
        state = categorical(rng, &m.initial_probs(&x0));
    }
    let forced = |t: usize| mehim.is_some() && windows.iter().any(|w| w.covers(t));
    states.push(if forced(0) { extreme } else { state });
    for (i, &vi) in v.iter().enumerate() {
        if vi < config.stop_threshold {
            stopped_at = Some(i);
            v.truncate(i + 1);
            break;
        }
    }
    let mut dv_p = storm.v[1] - storm.v[0];
    // last ocean intensity and steps since land entry
    let mut land_entry: Option<(f64, usize)> = None;
    let mut t = 1;
    while stopped_at.is_none() && t + 1 < n {
        let vt = v[t];
        let next = if track.over_land[t + 1] {
            let land = land.ok_or_else(|| Error::Validation(format!("storm {} crosses land but the model bundle has no land model", storm.storm_id)))?;
            let (v0, steps) = land_entry.get_or_insert((vt, 0));
            *steps += 1;
            if forced(t) {
                state = extreme;
            }
            states.push(state);
            land_apply(land, *v0, *steps as f64)
        } else {
            land_entry = None;
            let raw = raw_covariates(track, t, dv_p, vt, bundle, &config.floors)?;
            let x = scaler.apply(&raw).select(set);
            let z = match &bundle.model {
                IntensityModel::Ols(m) => normal(rng, m.fit.mean(&x), m.fit.sigma),
                IntensityModel::Fmr(m) => fmr_sample_dv(m, &x, rng).1,
                IntensityModel::Mehim(m) => {
                    if t >= 2 {
                        state = categorical(rng, &m.transition_probs(state, &x));
                    }
                    if forced(t) {
                        state = extreme;
                    }
                    m.emission_sample(state, &x, rng)
                }
            };
            states.push(state);
            let dv = scaler.unstandardize_response(z);
            dv_p = dv;
            (vt + dv).max(0.0)
        };
        v.push(next);
        if next < config.stop_threshold {
            stopped_at = Some(t + 1);
        }
        t += 1;
    }
    states.resize(v.len(), state);
    let dv = v.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(Realization {
        index,
        seed,
        v,
        dv,
        states,
        stopped_at,
    })
}

/// `config.n_realizations` independent realizations in index order.
pub fn simulate_ensemble(bundle: &ModelBundle, storm: &StormRecord, config: &SimConfig, model_hash: &str) -> Result<EnsembleResult> {
    config.validate()?;
    let windows = windows_for(storm, config);
    let track = Track {
        storm,
        over_land: storm.over_land(),
    };
    let realizations = (0..config.n_realizations)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(config.master_seed, &storm.storm_id, i as u64);
            let mut rng = SimRng::seed_from_u64(seed);
            run(bundle, &track, config, &windows, i, seed, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleResult {
        storm_id: storm.storm_id.clone(),
        model_type: bundle.model.model_type().id().to_string(),
        model_hash: model_hash.to_string(),
        config: config.clone(),
        windows,
        realizations,
    })
}

pub const ENSEMBLE_HEADER: &str = "realization,step_index,time,v_kt,dv_kt,state,over_land";

/// Ensemble as CSV: one row per realization and recorded point. States are
/// 1-based; 0 marks models without hidden states. `dv_kt` is empty on the
/// last recorded point.
pub fn ensemble_csv(result: &EnsembleResult, storm: &StormRecord) -> String {
    let mut out = String::from(ENSEMBLE_HEADER);
    out.push('\n');
    for r in &result.realizations {
        for (t, v) in r.v.iter().enumerate() {
            let dv = r.dv.get(t).map(|d| format!("{d:.6}")).unwrap_or_default();
            let state = match r.states[t] {
                NO_STATE => 0,
                s => s + 1,
            };
            let p = &storm.points[t].track;
            let _ = writeln!(
                out,
                "{},{},{},{v:.6},{dv},{state},{}",
                r.index,
                t,
                p.time.format("%Y-%m-%dT%H:%M:%SZ"),
                u8::from(p.over_land)
            );
        }
    }
    out
}

pub fn write_ensemble_csv(result: &EnsembleResult, storm: &StormRecord, path: &Path) -> Result<()> {
    crate::fsutil::write_atomic(path, ensemble_csv(result, storm).as_bytes())
}

/// One parsed row of an ensemble CSV.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct EnsembleRow {
    pub realization: usize,
    pub step_index: usize,
    pub time: String,
    pub v_kt: f64,
    pub dv_kt: Option<f64>,
    pub state: usize,
    pub over_land: u8,
}

/// Read an ensemble CSV back into per-realization series
/// `(v, over_land)`, ordered by realization index.
pub fn read_ensemble_csv(path: &Path) -> Result<Vec<(Vec<f64>, Vec<bool>)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Validation(format!("{}: {other:?}", path.display())),
    })?;
    let mut out: Vec<(Vec<f64>, Vec<bool>)> = Vec::new();
    for (line, row) in rdr.deserialize::<EnsembleRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: line as u64 + 2,
            message: format!("{}: {e}", path.display()),
        })?;
        if row.realization >= out.len() {
            out.resize(row.realization + 1, (Vec::new(), Vec::new()));
        }
        let (v, land) = &mut out[row.realization];
        if row.step_index != v.len() {
            return Err(Error::Parse {
                line: line as u64 + 2,
                message: format!("{}: steps out of order", path.display()),
            });
        }
        v.push(row.v_kt);
        land.push(row.over_land == 1);
    }
    Ok(out)
}

/// Land model for bundles fitted without one: no decay at all.
pub fn no_decay_land() -> LandModel {
    LandModel {
        no_decay_threshold: Some(f64::INFINITY),
        ..LandModel::new(f64::MIN_POSITIVE, 0.0)
    }
}
