//! Core data types shared by every other module.
//!
//! Units are fixed: winds in knots, shear and translation speed in m/s,
//! relative humidity in percent, mixed-layer depth in metres and
//! sub-mixed-layer stratification in K per 100 m.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

/// Knots per metre-per-second.
pub const KT_PER_MS: f64 = 1.943_844_5;

/// One 6-hourly best-track observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub time: DateTime<Utc>,
    pub lat: f64,
    pub lon: f64,
    /// Reported maximum sustained wind (kt).
    pub observed_wind: f64,
    pub over_land: bool,
}

/// Environmental conditions at a track point.
///
/// `h_m` and `gamma` are optional so that tracks without ocean data can still
/// drive models fitted without the ocean predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvRecord {
    pub mpi: f64,
    pub shr: f64,
    pub rh: f64,
    pub h_m: Option<f64>,
    pub gamma: Option<f64>,
}

/// A track point paired with its environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub track: TrackPoint,
    pub env: EnvRecord,
}

/// One storm with derived intensity series.
///
/// `v` is the background-removed intensity and `dv[t] = v[t + 1] - v[t]`, so
/// `dv` is one shorter than `points`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StormRecord {
    pub storm_id: String,
    pub name: Option<String>,
    pub points: Vec<Observation>,
    pub translation_speed: Vec<f64>,
    pub v: Vec<f64>,
    pub dv: Vec<f64>,
}

impl StormRecord {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn over_land(&self) -> Vec<bool> {
        self.points.iter().map(|p| p.track.over_land).collect()
    }
}

/// The six predictors, in the order used everywhere (model files, design
/// matrices, simulation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Covariate {
    DvP,
    V,
    Mpi,
    Shr,
    Rh,
    Ocn,
}

impl Covariate {
    pub const ALL: [Covariate; 6] = [Covariate::DvP, Covariate::V, Covariate::Mpi, Covariate::Shr, Covariate::Rh, Covariate::Ocn];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Covariate::DvP => "dv_p",
            Covariate::V => "v",
            Covariate::Mpi => "mpi",
            Covariate::Shr => "shr",
            Covariate::Rh => "rh",
            Covariate::Ocn => "ocn",
        }
    }
}

/// Which predictors a model uses. `NoOcn` is the ocean-feedback ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateSet {
    #[default]
    Full,
    NoOcn,
}

impl CovariateSet {
    pub fn columns(self) -> &'static [Covariate] {
        match self {
            CovariateSet::Full => &Covariate::ALL,
            CovariateSet::NoOcn => &Covariate::ALL[..5],
        }
    }

    pub fn len(self) -> usize {
        self.columns().len()
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn uses_ocn(self) -> bool {
        matches!(self, CovariateSet::Full)
    }

    pub fn id(self) -> &'static str {
        match self {
            CovariateSet::Full => "full",
            CovariateSet::NoOcn => "no_ocn",
        }
    }
}

/// Covariates feeding the initial-state model: MPI, SHR and RH.
pub const INITIAL_COVARIATES: [Covariate; 3] = [Covariate::Mpi, Covariate::Shr, Covariate::Rh];

/// Fixed-order predictor vector, raw or standardized.
///
/// When a covariate is unavailable (OCN under the `NoOcn` set) its slot holds
/// NaN and is never read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateVector {
    pub values: [f64; 6],
    pub standardized: bool,
}

impl CovariateVector {
    pub fn raw(values: [f64; 6]) -> Self {
        Self { values, standardized: false }
    }

    pub fn get(&self, c: Covariate) -> f64 {
        self.values[c.index()]
    }

    /// Values of the active columns of `set`, in order.
    pub fn select(&self, set: CovariateSet) -> Vec<f64> {
        set.columns().iter().map(|c| self.get(*c)).collect()
    }

    /// MPI, SHR, RH for the initial-state model.
    pub fn initial(&self) -> Vec<f64> {
        INITIAL_COVARIATES.iter().map(|c| self.get(*c)).collect()
    }
}

/// Contiguous over-ocean run used for fitting. Responses and covariates are
/// standardized; `start_index` is the storm point index of the first response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OceanSequence {
    pub storm_id: String,
    pub start_index: usize,
    pub responses: Vec<f64>,
    pub covariates: Vec<CovariateVector>,
}

impl OceanSequence {
    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

/// Over-land run: `intensities[i]` is the intensity `i + 1` steps after the
/// last ocean point, whose intensity is `v0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandSegment {
    pub storm_id: String,
    pub start_index: usize,
    pub v0: f64,
    pub intensities: Vec<f64>,
}

impl LandSegment {
    pub fn len(&self) -> usize {
        self.intensities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensities.is_empty()
    }
}

/// Sample mean and standard deviation of one variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarStats {
    pub mean: f64,
    pub sd: f64,
}

impl VarStats {
    pub const IDENTITY: VarStats = VarStats { mean: 0.0, sd: 1.0 };

    pub fn standardize(&self, x: f64) -> f64 {
        (x - self.mean) / self.sd
    }

    pub fn unstandardize(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

/// Standardization for the six covariates and the response.
///
/// Under `CovariateSet::NoOcn` the OCN slot is the identity transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub covariates: [VarStats; 6],
    pub response: VarStats,
    /// Standard deviation denominator convention; always `n - 1`.
    #[serde(default = "default_ddof")]
    pub ddof: u32,
}

fn default_ddof() -> u32 {
    1
}

impl Scaler {
    pub fn identity() -> Self {
        Self {
            covariates: [VarStats::IDENTITY; 6],
            response: VarStats::IDENTITY,
            ddof: 1,
        }
    }

    pub fn apply(&self, x: &CovariateVector) -> CovariateVector {
        if x.standardized {
            return *x;
        }
        let mut values = x.values;
        for (v, s) in values.iter_mut().zip(&self.covariates) {
            *v = s.standardize(*v);
        }
        CovariateVector { values, standardized: true }
    }

    pub fn invert(&self, x: &CovariateVector) -> CovariateVector {
        if !x.standardized {
            return *x;
        }
        let mut values = x.values;
        for (v, s) in values.iter_mut().zip(&self.covariates) {
            *v = s.unstandardize(*v);
        }
        CovariateVector { values, standardized: false }
    }

    pub fn standardize_response(&self, dv: f64) -> f64 {
        self.response.standardize(dv)
    }

    pub fn unstandardize_response(&self, z: f64) -> f64 {
        self.response.unstandardize(z)
    }
}

/// A state index, 0-based internally; printed 1-based.
pub type StateIndex = usize;

/// Most likely state per response of one ocean sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatePath {
    pub states: Vec<StateIndex>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scaler() -> Scaler {
        Scaler {
            covariates: [
                VarStats { mean: 0.3, sd: 6.1 },
                VarStats { mean: 55.0, sd: 25.0 },
                VarStats { mean: 140.0, sd: 20.0 },
                VarStats { mean: 9.0, sd: 4.5 },
                VarStats { mean: 60.0, sd: 9.0 },
                VarStats { mean: 0.9, sd: 0.1 },
            ],
            response: VarStats { mean: 0.4, sd: 6.3 },
            ddof: 1,
        }
    }

    #[test]
    fn no_ocn_drops_last_column() {
        let x = CovariateVector::raw([1.0, 2.0, 3.0, 4.0, 5.0, f64::NAN]);
        assert_eq!(x.select(CovariateSet::NoOcn), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(x.initial(), vec![3.0, 4.0, 5.0]);
    }

    proptest! {
        #[test]
        fn standardize_round_trip(vals in proptest::array::uniform6(-1e4f64..1e4), dv in -100f64..100.0) {
            let s = scaler();
            let x = CovariateVector::raw(vals);
            let back = s.invert(&s.apply(&x));
            for (a, b) in back.values.iter().zip(vals.iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            let r = s.unstandardize_response(s.standardize_response(dv));
            prop_assert!((r - dv).abs() <= 1e-12 * dv.abs().max(1.0));
        }
    }
}
