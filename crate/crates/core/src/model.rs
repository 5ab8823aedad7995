//! Fitted model types and their JSON files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{Covariate, CovariateSet, Scaler};
use crate::error::{Error, Result};
use crate::hmm::MehimModel;
use crate::ingest::{Dataset, IngestConfig};
use crate::landdecay::LandModel;
use crate::mixture::FmrModel;
use crate::stats::{ols_fit, LinearFit, MnlFit};

pub const SCHEMA_VERSION: u32 = 1;

/// Documented unit convention of the ocean predictor inputs.
pub const OCN_UNITS: &str = "gamma K/100m, h_m m, u_t m/s, pi/v dimensionless";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitMetadata {
    pub log_likelihood: f64,
    pub n_obs: usize,
    pub n_sequences: usize,
    pub seed: u64,
    pub iterations: usize,
    pub restarts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsModel {
    pub covariate_set: CovariateSet,
    pub scaler: Scaler,
    pub fit: LinearFit,
    pub metadata: FitMetadata,
}

pub fn ols_model_fit(dataset: &Dataset) -> Result<OlsModel> {
    let (x, y) = dataset.pooled();
    let fit = ols_fit(&x, &y)?;
    let log_likelihood = x.iter().zip(&y).map(|(xi, yi)| fit.log_density(xi, *yi)).sum();
    Ok(OlsModel {
        covariate_set: dataset.covariate_set,
        scaler: dataset.scaler.clone(),
        fit,
        metadata: FitMetadata {
            log_likelihood,
            n_obs: y.len(),
            n_sequences: dataset.sequences.len(),
            ..Default::default()
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelType {
    Ols,
    Fmr,
    Mehim,
    Land,
}

impl ModelType {
    pub fn id(self) -> &'static str {
        match self {
            ModelType::Ols => "ols",
            ModelType::Fmr => "fmr",
            ModelType::Mehim => "mehim",
            ModelType::Land => "land",
        }
    }
}

/// An ocean intensity model of any of the three kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum IntensityModel {
    Ols(OlsModel),
    Fmr(FmrModel),
    Mehim(MehimModel),
}

impl IntensityModel {
    pub fn model_type(&self) -> ModelType {
        match self {
            IntensityModel::Ols(_) => ModelType::Ols,
            IntensityModel::Fmr(_) => ModelType::Fmr,
            IntensityModel::Mehim(_) => ModelType::Mehim,
        }
    }

    pub fn scaler(&self) -> &Scaler {
        match self {
            IntensityModel::Ols(m) => &m.scaler,
            IntensityModel::Fmr(m) => &m.scaler,
            IntensityModel::Mehim(m) => &m.scaler,
        }
    }

    pub fn covariate_set(&self) -> CovariateSet {
        match self {
            IntensityModel::Ols(m) => m.covariate_set,
            IntensityModel::Fmr(m) => m.covariate_set,
            IntensityModel::Mehim(m) => m.covariate_set,
        }
    }

    pub fn k(&self) -> usize {
        match self {
            IntensityModel::Ols(_) => 1,
            IntensityModel::Fmr(m) => m.k,
            IntensityModel::Mehim(m) => m.k,
        }
    }

    pub fn metadata(&self) -> &FitMetadata {
        match self {
            IntensityModel::Ols(m) => &m.metadata,
            IntensityModel::Fmr(m) => &m.metadata,
            IntensityModel::Mehim(m) => &m.metadata,
        }
    }
}

/// On-disk model document. Exactly one of `ols`, `fmr`, `mehim` is present
/// unless `model_type` is `land`, in which case only `land` is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub model_type: ModelType,
    pub k: usize,
    pub covariate_set: CovariateSet,
    pub covariate_order: Vec<String>,
    pub ocn_units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaler_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ingest: Option<IngestConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ols: Option<OlsModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fmr: Option<FmrModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mehim: Option<MehimModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub land: Option<LandModel>,
}

/// Ocean model plus optional land model, as used by the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub model: IntensityModel,
    pub land: Option<LandModel>,
    pub ingest: Option<IngestConfig>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn scaler_hash(scaler: &Scaler) -> String {
    sha256_hex(serde_json::to_string(scaler).expect("scaler serializes").as_bytes())
}

impl ModelFile {
    pub fn from_model(model: &IntensityModel, land: Option<LandModel>, ingest: Option<IngestConfig>) -> Self {
        let mut file = Self::empty(model.model_type(), model.k(), model.covariate_set());
        file.scaler_hash = Some(scaler_hash(model.scaler()));
        file.ingest = ingest;
        file.land = land;
        match model {
            IntensityModel::Ols(m) => file.ols = Some(m.clone()),
            IntensityModel::Fmr(m) => file.fmr = Some(m.clone()),
            IntensityModel::Mehim(m) => file.mehim = Some(m.clone()),
        }
        file
    }

    pub fn from_land(land: LandModel) -> Self {
        let mut file = Self::empty(ModelType::Land, 0, CovariateSet::Full);
        file.covariate_order.clear();
        file.land = Some(land);
        file
    }

    fn empty(model_type: ModelType, k: usize, covariate_set: CovariateSet) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model_type,
            k,
            covariate_set,
            covariate_order: covariate_set.columns().iter().map(|c| c.name().to_string()).collect(),
            ocn_units: OCN_UNITS.to_string(),
            scaler_hash: None,
            ingest: None,
            ols: None,
            fmr: None,
            mehim: None,
            land: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let text = self.to_json()?;
        crate::fsutil::write_atomic(path, text.as_bytes())?;
        Ok(sha256_hex(text.as_bytes()))
    }

    pub fn intensity_model(&self) -> Option<IntensityModel> {
        match self.model_type {
            ModelType::Ols => self.ols.clone().map(IntensityModel::Ols),
            ModelType::Fmr => self.fmr.clone().map(IntensityModel::Fmr),
            ModelType::Mehim => self.mehim.clone().map(IntensityModel::Mehim),
            ModelType::Land => None,
        }
    }

    pub fn bundle(&self) -> Result<ModelBundle> {
        let model = self
            .intensity_model()
            .ok_or_else(|| Error::Schema("file holds no ocean intensity model".into()))?;
        Ok(ModelBundle {
            model,
            land: self.land.clone(),
            ingest: self.ingest.clone(),
        })
    }

    /// Structural checks: version, exactly one payload matching the type,
    /// dimensions consistent with `k` and the covariate set, scaler hash.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Schema(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", self.schema_version));
        }
        let present = [self.ols.is_some(), self.fmr.is_some(), self.mehim.is_some()].iter().filter(|b| **b).count();
        if let Some(land) = &self.land {
            land.validate()?;
        }
        if self.model_type == ModelType::Land {
            if present != 0 || self.land.is_none() {
                return bad("land model file must hold only a land model".into());
            }
            return Ok(());
        }
        if present != 1 {
            return bad(format!("expected exactly one {} payload", self.model_type.id()));
        }
        let model = match self.intensity_model() {
            Some(m) => m,
            None => return bad(format!("model_type {} has no matching payload", self.model_type.id())),
        };
        if model.covariate_set() != self.covariate_set {
            return bad("covariate_set differs between header and payload".into());
        }
        let expected: Vec<String> = self.covariate_set.columns().iter().map(|c| c.name().to_string()).collect();
        if self.covariate_order != expected {
            return bad(format!("covariate_order must be {expected:?}"));
        }
        if model.k() != self.k {
            return bad(format!("k = {} in header but {} in payload", self.k, model.k()));
        }
        let scaler = model.scaler();
        if scaler.covariates.iter().chain([&scaler.response]).any(|s| !(s.sd > 0.0)) {
            return bad("scaler standard deviations must be positive".into());
        }
        match &self.scaler_hash {
            Some(h) if *h != scaler_hash(scaler) => return bad("scaler hash mismatch".into()),
            _ => {}
        }
        let p = self.covariate_set.len();
        let check_fit = |f: &LinearFit, what: &str| -> Result<()> {
            if f.coefficients.len() != p || !(f.sigma >= 0.0) || !f.intercept.is_finite() {
                return Err(Error::Schema(format!("{what}: needs {p} coefficients and sigma >= 0")));
            }
            Ok(())
        };
        let check_mnl = |m: &MnlFit, k: usize, p: usize, what: &str| -> Result<()> {
            if m.k() != k || m.coefficients.iter().any(|g| g.len() != p) {
                return Err(Error::Schema(format!("{what}: needs {k} categories of {p} coefficients")));
            }
            if m.intercepts[k - 1] != 0.0 || m.coefficients[k - 1].iter().any(|g| *g != 0.0) {
                return Err(Error::Schema(format!("{what}: baseline category must be zero")));
            }
            Ok(())
        };
        match &model {
            IntensityModel::Ols(m) => check_fit(&m.fit, "ols")?,
            IntensityModel::Fmr(m) => {
                if m.components.len() != m.k {
                    return bad("fmr: component count differs from k".into());
                }
                for (i, c) in m.components.iter().enumerate() {
                    check_fit(&c.fit, &format!("fmr component {}", i + 1))?;
                    if !(c.weight > 0.0) {
                        return bad(format!("fmr component {}: weight must be positive", i + 1));
                    }
                }
                let total: f64 = m.components.iter().map(|c| c.weight).sum();
                if (total - 1.0).abs() > 1e-6 {
                    return bad(format!("fmr: weights sum to {total}"));
                }
                if m.k > 1 {
                    check_mnl(&m.classifier, m.k, p, "fmr classifier")?;
                }
            }
            IntensityModel::Mehim(m) => {
                if m.emissions.len() != m.k || m.transitions.len() != m.k {
                    return bad("mehim: emission or transition count differs from k".into());
                }
                for (i, e) in m.emissions.iter().enumerate() {
                    check_fit(e, &format!("mehim emission {}", i + 1))?;
                }
                for (i, b) in m.transitions.iter().enumerate() {
                    check_mnl(b, m.k, p, &format!("mehim transitions from state {}", i + 1))?;
                }
                check_mnl(&m.initial, m.k, 3, "mehim initial block")?;
            }
        }
        Ok(())
    }
}

fn covariate_header(set: CovariateSet) -> String {
    let mut s = format!("{:<12}{:>10}", "", "Intercept");
    for c in set.columns() {
        let _ = write!(s, "{:>10}", short_name(*c));
    }
    s
}

fn short_name(c: Covariate) -> &'static str {
    match c {
        Covariate::DvP => "DV_p",
        Covariate::V => "V",
        Covariate::Mpi => "MPI",
        Covariate::Shr => "SHR",
        Covariate::Rh => "RH",
        Covariate::Ocn => "OCN",
    }
}

fn fit_row(label: &str, f: &LinearFit) -> String {
    let mut s = format!("{label:<12}{:>10.3}", f.intercept);
    for c in &f.coefficients {
        let _ = write!(s, "{c:>10.3}");
    }
    s
}

fn mnl_rows(out: &mut String, m: &MnlFit, prefix: &str) {
    for (r, (a, g)) in m.intercepts.iter().zip(&m.coefficients).enumerate() {
        let _ = write!(out, "{:<12}{a:>10.3}", format!("{prefix}{}", r + 1));
        for c in g {
            let _ = write!(out, "{c:>10.3}");
        }
        out.push('\n');
    }
}

/// Human-readable coefficient tables.
pub fn report(model: &IntensityModel) -> String {
    let set = model.covariate_set();
    let mut out = String::new();
    let md = model.metadata();
    match model {
        IntensityModel::Ols(m) => {
            let _ = writeln!(out, "OLS model ({} covariates)", set.id());
            let _ = writeln!(out, "{}{:>10}", covariate_header(set), "sigma");
            let _ = writeln!(out, "{}{:>10.3}", fit_row("", &m.fit), m.fit.sigma);
        }
        IntensityModel::Fmr(m) => {
            let _ = writeln!(out, "FMR model, k = {} ({} covariates)", m.k, set.id());
            let _ = writeln!(out, "Response model");
            let _ = writeln!(out, "{:<12}{:>10}{}{:>10}", "", "Weight", &covariate_header(set)[12..], "sigma");
            for (i, c) in m.components.iter().enumerate() {
                let row = fit_row(&format!("Group {}", i + 1), &c.fit);
                let _ = writeln!(out, "{}{:>10.3}{}{:>10.3}", &row[..12], c.weight, &row[12..], c.fit.sigma);
            }
            if m.k > 1 {
                let _ = writeln!(out, "Classification model");
                let _ = writeln!(out, "{}", covariate_header(set));
                mnl_rows(&mut out, &m.classifier, "Group ");
            }
        }
        IntensityModel::Mehim(m) => {
            let _ = writeln!(out, "MeHiM model, k = {} ({} covariates)", m.k, set.id());
            let _ = writeln!(out, "Response model");
            let _ = writeln!(out, "{}{:>10}", covariate_header(set), "sigma");
            for (i, e) in m.emissions.iter().enumerate() {
                let _ = writeln!(out, "{}{:>10.3}", fit_row(&format!("State {}", i + 1), e), e.sigma);
            }
            if m.k > 1 {
                let _ = writeln!(out, "Transition model");
                let _ = writeln!(out, "{}", covariate_header(set));
                for (i, b) in m.transitions.iter().enumerate() {
                    let _ = writeln!(out, "From state {}", i + 1);
                    mnl_rows(&mut out, b, "  to ");
                }
                let _ = writeln!(out, "Initial-state model");
                let _ = writeln!(out, "{:<12}{:>10}{:>10}{:>10}{:>10}", "", "Intercept", "MPI", "SHR", "RH");
                mnl_rows(&mut out, &m.initial, "State ");
            }
        }
    }
    let _ = writeln!(
        out,
        "log-likelihood {:.4}, iterations {}, n = {} in {} sequences",
        md.log_likelihood, md.iterations, md.n_obs, md.n_sequences
    );
    out
}

pub fn land_report(m: &LandModel) -> String {
    format!(
        "Land decay model\nalpha {:.6} per 6 h, V_b {:.4} kt, reduction factor {}, {} segments, SSE {:.6}\n",
        m.alpha, m.v_b, m.reduction_factor, m.n_segments, m.objective
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::VarStats;
    use crate::hmm::{sequence_loglik, HmmSequence, MehimModel};

    fn scaler() -> Scaler {
        let mut s = Scaler::identity();
        s.covariates[1] = VarStats { mean: 55.5, sd: 24.1 };
        s.response = VarStats { mean: 0.37, sd: 6.2 };
        s
    }

    fn mehim() -> MehimModel {
        let mut m = MehimModel::zeros(3, CovariateSet::Full);
        m.scaler = scaler();
        m.emissions[0].sigma = 0.097;
        m.emissions[1] = LinearFit {
            intercept: 0.072,
            coefficients: vec![0.593, -0.143, 0.105, -0.044, 0.069, 0.039],
            sigma: 0.722,
        };
        m.emissions[2].sigma = 1.979;
        m.transitions[0].intercepts = vec![4.663, 4.553, 0.0];
        m.transitions[0].coefficients[0] = vec![-0.103, -1.233, -2.713, -0.806, 0.022, -0.670];
        m.initial.intercepts = vec![0.1 / 3.0, -0.7, 0.0];
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let model = IntensityModel::Mehim(mehim());
        let file = ModelFile::from_model(&model, Some(LandModel::new(0.049, 18.82)), None);
        let back = ModelFile::from_json(&file.to_json().unwrap()).unwrap();
        assert_eq!(back, file);
        let seq = HmmSequence {
            x: (0..5).map(|t| vec![0.1 * t as f64; 6]).collect(),
            x0: vec![0.2, -0.1, 0.3],
            y: vec![0.3, -0.2, 1.1, 0.0, 2.5],
        };
        let IntensityModel::Mehim(m2) = back.bundle().unwrap().model else { panic!() };
        assert_eq!(sequence_loglik(&m2, &seq), sequence_loglik(&mehim(), &seq));
    }

    #[test]
    fn tampered_scaler_is_rejected() {
        let model = IntensityModel::Mehim(mehim());
        let text = ModelFile::from_model(&model, None, None).to_json().unwrap();
        let tampered = text.replacen("55.5", "56.5", 1);
        assert!(matches!(ModelFile::from_json(&tampered), Err(Error::Schema(_))));
    }

    #[test]
    fn wrong_version_and_dimension_rejected() {
        let model = IntensityModel::Mehim(mehim());
        let mut file = ModelFile::from_model(&model, None, None);
        file.schema_version = 99;
        assert!(file.validate().is_err());
        let mut file = ModelFile::from_model(&model, None, None);
        file.mehim.as_mut().unwrap().emissions[0].coefficients.pop();
        assert!(file.validate().is_err());
        let mut file = ModelFile::from_model(&model, None, None);
        file.mehim.as_mut().unwrap().transitions[1].intercepts[2] = 0.5;
        assert!(file.validate().is_err());
    }

    #[test]
    fn report_lists_every_state() {
        let r = report(&IntensityModel::Mehim(mehim()));
        assert!(r.contains("State 3") && r.contains("From state 3") && r.contains("4.663"));
    }
}
