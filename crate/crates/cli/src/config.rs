//! Run configuration: one JSON document, overridden by command-line flags.
//!
//! Precedence, highest first: flags, the `--config` file, built-in defaults.
//! A manifest written by a previous run is also accepted as a config file;
//! its `config` member is used.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tcim_core::evaluate::{EvalConfig, RegionSpec};
use tcim_core::ingest::IngestConfig;
use tcim_core::simulate::SimConfig;
use tcim_core::{Error, Result};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FitKind {
    Ols,
    Fmr,
    Mehim,
    Land,
}

impl FitKind {
    pub fn id(self) -> &'static str {
        match self {
            FitKind::Ols => "ols",
            FitKind::Fmr => "fmr",
            FitKind::Mehim => "mehim",
            FitKind::Land => "land",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSettings {
    pub kind: Option<FitKind>,
    pub k: usize,
    pub restarts: usize,
    pub tol: f64,
    pub max_iter: Option<usize>,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            kind: None,
            k: 3,
            restarts: 10,
            tol: 1e-8,
            max_iter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub tracks: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Master seed for fitting restarts and simulation.
    pub seed: u64,
    /// Ocean intensity model file (simulate, decode).
    pub model: Option<PathBuf>,
    /// Land model file; embedded into fitted ocean models and overrides
    /// the land block of a model file at simulation time.
    pub land: Option<PathBuf>,
    /// Simulate only these storms; all when empty.
    pub storms: Vec<String>,
    /// Ensemble output directories to evaluate.
    pub ensembles: Vec<PathBuf>,
    /// Region file merged into `evaluate.regions`.
    pub regions: Option<PathBuf>,
    pub ingest: IngestConfig,
    pub fit: FitSettings,
    pub simulate: SimConfig,
    pub evaluate: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tracks: None,
            out: None,
            seed: DEFAULT_SEED,
            model: None,
            land: None,
            storms: Vec::new(),
            ensembles: Vec::new(),
            regions: None,
            ingest: IngestConfig::default(),
            fit: FitSettings::default(),
            simulate: SimConfig::default(),
            evaluate: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        if doc.get("tool").is_some() {
            if let Some(inner) = doc.get_mut("config") {
                doc = inner.take();
            }
        }
        serde_json::from_value(doc).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn require_tracks(&self) -> Result<&Path> {
        require_file("tracks", self.tracks.as_deref())
    }

    pub fn require_model(&self) -> Result<&Path> {
        require_file("model", self.model.as_deref())
    }

    /// Regions from the config plus those in the region file.
    pub fn regions(&self) -> Result<Vec<RegionSpec>> {
        let mut regions = self.evaluate.regions.clone();
        if let Some(path) = &self.regions {
            regions.extend(load_regions(path)?);
        }
        Ok(regions)
    }

    /// Keep the simulation seed in step with the master seed and check
    /// every section.
    pub fn finalize(mut self) -> Result<Self> {
        self.simulate.master_seed = self.seed;
        self.simulate.bg_fraction = self.ingest.bg_fraction;
        self.simulate.validate()?;
        self.evaluate.validate()?;
        if self.fit.k == 0 {
            return Err(Error::Validation("fit.k must be at least 1".into()));
        }
        if self.fit.restarts == 0 {
            return Err(Error::Validation("fit.restarts must be at least 1".into()));
        }
        if !(self.ingest.bg_fraction >= 0.0) {
            return Err(Error::Validation("bg_fraction must be non-negative".into()));
        }
        for p in self.land.iter().chain(&self.regions) {
            require_file("input", Some(p))?;
        }
        for d in &self.ensembles {
            if !d.is_dir() {
                return Err(Error::Validation(format!("ensemble directory {} not found", d.display())));
            }
        }
        Ok(self)
    }
}

fn require_file<'a>(what: &str, path: Option<&'a Path>) -> Result<&'a Path> {
    let path = path.ok_or_else(|| Error::Validation(format!("no {what} path given")))?;
    if !path.is_file() {
        return Err(Error::Validation(format!("{what} file {} not found", path.display())));
    }
    Ok(path)
}

/// Region file: either a bare list of regions or `{"regions": [...]}` with
/// optional descriptive members.
#[derive(Deserialize)]
#[serde(untagged)]
enum RegionFile {
    List(Vec<RegionSpec>),
    Doc { regions: Vec<RegionSpec> },
}

pub fn load_regions(path: &Path) -> Result<Vec<RegionSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: RegionFile = serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let regions = match file {
        RegionFile::List(r) | RegionFile::Doc { regions: r } => r,
    };
    regions.iter().try_for_each(RegionSpec::validate)?;
    Ok(regions)
}
