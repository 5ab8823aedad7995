use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use serde_json::json;
use tcim_core::domain::StormRecord;
use tcim_core::evaluate::{evaluate_source, write_tables, EvalConfig, SourceData, Trajectory};
use tcim_core::fsutil::write_atomic;
use tcim_core::hmm::{mehim_fit_sequences, viterbi, HmmConfig, HmmSequence};
use tcim_core::ingest::{apply_scaler, build_dataset, invert_scaler, parse_tracks, Dataset, IngestConfig, ParseOptions};
use tcim_core::landdecay::{land_fit, LandModel};
use tcim_core::mixture::{fmr_fit, EmConfig};
use tcim_core::model::{land_report, ols_model_fit, report, sha256_hex, IntensityModel, ModelFile, ModelType};
use tcim_core::simulate::{ensemble_csv, read_ensemble_csv, simulate_ensemble};
use tcim_core::synthetic::{synthetic_tracks_csv, TrackSynthOptions};
use tcim_core::{Error, Result};

use crate::config::{FitKind, RunConfig};

/// Output-directory record of one command: enough to re-run it.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: RunConfig,
    /// Input path to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Output file name to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

impl Manifest {
    fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            tool: "tcim",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            details: serde_json::Value::Null,
        }
    }

    fn input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn write_output(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&dir.join(name), bytes)?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(manifest_name(&self.command));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

pub fn manifest_name(command: &str) -> String {
    format!("manifest_{}.json", command.replace(' ', "_"))
}

fn load_storms(manifest: &mut Manifest, path: &Path, options: &ParseOptions) -> Result<Vec<StormRecord>> {
    let _ = manifest.input(path)?;
    parse_tracks(path, options)
}

fn load_land(manifest: &mut Manifest, path: &Path) -> Result<LandModel> {
    let _ = manifest.input(path)?;
    let file = ModelFile::load(path)?;
    file.land.ok_or_else(|| Error::Schema(format!("{}: no land model", path.display())))
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model_path: PathBuf,
    pub model_hash: String,
    pub report: String,
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<FitOutcome> {
    let kind = cfg
        .fit
        .kind
        .ok_or_else(|| Error::Validation("no model type to fit (ols, fmr, mehim or land)".into()))?;
    let command = format!("fit {}", kind.id());
    let mut manifest = Manifest::new(&command, cfg);
    let tracks = cfg.require_tracks()?;
    let storms = load_storms(&mut manifest, tracks, &cfg.ingest.parse_options())?;
    let data = build_dataset(storms, &cfg.ingest)?;
    info!(
        "{} storms, {} sequences, {} observations, {} land segments",
        data.counts.n_storms, data.counts.n_sequences, data.counts.n_observations, data.counts.n_land_segments
    );
    let land = cfg.land.as_deref().map(|p| load_land(&mut manifest, p)).transpose()?;

    let (file, mut text) = match kind {
        FitKind::Land => {
            let m = land_fit(&data.land_segments)?;
            (ModelFile::from_land(m.clone()), land_report(&m))
        }
        _ => {
            let model = fit_intensity(kind, cfg, &data)?;
            let mut text = report(&model);
            if let Some(l) = &land {
                text.push_str(&land_report(l));
            }
            (ModelFile::from_model(&model, land, Some(cfg.ingest.clone())), text)
        }
    };
    let _ = writeln!(
        text,
        "data: {} storms, {} sequences, {} observations, {} land segments",
        data.counts.n_storms, data.counts.n_sequences, data.counts.n_observations, data.counts.n_land_segments
    );

    let out = cfg.out_dir();
    let name = format!("model_{}.json", kind.id());
    let json = file.to_json()?;
    manifest.write_output(&out, &name, json.as_bytes())?;
    manifest.write_output(&out, &format!("report_{}.txt", kind.id()), text.as_bytes())?;
    manifest.details = json!({ "counts": data.counts });
    manifest.save(&out)?;
    Ok(FitOutcome {
        model_path: out.join(name),
        model_hash: sha256_hex(json.as_bytes()),
        report: text,
    })
}

fn fit_intensity(kind: FitKind, cfg: &RunConfig, data: &Dataset) -> Result<IntensityModel> {
    let f = &cfg.fit;
    let em = EmConfig {
        k: f.k,
        restarts: f.restarts,
        tol: f.tol,
        seed: cfg.seed,
        max_iter: f.max_iter.unwrap_or(EmConfig::default().max_iter),
        ..Default::default()
    };
    let (x, y) = data.pooled();
    match kind {
        FitKind::Ols => Ok(IntensityModel::Ols(ols_model_fit(data)?)),
        FitKind::Fmr => {
            let (m, _) = fmr_fit(&x, &y, &data.scaler, data.covariate_set, &em, data.sequences.len())?;
            Ok(IntensityModel::Fmr(m))
        }
        FitKind::Mehim => {
            // a mixture fit seeds the first restart's emissions
            let start = if f.k > 1 {
                Some(fmr_fit(&x, &y, &data.scaler, data.covariate_set, &em, data.sequences.len())?.1.components)
            } else {
                None
            };
            let start: Option<Vec<_>> = start.map(|c| c.into_iter().map(|c| c.fit).collect());
            let hc = HmmConfig {
                k: f.k,
                restarts: f.restarts,
                tol: f.tol,
                seed: cfg.seed,
                max_iter: f.max_iter.unwrap_or(HmmConfig::default().max_iter),
                ..Default::default()
            };
            let fit = mehim_fit_sequences(&data.sequences, data.covariate_set, &data.scaler, &hc, start.as_deref())?;
            Ok(IntensityModel::Mehim(fit.model))
        }
        FitKind::Land => unreachable!("land models are fitted separately"),
    }
}

/// Parse options matching the ingest settings stored with a model.
fn model_parse_options(file: &ModelFile, cfg: &RunConfig) -> (IngestConfig, ParseOptions) {
    let ingest = file.ingest.clone().unwrap_or_else(|| cfg.ingest.clone());
    let options = ParseOptions {
        bg_fraction: ingest.bg_fraction,
        require_ocean: file.covariate_set.uses_ocn(),
    };
    (ingest, options)
}

#[derive(Debug, Clone)]
pub struct SimulateOutcome {
    pub files: Vec<PathBuf>,
    pub model_type: ModelType,
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulateOutcome> {
    let mut manifest = Manifest::new("simulate", cfg);
    let model_path = cfg.require_model()?;
    let model_bytes = manifest.input(model_path)?;
    let model_hash = sha256_hex(&model_bytes);
    let file = ModelFile::load(model_path)?;
    let mut bundle = file.bundle()?;
    if let Some(p) = &cfg.land {
        bundle.land = Some(load_land(&mut manifest, p)?);
    }
    let (_, options) = model_parse_options(&file, cfg);
    let storms = load_storms(&mut manifest, cfg.require_tracks()?, &options)?;
    for id in &cfg.storms {
        if !storms.iter().any(|s| &s.storm_id == id) {
            return Err(Error::Validation(format!("storm {id} not in the tracks file")));
        }
    }

    let out = cfg.out_dir();
    let mut files = Vec::new();
    let mut per_storm = BTreeMap::new();
    for storm in &storms {
        if !cfg.storms.is_empty() && !cfg.storms.contains(&storm.storm_id) {
            continue;
        }
        if storm.len() < 3 {
            warn!("storm {}: {} points, too short to simulate", storm.storm_id, storm.len());
            continue;
        }
        let result = simulate_ensemble(&bundle, storm, &cfg.simulate, &model_hash)?;
        let name = ensemble_file_name(&storm.storm_id);
        manifest.write_output(&out, &name, ensemble_csv(&result, storm).as_bytes())?;
        per_storm.insert(
            storm.storm_id.clone(),
            json!({
                "seeds": result.realizations.iter().map(|r| r.seed).collect::<Vec<_>>(),
                "ri_windows": result.windows,
            }),
        );
        files.push(out.join(name));
    }
    manifest.details = json!({
        "model_type": bundle.model.model_type().id(),
        "model_hash": model_hash,
        "master_seed": cfg.simulate.master_seed,
        "storms": per_storm,
    });
    manifest.save(&out)?;
    Ok(SimulateOutcome {
        files,
        model_type: bundle.model.model_type(),
    })
}

pub fn ensemble_file_name(storm_id: &str) -> String {
    format!("ensemble_{storm_id}.csv")
}

/// Per-storm realization intensity series.
type Ensembles = Vec<(String, Vec<Vec<f64>>)>;

/// Ensembles in `dir` for the given storms, with the model name recorded by
/// the simulation run (or the directory name when no manifest is present).
fn load_ensembles(dir: &Path, storms: &[StormRecord], manifest: &mut Manifest) -> Result<(String, Vec<Trajectory>, Ensembles)> {
    let mpath = dir.join(manifest_name("simulate"));
    let model = if mpath.is_file() {
        let bytes = manifest.input(&mpath)?;
        let doc: serde_json::Value = serde_json::from_slice(&bytes)?;
        doc["details"]["model_type"].as_str().unwrap_or("sim").to_string()
    } else {
        dir.file_name().map_or("sim".into(), |n| n.to_string_lossy().into_owned())
    };
    let mut trajs = Vec::new();
    let mut ensembles = Vec::new();
    for storm in storms {
        let path = dir.join(ensemble_file_name(&storm.storm_id));
        if !path.is_file() {
            continue;
        }
        let _ = manifest.input(&path)?;
        let reals = read_ensemble_csv(&path)?;
        if reals.iter().any(|(v, _)| v.len() > storm.len()) {
            return Err(Error::Validation(format!(
                "{}: longer than the track of storm {}",
                path.display(),
                storm.storm_id
            )));
        }
        for (i, (v, _)) in reals.iter().enumerate() {
            trajs.push(Trajectory::simulated(storm, i, v));
        }
        ensembles.push((storm.storm_id.clone(), reals.into_iter().map(|(v, _)| v).collect()));
    }
    if ensembles.is_empty() {
        return Err(Error::Validation(format!("{}: no ensemble files for these storms", dir.display())));
    }
    Ok((model, trajs, ensembles))
}

#[derive(Debug, Clone)]
pub struct EvaluateOutcome {
    pub files: Vec<PathBuf>,
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvaluateOutcome> {
    let mut manifest = Manifest::new("evaluate", cfg);
    let options = ParseOptions {
        bg_fraction: cfg.ingest.bg_fraction,
        require_ocean: false,
    };
    let storms = load_storms(&mut manifest, cfg.require_tracks()?, &options)?;
    let eval = EvalConfig {
        regions: cfg.regions()?,
        ..cfg.evaluate.clone()
    };
    if let Some(p) = &cfg.regions {
        let _ = manifest.input(p)?;
    }

    let mut sources = vec![SourceData {
        source: "obs",
        model: "obs",
        trajectories: storms.iter().map(Trajectory::observed).collect(),
        ensembles: Vec::new(),
    }];
    let loaded = cfg
        .ensembles
        .iter()
        .map(|d| load_ensembles(d, &storms, &mut manifest))
        .collect::<Result<Vec<_>>>()?;
    for (model, trajectories, ensembles) in &loaded {
        sources.push(SourceData {
            source: "sim",
            model,
            trajectories: trajectories.clone(),
            ensembles: ensembles.clone(),
        });
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in &sources {
        if !seen.insert((s.source, s.model)) {
            return Err(Error::Validation(format!("two ensemble directories for model {}", s.model)));
        }
    }

    let mut tables = Vec::new();
    for s in &sources {
        tables.extend(evaluate_source(s, &eval));
    }
    let out = cfg.out_dir();
    let index = write_tables(&out, &tables, json!({ "percentile_convention": "linear interpolation, (n - 1) p" }))?;
    for e in &index {
        manifest.outputs.insert(e.file.clone(), e.sha256.clone());
    }
    manifest.save(&out)?;
    Ok(EvaluateOutcome {
        files: index.iter().map(|e| out.join(&e.file)).collect(),
    })
}

pub fn cmd_decode(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut manifest = Manifest::new("decode", cfg);
    let model_path = cfg.require_model()?;
    let _ = manifest.input(model_path)?;
    let file = ModelFile::load(model_path)?;
    let Some(IntensityModel::Mehim(model)) = file.intensity_model() else {
        return Err(Error::Validation(format!(
            "{}: decoding needs a mehim model, found {}",
            model_path.display(),
            file.model_type.id()
        )));
    };
    let (ingest, options) = model_parse_options(&file, cfg);
    let storms = load_storms(&mut manifest, cfg.require_tracks()?, &options)?;
    let data = build_dataset(storms, &ingest)?;

    let out = cfg.out_dir();
    let mut rows: BTreeMap<String, String> = BTreeMap::new();
    let mut counters: BTreeMap<String, usize> = BTreeMap::new();
    for seq in &data.sequences {
        // re-standardize with the model's own scaler
        let seq = apply_scaler(&model.scaler, &invert_scaler(&data.scaler, seq));
        let path = viterbi(&model, &HmmSequence::from_ocean(&seq, model.covariate_set));
        let storm = data.storms.iter().find(|s| s.storm_id == seq.storm_id).expect("sequence from a parsed storm");
        let n = counters.entry(seq.storm_id.clone()).or_default();
        let text = rows
            .entry(seq.storm_id.clone())
            .or_insert_with(|| String::from("sequence,step_index,time,dv_kt,state\n"));
        for (i, s) in path.states.iter().enumerate() {
            let t = seq.start_index + i;
            let _ = writeln!(
                text,
                "{},{t},{},{:.6},{}",
                *n,
                storm.points[t].track.time.format("%Y-%m-%dT%H:%M:%SZ"),
                model.scaler.unstandardize_response(seq.responses[i]),
                s + 1
            );
        }
        *n += 1;
    }
    let mut files = Vec::new();
    for (id, text) in rows {
        let name = format!("states_{id}.csv");
        manifest.write_output(&out, &name, text.as_bytes())?;
        files.push(out.join(name));
    }
    manifest.save(&out)?;
    Ok(files)
}

/// Dataset summary as pretty JSON.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<String> {
    let storms = parse_tracks(cfg.require_tracks()?, &cfg.ingest.parse_options())?;
    let data = build_dataset(storms, &cfg.ingest)?;
    let mut text = serde_json::to_string_pretty(&data.summary(&cfg.ingest))?;
    text.push('\n');
    if let Some(out) = &cfg.out {
        write_atomic(&out.join("dataset_summary.json"), text.as_bytes())?;
    }
    Ok(text)
}

/// Write the demonstration dataset.
pub fn cmd_synth(path: &Path, n_storms: usize, seed: u64) -> Result<()> {
    let opts = TrackSynthOptions {
        n_storms,
        seed,
        ..Default::default()
    };
    write_atomic(path, synthetic_tracks_csv(&opts).as_bytes())
}
