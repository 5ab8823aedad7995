//! Intensity-climatology metrics for observed storms and simulated
//! ensembles, emitted as plot-ready tables.
//!
//! Percentiles use linear interpolation between closest ranks (the
//! `(n - 1) p` rule). Histogram bins are `[i w, (i + 1) w)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::StormRecord;
use crate::error::{Error, Result};
use crate::simulate::{ri_onsets, EnsembleResult};

/// One intensity history with its track, observed or simulated.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub storm_id: String,
    /// `None` for observations.
    pub realization: Option<usize>,
    pub v: Vec<f64>,
    pub over_land: Vec<bool>,
    pub lat: Vec<f64>,
    pub lon: Vec<f64>,
}

impl Trajectory {
    pub fn observed(storm: &StormRecord) -> Self {
        Self {
            storm_id: storm.storm_id.clone(),
            realization: None,
            v: storm.v.clone(),
            over_land: storm.over_land(),
            lat: storm.points.iter().map(|p| p.track.lat).collect(),
            lon: storm.points.iter().map(|p| p.track.lon).collect(),
        }
    }

    /// Simulated intensities on the storm's track, truncated where the run
    /// stopped.
    pub fn simulated(storm: &StormRecord, realization: usize, v: &[f64]) -> Self {
        let n = v.len();
        let mut t = Self::observed(storm);
        t.realization = Some(realization);
        t.v = v.to_vec();
        t.over_land.truncate(n);
        t.lat.truncate(n);
        t.lon.truncate(n);
        t
    }

    pub fn from_ensemble(storm: &StormRecord, ensemble: &EnsembleResult) -> Vec<Self> {
        ensemble.realizations.iter().map(|r| Self::simulated(storm, r.index, &r.v)).collect()
    }
}

/// Linear-interpolation percentile of sorted data, `p` in `[0, 100]`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> Option<f64> {
    let n = sorted.len();
    if n == 0 {
        return None;
    }
    let h = (n - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    percentile_sorted(&s, p)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_sd(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DvWindow {
    #[serde(rename = "6h")]
    SixHour,
    #[serde(rename = "24h")]
    Day,
}

impl DvWindow {
    pub fn steps(self) -> usize {
        match self {
            DvWindow::SixHour => 1,
            DvWindow::Day => 4,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            DvWindow::SixHour => "6h",
            DvWindow::Day => "24h",
        }
    }
}

/// Intensity changes over windows lying entirely over ocean.
pub fn ocean_changes(traj: &Trajectory, window: DvWindow) -> Vec<f64> {
    let s = window.steps();
    (0..traj.v.len().saturating_sub(s))
        .filter(|&t| !traj.over_land[t..=t + s].iter().any(|l| *l))
        .map(|t| traj.v[t + s] - traj.v[t])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bin_width: f64,
    /// `(lower edge, count, density)`, contiguous from the lowest to the
    /// highest occupied bin.
    pub bins: Vec<(f64, usize, f64)>,
    pub total: usize,
}

pub fn histogram(values: &[f64], bin_width: f64) -> Histogram {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for v in values {
        *counts.entry((v / bin_width).floor() as i64).or_default() += 1;
    }
    let n = values.len();
    let bins = match (counts.keys().next(), counts.keys().next_back()) {
        (Some(&lo), Some(&hi)) => (lo..=hi)
            .map(|b| {
                let c = counts.get(&b).copied().unwrap_or(0);
                (b as f64 * bin_width, c, c as f64 / (n as f64 * bin_width))
            })
            .collect(),
        _ => Vec::new(),
    };
    Histogram { bin_width, bins, total: n }
}

pub fn dv_histogram(trajs: &[Trajectory], window: DvWindow, bin_width: f64) -> Histogram {
    let values: Vec<f64> = trajs.iter().flat_map(|t| ocean_changes(t, window)).collect();
    histogram(&values, bin_width)
}

/// Largest 24-h ocean rise reaches the rapid-intensification threshold.
pub fn is_ri(traj: &Trajectory) -> bool {
    ri_onsets(&traj.v, &traj.over_land).iter().any(|r| *r)
}

pub fn lmi(traj: &Trajectory) -> f64 {
    traj.v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmiRecord {
    pub storm_id: String,
    pub realization: Option<usize>,
    pub lmi: f64,
    pub ri: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmiStats {
    pub records: Vec<LmiRecord>,
    pub ri_fraction: f64,
    /// `(x, all, ri, non_ri)` Gaussian kernel densities; a group with fewer
    /// than two values or zero spread has density 0 everywhere.
    pub kde: Vec<(f64, f64, f64, f64)>,
    pub bandwidth: [f64; 3],
}

/// Silverman's rule of thumb, `0.9 min(sd, IQR / 1.34) n^(-1/5)`.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let iqr = percentile_sorted(&s, 75.0).unwrap_or(0.0) - percentile_sorted(&s, 25.0).unwrap_or(0.0);
    let sd = sample_sd(&s);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (values.len() as f64).powf(-0.2)
}

pub fn kde(values: &[f64], h: f64, x: f64) -> f64 {
    if !(h > 0.0) {
        return 0.0;
    }
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    values.iter().map(|v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum::<f64>() * norm
}

pub fn lmi_stats(trajs: &[Trajectory], kde_step: f64) -> LmiStats {
    let records: Vec<LmiRecord> = trajs
        .iter()
        .filter(|t| !t.v.is_empty())
        .map(|t| LmiRecord {
            storm_id: t.storm_id.clone(),
            realization: t.realization,
            lmi: lmi(t),
            ri: is_ri(t),
        })
        .collect();
    let all: Vec<f64> = records.iter().map(|r| r.lmi).collect();
    let ri: Vec<f64> = records.iter().filter(|r| r.ri).map(|r| r.lmi).collect();
    let non: Vec<f64> = records.iter().filter(|r| !r.ri).map(|r| r.lmi).collect();
    let ri_fraction = if records.is_empty() { 0.0 } else { ri.len() as f64 / records.len() as f64 };
    let bandwidth = [silverman_bandwidth(&all), silverman_bandwidth(&ri), silverman_bandwidth(&non)];
    let mut kde_rows = Vec::new();
    if !all.is_empty() && bandwidth[0] > 0.0 {
        let lo = ((all.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * bandwidth[0]) / kde_step).floor() as i64;
        let hi = ((all.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * bandwidth[0]) / kde_step).ceil() as i64;
        for i in lo..=hi {
            let x = i as f64 * kde_step;
            kde_rows.push((x, kde(&all, bandwidth[0], x), kde(&ri, bandwidth[1], x), kde(&non, bandwidth[2], x)));
        }
    }
    LmiStats {
        records,
        ri_fraction,
        kde: kde_rows,
        bandwidth,
    }
}

/// Named coastline region as a polygon of `[lat, lon]` vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    pub polygon: Vec<[f64; 2]>,
}

impl RegionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.polygon.len() < 3 {
            return Err(Error::Validation(format!("region {}: a polygon needs at least 3 vertices", self.name)));
        }
        Ok(())
    }

    /// Closed containment: points on an edge or vertex are inside.
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        let poly = &self.polygon;
        let n = poly.len();
        let mut inside = false;
        for i in 0..n {
            let [y1, x1] = poly[i];
            let [y2, x2] = poly[(i + 1) % n];
            let cross = (x2 - x1) * (lat - y1) - (y2 - y1) * (lon - x1);
            let scale = ((x2 - x1).abs() + (y2 - y1).abs()).max(1.0);
            if cross.abs() <= 1e-12 * scale && lon >= x1.min(x2) - 1e-12 && lon <= x1.max(x2) + 1e-12 && lat >= y1.min(y2) - 1e-12 && lat <= y1.max(y2) + 1e-12
            {
                return true;
            }
            if (y1 > lat) != (y2 > lat) {
                let x_at = x1 + (lat - y1) * (x2 - x1) / (y2 - y1);
                if lon < x_at {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

pub const OTHER_REGION: &str = "other";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandfallEvent {
    pub storm_id: String,
    pub realization: Option<usize>,
    pub step_index: usize,
    pub region: String,
    /// Intensity at the last ocean point, kt.
    pub v: f64,
    /// Location of the first land point.
    pub lat: f64,
    pub lon: f64,
}

/// Ocean-to-land transitions, assigned to the first region containing the
/// first land point, else `"other"`.
pub fn landfall_events(trajs: &[Trajectory], regions: &[RegionSpec]) -> Vec<LandfallEvent> {
    let mut out = Vec::new();
    for traj in trajs {
        for t in 1..traj.v.len() {
            if traj.over_land[t] && !traj.over_land[t - 1] {
                let (lat, lon) = (traj.lat[t], traj.lon[t]);
                let region = regions
                    .iter()
                    .find(|r| r.contains(lat, lon))
                    .map_or_else(|| OTHER_REGION.to_string(), |r| r.name.clone());
                out.push(LandfallEvent {
                    storm_id: traj.storm_id.clone(),
                    realization: traj.realization,
                    step_index: t,
                    region,
                    v: traj.v[t - 1],
                    lat,
                    lon,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandfallBand {
    pub region: String,
    pub bin_lo: f64,
    /// Density per kt of the pooled events.
    pub density: f64,
    pub p15: f64,
    pub p50: f64,
    pub p85: f64,
}

/// Per region and intensity bin, the pooled density and the 15th, 50th and
/// 85th percentiles across realizations of per-realization densities.
/// Observations form a single group.
pub fn landfall_bands(events: &[LandfallEvent], regions: &[RegionSpec], bin_width: f64) -> Vec<LandfallBand> {
    let mut names: Vec<String> = regions.iter().map(|r| r.name.clone()).collect();
    names.push(OTHER_REGION.to_string());
    let groups: Vec<Option<usize>> = {
        let mut g: Vec<Option<usize>> = events.iter().map(|e| e.realization).collect();
        g.sort();
        g.dedup();
        g
    };
    let mut out = Vec::new();
    for name in names {
        let in_region: Vec<&LandfallEvent> = events.iter().filter(|e| e.region == name).collect();
        if in_region.is_empty() {
            continue;
        }
        let pooled = histogram(&in_region.iter().map(|e| e.v).collect::<Vec<_>>(), bin_width);
        for (lo, _, density) in pooled.bins {
            let per_group: Vec<f64> = groups
                .iter()
                .map(|g| {
                    let vs: Vec<f64> = in_region.iter().filter(|e| e.realization == *g).map(|e| e.v).collect();
                    if vs.is_empty() {
                        return 0.0;
                    }
                    let c = vs.iter().filter(|v| (*v / bin_width).floor() * bin_width == lo).count();
                    c as f64 / (vs.len() as f64 * bin_width)
                })
                .collect();
            out.push(LandfallBand {
                region: name.clone(),
                bin_lo: lo,
                density,
                p15: percentile(&per_group, 15.0).unwrap_or(0.0),
                p50: percentile(&per_group, 50.0).unwrap_or(0.0),
                p85: percentile(&per_group, 85.0).unwrap_or(0.0),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub lat_lo: f64,
    pub lon_lo: f64,
    pub n: usize,
    /// `None` marks an empty cell.
    pub value: Option<f64>,
}

fn cell_of(lat: f64, lon: f64, deg: f64) -> (i64, i64) {
    ((lat / deg).floor() as i64, (lon / deg).floor() as i64)
}

/// `p`-th percentile of intensity per `deg` x `deg` cell over the
/// rectangular extent of the data. With realizations, the value is the
/// median over realizations of each realization's percentile.
pub fn spatial_percentiles(trajs: &[Trajectory], deg: f64, p: f64) -> Vec<GridCell> {
    // cell -> realization -> values
    let mut cells: BTreeMap<(i64, i64), BTreeMap<Option<usize>, Vec<f64>>> = BTreeMap::new();
    for traj in trajs {
        for t in 0..traj.v.len() {
            cells
                .entry(cell_of(traj.lat[t], traj.lon[t], deg))
                .or_default()
                .entry(traj.realization)
                .or_default()
                .push(traj.v[t]);
        }
    }
    let (Some(i_lo), Some(i_hi)) = (cells.keys().map(|c| c.0).min(), cells.keys().map(|c| c.0).max()) else {
        return Vec::new();
    };
    let j_lo = cells.keys().map(|c| c.1).min().unwrap_or(0);
    let j_hi = cells.keys().map(|c| c.1).max().unwrap_or(0);
    let mut out = Vec::new();
    for i in i_lo..=i_hi {
        for j in j_lo..=j_hi {
            let (n, value) = match cells.get(&(i, j)) {
                None => (0, None),
                Some(groups) => {
                    let per: Vec<f64> = groups.values().filter_map(|vs| percentile(vs, p)).collect();
                    (groups.values().map(Vec::len).sum(), percentile(&per, 50.0))
                }
            };
            out.push(GridCell {
                lat_lo: i as f64 * deg,
                lon_lo: j as f64 * deg,
                n,
                value,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeRow {
    pub step_index: usize,
    pub n: usize,
    pub mean: f64,
    /// 10th through 90th percentiles.
    pub deciles: [f64; 9],
}

/// Mean and deciles of intensity per step over the realizations still
/// running at that step.
pub fn storm_envelope(realizations: &[Vec<f64>]) -> Vec<EnvelopeRow> {
    if realizations.len() < 10 {
        log::warn!("envelope from {} realizations (fewer than 10)", realizations.len());
    }
    let steps = realizations.iter().map(Vec::len).max().unwrap_or(0);
    (0..steps)
        .map(|t| {
            let mut vs: Vec<f64> = realizations.iter().filter_map(|r| r.get(t).copied()).collect();
            vs.sort_by(f64::total_cmp);
            let mut deciles = [0.0; 9];
            for (d, slot) in deciles.iter_mut().enumerate() {
                *slot = percentile_sorted(&vs, 10.0 * (d + 1) as f64).unwrap_or(f64::NAN);
            }
            EnvelopeRow {
                step_index: t,
                n: vs.len(),
                mean: mean(&vs),
                deciles,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub bin_width_6h: f64,
    pub bin_width_24h: f64,
    pub kde_step: f64,
    pub landfall_bin_width: f64,
    pub grid_deg: f64,
    pub percentiles: Vec<f64>,
    pub regions: Vec<RegionSpec>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bin_width_6h: 10.0,
            bin_width_24h: 15.0,
            kde_step: 1.0,
            landfall_bin_width: 10.0,
            grid_deg: 2.0,
            percentiles: vec![50.0, 90.0],
            regions: Vec::new(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for w in [self.bin_width_6h, self.bin_width_24h, self.kde_step, self.landfall_bin_width, self.grid_deg] {
            if !(w > 0.0) {
                return Err(Error::Validation("bin widths and grid size must be positive".into()));
            }
        }
        if let Some(p) = self.percentiles.iter().find(|p| !(**p > 0.0 && **p < 100.0)) {
            return Err(Error::Validation(format!("percentile {p} outside (0, 100)")));
        }
        self.regions.iter().try_for_each(RegionSpec::validate)
    }
}

/// One output table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub metric: String,
    pub source: String,
    pub model: String,
    pub csv: String,
}

impl MetricTable {
    pub fn file_name(&self) -> String {
        format!("{}_{}_{}.csv", self.metric, self.source, self.model)
    }
}

fn f(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "NA".into()
    }
}

fn realization_field(r: Option<usize>) -> String {
    r.map_or_else(String::new, |i| i.to_string())
}

/// Trajectories of one data source (observations or one model's ensembles).
pub struct SourceData<'a> {
    pub source: &'a str,
    pub model: &'a str,
    pub trajectories: Vec<Trajectory>,
    /// Per-storm realization intensities for envelopes; empty for
    /// observations.
    pub ensembles: Vec<(String, Vec<Vec<f64>>)>,
}

/// Every metric for one source.
pub fn evaluate_source(data: &SourceData, cfg: &EvalConfig) -> Vec<MetricTable> {
    let table = |metric: &str, csv: String| MetricTable {
        metric: metric.to_string(),
        source: data.source.to_string(),
        model: data.model.to_string(),
        csv,
    };
    let trajs = &data.trajectories;
    let mut out = Vec::new();
    for (window, width) in [(DvWindow::SixHour, cfg.bin_width_6h), (DvWindow::Day, cfg.bin_width_24h)] {
        let h = dv_histogram(trajs, window, width);
        let mut csv = String::from("bin_lo_kt,bin_hi_kt,count,density\n");
        for (lo, c, d) in &h.bins {
            let _ = writeln!(csv, "{},{},{c},{}", f(*lo), f(lo + width), f(*d));
        }
        out.push(table(&format!("dv{}_hist", window.id()), csv));
    }

    let stats = lmi_stats(trajs, cfg.kde_step);
    let mut csv = String::from("storm_id,realization,lmi_kt,ri\n");
    for r in &stats.records {
        let _ = writeln!(csv, "{},{},{},{}", r.storm_id, realization_field(r.realization), f(r.lmi), u8::from(r.ri));
    }
    out.push(table("lmi", csv));
    let mut csv = String::from("lmi_kt,density_all,density_ri,density_non_ri\n");
    for (x, a, b, c) in &stats.kde {
        let _ = writeln!(csv, "{},{},{},{}", f(*x), f(*a), f(*b), f(*c));
    }
    out.push(table("lmi_kde", csv));
    let n_ri = stats.records.iter().filter(|r| r.ri).count();
    out.push(table(
        "ri_fraction",
        format!(
            "n,n_ri,ri_fraction,bandwidth_all,bandwidth_ri,bandwidth_non_ri\n{},{n_ri},{},{},{},{}\n",
            stats.records.len(),
            f(stats.ri_fraction),
            f(stats.bandwidth[0]),
            f(stats.bandwidth[1]),
            f(stats.bandwidth[2])
        ),
    ));

    let events = landfall_events(trajs, &cfg.regions);
    let n_other = events.iter().filter(|e| e.region == OTHER_REGION).count();
    if n_other > 0 {
        log::warn!(
            "{} {}: {n_other} of {} landfalls outside every region, counted as \"{OTHER_REGION}\"",
            data.source,
            data.model,
            events.len()
        );
    }
    let mut csv = String::from("storm_id,realization,step_index,region,v_kt,lat,lon\n");
    for e in &events {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            e.storm_id,
            realization_field(e.realization),
            e.step_index,
            e.region,
            f(e.v),
            f(e.lat),
            f(e.lon)
        );
    }
    out.push(table("landfall", csv));
    let mut csv = String::from("region,bin_lo_kt,density,p15,p50,p85\n");
    for b in landfall_bands(&events, &cfg.regions, cfg.landfall_bin_width) {
        let _ = writeln!(csv, "{},{},{},{},{},{}", b.region, f(b.bin_lo), f(b.density), f(b.p15), f(b.p50), f(b.p85));
    }
    out.push(table("landfall_bands", csv));

    for p in &cfg.percentiles {
        let mut csv = String::from("lat_lo,lon_lo,n,value_kt\n");
        for c in spatial_percentiles(trajs, cfg.grid_deg, *p) {
            let _ = writeln!(csv, "{},{},{},{}", f(c.lat_lo), f(c.lon_lo), c.n, c.value.map_or_else(|| "NA".to_string(), f));
        }
        out.push(table(&format!("spatial_p{}", fmt_pct(*p)), csv));
    }

    for (storm_id, reals) in &data.ensembles {
        let mut csv = String::from("step_index,n,mean,p10,p20,p30,p40,p50,p60,p70,p80,p90\n");
        for row in storm_envelope(reals) {
            let _ = write!(csv, "{},{},{}", row.step_index, row.n, f(row.mean));
            for d in row.deciles {
                let _ = write!(csv, ",{}", f(d));
            }
            csv.push('\n');
        }
        out.push(table(&format!("envelope_{storm_id}"), csv));
    }
    out
}

fn fmt_pct(p: f64) -> String {
    if p.fract() == 0.0 {
        format!("{}", p as i64)
    } else {
        format!("{p}").replace('.', "_")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IndexEntry {
    pub file: String,
    pub metric: String,
    pub source: String,
    pub model: String,
    pub sha256: String,
}

/// Write every table and an `index.json` listing them.
pub fn write_tables(dir: &Path, tables: &[MetricTable], extra: serde_json::Value) -> Result<Vec<IndexEntry>> {
    let mut index = Vec::new();
    for t in tables {
        let name = t.file_name();
        crate::fsutil::write_atomic(&dir.join(&name), t.csv.as_bytes())?;
        index.push(IndexEntry {
            file: name,
            metric: t.metric.clone(),
            source: t.source.clone(),
            model: t.model.clone(),
            sha256: crate::model::sha256_hex(t.csv.as_bytes()),
        });
    }
    let doc = serde_json::json!({ "files": index, "info": extra });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    crate::fsutil::write_atomic(&dir.join("index.json"), text.as_bytes())?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(v: &[f64]) -> Trajectory {
        Trajectory {
            storm_id: "S".into(),
            realization: None,
            v: v.to_vec(),
            over_land: vec![false; v.len()],
            lat: vec![20.0; v.len()],
            lon: vec![-60.0; v.len()],
        }
    }

    #[test]
    fn percentile_convention() {
        assert_eq!(percentile(&[10.0, 20.0, 30.0], 50.0), Some(20.0));
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 25.0), Some(1.75));
        assert_eq!(percentile(&[], 50.0), None);
    }

    #[test]
    fn histogram_placement_and_hand_tally() {
        let h = histogram(&[7.0], 10.0);
        assert_eq!(h.bins, vec![(0.0, 1, 0.1)]);
        let h = histogram(&[-12.0, -3.0, 0.0, 4.0, 9.99, 25.0], 10.0);
        let counts: Vec<(f64, usize)> = h.bins.iter().map(|b| (b.0, b.1)).collect();
        assert_eq!(counts, vec![(-20.0, 1), (-10.0, 1), (0.0, 3), (10.0, 0), (20.0, 1)]);
        let h = histogram(&[-5.0, 5.0], 10.0);
        assert_eq!(h.bins[0].1, h.bins[1].1);
        assert!(histogram(&[], 10.0).bins.is_empty());
    }

    #[test]
    fn windows_skip_land() {
        let mut t = traj(&[10.0, 20.0, 30.0, 40.0, 50.0, 60.0]);
        t.over_land[2] = true;
        assert_eq!(ocean_changes(&t, DvWindow::SixHour), vec![10.0, 10.0, 10.0]);
        assert!(ocean_changes(&t, DvWindow::Day).is_empty());
    }

    #[test]
    fn lmi_and_ri_fraction() {
        let rising: Vec<f64> = (0..8).map(|i| 20.0 + 5.0 * i as f64).collect();
        assert_eq!(lmi(&traj(&rising)), 55.0);
        let mut trajs = Vec::new();
        for i in 0..12 {
            let v: Vec<f64> = if i % 4 == 0 {
                vec![30.0, 40.0, 50.0, 60.0, 70.0, 65.0]
            } else {
                vec![30.0, 35.0, 40.0, 45.0, 50.0, 40.0]
            };
            let mut t = traj(&v);
            t.realization = Some(i);
            trajs.push(t);
        }
        let s = lmi_stats(&trajs, 1.0);
        assert_eq!(s.ri_fraction, 0.25);
        let area: f64 = s.kde.iter().map(|r| r.1).sum::<f64>();
        assert!((area - 1.0).abs() < 1e-3);
    }

    #[test]
    fn ri_ignores_constant_padding() {
        let v = vec![30.0, 40.0, 50.0, 60.0, 70.0];
        let mut padded = v.clone();
        padded.extend([70.0; 6]);
        assert_eq!(is_ri(&traj(&v)), is_ri(&traj(&padded)));
    }

    #[test]
    fn landfall_examples() {
        let square = RegionSpec {
            name: "box".into(),
            polygon: vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]],
        };
        let never = traj(&[50.0; 5]);
        assert!(landfall_events(&[never], std::slice::from_ref(&square)).is_empty());
        let mut t = traj(&[70.0, 80.0, 60.0, 50.0]);
        t.over_land = vec![false, false, true, true];
        t.lat = vec![-2.0, -1.0, 0.5, 0.5];
        t.lon = vec![0.5; 4];
        let e = landfall_events(&[t.clone()], std::slice::from_ref(&square));
        assert_eq!(e.len(), 1);
        assert_eq!((e[0].region.as_str(), e[0].v), ("box", 80.0));
        t.lat[2] = 0.0;
        assert_eq!(landfall_events(&[t.clone()], std::slice::from_ref(&square))[0].region, "box");
        t.lat[2] = 5.0;
        assert_eq!(landfall_events(&[t], &[square])[0].region, OTHER_REGION);
    }

    #[test]
    fn spatial_examples() {
        let mut t = traj(&[10.0, 20.0, 30.0]);
        t.lat = vec![20.5; 3];
        t.lon = vec![-59.5; 3];
        let g = spatial_percentiles(&[t.clone()], 2.0, 50.0);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].value, Some(20.0));
        // two occupied cells with an empty one between
        let mut u = traj(&[40.0, 60.0]);
        u.lat = vec![20.5; 2];
        u.lon = vec![-55.5; 2];
        let g = spatial_percentiles(&[t, u], 2.0, 90.0);
        assert_eq!(g.len(), 3);
        assert!((g[0].value.unwrap() - 28.0).abs() < 1e-12);
        assert_eq!(g[1].value, None);
        assert!((g[2].value.unwrap() - 58.0).abs() < 1e-12);
    }

    #[test]
    fn envelope_examples() {
        let same = vec![vec![30.0, 40.0, 50.0]; 10];
        for row in storm_envelope(&same) {
            assert!(row.deciles.iter().all(|d| *d == same[0][row.step_index]));
        }
        let two = vec![vec![0.0; 4], vec![10.0; 4]];
        assert!(storm_envelope(&two).iter().all(|r| r.mean == 5.0));
    }

    proptest! {
        #[test]
        fn histogram_counts_and_integrates(values in prop::collection::vec(-80.0f64..80.0, 1..200), w in 1.0f64..20.0) {
            let h = histogram(&values, w);
            prop_assert_eq!(h.bins.iter().map(|b| b.1).sum::<usize>(), values.len());
            let integral: f64 = h.bins.iter().map(|b| b.2 * w).sum();
            prop_assert!((integral - 1.0).abs() < 1e-10);
        }

        #[test]
        fn percentiles_monotone(values in prop::collection::vec(0.0f64..200.0, 1..50), p1 in 0.0f64..100.0, p2 in 0.0f64..100.0) {
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            prop_assert!(percentile(&values, lo).unwrap() <= percentile(&values, hi).unwrap());
        }

        #[test]
        fn lmi_bounds_series(values in prop::collection::vec(0.0f64..200.0, 1..50)) {
            let t = traj(&values);
            let m = lmi(&t);
            prop_assert!(values.iter().all(|v| *v <= m));
        }
    }
}
