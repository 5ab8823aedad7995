//! Reference parameter sets and synthetic data generators used for
//! parameter-recovery checks and the bundled demonstration dataset.

use std::fmt::Write as _;

use chrono::{Duration, TimeZone, Utc};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::domain::{CovariateSet, Scaler, StateIndex, KT_PER_MS};
use crate::hmm::{sample_sequence, HmmSequence, MehimModel};
use crate::ingest::haversine;
use crate::landdecay::{land_apply, LandModel};
use crate::mixture::{fmr_sample_dv, FmrComponent, FmrModel};
use crate::model::{FitMetadata, OlsModel};
use crate::rng::{categorical, normal, stream};
use crate::stats::{LinearFit, MnlFit};

fn fit(intercept: f64, coefficients: [f64; 6], sigma: f64) -> LinearFit {
    LinearFit {
        intercept,
        coefficients: coefficients.to_vec(),
        sigma,
    }
}

fn mnl(rows: &[(f64, [f64; 6])], k: usize) -> MnlFit {
    let mut m = MnlFit::zeros(k, 6);
    for (r, (a, g)) in rows.iter().enumerate() {
        m.intercepts[r] = *a;
        m.coefficients[r] = g.to_vec();
    }
    m
}

/// Published linear-regression coefficients (standardized units).
pub fn reference_ols() -> OlsModel {
    OlsModel {
        covariate_set: CovariateSet::Full,
        scaler: Scaler::identity(),
        fit: fit(-0.000, [0.452, -0.142, 0.083, -0.054, 0.042, 0.032], 0.860),
        metadata: FitMetadata::default(),
    }
}

/// Published three-group mixture: static, normal and extreme groups.
pub fn reference_fmr() -> FmrModel {
    let comp = |w, a, b, s| FmrComponent { weight: w, fit: fit(a, b, s) };
    FmrModel {
        k: 3,
        covariate_set: CovariateSet::Full,
        scaler: Scaler::identity(),
        components: vec![
            comp(0.296, -0.080, [0.008, 0.003, 0.008, -0.004, -0.008, 0.012], 0.098),
            comp(0.635, 0.100, [0.667, -0.134, 0.116, -0.063, 0.063, 0.055], 0.715),
            comp(0.069, 0.228, [0.215, -0.861, -0.133, -0.646, 0.153, 0.234], 2.029),
        ],
        classifier: mnl(
            &[
                (3.053, [-0.359, -1.091, 0.020, -0.260, -0.274, -0.217]),
                (-0.292, [-0.292, -0.777, -0.148, -0.212, -0.101, -0.140]),
            ],
            3,
        ),
        metadata: FitMetadata::default(),
    }
}

/// Published three-state dependent HMM. The initial-state block is not
/// published and is left uniform.
pub fn reference_mehim() -> MehimModel {
    let mut m = MehimModel::zeros(3, CovariateSet::Full);
    m.emissions = vec![
        fit(-0.077, [0.010, 0.004, 0.008, 0.000, -0.007, 0.014], 0.097),
        fit(0.072, [0.593, -0.143, 0.105, -0.044, 0.069, 0.039], 0.722),
        fit(0.269, [0.357, -0.483, 0.370, -0.619, -0.023, 0.252], 1.979),
    ];
    m.transitions = vec![
        mnl(
            &[
                (4.663, [-0.103, -1.233, -2.713, -0.806, 0.022, -0.670]),
                (4.553, [0.047, -1.279, -2.939, -0.830, 0.183, -0.807]),
            ],
            3,
        ),
        mnl(
            &[
                (1.991, [-0.642, -2.180, -1.053, -0.210, 0.058, -0.298]),
                (3.561, [-0.661, -1.116, -1.245, -0.242, 0.339, -0.007]),
            ],
            3,
        ),
        mnl(
            &[
                (-1.013, [-0.194, 0.043, 0.705, 0.194, -0.904, -0.870]),
                (0.267, [-0.020, -0.503, 0.506, 0.914, -0.580, -1.513]),
            ],
            3,
        ),
    ];
    m
}

/// Published land decay parameters.
pub fn reference_land() -> LandModel {
    LandModel::new(0.049, 18.82)
}

/// `n` rows of `p` independent standard normal covariates.
pub fn gaussian_design<R: Rng + ?Sized>(rng: &mut R, n: usize, p: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..p).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

/// Draw groups from the mixture weights, then responses from each group's
/// regression.
pub fn sample_mixture<R: Rng + ?Sized>(components: &[FmrComponent], x: &[Vec<f64>], rng: &mut R) -> (Vec<usize>, Vec<f64>) {
    let w: Vec<f64> = components.iter().map(|c| c.weight).collect();
    x.iter()
        .map(|xi| {
            let g = categorical(rng, &w);
            let c = &components[g].fit;
            (g, normal(rng, c.mean(xi), c.sigma))
        })
        .unzip()
}

/// Draw classifier labels and responses at the given covariates.
pub fn sample_fmr<R: Rng + ?Sized>(model: &FmrModel, x: &[Vec<f64>], rng: &mut R) -> (Vec<usize>, Vec<f64>) {
    x.iter().map(|xi| fmr_sample_dv(model, xi, rng)).unzip()
}

/// Sequences of independent standard normal covariates with responses and
/// state paths drawn from `model`.
pub fn sample_mehim<R: Rng + ?Sized>(model: &MehimModel, n_sequences: usize, len: usize, rng: &mut R) -> (Vec<HmmSequence>, Vec<Vec<StateIndex>>) {
    let p = model.covariate_set.len();
    (0..n_sequences)
        .map(|_| {
            let x = gaussian_design(rng, len, p);
            let x0: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let (states, y) = sample_sequence(model, &x, &x0, rng);
            (HmmSequence { x, x0, y }, states)
        })
        .unzip()
}

/// Settings for the demonstration track dataset.
#[derive(Debug, Clone)]
pub struct TrackSynthOptions {
    pub n_storms: usize,
    pub seed: u64,
    /// Truth: raw-unit linear model for the 6-h change in background-removed
    /// intensity, `dv = a + b . (dv_p, v, mpi, shr, rh, ocn) + N(0, sigma)`.
    pub truth: LinearFit,
    pub land: LandModel,
    pub bg_fraction: f64,
    /// Island box `[lat_lo, lat_hi, lon_lo, lon_hi]`.
    pub island: [f64; 4],
    /// Mainland lies north of this latitude.
    pub coast_lat: f64,
    /// Tracks end this many steps after reaching the mainland.
    pub inland_steps: usize,
    /// Episodic rapid intensification on top of the linear truth.
    pub rapid: Option<RapidRegime>,
}

/// Two-regime switch: while rapid, the change gains `extra_mean` and the
/// noise becomes `sigma`.
#[derive(Debug, Clone, Copy)]
pub struct RapidRegime {
    /// Per-step entry probability over ocean when `v < entry_max_ratio * mpi`.
    pub entry: f64,
    pub entry_max_ratio: f64,
    pub exit: f64,
    pub extra_mean: f64,
    pub sigma: f64,
}

impl Default for RapidRegime {
    fn default() -> Self {
        Self {
            entry: 0.05,
            entry_max_ratio: 0.6,
            exit: 0.3,
            extra_mean: 9.0,
            sigma: 5.0,
        }
    }
}

impl TrackSynthOptions {
    pub fn is_land(&self, lat: f64, lon: f64) -> bool {
        let [a, b, c, d] = self.island;
        (lat >= a && lat <= b && lon >= c && lon <= d) || lat >= self.coast_lat
    }
}

impl Default for TrackSynthOptions {
    fn default() -> Self {
        Self {
            n_storms: 20,
            seed: 20240601,
            truth: LinearFit {
                intercept: -2.0,
                coefficients: vec![0.45, -0.06, 0.035, -0.30, 0.05, 3.0],
                sigma: 3.0,
            },
            land: reference_land(),
            bg_fraction: 0.55,
            island: [19.5, 22.5, -72.0, -58.0],
            coast_lat: 30.0,
            inland_steps: 5,
            rapid: Some(RapidRegime::default()),
        }
    }
}

/// Demonstration track/environment CSV. Storms drift north-west from the
/// tropical Atlantic, may cross an island band and decay over land, and
/// end a few steps after reaching the northern mainland.
pub fn synthetic_tracks_csv(opts: &TrackSynthOptions) -> String {
    let mut out = String::from("storm_id,name,time,lat,lon,wind_kt,over_land,mpi_kt,shr_ms,rh_pct,hm_m,gamma_k_per_100m\n");
    let t0 = Utc.with_ymd_and_hms(2001, 8, 1, 0, 0, 0).single().expect("valid date");
    let round3 = |x: f64| (x * 1000.0).round() / 1000.0;
    for s in 0..opts.n_storms {
        let mut rng = stream(opts.seed, "synthetic-storm", s as u64);
        let id = format!("SYN{:02}", s + 1);
        let n: usize = rng.random_range(28..=52);
        let start = t0 + Duration::days(3 * s as i64);
        let mut lat: f64 = rng.random_range(9.0..16.0);
        let mut lon: f64 = rng.random_range(-62.0..-45.0);
        let heading: f64 = rng.random_range(-0.35..0.05);
        let speed_deg = rng.random_range(0.25..0.6);
        let mut v: f64 = rng.random_range(22.0..35.0);
        let mpi_base = rng.random_range(135.0..165.0);
        let shr_base = rng.random_range(4.0..14.0);
        let rh_base = rng.random_range(50.0..70.0);
        let hm: f64 = rng.random_range(25.0..70.0);
        let gamma: f64 = rng.random_range(0.6..1.8);

        // track first, ending a few steps inland of the mainland coast
        let mut track = Vec::with_capacity(n);
        let mut inland = 0;
        for t in 0..n {
            if lat >= opts.coast_lat {
                inland += 1;
                if inland > opts.inland_steps {
                    break;
                }
            }
            track.push((round3(lat), round3(lon)));
            lat += speed_deg * (1.0 - heading.abs()) + 0.02 * t as f64;
            lon += -speed_deg * heading.cos() + 0.03 * t as f64;
        }
        let n = track.len();
        // centered-difference translation speed, m/s
        let u: Vec<f64> = (0..n)
            .map(|i| {
                let (lo, hi) = (i.saturating_sub(1), (i + 1).min(n - 1));
                haversine(track[lo].0, track[lo].1, track[hi].0, track[hi].1) / (21_600.0 * (hi - lo) as f64)
            })
            .collect();

        let mut dv_p = 0.0;
        let mut rapid = false;
        let mut land_entry: Option<(f64, usize)> = None;
        for t in 0..n {
            let (lat, lon) = track[t];
            let mpi = (mpi_base - 2.2 * (lat - 15.0).max(0.0) + normal(&mut rng, 0.0, 3.0)).max(20.0);
            let shr = (shr_base + 0.35 * (lat - 15.0).max(0.0) + normal(&mut rng, 0.0, 1.5)).max(0.0);
            let rh = (rh_base + normal(&mut rng, 0.0, 4.0)).clamp(5.0, 98.0);
            let observed = v + opts.bg_fraction * u[t] * KT_PER_MS;
            let _ = writeln!(
                out,
                "{id},SYNTH{},{},{:.3},{:.3},{:.2},{},{:.2},{:.2},{:.2},{:.1},{:.3}",
                s + 1,
                (start + Duration::hours(6 * t as i64)).format("%Y-%m-%dT%H:%M:%SZ"),
                lat,
                lon,
                observed,
                u8::from(opts.is_land(lat, lon)),
                mpi,
                shr,
                rh,
                hm,
                gamma
            );
            let Some(&(next_lat, next_lon)) = track.get(t + 1) else {
                break;
            };
            if opts.is_land(next_lat, next_lon) {
                rapid = false;
                let (v0, k) = *land_entry.get_or_insert((v, 0));
                v = land_apply(&opts.land, v0, (k + 1) as f64);
                land_entry = Some((v0, k + 1));
            } else {
                land_entry = None;
                let z = 0.01 * gamma.powf(-0.4) * hm * u[t] * (mpi / v.max(5.0));
                let ocn = 1.0 - 0.87 * (-z).exp();
                let x = [dv_p, v, mpi, shr, rh, ocn];
                let mut dv = opts.truth.mean(&x);
                match &opts.rapid {
                    Some(r) => {
                        let u: f64 = rng.random();
                        rapid = if rapid { u >= r.exit } else { u < r.entry && v < r.entry_max_ratio * mpi };
                        dv += if rapid {
                            r.extra_mean + normal(&mut rng, 0.0, r.sigma)
                        } else {
                            normal(&mut rng, 0.0, opts.truth.sigma)
                        };
                    }
                    None => dv += normal(&mut rng, 0.0, opts.truth.sigma),
                }
                let nv = (v + dv).max(12.0);
                dv_p = nv - v;
                v = nv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_tracks_reader, ParseOptions};

    #[test]
    fn demonstration_tracks_parse_and_cross_land() {
        let csv = synthetic_tracks_csv(&TrackSynthOptions::default());
        let storms = parse_tracks_reader(csv.as_bytes(), &ParseOptions::default()).unwrap();
        assert_eq!(storms.len(), 20);
        assert!(storms.iter().any(|s| s.over_land().iter().any(|l| *l)));
        assert!(storms.iter().any(|s| s.over_land().iter().all(|l| !*l)));
        // some storms cross the island and come back out over water
        let reemerge = storms.iter().filter(|s| s.over_land().windows(2).any(|w| w[0] && !w[1])).count();
        assert!(reemerge >= 3, "{reemerge} storms re-emerge");
    }

    #[test]
    fn reference_weights_sum_to_one() {
        let w: f64 = reference_fmr().components.iter().map(|c| c.weight).sum();
        assert!((w - 1.0).abs() < 1e-12);
    }
}
