//! Finite mixture of Gaussian linear regressions fitted by EM, with a
//! multinomial-logistic classifier that assigns group probabilities to new
//! observations for simulation.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{CovariateSet, Scaler};
use crate::error::{Error, Result};
use crate::model::FitMetadata;
use crate::rng::{categorical, normal, stream};
use crate::stats::{log_sum_exp, mnl_fit, mnl_probs, ols_fit, weighted_ls, LinearFit, MnlFit, MnlOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmrComponent {
    pub weight: f64,
    #[serde(flatten)]
    pub fit: LinearFit,
}

/// Fitted mixture model. Components are ordered by `sigma` ascending and the
/// classifier's baseline is the last component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmrModel {
    pub k: usize,
    pub covariate_set: CovariateSet,
    pub scaler: Scaler,
    pub components: Vec<FmrComponent>,
    pub classifier: MnlFit,
    pub metadata: FitMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub k: usize,
    pub restarts: usize,
    /// Relative log-likelihood gain below which EM stops.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Smallest admissible component standard deviation (standardized units).
    pub sigma_floor: f64,
    /// Re-seeds allowed per restart after a collapse.
    pub collapse_retries: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            k: 3,
            restarts: 10,
            tol: 1e-8,
            max_iter: 1000,
            seed: 0,
            sigma_floor: 1e-4,
            collapse_retries: 3,
        }
    }
}

/// Result of the EM stage alone.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureFit {
    pub components: Vec<FmrComponent>,
    pub log_likelihood: f64,
    pub iterations: usize,
    /// Log-likelihood after every E-step of the winning run.
    pub trace: Vec<f64>,
    pub restart: usize,
}

/// Mixture log-density of every component, `log w_r + log N(y; mean_r, sigma_r)`.
fn joint_log(components: &[FmrComponent], x: &[f64], y: f64) -> Vec<f64> {
    components.iter().map(|c| c.weight.ln() + c.fit.log_density(x, y)).collect()
}

/// Posterior group probabilities of one observation.
pub fn fmr_posteriors(components: &[FmrComponent], x: &[f64], y: f64) -> Vec<f64> {
    let lj = joint_log(components, x, y);
    let lse = log_sum_exp(&lj);
    lj.iter().map(|l| (l - lse).exp()).collect()
}

pub fn mixture_loglik(components: &[FmrComponent], x: &[Vec<f64>], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(xi, &yi)| log_sum_exp(&joint_log(components, xi, yi))).sum()
}

/// Arg-max group per observation; ties go to the lower index.
pub fn fmr_optimal_assignment(components: &[FmrComponent], x: &[Vec<f64>], y: &[f64]) -> Vec<usize> {
    x.iter().zip(y).map(|(xi, &yi)| argmax(&fmr_posteriors(components, xi, yi))).collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate().skip(1) {
        if p > v[best] {
            best = i;
        }
    }
    best
}

/// Initial responsibilities: equal-count bins of `|y|`, with uniform jitter
/// of relative size `jitter`.
pub(crate) fn quantile_responsibilities<R: Rng>(y: &[f64], k: usize, jitter: f64, rng: &mut R) -> Vec<Vec<f64>> {
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| y[a].abs().total_cmp(&y[b].abs()));
    let mut resp = vec![vec![0.0; k]; y.len()];
    for (rank, &i) in order.iter().enumerate() {
        let bin = (rank * k / y.len()).min(k - 1);
        let row = &mut resp[i];
        for (r, v) in row.iter_mut().enumerate() {
            *v = if r == bin { 1.0 - jitter } else { 0.0 } + jitter * rng.random::<f64>();
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    resp
}

fn m_step(x: &[Vec<f64>], y: &[f64], resp: &[Vec<f64>], k: usize) -> Result<Vec<FmrComponent>> {
    let n = y.len() as f64;
    (0..k)
        .map(|r| {
            let w: Vec<f64> = resp.iter().map(|row| row[r]).collect();
            let weight = w.iter().sum::<f64>() / n;
            Ok(FmrComponent {
                weight,
                fit: weighted_ls(x, y, &w)?,
            })
        })
        .collect()
}

enum RunOutcome {
    Done(MixtureFit),
    Collapsed,
}

fn em_run(x: &[Vec<f64>], y: &[f64], cfg: &EmConfig, mut resp: Vec<Vec<f64>>, restart: usize) -> Result<RunOutcome> {
    let k = cfg.k;
    let mut trace = Vec::new();
    let mut components;
    let mut iterations = 0;
    loop {
        iterations += 1;
        components = m_step(x, y, &resp, k)?;
        if components.iter().any(|c| !(c.fit.sigma >= cfg.sigma_floor) || !(c.weight > 0.0)) {
            return Ok(RunOutcome::Collapsed);
        }
        // log w - log sigma - log sqrt(2 pi), hoisted out of the row loop
        let offset: Vec<f64> = components
            .iter()
            .map(|c| c.weight.ln() - c.fit.sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
            .collect();
        let mut lj = vec![0.0; k];
        let mut ll = 0.0;
        for ((xi, &yi), row) in x.iter().zip(y).zip(resp.iter_mut()) {
            for (r, c) in components.iter().enumerate() {
                let z = (yi - c.fit.mean(xi)) / c.fit.sigma;
                lj[r] = offset[r] - 0.5 * z * z;
            }
            let lse = log_sum_exp(&lj);
            ll += lse;
            for (v, l) in row.iter_mut().zip(&lj) {
                *v = (l - lse).exp();
            }
        }
        let prev = trace.last().copied();
        trace.push(ll);
        if let Some(prev) = prev {
            if (ll - prev) < cfg.tol * prev.abs() {
                break;
            }
        }
        if iterations >= cfg.max_iter {
            break;
        }
    }
    Ok(RunOutcome::Done(MixtureFit {
        log_likelihood: *trace.last().unwrap_or(&f64::NEG_INFINITY),
        components,
        iterations,
        trace,
        restart,
    }))
}

/// Sort components by `sigma` ascending; returns the permutation
/// (`perm[new] = old`).
pub(crate) fn sigma_order(sigmas: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..sigmas.len()).collect();
    perm.sort_by(|&a, &b| sigmas[a].total_cmp(&sigmas[b]));
    perm
}

/// EM for the mixture of regressions, best of `cfg.restarts` runs.
///
/// With `k = 1` this is ordinary least squares.
pub fn fmr_fit_components(x: &[Vec<f64>], y: &[f64], cfg: &EmConfig) -> Result<MixtureFit> {
    if cfg.k == 0 {
        return Err(Error::Fit("mixture: k must be positive".into()));
    }
    if cfg.k == 1 {
        let fit = ols_fit(x, y)?;
        let components = vec![FmrComponent { weight: 1.0, fit }];
        let ll = mixture_loglik(&components, x, y);
        return Ok(MixtureFit {
            components,
            log_likelihood: ll,
            iterations: 0,
            trace: vec![ll],
            restart: 0,
        });
    }
    if y.len() < 50 * cfg.k {
        return Err(Error::Fit(format!(
            "mixture: need at least {} observations for k = {}, got {}",
            50 * cfg.k,
            cfg.k,
            y.len()
        )));
    }
    let runs: Vec<Result<Option<MixtureFit>>> = (0..cfg.restarts.max(1))
        .into_par_iter()
        .map(|restart| {
            for attempt in 0..=cfg.collapse_retries {
                let mut rng = stream(cfg.seed, "fmr-restart", (restart * 1000 + attempt) as u64);
                let jitter = if restart == 0 && attempt == 0 { 0.05 } else { 0.3 };
                let resp = quantile_responsibilities(y, cfg.k, jitter, &mut rng);
                if let RunOutcome::Done(fit) = em_run(x, y, cfg, resp, restart)? {
                    return Ok(Some(fit));
                }
                log::debug!("mixture restart {restart}: component collapsed, re-seeding");
            }
            Ok(None)
        })
        .collect();
    let mut best: Option<MixtureFit> = None;
    for run in runs {
        if let Some(fit) = run? {
            if best.as_ref().is_none_or(|b| fit.log_likelihood > b.log_likelihood) {
                best = Some(fit);
            }
        }
    }
    let mut best = best.ok_or_else(|| Error::Fit("mixture: every restart collapsed".into()))?;
    let perm = sigma_order(&best.components.iter().map(|c| c.fit.sigma).collect::<Vec<_>>());
    best.components = perm.iter().map(|&o| best.components[o].clone()).collect();
    Ok(best)
}

/// Classifier on hard labels: one-hot weights, last group as baseline.
pub fn fmr_classifier_fit(x: &[Vec<f64>], labels: &[usize], k: usize, opts: &MnlOptions) -> Result<MnlFit> {
    let w: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| {
            let mut row = vec![0.0; k];
            row[l] = 1.0;
            row
        })
        .collect();
    mnl_fit(x, &w, opts, None)
}

/// Full mixture model on standardized pooled observations.
pub fn fmr_fit(x: &[Vec<f64>], y: &[f64], scaler: &Scaler, covariate_set: CovariateSet, cfg: &EmConfig, n_sequences: usize) -> Result<(FmrModel, MixtureFit)> {
    let mixture = fmr_fit_components(x, y, cfg)?;
    let classifier = if cfg.k == 1 {
        MnlFit::zeros(1, covariate_set.len())
    } else {
        let labels = fmr_optimal_assignment(&mixture.components, x, y);
        fmr_classifier_fit(x, &labels, cfg.k, &MnlOptions::default())?
    };
    let model = FmrModel {
        k: cfg.k,
        covariate_set,
        scaler: scaler.clone(),
        components: mixture.components.clone(),
        classifier,
        metadata: FitMetadata {
            log_likelihood: mixture.log_likelihood,
            n_obs: y.len(),
            n_sequences,
            seed: cfg.seed,
            iterations: mixture.iterations,
            restarts: cfg.restarts,
        },
    };
    Ok((model, mixture))
}

impl FmrModel {
    pub fn group_probs(&self, x: &[f64]) -> Vec<f64> {
        if self.k == 1 {
            return vec![1.0];
        }
        mnl_probs(&self.classifier, x)
    }
}

/// Draw a group from the classifier, then a standardized intensity change
/// from that group's regression. Returns `(group, dv)`.
pub fn fmr_sample_dv<R: Rng + ?Sized>(model: &FmrModel, x: &[f64], rng: &mut R) -> (usize, f64) {
    let probs = model.group_probs(x);
    let g = categorical(rng, &probs);
    let c = &model.components[g].fit;
    (g, normal(rng, c.mean(x), c.sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn comp(weight: f64, intercept: f64, sigma: f64) -> FmrComponent {
        FmrComponent {
            weight,
            fit: LinearFit {
                intercept,
                coefficients: vec![0.0; 6],
                sigma,
            },
        }
    }

    #[test]
    fn posteriors_hand_case() {
        let c = [comp(0.5, 0.0, 1.0), comp(0.5, 1.0, 1.0)];
        let p = fmr_posteriors(&c, &[0.0; 6], 0.5);
        assert_relative_eq!(p[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(p[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn posteriors_equal_components_uniform() {
        let c = [comp(1.0 / 3.0, 0.2, 0.7), comp(1.0 / 3.0, 0.2, 0.7), comp(1.0 / 3.0, 0.2, 0.7)];
        for v in fmr_posteriors(&c, &[0.3; 6], -1.2) {
            assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn posteriors_dominated_by_narrow_component() {
        let c = [comp(0.3, 0.5, 0.001), comp(0.6, 0.0, 1.0), comp(0.1, 0.0, 3.0)];
        assert!(fmr_posteriors(&c, &[0.0; 6], 0.5)[0] > 0.99);
    }

    #[test]
    fn posteriors_invariant_to_common_density_scale() {
        // scaling every sigma and the residual by c multiplies all densities by 1/c
        let c = [comp(0.3, 0.5, 0.4), comp(0.6, 0.0, 1.0), comp(0.1, -1.0, 2.0)];
        let mut scaled = c.clone();
        for s in &mut scaled {
            s.fit.sigma *= 3.0;
            s.fit.intercept *= 3.0;
        }
        let a = fmr_posteriors(&c, &[0.0; 6], 0.2);
        let b = fmr_posteriors(&scaled, &[0.0; 6], 0.6);
        for (u, v) in a.iter().zip(&b) {
            assert_relative_eq!(u, v, epsilon = 1e-12);
        }
        assert_relative_eq!(a.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn assignment_argmax_and_ties() {
        assert_eq!(argmax(&[0.2, 0.3, 0.5]), 2);
        assert_eq!(argmax(&[0.5, 0.5, 0.0]), 0);
    }

    fn random_x(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..6).map(|_| rng.sample(StandardNormal)).collect()).collect()
    }

    #[test]
    fn k_one_is_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_x(&mut rng, 300);
        let y: Vec<f64> = x.iter().map(|xi| 0.4 * xi[0] - 0.1 * xi[1] + normal(&mut rng, 0.0, 0.8)).collect();
        let cfg = EmConfig { k: 1, ..Default::default() };
        let m = fmr_fit_components(&x, &y, &cfg).unwrap();
        let o = ols_fit(&x, &y).unwrap();
        let f = &m.components[0].fit;
        assert!((f.intercept - o.intercept).abs() < 1e-10);
        assert!((f.sigma - o.sigma).abs() < 1e-10);
        for (a, b) in f.coefficients.iter().zip(&o.coefficients) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn separated_components_give_hard_responsibilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 400;
        let x = random_x(&mut rng, n);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let y: Vec<f64> = labels
            .iter()
            .map(|&l| if l == 0 { -100.0 } else { 100.0 } + normal(&mut rng, 0.0, 1.0))
            .collect();
        let cfg = EmConfig {
            k: 2,
            restarts: 2,
            seed: 3,
            ..Default::default()
        };
        let m = fmr_fit_components(&x, &y, &cfg).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            let p = fmr_posteriors(&m.components, xi, *yi);
            assert!(p.iter().all(|v| *v < 1e-12 || *v > 1.0 - 1e-12));
        }
        assert!(m.trace.windows(2).all(|w| w[1] >= w[0] - 1e-10));
    }

    #[test]
    fn classifier_without_signal_reproduces_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 3000;
        let x = random_x(&mut rng, n);
        let labels: Vec<usize> = (0..n).map(|_| categorical(&mut rng, &[0.3, 0.6, 0.1])).collect();
        let fit = fmr_classifier_fit(&x, &labels, 3, &MnlOptions::default()).unwrap();
        assert!(fit.coefficients.iter().flatten().all(|g| g.abs() < 0.15));
        let freq: Vec<f64> = (0..3).map(|g| labels.iter().filter(|&&l| l == g).count() as f64 / n as f64).collect();
        let p = mnl_probs(&fit, &[0.0; 6]);
        for (a, b) in p.iter().zip(&freq) {
            assert!((a - b).abs() < 0.03);
        }
    }

    #[test]
    fn sample_degenerate_is_deterministic() {
        let model = FmrModel {
            k: 3,
            covariate_set: CovariateSet::Full,
            scaler: Scaler::identity(),
            components: (0..3).map(|_| comp(1.0 / 3.0, 0.7, 0.0)).collect(),
            classifier: MnlFit::zeros(3, 6),
            metadata: FitMetadata::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            assert_eq!(fmr_sample_dv(&model, &[0.4; 6], &mut rng).1, 0.7);
        }
    }
}
