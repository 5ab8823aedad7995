//! Dependent hidden Markov model: Gaussian regression emissions per state,
//! multinomial-logistic transitions driven by the destination-time
//! covariates, and a multinomial-logistic initial-state model on MPI, SHR and
//! RH.
//!
//! All recursions run in log space.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{CovariateSet, OceanSequence, Scaler, StateIndex, StatePath, INITIAL_COVARIATES};
use crate::error::{Error, Result};
use crate::mixture::{argmax, quantile_responsibilities, sigma_order};
use crate::model::FitMetadata;
use crate::rng::{normal, stream};
use crate::stats::{log_sum_exp, mnl_fit, mnl_probs, ols_fit, weighted_ls, LinearFit, MnlFit, MnlOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MehimModel {
    pub k: usize,
    pub covariate_set: CovariateSet,
    pub scaler: Scaler,
    pub emissions: Vec<LinearFit>,
    /// `transitions[i]` gives next-state probabilities from state `i`.
    pub transitions: Vec<MnlFit>,
    pub initial: MnlFit,
    /// Names of the initial-state covariates, always MPI, SHR, RH.
    #[serde(default = "initial_covariate_names")]
    pub initial_covariates: Vec<String>,
    pub metadata: FitMetadata,
}

fn initial_covariate_names() -> Vec<String> {
    INITIAL_COVARIATES.iter().map(|c| c.name().to_string()).collect()
}

/// One sequence in model space: active covariates per step, initial-state
/// covariates and standardized responses.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmSequence {
    pub x: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
    pub y: Vec<f64>,
}

impl HmmSequence {
    pub fn from_ocean(seq: &OceanSequence, set: CovariateSet) -> Self {
        Self {
            x: seq.covariates.iter().map(|c| c.select(set)).collect(),
            x0: seq.covariates.first().map(|c| c.initial()).unwrap_or_else(|| vec![0.0; 3]),
            y: seq.responses.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

impl MehimModel {
    /// Model with all parameters zero and unit emission sigma.
    pub fn zeros(k: usize, covariate_set: CovariateSet) -> Self {
        let p = covariate_set.len();
        Self {
            k,
            covariate_set,
            scaler: Scaler::identity(),
            emissions: (0..k)
                .map(|_| LinearFit {
                    sigma: 1.0,
                    ..LinearFit::zeros(p)
                })
                .collect(),
            transitions: vec![MnlFit::zeros(k, p); k],
            initial: MnlFit::zeros(k, INITIAL_COVARIATES.len()),
            initial_covariates: initial_covariate_names(),
            metadata: FitMetadata::default(),
        }
    }

    pub fn transition_probs(&self, from: StateIndex, x: &[f64]) -> Vec<f64> {
        mnl_probs(&self.transitions[from], x)
    }

    pub fn initial_probs(&self, x0: &[f64]) -> Vec<f64> {
        mnl_probs(&self.initial, x0)
    }

    pub fn emission_loglik(&self, state: StateIndex, x: &[f64], y: f64) -> f64 {
        self.emissions[state].log_density(x, y)
    }

    pub fn emission_sample<R: Rng + ?Sized>(&self, state: StateIndex, x: &[f64], rng: &mut R) -> f64 {
        let e = &self.emissions[state];
        normal(rng, e.mean(x), e.sigma)
    }

    /// Reorder states (`perm[new] = old`) consistently across emissions,
    /// transition rows and columns, and initial categories.
    pub fn permute_states(&self, perm: &[usize]) -> MehimModel {
        MehimModel {
            emissions: perm.iter().map(|&o| self.emissions[o].clone()).collect(),
            transitions: perm.iter().map(|&o| self.transitions[o].permute_categories(perm)).collect(),
            initial: self.initial.permute_categories(perm),
            ..self.clone()
        }
    }

    /// States ordered by emission sigma ascending.
    pub fn canonicalize(&self) -> MehimModel {
        let perm = sigma_order(&self.emissions.iter().map(|e| e.sigma).collect::<Vec<_>>());
        self.permute_states(&perm)
    }
}

/// Precomputed log terms for one sequence.
struct LogTerms {
    init: Vec<f64>,
    /// `trans[t][i][j]`, defined for `t >= 1`; `trans[0]` is empty.
    trans: Vec<Vec<Vec<f64>>>,
    emit: Vec<Vec<f64>>,
}

fn log_terms(model: &MehimModel, seq: &HmmSequence) -> LogTerms {
    let k = model.k;
    let init = model.initial.log_probs(&seq.x0);
    let trans = (0..seq.len())
        .map(|t| {
            if t == 0 {
                Vec::new()
            } else {
                (0..k).map(|i| model.transitions[i].log_probs(&seq.x[t])).collect()
            }
        })
        .collect();
    let emit = (0..seq.len())
        .map(|t| (0..k).map(|i| model.emission_loglik(i, &seq.x[t], seq.y[t])).collect())
        .collect();
    LogTerms { init, trans, emit }
}

fn forward(lt: &LogTerms, k: usize) -> Vec<Vec<f64>> {
    let n = lt.emit.len();
    let mut alpha = Vec::with_capacity(n);
    alpha.push((0..k).map(|i| lt.init[i] + lt.emit[0][i]).collect::<Vec<_>>());
    let mut buf = vec![0.0; k];
    for t in 1..n {
        let prev: &Vec<f64> = &alpha[t - 1];
        let row = (0..k)
            .map(|j| {
                for i in 0..k {
                    buf[i] = prev[i] + lt.trans[t][i][j];
                }
                log_sum_exp(&buf) + lt.emit[t][j]
            })
            .collect();
        alpha.push(row);
    }
    alpha
}

fn backward(lt: &LogTerms, k: usize) -> Vec<Vec<f64>> {
    let n = lt.emit.len();
    let mut beta = vec![vec![0.0; k]; n];
    let mut buf = vec![0.0; k];
    for t in (0..n.saturating_sub(1)).rev() {
        for i in 0..k {
            for j in 0..k {
                buf[j] = lt.trans[t + 1][i][j] + lt.emit[t + 1][j] + beta[t + 1][j];
            }
            beta[t][i] = log_sum_exp(&buf);
        }
    }
    beta
}

/// Log-likelihood of one sequence by the forward recursion.
pub fn sequence_loglik(model: &MehimModel, seq: &HmmSequence) -> f64 {
    if seq.is_empty() {
        return 0.0;
    }
    let lt = log_terms(model, seq);
    log_sum_exp(forward(&lt, model.k).last().expect("non-empty"))
}

/// Smoothed marginals of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    pub loglik: f64,
    /// `gamma[t][i]`
    pub gamma: Vec<Vec<f64>>,
    /// `xi[t][i][j]` for the transition into time `t`; `xi[0]` is empty.
    pub xi: Vec<Vec<Vec<f64>>>,
}

pub fn forward_backward(model: &MehimModel, seq: &HmmSequence) -> Posteriors {
    let k = model.k;
    let lt = log_terms(model, seq);
    let alpha = forward(&lt, k);
    let beta = backward(&lt, k);
    let ll = log_sum_exp(alpha.last().expect("non-empty sequence"));
    let gamma = alpha
        .iter()
        .zip(&beta)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x + y - ll).exp()).collect())
        .collect();
    let xi = (0..seq.len())
        .map(|t| {
            if t == 0 {
                return Vec::new();
            }
            (0..k)
                .map(|i| {
                    (0..k)
                        .map(|j| (alpha[t - 1][i] + lt.trans[t][i][j] + lt.emit[t][j] + beta[t][j] - ll).exp())
                        .collect()
                })
                .collect()
        })
        .collect();
    Posteriors { loglik: ll, gamma, xi }
}

/// Joint log-probability of a given state path and the responses.
pub fn path_log_prob(model: &MehimModel, seq: &HmmSequence, path: &[StateIndex]) -> f64 {
    let mut lp = model.initial.log_probs(&seq.x0)[path[0]] + model.emission_loglik(path[0], &seq.x[0], seq.y[0]);
    for t in 1..seq.len() {
        lp += model.transitions[path[t - 1]].log_probs(&seq.x[t])[path[t]];
        lp += model.emission_loglik(path[t], &seq.x[t], seq.y[t]);
    }
    lp
}

/// Most probable state path. Ties go to the lower state index.
pub fn viterbi(model: &MehimModel, seq: &HmmSequence) -> StatePath {
    let k = model.k;
    let n = seq.len();
    if n == 0 {
        return StatePath { states: Vec::new() };
    }
    let lt = log_terms(model, seq);
    let mut delta: Vec<f64> = (0..k).map(|i| lt.init[i] + lt.emit[0][i]).collect();
    let mut back = vec![vec![0usize; k]; n];
    for t in 1..n {
        let next: Vec<f64> = (0..k)
            .map(|j| {
                let mut best = 0;
                let mut best_v = delta[0] + lt.trans[t][0][j];
                for i in 1..k {
                    let v = delta[i] + lt.trans[t][i][j];
                    if v > best_v {
                        best = i;
                        best_v = v;
                    }
                }
                back[t][j] = best;
                best_v + lt.emit[t][j]
            })
            .collect();
        delta = next;
    }
    let mut states = vec![argmax(&delta); n];
    for t in (1..n).rev() {
        states[t - 1] = back[t][states[t]];
    }
    StatePath { states }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmmConfig {
    pub k: usize,
    pub restarts: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub sigma_floor: f64,
    pub collapse_retries: usize,
    /// Allowed log-likelihood decrease before the logistic step is halved.
    pub decrease_tol: f64,
    pub max_halvings: usize,
}

impl Default for HmmConfig {
    fn default() -> Self {
        Self {
            k: 3,
            restarts: 10,
            tol: 1e-8,
            max_iter: 500,
            seed: 0,
            sigma_floor: 1e-4,
            collapse_retries: 3,
            decrease_tol: 1e-9,
            max_halvings: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmmFit {
    pub model: MehimModel,
    pub log_likelihood: f64,
    pub iterations: usize,
    /// Total log-likelihood of every accepted parameter set.
    pub trace: Vec<f64>,
    pub restart: usize,
}

/// Pooled expected counts from one E-step.
struct Expected {
    loglik: f64,
    /// Per pooled observation.
    gamma: Vec<Vec<f64>>,
    /// Per pooled transition row (observations with `t >= 1`), flattened
    /// `k * k`.
    xi: Vec<Vec<Vec<f64>>>,
    gamma0: Vec<Vec<f64>>,
}

struct Pooled<'a> {
    seqs: &'a [HmmSequence],
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    x_trans: Vec<Vec<f64>>,
    x0: Vec<Vec<f64>>,
}

impl<'a> Pooled<'a> {
    fn new(seqs: &'a [HmmSequence]) -> Self {
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut x_trans = Vec::new();
        for s in seqs {
            x.extend(s.x.iter().cloned());
            y.extend_from_slice(&s.y);
            x_trans.extend(s.x.iter().skip(1).cloned());
        }
        Self {
            seqs,
            x,
            y,
            x_trans,
            x0: seqs.iter().map(|s| s.x0.clone()).collect(),
        }
    }

    fn e_step(&self, model: &MehimModel) -> Expected {
        let posts: Vec<Posteriors> = self.seqs.par_iter().map(|s| forward_backward(model, s)).collect();
        let mut out = Expected {
            loglik: 0.0,
            gamma: Vec::with_capacity(self.y.len()),
            xi: Vec::with_capacity(self.x_trans.len()),
            gamma0: Vec::with_capacity(self.seqs.len()),
        };
        for p in posts {
            out.loglik += p.loglik;
            out.gamma0.push(p.gamma[0].clone());
            out.gamma.extend(p.gamma);
            out.xi.extend(p.xi.into_iter().skip(1));
        }
        out
    }

    fn loglik(&self, model: &MehimModel) -> f64 {
        let lls: Vec<f64> = self.seqs.par_iter().map(|s| sequence_loglik(model, s)).collect();
        lls.iter().sum()
    }
}

fn fit_emissions(pooled: &Pooled, gamma: &[Vec<f64>], k: usize) -> Result<Vec<LinearFit>> {
    (0..k)
        .map(|i| {
            let w: Vec<f64> = gamma.iter().map(|g| g[i]).collect();
            weighted_ls(&pooled.x, &pooled.y, &w)
        })
        .collect()
}

fn fit_logistics(pooled: &Pooled, e: &Expected, model: &MehimModel, opts: &MnlOptions) -> Result<(Vec<MnlFit>, MnlFit)> {
    let k = model.k;
    let transitions = (0..k)
        .map(|i| {
            let w: Vec<Vec<f64>> = e.xi.iter().map(|row| row[i].clone()).collect();
            if w.iter().flatten().sum::<f64>() < 1e-10 {
                return Ok(model.transitions[i].clone());
            }
            mnl_fit(&pooled.x_trans, &w, opts, Some(&model.transitions[i]))
        })
        .collect::<Result<Vec<_>>>()?;
    let initial = mnl_fit(&pooled.x0, &e.gamma0, opts, Some(&model.initial))?;
    Ok((transitions, initial))
}

fn blend(a: &MnlFit, b: &MnlFit, t: f64) -> MnlFit {
    let lerp = |x: f64, y: f64| x + t * (y - x);
    MnlFit {
        intercepts: a.intercepts.iter().zip(&b.intercepts).map(|(x, y)| lerp(*x, *y)).collect(),
        coefficients: a
            .coefficients
            .iter()
            .zip(&b.coefficients)
            .map(|(u, v)| u.iter().zip(v).map(|(x, y)| lerp(*x, *y)).collect())
            .collect(),
        ridge: b.ridge,
    }
}

enum RunOutcome {
    Done(Box<HmmFit>),
    Collapsed,
}

fn collapsed(emissions: &[LinearFit], floor: f64) -> bool {
    emissions.iter().any(|e| !(e.sigma >= floor))
}

fn em_run(pooled: &Pooled, cfg: &HmmConfig, mut model: MehimModel, restart: usize) -> Result<RunOutcome> {
    let opts = MnlOptions::default();
    let mut trace: Vec<f64> = Vec::new();
    let mut e = pooled.e_step(&model);
    let mut iterations = 0;
    loop {
        trace.push(e.loglik);
        if iterations >= cfg.max_iter {
            break;
        }
        if let [.., prev, last] = trace[..] {
            if last - prev < cfg.tol * prev.abs() {
                break;
            }
        }
        iterations += 1;
        let emissions = fit_emissions(pooled, &e.gamma, model.k)?;
        if collapsed(&emissions, cfg.sigma_floor) {
            return Ok(RunOutcome::Collapsed);
        }
        let (transitions, initial) = fit_logistics(pooled, &e, &model, &opts)?;
        let mut candidate = MehimModel {
            emissions,
            transitions,
            initial,
            ..model.clone()
        };
        let mut next = pooled.e_step(&candidate);
        let mut halvings = 0;
        while !(next.loglik >= e.loglik - cfg.decrease_tol) && halvings < cfg.max_halvings {
            halvings += 1;
            candidate.transitions = candidate
                .transitions
                .iter()
                .zip(&model.transitions)
                .map(|(new, old)| blend(old, new, 0.5))
                .collect();
            candidate.initial = blend(&model.initial, &candidate.initial, 0.5);
            next = pooled.e_step(&candidate);
        }
        if !(next.loglik >= e.loglik - cfg.decrease_tol) {
            log::debug!("hmm restart {restart}: no improving step after {halvings} halvings, stopping");
            break;
        }
        model = candidate;
        e = next;
    }
    Ok(RunOutcome::Done(Box::new(HmmFit {
        log_likelihood: e.loglik,
        model,
        iterations,
        trace,
        restart,
    })))
}

/// Starting parameters from responsibilities: emissions by weighted least
/// squares, transitions favouring persistence, uniform initial states.
fn initial_model(pooled: &Pooled, resp: &[Vec<f64>], template: &MehimModel) -> Result<MehimModel> {
    let k = template.k;
    let mut model = template.clone();
    model.emissions = fit_emissions(pooled, resp, k)?;
    for (i, block) in model.transitions.iter_mut().enumerate() {
        *block = MnlFit::zeros(k, template.covariate_set.len());
        block.intercepts[i] = 1.0;
        block.rebase();
    }
    Ok(model)
}

/// Responsibilities from starting emissions, via the per-observation mixture
/// posterior with equal weights.
fn responsibilities_from_emissions(pooled: &Pooled, emissions: &[LinearFit]) -> Vec<Vec<f64>> {
    pooled
        .x
        .iter()
        .zip(&pooled.y)
        .map(|(x, &y)| {
            let l: Vec<f64> = emissions.iter().map(|e| e.log_density(x, y)).collect();
            let lse = log_sum_exp(&l);
            l.iter().map(|v| (v - lse).exp()).collect()
        })
        .collect()
}

/// Baum-Welch generalized EM, best of `cfg.restarts` runs, states
/// canonicalized by emission sigma.
///
/// `start` optionally seeds the first restart's emissions (for instance from
/// a mixture fit). With `k = 1` the emission is the least-squares fit.
pub fn mehim_fit(seqs: &[HmmSequence], covariate_set: CovariateSet, scaler: &Scaler, cfg: &HmmConfig, start: Option<&[LinearFit]>) -> Result<HmmFit> {
    let k = cfg.k;
    if k == 0 {
        return Err(Error::Fit("hmm: k must be positive".into()));
    }
    let p = covariate_set.len();
    if let Some(bad) = seqs.iter().find(|s| s.is_empty() || s.x.iter().any(|x| x.len() != p)) {
        return Err(Error::Fit(format!(
            "hmm: sequences must be non-empty with {p} covariates (got length {})",
            bad.len()
        )));
    }
    let pooled = Pooled::new(seqs);
    let mut template = MehimModel::zeros(k, covariate_set);
    template.scaler = scaler.clone();
    let n_obs = pooled.y.len();
    let metadata = |ll: f64, iterations: usize| FitMetadata {
        log_likelihood: ll,
        n_obs,
        n_sequences: seqs.len(),
        seed: cfg.seed,
        iterations,
        restarts: cfg.restarts,
    };
    if k == 1 {
        let mut model = template;
        model.emissions = vec![ols_fit(&pooled.x, &pooled.y)?];
        let ll = pooled.loglik(&model);
        model.metadata = metadata(ll, 0);
        return Ok(HmmFit {
            model,
            log_likelihood: ll,
            iterations: 0,
            trace: vec![ll],
            restart: 0,
        });
    }
    if n_obs < 100 * k {
        return Err(Error::Fit(format!("hmm: need at least {} observations for k = {k}, got {n_obs}", 100 * k)));
    }
    let runs: Vec<Result<Option<HmmFit>>> = (0..cfg.restarts.max(1))
        .into_par_iter()
        .map(|restart| {
            for attempt in 0..=cfg.collapse_retries {
                let mut rng = stream(cfg.seed, "hmm-restart", (restart * 1000 + attempt) as u64);
                let resp = match start {
                    Some(em) if restart == 0 && attempt == 0 && em.len() == k => responsibilities_from_emissions(&pooled, em),
                    _ => {
                        let jitter = if restart == 0 && attempt == 0 { 0.05 } else { 0.3 };
                        quantile_responsibilities(&pooled.y, k, jitter, &mut rng)
                    }
                };
                let init = initial_model(&pooled, &resp, &template)?;
                if collapsed(&init.emissions, cfg.sigma_floor) {
                    continue;
                }
                if let RunOutcome::Done(fit) = em_run(&pooled, cfg, init, restart)? {
                    return Ok(Some(*fit));
                }
                log::debug!("hmm restart {restart}: state collapsed, re-seeding");
            }
            Ok(None)
        })
        .collect();
    let mut best: Option<HmmFit> = None;
    for run in runs {
        if let Some(fit) = run? {
            if best.as_ref().is_none_or(|b| fit.log_likelihood > b.log_likelihood) {
                best = Some(fit);
            }
        }
    }
    let mut best = best.ok_or_else(|| Error::Fit("hmm: every restart collapsed".into()))?;
    best.model = best.model.canonicalize();
    best.model.metadata = metadata(best.log_likelihood, best.iterations);
    Ok(best)
}

/// Convenience: fit on standardized ocean sequences.
pub fn mehim_fit_sequences(
    seqs: &[OceanSequence],
    covariate_set: CovariateSet,
    scaler: &Scaler,
    cfg: &HmmConfig,
    start: Option<&[LinearFit]>,
) -> Result<HmmFit> {
    let data: Vec<HmmSequence> = seqs.iter().map(|s| HmmSequence::from_ocean(s, covariate_set)).collect();
    mehim_fit(&data, covariate_set, scaler, cfg, start)
}

/// Draw a state path and responses from the model along given covariates.
pub fn sample_sequence<R: Rng + ?Sized>(model: &MehimModel, x: &[Vec<f64>], x0: &[f64], rng: &mut R) -> (Vec<StateIndex>, Vec<f64>) {
    let mut states = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for (t, xt) in x.iter().enumerate() {
        let probs = if t == 0 {
            model.initial_probs(x0)
        } else {
            model.transition_probs(states[t - 1], xt)
        };
        let s = crate::rng::categorical(rng, &probs);
        states.push(s);
        y.push(model.emission_sample(s, xt, rng));
    }
    (states, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_model(rng: &mut ChaCha8Rng, k: usize) -> MehimModel {
        let mut m = MehimModel::zeros(k, CovariateSet::Full);
        let mut u = |s: f64| (rng.random::<f64>() * 2.0 - 1.0) * s;
        for e in &mut m.emissions {
            e.intercept = u(1.0);
            e.coefficients.iter_mut().for_each(|c| *c = u(0.5));
            e.sigma = 0.2 + u(1.0).abs();
        }
        for b in m.transitions.iter_mut().chain(std::iter::once(&mut m.initial)) {
            for r in 0..k - 1 {
                b.intercepts[r] = u(2.0);
                b.coefficients[r].iter_mut().for_each(|c| *c = u(1.0));
            }
        }
        m
    }

    pub(crate) fn random_seq(rng: &mut ChaCha8Rng, t: usize) -> HmmSequence {
        let mut u = || rng.random::<f64>() * 2.0 - 1.0;
        HmmSequence {
            x: (0..t).map(|_| (0..6).map(|_| u()).collect()).collect(),
            x0: (0..3).map(|_| u()).collect(),
            y: (0..t).map(|_| 2.0 * u()).collect(),
        }
    }

    fn all_paths(k: usize, t: usize) -> Vec<Vec<usize>> {
        (0..k.pow(t as u32))
            .map(|mut code| {
                (0..t)
                    .map(|_| {
                        let s = code % k;
                        code /= k;
                        s
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn transition_anchor_from_table() {
        let mut m = MehimModel::zeros(3, CovariateSet::Full);
        m.transitions[0].intercepts = vec![4.663, 4.553, 0.0];
        let p = m.transition_probs(0, &[0.0; 6]);
        let e = [4.663f64.exp(), 4.553f64.exp(), 1.0];
        let s: f64 = e.iter().sum();
        for (a, b) in p.iter().zip(&e) {
            assert!((a - b / s).abs() < 1e-12);
        }
        assert!((p[0] - 0.525).abs() < 5e-4 && (p[1] - 0.470).abs() < 5e-4 && (p[2] - 0.005).abs() < 5e-4);
    }

    #[test]
    fn from_state_three_intercepts() {
        let mut m = MehimModel::zeros(3, CovariateSet::Full);
        m.transitions[2].intercepts = vec![-1.013, 0.267, 0.0];
        let p = m.transition_probs(2, &[0.0; 6]);
        let s = (-1.013f64).exp() + 0.267f64.exp() + 1.0;
        assert!((p[0] - (-1.013f64).exp() / s).abs() < 1e-15);
        assert!((p[1] - 0.267f64.exp() / s).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(MehimModel::zeros(3, CovariateSet::Full).transition_probs(1, &[0.3; 6]), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn emission_peak_and_table_mean() {
        let mut m = MehimModel::zeros(3, CovariateSet::Full);
        m.emissions[2] = LinearFit {
            intercept: 0.269,
            coefficients: vec![0.357, -0.483, 0.370, -0.619, -0.023, 0.252],
            sigma: 1.979,
        };
        let x = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert!((m.emissions[2].mean(&x) - 0.626).abs() < 1e-12);
        let peak = m.emission_loglik(2, &x, 0.626);
        assert!((peak - (1.0 / (1.979 * (2.0 * std::f64::consts::PI).sqrt())).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_step_is_initial_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_model(&mut rng, 3);
        let s = random_seq(&mut rng, 1);
        let pi = m.initial_probs(&s.x0);
        let mix: f64 = (0..3).map(|i| pi[i] * m.emission_loglik(i, &s.x[0], s.y[0]).exp()).sum();
        assert!((sequence_loglik(&m, &s) - mix.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_state_is_gaussian_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_model(&mut rng, 1);
        let s = random_seq(&mut rng, 7);
        let direct: f64 = (0..7).map(|t| m.emission_loglik(0, &s.x[t], s.y[t])).sum();
        assert!((sequence_loglik(&m, &s) - direct).abs() < 1e-12);
        assert_eq!(viterbi(&m, &s).states, vec![0; 7]);
    }

    #[test]
    fn viterbi_recovers_separated_path() {
        let mut m = MehimModel::zeros(3, CovariateSet::Full);
        for (i, e) in m.emissions.iter_mut().enumerate() {
            e.intercept = 10.0 * i as f64;
            e.sigma = 0.01;
        }
        let path = vec![0, 0, 2, 1, 1, 2, 0];
        let s = HmmSequence {
            x: vec![vec![0.0; 6]; path.len()],
            x0: vec![0.0; 3],
            y: path.iter().map(|&p| 10.0 * p as f64).collect(),
        };
        assert_eq!(viterbi(&m, &s).states, path);
    }

    #[test]
    fn viterbi_ties_prefer_lower_state() {
        let m = MehimModel::zeros(3, CovariateSet::Full);
        let s = HmmSequence {
            x: vec![vec![0.0; 6]; 4],
            x0: vec![0.0; 3],
            y: vec![0.5; 4],
        };
        assert_eq!(viterbi(&m, &s).states, vec![0; 4]);
    }

    #[test]
    fn marginals_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_model(&mut rng, 3);
        let s = random_seq(&mut rng, 9);
        let p = forward_backward(&m, &s);
        for t in 0..9 {
            assert!((p.gamma[t].iter().sum::<f64>() - 1.0).abs() < 1e-10);
            if t > 0 {
                for j in 0..3 {
                    let into: f64 = (0..3).map(|i| p.xi[t][i][j]).sum();
                    assert!((into - p.gamma[t][j]).abs() < 1e-10);
                }
                for i in 0..3 {
                    let out: f64 = p.xi[t][i].iter().sum();
                    assert!((out - p.gamma[t - 1][i]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn canonical_permutation_preserves_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_model(&mut rng, 3);
        let c = m.canonicalize();
        assert!(c.emissions.windows(2).all(|w| w[0].sigma <= w[1].sigma));
        for _ in 0..20 {
            let s = random_seq(&mut rng, 10);
            assert!((sequence_loglik(&m, &s) - sequence_loglik(&c, &s)).abs() < 1e-10);
        }
        for b in c.transitions.iter().chain(std::iter::once(&c.initial)) {
            assert_eq!(b.intercepts[2], 0.0);
            assert!(b.coefficients[2].iter().all(|g| *g == 0.0));
        }
    }

    #[test]
    fn viterbi_beats_random_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_model(&mut rng, 3);
        let s = random_seq(&mut rng, 15);
        let best = path_log_prob(&m, &s, &viterbi(&m, &s).states);
        for _ in 0..1000 {
            let path: Vec<usize> = (0..15).map(|_| rng.random_range(0..3)).collect();
            assert!(best >= path_log_prob(&m, &s, &path) - 1e-12);
        }
    }

    #[test]
    fn constant_data_exhausts_restarts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y: Vec<f64> = (0..400).map(|_| 1.0 + 1e-7 * normal(&mut rng, 0.0, 1.0)).collect();
        let seq = HmmSequence {
            x: vec![vec![0.0; 6]; 400],
            x0: vec![0.0; 3],
            y,
        };
        let cfg = HmmConfig {
            restarts: 2,
            max_iter: 50,
            ..Default::default()
        };
        let r = mehim_fit(&[seq], CovariateSet::Full, &Scaler::identity(), &cfg, None);
        assert!(matches!(r, Err(Error::Fit(_))), "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn forward_matches_enumeration(seed in any::<u64>(), t in 1usize..=7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_model(&mut rng, 3);
            let s = random_seq(&mut rng, t);
            let paths = all_paths(3, t);
            let lps: Vec<f64> = paths.iter().map(|p| path_log_prob(&m, &s, p)).collect();
            let brute = log_sum_exp(&lps);
            let fwd = sequence_loglik(&m, &s);
            prop_assert!((fwd - brute).abs() <= 1e-9 * brute.abs().max(1.0));
            let v = viterbi(&m, &s);
            let best = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((path_log_prob(&m, &s, &v.states) - best).abs() < 1e-10);
        }
    }
}
