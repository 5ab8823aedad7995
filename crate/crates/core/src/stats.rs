//! Estimation primitives: ordinary and weighted least squares, weighted
//! multinomial logistic regression, and exponential-decay nonlinear least
//! squares.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{Covariate, LandSegment};
use crate::error::{Error, Result};

/// Gaussian linear regression `y ~ N(intercept + x . coefficients, sigma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub sigma: f64,
}

impl LinearFit {
    pub fn zeros(p: usize) -> Self {
        Self {
            intercept: 0.0,
            coefficients: vec![0.0; p],
            sigma: 0.0,
        }
    }

    pub fn mean(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.coefficients.len());
        self.intercept + dot(&self.coefficients, x)
    }

    pub fn log_density(&self, x: &[f64], y: f64) -> f64 {
        normal_log_pdf(y, self.mean(x), self.sigma)
    }
}

pub fn ols_predict(fit: &LinearFit, x: &[f64]) -> f64 {
    fit.mean(x)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn normal_log_pdf(y: f64, mean: f64, sigma: f64) -> f64 {
    let z = (y - mean) / sigma;
    -0.5 * z * z - sigma.ln() - LN_SQRT_2PI
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn column_label(j: usize, p: usize) -> String {
    if j == 0 {
        "intercept".into()
    } else if p == 6 || p == 5 {
        Covariate::ALL[j - 1].name().into()
    } else {
        format!("x{}", j)
    }
}

fn design(x: &[Vec<f64>], p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(x.len(), p + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] })
}

/// Ordinary least squares with an intercept, solved by QR.
///
/// `sigma` is the residual standard deviation with `n - p - 1` degrees of
/// freedom.
pub fn ols_fit(x: &[Vec<f64>], y: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::Fit(format!("ols: {n} rows but {} responses", y.len())));
    }
    let p = x.first().map_or(0, Vec::len);
    if n <= p + 1 {
        return Err(Error::Fit(format!("ols: need more than {} rows, got {n}", p + 1)));
    }
    let a = design(x, p);
    let qr = a.clone().qr();
    let (q, r) = qr.unpack();
    let scale = (0..=p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    let deficient: Vec<String> = (0..=p)
        .filter(|&j| r[(j, j)].abs() <= 1e-10 * scale.max(f64::MIN_POSITIVE))
        .map(|j| column_label(j, p))
        .collect();
    if !deficient.is_empty() {
        return Err(Error::Fit(format!("ols: rank-deficient design, collinear column(s): {}", deficient.join(", "))));
    }
    let yv = DVector::from_column_slice(y);
    let qty = q.transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Fit("ols: singular triangular factor".into()))?;
    let resid = &yv - &a * &beta;
    let rss = resid.norm_squared();
    Ok(LinearFit {
        intercept: beta[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        sigma: (rss / (n - p - 1) as f64).sqrt(),
    })
}

/// Weighted least squares used inside EM.
///
/// Columns whose weighted second moment is zero (e.g. a covariate that is
/// identically zero) are pinned at coefficient 0. `sigma` is the weighted
/// maximum-likelihood estimate `sqrt(sum w r^2 / sum w)`.
pub fn weighted_ls(x: &[Vec<f64>], y: &[f64], w: &[f64]) -> Result<LinearFit> {
    let p = x.first().map_or(0, Vec::len);
    let m = p + 1;
    let mut gram = vec![0.0; m * m];
    let mut rhs = vec![0.0; m];
    let mut row = vec![0.0; m];
    let mut wsum = 0.0;
    for ((xi, &yi), &wi) in x.iter().zip(y).zip(w) {
        if wi == 0.0 {
            continue;
        }
        row[0] = 1.0;
        row[1..].copy_from_slice(xi);
        for a in 0..m {
            let wa = wi * row[a];
            rhs[a] += wa * yi;
            for b in a..m {
                gram[a * m + b] += wa * row[b];
            }
        }
        wsum += wi;
    }
    if !(wsum > 0.0) {
        return Err(Error::Fit("weighted least squares: zero total weight".into()));
    }
    let active: Vec<usize> = (0..m).filter(|&j| j == 0 || gram[j * m + j] > 1e-12 * wsum).collect();
    let ma = active.len();
    let g = DMatrix::from_fn(ma, ma, |a, b| {
        let (i, j) = (active[a].min(active[b]), active[a].max(active[b]));
        gram[i * m + j]
    });
    let b = DVector::from_iterator(ma, active.iter().map(|&j| rhs[j]));
    let chol = g
        .cholesky()
        .ok_or_else(|| Error::Fit("weighted least squares: singular normal equations".into()))?;
    let sol = chol.solve(&b);
    let mut beta = vec![0.0; m];
    for (a, &j) in active.iter().enumerate() {
        beta[j] = sol[a];
    }
    let fit = LinearFit {
        intercept: beta[0],
        coefficients: beta[1..].to_vec(),
        sigma: 0.0,
    };
    let wrss: f64 = x.iter().zip(y).zip(w).map(|((xi, &yi), &wi)| wi * (yi - fit.mean(xi)).powi(2)).sum();
    Ok(LinearFit {
        sigma: (wrss / wsum).sqrt(),
        ..fit
    })
}

/// Multinomial logistic regression; the last category is the baseline with
/// all parameters fixed at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnlFit {
    pub intercepts: Vec<f64>,
    pub coefficients: Vec<Vec<f64>>,
    /// Ridge penalty used when the unpenalized fit diverged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
}

impl MnlFit {
    pub fn zeros(k: usize, p: usize) -> Self {
        Self {
            intercepts: vec![0.0; k],
            coefficients: vec![vec![0.0; p]; k],
            ridge: None,
        }
    }

    pub fn k(&self) -> usize {
        self.intercepts.len()
    }

    pub fn p(&self) -> usize {
        self.coefficients.first().map_or(0, Vec::len)
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.intercepts.iter().zip(&self.coefficients).map(|(a, g)| a + dot(g, x)).collect()
    }

    pub fn log_probs(&self, x: &[f64]) -> Vec<f64> {
        let mut l = self.logits(x);
        let lse = log_sum_exp(&l);
        for v in &mut l {
            *v -= lse;
        }
        l
    }

    /// Reorder categories (`perm[new] = old`) and re-express relative to the
    /// new last category.
    pub fn permute_categories(&self, perm: &[usize]) -> MnlFit {
        let mut out = MnlFit {
            intercepts: perm.iter().map(|&o| self.intercepts[o]).collect(),
            coefficients: perm.iter().map(|&o| self.coefficients[o].clone()).collect(),
            ridge: self.ridge,
        };
        out.rebase();
        out
    }

    /// Shift all logits so that the last category is zero.
    pub fn rebase(&mut self) {
        let k = self.k();
        let base_a = self.intercepts[k - 1];
        let base_g = self.coefficients[k - 1].clone();
        for r in 0..k {
            self.intercepts[r] -= base_a;
            for (g, b) in self.coefficients[r].iter_mut().zip(&base_g) {
                *g -= b;
            }
        }
    }
}

/// Softmax with max-subtraction.
pub fn mnl_probs(fit: &MnlFit, x: &[f64]) -> Vec<f64> {
    softmax(&fit.logits(x))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MnlOptions {
    /// Absolute log-likelihood change for convergence.
    pub tol: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub ridge_fallback: f64,
    /// Largest fitted logit (relative to the baseline) before the data are
    /// treated as separated.
    pub max_logit: f64,
}

impl Default for MnlOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            grad_tol: 1e-6,
            max_iter: 100,
            ridge_fallback: 1e-6,
            max_logit: 30.0,
        }
    }
}

/// Weighted multinomial log-likelihood `sum_i sum_r w_ir log pi_r(x_i)`.
pub fn mnl_loglik(fit: &MnlFit, x: &[Vec<f64>], w: &[Vec<f64>]) -> f64 {
    x.iter()
        .zip(w)
        .map(|(xi, wi)| {
            let lp = fit.log_probs(xi);
            wi.iter().zip(&lp).map(|(a, b)| if *a == 0.0 { 0.0 } else { a * b }).sum::<f64>()
        })
        .sum()
}

/// Gradient of the (unpenalized) weighted log-likelihood with respect to the
/// non-baseline parameters, laid out `[r * (p + 1) + j]` with `j = 0` the
/// intercept.
pub fn mnl_gradient(fit: &MnlFit, x: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<f64> {
    let k = fit.k();
    let p = fit.p();
    let mut g = vec![0.0; (k - 1) * (p + 1)];
    for (xi, wi) in x.iter().zip(w) {
        let n: f64 = wi.iter().sum();
        let pi = mnl_probs(fit, xi);
        for r in 0..k - 1 {
            let d = wi[r] - n * pi[r];
            let base = r * (p + 1);
            g[base] += d;
            for j in 0..p {
                g[base + 1 + j] += d * xi[j];
            }
        }
    }
    g
}

struct MnlProblem<'a> {
    x: &'a [Vec<f64>],
    w: &'a [Vec<f64>],
    k: usize,
    p: usize,
    /// Parameter slots that are free (others pinned at zero).
    active: Vec<usize>,
    ridge: f64,
}

impl MnlProblem<'_> {
    fn unpack(&self, theta: &[f64]) -> MnlFit {
        let mut fit = MnlFit::zeros(self.k, self.p);
        for r in 0..self.k - 1 {
            let base = r * (self.p + 1);
            fit.intercepts[r] = theta[base];
            fit.coefficients[r].copy_from_slice(&theta[base + 1..base + 1 + self.p]);
        }
        fit
    }

    fn objective(&self, theta: &[f64]) -> f64 {
        let ll = mnl_loglik(&self.unpack(theta), self.x, self.w);
        ll - 0.5 * self.ridge * theta.iter().map(|t| t * t).sum::<f64>()
    }

    /// Objective, gradient and negative Hessian (active slots only), plus the
    /// largest absolute logit over the data.
    fn derivatives(&self, theta: &[f64]) -> (f64, Vec<f64>, DMatrix<f64>, f64) {
        let fit = self.unpack(theta);
        let (k, p) = (self.k, self.p);
        let q = (k - 1) * (p + 1);
        let mut ll = 0.0;
        let mut g = vec![0.0; q];
        let mut h = vec![0.0; q * q];
        let mut row = vec![0.0; p + 1];
        let mut max_logit = 0.0f64;
        for (xi, wi) in self.x.iter().zip(self.w) {
            let n: f64 = wi.iter().sum();
            if n == 0.0 {
                continue;
            }
            for l in fit.logits(xi) {
                max_logit = max_logit.max(l.abs());
            }
            let lp = fit.log_probs(xi);
            let pi: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
            ll += wi.iter().zip(&lp).map(|(a, b)| if *a == 0.0 { 0.0 } else { a * b }).sum::<f64>();
            row[0] = 1.0;
            row[1..].copy_from_slice(xi);
            for r in 0..k - 1 {
                let d = wi[r] - n * pi[r];
                for j in 0..=p {
                    g[r * (p + 1) + j] += d * row[j];
                }
                for s in r..k - 1 {
                    let c = n * pi[r] * (if r == s { 1.0 } else { 0.0 } - pi[s]);
                    if c == 0.0 {
                        continue;
                    }
                    for j in 0..=p {
                        let cj = c * row[j];
                        let ri = (r * (p + 1) + j) * q + s * (p + 1);
                        for l in 0..=p {
                            h[ri + l] += cj * row[l];
                        }
                    }
                }
            }
        }
        // fill the lower block triangle
        for r in 0..k - 1 {
            for s in 0..r {
                for j in 0..=p {
                    for l in 0..=p {
                        h[(r * (p + 1) + j) * q + s * (p + 1) + l] = h[(s * (p + 1) + l) * q + r * (p + 1) + j];
                    }
                }
            }
        }
        ll -= 0.5 * self.ridge * theta.iter().map(|t| t * t).sum::<f64>();
        for (gi, t) in g.iter_mut().zip(theta) {
            *gi -= self.ridge * t;
        }
        let na = self.active.len();
        let grad: Vec<f64> = self.active.iter().map(|&a| g[a]).collect();
        let neg_h = DMatrix::from_fn(na, na, |a, b| h[self.active[a] * q + self.active[b]] + if a == b { self.ridge } else { 0.0 });
        (ll, grad, neg_h, max_logit)
    }
}

enum NewtonOutcome {
    Converged(Vec<f64>),
    Diverged,
}

fn newton(problem: &MnlProblem, mut theta: Vec<f64>, opts: &MnlOptions) -> NewtonOutcome {
    let mut prev = f64::NEG_INFINITY;
    let mut settling = false;
    for _ in 0..opts.max_iter {
        let (ll, grad, neg_h, max_logit) = problem.derivatives(&theta);
        if max_logit > opts.max_logit || !ll.is_finite() {
            return NewtonOutcome::Diverged;
        }
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if settling || gnorm == 0.0 {
            return NewtonOutcome::Converged(theta);
        }
        // one more full step once a stopping rule fires: quadratic
        // convergence then puts the error far below the stopping scale
        settling = gnorm < opts.grad_tol || (ll - prev).abs() < opts.tol;
        prev = ll;
        let step = match neg_h.clone().cholesky() {
            Some(ch) => ch.solve(&DVector::from_vec(grad.clone())),
            None => return NewtonOutcome::Diverged,
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut cand = theta.clone();
            for (a, &slot) in problem.active.iter().enumerate() {
                cand[slot] += t * step[a];
            }
            let obj = problem.objective(&cand);
            if obj >= ll - 1e-13 * ll.abs() {
                theta = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return NewtonOutcome::Converged(theta);
        }
    }
    NewtonOutcome::Converged(theta)
}

/// Maximize the weighted multinomial log-likelihood by damped Newton steps.
///
/// Rows of `w` are non-negative; they need not sum to one (expected
/// transition counts do not). `warm` seeds the parameters. When the data are
/// separated the fit is repeated with a small ridge penalty, recorded in
/// `MnlFit::ridge`.
pub fn mnl_fit(x: &[Vec<f64>], w: &[Vec<f64>], opts: &MnlOptions, warm: Option<&MnlFit>) -> Result<MnlFit> {
    let k = w.first().map_or(0, Vec::len);
    if k < 2 {
        return Err(Error::Fit("multinomial logit: need at least 2 categories".into()));
    }
    if x.len() != w.len() {
        return Err(Error::Fit("multinomial logit: rows of x and w differ".into()));
    }
    let p = x.first().map_or(0, Vec::len);
    if w.iter().flatten().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::Fit("multinomial logit: weights must be finite and non-negative".into()));
    }
    // pin covariates with no weighted support
    let mut moment = vec![0.0; p];
    for (xi, wi) in x.iter().zip(w) {
        let n: f64 = wi.iter().sum();
        for j in 0..p {
            moment[j] += n * xi[j] * xi[j];
        }
    }
    let total: f64 = w.iter().flatten().sum();
    let mut active = Vec::new();
    for r in 0..k - 1 {
        active.push(r * (p + 1));
        for j in 0..p {
            if moment[j] > 1e-12 * total {
                active.push(r * (p + 1) + 1 + j);
            }
        }
    }
    let mut theta0 = vec![0.0; (k - 1) * (p + 1)];
    if let Some(fit) = warm.filter(|f| f.k() == k && f.p() == p) {
        let mut base = fit.clone();
        base.rebase();
        for r in 0..k - 1 {
            theta0[r * (p + 1)] = base.intercepts[r];
            for j in 0..p {
                theta0[r * (p + 1) + 1 + j] = base.coefficients[r][j];
            }
        }
        for (i, t) in theta0.iter_mut().enumerate() {
            if !active.contains(&i) {
                *t = 0.0;
            }
        }
    }
    let mut problem = MnlProblem {
        x,
        w,
        k,
        p,
        active,
        ridge: 0.0,
    };
    if let NewtonOutcome::Converged(theta) = newton(&problem, theta0.clone(), opts) {
        return Ok(problem.unpack(&theta));
    }
    debug!(
        "multinomial logit: separated data (logit above {}), refitting with ridge {}",
        opts.max_logit, opts.ridge_fallback
    );
    problem.ridge = opts.ridge_fallback;
    let relaxed = MnlOptions {
        max_logit: f64::INFINITY,
        max_iter: opts.max_iter * 4,
        ..*opts
    };
    match newton(&problem, vec![0.0; theta0.len()], &relaxed) {
        NewtonOutcome::Converged(theta) => {
            let mut fit = problem.unpack(&theta);
            fit.ridge = Some(opts.ridge_fallback);
            Ok(fit)
        }
        NewtonOutcome::Diverged => Err(Error::Fit("multinomial logit: ridge refit failed".into())),
    }
}

/// Options for the exponential-decay fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NlsOptions {
    pub max_iter: usize,
    pub step_tol: f64,
    pub objective_tol: f64,
}

impl Default for NlsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            step_tol: 1e-10,
            objective_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlsFit {
    pub alpha: f64,
    pub v_b: f64,
    pub objective: f64,
    pub iterations: usize,
    /// Decay rate not identified by the data; `alpha` is the projected start.
    pub degenerate: bool,
    /// Objective after each accepted step, starting with the initial value.
    pub trace: Vec<f64>,
}

const MIN_ALPHA: f64 = 1e-12;

fn project(alpha: f64, v_b: f64) -> (f64, f64) {
    (alpha.max(MIN_ALPHA), v_b.max(0.0))
}

/// Decay curve `v_b + (v0 - v_b) exp(-alpha t)`.
pub fn decay_curve(v0: f64, alpha: f64, v_b: f64, t: f64) -> f64 {
    v_b + (v0 - v_b) * (-alpha * t).exp()
}

fn decay_objective(segments: &[LandSegment], alpha: f64, v_b: f64) -> f64 {
    segments
        .iter()
        .flat_map(|s| {
            s.intensities
                .iter()
                .enumerate()
                .map(move |(i, &v)| (v - decay_curve(s.v0, alpha, v_b, (i + 1) as f64)).powi(2))
        })
        .sum()
}

/// Fit `(alpha, v_b)` of the exponential decay to land segments by
/// Levenberg-Marquardt with projection onto `alpha > 0`, `v_b >= 0`.
///
/// The first intensity of a segment is one step after `v0`.
pub fn nls_exp_decay_fit(segments: &[LandSegment], init: (f64, f64), opts: &NlsOptions) -> Result<NlsFit> {
    if segments.is_empty() {
        return Err(Error::Fit("decay fit: no segments".into()));
    }
    if segments.iter().any(|s| s.intensities.is_empty()) {
        return Err(Error::Fit("decay fit: empty segment".into()));
    }
    let (mut alpha, mut v_b) = project(init.0, init.1);
    let mut f = decay_objective(segments, alpha, v_b);
    let mut trace = vec![f];
    let mut mu = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        // normal equations of the linearized problem
        let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for s in segments {
            for (i, &v) in s.intensities.iter().enumerate() {
                let t = (i + 1) as f64;
                let e = (-alpha * t).exp();
                let r = v - decay_curve(s.v0, alpha, v_b, t);
                let ja = -(s.v0 - v_b) * t * e;
                let jb = 1.0 - e;
                a11 += ja * ja;
                a12 += ja * jb;
                a22 += jb * jb;
                b1 += ja * r;
                b2 += jb * r;
            }
        }
        if f <= f64::MIN_POSITIVE || (b1.abs() < 1e-300 && b2.abs() < 1e-300) {
            converged = true;
            break;
        }
        let mut accepted = false;
        while mu < 1e20 {
            let d11 = a11 + mu * a11.max(1e-12);
            let d22 = a22 + mu * a22.max(1e-12);
            let det = d11 * d22 - a12 * a12;
            if det.abs() < 1e-300 || !det.is_finite() {
                mu *= 10.0;
                continue;
            }
            let da = (d22 * b1 - a12 * b2) / det;
            let db = (d11 * b2 - a12 * b1) / det;
            let (na, nb) = project(alpha + da, v_b + db);
            let fn_ = decay_objective(segments, na, nb);
            if fn_ <= f {
                let step = ((na - alpha).powi(2) + (nb - v_b).powi(2)).sqrt();
                let change = f - fn_;
                alpha = na;
                v_b = nb;
                f = fn_;
                trace.push(f);
                mu = (mu / 3.0).max(1e-12);
                accepted = true;
                if step < opts.step_tol || change <= opts.objective_tol * f.max(f64::MIN_POSITIVE) {
                    converged = true;
                }
                break;
            }
            mu *= 2.0;
        }
        if !accepted {
            // no descent direction left at this damping: stationary point
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations,
            objective: f,
            best: vec![alpha, v_b],
        });
    }
    let jac_alpha_norm = segments
        .iter()
        .flat_map(|s| {
            (1..=s.intensities.len()).map(move |i| {
                let t = i as f64;
                ((s.v0 - v_b) * t * (-alpha * t).exp()).powi(2)
            })
        })
        .sum::<f64>()
        .sqrt();
    let scale: f64 = segments.iter().map(|s| s.v0.abs()).fold(1.0, f64::max);
    let degenerate = jac_alpha_norm <= 1e-6 * scale;
    if degenerate {
        warn!("decay fit: decay rate not identified (flat segments); keeping the initial rate");
        alpha = project(init.0, init.1).0;
    }
    Ok(NlsFit {
        alpha,
        v_b,
        objective: f,
        iterations,
        degenerate,
        trace,
    })
}
