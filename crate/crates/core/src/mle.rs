//! Follower behavior-model estimation.
//!
//! Myopic linear model: at step `h` the follower picks `b` with probability
//! `softmax_b(eta <phi^pi(s, b), theta>)` where `phi^pi(s, b) = sum_a pi(a|s,b) phi(s,a,b)`.
//! Everything here is a sum over episodes, so `T * Sigma_D` is the summed
//! per-sample covariance.

use crate::error::{Error, Result};
use crate::game::{Dataset, FeatureMap, LeaderPolicy, MarkovGame, Step};
use crate::planner::state_distribution;
use crate::response::{hellinger_sq, prescribed_reward, quantal_response, soft_max_into, FollowerSolution};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Observed choices at one step: per sample the `|B| x d` matrix of
/// policy-integrated features and the chosen `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceData {
    nb: usize,
    d: usize,
    eta: f64,
    feats: Vec<f64>,
    chosen: Vec<usize>,
}

/// `phi^alpha(s, b)` for every `b`, laid out `[b][k]`.
pub fn policy_features(features: &FeatureMap, prescription: &[f64], h: usize, s: usize) -> Vec<f64> {
    let dims = features.dims();
    let (na, nb, d) = (dims.leader_actions, dims.follower_actions, features.dim());
    let mut out = vec![0.0; nb * d];
    for b in 0..nb {
        for a in 0..na {
            let w = prescription[b * na + a];
            if w == 0.0 {
                continue;
            }
            for (o, x) in out[b * d..(b + 1) * d].iter_mut().zip(features.phi(h, s, a, b)) {
                *o += w * x;
            }
        }
    }
    out
}

impl ChoiceData {
    pub fn new(nb: usize, d: usize, eta: f64) -> Self {
        ChoiceData { nb, d, eta, feats: Vec::new(), chosen: Vec::new() }
    }

    pub fn push(&mut self, feats: &[f64], chosen: usize) {
        debug_assert_eq!(feats.len(), self.nb * self.d);
        self.feats.extend_from_slice(feats);
        self.chosen.push(chosen);
    }

    pub fn from_dataset(dataset: &Dataset, features: &FeatureMap, h: usize, eta: f64) -> Self {
        let dims = features.dims();
        let mut data = ChoiceData::new(dims.follower_actions, features.dim(), eta);
        for ep in &dataset.episodes {
            let step = &ep.steps[h];
            let pres = dataset.policies[ep.policy_id].prescription(h, step.state);
            data.push(&policy_features(features, pres, h, step.state), step.follower_action);
        }
        data
    }

    pub fn len(&self) -> usize {
        self.chosen.len()
    }
    pub fn is_empty(&self) -> bool {
        self.chosen.is_empty()
    }
    pub fn dim(&self) -> usize {
        self.d
    }
    pub fn follower_actions(&self) -> usize {
        self.nb
    }
    pub fn eta(&self) -> f64 {
        self.eta
    }
    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        let n = self.nb * self.d;
        (&self.feats[i * n..(i + 1) * n], self.chosen[i])
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Choice probabilities and log-partition for one sample.
fn choice_probs(feats: &[f64], nb: usize, d: usize, eta: f64, theta: &[f64], probs: &mut [f64]) -> (f64, f64) {
    let mut m = f64::NEG_INFINITY;
    for b in 0..nb {
        probs[b] = eta * dot(&feats[b * d..(b + 1) * d], theta);
        m = m.max(probs[b]);
    }
    let mut z = 0.0;
    for p in probs.iter_mut() {
        *p = (*p - m).exp();
        z += *p;
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    (m, z.ln())
}

/// `L(theta) = -sum_i (eta r_i(b_i) - log sum_b exp(eta r_i(b)))`.
pub fn nll_myopic(theta: &[f64], data: &ChoiceData) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let (nb, d) = (data.nb, data.d);
    let mut probs = vec![0.0; nb];
    let mut total = 0.0;
    for i in 0..data.len() {
        let (f, c) = data.sample(i);
        let (m, lz) = choice_probs(f, nb, d, data.eta, theta, &mut probs);
        total += m + lz - data.eta * dot(&f[c * d..(c + 1) * d], theta);
    }
    Ok(total)
}

/// NLL and its gradient `eta sum_i (E_nu[phi_i] - phi_i(b_i))`.
pub fn nll_and_grad(theta: &[f64], data: &ChoiceData) -> Result<(f64, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let (nb, d, eta) = (data.nb, data.d, data.eta);
    let mut probs = vec![0.0; nb];
    let mut grad = vec![0.0; d];
    let mut total = 0.0;
    for i in 0..data.len() {
        let (f, c) = data.sample(i);
        let (m, lz) = choice_probs(f, nb, d, eta, theta, &mut probs);
        total += m + lz - eta * dot(&f[c * d..(c + 1) * d], theta);
        for b in 0..nb {
            let w = eta * (probs[b] - if b == c { 1.0 } else { 0.0 });
            if w != 0.0 {
                for (g, x) in grad.iter_mut().zip(&f[b * d..(b + 1) * d]) {
                    *g += w * x;
                }
            }
        }
    }
    Ok((total, grad))
}

/// Feature covariance `Cov_{b ~ nu}[phi(b)]` for one `|B| x d` block under
/// `nu = softmax(eta <phi, theta>)`: the single-state `Sigma_s`.
pub fn state_covariance(feats: &[f64], nb: usize, d: usize, eta: f64, theta: &[f64]) -> DMatrix<f64> {
    let mut probs = vec![0.0; nb];
    choice_probs(feats, nb, d, eta, theta, &mut probs);
    covariance_under(feats, nb, d, &probs)
}

/// `Cov_{b ~ probs}[phi(b)]`.
pub fn covariance_under(feats: &[f64], nb: usize, d: usize, probs: &[f64]) -> DMatrix<f64> {
    let mut mean = vec![0.0; d];
    for b in 0..nb {
        for k in 0..d {
            mean[k] += probs[b] * feats[b * d + k];
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for b in 0..nb {
        if probs[b] == 0.0 {
            continue;
        }
        let c: Vec<f64> = (0..d).map(|k| feats[b * d + k] - mean[k]).collect();
        for i in 0..d {
            if c[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                cov[(i, j)] += probs[b] * c[i] * c[j];
            }
        }
    }
    cov
}

/// `sum_i Cov_i` at `theta` (equal to `T Sigma_D^theta`).
pub fn covariance_sum(theta: &[f64], data: &ChoiceData) -> DMatrix<f64> {
    let (nb, d) = (data.nb, data.d);
    let mut acc = DMatrix::zeros(d, d);
    for i in 0..data.len() {
        acc += state_covariance(data.sample(i).0, nb, d, data.eta, theta);
    }
    acc
}

/// `Sigma_D^theta = T^-1 sum_i Cov_i`.
pub fn covariance_data(theta: &[f64], data: &ChoiceData) -> DMatrix<f64> {
    let n = data.len().max(1) as f64;
    covariance_sum(theta, data) / n
}

/// Same average with `b` uniform instead of the quantal response
/// (the comparison-graph Laplacian). Diagnostic only.
pub fn laplacian_data(data: &ChoiceData) -> DMatrix<f64> {
    let (nb, d) = (data.nb, data.d);
    let uniform = vec![1.0 / nb as f64; nb];
    let mut acc = DMatrix::zeros(d, d);
    for i in 0..data.len() {
        acc += covariance_under(data.sample(i).0, nb, d, &uniform);
    }
    acc / data.len().max(1) as f64
}

/// Hessian of the NLL: `eta^2 sum_i Cov_i`.
pub fn nll_hessian(theta: &[f64], data: &ChoiceData) -> DMatrix<f64> {
    covariance_sum(theta, data) * (data.eta * data.eta)
}

/// Symmetric pseudo-inverse; eigenvalues at or below `1e-10 * max` are dropped.
pub fn pinv_sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &x| a.max(x));
    let mut out = DMatrix::zeros(n, n);
    if lmax <= 0.0 {
        return out;
    }
    let thr = 1e-10 * lmax;
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l > thr {
            let v = eig.eigenvectors.column(i);
            out += (v * v.transpose()) / l;
        }
    }
    out
}

/// `tr(M Sigma)` for symmetric `M` without forming the product.
pub fn trace_product(m: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
    m.iter().zip(sigma.iter()).map(|(a, b)| a * b).sum()
}

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    /// `B_Theta`: radius of the parameter ball.
    pub bound: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { bound: 10.0, tol: 1e-8, max_iter: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleFit {
    pub theta: Vec<f64>,
    pub nll: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub on_boundary: bool,
}

impl MleFit {
    /// Turn a flagged non-converged fit into an error.
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence { iterations: self.iterations, grad_norm: self.grad_norm })
        }
    }
}

fn project_ball(theta: &mut [f64], bound: f64) {
    let n = norm(theta);
    if n > bound {
        theta.iter_mut().for_each(|x| *x *= bound / n);
    }
}

/// Minimizer of the quadratic model `g.p + p'Hp/2` over `||theta + p|| <= bound`.
fn ball_newton_target(theta: &[f64], grad: &[f64], hess: &DMatrix<f64>, bound: f64) -> Vec<f64> {
    let d = theta.len();
    let eig = SymmetricEigen::new(hess.clone());
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &x| a.max(x));
    let thr = 1e-10 * lmax.max(1e-300);
    let v = &eig.eigenvectors;
    let th = DVector::from_column_slice(theta);
    let g = DVector::from_column_slice(grad);
    let gc = v.transpose() * &g;
    let tc = v.transpose() * &th;
    // Newton step in the range, null components untouched
    let mut newton = tc.clone();
    for i in 0..d {
        if eig.eigenvalues[i] > thr {
            newton[i] -= gc[i] / eig.eigenvalues[i];
        }
    }
    if newton.norm() <= bound {
        return (v * newton).iter().copied().collect();
    }
    let c: Vec<f64> = (0..d).map(|i| eig.eigenvalues[i] * tc[i] - gc[i]).collect();
    let at = |lam: f64| -> DVector<f64> {
        DVector::from_iterator(
            d,
            (0..d).map(|i| {
                let l = eig.eigenvalues[i].max(0.0) + lam;
                if l > 0.0 {
                    c[i] / l
                } else {
                    0.0
                }
            }),
        )
    };
    let mut hi = 1.0f64;
    while at(hi).norm() > bound && hi < 1e300 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if at(mid).norm() > bound {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (v * at(hi)).iter().copied().collect()
}

/// Damped Newton on the ball `||theta|| <= bound`.
///
/// Null directions of the Hessian (unidentified parameter directions) are
/// left at their starting values, so a zero start returns the minimum-norm
/// minimizer.
pub fn fit_mle_myopic(data: &ChoiceData, opts: FitOptions, warm_start: Option<&[f64]>) -> Result<MleFit> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let d = data.d;
    let mut theta = warm_start.map(|w| w.to_vec()).unwrap_or_else(|| vec![0.0; d]);
    project_ball(&mut theta, opts.bound);
    let (mut f, mut g) = nll_and_grad(&theta, data)?;
    let mut iterations = 0;
    let mut converged = false;
    let mut on_boundary = false;
    while iterations < opts.max_iter {
        let gn = norm(&g);
        if gn <= opts.tol {
            converged = true;
            break;
        }
        let tn = norm(&theta);
        if tn >= opts.bound * (1.0 - 1e-9) {
            let radial = dot(&g, &theta) / tn;
            let tangential = (gn * gn - radial * radial).max(0.0).sqrt();
            if radial <= 0.0 && tangential <= opts.tol * gn.max(1.0) {
                converged = true;
                on_boundary = true;
                break;
            }
        }
        iterations += 1;
        let hess = nll_hessian(&theta, data);
        let target = ball_newton_target(&theta, &g, &hess, opts.bound);
        let p: Vec<f64> = target.iter().zip(&theta).map(|(x, y)| x - y).collect();
        let slope = dot(&g, &p);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&p).map(|(x, y)| x + t * y).collect();
            let fc = nll_myopic(&cand, data)?;
            let noise = 1e-12 * f.abs().max(1.0);
            if fc <= f + 1e-4 * t * slope || (t == 1.0 && fc <= f + noise) {
                accepted = Some(cand);
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some(cand) => {
                let (fc, gc) = nll_and_grad(&cand, data)?;
                let stalled = (f - fc).abs() <= 1e-15 * f.abs().max(1.0) && norm(&p) * t <= 1e-14;
                theta = cand;
                f = fc;
                g = gc;
                if stalled {
                    break;
                }
            }
            None => break,
        }
    }
    let grad_norm = norm(&g);
    if !converged {
        if grad_norm <= opts.tol {
            converged = true;
        } else {
            let tn = norm(&theta);
            if tn >= opts.bound * (1.0 - 1e-9) {
                let radial = dot(&g, &theta) / tn;
                let tangential = (grad_norm * grad_norm - radial * radial).max(0.0).sqrt();
                if radial <= 0.0 && tangential <= opts.tol * grad_norm.max(1.0) {
                    converged = true;
                    on_boundary = true;
                }
            }
        }
    }
    Ok(MleFit { theta, nll: f, grad_norm, iterations, converged, on_boundary })
}

#[derive(Clone, Copy, Debug)]
pub struct SetOptions {
    pub sample_size: usize,
    pub bound: f64,
    /// `C_eta = 1/eta + B_A`.
    pub c_eta: f64,
    pub bisection_steps: usize,
}

impl SetOptions {
    pub fn new(bound: f64, c_eta: f64) -> Self {
        SetOptions { sample_size: 64, bound, c_eta, bisection_steps: 40 }
    }
}

/// Sublevel set `{theta : L(theta) <= min L + beta}` with a finite sample of
/// members for planners that need to optimize over it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfidenceSet {
    pub beta: f64,
    pub min_nll: f64,
    pub center: Vec<f64>,
    pub bound: f64,
    pub theta_sample: Vec<Vec<f64>>,
    pub sample_nll: Vec<f64>,
    /// Surrogate ellipsoid `{theta : ||theta - center||_Psi^2 <= radius_sq}`, `Psi = T Sigma_D + I`.
    #[serde(skip)]
    pub ellipsoid: DMatrix<f64>,
    pub radius_sq: f64,
}

/// Numerical slack on the sublevel test.
const MEMBER_TOL: f64 = 1e-9;

impl ConfidenceSet {
    pub fn contains(&self, data: &ChoiceData, theta: &[f64]) -> Result<bool> {
        if norm(theta) > self.bound * (1.0 + 1e-12) {
            return Ok(false);
        }
        Ok(nll_myopic(theta, data)? <= self.min_nll + self.beta + MEMBER_TOL)
    }
}

fn ball_exit(center: &[f64], dir: &[f64], bound: f64) -> f64 {
    let a = dot(dir, dir);
    let b = dot(center, dir);
    let c = dot(center, center) - bound * bound;
    let disc = (b * b - a * c).max(0.0);
    ((-b + disc.sqrt()) / a).max(0.0)
}

/// Confidence set around `fit`. Sample members are boundary points of the
/// sublevel set along random directions drawn from the surrogate ellipsoid;
/// each one passes the exact sublevel test.
pub fn confidence_set<R: Rng + ?Sized>(
    data: &ChoiceData,
    fit: &MleFit,
    beta: f64,
    opts: SetOptions,
    rng: &mut R,
) -> Result<ConfidenceSet> {
    let d = data.d;
    let min_nll = nll_myopic(&fit.theta, data)?;
    let psi = covariance_sum(&fit.theta, data) + DMatrix::identity(d, d);
    let radius_sq = 8.0 * opts.c_eta * opts.c_eta * beta + 4.0 * opts.bound * opts.bound;
    let mut set = ConfidenceSet {
        beta,
        min_nll,
        center: fit.theta.clone(),
        bound: opts.bound,
        theta_sample: vec![fit.theta.clone()],
        sample_nll: vec![min_nll],
        ellipsoid: psi.clone(),
        radius_sq,
    };
    if beta <= 0.0 || opts.sample_size <= 1 {
        return Ok(set);
    }
    let eig = SymmetricEigen::new(psi);
    let level = min_nll + beta;
    let radius = radius_sq.sqrt();
    for _ in 1..opts.sample_size {
        let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let zn = norm(&z);
        if zn == 0.0 {
            continue;
        }
        // Psi^{-1/2} z / |z| has unit Psi-norm
        let zc = eig.eigenvectors.transpose() * DVector::from_column_slice(&z);
        let scaled = DVector::from_iterator(d, (0..d).map(|i| zc[i] / eig.eigenvalues[i].sqrt() / zn));
        let dir: Vec<f64> = (&eig.eigenvectors * scaled).iter().copied().collect();
        let t_max = radius.min(ball_exit(&fit.theta, &dir, opts.bound));
        let point = |t: f64| -> Vec<f64> { fit.theta.iter().zip(&dir).map(|(c, v)| c + t * v).collect() };
        let mut lo = 0.0;
        let mut hi = t_max;
        let nll_hi = nll_myopic(&point(hi), data)?;
        if nll_hi <= level {
            lo = hi;
        } else {
            for _ in 0..opts.bisection_steps {
                let mid = 0.5 * (lo + hi);
                if nll_myopic(&point(mid), data)? <= level {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
        if lo <= 0.0 {
            continue;
        }
        let theta = point(lo);
        let v = nll_myopic(&theta, data)?;
        if v <= level + MEMBER_TOL && norm(&theta) <= opts.bound * (1.0 + 1e-12) {
            set.theta_sample.push(theta);
            set.sample_nll.push(v);
        }
    }
    Ok(set)
}

/// Myopic NLL at step `h` of a tabulated follower reward `[h][s][a][b]`.
pub fn nll_reward_table(follower_reward: &[f64], dataset: &Dataset, h: usize, eta: f64) -> f64 {
    let d = dataset.dims;
    let (na, nb) = (d.leader_actions, d.follower_actions);
    let mut rbuf = vec![0.0; nb];
    let mut nu = vec![0.0; nb];
    let mut total = 0.0;
    for ep in &dataset.episodes {
        let st = &ep.steps[h];
        let off = h * d.sab() + d.idx(st.state, 0, 0);
        let pres = dataset.policies[ep.policy_id].prescription(h, st.state);
        prescribed_reward(&follower_reward[off..off + d.ab()], pres, na, nb, &mut rbuf);
        let v = soft_max_into(eta, &rbuf, &mut nu);
        total += eta * (v - rbuf[st.follower_action]);
    }
    total
}

/// Offline linear `beta = c d log(H (1 + eta T^2) / delta)`.
pub fn beta_linear(c: f64, d: usize, horizon: usize, eta: f64, t: usize, delta: f64) -> f64 {
    let t = t.max(1) as f64;
    c * d as f64 * (horizon as f64 * (1.0 + eta * t * t) / delta).ln()
}

/// Online linear `beta = c d log(H T (1 + eta T^2) / delta)`.
pub fn beta_linear_online(c: f64, d: usize, horizon: usize, eta: f64, t: usize, delta: f64) -> f64 {
    let t = t.max(1) as f64;
    c * d as f64 * (horizon as f64 * t * (1.0 + eta * t * t) / delta).ln()
}

/// Finite model class, farsighted: `9 log(3 e^2 T H |M| / delta)`.
pub fn beta_farsighted(t: usize, horizon: usize, class_size: usize, delta: f64) -> f64 {
    let e2 = std::f64::consts::E.powi(2);
    9.0 * (3.0 * e2 * t.max(1) as f64 * horizon as f64 * class_size as f64 / delta).ln()
}

/// Finite function classes (myopic): `2 log(e^3 H T N / delta)`; pass `t = 1` offline.
pub fn beta_finite_class(t: usize, horizon: usize, class_size: usize, delta: f64) -> f64 {
    let e3 = std::f64::consts::E.powi(3);
    2.0 * (e3 * horizon as f64 * t.max(1) as f64 * class_size as f64 / delta).ln()
}

/// `(Upsilon f)(s, b) = <pi(.|s,b), f(s,.,b)> - <pi (x) nu, f(s,.,.)>` for a
/// step table `f[s][a][b]`.
pub fn qre_operator(
    f_step: &[f64],
    policy: &LeaderPolicy,
    response: &FollowerSolution,
    h: usize,
    s: usize,
    b: usize,
) -> Result<f64> {
    let d = policy.dims();
    if response.dims() != d || f_step.len() != d.sab() {
        return Err(Error::DimensionMismatch("QRE operator inputs".into()));
    }
    let cond = |bb: usize| -> f64 { (0..d.leader_actions).map(|a| policy.prob(h, s, bb, a) * f_step[d.idx(s, a, bb)]).sum() };
    let mean: f64 = (0..d.follower_actions).map(|bb| response.nu(h, s, bb) * cond(bb)).sum();
    Ok(cond(b) - mean)
}

/// Per-sample generalized log-likelihood term (negated) for a farsighted
/// candidate `model` with its response to the episode's policy. Infinite
/// when the observed transition has zero probability under the model.
pub fn farsighted_step_loss(model: &MarkovGame, response: &FollowerSolution, h: usize, step: &Step) -> f64 {
    let p = model.p(h, step.state, step.leader_action, step.follower_action)[step.next_state];
    if p <= 0.0 {
        return f64::INFINITY;
    }
    let du = step.leader_reward - model.u(h, step.state, step.leader_action, step.follower_action);
    -(model.rationality() * response.adv(h, step.state, step.follower_action) + p.ln() - du * du)
}

/// Generalized negative log-likelihood per step; `+inf` marks a model that
/// assigns zero probability to an observed transition.
pub fn nll_farsighted(model: &MarkovGame, dataset: &Dataset) -> Result<Vec<f64>> {
    let d = model.dims();
    if dataset.dims != d {
        return Err(Error::DimensionMismatch("dataset vs model".into()));
    }
    let mut cache: Vec<Option<FollowerSolution>> = vec![None; dataset.policies.len()];
    let mut out = vec![0.0; d.horizon];
    for ep in &dataset.episodes {
        if cache[ep.policy_id].is_none() {
            cache[ep.policy_id] = Some(quantal_response(model, &dataset.policies[ep.policy_id])?);
        }
        let resp = cache[ep.policy_id].as_ref().unwrap();
        for (h, step) in ep.steps.iter().enumerate() {
            out[h] += farsighted_step_loss(model, resp, h, step);
        }
    }
    Ok(out)
}

/// `D_RL,h^2(M, M*; pi)`: expected squared Hellinger distance of responses
/// and transitions plus squared leader-reward error, under `(pi, M*)`.
pub fn d_rl(model: &MarkovGame, truth: &MarkovGame, policy: &LeaderPolicy) -> Result<Vec<f64>> {
    let d = truth.dims();
    if model.dims() != d {
        return Err(Error::DimensionMismatch("model vs truth".into()));
    }
    let rt = quantal_response(truth, policy)?;
    let rm = quantal_response(model, policy)?;
    let occ = state_distribution(truth, policy, &rt);
    let mut out = vec![0.0; d.horizon];
    for h in 0..d.horizon {
        for s in 0..d.states {
            let m = occ[h * d.states + s];
            if m == 0.0 {
                continue;
            }
            out[h] += m * hellinger_sq(rt.nu_row(h, s), rm.nu_row(h, s));
            for b in 0..d.follower_actions {
                for a in 0..d.leader_actions {
                    let w = m * rt.nu(h, s, b) * policy.prob(h, s, b, a);
                    if w == 0.0 {
                        continue;
                    }
                    let du = truth.u(h, s, a, b) - model.u(h, s, a, b);
                    out[h] += w * (hellinger_sq(truth.p(h, s, a, b), model.p(h, s, a, b)) + du * du);
                }
            }
        }
    }
    Ok(out)
}

/// Null-space report for a data covariance `Sigma_D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankDiagnostic {
    pub dim: usize,
    pub rank: usize,
    pub null_dim: usize,
    /// Null dimension that no data can remove: directions along which the
    /// features are constant within every visited state (reward shifts).
    pub structural_null_dim: usize,
    /// Set when the data leave directions unidentified beyond the structural ones.
    pub deficient: bool,
    pub eigenvalues: Vec<f64>,
}

fn numerical_rank(m: &DMatrix<f64>) -> (usize, Vec<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let lmax = ev.first().copied().unwrap_or(0.0).max(0.0);
    let thr = (1e-10 * lmax).max(1e-14);
    (ev.iter().filter(|&&l| l > thr).count(), ev)
}

pub fn rank_diagnostic(sigma: &DMatrix<f64>, features: &FeatureMap, h: usize, visited_states: &[usize]) -> RankDiagnostic {
    let dims = features.dims();
    let d = features.dim();
    let (rank, eigenvalues) = numerical_rank(sigma);
    let mut gram = DMatrix::zeros(d, d);
    for &s in visited_states {
        let base = features.phi(h, s, 0, 0);
        for a in 0..dims.leader_actions {
            for b in 0..dims.follower_actions {
                let diff = DVector::from_iterator(d, features.phi(h, s, a, b).iter().zip(base).map(|(x, y)| x - y));
                gram += &diff * diff.transpose();
            }
        }
    }
    let (srank, _) = numerical_rank(&gram);
    RankDiagnostic {
        dim: d,
        rank,
        null_dim: d - rank,
        structural_null_dim: d - srank,
        deficient: rank < srank,
        eigenvalues,
    }
}

/// Extreme generalized eigenvalues of `sigma` relative to `laplacian` on the
/// latter's range: how much the covariance norm can shrink or grow against
/// the uniform-weight norm.
pub fn laplacian_ratio(sigma: &DMatrix<f64>, laplacian: &DMatrix<f64>) -> (f64, f64) {
    let n = laplacian.nrows();
    let eig = SymmetricEigen::new((laplacian + laplacian.transpose()) * 0.5);
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &x| a.max(x));
    let mut half = DMatrix::zeros(n, n);
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l > 1e-10 * lmax {
            let v = eig.eigenvectors.column(i);
            half += (v * v.transpose()) / l.sqrt();
        }
    }
    let m = &half * sigma * &half;
    let (_, ev) = numerical_rank(&m);
    let positive: Vec<f64> = ev.into_iter().filter(|&x| x > 1e-12).collect();
    let hi = positive.first().copied().unwrap_or(0.0);
    let lo = positive.last().copied().unwrap_or(0.0);
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{make_random_game, stream_rng, Dims};
    use crate::response::myopic_response;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_data(seed: u64, n: usize, nb: usize, d: usize, eta: f64, theta: &[f64]) -> ChoiceData {
        let mut rng = stream_rng(seed, 0);
        let mut data = ChoiceData::new(nb, d, eta);
        for _ in 0..n {
            let f: Vec<f64> = (0..nb * d).map(|_| rng.random::<f64>() - 0.5).collect();
            let r: Vec<f64> = (0..nb).map(|b| dot(&f[b * d..(b + 1) * d], theta)).collect();
            let p = myopic_response(eta, &r);
            let c = crate::game::sample_index(&mut rng, &p);
            data.push(&f, c);
        }
        data
    }

    #[test]
    fn test_nll_at_zero() {
        let data = random_data(1, 37, 3, 4, 1.0, &[0.0; 4]);
        assert!((nll_myopic(&[0.0; 4], &data).unwrap() - 37.0 * 3f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn test_nll_closed_form() {
        let mut data = ChoiceData::new(2, 1, 1.0);
        data.push(&[1.0, 0.0], 0);
        let v = nll_myopic(&[1.0], &data).unwrap();
        let e = std::f64::consts::E;
        assert!((v - ((1.0 + e).ln() - 1.0)).abs() < 1e-15);
        assert!((v - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn test_empty_data() {
        let data = ChoiceData::new(2, 1, 1.0);
        assert!(matches!(nll_myopic(&[0.0], &data), Err(Error::EmptyData)));
    }

    #[test]
    fn test_gradient_finite_difference() {
        for seed in 0..20 {
            let data = random_data(seed, 50, 3, 3, 1.5, &[0.5, -1.0, 0.3]);
            let theta = [0.2, 0.1, -0.4];
            let (_, g) = nll_and_grad(&theta, &data).unwrap();
            for k in 0..3 {
                let mut p = theta;
                let mut m = theta;
                p[k] += 1e-5;
                m[k] -= 1e-5;
                let fd = (nll_myopic(&p, &data).unwrap() - nll_myopic(&m, &data).unwrap()) / 2e-5;
                assert!((fd - g[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn test_fit_theta_zero() {
        let data = random_data(3, 500, 3, 3, 1.0, &[0.0; 3]);
        let fit = fit_mle_myopic(&data, FitOptions::default(), None).unwrap();
        assert!(fit.converged);
        assert!(fit.grad_norm <= 1e-8);
        assert!(fit.nll <= nll_myopic(&[0.0; 3], &data).unwrap());
    }

    #[test]
    fn test_fit_boundary_kkt() {
        // a single observation is separable: the optimum sits on the ball
        let mut data = ChoiceData::new(2, 2, 1.0);
        data.push(&[1.0, 0.0, 0.0, 1.0], 0);
        let fit = fit_mle_myopic(&data, FitOptions { bound: 2.0, ..FitOptions::default() }, None).unwrap();
        assert!(fit.converged && fit.on_boundary);
        assert!((norm(&fit.theta) - 2.0).abs() < 1e-9);
        assert!((fit.theta[0] - 2f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn test_single_policy_nonidentifiable() {
        let g = make_random_game(Dims::new(2, 2, 2, 1), 0.0, 1.0, None, 5).unwrap();
        let fm = FeatureMap::one_hot(g.dims());
        let pol = LeaderPolicy::constant(g.dims(), &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let resp = quantal_response(&g, &pol).unwrap();
        let mut ds = Dataset::new(g.dims());
        let id = ds.add_policy(pol.clone());
        let mut rng = stream_rng(2, 0);
        for _ in 0..300 {
            ds.push(crate::game::sample_trajectory(&g, &pol, &resp, id, &mut rng).unwrap());
        }
        let data = ChoiceData::from_dataset(&ds, &fm, 0, 1.0);
        let fit = fit_mle_myopic(&data, FitOptions::default(), None).unwrap();
        let sigma = covariance_data(&fit.theta, &data);
        let diag = rank_diagnostic(&sigma, &fm, 0, &[0, 1]);
        assert!(diag.deficient);
        // move along a null vector: (s=0, a=0, b=1) is never prescribed
        let mut other = fit.theta.clone();
        other[fm.dims().idx(0, 0, 1)] += 0.7;
        assert_ne!(other, fit.theta);
        assert!((nll_myopic(&other, &data).unwrap() - fit.nll).abs() < 1e-9);
    }

    #[test]
    fn test_bernoulli_covariance() {
        let mut data = ChoiceData::new(2, 2, 1.0);
        data.push(&[1.0, 0.0, 0.0, 0.0], 0);
        // theta = 0 gives nu = (1/2, 1/2)
        let sigma = covariance_data(&[0.0, 0.0], &data);
        assert!((sigma[(0, 0)] - 0.25).abs() < 1e-15);
        assert_eq!(sigma[(1, 1)], 0.0);
        assert_eq!(sigma[(0, 1)], 0.0);
    }

    #[test]
    fn test_point_mass_covariance() {
        let c = covariance_under(&[1.0, 2.0, 3.0, 4.0], 2, 2, &[1.0, 0.0]);
        assert_eq!(c, DMatrix::zeros(2, 2));
    }

    #[test]
    fn test_confidence_set_membership() {
        let data = random_data(4, 200, 3, 2, 1.0, &[1.0, -0.5]);
        let fit = fit_mle_myopic(&data, FitOptions::default(), None).unwrap();
        let mut rng = stream_rng(0, 0);
        let set = confidence_set(&data, &fit, 2.0, SetOptions::new(10.0, 3.0), &mut rng).unwrap();
        assert!(set.contains(&data, &fit.theta).unwrap());
        assert!(set.theta_sample.len() > 10);
        for th in &set.theta_sample {
            assert!(set.contains(&data, th).unwrap());
        }
        // walk out along a direction until the gap is beta + 0.1
        let dir = [1.0, 0.0];
        let gap = |t: f64| nll_myopic(&[fit.theta[0] + t * dir[0], fit.theta[1]], &data).unwrap() - set.min_nll;
        let (mut lo, mut hi) = (0.0, 1.0);
        while gap(hi) < 2.1 {
            hi *= 2.0;
        }
        for _ in 0..100 {
            let m = 0.5 * (lo + hi);
            if gap(m) < 2.1 { lo = m } else { hi = m }
        }
        assert!(!set.contains(&data, &[fit.theta[0] + hi, fit.theta[1]]).unwrap());
        let zero = confidence_set(&data, &fit, 0.0, SetOptions::new(10.0, 3.0), &mut rng).unwrap();
        assert_eq!(zero.theta_sample, vec![fit.theta.clone()]);
    }

    #[test]
    fn test_covariance_matches_qre_operator() {
        let g = make_random_game(Dims::new(2, 2, 3, 1), 0.0, 1.3, None, 8).unwrap();
        let fm = FeatureMap::one_hot(g.dims());
        let pol = LeaderPolicy::new(g.dims(), vec![0.3, 0.7, 1.0, 0.0, 0.5, 0.5, 0.2, 0.8, 0.9, 0.1, 0.0, 1.0]).unwrap();
        let resp = quantal_response(&g, &pol).unwrap();
        let theta = g.follower_reward().to_vec();
        for s in 0..2 {
            let feats = policy_features(&fm, pol.prescription(0, s), 0, s);
            let sigma = state_covariance(&feats, 3, fm.dim(), 1.3, &theta);
            let d = fm.dim();
            let mut direct = DMatrix::zeros(d, d);
            for b in 0..3 {
                let col = DVector::from_iterator(
                    d,
                    (0..d).map(|k| {
                        let mut e = vec![0.0; d];
                        e[k] = 1.0;
                        qre_operator(&e, &pol, &resp, 0, s, b).unwrap()
                    }),
                );
                direct += (&col * col.transpose()) * resp.nu(0, s, b);
            }
            assert!((sigma - direct).abs().max() < 1e-10);
        }
    }

    #[test]
    fn test_qre_operator_identities() {
        let g = make_random_game(Dims::new(2, 2, 3, 2), 0.0, 1.0, None, 10).unwrap();
        let pol = LeaderPolicy::uniform(g.dims());
        let resp = quantal_response(&g, &pol).unwrap();
        let f: Vec<f64> = (0..g.dims().sab()).map(|i| (i as f64 * 0.37).sin()).collect();
        for s in 0..2 {
            let mean: f64 = (0..3).map(|b| resp.nu(1, s, b) * qre_operator(&f, &pol, &resp, 1, s, b).unwrap()).sum();
            assert!(mean.abs() < 1e-14);
            for b in 0..3 {
                assert!(qre_operator(&vec![0.4; 12], &pol, &resp, 1, s, b).unwrap().abs() < 1e-15);
            }
        }
    }

    #[test]
    fn test_qre_square_equals_sigma_norm() {
        let g = make_random_game(Dims::new(2, 2, 2, 1), 0.0, 1.0, None, 11).unwrap();
        let fm = FeatureMap::one_hot(g.dims());
        let pol = LeaderPolicy::uniform(g.dims());
        let resp = quantal_response(&g, &pol).unwrap();
        let theta_star = g.follower_reward().to_vec();
        let theta_tilde: Vec<f64> = theta_star.iter().enumerate().map(|(i, x)| x + 0.1 * (i as f64).cos()).collect();
        let diff: Vec<f64> = theta_tilde.iter().zip(&theta_star).map(|(a, b)| a - b).collect();
        for s in 0..2 {
            let lhs: f64 = (0..2).map(|b| resp.nu(0, s, b) * qre_operator(&diff, &pol, &resp, 0, s, b).unwrap().powi(2)).sum();
            let sigma = state_covariance(&policy_features(&fm, pol.prescription(0, s), 0, s), 2, fm.dim(), 1.0, &theta_star);
            let v = DVector::from_column_slice(&diff);
            let rhs = (v.transpose() * sigma * &v)[(0, 0)];
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn test_farsighted_identity_and_sentinel() {
        // deterministic transitions, single follower action
        let d = Dims::new(2, 1, 1, 2);
        let g = MarkovGame::new(d, vec![1.0, 0.0], vec![0.5; 4], vec![0.5; 4], vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0], 1.0, 1.0).unwrap();
        let pol = LeaderPolicy::uniform(d);
        assert!(d_rl(&g, &g, &pol).unwrap().iter().all(|&x| x == 0.0));
        let resp = quantal_response(&g, &pol).unwrap();
        let mut ds = Dataset::new(d);
        let id = ds.add_policy(pol.clone());
        ds.push(crate::game::sample_trajectory(&g, &pol, &resp, id, &mut stream_rng(0, 0)).unwrap());
        let bad = MarkovGame::new(d, vec![1.0, 0.0], vec![0.5; 4], vec![0.5; 4], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0], 1.0, 1.0).unwrap();
        assert!(nll_farsighted(&bad, &ds).unwrap()[0].is_infinite());
        assert!(nll_farsighted(&g, &ds).unwrap()[0].is_finite());
    }

    #[test]
    fn test_pinv() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let p = pinv_sym(&m);
        assert_eq!(p[(0, 0)], 0.5);
        assert_eq!(p[(1, 1)], 0.0);
    }

    #[test]
    fn test_beta_formulas() {
        assert!((beta_linear(1.0, 3, 2, 1.0, 10, 0.1) - 3.0 * (2.0 * 101.0 / 0.1f64).ln()).abs() < 1e-12);
        let e2 = std::f64::consts::E.powi(2);
        assert!((beta_farsighted(500, 3, 10, 0.1) - 9.0 * (3.0 * e2 * 15000.0 / 0.1).ln()).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn prop_nll_convex(seed in 0u64..1000, lam in 0.01f64..0.99) {
            let data = random_data(seed, 30, 3, 3, 2.0, &[1.0, 0.0, -1.0]);
            let mut rng = stream_rng(seed, 9);
            let t1: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let t2: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let mix: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
            let lhs = nll_myopic(&mix, &data).unwrap();
            let rhs = lam * nll_myopic(&t1, &data).unwrap() + (1.0 - lam) * nll_myopic(&t2, &data).unwrap();
            prop_assert!(lhs <= rhs + 1e-9);
        }

        #[test]
        fn prop_covariance_psd(seed in 0u64..1000) {
            let data = random_data(seed, 20, 3, 4, 1.0, &[0.3, 0.1, 0.0, -0.2]);
            let sigma = covariance_data(&[0.5, -0.5, 0.2, 0.0], &data);
            prop_assert!((&sigma - sigma.transpose()).abs().max() <= 1e-10);
            let eig = SymmetricEigen::new(sigma);
            prop_assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-9));
        }
    }
}
