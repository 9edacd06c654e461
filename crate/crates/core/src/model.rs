//! Joint model for a longitudinal response and a log event time linked by
//! shared skewed random effects and a structural covariance.
//!
//! For subject `i` with visits `t_{i1..in}`:
//!
//! ```text
//! Y_i | b_i, u_i        ~ N(X_i β + Z_i b_i, σ²_e I / u_i)
//! log T_i | Y_i, b_i, u_i  has the skew-corrected conditional density
//! b_i | u_i             ~ skew-normal random effects centred at c Δ
//! u_i                   ~ mixing law
//! ```
//!
//! where `Z_i` has rows `(1, t_ij)`, `ψ_i = σ²_e I + Z_i D Z_iᵀ` and the event
//! block couples to `Y_i` through `σ = σ²_cov 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, dot, sym_inv_sqrt, sym_sqrt, SymMatrix};
use crate::quad::{integrate, QuadOptions};
use crate::sni::MixingSpec;
use crate::special::{bvn_cdf, inv_mills, log_half_normal, log_norm_cdf, log_norm_sf, log_normal, LN_SQRT_2PI};

/// Random-effects dimension (intercept and slope).
pub const Q: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectData {
    pub id: String,
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    /// Fixed-effects design, row-major `n × p`.
    pub x: Vec<f64>,
    pub p: usize,
    pub z1: Vec<[f64; Q]>,
    pub log_event_time: f64,
    pub event_observed: bool,
}

impl SubjectData {
    /// Builds a subject with the usual random intercept and slope design
    /// `Z1 = (1, t)`.
    pub fn new(
        id: impl Into<String>,
        times: Vec<f64>,
        y: Vec<f64>,
        x_rows: Vec<Vec<f64>>,
        log_event_time: f64,
        event_observed: bool,
    ) -> Result<Self> {
        let p = x_rows.first().map(|r| r.len()).unwrap_or(0);
        if x_rows.iter().any(|r| r.len() != p) {
            return Err(Error::Dimension("design rows have unequal lengths".into()));
        }
        let z1 = times.iter().map(|&t| [1.0, t]).collect();
        let s = Self {
            id: id.into(),
            times,
            y,
            x: x_rows.into_iter().flatten().collect(),
            p,
            z1,
            log_event_time,
            event_observed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if n == 0 {
            return Err(Error::DegenerateData(format!("subject {} has no visits", self.id)));
        }
        if self.times.len() != n || self.z1.len() != n || self.x.len() != n * self.p {
            return Err(Error::Dimension(format!(
                "subject {}: {} responses, {} times, {} random-effects rows, {} design entries for {} columns",
                self.id,
                n,
                self.times.len(),
                self.z1.len(),
                self.x.len(),
                self.p
            )));
        }
        if !self.log_event_time.is_finite() {
            return Err(Error::Domain(format!("subject {}: log event time is not finite", self.id)));
        }
        if self.y.iter().chain(&self.x).any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("subject {}: non-finite data", self.id)));
        }
        Ok(())
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.y.len()
    }

    #[inline]
    pub fn x_row(&self, j: usize) -> &[f64] {
        &self.x[j * self.p..(j + 1) * self.p]
    }

    /// `y - X β`
    pub fn marginal_residual(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n()).map(|j| self.y[j] - dot(self.x_row(j), beta)).collect()
    }
}

/// A collection of subjects sharing one fixed-effects layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub fixed_names: Vec<String>,
    pub subjects: Vec<SubjectData>,
}

impl Dataset {
    pub fn new(fixed_names: Vec<String>, subjects: Vec<SubjectData>) -> Result<Self> {
        let d = Self {
            fixed_names,
            subjects,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::DegenerateData("dataset has no subjects".into()));
        }
        for s in &self.subjects {
            s.validate()?;
            if s.p != self.fixed_names.len() {
                return Err(Error::Dimension(format!(
                    "subject {} has {} fixed effects, dataset names {}",
                    s.id,
                    s.p,
                    self.fixed_names.len()
                )));
            }
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.fixed_names.len()
    }

    pub fn n_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.n()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomEffectsMode {
    /// `b | u ~ N(cΔ, D/u)`, no skewness in the random effects themselves.
    Literal,
    /// `b | u, t ~ N(cΔ + Δt, (D - ΔΔᵀ)/u)` with `t | u` half-normal, which
    /// integrates to a skew-normal law for `b`.
    #[default]
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointParams {
    pub beta: Vec<f64>,
    pub beta0: f64,
    pub sigma2_e: f64,
    pub sigma2_t: f64,
    pub sigma2_cov: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub lambda: [f64; Q],
    pub nu_event: [f64; Q],
    pub mixing: MixingSpec,
}

impl JointParams {
    pub fn d_matrix(&self) -> SymMatrix {
        SymMatrix::from_lower_fn(Q, |i, j| if i == j { self.omega1 } else { self.omega2 })
    }

    /// Checks every invariant that does not depend on data.
    pub fn validate(&self) -> Result<()> {
        let finite = self.beta.iter().all(|b| b.is_finite())
            && [
                self.beta0,
                self.sigma2_cov,
                self.lambda[0],
                self.lambda[1],
                self.nu_event[0],
                self.nu_event[1],
            ]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParams("non-finite parameter".into()));
        }
        if !(self.sigma2_e > 0.0 && self.sigma2_t > 0.0) || !self.sigma2_e.is_finite() || !self.sigma2_t.is_finite() {
            return Err(Error::InvalidParams(format!(
                "variances must be positive (sigma2_e = {}, sigma2_T = {})",
                self.sigma2_e, self.sigma2_t
            )));
        }
        if !(self.omega1 > self.omega2.abs()) || !self.omega1.is_finite() {
            return Err(Error::InvalidParams(format!(
                "random-effects covariance is not positive definite (omega1 = {}, omega2 = {})",
                self.omega1, self.omega2
            )));
        }
        self.mixing.validate()
    }

    /// `κ = λ/√(1 + λᵀλ)`
    pub fn kappa(&self) -> [f64; Q] {
        let norm = (1.0 + self.lambda[0].powi(2) + self.lambda[1].powi(2)).sqrt();
        [self.lambda[0] / norm, self.lambda[1] / norm]
    }

    /// `Δ = D^{1/2} κ`
    pub fn delta(&self) -> Result<[f64; Q]> {
        let k = self.kappa();
        if k == [0.0, 0.0] {
            return Ok([0.0; Q]);
        }
        let v = sym_sqrt(&self.d_matrix())?.mul_vec(&k);
        Ok([v[0], v[1]])
    }

    /// Inverse of [`JointParams::delta`]: the skewness `λ` giving `Δ` under
    /// the covariance `(Ω₁, Ω₂)`. Fails when `κᵀκ ≥ 1`.
    pub fn lambda_from_delta(omega1: f64, omega2: f64, delta: [f64; Q]) -> Result<[f64; Q]> {
        if delta == [0.0, 0.0] {
            return Ok([0.0; Q]);
        }
        let d = SymMatrix::from_lower_fn(Q, |i, j| if i == j { omega1 } else { omega2 });
        let k = sym_inv_sqrt(&d)?.mul_vec(&delta);
        let kk = k[0] * k[0] + k[1] * k[1];
        if !(kk < 1.0) {
            return Err(Error::InvalidParams(format!(
                "skewness shift is too large for the covariance (|κ|² = {kk})"
            )));
        }
        let s = (1.0 - kk).sqrt();
        Ok([k[0] / s, k[1] / s])
    }

    /// Centring constant `c = -√(2/π) E(U^{-1/2})`.
    pub fn centring(&self) -> Result<f64> {
        Ok(-(2.0 / std::f64::consts::PI).sqrt() * self.mixing.expected_inv_sqrt_u()?)
    }
}

/// Per-subject latent variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub b: Vec<[f64; Q]>,
    pub u: Vec<f64>,
    pub t_aug: Vec<f64>,
}

impl LatentState {
    pub fn neutral(m: usize) -> Self {
        Self {
            b: vec![[0.0; Q]; m],
            u: vec![1.0; m],
            // half-normal mean at unit scale
            t_aug: vec![(2.0 / std::f64::consts::PI).sqrt(); m],
        }
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }
}

/// `ψ = σ²_e I + Z D Zᵀ`
pub fn psi_from_design(z1: &[[f64; Q]], theta: &JointParams) -> SymMatrix {
    let (o1, o2) = (theta.omega1, theta.omega2);
    SymMatrix::from_lower_fn(z1.len(), |i, j| {
        let (a, b) = (z1[i], z1[j]);
        let zdz = o1 * (a[0] * b[0] + a[1] * b[1]) + o2 * (a[0] * b[1] + a[1] * b[0]);
        if i == j {
            theta.sigma2_e + zdz
        } else {
            zdz
        }
    })
}

pub fn psi_matrix(s: &SubjectData, theta: &JointParams) -> Result<SymMatrix> {
    if !(theta.omega1 > theta.omega2.abs()) {
        return Err(Error::InvalidParams(format!(
            "random-effects covariance is not positive definite (omega1 = {}, omega2 = {})",
            theta.omega1, theta.omega2
        )));
    }
    if !(theta.sigma2_e > 0.0) {
        return Err(Error::InvalidParams("sigma2_e must be positive".into()));
    }
    Ok(psi_from_design(&s.z1, theta))
}

/// Induced skewness of the marginal longitudinal vector,
/// `ψ^{-1/2} Z D ζ / √(1 + ζᵀΛζ)` with `ζ = D^{-1/2}λ` and
/// `Λ = (D^{-1} + ZᵀZ/σ²_e)^{-1}`.
pub fn lambda_bar(s: &SubjectData, theta: &JointParams) -> Result<Vec<f64>> {
    let psi = psi_matrix(s, theta)?;
    lambda_bar_with_psi(&s.z1, &psi, theta)
}

fn lambda_bar_with_psi(z1: &[[f64; Q]], psi: &SymMatrix, theta: &JointParams) -> Result<Vec<f64>> {
    let n = z1.len();
    if theta.lambda == [0.0, 0.0] {
        return Ok(vec![0.0; n]);
    }
    let d = theta.d_matrix();
    let zeta = sym_inv_sqrt(&d)?.mul_vec(&theta.lambda);
    let dz = d.mul_vec(&zeta);
    let zdz: Vec<f64> = z1.iter().map(|r| r[0] * dz[0] + r[1] * dz[1]).collect();
    let num = sym_inv_sqrt(psi)?.mul_vec(&zdz);
    // Λ^{-1} = D^{-1} + ZᵀZ/σ²_e
    let d_inv = cholesky(&d)?.inverse();
    let mut ztz = [0.0; 3];
    for r in z1 {
        ztz[0] += r[0] * r[0];
        ztz[1] += r[0] * r[1];
        ztz[2] += r[1] * r[1];
    }
    let lam_inv = SymMatrix::from_lower_fn(Q, |i, j| {
        let k = if i == j { 2 * i } else { 1 };
        d_inv.get(i, j) + ztz[k] / theta.sigma2_e
    });
    let lam = cholesky(&lam_inv)?.inverse();
    let scale = (1.0 + lam.quad_form(&zeta)).sqrt();
    Ok(num.into_iter().map(|v| v / scale).collect())
}

/// Everything about a subject's event block that depends only on its visit
/// design and the covariance parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceTerms {
    /// `ψ^{-1} 1`
    pub w: Vec<f64>,
    /// Conditional event variance `σ²_T - σ⁴_cov 1ᵀψ^{-1}1`.
    pub s221: f64,
    pub v1: Vec<f64>,
    pub v2: f64,
    pub v_tilde: Vec<f64>,
    pub lambda_bar: Vec<f64>,
}

impl CovarianceTerms {
    pub fn new(z1: &[[f64; Q]], theta: &JointParams) -> Result<Self> {
        let n = z1.len();
        let psi = psi_from_design(z1, theta);
        let chol = cholesky(&psi)?;
        let w = chol.solve(&vec![1.0; n]);
        let s221 = theta.sigma2_t - theta.sigma2_cov * theta.sigma2_cov * w.iter().sum::<f64>();
        if !(s221 > 0.0) {
            return Err(Error::InadmissibleParams(s221));
        }
        let lambda_bar = lambda_bar_with_psi(z1, &psi, theta)?;
        let (v1, v2) = if lambda_bar.iter().all(|&l| l == 0.0) {
            (vec![0.0; n], 0.0)
        } else {
            // joint scale of (Y, log T) with skewness (λ̄, 0)
            let joint = SymMatrix::from_lower_fn(n + 1, |i, j| {
                if i < n {
                    psi.get(i, j)
                } else if j < n {
                    theta.sigma2_cov
                } else {
                    theta.sigma2_t
                }
            });
            let mut lj = lambda_bar.clone();
            lj.push(0.0);
            let mut v = sym_inv_sqrt(&joint)?.mul_vec(&lj);
            let v2 = v.pop().unwrap();
            (v, v2)
        };
        let denom = (1.0 + v2 * v2 * s221).sqrt();
        let v_tilde = v1
            .iter()
            .zip(&w)
            .map(|(a, wi)| (a + theta.sigma2_cov * wi * v2) / denom)
            .collect();
        Ok(Self {
            w,
            s221,
            v1,
            v2,
            v_tilde,
            lambda_bar,
        })
    }
}

/// Conditional moments of `log T` given `Y`, `b` (and `u = 1`).
pub fn cond_event_moments(s: &SubjectData, theta: &JointParams, b: [f64; Q]) -> Result<(f64, f64)> {
    theta.validate()?;
    let psi = psi_matrix(s, theta)?;
    let chol = cholesky(&psi)?;
    let w = chol.solve(&vec![1.0; s.n()]);
    let s221 = theta.sigma2_t - theta.sigma2_cov * theta.sigma2_cov * w.iter().sum::<f64>();
    if !(s221 > 0.0) {
        return Err(Error::InadmissibleParams(s221));
    }
    let r = s.marginal_residual(&theta.beta);
    let mu21 = theta.beta0 + dot(&theta.nu_event, &b) + theta.sigma2_cov * dot(&w, &r);
    Ok((mu21, s221))
}

pub fn loglik_longitudinal(s: &SubjectData, theta: &JointParams, b: [f64; Q], u: f64) -> Result<f64> {
    if !(u > 0.0) {
        return Err(Error::Domain(format!("mixing variable must be positive, got {u}")));
    }
    if !(theta.sigma2_e > 0.0) {
        return Err(Error::InvalidParams("sigma2_e must be positive".into()));
    }
    let r = s.marginal_residual(&theta.beta);
    Ok(longitudinal_from_residual(&r, &s.z1, theta.sigma2_e, b, u))
}

/// Gaussian log-density of `r - Z b` with variance `σ²_e/u`.
#[inline]
pub(crate) fn longitudinal_from_residual(r: &[f64], z1: &[[f64; Q]], sigma2_e: f64, b: [f64; Q], u: f64) -> f64 {
    let mut ss = 0.0;
    for (ri, z) in r.iter().zip(z1) {
        let e = ri - z[0] * b[0] - z[1] * b[1];
        ss += e * e;
    }
    let n = r.len() as f64;
    -n * LN_SQRT_2PI - 0.5 * n * (sigma2_e / u).ln() - 0.5 * u * ss / sigma2_e
}

/// Below this probability the tail integral switches to quadrature.
const BVN_FLOOR: f64 = 1e-5;

/// `log ∫_{z_low}^∞ φ(z) Φ(a + b z) dz`
pub fn log_skew_tail(z_low: f64, a: f64, b: f64) -> Result<f64> {
    if b == 0.0 {
        return Ok(log_norm_sf(z_low) + log_norm_cdf(a));
    }
    // P(Z > z_low, W < a + bZ) as a bivariate normal probability while it
    // is large enough for the absolute accuracy of the closed form
    let s = (1.0 + b * b).sqrt();
    let p = bvn_cdf(-z_low, a / s, b / s);
    if p > BVN_FLOOR {
        return Ok(p.ln());
    }
    log_skew_tail_quad(z_low, a, b)
}

/// Quadrature form of [`log_skew_tail`] around the log-concave integrand's
/// mode, on a log scale that survives deep tails.
pub(crate) fn log_skew_tail_quad(z_low: f64, a: f64, b: f64) -> Result<f64> {
    let g = |z: f64| -0.5 * z * z - LN_SQRT_2PI + log_norm_cdf(a + b * z);
    let lo = z_low.max(-40.0);
    let hi = z_low.max(0.0) + 40.0;
    // the integrand is log-concave; a few damped Newton steps find its mode
    let mut z = 0.0_f64;
    for _ in 0..30 {
        let arg = a + b * z;
        let m = inv_mills(arg);
        let grad = -z + b * m;
        let hess = -1.0 - b * b * m * (arg + m);
        let step = -grad / hess;
        z += step.clamp(-5.0, 5.0);
        if step.abs() < 1e-10 {
            break;
        }
    }
    let mode = z.clamp(lo, hi);
    let reference = g(mode);
    let width = 1.0 / (1.0 + b * b).sqrt();
    let mut cuts = vec![lo];
    for c in [mode - 3.0 * width, mode, mode + 3.0 * width] {
        if c > *cuts.last().unwrap() && c < hi {
            cuts.push(c);
        }
    }
    cuts.push(hi);
    let opts = QuadOptions {
        rel_tol: 1e-9,
        ..Default::default()
    };
    let mut total = 0.0;
    for seg in cuts.windows(2) {
        total += integrate(|z| (g(z) - reference).exp(), seg[0], seg[1], opts)?;
    }
    if !(total > 0.0) {
        return Err(Error::NumericalUnderflow(format!(
            "event tail integral vanished below {z_low}"
        )));
    }
    Ok(reference + total.ln())
}

/// Event contribution from precomputed covariance terms and the marginal
/// residual `r = y - Xβ`.
pub(crate) fn event_from_terms(
    terms: &CovarianceTerms,
    theta: &JointParams,
    r: &[f64],
    b: [f64; Q],
    u: f64,
    log_time: f64,
    observed: bool,
) -> Result<f64> {
    let location = theta.beta0 + theta.nu_event[0] * b[0] + theta.nu_event[1] * b[1];
    let structural = theta.sigma2_cov * dot(&terms.w, r);
    let mu21 = location + structural;
    let var = terms.s221 / u;
    let su = u.sqrt();
    let (lin, den) = if terms.v2 == 0.0 && terms.v1.iter().all(|&v| v == 0.0) {
        (0.0, 0.0)
    } else {
        (dot(&terms.v1, r), dot(&terms.v_tilde, r))
    };
    let log_den = log_norm_cdf(su * den);
    let value = if observed {
        log_normal(log_time, mu21, var)
            + log_norm_cdf(su * (lin + terms.v2 * (log_time - location)))
            - log_den
    } else {
        let sd = var.sqrt();
        let z_low = (log_time - mu21) / sd;
        let a = su * (lin + terms.v2 * structural);
        let slope = su * terms.v2 * sd;
        log_skew_tail(z_low, a, slope)? - log_den
    };
    if value.is_nan() {
        return Err(Error::NumericalUnderflow("event contribution is not a number".into()));
    }
    Ok(value)
}

pub fn loglik_event(s: &SubjectData, theta: &JointParams, b: [f64; Q], u: f64) -> Result<f64> {
    if !(u > 0.0) {
        return Err(Error::Domain(format!("mixing variable must be positive, got {u}")));
    }
    theta.validate()?;
    let terms = CovarianceTerms::new(&s.z1, theta)?;
    let r = s.marginal_residual(&theta.beta);
    event_from_terms(&terms, theta, &r, b, u, s.log_event_time, s.event_observed)
}

/// Random-effects law with its covariance factorised once.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffectsLaw {
    pub mode: RandomEffectsMode,
    pub centre: [f64; Q],
    pub delta: [f64; Q],
    inv: [f64; 3],
    logdet: f64,
}

impl RandomEffectsLaw {
    pub fn new(theta: &JointParams, mode: RandomEffectsMode) -> Result<Self> {
        let delta = theta.delta()?;
        let c = theta.centring()?;
        let (a, b, d) = match mode {
            RandomEffectsMode::Literal => (theta.omega1, theta.omega2, theta.omega1),
            RandomEffectsMode::Augmented => (
                theta.omega1 - delta[0] * delta[0],
                theta.omega2 - delta[0] * delta[1],
                theta.omega1 - delta[1] * delta[1],
            ),
        };
        let det = a * d - b * b;
        if !(a > 0.0 && det > 1e-12 * a * d) {
            return Err(Error::InvalidParams(format!(
                "random-effects covariance is not positive definite (det {det:e})"
            )));
        }
        Ok(Self {
            mode,
            centre: [c * delta[0], c * delta[1]],
            delta,
            inv: [d / det, -b / det, a / det],
            logdet: det.ln(),
        })
    }

    /// `log f(b | u, t)`, including the half-normal density of `t` in
    /// augmented mode.
    #[inline]
    pub fn logpdf(&self, b: [f64; Q], u: f64, t_aug: f64) -> f64 {
        let (m0, m1, extra) = match self.mode {
            RandomEffectsMode::Literal => (self.centre[0], self.centre[1], 0.0),
            RandomEffectsMode::Augmented => (
                self.centre[0] + self.delta[0] * t_aug,
                self.centre[1] + self.delta[1] * t_aug,
                log_half_normal(t_aug, 1.0 / u.sqrt()),
            ),
        };
        let (e0, e1) = (b[0] - m0, b[1] - m1);
        let q = self.inv[0] * e0 * e0 + 2.0 * self.inv[1] * e0 * e1 + self.inv[2] * e1 * e1;
        -2.0 * LN_SQRT_2PI - 0.5 * self.logdet + u.ln() - 0.5 * u * q + extra
    }

    /// `log f(b | u)` with the augmentation variable integrated out: the
    /// skew-normal density in augmented mode, [`Self::logpdf`] otherwise.
    pub fn marginal_logpdf(&self, b: [f64; Q], u: f64) -> f64 {
        if self.mode == RandomEffectsMode::Literal {
            return self.logpdf(b, u, 0.0);
        }
        let (e0, e1) = (b[0] - self.centre[0], b[1] - self.centre[1]);
        let (d0, d1) = (self.delta[0], self.delta[1]);
        let si = |x0: f64, x1: f64| [self.inv[0] * x0 + self.inv[1] * x1, self.inv[1] * x0 + self.inv[2] * x1];
        let se = si(e0, e1);
        let sd = si(d0, d1);
        let k = d0 * sd[0] + d1 * sd[1];
        let a = d0 * se[0] + d1 * se[1];
        // D⁻¹ = S⁻¹ - S⁻¹ΔΔᵀS⁻¹/(1 + k) with S = D - ΔΔᵀ
        let q = e0 * se[0] + e1 * se[1] - a * a / (1.0 + k);
        let logdet = self.logdet + k.ln_1p();
        std::f64::consts::LN_2 - 2.0 * LN_SQRT_2PI - 0.5 * logdet + u.ln() - 0.5 * u * q
            + log_norm_cdf(u.sqrt() * a / (1.0 + k).sqrt())
    }

    /// Mean and sd of the untruncated normal kernel of `t | b, u` in
    /// augmented mode; the full conditional is this law restricted to `t >= 0`.
    pub fn t_conditional(&self, b: [f64; Q], u: f64) -> (f64, f64) {
        let (e0, e1) = (b[0] - self.centre[0], b[1] - self.centre[1]);
        let (d0, d1) = (self.delta[0], self.delta[1]);
        let ie = [self.inv[0] * e0 + self.inv[1] * e1, self.inv[1] * e0 + self.inv[2] * e1];
        let dd = d0 * (self.inv[0] * d0 + self.inv[1] * d1) + d1 * (self.inv[1] * d0 + self.inv[2] * d1);
        let prec = 1.0 + dd;
        ((d0 * ie[0] + d1 * ie[1]) / prec, 1.0 / (u * prec).sqrt())
    }
}

pub fn loglik_random_effects(
    b: [f64; Q],
    theta: &JointParams,
    u: f64,
    mode: RandomEffectsMode,
    t_aug: f64,
) -> Result<f64> {
    if !(u > 0.0) {
        return Err(Error::Domain(format!("mixing variable must be positive, got {u}")));
    }
    if mode == RandomEffectsMode::Augmented && !(t_aug >= 0.0) {
        return Err(Error::Domain(format!("augmentation variable must be nonnegative, got {t_aug}")));
    }
    theta.validate()?;
    Ok(RandomEffectsLaw::new(theta, mode)?.logpdf(b, u, t_aug))
}

/// Groups subjects sharing an identical random-effects design so that
/// covariance terms are computed once per group.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignGroups {
    pub group_of: Vec<usize>,
    pub representative: Vec<usize>,
}

impl DesignGroups {
    pub fn new(subjects: &[SubjectData]) -> Self {
        let mut keys: Vec<Vec<u64>> = Vec::new();
        let mut representative = Vec::new();
        let mut group_of = Vec::with_capacity(subjects.len());
        for (i, s) in subjects.iter().enumerate() {
            let key: Vec<u64> = s.z1.iter().flat_map(|r| [r[0].to_bits(), r[1].to_bits()]).collect();
            match keys.iter().position(|k| *k == key) {
                Some(g) => group_of.push(g),
                None => {
                    group_of.push(keys.len());
                    keys.push(key);
                    representative.push(i);
                }
            }
        }
        Self {
            group_of,
            representative,
        }
    }

    pub fn terms(&self, subjects: &[SubjectData], theta: &JointParams) -> Result<Vec<CovarianceTerms>> {
        self.representative
            .iter()
            .map(|&i| CovarianceTerms::new(&subjects[i].z1, theta))
            .collect()
    }
}

pub fn complete_data_loglik(
    data: &[SubjectData],
    theta: &JointParams,
    latent: &LatentState,
    mode: RandomEffectsMode,
) -> Result<f64> {
    if latent.len() != data.len() || latent.u.len() != data.len() || latent.t_aug.len() != data.len() {
        return Err(Error::Dimension(format!(
            "latent state sized {} for {} subjects",
            latent.len(),
            data.len()
        )));
    }
    theta.validate()?;
    let groups = DesignGroups::new(data);
    let terms = groups.terms(data, theta)?;
    let re = RandomEffectsLaw::new(theta, mode)?;
    let mut total = 0.0;
    for (i, s) in data.iter().enumerate() {
        let (b, u, t) = (latent.b[i], latent.u[i], latent.t_aug[i]);
        if !(u > 0.0) {
            return Err(Error::Domain(format!("mixing variable must be positive, got {u}")));
        }
        let r = s.marginal_residual(&theta.beta);
        total += longitudinal_from_residual(&r, &s.z1, theta.sigma2_e, b, u);
        total += event_from_terms(&terms[groups.group_of[i]], theta, &r, b, u, s.log_event_time, s.event_observed)?;
        total += re.logpdf(b, u, t);
        total += theta.mixing.logpdf(u)?;
    }
    Ok(total)
}
