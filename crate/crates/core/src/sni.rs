//! Skew-normal/independent (SNI) distributions.
//!
//! An SNI vector is `Y = μ + U^{-1/2} W` where `W ~ SN_p(0, Σ, λ)` and `U` is
//! a positive mixing variable. Conditionally on `U = u`, `Y` is skew-normal
//! with scale `Σ/u`, so every density here is built from the skew-normal
//! kernel
//!
//! ```text
//! f(y | u) = 2 φ_p(y | μ, Σ/u) Φ(u^{1/2} λᵀ Σ^{-1/2} (y - μ))
//! ```
//!
//! integrated against the mixing law. The four supported mixing laws are the
//! degenerate one (skew-normal), `Gamma(ν/2, ν/2)` (skew-t), `Beta(ν, 1)`
//! (skew-slash) and a two-point law on `{λ_c, 1}` (skew-contaminated normal).

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, dot, sym_inv_sqrt, sym_sqrt, LowerTriangular, SymMatrix};
use crate::quad::{integrate, QuadOptions};
use crate::special::{inv_mills, ln_gamma, log_add_exp, log_norm_cdf, LN_SQRT_2PI};

const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingFamily {
    SkewNormal,
    SkewT,
    SkewSlash,
    SkewContaminated,
}

impl MixingFamily {
    pub fn short_name(self) -> &'static str {
        match self {
            MixingFamily::SkewNormal => "sn",
            MixingFamily::SkewT => "st",
            MixingFamily::SkewSlash => "ssl",
            MixingFamily::SkewContaminated => "scn",
        }
    }
}

/// Law of the mixing variable `U`.
///
/// `nu` is the degrees of freedom for the skew-t and the shape for the
/// skew-slash. The contaminated normal puts mass `contam_weight` at
/// `contam_scale` and the rest at 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingSpec {
    pub family: MixingFamily,
    #[serde(default)]
    pub nu: f64,
    #[serde(default)]
    pub contam_weight: f64,
    #[serde(default = "one")]
    pub contam_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl MixingSpec {
    pub fn skew_normal() -> Self {
        Self {
            family: MixingFamily::SkewNormal,
            nu: f64::INFINITY,
            contam_weight: 0.0,
            contam_scale: 1.0,
        }
    }

    pub fn skew_t(nu: f64) -> Self {
        Self {
            family: MixingFamily::SkewT,
            nu,
            ..Self::skew_normal()
        }
    }

    pub fn skew_slash(nu: f64) -> Self {
        Self {
            family: MixingFamily::SkewSlash,
            nu,
            ..Self::skew_normal()
        }
    }

    pub fn skew_contaminated(weight: f64, scale: f64) -> Self {
        Self {
            family: MixingFamily::SkewContaminated,
            nu: f64::INFINITY,
            contam_weight: weight,
            contam_scale: scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.family {
            MixingFamily::SkewNormal => true,
            MixingFamily::SkewT => self.nu > 2.0 && self.nu.is_finite(),
            MixingFamily::SkewSlash => self.nu > 0.5 && self.nu.is_finite(),
            MixingFamily::SkewContaminated => {
                (0.0..1.0).contains(&self.contam_weight)
                    && self.contam_scale > 0.0
                    && self.contam_scale < 1.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("invalid mixing specification {self:?}")))
        }
    }

    /// Log-density of the mixing law at `u` (log-probability for the
    /// discrete laws).
    pub fn logpdf(&self, u: f64) -> Result<f64> {
        if !(u > 0.0) {
            return Err(Error::Domain(format!("mixing variable must be positive, got {u}")));
        }
        Ok(match self.family {
            MixingFamily::SkewNormal => {
                if u == 1.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            MixingFamily::SkewT => {
                let a = 0.5 * self.nu;
                a * a.ln() - ln_gamma(a) + (a - 1.0) * u.ln() - a * u
            }
            MixingFamily::SkewSlash => {
                if u > 1.0 {
                    return Err(Error::Domain(format!(
                        "skew-slash mixing variable must lie in (0, 1], got {u}"
                    )));
                }
                self.nu.ln() + (self.nu - 1.0) * u.ln()
            }
            MixingFamily::SkewContaminated => {
                if u == self.contam_scale {
                    self.contam_weight.ln()
                } else if u == 1.0 {
                    (1.0 - self.contam_weight).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.family {
            MixingFamily::SkewNormal => 1.0,
            MixingFamily::SkewT => {
                let a = 0.5 * self.nu;
                Gamma::new(a, 1.0 / a)
                    .expect("validated degrees of freedom")
                    .sample(rng)
            }
            MixingFamily::SkewSlash => {
                // Beta(ν, 1) by inversion
                let v: f64 = rng.random();
                (1.0 - v).powf(1.0 / self.nu)
            }
            MixingFamily::SkewContaminated => {
                if self.contam_weight > 0.0 && rng.random::<f64>() < self.contam_weight {
                    self.contam_scale
                } else {
                    1.0
                }
            }
        }
    }

    /// `E(U^{-1/2})`, the moment entering the random-effects centring
    /// constant `c = -√(2/π) E(U^{-1/2})`.
    pub fn expected_inv_sqrt_u(&self) -> Result<f64> {
        match self.family {
            MixingFamily::SkewNormal => Ok(1.0),
            MixingFamily::SkewT => {
                if !(self.nu > 1.0) {
                    return Err(Error::Domain(format!(
                        "E(U^-1/2) is undefined for skew-t with nu = {}",
                        self.nu
                    )));
                }
                let nu = self.nu;
                Ok((0.5 * nu).sqrt() * (ln_gamma(0.5 * (nu - 1.0)) - ln_gamma(0.5 * nu)).exp())
            }
            MixingFamily::SkewSlash => {
                if !(self.nu > 0.5) {
                    return Err(Error::Domain(format!(
                        "E(U^-1/2) is undefined for skew-slash with nu = {}",
                        self.nu
                    )));
                }
                Ok(self.nu / (self.nu - 0.5))
            }
            MixingFamily::SkewContaminated => Ok(self.contam_weight / self.contam_scale.sqrt()
                + (1.0 - self.contam_weight)),
        }
    }
}

/// Location, scale, skewness and mixing law of an SNI distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SniParams {
    pub mu: Vec<f64>,
    pub sigma: SymMatrix,
    pub lambda: Vec<f64>,
    pub mixing: MixingSpec,
}

/// Result of marginalising an SNI vector onto its leading block.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalResult {
    pub params: SniParams,
    pub v_tilde: Vec<f64>,
    pub sigma_22_1: SymMatrix,
}

/// Pieces of a partitioned scale matrix shared by the marginal and
/// conditional computations.
struct Partition {
    p1: usize,
    v: Vec<f64>,
    v_tilde: Vec<f64>,
    sigma11: SymMatrix,
    chol11: LowerTriangular,
    sigma12: Vec<Vec<f64>>, // p1 rows of p2 columns
    sigma_22_1: SymMatrix,
}

/// Sufficient statistics of `y` for the skew-normal kernel at any `u`.
#[derive(Debug, Clone, Copy)]
struct Kernel {
    dim: f64,
    logdet: f64,
    maha: f64,
    skew_arg: f64,
}

impl Kernel {
    /// `log f(y | u)`
    #[inline]
    fn log_density(&self, u: f64) -> f64 {
        LN_2 - self.dim * LN_SQRT_2PI - 0.5 * self.logdet + 0.5 * self.dim * u.ln()
            - 0.5 * u * self.maha
            + log_norm_cdf(u.sqrt() * self.skew_arg)
    }
}

impl SniParams {
    pub fn new(mu: Vec<f64>, sigma: SymMatrix, lambda: Vec<f64>, mixing: MixingSpec) -> Result<Self> {
        if mu.len() != sigma.dim() || lambda.len() != sigma.dim() {
            return Err(Error::Dimension(format!(
                "location {} / skewness {} / scale {} disagree",
                mu.len(),
                lambda.len(),
                sigma.dim()
            )));
        }
        cholesky(&sigma)?;
        mixing.validate()?;
        Ok(Self {
            mu,
            sigma,
            lambda,
            mixing,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn check_point(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "point has dimension {}, distribution has {}",
                y.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `v = Σ^{-1/2} λ`
    fn skew_direction(&self) -> Result<Vec<f64>> {
        if self.lambda.iter().all(|&l| l == 0.0) {
            return Ok(vec![0.0; self.dim()]);
        }
        Ok(sym_inv_sqrt(&self.sigma)?.mul_vec(&self.lambda))
    }

    fn kernel(&self, y: &[f64]) -> Result<Kernel> {
        self.check_point(y)?;
        let chol = cholesky(&self.sigma)?;
        let r: Vec<f64> = y.iter().zip(&self.mu).map(|(a, b)| a - b).collect();
        let mut z = r.clone();
        chol.forward_solve(&mut z);
        let v = self.skew_direction()?;
        Ok(Kernel {
            dim: self.dim() as f64,
            logdet: chol.logdet(),
            maha: dot(&z, &z),
            skew_arg: dot(&v, &r),
        })
    }

    /// Skew-normal log-density `log[2 φ_p(y|μ,Σ) Φ(λᵀΣ^{-1/2}(y-μ))]`.
    /// Only defined for the skew-normal family.
    pub fn sn_logpdf(&self, y: &[f64]) -> Result<f64> {
        if self.mixing.family != MixingFamily::SkewNormal {
            return Err(Error::Domain(
                "sn_logpdf requires the skew-normal mixing law".into(),
            ));
        }
        Ok(self.kernel(y)?.log_density(1.0))
    }

    /// Log-density of `Y | U = u`.
    pub fn logpdf_given_u(&self, y: &[f64], u: f64) -> Result<f64> {
        if !(u > 0.0) {
            return Err(Error::Domain(format!("mixing variable must be positive, got {u}")));
        }
        Ok(self.kernel(y)?.log_density(u))
    }

    /// Marginal SNI log-density, integrating the mixing variable out.
    pub fn sni_logpdf(&self, y: &[f64]) -> Result<f64> {
        let k = self.kernel(y)?;
        let mix = &self.mixing;
        match mix.family {
            MixingFamily::SkewNormal => Ok(k.log_density(1.0)),
            MixingFamily::SkewContaminated => {
                let clean = (1.0 - mix.contam_weight).ln() + k.log_density(1.0);
                if mix.contam_weight == 0.0 {
                    return Ok(k.log_density(1.0));
                }
                let contaminated = mix.contam_weight.ln() + k.log_density(mix.contam_scale);
                Ok(log_add_exp(clean, contaminated))
            }
            MixingFamily::SkewT => {
                let nu = mix.nu;
                let log_joint = |u: f64| k.log_density(u) + mix.logpdf(u).unwrap_or(f64::NEG_INFINITY);
                // u = m·s/(1-s) puts the approximate mode at s = 1/2
                let mode = ((nu + k.dim - 2.0) / (nu + k.maha)).max(1e-300);
                let reference = log_joint(mode);
                let opts = QuadOptions {
                    rel_tol: 1e-11,
                    ..Default::default()
                };
                let integral = integrate(
                    |s| {
                        let u = mode * s / (1.0 - s);
                        let jac = mode / ((1.0 - s) * (1.0 - s));
                        (log_joint(u) - reference).exp() * jac
                    },
                    0.0,
                    1.0,
                    opts,
                )?;
                finite_log(reference + integral.ln())
            }
            MixingFamily::SkewSlash => {
                let nu = mix.nu;
                let log_joint = |u: f64| k.log_density(u) + nu.ln() + (nu - 1.0) * u.ln();
                let mode = ((k.dim + 2.0 * nu - 2.0) / k.maha.max(1e-300)).clamp(1e-300, 1.0);
                let reference = log_joint(mode);
                let opts = QuadOptions {
                    rel_tol: 1e-11,
                    ..Default::default()
                };
                let f = |u: f64| (log_joint(u) - reference).exp();
                let mut total = 0.0;
                let mut breaks = vec![0.0];
                if mode < 1.0 {
                    breaks.push(mode);
                    if 4.0 * mode < 1.0 {
                        breaks.push(4.0 * mode);
                    }
                }
                breaks.push(1.0);
                for w in breaks.windows(2) {
                    total += integrate(f, w[0], w[1], opts)?;
                }
                finite_log(reference + total.ln())
            }
        }
    }

    fn partition(&self, p1: usize) -> Result<Partition> {
        let p = self.dim();
        if p1 == 0 || p1 >= p {
            return Err(Error::Dimension(format!(
                "block size {p1} must lie in [1, {})",
                p
            )));
        }
        let idx1: Vec<usize> = (0..p1).collect();
        let idx2: Vec<usize> = (p1..p).collect();
        let sigma11 = self.sigma.sub_block(&idx1);
        let sigma22 = self.sigma.sub_block(&idx2);
        let chol11 = cholesky(&sigma11)?;
        let sigma12: Vec<Vec<f64>> = idx1
            .iter()
            .map(|&i| idx2.iter().map(|&j| self.sigma.get(i, j)).collect())
            .collect();
        // Σ11^{-1} Σ12, column by column
        let p2 = p - p1;
        let mut b = vec![vec![0.0; p2]; p1];
        for j in 0..p2 {
            let col: Vec<f64> = (0..p1).map(|i| sigma12[i][j]).collect();
            let sol = chol11.solve(&col);
            for i in 0..p1 {
                b[i][j] = sol[i];
            }
        }
        let sigma_22_1 = SymMatrix::from_lower_fn(p2, |i, j| {
            sigma22.get(i, j) - (0..p1).map(|k| sigma12[k][i] * b[k][j]).sum::<f64>()
        });
        cholesky(&sigma_22_1)?;
        let v = self.skew_direction()?;
        let (v1, v2) = v.split_at(p1);
        let scale = (1.0 + sigma_22_1.quad_form(v2)).sqrt();
        let v_tilde: Vec<f64> = (0..p1)
            .map(|i| (v1[i] + dot(&b[i], v2)) / scale)
            .collect();
        Ok(Partition {
            p1,
            v,
            v_tilde,
            sigma11,
            chol11,
            sigma12,
            sigma_22_1,
        })
    }

    /// Law of the leading `p1` coordinates: `SNI(μ₁, Σ₁₁, Σ₁₁^{1/2} ṽ; H)`.
    pub fn marginal(&self, p1: usize) -> Result<MarginalResult> {
        let part = self.partition(p1)?;
        let lambda1 = sym_sqrt(&part.sigma11)?.mul_vec(&part.v_tilde);
        Ok(MarginalResult {
            params: SniParams {
                mu: self.mu[..p1].to_vec(),
                sigma: part.sigma11,
                lambda: lambda1,
                mixing: self.mixing,
            },
            v_tilde: part.v_tilde,
            sigma_22_1: part.sigma_22_1,
        })
    }

    /// `μ₂.₁ = μ₂ + Σ₂₁Σ₁₁^{-1}(y₁ - μ₁)`
    fn conditional_location(&self, part: &Partition, y1: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p1 = part.p1;
        let r1: Vec<f64> = y1.iter().zip(&self.mu[..p1]).map(|(a, b)| a - b).collect();
        let w = part.chol11.solve(&r1);
        let p2 = self.dim() - p1;
        let mu21 = (0..p2)
            .map(|j| self.mu[p1 + j] + (0..p1).map(|i| part.sigma12[i][j] * w[i]).sum::<f64>())
            .collect();
        (mu21, r1)
    }

    /// Log-density of the trailing block given the leading block and `U = u`.
    pub fn conditional_logpdf(&self, y2: &[f64], y1: &[f64], u: f64) -> Result<f64> {
        if !(u > 0.0) {
            return Err(Error::Domain(format!("mixing variable must be positive, got {u}")));
        }
        let part = self.partition(y1.len())?;
        if y2.len() != self.dim() - part.p1 {
            return Err(Error::Dimension("conditioned block has the wrong size".into()));
        }
        let (mu21, r1) = self.conditional_location(&part, y1);
        let chol = cholesky(&part.sigma_22_1)?;
        let mut z: Vec<f64> = y2.iter().zip(&mu21).map(|(a, b)| a - b).collect();
        chol.forward_solve(&mut z);
        let p2 = y2.len() as f64;
        let log_normal = -p2 * LN_SQRT_2PI - 0.5 * chol.logdet() + 0.5 * p2 * u.ln()
            - 0.5 * u * dot(&z, &z);
        let full_resid: Vec<f64> = y1
            .iter()
            .chain(y2)
            .zip(&self.mu)
            .map(|(a, b)| a - b)
            .collect();
        let su = u.sqrt();
        let num = log_norm_cdf(su * dot(&part.v, &full_resid));
        let den = log_norm_cdf(su * dot(&part.v_tilde, &r1));
        let value = log_normal + num - den;
        if !value.is_finite() {
            return Err(Error::NumericalUnderflow(
                "conditional skew ratio is not representable".into(),
            ));
        }
        Ok(value)
    }

    /// `E[Y₂ | y₁, u]`
    pub fn conditional_mean(&self, y1: &[f64], u: f64) -> Result<Vec<f64>> {
        if !(u > 0.0) {
            return Err(Error::Domain(format!("mixing variable must be positive, got {u}")));
        }
        let part = self.partition(y1.len())?;
        let (mut mean, r1) = self.conditional_location(&part, y1);
        let v2 = &part.v[part.p1..];
        if v2.iter().all(|&x| x == 0.0) {
            return Ok(mean);
        }
        let tau = u.sqrt() * dot(&part.v_tilde, &r1);
        let mills = inv_mills(tau);
        if !mills.is_finite() {
            return Err(Error::NumericalUnderflow(format!(
                "inverse Mills ratio overflowed at {tau}"
            )));
        }
        let sv = part.sigma_22_1.mul_vec(v2);
        let scale = (1.0 + dot(v2, &sv)).sqrt();
        let factor = mills / (u.sqrt() * scale);
        for (m, s) in mean.iter_mut().zip(&sv) {
            *m += factor * s;
        }
        Ok(mean)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        Ok(SniSampler::new(self)?.sample(rng))
    }
}

fn finite_log(v: f64) -> Result<f64> {
    if v.is_nan() {
        Err(Error::IntegrationFailure("density integral is not a number".into()))
    } else {
        Ok(v)
    }
}

/// Draws from an SNI law through its stochastic representation
/// `μ + u^{-1/2} Σ^{1/2}(δ|z₀| + (I - δδᵀ)^{1/2} z₁)`.
#[derive(Debug, Clone)]
pub struct SniSampler {
    mu: Vec<f64>,
    sqrt_sigma: SymMatrix,
    delta: Vec<f64>,
    ortho_sqrt: SymMatrix,
    mixing: MixingSpec,
}

impl SniSampler {
    pub fn new(p: &SniParams) -> Result<Self> {
        p.mixing.validate()?;
        let dim = p.dim();
        let sqrt_sigma = sym_sqrt(&p.sigma)?;
        let norm = (1.0 + dot(&p.lambda, &p.lambda)).sqrt();
        let delta: Vec<f64> = p.lambda.iter().map(|l| l / norm).collect();
        let d2 = dot(&delta, &delta);
        // (I - δδᵀ)^{1/2} = I + c δδᵀ with c = (√(1 - |δ|²) - 1)/|δ|²
        let c = if d2 > 0.0 {
            ((1.0 - d2).sqrt() - 1.0) / d2
        } else {
            0.0
        };
        let ortho_sqrt = SymMatrix::from_lower_fn(dim, |i, j| {
            (if i == j { 1.0 } else { 0.0 }) + c * delta[i] * delta[j]
        });
        Ok(Self {
            mu: p.mu.clone(),
            sqrt_sigma,
            delta,
            ortho_sqrt,
            mixing: p.mixing,
        })
    }

    /// Skew-normal draw `W ~ SN_p(0, Σ, λ)`.
    pub fn sample_w<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z0: f64 = rng.sample::<f64, _>(StandardNormal).abs();
        let z1: Vec<f64> = (0..self.mu.len()).map(|_| rng.sample(StandardNormal)).collect();
        let mut inner = self.ortho_sqrt.mul_vec(&z1);
        for (x, d) in inner.iter_mut().zip(&self.delta) {
            *x += d * z0;
        }
        self.sqrt_sigma.mul_vec(&inner)
    }

    pub fn sample_given_u<R: Rng + ?Sized>(&self, u: f64, rng: &mut R) -> Vec<f64> {
        let w = self.sample_w(rng);
        let s = 1.0 / u.sqrt();
        self.mu.iter().zip(&w).map(|(m, x)| m + s * x).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u = self.mixing.sample(rng);
        self.sample_given_u(u, rng)
    }
}

/// Plain multivariate normal log-density, used as a reference in several
/// places.
pub fn mvn_logpdf(y: &[f64], mu: &[f64], sigma: &SymMatrix) -> Result<f64> {
    let chol = cholesky(sigma)?;
    let mut z: Vec<f64> = y.iter().zip(mu).map(|(a, b)| a - b).collect();
    chol.forward_solve(&mut z);
    let p = y.len() as f64;
    Ok(-p * LN_SQRT_2PI - 0.5 * chol.logdet() - 0.5 * dot(&z, &z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::{log_normal, norm_cdf};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sym2(a: f64, b: f64, c: f64) -> SymMatrix {
        SymMatrix::from_rows(&[vec![a, b], vec![b, c]]).unwrap()
    }

    fn sym3() -> SymMatrix {
        SymMatrix::from_rows(&[
            vec![2.0, 0.6, -0.3],
            vec![0.6, 1.5, 0.4],
            vec![-0.3, 0.4, 1.2],
        ])
        .unwrap()
    }

    fn integral(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        let opts = QuadOptions {
            rel_tol: 1e-12,
            max_intervals: 4000,
            ..Default::default()
        };
        // split around the origin so narrow bodies are never straddled
        let cuts = [a, -20.0, -5.0, 0.0, 5.0, 20.0, b].map(|c: f64| c.clamp(a, b));
        cuts.windows(2)
            .filter(|w| w[0] < w[1])
            .map(|w| integrate(&f, w[0], w[1], opts).unwrap())
            .sum()
    }

    /// Skew-normal density written directly with nalgebra, independent of the
    /// crate's own factorisations.
    fn sn_density_nalgebra(y: &[f64], mu: &[f64], sigma: &SymMatrix, lambda: &[f64]) -> f64 {
        let p = y.len();
        let s = DMatrix::from_fn(p, p, |i, j| sigma.get(i, j));
        let eig = s.clone().symmetric_eigen();
        let inv_sqrt = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e.sqrt()))
            * eig.eigenvectors.transpose();
        let r = DVector::from_column_slice(y) - DVector::from_column_slice(mu);
        let inv = s.clone().try_inverse().unwrap();
        let det = s.determinant();
        let maha = (r.transpose() * inv * &r)[(0, 0)];
        let normal = (-0.5 * maha).exp() / ((2.0 * std::f64::consts::PI).powi(p as i32) * det).sqrt();
        let arg = (DVector::from_column_slice(lambda).transpose() * inv_sqrt * r)[(0, 0)];
        2.0 * normal * norm_cdf(arg)
    }

    #[test]
    fn mixing_densities() {
        let st = MixingSpec::skew_t(4.0);
        assert_relative_eq!(st.logpdf(0.5).unwrap(), 2.0_f64.ln() - 1.0, epsilon = 1e-14);
        let ssl = MixingSpec::skew_slash(3.0);
        assert_relative_eq!(ssl.logpdf(0.5).unwrap(), (3.0 * 0.25_f64).ln(), epsilon = 1e-14);
        assert!(ssl.logpdf(1.5).is_err());
        let scn = MixingSpec::skew_contaminated(0.3, 0.2);
        assert_relative_eq!(scn.logpdf(0.2).unwrap(), 0.3_f64.ln());
        assert_relative_eq!(scn.logpdf(1.0).unwrap(), 0.7_f64.ln());
        assert_eq!(scn.logpdf(0.5).unwrap(), f64::NEG_INFINITY);
        assert!(st.logpdf(0.0).is_err());
        assert!(st.logpdf(-1.0).is_err());
    }

    #[test]
    fn mixing_validation() {
        assert!(MixingSpec::skew_t(2.0).validate().is_err());
        assert!(MixingSpec::skew_t(2.5).validate().is_ok());
        assert!(MixingSpec::skew_slash(0.5).validate().is_err());
        assert!(MixingSpec::skew_contaminated(0.1, 1.0).validate().is_err());
        assert!(MixingSpec::skew_contaminated(1.0, 0.5).validate().is_err());
        assert!(MixingSpec::skew_contaminated(0.1, 0.5).validate().is_ok());
    }

    #[test]
    fn inverse_root_moments_closed_form() {
        let st = MixingSpec::skew_t(4.0).expected_inv_sqrt_u().unwrap();
        assert_relative_eq!(st, 1.253_314_137_315_500_3, epsilon = 1e-13);
        let ssl = MixingSpec::skew_slash(2.0).expected_inv_sqrt_u().unwrap();
        assert_relative_eq!(ssl, 4.0 / 3.0, epsilon = 1e-14);
        let scn = MixingSpec::skew_contaminated(0.5, 0.25).expected_inv_sqrt_u().unwrap();
        assert_relative_eq!(scn, 1.5, epsilon = 1e-14);
        assert_eq!(MixingSpec::skew_normal().expected_inv_sqrt_u().unwrap(), 1.0);
        let bad = MixingSpec {
            nu: 0.8,
            ..MixingSpec::skew_t(4.0)
        };
        assert!(matches!(bad.expected_inv_sqrt_u(), Err(Error::Domain(_))));
    }

    #[test]
    fn inverse_root_moments_match_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for mix in [
            MixingSpec::skew_t(5.0),
            MixingSpec::skew_slash(1.5),
            MixingSpec::skew_contaminated(0.2, 0.3),
        ] {
            let n = 400_000;
            let draws: Vec<f64> = (0..n).map(|_| 1.0 / mix.sample(&mut rng).sqrt()).collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            let exact = mix.expected_inv_sqrt_u().unwrap();
            assert!((mean - exact).abs() < 4.0 * se, "{mix:?}: {mean} vs {exact}");
        }
    }

    #[test]
    fn slash_draws_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mix = MixingSpec::skew_slash(0.7);
        assert!((0..10_000).map(|_| mix.sample(&mut rng)).all(|u| u > 0.0 && u <= 1.0));
    }

    #[test]
    fn skew_normal_matches_direct_formula() {
        let sigma = sym3();
        let mu = [0.5, -1.0, 2.0];
        let lambda = vec![1.1, -0.7, 2.0];
        let p = SniParams::new(mu.to_vec(), sigma.clone(), lambda.clone(), MixingSpec::skew_normal())
            .unwrap();
        for y in [[0.0, 0.0, 0.0], [1.3, -2.1, 2.2], [-3.0, 1.0, 4.0]] {
            let expected = sn_density_nalgebra(&y, &mu, &sigma, &lambda).ln();
            assert_relative_eq!(p.sn_logpdf(&y).unwrap(), expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn sn_logpdf_rejects_other_mixing_laws() {
        let p = SniParams::new(vec![0.0], SymMatrix::identity(1), vec![1.0], MixingSpec::skew_t(4.0))
            .unwrap();
        assert!(p.sn_logpdf(&[0.0]).is_err());
        let p = SniParams::new(vec![0.0], SymMatrix::identity(1), vec![1.0], MixingSpec::skew_normal())
            .unwrap();
        assert!(matches!(p.sn_logpdf(&[0.0, 1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn symmetric_heavy_tailed_cases_have_closed_forms() {
        // Student t with 4 dof at its centre is exactly 3/8
        let st = SniParams::new(vec![0.0], SymMatrix::identity(1), vec![0.0], MixingSpec::skew_t(4.0))
            .unwrap();
        assert_relative_eq!(st.sni_logpdf(&[0.0]).unwrap(), 0.375_f64.ln(), epsilon = 1e-10);
        // and at y = 1.5: Γ(5/2)/(Γ(2)√(4π)) (1 + 1.5²/4)^{-5/2}
        let expected = (0.375 * (1.0 + 2.25 / 4.0_f64).powf(-2.5)).ln();
        assert_relative_eq!(st.sni_logpdf(&[1.5]).unwrap(), expected, epsilon = 1e-10);
        // slash with ν = 1 at the centre: φ(0) ∫ u^{1/2} du = (2/3)/√(2π)
        let ssl = SniParams::new(vec![0.0], SymMatrix::identity(1), vec![0.0], MixingSpec::skew_slash(1.0))
            .unwrap();
        let expected = (2.0 / 3.0 / (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert_relative_eq!(ssl.sni_logpdf(&[0.0]).unwrap(), expected, epsilon = 1e-10);
    }

    #[test]
    fn contaminated_is_two_component_mixture() {
        let sigma = sym2(1.0, 0.3, 2.0);
        let lambda = vec![0.5, -1.0];
        let mu = vec![0.2, 0.1];
        let y = [1.0, -0.5];
        let p = SniParams::new(mu.clone(), sigma.clone(), lambda.clone(), MixingSpec::skew_contaminated(0.25, 0.4))
            .unwrap();
        let f1 = sn_density_nalgebra(&y, &mu, &sigma, &lambda);
        let scaled = SymMatrix::from_lower_fn(2, |i, j| sigma.get(i, j) / 0.4);
        let f2 = sn_density_nalgebra(&y, &mu, &scaled, &lambda);
        // the skewness argument is invariant to rescaling Σ, so the direct
        // formula with Σ/u is the conditional density
        assert_relative_eq!(
            p.sni_logpdf(&y).unwrap(),
            (0.75 * f1 + 0.25 * f2).ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn univariate_densities_integrate_to_one() {
        for mix in [
            MixingSpec::skew_normal(),
            MixingSpec::skew_t(4.0),
            MixingSpec::skew_slash(1.5),
            MixingSpec::skew_contaminated(0.2, 0.3),
        ] {
            let p = SniParams::new(vec![0.5], SymMatrix::identity(1).scaled(1.7), vec![2.0], mix).unwrap();
            let total = integral(|y| p.sni_logpdf(&[y]).unwrap().exp(), -400.0, 400.0);
            assert_relative_eq!(total, 1.0, epsilon = 2e-6);
        }
    }

    #[test]
    fn far_tail_densities_are_finite() {
        for mix in [MixingSpec::skew_t(3.0), MixingSpec::skew_slash(1.0)] {
            let p = SniParams::new(vec![0.0, 0.0], sym2(1.0, 0.2, 1.0), vec![3.0, 1.0], mix).unwrap();
            for y in [[60.0, -40.0], [-80.0, -80.0], [1e3, 2.0]] {
                let v = p.sni_logpdf(&y).unwrap();
                assert!(v.is_finite(), "{mix:?} at {y:?}: {v}");
            }
        }
    }

    #[test]
    fn marginal_matches_numerical_integration() {
        for mix in [MixingSpec::skew_normal(), MixingSpec::skew_t(5.0), MixingSpec::skew_contaminated(0.3, 0.25)] {
            let p = SniParams::new(vec![0.3, -0.2, 1.0], sym3(), vec![1.5, -2.0, 0.8], mix).unwrap();
            let m = p.marginal(2).unwrap();
            for y1 in [[0.0, 0.0], [1.2, -0.7], [-1.5, 2.0]] {
                let direct = integral(
                    |y2| p.sni_logpdf(&[y1[0], y1[1], y2]).unwrap().exp(),
                    -80.0,
                    80.0,
                );
                let closed = m.params.sni_logpdf(&y1).unwrap().exp();
                assert_relative_eq!(closed, direct, max_relative = 1e-7);
            }
        }
    }

    #[test]
    fn marginal_of_symmetric_law_is_symmetric() {
        let p = SniParams::new(vec![0.0; 3], sym3(), vec![0.0; 3], MixingSpec::skew_normal()).unwrap();
        let m = p.marginal(1).unwrap();
        assert_eq!(m.params.lambda, vec![0.0]);
        assert!(p.marginal(0).is_err());
        assert!(p.marginal(3).is_err());
    }

    #[test]
    fn conditional_density_normalises_and_factorises() {
        let p = SniParams::new(vec![0.3, -0.2, 1.0], sym3(), vec![1.5, -2.0, 0.8], MixingSpec::skew_t(5.0))
            .unwrap();
        let m = p.marginal(2).unwrap();
        for u in [0.3, 1.0, 2.5] {
            let y1 = [0.8, -0.4];
            let total = integral(|y2| p.conditional_logpdf(&[y2], &y1, u).unwrap().exp(), -80.0, 80.0);
            assert_relative_eq!(total, 1.0, epsilon = 1e-9);
            let y2 = 0.7;
            let joint = p.logpdf_given_u(&[y1[0], y1[1], y2], u).unwrap();
            let split = m.params.logpdf_given_u(&y1, u).unwrap() + p.conditional_logpdf(&[y2], &y1, u).unwrap();
            assert_relative_eq!(joint, split, epsilon = 1e-11);
        }
    }

    #[test]
    fn conditional_mean_matches_numerical_first_moment() {
        let p = SniParams::new(vec![0.3, -0.2, 1.0], sym3(), vec![1.5, -2.0, 0.8], MixingSpec::skew_slash(2.0))
            .unwrap();
        for (y1, u) in [([0.8, -0.4], 0.6), ([-2.0, 1.0], 1.0), ([0.0, 3.0], 0.2)] {
            let first = integral(|y2| y2 * p.conditional_logpdf(&[y2], &y1, u).unwrap().exp(), -80.0, 80.0);
            let mean = p.conditional_mean(&y1, u).unwrap();
            assert_relative_eq!(mean[0], first, epsilon = 1e-8);
        }
    }

    #[test]
    fn conditional_mean_without_trailing_skewness_is_gaussian() {
        // v₂ = 0 when λ is zero
        let p = SniParams::new(vec![0.0, 1.0], sym2(1.0, 0.5, 2.0), vec![0.0, 0.0], MixingSpec::skew_normal())
            .unwrap();
        let mean = p.conditional_mean(&[2.0], 1.0).unwrap();
        assert_relative_eq!(mean[0], 1.0 + 0.5 * 2.0, epsilon = 1e-14);
        let dens = p.conditional_logpdf(&[1.5], &[2.0], 1.0).unwrap();
        assert_relative_eq!(dens, log_normal(1.5, 2.0, 2.0 - 0.25), epsilon = 1e-13);
    }

    #[test]
    fn univariate_sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sigma2: f64 = 2.0;
        let lambda = 1.1;
        let p = SniParams::new(vec![1.0], SymMatrix::identity(1).scaled(sigma2), vec![lambda], MixingSpec::skew_normal())
            .unwrap();
        let sampler = SniSampler::new(&p).unwrap();
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| sampler.sample(&mut rng)[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let delta = lambda / (1.0 + lambda * lambda).sqrt();
        let exact_mean = 1.0 + sigma2.sqrt() * delta * (2.0 / std::f64::consts::PI).sqrt();
        let exact_var = sigma2 * (1.0 - 2.0 * delta * delta / std::f64::consts::PI);
        assert!((mean - exact_mean).abs() < 4.0 * (exact_var / n as f64).sqrt());
        assert!((var / exact_var - 1.0).abs() < 0.02);
    }

    #[test]
    fn symmetric_t_sample_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sigma = sym2(1.0, 0.4, 0.5);
        let p = SniParams::new(vec![0.0, 0.0], sigma.clone(), vec![0.0, 0.0], MixingSpec::skew_t(8.0)).unwrap();
        let n = 200_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let y = p.sample(&mut rng).unwrap();
            acc[0] += y[0] * y[0];
            acc[1] += y[0] * y[1];
            acc[2] += y[1] * y[1];
        }
        let f = 8.0 / 6.0;
        assert_relative_eq!(acc[0] / n as f64, f * 1.0, max_relative = 0.03);
        assert_relative_eq!(acc[1] / n as f64, f * 0.4, max_relative = 0.05);
        assert_relative_eq!(acc[2] / n as f64, f * 0.5, max_relative = 0.03);
    }

    #[test]
    fn draws_follow_the_density() {
        // Kolmogorov distance between empirical CDF and the numerically
        // integrated density, for a skewed heavy-tailed law
        let p = SniParams::new(vec![0.0], SymMatrix::identity(1), vec![-2.0], MixingSpec::skew_t(4.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 20_000;
        let mut xs: Vec<f64> = (0..n).map(|_| p.sample(&mut rng).unwrap()[0]).collect();
        xs.sort_by(f64::total_cmp);
        let mut worst: f64 = 0.0;
        for q in [0.05, 0.2, 0.4, 0.5, 0.6, 0.8, 0.95] {
            let x = xs[(q * n as f64) as usize];
            let cdf = integral(|t| p.sni_logpdf(&[t]).unwrap().exp(), -400.0, x.min(399.0));
            worst = worst.max((cdf - q).abs());
        }
        // 1.95/√n is the 0.1% critical value of the KS statistic
        assert!(worst < 1.95 / (n as f64).sqrt(), "{worst}");
    }

    proptest! {
        #[test]
        fn zero_skewness_reduces_to_normal(
            y in proptest::collection::vec(-5.0..5.0f64, 3),
            mu in proptest::collection::vec(-2.0..2.0f64, 3),
        ) {
            let p = SniParams::new(mu.clone(), sym3(), vec![0.0; 3], MixingSpec::skew_normal()).unwrap();
            let sn = p.sn_logpdf(&y).unwrap();
            let mvn = mvn_logpdf(&y, &mu, &sym3()).unwrap();
            prop_assert!((sn - mvn).abs() < 1e-12);
        }

        #[test]
        fn clean_contamination_is_skew_normal(
            y in proptest::collection::vec(-5.0..5.0f64, 2),
            l in proptest::collection::vec(-3.0..3.0f64, 2),
            scale in 0.05..0.95f64,
        ) {
            let sigma = sym2(1.5, -0.3, 0.8);
            let scn = SniParams::new(vec![0.0; 2], sigma.clone(), l.clone(), MixingSpec::skew_contaminated(0.0, scale)).unwrap();
            let sn = SniParams::new(vec![0.0; 2], sigma, l, MixingSpec::skew_normal()).unwrap();
            prop_assert_eq!(scn.sni_logpdf(&y).unwrap(), sn.sn_logpdf(&y).unwrap());
        }

        #[test]
        fn density_is_finite_everywhere(
            y in proptest::collection::vec(-30.0..30.0f64, 2),
            l in proptest::collection::vec(-5.0..5.0f64, 2),
            nu in 2.1..30.0f64,
        ) {
            let sigma = sym2(1.0, 0.5, 2.0);
            for mix in [MixingSpec::skew_t(nu), MixingSpec::skew_slash(nu / 4.0 + 0.5)] {
                let p = SniParams::new(vec![0.0; 2], sigma.clone(), l.clone(), mix).unwrap();
                let v = p.sni_logpdf(&y).unwrap();
                prop_assert!(v.is_finite());
            }
        }
    }
}
