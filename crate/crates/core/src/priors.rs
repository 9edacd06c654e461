//! Prior densities and the hyperprior layer for the mixing parameters.

use rand::Rng;
use rand_distr::{Beta, Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::JointParams;
use crate::sni::{MixingFamily, MixingSpec};
use crate::special::{ln_gamma, log_normal, log_student_t};

const LN_PI: f64 = 1.144_729_885_849_400_2;

/// Lower end of the truncated-exponential prior on the skew-slash shape.
/// Below it `E(U^{-1/2})` and hence the centring constant do not exist.
pub const SLASH_NU_MIN: f64 = 0.5;
/// Lower end of the truncated-exponential prior on the skew-t degrees of
/// freedom, keeping the variance finite.
pub const SKEW_T_NU_MIN: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentTPrior {
    pub center: f64,
    pub scale: f64,
    pub dof: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    /// Normal prior for every fixed effect, the event intercept and the
    /// event loadings.
    pub beta_mean: f64,
    pub beta_sd: f64,
    /// Scale of the half-Cauchy variance priors.
    pub cauchy_scale: f64,
    pub sigma2_cov_mean: f64,
    pub sigma2_cov_sd: f64,
    pub delta_prior: StudentTPrior,
    /// One skewness shift shared by both random effects, `Δ = δ·1`, with
    /// the Student-t prior placed on `δ`.
    pub common_skewness: bool,
    /// Uniform bounds for the rate `λ₀` of the skew-t degrees of freedom.
    pub skew_t_rate: (f64, f64),
    /// Uniform bounds for the rate `λ₀` of the skew-slash shape.
    pub skew_slash_rate: (f64, f64),
    /// Beta shapes for the contamination weight.
    pub contam_weight_beta: (f64, f64),
    /// Beta shapes for the contamination scale.
    pub contam_scale_beta: (f64, f64),
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            beta_mean: 0.0,
            beta_sd: 1000.0_f64.sqrt(),
            cauchy_scale: 25.0,
            sigma2_cov_mean: 0.0,
            sigma2_cov_sd: 10.0,
            delta_prior: StudentTPrior {
                center: 0.0,
                scale: 25.0,
                dof: 2.0,
            },
            common_skewness: true,
            skew_t_rate: (0.02, 0.5),
            skew_slash_rate: (0.02, 0.5),
            contam_weight_beta: (1.0, 1.0),
            contam_scale_beta: (2.0, 2.0),
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.beta_sd,
            self.cauchy_scale,
            self.sigma2_cov_sd,
            self.delta_prior.scale,
            self.delta_prior.dof,
            self.contam_weight_beta.0,
            self.contam_weight_beta.1,
            self.contam_scale_beta.0,
            self.contam_scale_beta.1,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("prior scales and shapes must be positive".into()));
        }
        for (name, (lo, hi)) in [("skew_t_rate", self.skew_t_rate), ("skew_slash_rate", self.skew_slash_rate)] {
            if !(lo > 0.0 && hi > lo && hi.is_finite()) {
                return Err(Error::Config(format!("{name} bounds must satisfy 0 < lower < upper")));
            }
        }
        Ok(())
    }

    /// Prior mean of `ν` for the family, integrating over `λ₀`.
    pub fn expected_nu(&self, family: MixingFamily) -> Option<f64> {
        let mean_inverse_rate = |(a, b): (f64, f64)| (b / a).ln() / (b - a);
        match family {
            MixingFamily::SkewT => Some(SKEW_T_NU_MIN + mean_inverse_rate(self.skew_t_rate)),
            MixingFamily::SkewSlash => Some(SLASH_NU_MIN + mean_inverse_rate(self.skew_slash_rate)),
            _ => None,
        }
    }
}

/// Hyperparameters that are sampled alongside the model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperState {
    /// Rate of the exponential prior on `ν` (skew-t and skew-slash only).
    pub lambda0: f64,
}

fn log_half_cauchy(x: f64, scale: f64) -> f64 {
    let z = x / scale;
    std::f64::consts::LN_2 - LN_PI - scale.ln() - (z * z).ln_1p()
}

fn log_cauchy(x: f64, scale: f64) -> f64 {
    let z = x / scale;
    -LN_PI - scale.ln() - (z * z).ln_1p()
}

fn log_beta_pdf(x: f64, a: f64, b: f64) -> f64 {
    ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln()
}

fn out_of_support(what: &str) -> Error {
    Error::OutOfSupport(what.to_string())
}

/// Log prior of the skew-normal-type parameters with the Ω₂ truncation and
/// the skewness prior placed on `Δ`.
pub fn log_prior(theta: &JointParams, hyper: &HyperState, spec: &PriorSpec) -> Result<f64> {
    let normal_sd2 = spec.beta_sd * spec.beta_sd;
    let mut lp = 0.0;
    for &b in theta.beta.iter().chain([theta.beta0].iter()).chain(theta.nu_event.iter()) {
        lp += log_normal(b, spec.beta_mean, normal_sd2);
    }
    for (name, v) in [
        ("sigma2_e", theta.sigma2_e),
        ("sigma2_T", theta.sigma2_t),
        ("omega1", theta.omega1),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(out_of_support(name));
        }
        lp += log_half_cauchy(v, spec.cauchy_scale);
    }
    if !(theta.omega2.abs() < theta.omega1) {
        return Err(out_of_support("omega2"));
    }
    // Cauchy(0, s) restricted to (-Ω₁, Ω₁)
    let mass = 2.0 / std::f64::consts::PI * (theta.omega1 / spec.cauchy_scale).atan();
    lp += log_cauchy(theta.omega2, spec.cauchy_scale) - mass.ln();
    lp += log_normal(theta.sigma2_cov, spec.sigma2_cov_mean, spec.sigma2_cov_sd * spec.sigma2_cov_sd);
    let delta = theta.delta()?;
    let t = spec.delta_prior;
    if spec.common_skewness {
        if (delta[0] - delta[1]).abs() > 1e-8 * (1.0 + delta[0].abs() + delta[1].abs()) {
            return Err(out_of_support("delta (components must agree)"));
        }
        lp += log_student_t(0.5 * (delta[0] + delta[1]), t.center, t.scale, t.dof);
    } else {
        for d in delta {
            lp += log_student_t(d, t.center, t.scale, t.dof);
        }
    }
    lp += log_mixing_prior(&theta.mixing, hyper, spec)?;
    Ok(lp)
}

/// Log prior of the mixing parameters and their hyperparameters.
pub fn log_mixing_prior(mixing: &MixingSpec, hyper: &HyperState, spec: &PriorSpec) -> Result<f64> {
    let exp_family = |nu: f64, floor: f64, (lo, hi): (f64, f64)| -> Result<f64> {
        let l0 = hyper.lambda0;
        if !(l0 > lo && l0 < hi) {
            return Err(out_of_support("lambda0"));
        }
        if !(nu > floor && nu.is_finite()) {
            return Err(out_of_support("nu"));
        }
        Ok(l0.ln() - l0 * (nu - floor) - (hi - lo).ln())
    };
    match mixing.family {
        MixingFamily::SkewNormal => Ok(0.0),
        MixingFamily::SkewT => exp_family(mixing.nu, SKEW_T_NU_MIN, spec.skew_t_rate),
        MixingFamily::SkewSlash => exp_family(mixing.nu, SLASH_NU_MIN, spec.skew_slash_rate),
        MixingFamily::SkewContaminated => {
            let (g, s) = (mixing.contam_weight, mixing.contam_scale);
            if !(g > 0.0 && g < 1.0) {
                return Err(out_of_support("gamma"));
            }
            if !(s > 0.0 && s < 1.0) {
                return Err(out_of_support("lambda_c"));
            }
            Ok(log_beta_pdf(g, spec.contam_weight_beta.0, spec.contam_weight_beta.1)
                + log_beta_pdf(s, spec.contam_scale_beta.0, spec.contam_scale_beta.1))
        }
    }
}

/// Draws the hyperparameter and an initial mixing specification for
/// `family` from the hyperprior.
pub fn sample_hyper<R: Rng + ?Sized>(
    spec: &PriorSpec,
    family: MixingFamily,
    rng: &mut R,
) -> (HyperState, MixingSpec) {
    let draw_rate = |(lo, hi): (f64, f64), rng: &mut R| rng.random_range(lo..hi);
    let exp_draw = |rate: f64, rng: &mut R| Exp::new(rate).expect("positive rate").sample(rng);
    match family {
        MixingFamily::SkewNormal => (HyperState { lambda0: 1.0 }, MixingSpec::skew_normal()),
        MixingFamily::SkewT => {
            let l0 = draw_rate(spec.skew_t_rate, rng);
            let nu = SKEW_T_NU_MIN + exp_draw(l0, rng);
            (HyperState { lambda0: l0 }, MixingSpec::skew_t(nu))
        }
        MixingFamily::SkewSlash => {
            let l0 = draw_rate(spec.skew_slash_rate, rng);
            let nu = SLASH_NU_MIN + exp_draw(l0, rng);
            (HyperState { lambda0: l0 }, MixingSpec::skew_slash(nu))
        }
        MixingFamily::SkewContaminated => {
            let (a, b) = spec.contam_weight_beta;
            let g = Beta::new(a, b).expect("positive shapes").sample(rng);
            let (a, b) = spec.contam_scale_beta;
            let s = Beta::new(a, b).expect("positive shapes").sample(rng);
            (HyperState { lambda0: 1.0 }, MixingSpec::skew_contaminated(g, s))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::{integrate, QuadOptions};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{Beta as BetaDist, Cauchy, Continuous, Normal, StudentsT};

    fn theta() -> JointParams {
        JointParams {
            beta: vec![0.9, 1.0],
            beta0: 1.0,
            sigma2_e: 0.5,
            sigma2_t: 0.99,
            sigma2_cov: 0.3,
            omega1: 1.0,
            omega2: 0.5,
            lambda: [1.1, 1.1],
            nu_event: [0.8, 0.9],
            mixing: MixingSpec::skew_normal(),
        }
    }

    /// Component-by-component sum with statrs densities.
    fn oracle(th: &JointParams, spec: &PriorSpec) -> f64 {
        let normal = Normal::new(spec.beta_mean, spec.beta_sd).unwrap();
        let cauchy = Cauchy::new(0.0, spec.cauchy_scale).unwrap();
        let mut s = 0.0;
        for b in th.beta.iter().chain([th.beta0].iter()).chain(th.nu_event.iter()) {
            s += normal.ln_pdf(*b);
        }
        for v in [th.sigma2_e, th.sigma2_t, th.omega1] {
            s += (2.0 * cauchy.pdf(v)).ln();
        }
        let mass = 2.0 * (cauchy.cdf_at(th.omega1) - 0.5);
        s += (cauchy.pdf(th.omega2) / mass).ln();
        s += Normal::new(spec.sigma2_cov_mean, spec.sigma2_cov_sd).unwrap().ln_pdf(th.sigma2_cov);
        let t = StudentsT::new(spec.delta_prior.center, spec.delta_prior.scale, spec.delta_prior.dof).unwrap();
        let delta = th.delta().unwrap();
        if spec.common_skewness {
            s += t.ln_pdf(delta[0]);
        } else {
            s += t.ln_pdf(delta[0]) + t.ln_pdf(delta[1]);
        }
        s
    }

    trait CdfAt {
        fn cdf_at(&self, x: f64) -> f64;
    }
    impl CdfAt for Cauchy {
        fn cdf_at(&self, x: f64) -> f64 {
            use statrs::distribution::ContinuousCDF;
            self.cdf(x)
        }
    }

    #[test]
    fn matches_independent_component_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = HyperState { lambda0: 1.0 };
        for k in 0..100 {
            let spec = PriorSpec {
                common_skewness: k % 2 == 0,
                ..PriorSpec::default()
            };
            let l1 = rng.random_range(-4.0..4.0);
            let l2 = if spec.common_skewness { l1 } else { rng.random_range(-4.0..4.0) };
            let o1 = rng.random_range(0.1..4.0);
            let th = JointParams {
                beta: vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)],
                beta0: rng.random_range(-5.0..5.0),
                sigma2_e: rng.random_range(0.01..5.0),
                sigma2_t: rng.random_range(0.01..5.0),
                sigma2_cov: rng.random_range(-2.0..2.0),
                omega1: o1,
                omega2: rng.random_range(-0.95..0.95) * o1,
                lambda: [l1, l2],
                nu_event: [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                mixing: MixingSpec::skew_normal(),
            };
            let got = log_prior(&th, &h, &spec).unwrap();
            assert_relative_eq!(got, oracle(&th, &spec), epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn common_skewness_rejects_unequal_components() {
        let th = JointParams {
            beta: vec![0.0],
            beta0: 0.0,
            sigma2_e: 1.0,
            sigma2_t: 1.0,
            sigma2_cov: 0.0,
            omega1: 1.0,
            omega2: 0.3,
            lambda: [0.5, -0.5],
            nu_event: [0.0, 0.0],
            mixing: MixingSpec::skew_normal(),
        };
        let h = HyperState { lambda0: 1.0 };
        assert!(matches!(log_prior(&th, &h, &PriorSpec::default()), Err(Error::OutOfSupport(_))));
        let free = PriorSpec {
            common_skewness: false,
            ..PriorSpec::default()
        };
        assert!(log_prior(&th, &h, &free).unwrap().is_finite());
    }

    #[test]
    fn finite_at_prior_centres() {
        let th = JointParams {
            beta: vec![0.0, 0.0],
            beta0: 0.0,
            sigma2_cov: 0.0,
            lambda: [0.0, 0.0],
            nu_event: [0.0, 0.0],
            omega2: 0.0,
            ..theta()
        };
        assert!(log_prior(&th, &HyperState { lambda0: 1.0 }, &PriorSpec::default()).unwrap().is_finite());
    }

    #[test]
    fn boundary_is_out_of_support() {
        let th = JointParams {
            omega2: 1.0,
            ..theta()
        };
        let r = log_prior(&th, &HyperState { lambda0: 1.0 }, &PriorSpec::default());
        assert!(matches!(r, Err(Error::OutOfSupport(_))));
        let th = JointParams {
            sigma2_e: 0.0,
            ..theta()
        };
        assert!(log_prior(&th, &HyperState { lambda0: 1.0 }, &PriorSpec::default()).is_err());
    }

    #[test]
    fn components_are_additive() {
        let spec = PriorSpec::default();
        let h = HyperState { lambda0: 1.0 };
        let base = theta();
        let moved = JointParams {
            sigma2_cov: -0.7,
            ..theta()
        };
        let diff = log_prior(&moved, &h, &spec).unwrap() - log_prior(&base, &h, &spec).unwrap();
        let expected = log_normal(-0.7, 0.0, 100.0) - log_normal(0.3, 0.0, 100.0);
        assert_relative_eq!(diff, expected, epsilon = 1e-12);
    }

    #[test]
    fn half_cauchy_integrates_to_one() {
        // x = s·tan(π θ / 2) maps (0, 1) onto (0, ∞)
        let s = 25.0;
        let v = integrate(
            |th| {
                let a = 0.5 * std::f64::consts::PI * th;
                let x = s * a.tan();
                let jac = s * 0.5 * std::f64::consts::PI / a.cos().powi(2);
                log_half_cauchy(x, s).exp() * jac
            },
            0.0,
            1.0,
            QuadOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(v, 1.0, epsilon = 1e-8);
        // the truncated Ω₂ prior integrates to one on (-Ω₁, Ω₁)
        let o1 = 0.7;
        let mass = 2.0 / std::f64::consts::PI * (o1 / s).atan();
        let v = integrate(|x| (log_cauchy(x, s) - mass.ln()).exp(), -o1, o1, QuadOptions::default()).unwrap();
        assert_relative_eq!(v, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn mixing_priors() {
        let spec = PriorSpec::default();
        let h = HyperState { lambda0: 0.1 };
        let lp = log_mixing_prior(&MixingSpec::skew_t(5.0), &h, &spec).unwrap();
        assert_relative_eq!(lp, 0.1_f64.ln() - 0.3 - 0.48_f64.ln(), epsilon = 1e-14);
        assert!(log_mixing_prior(&MixingSpec::skew_t(1.9), &h, &spec).is_err());
        assert!(log_mixing_prior(&MixingSpec::skew_t(5.0), &HyperState { lambda0: 0.9 }, &spec).is_err());
        let lp = log_mixing_prior(&MixingSpec::skew_contaminated(0.3, 0.4), &h, &spec).unwrap();
        let expected = BetaDist::new(1.0, 1.0).unwrap().ln_pdf(0.3) + BetaDist::new(2.0, 2.0).unwrap().ln_pdf(0.4);
        assert_relative_eq!(lp, expected, epsilon = 1e-12);
    }

    #[test]
    fn hyper_draws_respect_supports() {
        let spec = PriorSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100_000 {
            let (h, m) = sample_hyper(&spec, MixingFamily::SkewT, &mut rng);
            assert!(m.nu > 2.0 && h.lambda0 > 0.02 && h.lambda0 < 0.5);
        }
        for _ in 0..10_000 {
            let (_, m) = sample_hyper(&spec, MixingFamily::SkewContaminated, &mut rng);
            assert!(m.contam_weight > 0.0 && m.contam_weight < 1.0);
            assert!(m.contam_scale > 0.0 && m.contam_scale < 1.0);
        }
    }

    #[test]
    fn slash_shape_mean_matches_mixture_mean() {
        // pick (c, d) with c fixed so that the prior mean of ν is 10
        let c = 0.01;
        let mean = |d: f64| SLASH_NU_MIN + (d / c).ln() / (d - c);
        let (mut lo, mut hi) = (0.011, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mean(mid) > 10.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let spec = PriorSpec {
            skew_slash_rate: (c, lo),
            ..Default::default()
        };
        assert_relative_eq!(spec.expected_nu(MixingFamily::SkewSlash).unwrap(), 10.0, epsilon = 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_hyper(&spec, MixingFamily::SkewSlash, &mut rng).1.nu).collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((m - 10.0).abs() < 3.0 * sd / (n as f64).sqrt(), "{m}");
    }

    #[test]
    fn default_nu_means_are_moderate() {
        let spec = PriorSpec::default();
        for f in [MixingFamily::SkewT, MixingFamily::SkewSlash] {
            let e = spec.expected_nu(f).unwrap();
            assert!((2.0..=50.0).contains(&e), "{f:?}: {e}");
        }
        assert!(spec.validate().is_ok());
        let bad = PriorSpec {
            skew_t_rate: (0.5, 0.1),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
