//! Posterior sampling: chain initialisation, multi-chain runs and summaries.

pub mod diagnostics;
pub mod params;
mod sampler;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, dot};
use crate::model::{Dataset, JointParams, LatentState, RandomEffectsMode};
use crate::priors::{HyperState, PriorSpec, SKEW_T_NU_MIN, SLASH_NU_MIN};
use crate::sni::{MixingFamily, MixingSpec};

pub use diagnostics::{autocorr, ess, rhat};
pub use params::{parameter_names, parameter_values};
pub use sampler::{pooled_xtx, Block, Candidate, ChainState, Sampler, UpdatePlan, BLOCKS, N_BLOCKS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub n_chains: usize,
    pub burn_in: usize,
    pub iterations: usize,
    pub thin: usize,
    pub seed: u64,
    pub target_accept_scalar: f64,
    pub target_accept_block: f64,
    pub init_dispersion: f64,
    /// Proposals per sweep in each of the event and skewness blocks.
    pub block_moves: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_chains: 3,
            burn_in: 5000,
            iterations: 5000,
            thin: 1,
            seed: 1,
            target_accept_scalar: 0.44,
            target_accept_block: 0.234,
            init_dispersion: 0.1,
            block_moves: 10,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains < 1 || self.burn_in < 1 || self.iterations < 1 || self.thin < 1 {
            return Err(Error::Config("chain counts must all be at least 1".into()));
        }
        for (name, v) in [
            ("target_accept_scalar", self.target_accept_scalar),
            ("target_accept_block", self.target_accept_block),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(self.init_dispersion >= 0.0 && self.init_dispersion.is_finite()) {
            return Err(Error::Config("init_dispersion must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// The fitted model: a mixing family, or the symmetric normal baseline with
/// skewness fixed at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    Sn,
    St,
    Ssl,
    Scn,
    Jm,
}

impl ModelChoice {
    pub const ALL: [ModelChoice; 5] = [
        ModelChoice::Jm,
        ModelChoice::Sn,
        ModelChoice::St,
        ModelChoice::Ssl,
        ModelChoice::Scn,
    ];

    pub fn family(self) -> MixingFamily {
        match self {
            ModelChoice::Sn | ModelChoice::Jm => MixingFamily::SkewNormal,
            ModelChoice::St => MixingFamily::SkewT,
            ModelChoice::Ssl => MixingFamily::SkewSlash,
            ModelChoice::Scn => MixingFamily::SkewContaminated,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelChoice::Sn => "SN",
            ModelChoice::St => "ST",
            ModelChoice::Ssl => "SSL",
            ModelChoice::Scn => "SCN",
            ModelChoice::Jm => "JM",
        }
    }

    pub fn plan(self, mode: RandomEffectsMode) -> UpdatePlan {
        let plan = UpdatePlan::full(self.family(), mode);
        if self == ModelChoice::Jm {
            plan.pin_symmetric()
        } else {
            plan
        }
    }
}

impl std::str::FromStr for ModelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sn" => Ok(ModelChoice::Sn),
            "st" => Ok(ModelChoice::St),
            "ssl" => Ok(ModelChoice::Ssl),
            "scn" => Ok(ModelChoice::Scn),
            "jm" | "normal" => Ok(ModelChoice::Jm),
            other => Err(Error::Config(format!("unknown model `{other}` (expected sn, st, ssl, scn or jm)"))),
        }
    }
}

/// Summary of one parameter's pooled posterior draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    /// `None` when the traces are constant or there is a single chain.
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub params: Vec<ParamSummary>,
}

impl PosteriorSummary {
    pub fn get(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn max_rhat(&self) -> Option<f64> {
        self.params.iter().filter_map(|p| p.rhat).reduce(f64::max)
    }
}

/// Retained draws of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub model: ModelChoice,
    pub names: Vec<String>,
    /// `traces[chain][draw][param]`
    pub traces: Vec<Vec<Vec<f64>>>,
    pub summary: PosteriorSummary,
    /// Overall acceptance rate per block and chain; `None` for blocks that
    /// never ran.
    pub acceptance: Vec<Vec<Option<f64>>>,
}

impl Fit {
    /// Per-chain trace of one parameter.
    pub fn column(&self, name: &str) -> Option<Vec<Vec<f64>>> {
        let k = self.names.iter().position(|n| n == name)?;
        Some(self.traces.iter().map(|c| c.iter().map(|row| row[k]).collect()).collect())
    }
}

/// Everything a run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub model: ModelChoice,
    pub mode: RandomEffectsMode,
    pub prior: PriorSpec,
    pub mcmc: McmcConfig,
}

impl RunSpec {
    pub fn new(model: ModelChoice, mcmc: McmcConfig) -> Self {
        Self {
            model,
            mode: RandomEffectsMode::default(),
            prior: PriorSpec::default(),
            mcmc,
        }
    }
}

fn chain_rng(seed: u64, chain_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain_index as u64);
    rng
}

/// Moment-based starting point: OLS for `β`, mean uncensored log time for
/// `β₀`, and residual variances split evenly between noise and random
/// intercept.
pub fn initial_params(data: &Dataset, family: MixingFamily) -> Result<JointParams> {
    data.validate()?;
    let p = data.p();
    let xtx = pooled_xtx(data)?;
    let mut xty = vec![0.0; p];
    for s in &data.subjects {
        for j in 0..s.n() {
            for (a, x) in s.x_row(j).iter().enumerate() {
                xty[a] += x * s.y[j];
            }
        }
    }
    let chol = cholesky(&xtx)
        .map_err(|_| Error::DegenerateData("fixed-effects design is rank deficient".into()))?;
    let beta = chol.solve(&xty);
    let n_obs = data.n_observations() as f64;
    let rss: f64 = data
        .subjects
        .iter()
        .map(|s| s.marginal_residual(&beta).iter().map(|r| r * r).sum::<f64>())
        .sum();
    let resid_var = (rss / (n_obs - p as f64).max(1.0)).max(1e-3);

    let times: Vec<f64> = data
        .subjects
        .iter()
        .filter(|s| s.event_observed)
        .map(|s| s.log_event_time)
        .collect();
    if times.is_empty() {
        return Err(Error::DegenerateData("every event time is censored".into()));
    }
    let m = times.len() as f64;
    let beta0 = times.iter().sum::<f64>() / m;
    let sigma2_t = if times.len() > 1 {
        (times.iter().map(|t| (t - beta0).powi(2)).sum::<f64>() / (m - 1.0)).max(1e-2)
    } else {
        1.0
    };
    let mixing = match family {
        MixingFamily::SkewNormal => MixingSpec::skew_normal(),
        MixingFamily::SkewT => MixingSpec::skew_t(10.0),
        MixingFamily::SkewSlash => MixingSpec::skew_slash(10.0),
        MixingFamily::SkewContaminated => MixingSpec::skew_contaminated(0.5, 0.5),
    };
    Ok(JointParams {
        beta,
        beta0,
        sigma2_e: 0.5 * resid_var,
        sigma2_t,
        sigma2_cov: 0.0,
        omega1: 0.5 * resid_var,
        omega2: 0.0,
        lambda: [0.0; 2],
        nu_event: [0.0; 2],
        mixing,
    })
}

fn jitter(base: &JointParams, d: f64, pin_skew: bool, rng: &mut ChaCha8Rng) -> JointParams {
    let mut z = || -> f64 { StandardNormal.sample(rng) };
    let mut t = base.clone();
    for b in t.beta.iter_mut() {
        *b += d * b.abs().max(1.0) * z();
    }
    t.beta0 += d * t.beta0.abs().max(1.0) * z();
    t.nu_event[0] += d * z();
    t.nu_event[1] += d * z();
    t.sigma2_e *= (d * z()).exp();
    t.sigma2_t *= (d * z()).exp();
    t.sigma2_cov += d * 0.1 * z();
    t.omega1 *= (d * z()).exp();
    t.omega2 = t.omega1 * (d * z()).tanh();
    if !pin_skew {
        t.lambda = [t.lambda[0] + d * z(), t.lambda[1] + d * z()];
    }
    match t.mixing.family {
        MixingFamily::SkewNormal => {}
        MixingFamily::SkewT => t.mixing.nu = SKEW_T_NU_MIN + (t.mixing.nu - SKEW_T_NU_MIN) * (d * z()).exp(),
        MixingFamily::SkewSlash => t.mixing.nu = SLASH_NU_MIN + (t.mixing.nu - SLASH_NU_MIN) * (d * z()).exp(),
        MixingFamily::SkewContaminated => {
            let logit = |x: f64| (x / (1.0 - x)).ln();
            let expit = |x: f64| 1.0 / (1.0 + (-x).exp());
            t.mixing.contam_weight = expit(logit(t.mixing.contam_weight) + d * z());
            t.mixing.contam_scale = expit(logit(t.mixing.contam_scale) + d * z());
        }
    }
    t
}

fn initial_hyper(theta: &JointParams, prior: &PriorSpec) -> HyperState {
    let (excess, (lo, hi)) = match theta.mixing.family {
        MixingFamily::SkewT => (theta.mixing.nu - SKEW_T_NU_MIN, prior.skew_t_rate),
        MixingFamily::SkewSlash => (theta.mixing.nu - SLASH_NU_MIN, prior.skew_slash_rate),
        _ => return HyperState { lambda0: 1.0 },
    };
    // rate matching the starting excess, kept strictly inside the bounds
    let mid = 0.5 * (lo + hi);
    let r = if excess > 0.0 { 1.0 / excess } else { mid };
    let margin = 1e-3 * (hi - lo);
    HyperState {
        lambda0: r.clamp(lo + margin, hi - margin),
    }
}

/// Starting state of chain `chain_index`: the moment estimate (or `hint`)
/// jittered by `init_dispersion`, with `b = 0`, `u = 1`.
pub fn init_chain(
    sampler: &Sampler<'_>,
    model: ModelChoice,
    hint: Option<&JointParams>,
    chain_index: usize,
) -> Result<ChainState> {
    let base = match hint {
        Some(h) => {
            let mut h = h.clone();
            if model == ModelChoice::Jm {
                h.lambda = [0.0; 2];
            }
            h
        }
        None => initial_params(sampler.data, model.family())?,
    };
    if base.mixing.family != model.family() {
        return Err(Error::Config(format!(
            "starting values use the {:?} family but the model is {}",
            base.mixing.family,
            model.name()
        )));
    }
    let m = sampler.data.subjects.len();
    let mut latent = LatentState::neutral(m);
    if model == ModelChoice::Jm {
        latent.t_aug = vec![0.0; m];
    }
    let d = sampler.cfg.init_dispersion;
    let mut rng = chain_rng(sampler.cfg.seed ^ 0x9e37_79b9_7f4a_7c15, chain_index);
    let mut last_err = None;
    for attempt in 0..100 {
        let theta = if d == 0.0 || attempt == 99 {
            base.clone()
        } else {
            jitter(&base, d, model == ModelChoice::Jm, &mut rng)
        };
        let hyper = initial_hyper(&theta, sampler.prior);
        match sampler.state_at(theta, hyper, latent.clone()) {
            Ok(st) => return Ok(st),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

fn run_chain(
    sampler: &Sampler<'_>,
    model: ModelChoice,
    hint: Option<&JointParams>,
    chain_index: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Option<f64>>)> {
    let cfg = sampler.cfg;
    let mut st = init_chain(sampler, model, hint, chain_index)?;
    let mut rng = chain_rng(cfg.seed, chain_index);
    let mut draws = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.burn_in {
        sampler.step(&mut st, &mut rng);
        sampler.adapt(&mut st);
    }
    for it in 0..cfg.iterations * cfg.thin {
        sampler.step(&mut st, &mut rng);
        if (it + 1) % cfg.thin == 0 {
            draws.push(parameter_values(&st.theta));
        }
    }
    Ok((draws, st.acceptance_rates()))
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pooled summaries of `traces[chain][draw][param]`.
pub fn summarize(names: &[String], traces: &[Vec<Vec<f64>>]) -> PosteriorSummary {
    let params = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let chains: Vec<Vec<f64>> = traces.iter().map(|c| c.iter().map(|r| r[k]).collect()).collect();
            let mut pooled: Vec<f64> = chains.iter().flatten().copied().collect();
            let n = pooled.len() as f64;
            let mean = pooled.iter().sum::<f64>() / n;
            let sd = if pooled.len() > 1 {
                (pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            pooled.sort_by(|a, b| a.total_cmp(b));
            ParamSummary {
                name: name.clone(),
                mean,
                sd,
                lower: quantile(&pooled, 0.025),
                upper: quantile(&pooled, 0.975),
                rhat: rhat(&chains).ok(),
                ess: ess(&chains).ok(),
            }
        })
        .collect();
    PosteriorSummary { params }
}

/// Runs every chain of `spec` on `data` in parallel.
pub fn run(data: &Dataset, spec: &RunSpec, hint: Option<&JointParams>) -> Result<Fit> {
    spec.mcmc.validate()?;
    let plan = spec.model.plan(spec.mode);
    let sampler = Sampler::new(data, &spec.prior, &spec.mcmc, spec.mode, plan)?;
    let results: Vec<Result<(Vec<Vec<f64>>, Vec<Option<f64>>)>> = (0..spec.mcmc.n_chains)
        .into_par_iter()
        .map(|c| run_chain(&sampler, spec.model, hint, c))
        .collect();
    let mut traces = Vec::with_capacity(results.len());
    let mut acceptance = Vec::with_capacity(results.len());
    for r in results {
        let (t, a) = r?;
        traces.push(t);
        acceptance.push(a);
    }
    let names = parameter_names(&data.fixed_names, spec.model.family());
    let summary = summarize(&names, &traces);
    Ok(Fit {
        model: spec.model,
        names,
        traces,
        summary,
        acceptance,
    })
}

/// Posterior-mean fitted longitudinal value `xᵀβ` for each observation,
/// used for simple residual diagnostics.
pub fn fitted_means(data: &Dataset, beta: &[f64]) -> Vec<Vec<f64>> {
    data.subjects
        .iter()
        .map(|s| (0..s.n()).map(|j| dot(s.x_row(j), beta)).collect())
        .collect()
}
