//! Metropolis-within-Gibbs sweeps over parameters and latent variables.
//!
//! The chain keeps every per-subject log-likelihood term cached, so an update
//! only recomputes the terms its parameter touches. The skewness is moved in
//! `Δ` coordinates: `λ` is derived from `(Ω₁, Ω₂, Δ)` after every change.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, LowerTriangular, SymMatrix};
use crate::mcmc::McmcConfig;
use crate::model::{
    event_from_terms, longitudinal_from_residual, CovarianceTerms, Dataset, DesignGroups, JointParams,
    LatentState, RandomEffectsLaw, RandomEffectsMode, Q,
};
use crate::priors::{log_prior, HyperState, PriorSpec, SKEW_T_NU_MIN};
use crate::sni::{MixingFamily, MixingSpec};

/// Update blocks of one sweep, in sweep order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Beta,
    Beta0,
    Nu1,
    Nu2,
    Sigma2E,
    Sigma2T,
    Omega1,
    Omega2,
    Sigma2Cov,
    Delta1,
    Delta2,
    RandomEffects,
    Augmentation,
    Mixing,
    MixNu,
    MixWeight,
    MixScale,
    Lambda0,
    Event,
    Skewness,
}

pub const N_BLOCKS: usize = 20;

pub const BLOCKS: [Block; N_BLOCKS] = [
    Block::Beta,
    Block::Beta0,
    Block::Nu1,
    Block::Nu2,
    Block::Sigma2E,
    Block::Sigma2T,
    Block::Omega1,
    Block::Omega2,
    Block::Sigma2Cov,
    Block::Delta1,
    Block::Delta2,
    Block::RandomEffects,
    Block::Augmentation,
    Block::Mixing,
    Block::MixNu,
    Block::MixWeight,
    Block::MixScale,
    Block::Lambda0,
    Block::Event,
    Block::Skewness,
];

impl Block {
    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    /// Multivariate random-walk blocks adapt toward the lower target.
    pub fn is_multivariate(self) -> bool {
        matches!(self, Block::Beta | Block::RandomEffects | Block::Event | Block::Skewness)
    }

    fn initial_scale(self) -> f64 {
        match self {
            Block::Beta => 0.5,
            Block::RandomEffects => 1.0,
            Block::Augmentation | Block::Mixing => 0.5,
            Block::MixNu | Block::MixWeight | Block::MixScale => 0.3,
            Block::Lambda0 | Block::Event | Block::Skewness => 1.0,
            Block::Omega2 | Block::Sigma2Cov => 0.05,
            _ => 0.1,
        }
    }
}

/// Which blocks a sweep updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdatePlan {
    pub enabled: Vec<bool>,
}

impl UpdatePlan {
    /// Every block that exists for the mixing family and random-effects mode.
    pub fn full(family: MixingFamily, mode: RandomEffectsMode) -> Self {
        let enabled = BLOCKS
            .iter()
            .map(|b| match b {
                Block::Augmentation => mode == RandomEffectsMode::Augmented,
                Block::Mixing => family != MixingFamily::SkewNormal,
                Block::MixNu | Block::Lambda0 => {
                    matches!(family, MixingFamily::SkewT | MixingFamily::SkewSlash)
                }
                Block::MixWeight | Block::MixScale => family == MixingFamily::SkewContaminated,
                _ => true,
            })
            .collect();
        Self { enabled }
    }

    /// Symmetric baseline: skewness pinned at zero.
    pub fn pin_symmetric(mut self) -> Self {
        for b in [Block::Delta1, Block::Delta2, Block::Augmentation] {
            self.enabled[b.index()] = false;
        }
        self
    }

    pub fn only(blocks: &[Block]) -> Self {
        let mut enabled = vec![false; N_BLOCKS];
        for b in blocks {
            enabled[b.index()] = true;
        }
        Self { enabled }
    }

    #[inline]
    pub fn has(&self, b: Block) -> bool {
        self.enabled[b.index()]
    }
}

/// Transformed coordinates of the adaptive blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Coord {
    Beta0,
    Nu(usize),
    /// `log(σ²_T - q σ⁴_cov)` for a fixed `q`: the smallest conditional
    /// event variance when `q` is the largest `1ᵀψ⁻¹1`.
    LogSlack(f64),
    Sigma2Cov,
    LogOmega1,
    AtanhRho,
    Delta(usize),
    /// `atanh(δ/s)` for the shared component of `Δ = δ·1`, where
    /// `s² = (Ω₁ + Ω₂)/2` bounds `δ²`.
    AtanhSkew,
}

const AM_REFRESH: usize = 50;
const AM_MIN_DRAWS: usize = 200;
const AM_INITIAL_SD: f64 = 0.02;

/// Running moments of a block's coordinates over burn-in and the Cholesky
/// factor of their covariance used as the proposal shape.
#[derive(Debug, Clone)]
struct AdaptiveProposal {
    n: usize,
    mean: Vec<f64>,
    /// Sum of outer products of deviations, row-major.
    scatter: Vec<f64>,
    chol: Vec<f64>,
}

impl AdaptiveProposal {
    fn new(d: usize) -> Self {
        let mut chol = vec![0.0; d * d];
        for i in 0..d {
            chol[i * d + i] = AM_INITIAL_SD;
        }
        Self {
            n: 0,
            mean: vec![0.0; d],
            scatter: vec![0.0; d * d],
            chol,
        }
    }

    fn observe(&mut self, x: &[f64]) {
        let d = x.len();
        self.n += 1;
        let n = self.n as f64;
        let dev: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, e) in self.mean.iter_mut().zip(&dev) {
            *m += e / n;
        }
        // Welford update of the scatter matrix
        for i in 0..d {
            for j in 0..d {
                self.scatter[i * d + j] += dev[i] * (x[j] - self.mean[j]);
            }
        }
    }

    fn refresh(&mut self) {
        let d = self.mean.len();
        let n = self.n as f64;
        let cov = SymMatrix::from_lower_fn(d, |i, j| {
            let v = 0.5 * (self.scatter[i * d + j] + self.scatter[j * d + i]) / (n - 1.0);
            if i == j {
                v + 1e-10
            } else {
                v
            }
        });
        if let Ok(l) = cholesky(&cov) {
            for i in 0..d {
                for j in 0..d {
                    self.chol[i * d + j] = if j <= i { l.get(i, j) } else { 0.0 };
                }
            }
        }
    }

    fn draw(&self, z: &[f64]) -> Vec<f64> {
        let d = z.len();
        (0..d).map(|i| (0..=i).map(|j| self.chol[i * d + j] * z[j]).sum()).collect()
    }
}

/// Per-subject log-likelihood terms for the current state.
#[derive(Debug, Clone)]
struct Cache {
    terms: Vec<CovarianceTerms>,
    re_law: RandomEffectsLaw,
    resid: Vec<Vec<f64>>,
    long: Vec<f64>,
    event: Vec<f64>,
    re: Vec<f64>,
    mix: Vec<f64>,
    log_prior: f64,
}

#[derive(Debug, Clone)]
pub struct ChainState {
    pub theta: JointParams,
    pub delta: [f64; Q],
    pub hyper: HyperState,
    pub latent: LatentState,
    pub step_scales: Vec<f64>,
    pub accept_counts: Vec<u64>,
    pub proposal_counts: Vec<u64>,
    pub iteration: usize,
    sweep_accepts: Vec<u64>,
    sweep_tries: Vec<u64>,
    cache: Cache,
    am_event: AdaptiveProposal,
    am_skew: AdaptiveProposal,
}

impl ChainState {
    /// Cached log posterior (complete-data log-likelihood plus log prior).
    pub fn log_target(&self) -> f64 {
        let c = &self.cache;
        c.long.iter().sum::<f64>()
            + c.event.iter().sum::<f64>()
            + c.re.iter().sum::<f64>()
            + c.mix.iter().sum::<f64>()
            + c.log_prior
    }

    /// Acceptance rate per block over the whole run so far.
    pub fn acceptance_rates(&self) -> Vec<Option<f64>> {
        self.accept_counts
            .iter()
            .zip(&self.proposal_counts)
            .map(|(&a, &n)| if n > 0 { Some(a as f64 / n as f64) } else { None })
            .collect()
    }

    /// Acceptance rate of each block during the most recent sweep.
    pub fn last_sweep_rates(&self) -> Vec<Option<f64>> {
        self.sweep_accepts
            .iter()
            .zip(&self.sweep_tries)
            .map(|(&a, &n)| if n > 0 { Some(a as f64 / n as f64) } else { None })
            .collect()
    }

    fn record(&mut self, block: Block, accepted: bool) {
        let i = block.index();
        self.sweep_tries[i] += 1;
        self.proposal_counts[i] += 1;
        if accepted {
            self.sweep_accepts[i] += 1;
            self.accept_counts[i] += 1;
        }
    }
}

/// What a global proposal changes.
#[derive(Debug, Clone, Copy, Default)]
struct Touches {
    resid: bool,
    cov: bool,
    long: bool,
    event: bool,
    re: bool,
    mix: bool,
}

/// A proposed global state and its recomputed terms.
pub struct Candidate {
    theta: JointParams,
    delta: [f64; Q],
    hyper: HyperState,
    terms: Option<Vec<CovarianceTerms>>,
    re_law: Option<RandomEffectsLaw>,
    resid: Option<Vec<Vec<f64>>>,
    long: Option<Vec<f64>>,
    event: Option<Vec<f64>>,
    re: Option<Vec<f64>>,
    mix: Option<Vec<f64>>,
    log_prior: f64,
    /// Change in log posterior relative to the current state.
    pub log_ratio: f64,
}

/// Immutable context shared by all chains of a run.
pub struct Sampler<'a> {
    pub data: &'a Dataset,
    pub prior: &'a PriorSpec,
    pub cfg: &'a McmcConfig,
    pub mode: RandomEffectsMode,
    pub plan: UpdatePlan,
    groups: DesignGroups,
    beta_chol: LowerTriangular,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Standard normal restricted to `z >= a` (exponential proposal for `a > 0`).
fn positive_normal_tail<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    if a <= 0.0 {
        loop {
            let z = normal(rng);
            if z >= a {
                return z;
            }
        }
    }
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let e: f64 = rng.random::<f64>();
        let z = a - (1.0 - e).ln() / rate;
        let v: f64 = rng.random();
        if v <= (-0.5 * (z - rate) * (z - rate)).exp() {
            return z;
        }
    }
}

fn logit(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn accept<R: Rng + ?Sized>(log_alpha: f64, rng: &mut R) -> bool {
    log_alpha >= 0.0 || rng.random::<f64>().ln() < log_alpha
}

/// Pooled `(XᵀX)^{-1}` of the longitudinal design.
pub fn pooled_xtx(data: &Dataset) -> Result<SymMatrix> {
    let p = data.p();
    let mut xtx = vec![0.0; p * p];
    for s in &data.subjects {
        for j in 0..s.n() {
            let row = s.x_row(j);
            for a in 0..p {
                for b in 0..p {
                    xtx[a * p + b] += row[a] * row[b];
                }
            }
        }
    }
    Ok(SymMatrix::from_lower_fn(p, |i, j| xtx[i * p + j]))
}

impl<'a> Sampler<'a> {
    pub fn new(
        data: &'a Dataset,
        prior: &'a PriorSpec,
        cfg: &'a McmcConfig,
        mode: RandomEffectsMode,
        plan: UpdatePlan,
    ) -> Result<Self> {
        data.validate()?;
        prior.validate()?;
        let xtx = pooled_xtx(data)?;
        let chol = cholesky(&xtx).map_err(|_| {
            Error::DegenerateData("fixed-effects design is rank deficient".into())
        })?;
        let beta_chol = cholesky(&chol.inverse())?;
        Ok(Self {
            data,
            prior,
            cfg,
            mode,
            plan,
            groups: DesignGroups::new(&data.subjects),
            beta_chol,
        })
    }

    fn n(&self) -> usize {
        self.data.subjects.len()
    }

    /// Builds a chain at the given parameters and latent state, computing
    /// every cached term from scratch.
    pub fn state_at(
        &self,
        theta: JointParams,
        hyper: HyperState,
        latent: LatentState,
    ) -> Result<ChainState> {
        let mut theta = theta;
        let mut delta = theta.delta()?;
        if self.prior.common_skewness {
            let d = 0.5 * (delta[0] + delta[1]);
            delta = [d, d];
            theta.lambda = JointParams::lambda_from_delta(theta.omega1, theta.omega2, delta)?;
        }
        self.build(theta, delta, hyper, latent)
    }

    fn build(&self, theta: JointParams, delta: [f64; Q], hyper: HyperState, latent: LatentState) -> Result<ChainState> {
        theta.validate()?;
        if latent.len() != self.n() {
            return Err(Error::Dimension("latent state does not match the data".into()));
        }
        let subjects = &self.data.subjects;
        let terms = self.groups.terms(subjects, &theta)?;
        let re_law = RandomEffectsLaw::new(&theta, self.mode)?;
        let resid: Vec<Vec<f64>> = subjects.iter().map(|s| s.marginal_residual(&theta.beta)).collect();
        let mut long = Vec::with_capacity(self.n());
        let mut event = Vec::with_capacity(self.n());
        let mut re = Vec::with_capacity(self.n());
        let mut mix = Vec::with_capacity(self.n());
        for (i, s) in subjects.iter().enumerate() {
            let (b, u, t) = (latent.b[i], latent.u[i], latent.t_aug[i]);
            long.push(longitudinal_from_residual(&resid[i], &s.z1, theta.sigma2_e, b, u));
            event.push(event_from_terms(
                &terms[self.groups.group_of[i]],
                &theta,
                &resid[i],
                b,
                u,
                s.log_event_time,
                s.event_observed,
            )?);
            re.push(re_law.logpdf(b, u, t));
            mix.push(theta.mixing.logpdf(u)?);
        }
        let log_prior = log_prior(&theta, &hyper, self.prior)?;
        let mut state = ChainState {
            theta,
            delta,
            hyper,
            latent,
            step_scales: BLOCKS.iter().map(|b| b.initial_scale()).collect(),
            accept_counts: vec![0; N_BLOCKS],
            proposal_counts: vec![0; N_BLOCKS],
            iteration: 0,
            sweep_accepts: vec![0; N_BLOCKS],
            sweep_tries: vec![0; N_BLOCKS],
            cache: Cache {
                terms,
                re_law,
                resid,
                long,
                event,
                re,
                mix,
                log_prior,
            },
            am_event: AdaptiveProposal::new(0),
            am_skew: AdaptiveProposal::new(self.skew_coords().len()),
        };
        state.am_event = AdaptiveProposal::new(self.event_coords(&state).len());
        if !state.log_target().is_finite() {
            return Err(Error::NumericalUnderflow("initial log posterior is not finite".into()));
        }
        Ok(state)
    }

    /// Evaluates a global proposal against the current state.
    pub fn evaluate(
        &self,
        st: &ChainState,
        theta: JointParams,
        delta: [f64; Q],
        hyper: HyperState,
    ) -> Result<Candidate> {
        let cur = &st.theta;
        let t = Touches {
            resid: theta.beta != cur.beta,
            cov: theta.sigma2_e != cur.sigma2_e
                || theta.sigma2_t != cur.sigma2_t
                || theta.sigma2_cov != cur.sigma2_cov
                || theta.omega1 != cur.omega1
                || theta.omega2 != cur.omega2
                || theta.lambda != cur.lambda,
            long: theta.beta != cur.beta || theta.sigma2_e != cur.sigma2_e,
            event: theta.beta != cur.beta
                || theta.beta0 != cur.beta0
                || theta.nu_event != cur.nu_event,
            re: theta.omega1 != cur.omega1
                || theta.omega2 != cur.omega2
                || theta.lambda != cur.lambda
                || theta.mixing != cur.mixing,
            mix: theta.mixing != cur.mixing,
        };
        self.evaluate_touching(st, theta, delta, hyper, t)
    }

    fn evaluate_touching(
        &self,
        st: &ChainState,
        theta: JointParams,
        delta: [f64; Q],
        hyper: HyperState,
        t: Touches,
    ) -> Result<Candidate> {
        theta.validate()?;
        let subjects = &self.data.subjects;
        let c = &st.cache;
        let lat = &st.latent;
        let log_prior = log_prior(&theta, &hyper, self.prior)?;
        let mut log_ratio = log_prior - c.log_prior;

        let resid = if t.resid {
            Some(subjects.iter().map(|s| s.marginal_residual(&theta.beta)).collect::<Vec<_>>())
        } else {
            None
        };
        let resid_ref = resid.as_ref().unwrap_or(&c.resid);
        let terms = if t.cov {
            Some(self.groups.terms(subjects, &theta)?)
        } else {
            None
        };
        let terms_ref = terms.as_ref().unwrap_or(&c.terms);

        let long = if t.long {
            let v: Vec<f64> = subjects
                .iter()
                .enumerate()
                .map(|(i, s)| longitudinal_from_residual(&resid_ref[i], &s.z1, theta.sigma2_e, lat.b[i], lat.u[i]))
                .collect();
            log_ratio += v.iter().sum::<f64>() - c.long.iter().sum::<f64>();
            Some(v)
        } else {
            None
        };
        let event = if t.event || t.cov {
            let mut v = Vec::with_capacity(subjects.len());
            for (i, s) in subjects.iter().enumerate() {
                v.push(event_from_terms(
                    &terms_ref[self.groups.group_of[i]],
                    &theta,
                    &resid_ref[i],
                    lat.b[i],
                    lat.u[i],
                    s.log_event_time,
                    s.event_observed,
                )?);
            }
            log_ratio += v.iter().sum::<f64>() - c.event.iter().sum::<f64>();
            Some(v)
        } else {
            None
        };
        let (re_law, re) = if t.re {
            let law = RandomEffectsLaw::new(&theta, self.mode)?;
            let v: Vec<f64> = (0..subjects.len())
                .map(|i| law.logpdf(lat.b[i], lat.u[i], lat.t_aug[i]))
                .collect();
            log_ratio += v.iter().sum::<f64>() - c.re.iter().sum::<f64>();
            (Some(law), Some(v))
        } else {
            (None, None)
        };
        let mix = if t.mix {
            let mut v = Vec::with_capacity(subjects.len());
            for &u in &lat.u {
                v.push(theta.mixing.logpdf(u)?);
            }
            log_ratio += v.iter().sum::<f64>() - c.mix.iter().sum::<f64>();
            Some(v)
        } else {
            None
        };
        if log_ratio.is_nan() {
            return Err(Error::NumericalUnderflow("log acceptance ratio is not a number".into()));
        }
        Ok(Candidate {
            theta,
            delta,
            hyper,
            terms,
            re_law,
            resid,
            long,
            event,
            re,
            mix,
            log_prior,
            log_ratio,
        })
    }

    fn commit(st: &mut ChainState, cand: Candidate) {
        st.theta = cand.theta;
        st.delta = cand.delta;
        st.hyper = cand.hyper;
        st.cache.log_prior = cand.log_prior;
        if let Some(v) = cand.terms {
            st.cache.terms = v;
        }
        if let Some(v) = cand.re_law {
            st.cache.re_law = v;
        }
        if let Some(v) = cand.resid {
            st.cache.resid = v;
        }
        if let Some(v) = cand.long {
            st.cache.long = v;
        }
        if let Some(v) = cand.event {
            st.cache.event = v;
        }
        if let Some(v) = cand.re {
            st.cache.re = v;
        }
        if let Some(v) = cand.mix {
            st.cache.mix = v;
        }
    }

    /// Metropolis–Hastings step for a global proposal; `log_jacobian` is the
    /// log proposal correction for transformed random walks.
    fn try_global<R: Rng + ?Sized>(
        &self,
        st: &mut ChainState,
        block: Block,
        theta: JointParams,
        delta: [f64; Q],
        hyper: HyperState,
        log_jacobian: f64,
        rng: &mut R,
    ) {
        let accepted = match self.evaluate(st, theta, delta, hyper) {
            Ok(cand) => {
                if accept(cand.log_ratio + log_jacobian, rng) {
                    Self::commit(st, cand);
                    true
                } else {
                    false
                }
            }
            Err(_) => false,
        };
        st.record(block, accepted);
    }

    /// `θ` with `λ` re-derived from the current `Δ` under new `(Ω₁, Ω₂)`.
    fn with_covariance(st: &ChainState, omega1: f64, omega2: f64) -> Option<JointParams> {
        let lambda = JointParams::lambda_from_delta(omega1, omega2, st.delta).ok()?;
        Some(JointParams {
            omega1,
            omega2,
            lambda,
            ..st.theta.clone()
        })
    }

    /// One full sweep over every enabled block.
    pub fn step<R: Rng + ?Sized>(&self, st: &mut ChainState, rng: &mut R) {
        st.sweep_accepts.iter_mut().for_each(|v| *v = 0);
        st.sweep_tries.iter_mut().for_each(|v| *v = 0);
        let plan = &self.plan;
        let scale = |st: &ChainState, b: Block| st.step_scales[b.index()];

        if plan.has(Block::Beta) {
            let p = st.theta.beta.len();
            let z: Vec<f64> = (0..p).map(|_| normal(rng)).collect();
            let step = self.beta_chol.mul_vec(&z);
            let s = scale(st, Block::Beta) * st.theta.sigma2_e.sqrt();
            let mut th = st.theta.clone();
            for (b, d) in th.beta.iter_mut().zip(step) {
                *b += s * d;
            }
            self.try_global(st, Block::Beta, th, st.delta, st.hyper, 0.0, rng);
        }
        for (block, k) in [(Block::Beta0, 0usize), (Block::Nu1, 1), (Block::Nu2, 2)] {
            if plan.has(block) {
                let mut th = st.theta.clone();
                let e = scale(st, block) * normal(rng);
                match k {
                    0 => th.beta0 += e,
                    1 => th.nu_event[0] += e,
                    _ => th.nu_event[1] += e,
                }
                self.try_global(st, block, th, st.delta, st.hyper, 0.0, rng);
            }
        }
        for block in [Block::Sigma2E, Block::Sigma2T] {
            if plan.has(block) {
                let e = scale(st, block) * normal(rng);
                let mut th = st.theta.clone();
                match block {
                    Block::Sigma2E => th.sigma2_e *= e.exp(),
                    _ => th.sigma2_t *= e.exp(),
                }
                self.try_global(st, block, th, st.delta, st.hyper, e, rng);
            }
        }
        if plan.has(Block::Omega1) {
            let e = scale(st, Block::Omega1) * normal(rng);
            match Self::with_covariance(st, st.theta.omega1 * e.exp(), st.theta.omega2) {
                Some(th) => self.try_global(st, Block::Omega1, th, st.delta, st.hyper, e, rng),
                None => st.record(Block::Omega1, false),
            }
        }
        if plan.has(Block::Omega2) {
            let o2 = st.theta.omega2 + scale(st, Block::Omega2) * normal(rng);
            match Self::with_covariance(st, st.theta.omega1, o2) {
                Some(th) => self.try_global(st, Block::Omega2, th, st.delta, st.hyper, 0.0, rng),
                None => st.record(Block::Omega2, false),
            }
        }
        if plan.has(Block::Sigma2Cov) {
            let th = JointParams {
                sigma2_cov: st.theta.sigma2_cov + scale(st, Block::Sigma2Cov) * normal(rng),
                ..st.theta.clone()
            };
            self.try_global(st, Block::Sigma2Cov, th, st.delta, st.hyper, 0.0, rng);
        }
        let tied = self.prior.common_skewness;
        for (block, k) in [(Block::Delta1, 0usize), (Block::Delta2, 1)] {
            if plan.has(block) && !(tied && k == 1) {
                let mut delta = st.delta;
                delta[k] += scale(st, block) * normal(rng);
                if tied {
                    delta[1] = delta[0];
                }
                match JointParams::lambda_from_delta(st.theta.omega1, st.theta.omega2, delta) {
                    Ok(lambda) => {
                        let th = JointParams {
                            lambda,
                            ..st.theta.clone()
                        };
                        self.try_global(st, block, th, delta, st.hyper, 0.0, rng);
                    }
                    Err(_) => st.record(block, false),
                }
            }
        }
        if plan.has(Block::Event) {
            for _ in 0..self.cfg.block_moves {
                self.update_event(st, rng);
            }
        }
        if plan.has(Block::Skewness) {
            for _ in 0..self.cfg.block_moves {
                self.update_skewness(st, rng);
            }
            // the collapsed moves discard `t`; redraw it before anything else
            if self.mode == RandomEffectsMode::Augmented && plan.has(Block::Augmentation) {
                self.update_augmentation(st, rng);
            }
        }
        if plan.has(Block::RandomEffects) {
            self.update_random_effects(st, rng);
        }
        if plan.has(Block::Augmentation) && self.mode == RandomEffectsMode::Augmented {
            self.update_augmentation(st, rng);
        }
        if plan.has(Block::Mixing) {
            self.update_mixing_variables(st, rng);
        }
        self.update_mixing_parameters(st, rng);
        st.iteration += 1;
    }

    fn update_random_effects<R: Rng + ?Sized>(&self, st: &mut ChainState, rng: &mut R) {
        let th = st.theta.clone();
        let d_inv = {
            let det = th.omega1 * th.omega1 - th.omega2 * th.omega2;
            [th.omega1 / det, -th.omega2 / det, th.omega1 / det]
        };
        let s = st.step_scales[Block::RandomEffects.index()];
        for (i, subj) in self.data.subjects.iter().enumerate() {
            let u = st.latent.u[i];
            // proposal shape (ZᵀZ/σ²_e + D^{-1})^{-1}/u
            let mut prec = d_inv;
            for z in &subj.z1 {
                prec[0] += z[0] * z[0] / th.sigma2_e;
                prec[1] += z[0] * z[1] / th.sigma2_e;
                prec[2] += z[1] * z[1] / th.sigma2_e;
            }
            let det = prec[0] * prec[2] - prec[1] * prec[1];
            let cov = [prec[2] / det / u, -prec[1] / det / u, prec[0] / det / u];
            let l00 = cov[0].sqrt();
            let l10 = cov[1] / l00;
            let l11 = (cov[2] - l10 * l10).max(0.0).sqrt();
            let (z0, z1) = (normal(rng), normal(rng));
            let b = st.latent.b[i];
            let nb = [b[0] + s * l00 * z0, b[1] + s * (l10 * z0 + l11 * z1)];
            let c = &st.cache;
            let long = longitudinal_from_residual(&c.resid[i], &subj.z1, th.sigma2_e, nb, u);
            let event = event_from_terms(
                &c.terms[self.groups.group_of[i]],
                &th,
                &c.resid[i],
                nb,
                u,
                subj.log_event_time,
                subj.event_observed,
            );
            let accepted = match event {
                Ok(event) => {
                    let re = c.re_law.logpdf(nb, u, st.latent.t_aug[i]);
                    let ratio = long + event + re - c.long[i] - c.event[i] - c.re[i];
                    if !ratio.is_nan() && accept(ratio, rng) {
                        st.latent.b[i] = nb;
                        st.cache.long[i] = long;
                        st.cache.event[i] = event;
                        st.cache.re[i] = re;
                        true
                    } else {
                        false
                    }
                }
                Err(_) => false,
            };
            st.record(Block::RandomEffects, accepted);
        }
    }

    /// Exact Gibbs draw of each `t` from its truncated-normal conditional.
    fn update_augmentation<R: Rng + ?Sized>(&self, st: &mut ChainState, rng: &mut R) {
        for i in 0..self.n() {
            let (b, u) = (st.latent.b[i], st.latent.u[i]);
            let (m, s) = st.cache.re_law.t_conditional(b, u);
            let nt = s * positive_normal_tail(-m / s, rng) + m;
            let re = st.cache.re_law.logpdf(b, u, nt);
            let accepted = nt >= 0.0 && re.is_finite();
            if accepted {
                st.latent.t_aug[i] = nt;
                st.cache.re[i] = re;
            }
            st.record(Block::Augmentation, accepted);
        }
    }

    /// All terms of subject `i` at mixing value `u`.
    fn subject_terms_at_u(&self, st: &ChainState, i: usize, u: f64) -> Result<[f64; 4]> {
        let subj = &self.data.subjects[i];
        let c = &st.cache;
        let th = &st.theta;
        let b = st.latent.b[i];
        Ok([
            longitudinal_from_residual(&c.resid[i], &subj.z1, th.sigma2_e, b, u),
            event_from_terms(
                &c.terms[self.groups.group_of[i]],
                th,
                &c.resid[i],
                b,
                u,
                subj.log_event_time,
                subj.event_observed,
            )?,
            c.re_law.logpdf(b, u, st.latent.t_aug[i]),
            th.mixing.logpdf(u)?,
        ])
    }

    fn set_subject_terms(st: &mut ChainState, i: usize, u: f64, v: [f64; 4]) {
        st.latent.u[i] = u;
        st.cache.long[i] = v[0];
        st.cache.event[i] = v[1];
        st.cache.re[i] = v[2];
        st.cache.mix[i] = v[3];
    }

    /// Exact full-conditional probability that subject `i` sits at the
    /// contaminated scale.
    pub fn contamination_probability(&self, st: &ChainState, i: usize) -> Result<f64> {
        let mix = st.theta.mixing;
        let lo: f64 = self.subject_terms_at_u(st, i, mix.contam_scale)?.iter().sum();
        let hi: f64 = self.subject_terms_at_u(st, i, 1.0)?.iter().sum();
        Ok(1.0 / (1.0 + (hi - lo).exp()))
    }

    fn update_mixing_variables<R: Rng + ?Sized>(&self, st: &mut ChainState, rng: &mut R) {
        let family = st.theta.mixing.family;
        match family {
            MixingFamily::SkewNormal => {}
            MixingFamily::SkewContaminated => {
                let scale = st.theta.mixing.contam_scale;
                for i in 0..self.n() {
                    let lo = self.subject_terms_at_u(st, i, scale);
                    let hi = self.subject_terms_at_u(st, i, 1.0);
                    if let (Ok(lo), Ok(hi)) = (lo, hi) {
                        let p = 1.0 / (1.0 + (hi.iter().sum::<f64>() - lo.iter().sum::<f64>()).exp());
                        if rng.random::<f64>() < p {
                            Self::set_subject_terms(st, i, scale, lo);
                        } else {
                            Self::set_subject_terms(st, i, 1.0, hi);
                        }
                    }
                    st.record(Block::Mixing, true);
                }
            }
            MixingFamily::SkewT | MixingFamily::SkewSlash => {
                let s = st.step_scales[Block::Mixing.index()];
                for i in 0..self.n() {
                    let u = st.latent.u[i];
                    let e = s * normal(rng);
                    let nu = u * e.exp();
                    let accepted = match self.subject_terms_at_u(st, i, nu) {
                        Ok(v) if nu > 0.0 && nu.is_finite() => {
                            let c = &st.cache;
                            let ratio = v.iter().sum::<f64>() - c.long[i] - c.event[i] - c.re[i] - c.mix[i] + e;
                            if !ratio.is_nan() && accept(ratio, rng) {
                                Self::set_subject_terms(st, i, nu, v);
                                true
                            } else {
                                false
                            }
                        }
                        _ => false,
                    };
                    st.record(Block::Mixing, accepted);
                }
            }
        }
    }

    fn update_mixing_parameters<R: Rng + ?Sized>(&self, st: &mut ChainState, rng: &mut R) {
        let plan = &self.plan;
        let mix = st.theta.mixing;
        match mix.family {
            MixingFamily::SkewNormal => {}
            MixingFamily::SkewT | MixingFamily::SkewSlash => {
                if plan.has(Block::MixNu) {
                    let e = st.step_scales[Block::MixNu.index()] * normal(rng);
                    let (nu, jac) = if mix.family == MixingFamily::SkewT {
                        let nu = SKEW_T_NU_MIN + (mix.nu - SKEW_T_NU_MIN) * e.exp();
                        (nu, e)
                    } else {
                        (mix.nu * e.exp(), e)
                    };
                    let th = JointParams {
                        mixing: MixingSpec { nu, ..mix },
                        ..st.theta.clone()
                    };
                    self.try_global(st, Block::MixNu, th, st.delta, st.hyper, jac, rng);
                }
                if plan.has(Block::Lambda0) {
                    let (a, b) = if mix.family == MixingFamily::SkewT {
                        self.prior.skew_t_rate
                    } else {
                        self.prior.skew_slash_rate
                    };
                    let l0 = st.hyper.lambda0;
                    let x = logit((l0 - a) / (b - a));
                    let nl = a + (b - a) * expit(x + st.step_scales[Block::Lambda0.index()] * normal(rng));
                    let jac = ((nl - a) * (b - nl)).ln() - ((l0 - a) * (b - l0)).ln();
                    let theta = st.theta.clone();
                    self.try_global(st, Block::Lambda0, theta, st.delta, HyperState { lambda0: nl }, jac, rng);
                }
            }
            MixingFamily::SkewContaminated => {
                for block in [Block::MixWeight, Block::MixScale] {
                    if !plan.has(block) {
                        continue;
                    }
                    let mix = st.theta.mixing;
                    let cur = if block == Block::MixWeight {
                        mix.contam_weight
                    } else {
                        mix.contam_scale
                    };
                    let new = expit(logit(cur) + st.step_scales[block.index()] * normal(rng));
                    let jac = (new * (1.0 - new)).ln() - (cur * (1.0 - cur)).ln();
                    let mixing = if block == Block::MixWeight {
                        MixingSpec {
                            contam_weight: new,
                            ..mix
                        }
                    } else {
                        MixingSpec {
                            contam_scale: new,
                            ..mix
                        }
                    };
                    if block == Block::MixScale {
                        // the contaminated subjects move with the scale
                        self.try_contam_scale(st, mixing, jac, rng);
                    } else {
                        let th = JointParams {
                            mixing,
                            ..st.theta.clone()
                        };
                        self.try_global(st, block, th, st.delta, st.hyper, jac, rng);
                    }
                }
            }
        }
    }

    /// Moving `λ_c` with `u_i` held at the old value would leave every
    /// contaminated subject off the support, so the subjects currently at
    /// `λ_c` are carried to the new value within the same proposal.
    fn try_contam_scale<R: Rng + ?Sized>(&self, st: &mut ChainState, mixing: MixingSpec, jac: f64, rng: &mut R) {
        let old = st.theta.mixing.contam_scale;
        let mut proposal = st.clone();
        for u in proposal.latent.u.iter_mut() {
            if *u == old {
                *u = mixing.contam_scale;
            }
        }
        proposal.theta.mixing = mixing;
        let accepted = match self.rebuild(&proposal) {
            Ok(fresh) => {
                let ratio = fresh.log_target() - st.log_target() + jac;
                if !ratio.is_nan() && accept(ratio, rng) {
                    st.theta = fresh.theta;
                    st.latent = fresh.latent;
                    st.cache = fresh.cache;
                    true
                } else {
                    false
                }
            }
            Err(_) => false,
        };
        st.record(Block::MixScale, accepted);
    }

    /// Recomputes every cached term of `st`, keeping its bookkeeping.
    pub fn rebuild(&self, st: &ChainState) -> Result<ChainState> {
        let fresh = self.state_at(st.theta.clone(), st.hyper, st.latent.clone())?;
        Ok(ChainState {
            cache: fresh.cache,
            ..st.clone()
        })
    }

    /// Robbins–Monro update of the log step scales toward the target
    /// acceptance rates; a no-op once burn-in is over.
    pub fn adapt(&self, st: &mut ChainState) {
        adapt_scales(st, self.cfg);
        if st.iteration < 1 || st.iteration > self.cfg.burn_in {
            return;
        }
        let refresh = |am: &mut AdaptiveProposal, phi: &[f64], it: usize| {
            am.observe(phi);
            if it % AM_REFRESH == 0 && am.n >= AM_MIN_DRAWS.max(2 * phi.len()) {
                am.refresh();
            }
        };
        if self.plan.has(Block::Event) {
            let phi = self.to_phi(st, &self.event_coords(st));
            refresh(&mut st.am_event, &phi, st.iteration);
        }
        if self.plan.has(Block::Skewness) {
            let phi = self.to_phi(st, &self.skew_coords());
            refresh(&mut st.am_skew, &phi, st.iteration);
        }
    }

    /// Random-effects scale and skewness coordinates of the collapsed block.
    fn skew_coords(&self) -> Vec<Coord> {
        let plan = &self.plan;
        let mut c = Vec::new();
        if plan.has(Block::Omega1) {
            c.push(Coord::LogOmega1);
        }
        if plan.has(Block::Omega2) {
            c.push(Coord::AtanhRho);
        }
        if self.prior.common_skewness {
            if plan.has(Block::Delta1) {
                c.push(Coord::AtanhSkew);
            }
        } else {
            for (b, k) in [(Block::Delta1, 0), (Block::Delta2, 1)] {
                if plan.has(b) {
                    c.push(Coord::Delta(k));
                }
            }
        }
        c
    }

    /// Event-submodel coordinates moved by the event block.
    fn event_coords(&self, st: &ChainState) -> Vec<Coord> {
        let q = st
            .cache
            .terms
            .iter()
            .map(|t| t.w.iter().sum::<f64>())
            .fold(0.0, f64::max);
        [
            (Block::Beta0, Coord::Beta0),
            (Block::Nu1, Coord::Nu(0)),
            (Block::Nu2, Coord::Nu(1)),
            (Block::Sigma2T, Coord::LogSlack(q)),
            (Block::Sigma2Cov, Coord::Sigma2Cov),
        ]
        .into_iter()
        .filter(|(b, _)| self.plan.has(*b))
        .map(|(_, c)| c)
        .collect()
    }

    fn to_phi(&self, st: &ChainState, coords: &[Coord]) -> Vec<f64> {
        let th = &st.theta;
        coords
            .iter()
            .map(|c| match *c {
                Coord::Beta0 => th.beta0,
                Coord::Nu(k) => th.nu_event[k],
                Coord::LogSlack(q) => (th.sigma2_t - q * th.sigma2_cov * th.sigma2_cov).ln(),
                Coord::Sigma2Cov => th.sigma2_cov,
                Coord::LogOmega1 => th.omega1.ln(),
                Coord::AtanhRho => (th.omega2 / th.omega1).atanh(),
                Coord::Delta(k) => st.delta[k],
                Coord::AtanhSkew => (st.delta[0] / skew_bound(th)).atanh(),
            })
            .collect()
    }

    fn from_phi(&self, st: &ChainState, coords: &[Coord], phi: &[f64]) -> Option<(JointParams, [f64; Q])> {
        let mut th = st.theta.clone();
        let mut delta = st.delta;
        let mut rho = th.omega2 / th.omega1;
        let mut slack = None;
        let mut skew = None;
        for (c, &v) in coords.iter().zip(phi) {
            match *c {
                Coord::Beta0 => th.beta0 = v,
                Coord::Nu(k) => th.nu_event[k] = v,
                Coord::LogSlack(q) => slack = Some((q, v)),
                Coord::Sigma2Cov => th.sigma2_cov = v,
                Coord::LogOmega1 => th.omega1 = v.exp(),
                Coord::AtanhRho => rho = v.tanh(),
                Coord::Delta(k) => delta[k] = v,
                Coord::AtanhSkew => skew = Some(v),
            }
        }
        if let Some((q, v)) = slack {
            th.sigma2_t = v.exp() + q * th.sigma2_cov * th.sigma2_cov;
        }
        th.omega2 = rho * th.omega1;
        if let Some(v) = skew {
            let d = skew_bound(&th) * v.tanh();
            delta = [d, d];
        }
        th.lambda = JointParams::lambda_from_delta(th.omega1, th.omega2, delta).ok()?;
        Some((th, delta))
    }

    /// `log |∂θ/∂φ|` over `coords`.
    fn log_jacobian(&self, th: &JointParams, delta: [f64; Q], coords: &[Coord]) -> f64 {
        let rho = th.omega2 / th.omega1;
        coords
            .iter()
            .map(|c| match c {
                Coord::LogSlack(q) => (th.sigma2_t - q * th.sigma2_cov * th.sigma2_cov).ln(),
                Coord::LogOmega1 => th.omega1.ln(),
                Coord::AtanhRho => th.omega1.ln() + (1.0 - rho * rho).ln(),
                Coord::AtanhSkew => {
                    let s = skew_bound(th);
                    let r = delta[0] / s;
                    s.ln() + (1.0 - r * r).ln()
                }
                _ => 0.0,
            })
            .sum()
    }

    /// Adaptive random walk on `(Ω, Δ)` with `b` held fixed and `t`
    /// integrated out of the acceptance ratio; the caller redraws `t`.
    fn update_skewness<R: Rng + ?Sized>(&self, st: &mut ChainState, rng: &mut R) {
        let coords = self.skew_coords();
        let phi = self.to_phi(st, &coords);
        let d = phi.len();
        if d == 0 {
            return;
        }
        let z: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let step = st.am_skew.draw(&z);
        let scale = st.step_scales[Block::Skewness.index()] * 2.38 / (d as f64).sqrt();
        let new_phi: Vec<f64> = phi.iter().zip(&step).map(|(p, e)| p + scale * e).collect();
        let accepted = self
            .from_phi(st, &coords, &new_phi)
            .and_then(|(th, delta)| {
                let jac = self.log_jacobian(&th, delta, &coords) - self.log_jacobian(&st.theta, st.delta, &coords);
                self.evaluate(st, th, delta, st.hyper).ok().map(|c| (c, jac))
            })
            .and_then(|(cand, jac)| {
                let lat = &st.latent;
                let marginal = |law: &RandomEffectsLaw| -> f64 {
                    (0..lat.len()).map(|i| law.marginal_logpdf(lat.b[i], lat.u[i])).sum()
                };
                let old_re: f64 = st.cache.re.iter().sum();
                let new_re = cand.re.as_ref().map_or(old_re, |v| v.iter().sum());
                let new_law = cand.re_law.as_ref().unwrap_or(&st.cache.re_law);
                let ratio =
                    cand.log_ratio - (new_re - old_re) + marginal(new_law) - marginal(&st.cache.re_law) + jac;
                (!ratio.is_nan() && accept(ratio, rng)).then_some(cand)
            });
        let ok = accepted.is_some();
        if let Some(cand) = accepted {
            Self::commit(st, cand);
        }
        st.record(Block::Skewness, ok);
    }

    /// Adaptive random walk on the event-submodel parameters with the
    /// random effects held fixed.
    fn update_event<R: Rng + ?Sized>(&self, st: &mut ChainState, rng: &mut R) {
        let coords = self.event_coords(st);
        let phi = self.to_phi(st, &coords);
        let d = phi.len();
        if d == 0 {
            return;
        }
        let z: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let step = st.am_event.draw(&z);
        let scale = st.step_scales[Block::Event.index()] * 2.38 / (d as f64).sqrt();
        let new_phi: Vec<f64> = phi.iter().zip(&step).map(|(p, e)| p + scale * e).collect();
        match self.from_phi(st, &coords, &new_phi) {
            Some((th, delta)) => {
                let jac = self.log_jacobian(&th, delta, &coords) - self.log_jacobian(&st.theta, st.delta, &coords);
                self.try_global(st, Block::Event, th, delta, st.hyper, jac, rng);
            }
            None => st.record(Block::Event, false),
        }
    }
}

fn skew_bound(th: &JointParams) -> f64 {
    (0.5 * (th.omega1 + th.omega2)).sqrt()
}

pub(crate) fn adapt_scales(st: &mut ChainState, cfg: &McmcConfig) {
    if st.iteration == 0 || st.iteration > cfg.burn_in {
        return;
    }
    let gain = (st.iteration as f64).powf(-0.6);
    for b in BLOCKS {
        let i = b.index();
        // Gibbs draws have no step to tune
        if st.sweep_tries[i] == 0 || b == Block::Augmentation {
            continue;
        }
        let rate = st.sweep_accepts[i] as f64 / st.sweep_tries[i] as f64;
        let target = if b.is_multivariate() {
            cfg.target_accept_block
        } else {
            cfg.target_accept_scalar
        };
        st.step_scales[i] *= (gain * (rate - target)).exp();
    }
}

#[cfg(test)]
pub(crate) fn set_sweep_counts(st: &mut ChainState, block: Block, accepted: u64, tried: u64) {
    st.sweep_accepts[block.index()] = accepted;
    st.sweep_tries[block.index()] = tried;
}

impl Candidate {
    pub fn theta(&self) -> &JointParams {
        &self.theta
    }
}
