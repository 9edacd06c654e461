//! Synthetic joint data: covariates, SNI random effects and errors,
//! longitudinal responses, extreme-value or normal event times, censoring
//! and covariate outliers.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, sym_sqrt, SymMatrix};
use crate::model::{Dataset, JointParams, SubjectData, Q};
use crate::sni::MixingSpec;

/// Law of `log T` given its location and conditional variance `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventLaw {
    /// Generalized extreme value with scale `√s`.
    Gev { xi: f64 },
    /// Normal with variance `s`.
    Normal,
}

/// Observation times of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeGrid {
    /// `n_i` points equally spaced on `[0, 1]`.
    Unit,
    /// The first `n_i` entries of a fixed visit schedule.
    Visits { times: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub n_subjects: usize,
    /// Inclusive range of the number of visits per subject.
    pub obs_range: (usize, usize),
    pub covariate_mean: f64,
    pub covariate_sd: f64,
    /// `beta = [α, β]` for the design `(1, x)`.
    pub truth: JointParams,
    pub event_law: EventLaw,
    /// Mean of the exponential censoring variable on the log-time scale;
    /// infinite means no random censoring.
    pub censor_mean: f64,
    /// Administrative censoring on the log-time scale.
    pub admin_censor: Option<f64>,
    pub outlier_fraction: f64,
    /// Outlier shift in units of the covariate's sample SD.
    pub outlier_magnitude: f64,
    pub time_grid: TimeGrid,
    pub seed: u64,
}

/// Parameter values of the simulation design.
pub fn study_truth() -> JointParams {
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

/// Defaults to the study truth, so config files may override single fields.
impl Default for JointParams {
    fn default() -> Self {
        study_truth()
    }
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            obs_range: (4, 10),
            covariate_mean: 3.0,
            covariate_sd: 0.5,
            truth: study_truth(),
            event_law: EventLaw::Gev { xi: 0.8 },
            censor_mean: 0.5,
            admin_censor: None,
            outlier_fraction: 0.0,
            outlier_magnitude: 5.0,
            time_grid: TimeGrid::Unit,
            seed: 1,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 1 {
            return Err(Error::Config("n_subjects must be at least 1".into()));
        }
        let (lo, hi) = self.obs_range;
        if lo < 1 || hi < lo {
            return Err(Error::Config(format!("invalid visit range ({lo}, {hi})")));
        }
        if let TimeGrid::Visits { times } = &self.time_grid {
            if times.len() < hi {
                return Err(Error::Config(format!(
                    "visit schedule has {} times but up to {hi} visits are requested",
                    times.len()
                )));
            }
        }
        if !(self.covariate_sd >= 0.0) {
            return Err(Error::Config("covariate_sd must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::Config(format!(
                "outlier_fraction must lie in [0, 1), got {}",
                self.outlier_fraction
            )));
        }
        if !(self.censor_mean > 0.0) {
            return Err(Error::Config("censor_mean must be positive".into()));
        }
        if let EventLaw::Gev { xi } = self.event_law {
            if !xi.is_finite() {
                return Err(Error::Config("GEV shape must be finite".into()));
            }
        }
        if self.truth.beta.len() != 2 {
            return Err(Error::Config("the simulation design has exactly two fixed effects (α, β)".into()));
        }
        self.truth.validate()
    }
}

/// Inverse-CDF draw from GEV(μ, σ, ξ).
pub fn gev_sample<R: Rng + ?Sized>(mu: f64, sigma: f64, xi: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    gev_quantile(mu, sigma, xi, u)
}

pub fn gev_quantile(mu: f64, sigma: f64, xi: f64, p: f64) -> f64 {
    let e = -p.ln();
    if xi == 0.0 {
        mu - sigma * e.ln()
    } else {
        mu + sigma * (e.powf(-xi) - 1.0) / xi
    }
}

pub fn gev_cdf(x: f64, mu: f64, sigma: f64, xi: f64) -> f64 {
    let z = (x - mu) / sigma;
    if xi == 0.0 {
        return (-(-z).exp()).exp();
    }
    let s = 1.0 + xi * z;
    if s <= 0.0 {
        return if xi > 0.0 { 0.0 } else { 1.0 };
    }
    (-s.powf(-1.0 / xi)).exp()
}

/// One generated subject with the latent draws kept for checking.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSubject {
    pub subject: SubjectData,
    pub b: [f64; Q],
    pub u: f64,
    pub log_event_time: f64,
    pub log_censor_time: f64,
}

/// Random effects `b ~ SN₂(cΔ, D/u, λ)` through the half-normal
/// representation, so that `E(b) = 0` once `u` is integrated out.
pub fn sample_random_effects<R: Rng + ?Sized>(theta: &JointParams, u: f64, rng: &mut R) -> Result<[f64; Q]> {
    let delta = theta.delta()?;
    let c = theta.centring()?;
    let rest = SymMatrix::from_lower_fn(Q, |i, j| theta.d_matrix().get(i, j) - delta[i] * delta[j]);
    let root = sym_sqrt(&rest)?;
    let z: Vec<f64> = (0..Q).map(|_| rng.sample(StandardNormal)).collect();
    let w = root.mul_vec(&z);
    let t = rng.sample::<f64, _>(StandardNormal).abs();
    let s = u.sqrt();
    Ok([
        c * delta[0] + (delta[0] * t + w[0]) / s,
        c * delta[1] + (delta[1] * t + w[1]) / s,
    ])
}

/// Event-time location and conditional variance from the per-visit
/// marginal variances `σ²_e + Ω₁ + 2tΩ₂ + t²Ω₁`.
pub fn event_location(
    times: &[f64],
    x_rows: &[Vec<f64>],
    y: &[f64],
    b: [f64; Q],
    theta: &JointParams,
) -> (f64, f64) {
    let mut weighted = 0.0;
    let mut inv_sum = 0.0;
    for ((t, row), yj) in times.iter().zip(x_rows).zip(y) {
        let v = theta.sigma2_e + theta.omega1 + 2.0 * t * theta.omega2 + t * t * theta.omega1;
        weighted += (yj - dot(row, &theta.beta) - b[0] - b[1] * t) / v;
        inv_sum += 1.0 / v;
    }
    let mu = theta.beta0 + theta.nu_event[0] * b[0] + theta.nu_event[1] * b[1] + theta.sigma2_cov * weighted;
    let s = theta.sigma2_t - theta.sigma2_cov * theta.sigma2_cov * inv_sum;
    (mu, s)
}

/// Draws `(log T, log C)` for one subject.
pub fn gen_event<R: Rng + ?Sized>(
    location: f64,
    s221: f64,
    law: EventLaw,
    censor_mean: f64,
    admin_censor: Option<f64>,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if !(s221 > 0.0) {
        return Err(Error::InadmissibleParams(s221));
    }
    let log_t = match law {
        EventLaw::Gev { xi } => gev_sample(location, s221.sqrt(), xi, rng),
        EventLaw::Normal => location + s221.sqrt() * rng.sample::<f64, _>(StandardNormal),
    };
    let mut log_c = if censor_mean.is_finite() {
        Exp::new(1.0 / censor_mean)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(rng)
    } else {
        f64::INFINITY
    };
    if let Some(a) = admin_censor {
        log_c = log_c.min(a);
    }
    Ok((log_t, log_c))
}

fn visit_times(grid: &TimeGrid, n: usize) -> Vec<f64> {
    match grid {
        TimeGrid::Unit if n == 1 => vec![0.0],
        TimeGrid::Unit => (0..n).map(|j| j as f64 / (n - 1) as f64).collect(),
        TimeGrid::Visits { times } => times[..n].to_vec(),
    }
}

/// Generates one subject from its visit times and design rows.
pub fn simulate_subject<R: Rng + ?Sized>(
    id: String,
    times: Vec<f64>,
    x_rows: Vec<Vec<f64>>,
    theta: &JointParams,
    law: EventLaw,
    censor_mean: f64,
    admin_censor: Option<f64>,
    rng: &mut R,
) -> Result<GeneratedSubject> {
    let u = theta.mixing.sample(rng);
    let b = sample_random_effects(theta, u, rng)?;
    let noise = Normal::new(0.0, (theta.sigma2_e / u).sqrt()).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let y: Vec<f64> = times
        .iter()
        .zip(&x_rows)
        .map(|(t, row)| dot(row, &theta.beta) + b[0] + b[1] * t + noise.sample(rng))
        .collect();
    let (mu, s) = event_location(&times, &x_rows, &y, b, theta);
    let (log_t, log_c) = gen_event(mu, s, law, censor_mean, admin_censor, rng)?;
    let observed = log_t <= log_c;
    let subject = SubjectData::new(id, times, y, x_rows, log_t.min(log_c), observed)?;
    Ok(GeneratedSubject {
        subject,
        b,
        u,
        log_event_time: log_t,
        log_censor_time: log_c,
    })
}

/// One subject of the simulation design: `n_i ~ U{lo..hi}`, `x_ij ~ N(m, s)`.
pub fn gen_subject<R: Rng + ?Sized>(cfg: &SimulationConfig, id: String, rng: &mut R) -> Result<GeneratedSubject> {
    let (lo, hi) = cfg.obs_range;
    let n = rng.random_range(lo..=hi);
    let times = visit_times(&cfg.time_grid, n);
    let x_dist =
        Normal::new(cfg.covariate_mean, cfg.covariate_sd).map_err(|e| Error::Config(e.to_string()))?;
    let x_rows: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0, x_dist.sample(rng)]).collect();
    simulate_subject(id, times, x_rows, &cfg.truth, cfg.event_law, cfg.censor_mean, cfg.admin_censor, rng)
}

/// Shifts a uniformly chosen `⌈fraction · total⌉` set of entries of design
/// column `column` by `± magnitude · sd(column)`. Returns the
/// `(subject, visit)` pairs that moved.
pub fn inject_outliers<R: Rng + ?Sized>(
    data: &Dataset,
    column: usize,
    fraction: f64,
    magnitude: f64,
    rng: &mut R,
) -> Result<(Dataset, Vec<(usize, usize)>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("outlier fraction must lie in [0, 1), got {fraction}")));
    }
    if column >= data.p() {
        return Err(Error::Dimension(format!("no design column {column}")));
    }
    let mut out = data.clone();
    let cells: Vec<(usize, usize)> = data
        .subjects
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.n()).map(move |j| (i, j)))
        .collect();
    let total = cells.len();
    let k = (fraction * total as f64).ceil() as usize;
    if k == 0 {
        return Ok((out, Vec::new()));
    }
    let values: Vec<f64> = cells.iter().map(|&(i, j)| data.subjects[i].x_row(j)[column]).collect();
    let mean = values.iter().sum::<f64>() / total as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (total as f64 - 1.0).max(1.0)).sqrt();
    let mut chosen: Vec<(usize, usize)> = sample_indices(rng, total, k).into_iter().map(|c| cells[c]).collect();
    chosen.sort_unstable();
    for &(i, j) in &chosen {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let s = &mut out.subjects[i];
        let p = s.p;
        s.x[j * p + column] += sign * magnitude * sd;
    }
    Ok((out, chosen))
}

/// A generated dataset together with its latent draws.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub data: Dataset,
    pub b: Vec<[f64; Q]>,
    pub u: Vec<f64>,
    pub outliers: Vec<(usize, usize)>,
}

impl SimulatedData {
    pub fn censoring_fraction(&self) -> f64 {
        let c = self.data.subjects.iter().filter(|s| !s.event_observed).count();
        c as f64 / self.data.subjects.len() as f64
    }
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates a full dataset; subject `i` draws from its own stream so the
/// result does not depend on generation order.
pub fn simulate(cfg: &SimulationConfig) -> Result<SimulatedData> {
    cfg.validate()?;
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    let mut b = Vec::with_capacity(cfg.n_subjects);
    let mut u = Vec::with_capacity(cfg.n_subjects);
    for i in 0..cfg.n_subjects {
        let mut rng = stream(cfg.seed, i as u64 + 1);
        let g = gen_subject(cfg, format!("{}", i + 1), &mut rng)?;
        subjects.push(g.subject);
        b.push(g.b);
        u.push(g.u);
    }
    let data = Dataset::new(vec!["intercept".into(), "x".into()], subjects)?;
    let (data, outliers) = inject_outliers(&data, 1, cfg.outlier_fraction, cfg.outlier_magnitude, &mut stream(cfg.seed, 0))?;
    Ok(SimulatedData { data, b, u, outliers })
}

/// Visit schedule (months) of the AIDS-shaped fixture.
pub const AIDS_VISITS: [f64; 5] = [0.0, 2.0, 6.0, 12.0, 18.0];

/// Parameters of the AIDS-shaped fixture on the square-root response scale;
/// fixed effects are ordered as in [`AIDS_COVARIATES`].
pub fn aids_truth() -> JointParams {
    JointParams {
        beta: vec![7.5, -0.15, 0.3, -0.1, -2.0, -0.2],
        beta0: 2.8,
        sigma2_e: 1.5,
        sigma2_t: 0.6,
        sigma2_cov: 0.1,
        omega1: 0.04,
        omega2: 0.01,
        lambda: [1.0, 1.0],
        nu_event: [0.8, 0.9],
        mixing: MixingSpec::skew_normal(),
    }
}

pub const AIDS_COVARIATES: [&str; 4] = ["drug", "gender", "prevOI", "AZT"];

/// Raw AIDS-shaped records: subject id, visit times, CD4 counts, the four
/// baseline codes, event time in months and event flag.
#[derive(Debug, Clone, PartialEq)]
pub struct AidsRecord {
    pub id: String,
    pub times: Vec<f64>,
    pub cd4: Vec<f64>,
    pub codes: [f64; 4],
    pub time: f64,
    pub event: bool,
}

/// Synthetic stand-in for the ddI/ddC trial: `m` patients, visits at 0, 2,
/// 6, 12 and 18 months with random dropout, square-root CD4 responses and
/// administrative censoring at 21 months.
pub fn aids_like(m: usize, seed: u64) -> Result<Vec<AidsRecord>> {
    let theta = aids_truth();
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let mut rng = stream(seed, i as u64 + 1);
        let n = rng.random_range(1..=AIDS_VISITS.len());
        let times = AIDS_VISITS[..n].to_vec();
        let codes = [
            f64::from(rng.random::<bool>() as u8),
            if rng.random_bool(0.9) { 1.0 } else { -1.0 },
            f64::from(rng.random_bool(0.6) as u8),
            if rng.random_bool(0.4) { 1.0 } else { -1.0 },
        ];
        let x_rows: Vec<Vec<f64>> = times
            .iter()
            .map(|t| vec![1.0, *t, codes[0], codes[1], codes[2], codes[3]])
            .collect();
        let g = simulate_subject(
            format!("{}", i + 1),
            times.clone(),
            x_rows,
            &theta,
            EventLaw::Normal,
            f64::INFINITY,
            Some(21f64.ln()),
            &mut rng,
        )?;
        out.push(AidsRecord {
            id: g.subject.id.clone(),
            times,
            cd4: g.subject.y.iter().map(|y| y.max(0.0).powi(2)).collect(),
            codes,
            time: g.subject.log_event_time.exp(),
            event: g.subject.event_observed,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::cond_event_moments;
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn gev_medians() {
        assert!((gev_quantile(0.0, 1.0, 0.0, 0.5) + 2f64.ln().ln()).abs() < 1e-15);
        assert!((gev_quantile(0.0, 1.0, 0.0, 0.5) - 0.36651292058166435).abs() < 1e-15);
        let m = gev_quantile(0.0, 1.0, 0.8, 0.5);
        assert!((m - ((2f64.ln()).powf(-0.8) - 1.0) / 0.8).abs() < 1e-15);
        assert!((m - 0.42593).abs() < 1e-4, "{m}");
        let mut r = rng(1);
        let mut draws: Vec<f64> = (0..1_000_000).map(|_| gev_sample(0.0, 1.0, 0.8, &mut r)).collect();
        draws.sort_by(|a, b| a.total_cmp(b));
        let med = draws[500_000];
        // SE of the median: √(p(1-p)/n)/f(m)
        let f = (gev_cdf(m + 1e-6, 0.0, 1.0, 0.8) - gev_cdf(m - 1e-6, 0.0, 1.0, 0.8)) / 2e-6;
        let se = 0.5 / 1000.0 / f;
        assert!((med - m).abs() < 3.0 * se, "{med} vs {m}");
    }

    #[test]
    fn gev_cdf_inverts_quantile() {
        for xi in [-0.3, 0.0, 0.8] {
            for p in [0.01, 0.3, 0.5, 0.9, 0.999] {
                let x = gev_quantile(1.0, 2.0, xi, p);
                assert!((gev_cdf(x, 1.0, 2.0, xi) - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn covariate_moments() {
        let cfg = SimulationConfig::default();
        let mut r = rng(2);
        let mut xs = Vec::new();
        while xs.len() < 100_000 {
            let g = gen_subject(&cfg, "a".into(), &mut r).unwrap();
            for j in 0..g.subject.n() {
                xs.push(g.subject.x_row(j)[1]);
            }
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 3.0).abs() < 3.0 * 0.5 / n.sqrt(), "{mean}");
        // var of the sample variance ≈ 2σ⁴/n
        assert!((var - 0.25).abs() < 3.0 * (2.0 * 0.25f64.powi(2) / n).sqrt(), "{var}");
    }

    #[test]
    fn random_effects_have_mean_zero() {
        for mixing in [MixingSpec::skew_normal(), MixingSpec::skew_t(5.0), MixingSpec::skew_contaminated(0.2, 0.3)] {
            let theta = JointParams {
                mixing,
                ..study_truth()
            };
            let mut r = rng(3);
            let n = 1_000_000;
            let mut sum = [0.0; 2];
            let mut sq = [0.0; 2];
            for _ in 0..n {
                let u = theta.mixing.sample(&mut r);
                let b = sample_random_effects(&theta, u, &mut r).unwrap();
                for k in 0..2 {
                    sum[k] += b[k];
                    sq[k] += b[k] * b[k];
                }
            }
            for k in 0..2 {
                let m = sum[k] / n as f64;
                let sd = (sq[k] / n as f64 - m * m).sqrt();
                assert!(m.abs() < 3.0 * sd / (n as f64).sqrt(), "{mixing:?} {k}: {m}");
            }
        }
    }

    #[test]
    fn noiseless_limit_is_the_regression_line() {
        let eps = 1e-12;
        let cfg = SimulationConfig {
            truth: JointParams {
                sigma2_e: eps,
                omega1: eps,
                omega2: 0.0,
                sigma2_cov: 0.0,
                lambda: [0.0; 2],
                ..study_truth()
            },
            ..SimulationConfig::default()
        };
        let g = gen_subject(&cfg, "a".into(), &mut rng(4)).unwrap();
        for j in 0..g.subject.n() {
            let x = g.subject.x_row(j)[1];
            assert!((g.subject.y[j] - (0.9 + x)).abs() < 1e-4);
        }
    }

    #[test]
    fn error_moments_without_skewness() {
        let theta = JointParams {
            omega1: 1e-14,
            omega2: 0.0,
            lambda: [0.0; 2],
            ..study_truth()
        };
        let mut r = rng(5);
        let mut e = Vec::new();
        while e.len() < 1_000_000 {
            let times = vec![0.0, 0.5, 1.0];
            let rows = vec![vec![1.0, 3.0]; 3];
            let g = simulate_subject("a".into(), times, rows, &theta, EventLaw::Normal, 0.5, None, &mut r).unwrap();
            e.extend(g.subject.y.iter().map(|y| y - 3.9));
        }
        let n = e.len() as f64;
        let mean = e.iter().sum::<f64>() / n;
        let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 3.0 * (0.5 / n).sqrt());
        assert!((var - 0.5).abs() < 3.0 * (2.0 * 0.25 / n).sqrt(), "{var}");
    }

    #[test]
    fn location_collapses_without_association() {
        let theta = JointParams {
            sigma2_cov: 0.0,
            ..study_truth()
        };
        let (mu, s) = event_location(&[0.0, 1.0], &[vec![1.0, 3.0], vec![1.0, 2.0]], &[5.0, -1.0], [0.0; 2], &theta);
        assert_eq!(mu, 1.0);
        assert_eq!(s, 0.99);
    }

    #[test]
    fn inadmissible_event_variance() {
        let err = gen_event(0.0, -0.1, EventLaw::Normal, 0.5, None, &mut rng(6)).unwrap_err();
        assert!(matches!(err, Error::InadmissibleParams(_)));
    }

    #[test]
    fn one_visit_location_against_model_moments() {
        // the generator conditions on b, the likelihood uses the marginal
        // residual; with one visit they differ by σ²_cov z b / ψ
        let theta = study_truth();
        let s = SubjectData::new("a", vec![0.4], vec![4.2], vec![vec![1.0, 3.1]], 0.0, true).unwrap();
        let b = [0.3, -0.2];
        let (mu, var) = event_location(&s.times, &[vec![1.0, 3.1]], &s.y, b, &theta);
        let (mu_m, var_m) = cond_event_moments(&s, &theta, b).unwrap();
        let psi = theta.sigma2_e + theta.omega1 * (1.0 + 0.16) + 0.8 * theta.omega2;
        let shift = theta.sigma2_cov * (b[0] + 0.4 * b[1]) / psi;
        assert!((mu_m - mu - shift).abs() < 1e-12, "{mu} vs {mu_m}");
        assert!((var - var_m).abs() < 1e-12);
    }

    #[test]
    fn normal_events_peak_near_true_intercept() {
        let cfg = SimulationConfig {
            n_subjects: 2000,
            event_law: EventLaw::Normal,
            censor_mean: f64::INFINITY,
            truth: JointParams {
                lambda: [0.0; 2],
                ..study_truth()
            },
            ..SimulationConfig::default()
        };
        let sim = simulate(&cfg).unwrap();
        let th = &cfg.truth;
        // profile log-likelihood of β₀ with the latent b at their drawn values
        let profile = |beta0: f64| -> f64 {
            sim.data
                .subjects
                .iter()
                .zip(&sim.b)
                .map(|(s, b)| {
                    let rows: Vec<Vec<f64>> = (0..s.n()).map(|j| s.x_row(j).to_vec()).collect();
                    let t = JointParams { beta0, ..th.clone() };
                    let (mu, v) = event_location(&s.times, &rows, &s.y, *b, &t);
                    -0.5 * (s.log_event_time - mu).powi(2) / v - 0.5 * v.ln()
                })
                .sum()
        };
        let grid: Vec<f64> = (0..=200).map(|k| 0.5 + k as f64 * 0.005).collect();
        let best = grid
            .iter()
            .copied()
            .max_by(|a, b| profile(*a).total_cmp(&profile(*b)))
            .unwrap();
        // SE of the mean of 2000 residuals with variance ≈ 0.99 - ...
        assert!((best - 1.0).abs() < 0.07, "{best}");
    }

    #[test]
    fn outlier_injection() {
        let cfg = SimulationConfig {
            n_subjects: 50,
            ..SimulationConfig::default()
        };
        let clean = simulate(&cfg).unwrap().data;
        let (same, idx) = inject_outliers(&clean, 1, 0.0, 5.0, &mut rng(7)).unwrap();
        assert_eq!(same, clean);
        assert!(idx.is_empty());

        // exactly ⌈f·N⌉ entries at N = 10⁴
        let subjects: Vec<SubjectData> = (0..1000)
            .map(|i| {
                let rows: Vec<Vec<f64>> = (0..10).map(|j| vec![1.0, (i * 10 + j) as f64 * 1e-4]).collect();
                SubjectData::new(format!("{i}"), vec![0.0; 10], vec![0.0; 10], rows, 0.0, true).unwrap()
            })
            .collect();
        let big = Dataset::new(vec!["intercept".into(), "x".into()], subjects).unwrap();
        let (dirty, idx) = inject_outliers(&big, 1, 0.05, 5.0, &mut rng(8)).unwrap();
        assert_eq!(idx.len(), 500);
        let changed = big
            .subjects
            .iter()
            .zip(&dirty.subjects)
            .map(|(a, b)| a.x.iter().zip(&b.x).filter(|(u, v)| u != v).count())
            .sum::<usize>();
        assert_eq!(changed, 500);

        let sd = |d: &Dataset| {
            let v: Vec<f64> = d.subjects.iter().flat_map(|s| (0..s.n()).map(move |j| s.x_row(j)[1])).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        };
        let (dirty, _) = inject_outliers(&clean, 1, 0.10, 5.0, &mut rng(9)).unwrap();
        assert!(sd(&dirty) > sd(&clean));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SimulationConfig {
            n_subjects: 30,
            outlier_fraction: 0.1,
            ..SimulationConfig::default()
        };
        assert_eq!(simulate(&cfg).unwrap(), simulate(&cfg).unwrap());
        let other = SimulationConfig { seed: 2, ..cfg.clone() };
        assert_ne!(simulate(&cfg).unwrap().data, simulate(&other).unwrap().data);
    }

    #[test]
    fn aids_fixture_shape() {
        let recs = aids_like(467, 11).unwrap();
        assert_eq!(recs.len(), 467);
        assert_eq!(recs.iter().map(|r| r.times.len()).max(), Some(5));
        assert!(recs.iter().all(|r| r.time > 0.0 && r.time <= 21.0 + 1e-9));
        let events = recs.iter().filter(|r| r.event).count();
        assert!(events > 50 && events < 467, "{events}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn censoring_decreases_with_censor_mean(seed in 0u64..1000) {
            let frac = |mean: f64| {
                let cfg = SimulationConfig {
                    n_subjects: 400,
                    censor_mean: mean,
                    seed,
                    ..SimulationConfig::default()
                };
                simulate(&cfg).unwrap().censoring_fraction()
            };
            let (a, b, c) = (frac(0.25), frac(1.0), frac(4.0));
            prop_assert!(a >= b && b >= c, "{a} {b} {c}");
        }
    }
}
