//! Replicate simulation study: generate, fit every competing model, and
//! aggregate bias, spread, standard error and coverage per parameter.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::{self, parameter_names, parameter_values, McmcConfig, ModelChoice, PosteriorSummary, RunSpec};
use crate::model::RandomEffectsMode;
use crate::priors::PriorSpec;
use crate::simgen::{simulate, SimulatedData, SimulationConfig};
use crate::sni::MixingFamily;

/// A tracked parameter and its data-generating value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricParam {
    pub name: String,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub n_replicates: usize,
    /// Template for every replicate; its seed is the study's base seed.
    pub sim: SimulationConfig,
    pub models: Vec<ModelChoice>,
    pub mcmc: McmcConfig,
    pub prior: PriorSpec,
    pub mode: RandomEffectsMode,
    /// Empty means every shared parameter of `sim.truth`.
    pub metrics_params: Vec<MetricParam>,
    /// Worker threads; 0 uses rayon's default.
    pub threads: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            n_replicates: 20,
            sim: SimulationConfig {
                n_subjects: 100,
                outlier_fraction: 0.05,
                ..SimulationConfig::default()
            },
            models: ModelChoice::ALL.to_vec(),
            mcmc: McmcConfig {
                n_chains: 3,
                burn_in: 2000,
                iterations: 2000,
                ..McmcConfig::default()
            },
            prior: PriorSpec::default(),
            mode: RandomEffectsMode::default(),
            metrics_params: Vec::new(),
            threads: 0,
        }
    }
}

const SIM_FIXED: [&str; 2] = ["intercept", "x"];

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_replicates < 1 {
            return Err(Error::Config("n_replicates must be at least 1".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("at least one model is required".into()));
        }
        for (i, m) in self.models.iter().enumerate() {
            if self.models[..i].contains(m) {
                return Err(Error::Config(format!("model {} listed twice", m.name())));
            }
        }
        self.sim.validate()?;
        self.mcmc.validate()?;
        let fixed: Vec<String> = SIM_FIXED.iter().map(|s| s.to_string()).collect();
        for p in self.tracked() {
            if !p.truth.is_finite() {
                return Err(Error::Config(format!("truth of `{}` is not finite", p.name)));
            }
            for m in &self.models {
                if !parameter_names(&fixed, m.family()).contains(&p.name) {
                    return Err(Error::Config(format!("model {} has no parameter `{}`", m.name(), p.name)));
                }
            }
        }
        Ok(())
    }

    /// Parameters reported in the metric tables.
    pub fn tracked(&self) -> Vec<MetricParam> {
        if !self.metrics_params.is_empty() {
            return self.metrics_params.clone();
        }
        let fixed: Vec<String> = SIM_FIXED.iter().map(|s| s.to_string()).collect();
        let mut truth = self.sim.truth.clone();
        truth.mixing.family = MixingFamily::SkewNormal;
        parameter_names(&fixed, MixingFamily::SkewNormal)
            .into_iter()
            .zip(parameter_values(&truth))
            .map(|(name, truth)| MetricParam { name, truth })
            .collect()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Data seed of replicate `r`.
pub fn replicate_seed(base: u64, r: usize) -> u64 {
    splitmix(base.wrapping_add((r as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn sampler_seed(data_seed: u64) -> u64 {
    splitmix(data_seed ^ 0xD1B5_4A32_D192_ED03)
}

/// Posterior mean, variance and 95% interval of one parameter in one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub mean: f64,
    pub var: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Ok { params: Vec<ParamRecord>, max_rhat: Option<f64> },
    Failed { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub model: ModelChoice,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    /// SD of the posterior means; absent with fewer than two replicates.
    pub sd: Option<f64>,
    /// Root mean posterior variance.
    pub se: f64,
    pub cp: f64,
    pub median_abs_error: f64,
    /// Replicates contributing.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTable {
    pub model: ModelChoice,
    pub rows: Vec<MetricsRow>,
    /// Replicates with a successful fit.
    pub replicates: Vec<usize>,
    /// Failed replicates and their messages.
    pub failures: Vec<(usize, String)>,
}

impl ModelTable {
    pub fn row(&self, name: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub tracked: Vec<MetricParam>,
    pub records: Vec<ReplicateRecord>,
    pub tables: Vec<ModelTable>,
}

fn records_from_summary(summary: &PosteriorSummary, tracked: &[MetricParam]) -> Result<Vec<ParamRecord>> {
    tracked
        .iter()
        .map(|p| {
            let s = summary
                .get(&p.name)
                .ok_or_else(|| Error::Config(format!("fit has no parameter `{}`", p.name)))?;
            Ok(ParamRecord {
                name: p.name.clone(),
                mean: s.mean,
                var: s.sd * s.sd,
                lower: s.lower,
                upper: s.upper,
            })
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Aggregates stored per-replicate records into one table per model, in
/// the order of `models`.
pub fn metrics_from_records(
    records: &[ReplicateRecord],
    tracked: &[MetricParam],
    models: &[ModelChoice],
) -> Vec<ModelTable> {
    models
        .iter()
        .map(|&model| {
            let mut mine: Vec<&ReplicateRecord> = records.iter().filter(|r| r.model == model).collect();
            mine.sort_by_key(|r| r.replicate);
            let mut replicates = Vec::new();
            let mut failures = Vec::new();
            let mut fits: Vec<&[ParamRecord]> = Vec::new();
            for r in mine {
                match &r.outcome {
                    Outcome::Ok { params, .. } => {
                        replicates.push(r.replicate);
                        fits.push(params);
                    }
                    Outcome::Failed { message } => failures.push((r.replicate, message.clone())),
                }
            }
            let rows = if fits.is_empty() {
                Vec::new()
            } else {
                tracked.iter().filter_map(|p| metrics_row(p, &fits)).collect()
            };
            ModelTable {
                model,
                rows,
                replicates,
                failures,
            }
        })
        .collect()
}

fn metrics_row(p: &MetricParam, fits: &[&[ParamRecord]]) -> Option<MetricsRow> {
    let recs: Vec<&ParamRecord> = fits
        .iter()
        .filter_map(|f| f.iter().find(|r| r.name == p.name))
        .collect();
    if recs.is_empty() {
        return None;
    }
    let n = recs.len();
    let nf = n as f64;
    let mean = recs.iter().map(|r| r.mean).sum::<f64>() / nf;
    let sd = (n > 1).then(|| (recs.iter().map(|r| (r.mean - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt());
    let se = (recs.iter().map(|r| r.var).sum::<f64>() / nf).sqrt();
    let covered = recs.iter().filter(|r| r.lower <= p.truth && p.truth <= r.upper).count();
    Some(MetricsRow {
        name: p.name.clone(),
        truth: p.truth,
        mean,
        bias: mean - p.truth,
        sd,
        se,
        cp: covered as f64 / nf,
        median_abs_error: median(recs.iter().map(|r| (r.mean - p.truth).abs()).collect()),
        n,
    })
}

/// Runs the study with a caller-supplied fitter, which receives the
/// replicate's data and run specification.
pub fn run_study_with<F>(cfg: &StudyConfig, fitter: F) -> Result<StudyResult>
where
    F: Fn(&SimulatedData, &RunSpec) -> Result<PosteriorSummary> + Sync,
{
    cfg.validate()?;
    let tracked = cfg.tracked();
    let jobs: Vec<(usize, ModelChoice)> = (0..cfg.n_replicates)
        .flat_map(|r| cfg.models.iter().map(move |&m| (r, m)))
        .collect();

    let work = || -> Vec<ReplicateRecord> {
        jobs.par_iter()
            .map(|&(r, model)| {
                let seed = replicate_seed(cfg.sim.seed, r);
                let outcome = match fit_one(cfg, &fitter, &tracked, seed, model) {
                    Ok(o) => o,
                    Err(e) => Outcome::Failed { message: e.to_string() },
                };
                ReplicateRecord {
                    replicate: r,
                    seed,
                    model,
                    outcome,
                }
            })
            .collect()
    };
    let records = if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work)
    } else {
        work()
    };
    let tables = metrics_from_records(&records, &tracked, &cfg.models);
    Ok(StudyResult {
        tracked,
        records,
        tables,
    })
}

fn fit_one<F>(cfg: &StudyConfig, fitter: &F, tracked: &[MetricParam], seed: u64, model: ModelChoice) -> Result<Outcome>
where
    F: Fn(&SimulatedData, &RunSpec) -> Result<PosteriorSummary>,
{
    // the same data for every model within a replicate
    let sim = simulate(&SimulationConfig {
        seed,
        ..cfg.sim.clone()
    })?;
    let spec = RunSpec {
        model,
        mode: cfg.mode,
        prior: cfg.prior.clone(),
        mcmc: McmcConfig {
            seed: sampler_seed(seed),
            ..cfg.mcmc.clone()
        },
    };
    let summary = fitter(&sim, &spec)?;
    Ok(Outcome::Ok {
        params: records_from_summary(&summary, tracked)?,
        max_rhat: summary.max_rhat(),
    })
}

/// Runs the study with the MCMC sampler.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    run_study_with(cfg, |sim, spec| Ok(mcmc::run(&sim.data, spec, None)?.summary))
}

/// Rank of each model (1 = best) with ties sharing a rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub model: ModelChoice,
    pub value: f64,
    pub rank: usize,
}

/// Sign of `a − b` for |bias| and CP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSign {
    pub a: ModelChoice,
    pub b: ModelChoice,
    pub abs_bias: i8,
    pub cp: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamComparison {
    pub name: String,
    /// Smallest |bias| first.
    pub abs_bias: Vec<Ranked>,
    /// Highest CP first.
    pub cp: Vec<Ranked>,
    pub bias_sign: Vec<(ModelChoice, i8)>,
    pub pairs: Vec<PairSign>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub params: Vec<ParamComparison>,
}

impl Comparison {
    pub fn get(&self, name: &str) -> Option<&ParamComparison> {
        self.params.iter().find(|p| p.name == name)
    }
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

fn rank(mut v: Vec<(ModelChoice, f64)>, ascending: bool) -> Vec<Ranked> {
    v.sort_by(|a, b| if ascending { a.1.total_cmp(&b.1) } else { b.1.total_cmp(&a.1) });
    let mut out: Vec<Ranked> = Vec::with_capacity(v.len());
    for (i, (model, value)) in v.into_iter().enumerate() {
        let rank = match out.last() {
            Some(prev) if prev.value == value => prev.rank,
            _ => i + 1,
        };
        out.push(Ranked { model, value, rank });
    }
    out
}

/// Orders models per parameter by |bias| and CP. Every table must come from
/// the same set of successful replicates.
pub fn compare_models(tables: &[ModelTable]) -> Result<Comparison> {
    if tables.len() < 2 {
        return Err(Error::MismatchedReplicates("at least two model tables are required".into()));
    }
    let first = &tables[0];
    for t in &tables[1..] {
        if t.replicates != first.replicates {
            return Err(Error::MismatchedReplicates(format!(
                "{} has replicates {:?}, {} has {:?}",
                first.model.name(),
                first.replicates,
                t.model.name(),
                t.replicates
            )));
        }
    }
    let mut params = Vec::new();
    for row in &first.rows {
        let rows: Vec<(ModelChoice, &MetricsRow)> = tables
            .iter()
            .map(|t| {
                t.row(&row.name)
                    .map(|r| (t.model, r))
                    .ok_or_else(|| Error::MismatchedReplicates(format!("{} lacks `{}`", t.model.name(), row.name)))
            })
            .collect::<Result<_>>()?;
        let mut pairs = Vec::new();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                pairs.push(PairSign {
                    a: rows[i].0,
                    b: rows[j].0,
                    abs_bias: sign(rows[i].1.bias.abs() - rows[j].1.bias.abs()),
                    cp: sign(rows[i].1.cp - rows[j].1.cp),
                });
            }
        }
        params.push(ParamComparison {
            name: row.name.clone(),
            abs_bias: rank(rows.iter().map(|(m, r)| (*m, r.bias.abs())).collect(), true),
            cp: rank(rows.iter().map(|(m, r)| (*m, r.cp)).collect(), false),
            bias_sign: rows.iter().map(|(m, r)| (*m, sign(r.bias))).collect(),
            pairs,
        });
    }
    Ok(Comparison { params })
}

/// One CSV line per (model, parameter).
pub fn write_metrics_csv(tables: &[ModelTable], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "parameter", "truth", "bias", "sd", "se", "cp", "median_abs_error", "n"])?;
    for t in tables {
        for r in &t.rows {
            w.write_record([
                t.model.name().to_string(),
                r.name.clone(),
                format!("{}", r.truth),
                format!("{}", r.bias),
                r.sd.map(|v| format!("{v}")).unwrap_or_else(|| "NA".into()),
                format!("{}", r.se),
                format!("{}", r.cp),
                format!("{}", r.median_abs_error),
                r.n.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Plain-text tables, one block per model.
pub fn report(result: &StudyResult) -> String {
    let mut s = String::new();
    for t in &result.tables {
        let _ = writeln!(
            s,
            "model {}  ({} replicates, {} failed)",
            t.model.name(),
            t.replicates.len(),
            t.failures.len()
        );
        let _ = writeln!(s, "{:<16}{:>10}{:>10}{:>10}{:>10}{:>8}", "parameter", "truth", "bias", "sd", "se", "cp");
        for r in &t.rows {
            let sd = r.sd.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<16}{:>10.4}{:>10.4}{:>10}{:>10.4}{:>8.3}",
                r.name, r.truth, r.bias, sd, r.se, r.cp
            );
        }
        for (rep, msg) in &t.failures {
            let _ = writeln!(s, "  replicate {rep} failed: {msg}");
        }
        s.push('\n');
    }
    s
}
