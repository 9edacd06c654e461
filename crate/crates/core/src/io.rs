//! CSV datasets, summaries and traces, and the dotted-key config files.
//!
//! Longitudinal file: `subject_id,obstime,response[,covariate...]`, one row
//! per visit. Survival file: `subject_id,time,event`, one row per subject,
//! event time on the natural scale (log-transformed at load).

use std::collections::HashMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::{Fit, ParamSummary, PosteriorSummary};
use crate::model::{Dataset, SubjectData};
use crate::simgen::{AidsRecord, AIDS_COVARIATES};

/// Transform applied to the longitudinal response at load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    None,
    Sqrt,
}

impl std::str::FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Transform::None),
            "sqrt" => Ok(Transform::Sqrt),
            other => Err(Error::Config(format!("unknown transform `{other}` (expected none or sqrt)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadOptions {
    pub transform: Transform,
    /// Design columns after the intercept. `obstime` names the visit time;
    /// `None` means `obstime` followed by every extra column of the file.
    pub covariates: Option<Vec<String>>,
    /// Centre and scale every design column except intercept and obstime.
    pub standardize: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            transform: Transform::None,
            covariates: None,
            standardize: false,
        }
    }
}

const ID: &str = "subject_id";
const OBSTIME: &str = "obstime";
const RESPONSE: &str = "response";

fn column(headers: &csv::StringRecord, name: &str, file: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Schema(format!("{} has no `{name}` column", file.display())))
}

fn number(field: &str, what: &str, line: u64) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Schema(format!("line {line}: `{field}` is not a number ({what})")))
}

struct Survival {
    log_time: f64,
    event: bool,
}

fn read_survival(path: &Path) -> Result<HashMap<String, Survival>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let h = rdr.headers()?.clone();
    let (ci, ct, ce) = (column(&h, ID, path)?, column(&h, "time", path)?, column(&h, "event", path)?);
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let id = rec[ci].trim().to_string();
        let time = number(&rec[ct], "time", line)?;
        if !(time > 0.0 && time.is_finite()) {
            return Err(Error::Domain(format!("subject {id}: event time {time} is not positive")));
        }
        let event = match rec[ce].trim() {
            "1" => true,
            "0" => false,
            other => return Err(Error::Schema(format!("line {line}: event must be 0 or 1, got `{other}`"))),
        };
        if out
            .insert(
                id.clone(),
                Survival {
                    log_time: time.ln(),
                    event,
                },
            )
            .is_some()
        {
            return Err(Error::Schema(format!("subject {id} has more than one survival row")));
        }
    }
    Ok(out)
}

/// Reads and joins a longitudinal and a survival file.
pub fn load_dataset(long_path: &Path, surv_path: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let surv = read_survival(surv_path)?;
    let mut rdr = csv::Reader::from_path(long_path)?;
    let h = rdr.headers()?.clone();
    let (ci, ct, cy) = (
        column(&h, ID, long_path)?,
        column(&h, OBSTIME, long_path)?,
        column(&h, RESPONSE, long_path)?,
    );
    let covariates: Vec<String> = match &opts.covariates {
        Some(c) => c.clone(),
        None => std::iter::once(OBSTIME.to_string())
            .chain(
                h.iter()
                    .map(|s| s.trim().to_string())
                    .filter(|s| s != ID && s != OBSTIME && s != RESPONSE),
            )
            .collect(),
    };
    let cov_cols: Vec<usize> = covariates
        .iter()
        .map(|c| column(&h, c, long_path))
        .collect::<Result<_>>()?;

    struct Rows {
        times: Vec<f64>,
        y: Vec<f64>,
        x: Vec<Vec<f64>>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Rows> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let id = rec[ci].trim().to_string();
        let t = number(&rec[ct], OBSTIME, line)?;
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::Domain(format!("line {line}: obstime {t} is negative")));
        }
        let mut y = number(&rec[cy], RESPONSE, line)?;
        if !y.is_finite() {
            return Err(Error::Domain(format!("line {line}: response is not finite")));
        }
        if opts.transform == Transform::Sqrt {
            if y < 0.0 {
                return Err(Error::Domain(format!("line {line}: negative response {y} under sqrt")));
            }
            y = y.sqrt();
        }
        let mut xr = Vec::with_capacity(cov_cols.len() + 1);
        xr.push(1.0);
        for (&c, name) in cov_cols.iter().zip(&covariates) {
            xr.push(number(&rec[c], name, line)?);
        }
        let entry = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Rows {
                times: vec![],
                y: vec![],
                x: vec![],
            }
        });
        entry.times.push(t);
        entry.y.push(y);
        entry.x.push(xr);
    }
    if order.is_empty() {
        return Err(Error::DegenerateData(format!("{} has no rows", long_path.display())));
    }
    if let Some(extra) = surv.keys().filter(|k| !rows.contains_key(*k)).min() {
        return Err(Error::Schema(format!("survival subject {extra} has no longitudinal rows")));
    }

    if opts.standardize {
        for (k, name) in covariates.iter().enumerate() {
            if name == OBSTIME {
                continue;
            }
            // file order keeps the sums reproducible
            let vals: Vec<f64> = order
                .iter()
                .flat_map(|id| rows[id].x.iter().map(move |x| x[k + 1]))
                .collect();
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
            if !(sd > 0.0) {
                return Err(Error::DegenerateData(format!("covariate `{name}` is constant")));
            }
            for r in rows.values_mut() {
                for x in &mut r.x {
                    x[k + 1] = (x[k + 1] - m) / sd;
                }
            }
        }
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let s = surv.get(&id).ok_or_else(|| Error::Join(id.clone()))?;
        let r = rows.remove(&id).expect("collected above");
        subjects.push(SubjectData::new(id, r.times, r.y, r.x, s.log_time, s.event)?);
    }
    let mut names = vec!["intercept".to_string()];
    names.extend(covariates);
    Dataset::new(names, subjects)
}

/// Writes a dataset in the two-file layout. The design must start with an
/// intercept; a design column named `obstime` is taken from the visit times.
pub fn write_dataset(data: &Dataset, long_path: &Path, surv_path: &Path) -> Result<()> {
    if data.fixed_names.first().map(String::as_str) != Some("intercept") {
        return Err(Error::Schema("first design column must be `intercept`".into()));
    }
    let extra: Vec<(usize, &String)> = data
        .fixed_names
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, n)| n.as_str() != OBSTIME)
        .collect();
    let mut w = csv::Writer::from_path(long_path)?;
    let mut header = vec![ID.to_string(), OBSTIME.into(), RESPONSE.into()];
    header.extend(extra.iter().map(|(_, n)| n.to_string()));
    w.write_record(&header)?;
    for s in &data.subjects {
        for j in 0..s.n() {
            let row = s.x_row(j);
            let mut rec = vec![s.id.clone(), fmt(s.times[j]), fmt(s.y[j])];
            rec.extend(extra.iter().map(|&(k, _)| fmt(row[k])));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(surv_path)?;
    w.write_record([ID, "time", "event"])?;
    for s in &data.subjects {
        w.write_record([
            s.id.clone(),
            fmt(s.log_event_time.exp()),
            if s.event_observed { "1" } else { "0" }.into(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest text that parses back to the same value.
fn fmt(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SummaryFormat {
    Csv,
    Json,
}

const SUMMARY_HEADER: [&str; 7] = ["parameter", "estimate", "sd", "lower", "upper", "rhat", "ess"];

fn opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_else(|| "NA".into())
}

pub fn write_summary(summary: &PosteriorSummary, path: &Path, format: SummaryFormat) -> Result<()> {
    match format {
        SummaryFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(SUMMARY_HEADER)?;
            for p in &summary.params {
                w.write_record([
                    p.name.clone(),
                    fmt(p.mean),
                    fmt(p.sd),
                    fmt(p.lower),
                    fmt(p.upper),
                    opt(p.rhat),
                    opt(p.ess),
                ])?;
            }
            w.flush()?;
        }
        SummaryFormat::Json => {
            let mut text = serde_json::to_string_pretty(summary)?;
            text.push('\n');
            std::fs::write(path, text)?;
        }
    }
    Ok(())
}

pub fn read_summary(path: &Path, format: SummaryFormat) -> Result<PosteriorSummary> {
    match format {
        SummaryFormat::Json => Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?),
        SummaryFormat::Csv => {
            let mut rdr = csv::Reader::from_path(path)?;
            let h = rdr.headers()?.clone();
            let cols: Vec<usize> = SUMMARY_HEADER
                .iter()
                .map(|c| column(&h, c, path))
                .collect::<Result<_>>()?;
            let mut params = Vec::new();
            for rec in rdr.records() {
                let rec = rec?;
                let line = rec.position().map(|p| p.line()).unwrap_or(0);
                let f = |k: usize| number(&rec[cols[k]], SUMMARY_HEADER[k], line);
                let o = |k: usize| match rec[cols[k]].trim() {
                    "NA" => Ok(None),
                    s => number(s, SUMMARY_HEADER[k], line).map(Some),
                };
                params.push(ParamSummary {
                    name: rec[cols[0]].to_string(),
                    mean: f(1)?,
                    sd: f(2)?,
                    lower: f(3)?,
                    upper: f(4)?,
                    rhat: o(5)?,
                    ess: o(6)?,
                });
            }
            Ok(PosteriorSummary { params })
        }
    }
}

/// Retained draws as CSV: `chain,draw,<parameter>...`.
pub fn write_traces(fit: &Fit, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["chain".to_string(), "draw".into()];
    header.extend(fit.names.iter().cloned());
    w.write_record(&header)?;
    for (c, chain) in fit.traces.iter().enumerate() {
        for (d, row) in chain.iter().enumerate() {
            let mut rec = vec![c.to_string(), d.to_string()];
            rec.extend(row.iter().map(|v| fmt(*v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Traces read back: parameter names and `traces[chain][draw][param]`.
pub type Traces = (Vec<String>, Vec<Vec<Vec<f64>>>);

pub fn read_traces(path: &Path) -> Result<Traces> {
    let mut rdr = csv::Reader::from_path(path)?;
    let h = rdr.headers()?.clone();
    if h.len() < 3 || &h[0] != "chain" || &h[1] != "draw" {
        return Err(Error::Schema(format!(
            "{} is not a trace file (expected chain,draw,...)",
            path.display()
        )));
    }
    let names: Vec<String> = h.iter().skip(2).map(str::to_string).collect();
    let mut traces: Vec<Vec<Vec<f64>>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let chain: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::Schema(format!("line {line}: bad chain index")))?;
        if chain > traces.len() {
            return Err(Error::Schema(format!("line {line}: chains out of order")));
        }
        if chain == traces.len() {
            traces.push(Vec::new());
        }
        let row: Vec<f64> = (2..rec.len())
            .map(|k| number(&rec[k], &names[k - 2], line))
            .collect::<Result<_>>()?;
        traces[chain].push(row);
    }
    Ok((names, traces))
}

/// Parses flat `section.key = value` text (a TOML subset) into `T`.
pub fn config_from_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    config_from_str(&read_text(path)?)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Like [`config_from_str`], but keys missing from `text` keep their values
/// in `defaults`, however deeply nested.
pub fn config_over<T: Serialize + DeserializeOwned>(defaults: &T, text: &str) -> Result<T> {
    let mut base = toml::Table::try_from(defaults).map_err(|e| Error::Config(e.to_string()))?;
    let over: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut base, over);
    base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

pub fn read_config_over<T: Serialize + DeserializeOwned>(defaults: &T, path: &Path) -> Result<T> {
    config_over(defaults, &read_text(path)?)
}

/// Writes AIDS-shaped records: raw CD4 counts plus the four baseline codes
/// per visit, and natural-scale event times.
pub fn write_aids(records: &[AidsRecord], long_path: &Path, surv_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(long_path)?;
    let mut header = vec![ID, OBSTIME, RESPONSE];
    header.extend(AIDS_COVARIATES);
    w.write_record(&header)?;
    for r in records {
        for (t, y) in r.times.iter().zip(&r.cd4) {
            let mut rec = vec![r.id.clone(), fmt(*t), fmt(*y)];
            rec.extend(r.codes.iter().map(|c| fmt(*c)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(surv_path)?;
    w.write_record([ID, "time", "event"])?;
    for r in records {
        w.write_record([r.id.clone(), fmt(r.time), if r.event { "1" } else { "0" }.into()])?;
    }
    w.flush()?;
    Ok(())
}
