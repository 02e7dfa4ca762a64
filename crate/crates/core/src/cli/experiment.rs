//! Wiring a config into a trained run and its artifacts.

use super::config::{ExperimentConfig, FlowConfig, TargetSpec};
use crate::climb::{Events, Method, TraceRecord, TrainError, Trainer};
use crate::diagnostics::{compare_to_truth, cumulative_ess, summarize, Chain, DistanceReport, Moments, SummaryStats, Truth};
use crate::flows::{hidden_widths, FlowError, FlowKind, TransportMap};
use crate::numkit::Rng;
use crate::targets::{synth_multilevel, ConjugateGaussian, GaussianAnalytic, MultilevelData, TargetError, TargetModel};
use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

pub const FLOW_INIT_STREAM: u64 = 1;
pub const EVAL_STREAM: u64 = 2;
pub const DATA_STREAM: u64 = 3;
/// Group-std evaluation group `g` draws from stream `TABLE1_STREAM_BASE + g`.
pub const TABLE1_STREAM_BASE: u64 = 1 << 16;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Target(#[from] TargetError),
}

pub(crate) fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> RunError {
    let context = context.into();
    move |source| RunError::Io { context, source }
}

/// Target model plus any data it was built from.
#[derive(Debug, Clone)]
pub struct BuiltTarget {
    pub model: TargetModel,
    pub dataset: Option<MultilevelData>,
}

pub fn build_target(spec: &TargetSpec, seed: u64) -> Result<BuiltTarget, RunError> {
    let data_rng = |s: Option<u64>| Rng::with_stream(s.unwrap_or(seed), DATA_STREAM);
    let model = match spec {
        TargetSpec::Funnel(c) => TargetModel::funnel(c.a),
        TargetSpec::Banana(c) => TargetModel::Banana(crate::targets::BananaParams {
            b: c.b,
            var1: c.var1,
            var2: c.var2,
        }),
        TargetSpec::Gaussian(c) => {
            let g = match &c.cov {
                Some(cov) => GaussianAnalytic::new(c.mean.clone(), cov.clone())?,
                None => GaussianAnalytic::diagonal(c.mean.clone(), &c.variances)?,
            };
            TargetModel::Gaussian(g)
        }
        TargetSpec::ConjugateGaussian(c) => {
            let data = match &c.observations {
                Some(obs) => ConjugateGaussian {
                    observations: obs.clone(),
                },
                None => ConjugateGaussian::simulate(&mut data_rng(c.data_seed), c.n_obs, c.true_theta),
            };
            TargetModel::ConjugateGaussian(data)
        }
        TargetSpec::MultilevelLogit(c) => {
            let (data, model) =
                synth_multilevel(&mut data_rng(c.data_seed), c.n_groups, c.n_obs, c.sigma_group, c.beta)?;
            return Ok(BuiltTarget {
                model,
                dataset: Some(data),
            });
        }
    };
    Ok(BuiltTarget { model, dataset: None })
}

/// Fresh map for the given family; conditioner hidden layers are drawn from
/// the flow-init stream of `seed`.
pub fn build_map(flow: &FlowConfig, dim: usize, seed: u64) -> TransportMap {
    let mut rng = Rng::with_stream(seed, FLOW_INIT_STREAM);
    let hidden = hidden_widths(flow.hidden_layers, flow.hidden_width);
    match flow.kind {
        FlowKind::Identity => TransportMap::identity(dim),
        FlowKind::Affine => TransportMap::affine(dim),
        FlowKind::Iaf => TransportMap::iaf(dim, flow.stack_depth, &hidden, &mut rng),
        FlowKind::RealNvp => TransportMap::realnvp(dim, flow.stack_depth, &hidden, &mut rng),
    }
}

/// Rebuilds the map of a finished run from its config and saved parameters.
pub fn reload_map(config: &ExperimentConfig, dim: usize, params: &[f64]) -> Result<TransportMap, RunError> {
    let mut map = build_map(&config.flow, dim, config.seed);
    map.set_params(params)?;
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineSummary {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QMoments {
    pub n: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-dimension std across evaluation groups: mean and standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Summary {
    pub groups: usize,
    pub samples_per_group: usize,
    pub std_mean: Vec<f64>,
    pub std_se: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssPoint {
    pub n: usize,
    /// Per dimension; `None` where undefined.
    pub ess: Vec<Option<f64>>,
    pub min: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub target: String,
    pub method: Method,
    pub flow_kind: FlowKind,
    pub seed: u64,
    pub iterations: u64,
    pub dim: usize,
    pub flow_params: Vec<f64>,
    pub theta: Vec<f64>,
    pub affine: Option<AffineSummary>,
    /// Moments of the retained (post-freeze) latent samples.
    pub chain: Option<SummaryStats>,
    pub q_moments: QMoments,
    pub truth: Option<Truth>,
    /// Distance of the fitted q's moments to `truth`.
    pub distance: Option<DistanceReport>,
    pub cumulative_ess: Vec<EssPoint>,
    pub table1: Option<Table1Summary>,
    pub events: Events,
    pub config: ExperimentConfig,
}

pub fn read_summary(dir: &Path) -> Result<RunSummary, RunError> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(format!("reading {}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, RunError> {
    let path = dir.join(name);
    let f = File::create(&path).map_err(io_err(format!("creating {}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn trace_header(theta_len: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "iter",
        "accepted",
        "step_size",
        "leapfrog",
        "warped_logp",
        "latent_logp",
        "div",
        "lambda_norm",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=theta_len).map(|i| format!("theta{i}")));
    h
}

fn trace_row(r: &TraceRecord) -> Vec<String> {
    let mut row = vec![
        r.iter.to_string(),
        u8::from(r.accepted).to_string(),
        r.step_size.to_string(),
        r.leapfrog.to_string(),
        r.warped_logp.to_string(),
        r.latent_logp.to_string(),
        u8::from(r.divergent).to_string(),
        r.lambda_norm.to_string(),
    ];
    row.extend(r.theta.iter().map(f64::to_string));
    row
}

fn indexed_header(first: &str, groups: &[(&str, usize)]) -> Vec<String> {
    let mut h = vec![first.to_string()];
    for (prefix, n) in groups {
        h.extend((1..=*n).map(|i| format!("{prefix}{i}")));
    }
    h
}

fn indexed_row(first: impl ToString, values: impl IntoIterator<Item = f64>) -> Vec<String> {
    std::iter::once(first.to_string())
        .chain(values.into_iter().map(|v| v.to_string()))
        .collect()
}

/// Moments of `n` draws from `map` using one RNG stream.
fn q_moments(map: &TransportMap, n: usize, seed: u64, stream: u64) -> Result<Moments, FlowError> {
    let mut rng = Rng::with_stream(seed, stream);
    let mut m = Moments::new(map.dim());
    for _ in 0..n {
        m.push(&map.sample(&mut rng)?);
    }
    Ok(m)
}

fn truth_for(model: &TargetModel) -> Option<Truth> {
    model
        .analytic_moments()
        .map(|(mean, std)| Truth { mean: Some(mean), std })
}

pub struct RunOutcome {
    pub summary: RunSummary,
    pub wall_seconds: f64,
    pub output_dir: PathBuf,
}

/// Trains, evaluates and writes every artifact into `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    let started = Instant::now();
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let built = build_target(&config.target_spec(), config.seed)?;
    let dim = built.model.dim();
    if let Some(data) = &built.dataset {
        data.write_csv(create(&dir, "dataset.csv")?)?;
    }
    let map = build_map(&config.flow, dim, config.seed);
    info!(
        "run: target={} method={} flow={} dim={} params={} iterations={}",
        built.model.name(),
        config.trainer.method,
        config.flow.kind,
        dim,
        map.param_count(),
        config.trainer.iterations
    );
    let mut trainer = Trainer::new(config.trainer, config.hmc, built.model.clone(), map, config.seed)?;

    let mut trace = csv::Writer::from_writer(create(&dir, "trace.csv")?);
    trace.write_record(trace_header(built.model.theta_len()))?;
    let mut samples = csv::Writer::from_writer(create(&dir, "samples.csv")?);
    samples.write_record(indexed_header("iter", &[("z", dim)]))?;
    let is_affine = config.flow.kind == FlowKind::Affine;
    let mut flow_trace = if is_affine {
        let mut w = csv::Writer::from_writer(create(&dir, "flow_trace.csv")?);
        w.write_record(indexed_header("iter", &[("mu", dim), ("sigma", dim)]))?;
        Some(w)
    } else {
        None
    };

    let mut chain = Chain::new(dim);
    let mut accepted = 0u64;
    let mut sampled = 0u64;
    let log_every = (config.trainer.iterations / 10).max(1);
    let mut sink_err: Option<RunError> = None;
    trainer.run(|t, r| {
        let res = (|| -> Result<(), RunError> {
            trace.write_record(trace_row(r))?;
            if !t.frozen_at(r.iter) {
                samples.write_record(indexed_row(r.iter, r.z.iter().copied()))?;
                chain.push(&r.z).map_err(|e| RunError::Setup(e.to_string()))?;
                sampled += 1;
                accepted += u64::from(r.accepted);
            }
            if let (Some(w), Some((mu, sigma))) = (flow_trace.as_mut(), t.state().map.affine_parts()) {
                w.write_record(indexed_row(r.iter, mu.into_iter().chain(sigma)))?;
            }
            if (r.iter + 1) % log_every == 0 {
                debug!(
                    "iter {} step_size {:.4} leapfrog {} latent_logp {:.4}",
                    r.iter + 1,
                    r.step_size,
                    r.leapfrog,
                    r.latent_logp
                );
            }
            Ok(())
        })();
        res.map_err(|e| {
            let msg = e.to_string();
            sink_err = Some(e);
            std::io::Error::other(msg)
        })
    })
    .map_err(|e| sink_err.take().unwrap_or(RunError::Train(e)))?;
    trace.flush().map_err(io_err("writing trace.csv"))?;
    samples.flush().map_err(io_err("writing samples.csv"))?;
    if let Some(w) = flow_trace.as_mut() {
        w.flush().map_err(io_err("writing flow_trace.csv"))?;
    }

    let state = trainer.into_state();
    let acceptance = if sampled > 0 { accepted as f64 / sampled as f64 } else { 0.0 };
    let chain_stats = if chain.is_empty() {
        None
    } else {
        Some(summarize(&chain, acceptance, state.events.divergences).map_err(|e| RunError::Setup(e.to_string()))?)
    };
    let cumulative = if chain.len() >= 16 {
        let per_dim: Vec<Vec<(usize, Option<f64>)>> = (0..dim)
            .map(|d| match cumulative_ess(&chain, d) {
                Ok(v) => v.into_iter().map(|(n, e)| (n, Some(e))).collect(),
                Err(_) => crate::diagnostics::checkpoints(chain.len()).into_iter().map(|n| (n, None)).collect(),
            })
            .collect();
        (0..per_dim[0].len())
            .map(|k| {
                let ess: Vec<Option<f64>> = per_dim.iter().map(|v| v[k].1).collect();
                let min = ess.iter().flatten().copied().reduce(f64::min);
                EssPoint {
                    n: per_dim[0][k].0,
                    ess,
                    min,
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    let n_eval = config.eval.n_posterior_samples.max(2);
    let qm = q_moments(&state.map, n_eval, config.seed, EVAL_STREAM)?;
    let q = QMoments {
        n: n_eval,
        mean: qm.mean().to_vec(),
        std: qm.std(),
    };
    let truth = truth_for(&state.target);
    let distance = match &truth {
        Some(t) => Some(compare_to_truth(&q.mean, &q.std, t).map_err(|e| RunError::Setup(e.to_string()))?),
        None => None,
    };
    let table1 = if config.eval.n_groups_table1 > 0 {
        Some(write_table1(&dir, &state.map, config)?)
    } else {
        None
    };
    let summary = RunSummary {
        target: state.target.name().to_string(),
        method: config.trainer.method,
        flow_kind: config.flow.kind,
        seed: config.seed,
        iterations: config.trainer.iterations,
        dim,
        flow_params: state.map.params(),
        theta: state.theta.clone(),
        affine: state.map.affine_parts().map(|(mu, sigma)| AffineSummary { mu, sigma }),
        chain: chain_stats,
        q_moments: q,
        truth,
        distance,
        cumulative_ess: cumulative,
        table1,
        events: state.events,
        config: config.clone(),
    };
    let mut w = create(&dir, "summary.json")?;
    serde_json::to_writer_pretty(&mut w, &summary)?;
    w.write_all(b"\n").map_err(io_err("writing summary.json"))?;
    w.flush().map_err(io_err("writing summary.json"))?;

    let wall_seconds = started.elapsed().as_secs_f64();
    let mut w = create(&dir, "timing.json")?;
    serde_json::to_writer_pretty(&mut w, &serde_json::json!({ "wall_seconds": wall_seconds }))?;
    w.flush().map_err(io_err("writing timing.json"))?;
    info!("run finished in {wall_seconds:.2}s, artifacts in {}", dir.display());
    Ok(RunOutcome {
        summary,
        wall_seconds,
        output_dir: dir,
    })
}

/// Per-group std of i.i.d. draws from the fitted q (one RNG stream per group).
pub fn table1_stds(map: &TransportMap, groups: usize, per_group: usize, seed: u64) -> Result<Vec<Vec<f64>>, FlowError> {
    (0..groups)
        .into_par_iter()
        .map(|g| Ok(q_moments(map, per_group, seed, TABLE1_STREAM_BASE + g as u64)?.std()))
        .collect()
}

fn write_table1(dir: &Path, map: &TransportMap, config: &ExperimentConfig) -> Result<Table1Summary, RunError> {
    let groups = config.eval.n_groups_table1;
    let per_group = config.eval.n_posterior_samples;
    let stds = table1_stds(map, groups, per_group, config.seed)?;
    let dim = map.dim();
    let mut w = csv::Writer::from_writer(create(dir, "table1.csv")?);
    w.write_record(indexed_header("group", &[("std", dim)]))?;
    let mut across = Moments::new(dim);
    for (g, s) in stds.iter().enumerate() {
        w.write_record(indexed_row(g, s.iter().copied()))?;
        across.push(s);
    }
    w.flush().map_err(io_err("writing table1.csv"))?;
    let se = across.std().iter().map(|s| s / (groups as f64).sqrt()).collect();
    Ok(Table1Summary {
        groups,
        samples_per_group: per_group,
        std_mean: across.mean().to_vec(),
        std_se: se,
    })
}

/// Runs several configs, at most `jobs` at a time. Results keep input order.
pub fn run_many(configs: &[ExperimentConfig], jobs: usize) -> Vec<Result<RunOutcome, RunError>> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build();
    match pool {
        Ok(pool) => pool.install(|| configs.par_iter().map(run_experiment).collect()),
        Err(_) => configs.iter().map(run_experiment).collect(),
    }
}
