//! Sweep orchestration: statistics, optimization, common-sample evaluation.

use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;
use rcshp_core::channel::{build_cost2100_stats, build_geometry_stats, ChannelSample, ChannelSampler, ChannelStats};
use rcshp_core::estimation::generate_pilots;
use rcshp_core::precoding::{ControlPolicy, ControlVariable};
use rcshp_core::rate::{average_rates, MonteCarloRates};
use rcshp_core::rng::{derive_seed, seeded};
use rcshp_core::ssca::{eigen_phases, initialize_policy, ssca_optimize, OptimizerTrace, SscaOptions};
use rcshp_core::{CMatrix, CsiMode, PilotMatrix, Pipeline, PrecoderKind, SystemDims};
use serde::{Deserialize, Serialize};

use crate::config::{ChannelModel, ExperimentConfig, Scheme, SweepAxis};
use crate::error::{Result, SimError};

const PILOT_STREAM: u64 = 0x7069_6c6f;
const INIT_STREAM: u64 = 0x696e_6974;
const TRACE_STREAM: u64 = 0x7472_6163;
const SLOT_STREAM: u64 = 0x736c_6f74;

/// Reported metrics of one scheme at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub utility: f64,
    pub sum_rate: f64,
    /// Sum rate per watt of base-station consumption.
    pub ee: f64,
    pub user_rates: Vec<f64>,
    pub sum_rate_std_error: f64,
    pub user_rate_std_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config_hash: String,
    pub sweep_axis: SweepAxis,
    pub sweep_value: f64,
    pub scheme: Scheme,
    /// Statistics seed of the run.
    pub seed: u64,
    /// Absent when the sweep point failed; see `error`.
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
    /// Trace file name for optimized schemes.
    pub trace: Option<String>,
    /// State counts of a slot-level replay over one coherence block.
    pub state_counts: Option<Vec<usize>>,
    pub wall_time_s: f64,
}

impl ExperimentRecord {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &ExperimentRecord) -> bool {
        ExperimentRecord {
            wall_time_s: 0.0,
            ..self.clone()
        } == ExperimentRecord {
            wall_time_s: 0.0,
            ..other.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub file_name: String,
    pub trace: OptimizerTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub config_hash: String,
    pub records: Vec<ExperimentRecord>,
    pub traces: Vec<RunTrace>,
}

/// Everything shared by the schemes at one sweep point.
#[derive(Debug, Clone)]
pub struct PointContext {
    pub dims: SystemDims,
    pub stats: ChannelStats,
    pub pilots: PilotMatrix,
    /// Common evaluation samples.
    pub eval: Vec<ChannelSample>,
}

/// Covariances at the base dimensions; they depend on neither the pilot
/// count nor the power budget.
pub fn build_stats(config: &ExperimentConfig) -> Result<ChannelStats> {
    Ok(match &config.channel {
        ChannelModel::Geometry(p) => build_geometry_stats(config.dims, p, config.seeds.stats)?,
        ChannelModel::Cost2100(p) => build_cost2100_stats(config.dims, p, config.seeds.stats)?,
    })
}

impl PointContext {
    pub fn new(config: &ExperimentConfig, base: &ChannelStats, value: f64) -> Result<Self> {
        let dims = config.dims_at(value)?;
        let stats = base.with_dims(dims)?;
        let pilots = generate_pilots(
            dims.pilots,
            dims.rf_chains,
            dims.max_power,
            derive_seed(config.seeds.stats, PILOT_STREAM),
        )?;
        let eval = ChannelSampler::new(&stats)?.draw_batch(config.n_eval_samples, config.seeds.evaluation);
        Ok(PointContext {
            dims,
            stats,
            pilots,
            eval,
        })
    }

    pub fn pipeline(&self, csi: CsiMode) -> Pipeline<'_> {
        Pipeline::new(&self.stats, &self.pilots).with_csi(csi)
    }
}

/// Phases of the top `S` eigenvectors of the summed user covariances.
pub fn eigen_beam_phases(stats: &ChannelStats) -> Vec<f64> {
    let dims = stats.dims();
    let total = stats
        .covariances()
        .iter()
        .fold(CMatrix::zeros(dims.antennas, dims.antennas), |acc, c| acc + c);
    eigen_phases(&total, dims.rf_chains)
}

/// Single-state policy with eigen-beam phases and `P_max / K` per user.
pub fn equal_power_policy(stats: &ChannelStats) -> ControlPolicy {
    let dims = stats.dims();
    ControlPolicy::single(ControlVariable::equal_power(
        eigen_beam_phases(stats),
        dims.users,
        dims.max_power,
    ))
}

/// Runs the optimizer from the seeded initial policy.
pub fn optimize_policy(
    config: &ExperimentConfig,
    ctx: &PointContext,
    csi: CsiMode,
) -> Result<(ControlPolicy, OptimizerTrace)> {
    let pipeline = ctx.pipeline(csi);
    let init = initialize_policy(&ctx.stats, derive_seed(config.seeds.stats, INIT_STREAM));
    let options = SscaOptions {
        iterations: config.optimizer.iterations,
        batch_size: config.optimizer.batch_size,
        seed: config.seeds.optimizer,
        eval_every: config.optimizer.trace_every,
        eval_samples: config.optimizer.trace_samples,
        eval_seed: derive_seed(config.seeds.optimizer, TRACE_STREAM),
    };
    Ok(ssca_optimize(
        &pipeline,
        &config.utility,
        &config.schedule,
        &init,
        &options,
    )?)
}

/// `(T - T_p) / T` when overhead accounting is on, else one.
pub fn overhead_factor(config: &ExperimentConfig, dims: &SystemDims) -> f64 {
    if config.pilot_overhead {
        (dims.slot_symbols - dims.pilots.min(dims.slot_symbols)) as f64 / dims.slot_symbols as f64
    } else {
        1.0
    }
}

/// Utility, sum rate and efficiency of Monte-Carlo rates.
pub fn metrics_from_rates(config: &ExperimentConfig, dims: &SystemDims, mc: &MonteCarloRates) -> Result<Metrics> {
    let scale = overhead_factor(config, dims);
    let user_rates: Vec<f64> = mc.mean.iter().map(|r| r * scale).collect();
    let sum_rate: f64 = user_rates.iter().sum();
    let pm = &config.power_model;
    Ok(Metrics {
        utility: config.utility.value(&user_rates)?,
        sum_rate,
        ee: pm.energy_efficiency(sum_rate, dims.antennas, dims.rf_chains, pm.transmit_mw(dims.max_power)),
        user_rates,
        sum_rate_std_error: mc.sum_rate_std_error * scale,
        user_rate_std_errors: mc.std_error.iter().map(|s| s * scale).collect(),
    })
}

/// One scheme at one point; returns the metrics plus the optimizer trace
/// and slot-replay counts for optimized schemes.
#[derive(Debug, Clone)]
pub struct SchemeOutcome {
    pub metrics: Metrics,
    pub policy: ControlPolicy,
    pub trace: Option<OptimizerTrace>,
    pub state_counts: Option<Vec<usize>>,
}

pub fn run_scheme(config: &ExperimentConfig, ctx: &PointContext, scheme: Scheme) -> Result<SchemeOutcome> {
    let (policy, pipeline, trace) = match scheme {
        Scheme::Rcshp | Scheme::PerfectCsiRcshp => {
            let csi = if scheme == Scheme::Rcshp {
                config.csi_mode
            } else {
                CsiMode::Perfect
            };
            let (policy, trace) = optimize_policy(config, ctx, csi)?;
            (policy, ctx.pipeline(csi), Some(trace))
        }
        Scheme::DualityEqualPower => (equal_power_policy(&ctx.stats), ctx.pipeline(config.csi_mode), None),
        Scheme::RzfEqualPower => {
            let alpha = ctx.dims.users as f64 / ctx.dims.max_power;
            let pipeline = ctx.pipeline(config.csi_mode).with_precoder(PrecoderKind::Rzf { alpha });
            (equal_power_policy(&ctx.stats), pipeline, None)
        }
    };
    let mc = average_rates(&policy, &pipeline, &ctx.eval)?;
    let metrics = metrics_from_rates(config, &ctx.dims, &mc)?;
    let state_counts = if scheme.is_optimized() {
        let replay = apply_policy(
            &policy,
            &pipeline,
            config.slots_per_block,
            derive_seed(config.seeds.evaluation, SLOT_STREAM),
        )?;
        Some(replay.state_counts)
    } else {
        None
    };
    Ok(SchemeOutcome {
        metrics,
        policy,
        trace,
        state_counts,
    })
}

pub fn trace_file_name(axis: SweepAxis, value: f64, scheme: Scheme) -> String {
    format!("trace_{}_{}_{}.csv", axis.as_str(), value, scheme.as_str())
}

/// All sweep points and schemes. Points and schemes run in parallel; the
/// output order is sweep order, then scheme order. A failing point or
/// scheme yields a record carrying the error instead of aborting the run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let config_hash = config.hash()?;
    let base = build_stats(config)?;
    let values = config.sweep_values();
    let contexts: Vec<Result<PointContext>> = values
        .par_iter()
        .map(|&v| PointContext::new(config, &base, v))
        .collect();

    let jobs: Vec<(usize, Scheme)> = (0..values.len())
        .flat_map(|i| config.schemes.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<(ExperimentRecord, Option<RunTrace>)> = jobs
        .par_iter()
        .map(|&(i, scheme)| {
            let start = Instant::now();
            let value = values[i];
            let outcome = match &contexts[i] {
                Ok(ctx) => run_scheme(config, ctx, scheme),
                Err(e) => Err(SimError::Config(format!("sweep point setup failed: {e}"))),
            };
            let mut record = ExperimentRecord {
                config_hash: config_hash.clone(),
                sweep_axis: config.sweep.axis,
                sweep_value: value,
                scheme,
                seed: config.seeds.stats,
                metrics: None,
                error: None,
                trace: None,
                state_counts: None,
                wall_time_s: 0.0,
            };
            let mut trace = None;
            match outcome {
                Ok(out) => {
                    record.metrics = Some(out.metrics);
                    record.state_counts = out.state_counts;
                    if let Some(t) = out.trace {
                        let file_name = trace_file_name(config.sweep.axis, value, scheme);
                        record.trace = Some(file_name.clone());
                        trace = Some(RunTrace { file_name, trace: t });
                    }
                }
                Err(e) => record.error = Some(e.to_string()),
            }
            record.wall_time_s = start.elapsed().as_secs_f64();
            (record, trace)
        })
        .collect();

    let mut records = Vec::with_capacity(results.len());
    let mut traces = Vec::new();
    for (record, trace) in results {
        records.push(record);
        traces.extend(trace);
    }
    Ok(RunOutput {
        config_hash,
        records,
        traces,
    })
}

/// Optimizer trace at the base point of the configuration (no sweep).
pub fn convergence_trace(config: &ExperimentConfig) -> Result<OptimizerTrace> {
    config.validate()?;
    let mut base_config = config.clone();
    base_config.sweep.axis = SweepAxis::None;
    let base = build_stats(&base_config)?;
    let ctx = PointContext::new(&base_config, &base, 0.0)?;
    Ok(optimize_policy(&base_config, &ctx, base_config.csi_mode)?.1)
}

/// Slot-level replay of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotReplay {
    /// Empirical per-user average rates over the slots.
    pub mean_rates: Vec<f64>,
    pub state_counts: Vec<usize>,
    /// State used in each slot.
    pub states: Vec<usize>,
}

/// Draws a state from `q` and a fresh channel for every slot and runs the
/// pipeline of that state.
pub fn apply_policy(policy: &ControlPolicy, pipeline: &Pipeline<'_>, n_slots: usize, seed: u64) -> Result<SlotReplay> {
    let dims = pipeline.stats.dims();
    policy.validate(dims)?;
    let categorical = WeightedIndex::new(&policy.q)
        .map_err(|e| SimError::Config(format!("time-sharing vector {:?}: {e}", policy.q)))?;
    let prepared = policy
        .gammas
        .iter()
        .map(|g| pipeline.prepare(g))
        .collect::<rcshp_core::Result<Vec<_>>>()?;
    let sampler = ChannelSampler::new(pipeline.stats)?;
    let mut rng = seeded(seed);
    let channel_seed = derive_seed(seed, 1);
    let mut states = Vec::with_capacity(n_slots);
    let mut state_counts = vec![0; policy.states()];
    let mut sums = vec![0.0; dims.users];
    for slot in 0..n_slots {
        let l = categorical.sample(&mut rng);
        let sample = sampler.draw_indexed(channel_seed, slot as u64);
        let rates = prepared[l].rates(&sample)?;
        for (s, r) in sums.iter_mut().zip(rates.iter()) {
            *s += r;
        }
        states.push(l);
        state_counts[l] += 1;
    }
    let n = n_slots.max(1) as f64;
    Ok(SlotReplay {
        mean_rates: sums.into_iter().map(|s| s / n).collect(),
        state_counts,
        states,
    })
}
