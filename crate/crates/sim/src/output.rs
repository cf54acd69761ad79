//! Results CSV, JSON sidecar and optimizer traces.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rcshp_core::ssca::OptimizerTrace;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Result, SimError};
use crate::harness::{ExperimentRecord, RunOutput};

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSON: &str = "results.json";
pub const TRACE_DIR: &str = "traces";

/// `sweep_axis,sweep_value,scheme,seed,utility,sum_rate,ee`, the per-user
/// rates, then standard errors and a status column.
pub fn csv_header(users: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "sweep_axis",
        "sweep_value",
        "scheme",
        "seed",
        "utility",
        "sum_rate",
        "ee",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..users).map(|k| format!("user_rate_{k}")));
    h.push("sum_rate_se".into());
    h.extend((0..users).map(|k| format!("user_rate_se_{k}")));
    h.push("status".into());
    h
}

/// One row per record; metrics are blank and `status` holds the message
/// for failed points. No timing columns.
pub fn write_csv<W: Write>(writer: W, records: &[ExperimentRecord], users: usize) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(csv_header(users))?;
    for r in records {
        let mut row = vec![
            r.sweep_axis.as_str().to_string(),
            r.sweep_value.to_string(),
            r.scheme.as_str().to_string(),
            r.seed.to_string(),
        ];
        match &r.metrics {
            Some(m) => {
                row.extend([m.utility, m.sum_rate, m.ee].iter().map(f64::to_string));
                row.extend(m.user_rates.iter().map(f64::to_string));
                row.push(m.sum_rate_std_error.to_string());
                row.extend(m.user_rate_std_errors.iter().map(f64::to_string));
                row.push("ok".into());
            }
            None => {
                row.extend(std::iter::repeat_n(String::new(), 3 + 2 * users + 1));
                row.push(format!("error: {}", r.error.as_deref().unwrap_or("unknown")));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `iter,surrogate_utility,mc_utility,step_norm_gamma,step_norm_q`, with an
/// empty `mc_utility` on iterations without a held-out evaluation.
pub fn write_trace_csv<W: Write>(writer: W, trace: &OptimizerTrace) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "iter",
        "surrogate_utility",
        "mc_utility",
        "step_norm_gamma",
        "step_norm_q",
    ])?;
    for r in &trace.records {
        w.write_record([
            r.iter.to_string(),
            r.surrogate_utility.to_string(),
            r.mc_utility.map(|v| v.to_string()).unwrap_or_default(),
            r.step_norm_gamma.to_string(),
            r.step_norm_q.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Sidecar: the resolved configuration, its hash, wall time and the full
/// records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub wall_time_s: f64,
    pub records: Vec<ExperimentRecord>,
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(SimError::io(path))
}

pub fn write_csv_file(path: &Path, records: &[ExperimentRecord], users: usize) -> Result<()> {
    write_csv(create(path)?, records, users).map_err(|source| SimError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_trace_file(path: &Path, trace: &OptimizerTrace) -> Result<()> {
    write_trace_csv(create(path)?, trace).map_err(|source| SimError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json_file(path: &Path, summary: &RunSummary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary).map_err(|source| SimError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(SimError::io(path))
}

pub fn read_json_file(path: &Path) -> Result<RunSummary> {
    let text = fs::read_to_string(path).map_err(SimError::io(path))?;
    serde_json::from_str(&text).map_err(|source| SimError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Paths written by [`emit_results`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmittedFiles {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub traces: Vec<PathBuf>,
}

/// Writes `results.csv`, `results.json` and one trace per optimized run
/// under `dir`.
pub fn emit_results(
    dir: &Path,
    config: &ExperimentConfig,
    output: &RunOutput,
    wall_time_s: f64,
) -> Result<EmittedFiles> {
    fs::create_dir_all(dir).map_err(SimError::io(dir))?;
    let csv = dir.join(RESULTS_CSV);
    write_csv_file(&csv, &output.records, config.dims.users)?;
    let mut traces = Vec::new();
    if !output.traces.is_empty() {
        let trace_dir = dir.join(TRACE_DIR);
        fs::create_dir_all(&trace_dir).map_err(SimError::io(&trace_dir))?;
        for t in &output.traces {
            let path = trace_dir.join(&t.file_name);
            write_trace_file(&path, &t.trace)?;
            traces.push(path);
        }
    }
    let json = dir.join(RESULTS_JSON);
    let summary = RunSummary {
        config_hash: output.config_hash.clone(),
        config: config.clone(),
        wall_time_s,
        records: output.records.clone(),
    };
    write_json_file(&json, &summary)?;
    Ok(EmittedFiles { csv, json, traces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Profile, Scheme, SweepAxis};
    use crate::harness::Metrics;
    use rcshp_core::ssca::TraceRecord;

    fn record(value: f64, scheme: Scheme, ok: bool) -> ExperimentRecord {
        ExperimentRecord {
            config_hash: "ab".into(),
            sweep_axis: SweepAxis::Pilots,
            sweep_value: value,
            scheme,
            seed: 7,
            metrics: ok.then(|| Metrics {
                utility: 3.5,
                sum_rate: 3.5,
                ee: 1.25,
                user_rates: vec![1.5, 2.0],
                sum_rate_std_error: 0.1,
                user_rate_std_errors: vec![0.05, 0.07],
            }),
            error: (!ok).then(|| "boom".to_string()),
            trace: None,
            state_counts: None,
            wall_time_s: 0.5,
        }
    }

    fn csv_text(records: &[ExperimentRecord]) -> String {
        let mut buf = Vec::new();
        write_csv(&mut buf, records, 2).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn empty_records_give_header_only() {
        let text = csv_text(&[]);
        assert_eq!(
            text,
            "sweep_axis,sweep_value,scheme,seed,utility,sum_rate,ee,user_rate_0,user_rate_1,sum_rate_se,user_rate_se_0,user_rate_se_1,status\n"
        );
    }

    #[test]
    fn one_row_per_record() {
        let recs: Vec<_> = [2.0, 3.0, 4.0]
            .iter()
            .flat_map(|&v| [record(v, Scheme::Rcshp, true), record(v, Scheme::RzfEqualPower, true)])
            .collect();
        let text = csv_text(&recs);
        assert_eq!(text.lines().count(), 1 + 6);
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "pilots,2,rcshp,7,3.5,3.5,1.25,1.5,2,0.1,0.05,0.07,ok"
        );
        assert!(!text.contains("0.5"), "wall time leaked into the CSV");
    }

    #[test]
    fn failed_rows_keep_the_column_count() {
        let text = csv_text(&[record(2.0, Scheme::Rcshp, false)]);
        let row = text.lines().nth(1).unwrap();
        assert_eq!(row.split(',').count(), 13);
        assert!(row.ends_with("error: boom"));
    }

    #[test]
    fn trace_columns() {
        let trace = OptimizerTrace {
            records: vec![TraceRecord {
                iter: 1,
                surrogate_utility: 2.0,
                mc_utility: None,
                step_norm_gamma: 0.5,
                step_norm_q: 0.0,
                feasibility: 0.0,
                q_iterations: 3,
            }],
        };
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &trace).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iter,surrogate_utility,mc_utility,step_norm_gamma,step_norm_q\n1,2,,0.5,0\n"
        );
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let summary = RunSummary {
            config_hash: "ab".into(),
            config: ExperimentConfig::profile(Profile::Desk),
            wall_time_s: 1.5,
            records: vec![record(2.0, Scheme::Rcshp, true), record(3.0, Scheme::Rcshp, false)],
        };
        write_json_file(&path, &summary).unwrap();
        assert_eq!(read_json_file(&path).unwrap(), summary);
    }

    #[test]
    fn io_errors_name_the_path() {
        let err = write_csv_file(Path::new("/nonexistent-dir/x.csv"), &[], 2).unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/x.csv"));
    }

    proptest::proptest! {
        #[test]
        fn rows_match_header_and_floats_round_trip(
            rates in proptest::collection::vec(0.0..1e3f64, 1..6),
            ok in proptest::collection::vec(proptest::bool::ANY, 0..5),
            message in "[ -~]{0,20}",
        ) {
            let users = rates.len();
            let records: Vec<ExperimentRecord> = ok
                .iter()
                .map(|&ok| {
                    let mut r = record(2.0, Scheme::Rcshp, ok);
                    if let Some(m) = r.metrics.as_mut() {
                        m.user_rates = rates.clone();
                        m.user_rate_std_errors = rates.iter().map(|x| x / 7.0).collect();
                        m.sum_rate = rates.iter().sum();
                    } else {
                        r.error = Some(message.clone());
                    }
                    r
                })
                .collect();
            let mut buf = Vec::new();
            write_csv(&mut buf, &records, users).unwrap();
            let mut reader = csv::Reader::from_reader(buf.as_slice());
            let width = reader.headers().unwrap().len();
            proptest::prop_assert_eq!(width, csv_header(users).len());
            for (row, r) in reader.records().zip(&records) {
                let row = row.unwrap();
                proptest::prop_assert_eq!(row.len(), width);
                if let Some(m) = &r.metrics {
                    for (k, x) in m.user_rates.iter().enumerate() {
                        proptest::prop_assert_eq!(row[7 + k].parse::<f64>().unwrap(), *x);
                    }
                    proptest::prop_assert_eq!(row[5].parse::<f64>().unwrap(), m.sum_rate);
                } else {
                    proptest::prop_assert!(row[width - 1].starts_with("error: "));
                }
            }
        }

        #[test]
        fn seeded_profiles_validate_and_round_trip(base in 0u64..(i64::MAX as u64 - 2)) {
            let mut c = ExperimentConfig::profile(Profile::Desk);
            c.seeds = crate::config::Seeds::from_base(base);
            c.validate().unwrap();
            let back = ExperimentConfig::from_toml_over(ExperimentConfig::profile(Profile::Paper), &c.to_toml().unwrap()).unwrap();
            proptest::prop_assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        }
    }
}
