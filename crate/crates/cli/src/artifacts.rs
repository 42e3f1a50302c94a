//! Everything run_scenario and sweep write to disk, plus the reader behind
//! the report subcommand. Column sets are frozen; golden tests pin them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use peerslam_core::g2o::{write_g2o, G2oDocument};
use peerslam_core::metrics::{RunReport, RUN_REPORT_HEADER};

use crate::config::{ScenarioConfig, SweepParameter};
use crate::run::{execute_run, RunArtifacts};
use crate::{CliError, Result};

pub const CANDIDATE_HEADER: &str =
    "robot_a,robot_b,index_in_pair,from,to,outlier_truth,accepted,mean_distance_sq";

pub const BYTES_HEADER: &str =
    "source,round_sent,round_delivered,sender,receiver,message_type,item_count,bytes,delivered";

pub const AGGREGATE_HEADER: &str = "runs_requested,runs_succeeded,runs_failed,\
ate_m_mean,ate_m_std,pct_outliers_rejected_mean,pct_outliers_rejected_std,\
pct_inliers_rejected_mean,pct_inliers_rejected_std,bytes_frontend_mean,bytes_pgo_mean,\
bytes_total_mean";

pub const FAILURES_HEADER: &str = "run,seed,error";

pub const SWEEP_HEADER: &str = "value,runs_succeeded,ate_m_mean,ate_m_std,\
pct_outliers_rejected_mean,pct_outliers_rejected_std,pct_inliers_rejected_mean,\
pct_inliers_rejected_std,bytes_total_mean";

/// Quotes a CSV field when it holds a delimiter, quote, or newline.
fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn opt_field(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

/// Mean and sample standard deviation; std is 0 for fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn mean_std_opt(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(values);
        (Some(m), Some(s))
    }
}

/// Per-scenario summary across the runs that finished.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub runs_requested: u64,
    pub runs_succeeded: u64,
    pub runs_failed: u64,
    pub ate_m_mean: Option<f64>,
    pub ate_m_std: Option<f64>,
    pub pct_outliers_rejected_mean: Option<f64>,
    pub pct_outliers_rejected_std: Option<f64>,
    pub pct_inliers_rejected_mean: Option<f64>,
    pub pct_inliers_rejected_std: Option<f64>,
    pub bytes_frontend_mean: Option<f64>,
    pub bytes_pgo_mean: Option<f64>,
    pub bytes_total_mean: Option<f64>,
}

pub fn aggregate(reports: &[RunReport], runs_requested: u64) -> Aggregate {
    let ates: Vec<f64> = reports.iter().map(|r| r.ate_m).collect();
    let pct_out: Vec<f64> = reports
        .iter()
        .filter_map(|r| r.stats.pct_outliers_rejected)
        .collect();
    let pct_in: Vec<f64> = reports
        .iter()
        .filter_map(|r| r.stats.pct_inliers_rejected)
        .collect();
    let bytes_frontend: Vec<f64> = reports.iter().map(|r| r.bytes_frontend as f64).collect();
    let bytes_pgo: Vec<f64> = reports.iter().map(|r| r.bytes_pgo as f64).collect();
    let bytes_total: Vec<f64> = reports.iter().map(|r| r.bytes_total() as f64).collect();
    let (ate_m_mean, ate_m_std) = mean_std_opt(&ates);
    let (pct_outliers_rejected_mean, pct_outliers_rejected_std) = mean_std_opt(&pct_out);
    let (pct_inliers_rejected_mean, pct_inliers_rejected_std) = mean_std_opt(&pct_in);
    Aggregate {
        runs_requested,
        runs_succeeded: reports.len() as u64,
        runs_failed: runs_requested - reports.len() as u64,
        ate_m_mean,
        ate_m_std,
        pct_outliers_rejected_mean,
        pct_outliers_rejected_std,
        pct_inliers_rejected_mean,
        pct_inliers_rejected_std,
        bytes_frontend_mean: mean_std_opt(&bytes_frontend).0,
        bytes_pgo_mean: mean_std_opt(&bytes_pgo).0,
        bytes_total_mean: mean_std_opt(&bytes_total).0,
    }
}

impl Aggregate {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.runs_requested,
            self.runs_succeeded,
            self.runs_failed,
            opt_field(self.ate_m_mean),
            opt_field(self.ate_m_std),
            opt_field(self.pct_outliers_rejected_mean),
            opt_field(self.pct_outliers_rejected_std),
            opt_field(self.pct_inliers_rejected_mean),
            opt_field(self.pct_inliers_rejected_std),
            opt_field(self.bytes_frontend_mean),
            opt_field(self.bytes_pgo_mean),
            opt_field(self.bytes_total_mean),
        )
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    manifest_schema: u32,
    tool: &'static str,
    version: &'static str,
    base_seed: u64,
    scenario: &'a ScenarioConfig,
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    let mut file = fs::File::create(path)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))?;
    file.write_all(content.as_bytes())
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn candidate_csv(artifacts: &RunArtifacts) -> String {
    let mut out = String::from(CANDIDATE_HEADER);
    out.push('\n');
    for row in &artifacts.candidate_rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.robot_a,
            row.robot_b,
            row.index_in_pair,
            row.from,
            row.to,
            row.outlier_truth,
            row.accepted,
            opt_field(row.mean_distance_sq),
        )
        .expect("string write");
    }
    out
}

fn bytes_csv(artifacts: &RunArtifacts) -> String {
    let mut out = String::from(BYTES_HEADER);
    out.push('\n');
    for row in &artifacts.byte_rows {
        let r = &row.record;
        writeln!(
            out,
            "{},{},{},{},{},{:?},{},{},{}",
            row.source,
            r.round_sent,
            r.round_delivered,
            r.sender,
            r.receiver,
            r.class,
            r.item_count,
            r.bytes,
            r.delivered,
        )
        .expect("string write");
    }
    out
}

/// Writes one run's artifact directory: estimate and ground-truth g2o
/// dumps, the per-candidate table, and the merged transmission log.
fn write_run_dir(dir: &Path, artifacts: &RunArtifacts) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;

    let mut edges = Vec::new();
    for robot in &artifacts.world.robots {
        edges.extend(robot.graph.odometry.values().cloned());
    }
    edges.extend(artifacts.accepted_closures.iter().cloned());
    let estimate_doc = G2oDocument {
        poses: artifacts.estimates.clone(),
        edges,
    };
    let mut buffer = Vec::new();
    write_g2o(&mut buffer, &estimate_doc)?;
    write_text(
        &dir.join("estimate.g2o"),
        std::str::from_utf8(&buffer).expect("g2o output is ascii"),
    )?;

    let mut buffer = Vec::new();
    write_g2o(&mut buffer, &artifacts.world.ground_truth_document())?;
    write_text(
        &dir.join("ground_truth.g2o"),
        std::str::from_utf8(&buffer).expect("g2o output is ascii"),
    )?;

    write_text(&dir.join("candidates.csv"), &candidate_csv(artifacts))?;
    write_text(&dir.join("bytes.csv"), &bytes_csv(artifacts))?;
    Ok(())
}

/// Outcome of a whole scenario invocation.
pub struct ScenarioOutcome {
    pub reports: Vec<RunReport>,
    pub failures: Vec<(u64, u64, String)>,
    pub aggregate: Aggregate,
    pub output_dir: PathBuf,
}

/// Runs every run of the scenario, records failures without stopping, and
/// writes the output tree: manifest.toml, runs.csv, aggregate.csv,
/// failures.csv, and one run_NNN directory per successful run.
pub fn run_scenario(config: &ScenarioConfig, base_seed: u64) -> Result<ScenarioOutcome> {
    run_scenario_into(config, base_seed, &config.output_dir)
}

/// Same as [`run_scenario`] with an explicit output root, so sweeps can
/// redirect each value's tree.
pub fn run_scenario_into(
    config: &ScenarioConfig,
    base_seed: u64,
    output_dir: &Path,
) -> Result<ScenarioOutcome> {
    config.validate()?;
    fs::create_dir_all(output_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", output_dir.display())))?;

    let manifest = Manifest {
        manifest_schema: 1,
        tool: "peerslam",
        version: env!("CARGO_PKG_VERSION"),
        base_seed,
        scenario: config,
    };
    let manifest_text = toml::to_string(&manifest)
        .map_err(|e| CliError::Io(format!("manifest serialization: {e}")))?;
    write_text(&output_dir.join("manifest.toml"), &manifest_text)?;

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for run_index in 0..config.runs {
        match execute_run(config, run_index, base_seed) {
            Ok(artifacts) => {
                let run_dir = output_dir.join(format!("run_{run_index:03}"));
                write_run_dir(&run_dir, &artifacts)?;
                reports.push(artifacts.report);
            }
            Err(error) => {
                failures.push((
                    run_index,
                    crate::run::run_seed(base_seed, run_index),
                    error.to_string(),
                ));
            }
        }
    }

    let mut runs_csv = String::from(RUN_REPORT_HEADER);
    runs_csv.push('\n');
    for report in &reports {
        runs_csv.push_str(&report.csv_row());
        runs_csv.push('\n');
    }
    write_text(&output_dir.join("runs.csv"), &runs_csv)?;

    let aggregate = aggregate(&reports, config.runs);
    let mut aggregate_csv = String::from(AGGREGATE_HEADER);
    aggregate_csv.push('\n');
    aggregate_csv.push_str(&aggregate.csv_row());
    aggregate_csv.push('\n');
    write_text(&output_dir.join("aggregate.csv"), &aggregate_csv)?;

    let mut failures_csv = String::from(FAILURES_HEADER);
    failures_csv.push('\n');
    for (run, seed, error) in &failures {
        writeln!(failures_csv, "{run},{seed},{}", csv_escape(error)).expect("string write");
    }
    write_text(&output_dir.join("failures.csv"), &failures_csv)?;

    Ok(ScenarioOutcome {
        reports,
        failures,
        aggregate,
        output_dir: output_dir.to_path_buf(),
    })
}

/// One sweep value's summary.
pub struct SweepPoint {
    pub value: f64,
    pub aggregate: Aggregate,
}

/// Runs the scenario once per value of the swept parameter, with the same
/// per-run seeds at every value, and writes sweep_<parameter>.csv plus a
/// full scenario tree per value under the output directory.
pub fn sweep(
    config: &ScenarioConfig,
    parameter: SweepParameter,
    values: &[f64],
    base_seed: u64,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let root = config.output_dir.clone();
    fs::create_dir_all(&root)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", root.display())))?;

    let mut points = Vec::new();
    for &value in values {
        let mut variant = config.clone();
        parameter.apply(&mut variant, value)?;
        let dir = root.join(format!("{}_{}", parameter.name(), value));
        let outcome = run_scenario_into(&variant, base_seed, &dir)?;
        points.push(SweepPoint {
            value,
            aggregate: outcome.aggregate,
        });
    }

    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for point in &points {
        let a = &point.aggregate;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            point.value,
            a.runs_succeeded,
            opt_field(a.ate_m_mean),
            opt_field(a.ate_m_std),
            opt_field(a.pct_outliers_rejected_mean),
            opt_field(a.pct_outliers_rejected_std),
            opt_field(a.pct_inliers_rejected_mean),
            opt_field(a.pct_inliers_rejected_std),
            opt_field(a.bytes_total_mean),
        )
        .expect("string write");
    }
    write_text(&root.join(format!("sweep_{}.csv", parameter.name())), &csv)?;
    Ok(points)
}

/// Splits one CSV line, honoring quoted fields.
fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut field = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' if quoted && chars.peek() == Some(&'"') => {
                chars.next();
                field.push('"');
            }
            '"' => quoted = !quoted,
            ',' if !quoted => fields.push(std::mem::take(&mut field)),
            other => field.push(other),
        }
    }
    fields.push(field);
    fields
}

/// Header-keyed view of a small CSV file.
pub struct CsvTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| CliError::Io(format!("{} is empty", path.display())))?;
        let columns = split_csv_line(header);
        let rows = lines.map(split_csv_line).collect();
        Ok(Self { columns, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| CliError::Io(format!("missing column {name}")))
    }

    pub fn get<'a>(&'a self, row: &'a [String], name: &str) -> Result<&'a str> {
        Ok(self.column(name).map(|i| row[i].as_str())?)
    }
}

/// Human-readable digest of a finished scenario directory.
pub fn report(dir: &Path) -> Result<String> {
    let runs = CsvTable::read(&dir.join("runs.csv"))?;
    let aggregate = CsvTable::read(&dir.join("aggregate.csv"))?;
    let mut out = String::new();
    writeln!(out, "scenario output: {}", dir.display()).expect("string write");

    if let Some(row) = aggregate.rows.first() {
        let field = |name: &str| -> Result<String> {
            Ok(aggregate.get(row, name)?.to_string())
        };
        let pick = |name: &str| -> Result<String> {
            let v = field(name)?;
            Ok(if v.is_empty() { "n/a".to_string() } else { v })
        };
        writeln!(
            out,
            "runs: {} requested, {} succeeded, {} failed",
            field("runs_requested")?,
            field("runs_succeeded")?,
            field("runs_failed")?
        )
        .expect("string write");
        writeln!(
            out,
            "translation error: {} m mean ({} std)",
            pick("ate_m_mean")?,
            pick("ate_m_std")?
        )
        .expect("string write");
        writeln!(
            out,
            "outliers rejected: {} % mean; inliers rejected: {} % mean",
            pick("pct_outliers_rejected_mean")?,
            pick("pct_inliers_rejected_mean")?
        )
        .expect("string write");
        writeln!(
            out,
            "bytes per run: {} frontend, {} back-end, {} total (mean)",
            pick("bytes_frontend_mean")?,
            pick("bytes_pgo_mean")?,
            pick("bytes_total_mean")?
        )
        .expect("string write");
    }
    writeln!(out, "per-run rows: {}", runs.rows.len()).expect("string write");

    let failures_path = dir.join("failures.csv");
    if failures_path.exists() {
        let failures = CsvTable::read(&failures_path)?;
        if !failures.rows.is_empty() {
            writeln!(out, "failures:").expect("string write");
            for row in &failures.rows {
                writeln!(
                    out,
                    "  run {}: {}",
                    failures.get(row, "run")?,
                    failures.get(row, "error")?
                )
                .expect("string write");
            }
        }
    }
    Ok(out)
}

/// Sorted map of sweep CSV rows: value -> (ate mean, inlier rejection mean,
/// outlier rejection mean). Used by tests and the report path.
pub fn read_sweep_csv(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let table = CsvTable::read(path)?;
    let mut map = BTreeMap::new();
    for row in &table.rows {
        map.insert(row[0].clone(), row.clone());
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_escaping_round_trips_through_the_splitter() {
        let original = vec![
            "plain".to_string(),
            "with,comma".to_string(),
            "with \"quotes\"".to_string(),
        ];
        let line: Vec<String> = original.iter().map(|f| csv_escape(f)).collect();
        let parsed = split_csv_line(&line.join(","));
        assert_eq!(parsed, original);
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m - 2.5).abs() < 1e-12);
        // Sample variance of 1..4 is 5/3.
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let (m1, s1) = mean_std(&[7.0]);
        assert_eq!((m1, s1), (7.0, 0.0));
    }

    #[test]
    fn aggregate_counts_applicable_percentages_only() {
        use peerslam_core::metrics::{rejection_stats, RunReport};
        let template = RunReport {
            run_index: 0,
            seed: 1,
            ate_m: 0.5,
            stats: rejection_stats(&[true, false], &[1]),
            candidates_total: 2,
            accepted_total: 1,
            bytes_frontend: 100,
            bytes_pgo: 50,
            converged: true,
            pcm_enabled: true,
            pcm_threshold: 0.01,
            descriptor_match_threshold: 0.12,
            min_correspondences: 0,
            outlier_fraction: 0.3,
        };
        let mut no_outliers = template.clone();
        no_outliers.stats = rejection_stats(&[false, false], &[0, 1]);
        let agg = aggregate(&[template, no_outliers], 3);
        assert_eq!(agg.runs_succeeded, 2);
        assert_eq!(agg.runs_failed, 1);
        // One run had outliers (100% rejected); the other contributes
        // nothing to that mean.
        assert_eq!(agg.pct_outliers_rejected_mean, Some(100.0));
        assert_eq!(agg.pct_inliers_rejected_mean, Some(0.0));
        assert_eq!(agg.bytes_total_mean, Some(150.0));
    }
}
