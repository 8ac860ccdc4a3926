//! Command-line front end: run scenarios (optionally sweeping one parameter
//! across several values) and extract plot-ready CSV tables from saved
//! reports.
//!
//! Exit codes: 0 success, 1 usage error, 2 scenario error, 3 runtime error.
//! All outputs are UTF-8 text and byte-stable for a given (scenario, seed).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use pedsafe_core::engine::{
    collect_errors, error_cdf, run, EngineError, EventKind, Movement, Scenario, SimReport,
};
use pedsafe_core::geo::{
    geodetic_distance, project_to_segment, GeoPoint, SegmentId, SidewalkSegment,
};

const EXIT_USAGE: u8 = 1;
const EXIT_SCENARIO: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "pedsafe",
    version,
    about = "Deterministic pedestrian-safety simulation runner",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario (or a one-parameter sweep) and write report + metrics.
    Run(RunArgs),
    /// Extract metric tables from a saved report.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scenario's random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Sweep one parameter over several values, e.g.
    /// `vehicle_speed_kmh=20,30,40,50`. Each value runs in its own
    /// subdirectory and a summary lands in sweep.csv.
    #[arg(long, value_name = "NAME=V1,V2,...")]
    sweep: Option<String>,
    /// Metric tables to write per run, comma separated (see `metrics --help`
    /// for names; `all` selects every table).
    #[arg(long, value_delimiter = ',', value_name = "NAME[,NAME]")]
    metrics: Vec<String>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Saved report JSON (written by `run`).
    #[arg(long)]
    report: PathBuf,
    /// Tables to emit: location_error_cdf, raw_error_cdf, location, energy,
    /// viewing, warnings, warning_events, comms, or all.
    #[arg(long, value_delimiter = ',', default_value = "all", value_name = "NAME[,NAME]")]
    metrics: Vec<String>,
    /// Write `<name>.csv` files into this directory instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Error classes carrying their process exit code.
enum CliError {
    Usage(String),
    Scenario(String),
    Runtime(String),
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Parse { .. } | EngineError::Validation(_) => {
                CliError::Scenario(e.to_string())
            }
            EngineError::Runtime { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_error(context: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", context.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Metrics(args) => cmd_metrics(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Scenario(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_SCENARIO)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

// ====== run ======

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let selection = parse_selection(&args.metrics)?;
    let mut scenario = Scenario::load(&args.scenario)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }

    match &args.sweep {
        None => {
            let report = run(&scenario)?;
            write_run_outputs(&args.out, &report, &selection)?;
            println!("wrote {}", args.out.join("report.json").display());
        }
        Some(spec) => {
            let sweep = SweepSpec::parse(spec)?;
            let mut summary = Vec::new();
            for &value in &sweep.values {
                let mut variant = scenario.clone();
                sweep.apply(&mut variant, value)?;
                let report = run(&variant)?;
                let dir = args.out.join(format!("{}-{}", sweep.name, format_value(value)));
                write_run_outputs(&dir, &report, &selection)?;
                summary.push(summary_row(sweep.name, value, &report));
            }
            let path = args.out.join("sweep.csv");
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "param",
                "value",
                "fix_count",
                "mean_raw_error_m",
                "mean_estimate_error_m",
                "energy_savings_fraction",
                "pedestrian_alerts",
                "mean_t_warning_s",
                "mean_collision_probability",
            ])
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            for row in &summary {
                w.write_record(row).map_err(|e| CliError::Runtime(e.to_string()))?;
            }
            write_file(&path, finish_csv(w)?)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn summary_row(param: &str, value: f64, report: &SimReport) -> Vec<String> {
    let m = &report.metrics;
    vec![
        param.to_string(),
        format_value(value),
        m.location.fix_count.to_string(),
        opt_cell(m.location.mean_raw_error),
        opt_cell(m.location.mean_estimate_error),
        opt_cell(m.energy.savings_fraction),
        m.warnings.pedestrian_alerts.to_string(),
        opt_cell(m.warnings.mean_t_warning),
        opt_cell(m.warnings.mean_probability),
    ]
}

fn write_run_outputs(dir: &Path, report: &SimReport, selection: &[Table]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let report_json = serde_json::to_string_pretty(report)
        .map_err(|e| CliError::Runtime(format!("serializing report: {e}")))?;
    write_file(&dir.join("report.json"), report_json + "\n")?;
    let metrics_json = serde_json::to_string_pretty(&report.metrics)
        .map_err(|e| CliError::Runtime(format!("serializing metrics: {e}")))?;
    write_file(&dir.join("metrics.json"), metrics_json + "\n")?;
    for table in selection {
        write_file(&dir.join(format!("{}.csv", table.name())), render_table(report, *table)?)?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: String) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| io_error(path, e))
}

/// Integer-valued floats drop the fraction so directory names and CSV cells
/// stay tidy (`seed-42`, not `seed-42.0`).
fn format_value(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

// ====== sweeps ======

const SWEEP_PARAMS: &[&str] = &["vehicle_speed_kmh", "gps_sigma", "seed"];

struct SweepSpec {
    name: &'static str,
    values: Vec<f64>,
}

impl SweepSpec {
    fn parse(spec: &str) -> Result<Self, CliError> {
        let (name, rest) = spec.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("sweep must look like name=v1,v2,... (got '{spec}')"))
        })?;
        let name = SWEEP_PARAMS.iter().find(|p| **p == name).copied().ok_or_else(|| {
            CliError::Usage(format!(
                "unknown sweep parameter '{name}'; valid parameters: {}",
                SWEEP_PARAMS.join(", ")
            ))
        })?;
        let values = rest
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| CliError::Usage(format!("sweep value '{s}' is not a number")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.is_empty() {
            return Err(CliError::Usage("sweep needs at least one value".to_string()));
        }
        Ok(SweepSpec { name, values })
    }

    fn apply(&self, scenario: &mut Scenario, value: f64) -> Result<(), CliError> {
        match self.name {
            "gps_sigma" => {
                if value < 0.0 {
                    return Err(CliError::Usage(format!("gps_sigma must be >= 0 (got {value})")));
                }
                scenario.noise.gps_sigma = value;
            }
            "seed" => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(CliError::Usage(format!(
                        "seed values must be non-negative integers (got {value})"
                    )));
                }
                scenario.seed = value as u64;
            }
            "vehicle_speed_kmh" => set_vehicle_speeds(scenario, value)?,
            other => unreachable!("unvalidated sweep parameter {other}"),
        }
        Ok(())
    }
}

/// Re-time every route vehicle to the new speed while preserving the moment
/// it passes its crossing, so a sweep compares the same conflict at
/// different speeds instead of quietly moving the conflict.
fn set_vehicle_speeds(scenario: &mut Scenario, kmh: f64) -> Result<(), CliError> {
    if kmh <= 0.0 {
        return Err(CliError::Usage(format!("vehicle_speed_kmh must be > 0 (got {kmh})")));
    }
    let v_new = kmh / 3.6;
    for veh in &mut scenario.vehicles {
        let crossing = *scenario.map.crossings.get(veh.crossing).ok_or_else(|| {
            CliError::Scenario(format!(
                "vehicle '{}' references missing crossing {}",
                veh.id, veh.crossing
            ))
        })?;
        match &mut veh.movement {
            Movement::Route { path, speed_mps, start_time } => {
                if *speed_mps <= 0.0 {
                    return Err(CliError::Scenario(format!(
                        "vehicle '{}' has non-positive speed; cannot re-time it",
                        veh.id
                    )));
                }
                let arc = arc_at_nearest_point(path, crossing).ok_or_else(|| {
                    CliError::Scenario(format!(
                        "vehicle '{}' needs a route with at least two points",
                        veh.id
                    ))
                })?;
                let pass_time = *start_time + arc / *speed_mps;
                *start_time = pass_time - arc / v_new;
                *speed_mps = v_new;
            }
            _ => {
                return Err(CliError::Scenario(format!(
                    "vehicle '{}' uses a fixed trajectory; vehicle_speed_kmh sweeps need \
                     route movement",
                    veh.id
                )));
            }
        }
    }
    Ok(())
}

/// Arc length along the polyline to the point on it nearest `target`.
fn arc_at_nearest_point(path: &[GeoPoint], target: GeoPoint) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    let mut arc = 0.0;
    for leg in path.windows(2) {
        let seg = SidewalkSegment { id: SegmentId(0), start: leg[0], end: leg[1], width: 0.0 };
        let (projected, d) = project_to_segment(target, &seg);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, arc + geodetic_distance(leg[0], projected)));
        }
        arc += geodetic_distance(leg[0], leg[1]);
    }
    best.map(|(_, a)| a)
}

// ====== metrics ======

fn cmd_metrics(args: MetricsArgs) -> Result<(), CliError> {
    let selection = parse_selection(&args.metrics)?;
    if selection.is_empty() {
        return Err(CliError::Usage("no metric tables selected".to_string()));
    }
    let text = std::fs::read_to_string(&args.report)
        .map_err(|e| CliError::Scenario(format!("{}: {e}", args.report.display())))?;
    let report: SimReport = serde_json::from_str(&text)
        .map_err(|e| CliError::Scenario(format!("{}: {e}", args.report.display())))?;

    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
            for table in &selection {
                let path = dir.join(format!("{}.csv", table.name()));
                write_file(&path, render_table(&report, *table)?)?;
                println!("wrote {}", path.display());
            }
        }
        None => {
            for table in &selection {
                print!("# {}\n{}", table.name(), render_table(&report, *table)?);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Table {
    LocationErrorCdf,
    RawErrorCdf,
    Location,
    Energy,
    Viewing,
    Warnings,
    WarningEvents,
    Comms,
}

const TABLES: &[(&str, Table)] = &[
    ("location_error_cdf", Table::LocationErrorCdf),
    ("raw_error_cdf", Table::RawErrorCdf),
    ("location", Table::Location),
    ("energy", Table::Energy),
    ("viewing", Table::Viewing),
    ("warnings", Table::Warnings),
    ("warning_events", Table::WarningEvents),
    ("comms", Table::Comms),
];

impl Table {
    fn name(self) -> &'static str {
        TABLES.iter().find(|(_, t)| *t == self).expect("every table is registered").0
    }
}

fn parse_selection(names: &[String]) -> Result<Vec<Table>, CliError> {
    let mut out = Vec::new();
    let mut push = |t: Table| {
        if !out.contains(&t) {
            out.push(t);
        }
    };
    for raw in names {
        let name = raw.trim();
        if name.is_empty() {
            continue;
        }
        if name == "all" {
            for (_, t) in TABLES {
                push(*t);
            }
            continue;
        }
        match TABLES.iter().find(|(n, _)| *n == name) {
            Some((_, t)) => push(*t),
            None => {
                return Err(CliError::Usage(format!(
                    "unknown metric '{name}'; valid names: {}, all",
                    TABLES.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
                )));
            }
        }
    }
    Ok(out)
}

fn render_table(report: &SimReport, table: Table) -> Result<String, CliError> {
    let err = |e: csv::Error| CliError::Runtime(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    let m = &report.metrics;
    match table {
        Table::LocationErrorCdf | Table::RawErrorCdf => {
            let raw = table == Table::RawErrorCdf;
            w.write_record(["error_m", "cumulative_fraction"]).map_err(err)?;
            for (e, f) in error_cdf(&collect_errors(&report.pedestrians, raw)) {
                w.write_record([e.to_string(), f.to_string()]).map_err(err)?;
            }
        }
        Table::Location => {
            write_kv_table(
                &mut w,
                &[
                    ("fix_count", m.location.fix_count.to_string()),
                    ("mean_raw_error_m", opt_cell(m.location.mean_raw_error)),
                    ("mean_estimate_error_m", opt_cell(m.location.mean_estimate_error)),
                    ("p95_raw_error_m", opt_cell(m.location.p95_raw_error)),
                    ("p95_estimate_error_m", opt_cell(m.location.p95_estimate_error)),
                ],
            )?;
        }
        Table::Energy => {
            write_kv_table(
                &mut w,
                &[
                    ("duty_joules", m.energy.duty_joules.to_string()),
                    ("always_on_joules", m.energy.always_on_joules.to_string()),
                    ("savings_fraction", opt_cell(m.energy.savings_fraction)),
                    ("zone_entries", m.energy.zone_entries.to_string()),
                    ("zone_entries_gps_active", m.energy.zone_entries_gps_active.to_string()),
                    ("wake_events", m.energy.wake_events.to_string()),
                    (
                        "min_wake_boundary_distance_m",
                        opt_cell(m.energy.min_wake_boundary_distance),
                    ),
                ],
            )?;
        }
        Table::Viewing => {
            write_kv_table(
                &mut w,
                &[
                    ("evaluated_ticks", m.viewing.evaluated_ticks.to_string()),
                    ("correct_ticks", m.viewing.correct_ticks.to_string()),
                    ("accuracy", opt_cell(m.viewing.accuracy)),
                ],
            )?;
        }
        Table::Warnings => {
            write_kv_table(
                &mut w,
                &[
                    ("pedestrian_alerts", m.warnings.pedestrian_alerts.to_string()),
                    ("driver_alerts", m.warnings.driver_alerts.to_string()),
                    ("standalone_alerts", m.warnings.standalone_alerts.to_string()),
                    ("mean_t_warning_s", opt_cell(m.warnings.mean_t_warning)),
                    ("mean_collision_probability", opt_cell(m.warnings.mean_probability)),
                    ("mean_abs_warning_error_s", opt_cell(m.warnings.mean_abs_warning_error)),
                ],
            )?;
        }
        Table::WarningEvents => {
            w.write_record(["t_s", "actor", "kind", "t_warning_s", "probability", "gt_t_warning_s"])
                .map_err(err)?;
            for e in &report.events {
                let (kind, t_warning, probability, gt) = match &e.kind {
                    EventKind::AlertPedestrian { t_warning, probability, gt_t_warning, .. } => {
                        ("pedestrian", Some(*t_warning), Some(*probability), *gt_t_warning)
                    }
                    EventKind::AlertDriver { probability, .. } => {
                        ("driver", None, Some(*probability), None)
                    }
                    EventKind::AlertStandAlone => ("stand_alone", None, None, None),
                    _ => continue,
                };
                w.write_record([
                    e.t.to_string(),
                    e.actor.clone(),
                    kind.to_string(),
                    opt_cell(t_warning),
                    opt_cell(probability),
                    opt_cell(gt),
                ])
                .map_err(err)?;
            }
        }
        Table::Comms => {
            write_kv_table(
                &mut w,
                &[
                    ("messages_attempted", m.comms.messages_attempted.to_string()),
                    ("messages_dropped", m.comms.messages_dropped.to_string()),
                    ("reqs_sent", m.comms.reqs_sent.to_string()),
                    ("reps_received", m.comms.reps_received.to_string()),
                    ("mean_round_trip_s", opt_cell(m.comms.mean_round_trip)),
                ],
            )?;
        }
    }
    finish_csv(w)
}

fn write_kv_table(
    w: &mut csv::Writer<Vec<u8>>,
    rows: &[(&str, String)],
) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Runtime(e.to_string());
    w.write_record(["metric", "value"]).map_err(err)?;
    for (k, v) in rows {
        w.write_record([*k, v.as_str()]).map_err(err)?;
    }
    Ok(())
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String, CliError> {
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Runtime(e.to_string()))
}
