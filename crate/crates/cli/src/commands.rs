use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use compartment::datagen::{build_toy, SchemeChoice, Toy, ToySpec};
use compartment::estimation::{run_em, ConstraintKind, EmConfig, EmProblem, EmTrace};
use compartment::io::{read_series, read_table, write_series, write_trace, Manifest, Series, SeriesKind, Table};
use compartment::model::{assemble, initial_state_from_measurement, predict as rollout, ThetaParams};
use compartment::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::experiment::{read_toy, ExperimentConfig};
use crate::{GenerateArgs, IdentifyArgs, PredictArgs, ReportArgs};

const MANIFEST: &str = "manifest.toml";
const TOY: &str = "toy.toml";
const STATES: &str = "states.csv";
const OBSERVATIONS: &str = "observations.csv";
const ESTIMATE: &str = "estimate.toml";
const TRACE: &str = "trace.csv";
const SUMMARY: &str = "summary.txt";
const PREDICTION: &str = "prediction.csv";
const ERRORS: &str = "errors.csv";
const PREDICTION_SUMMARY: &str = "prediction_summary.toml";

/// Identified parameters as written by `identify`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub toy: String,
    pub scheme: SchemeChoice,
    pub constraint: ConstraintKind,
    pub dtau: f64,
    pub k_names: Vec<String>,
    pub z_names: Vec<String>,
    pub k: Vec<f64>,
    pub z: Vec<f64>,
    pub constraint_names: Vec<String>,
    pub constraint_params: Vec<f64>,
    pub stop: String,
    pub iterations: usize,
    pub final_loglik: f64,
}

#[derive(Clone, Debug, Serialize)]
struct PredictionSummary {
    horizon: usize,
    ground_truth: bool,
    compared_steps: Option<usize>,
    max_error: Option<f64>,
    worst_compartment: Option<usize>,
    rise: Option<f64>,
    percent_of_rise: Option<f64>,
}

fn io_context(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_context(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_context(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_context(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| io_context(path, e))
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Parse(e.to_string()))
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn out_dir(flag: Option<&PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = flag
        .or(cfg.paths.out.as_ref())
        .cloned()
        .ok_or_else(|| Error::InvalidArgument("no output directory (use --out)".to_string()))?;
    fs::create_dir_all(&dir).map_err(|e| io_context(&dir, e))?;
    Ok(dir)
}

/// Toy from the config if it names one, else the copy stored next to the
/// data or estimate.
fn resolve_toy(cfg: &ExperimentConfig, stored: &Path) -> Result<Toy> {
    let spec = match cfg.toy_spec()? {
        Some(spec) => spec,
        None => read_toy(stored)?,
    };
    build_toy(&spec)
}

pub fn generate(args: &GenerateArgs) -> Result<()> {
    let cfg = load_config(args.common.config.as_ref())?;
    let mut spec = match &args.preset {
        Some(name) => ToySpec::preset(name)?,
        None => cfg.toy_spec()?.unwrap_or_else(ToySpec::full),
    };
    if let Some(r) = cfg.generate.r_var {
        spec.r_var = r;
    }
    let scheme = args.scheme.unwrap_or(cfg.generate.scheme);
    let seed = args.seed.unwrap_or(cfg.generate.seed);
    let steps = args.steps.unwrap_or(cfg.generate.steps);
    let noise = cfg.generate.noise;

    let toy = build_toy(&spec)?;
    let traj = toy.generate(scheme, noise, steps, seed)?;
    let dir = out_dir(args.common.out.as_ref(), &cfg)?;

    write_series(create(&dir.join(STATES))?, SeriesKind::States, &traj.states, &traj.inputs)?;
    write_series(create(&dir.join(OBSERVATIONS))?, SeriesKind::Observations, &traj.observations, &traj.inputs)?;
    let truth = toy.true_theta(scheme);
    let manifest = Manifest {
        preset: spec.name.clone(),
        scheme: scheme.to_string(),
        seed,
        steps,
        compartments: toy.mesh.len(),
        layer_counts: toy.mesh.layer_counts(),
        observed: toy.observed.clone(),
        noise,
        r_var: spec.r_var,
        ambient: spec.ambient,
        dtau: spec.dtau,
        true_k: truth.k,
        true_z: truth.z,
        states_file: STATES.to_string(),
        observations_file: OBSERVATIONS.to_string(),
    };
    write_text(&dir.join(MANIFEST), &manifest.to_toml()?)?;
    write_text(&dir.join(TOY), &to_toml(&spec)?)?;
    println!(
        "generated {steps} steps of the {} toy ({} compartments, {} observed, {scheme} scheme) in {}",
        spec.name,
        toy.mesh.len(),
        toy.observed.len(),
        dir.display()
    );
    Ok(())
}

pub fn identify(args: &IdentifyArgs) -> Result<()> {
    let cfg = load_config(args.common.config.as_ref())?;
    let data = args
        .data
        .as_ref()
        .or(cfg.paths.data.as_ref())
        .ok_or_else(|| Error::InvalidArgument("no dataset directory (use --data)".to_string()))?;
    let manifest = Manifest::from_toml(&read_text(&data.join(MANIFEST))?)?;
    let toy = resolve_toy(&cfg, &data.join(TOY))?;
    if toy.mesh.len() != manifest.compartments || toy.observed != manifest.observed {
        return Err(Error::Config(format!(
            "toy '{}' does not match the dataset ({} compartments in the manifest)",
            toy.spec.name, manifest.compartments
        )));
    }
    let obs_path = data.join(&manifest.observations_file);
    let series = read_series(open(&obs_path)?).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", obs_path.display())),
        other => other,
    })?;
    if series.kind != SeriesKind::Observations || series.values.nrows() != toy.observed.len() {
        return Err(Error::Dimension(format!(
            "{} holds {} {:?} columns, expected {} observations",
            obs_path.display(),
            series.values.nrows(),
            series.kind,
            toy.observed.len()
        )));
    }

    let section = &cfg.identify;
    let scheme = args.scheme.unwrap_or(section.scheme);
    let constraint = args.constraint.unwrap_or(section.constraint);
    let ops = toy.ops(scheme);
    let n = ops.n();
    let ny = toy.observed.len();
    let initial = initial_state_from_measurement(n, &toy.observed, &series.values.column(0).into_owned(), toy.mesh.ambient_index());
    let theta_init = ThetaParams::uniform(ops.n_k(), ops.n_z(), section.theta_init, manifest.dtau);
    // R is known; a noiseless dataset still gets a tiny floor so the innovation covariance stays regular
    let r = DMatrix::from_diagonal_element(ny, ny, manifest.r_var.max(1e-12));
    let mut em = EmConfig::new(theta_init, constraint, r);
    em.max_iter = args.max_iter.unwrap_or(section.max_iter);
    em.theta_tol = section.theta_tol;
    em.q_init = section.q_init;
    let problem = EmProblem {
        ops,
        observed: &toy.observed,
        observations: &series.values,
        inputs: &series.inputs,
        initial: &initial,
    };

    let dir = out_dir(args.common.out.as_ref(), &cfg)?;
    let scheme_def = toy.scheme(scheme);
    let write_trace_file = |trace: &EmTrace| -> Result<()> {
        write_trace(create(&dir.join(TRACE))?, trace, &scheme_def.k_names, &scheme_def.z_names)
    };
    match run_em(&problem, &em) {
        Ok(res) => {
            write_trace_file(&res.trace)?;
            let last = res.trace.records.last();
            let estimate = Estimate {
                toy: toy.spec.name.clone(),
                scheme,
                constraint,
                dtau: res.theta.dtau,
                k_names: scheme_def.k_names.clone(),
                z_names: scheme_def.z_names.clone(),
                k: res.theta.k.clone(),
                z: res.theta.z.clone(),
                constraint_names: res.constraint.param_names(),
                constraint_params: res.constraint.params(),
                stop: res.stop.to_string(),
                iterations: res.trace.len(),
                final_loglik: last.map_or(f64::NAN, |r| r.loglik),
            };
            write_text(&dir.join(ESTIMATE), &to_toml(&estimate)?)?;
            write_text(&dir.join(TOY), &to_toml(&toy.spec)?)?;
            let summary = identify_summary(&estimate, &manifest, None);
            write_text(&dir.join(SUMMARY), &summary)?;
            print!("{summary}");
            Ok(())
        }
        Err(failure) => {
            write_trace_file(&failure.trace)?;
            let text = format!(
                "scheme: {scheme}\nconstraint: {constraint}\nstop: aborted\niterations: {}\nerror: {}\n",
                failure.trace.len(),
                failure.error
            );
            write_text(&dir.join(SUMMARY), &text)?;
            Err(failure.error)
        }
    }
}

fn identify_summary(est: &Estimate, manifest: &Manifest, error: Option<&str>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scheme: {}", est.scheme);
    let _ = writeln!(s, "constraint: {}", est.constraint);
    let _ = writeln!(s, "stop: {}", est.stop);
    let _ = writeln!(s, "iterations: {}", est.iterations);
    let _ = writeln!(s, "final_loglik: {:.10e}", est.final_loglik);
    if let Some(e) = error {
        let _ = writeln!(s, "error: {e}");
    }
    let compare = manifest.scheme == est.scheme.to_string() && manifest.true_k.len() == est.k.len();
    for (values, names, truth) in [(&est.k, &est.k_names, &manifest.true_k), (&est.z, &est.z_names, &manifest.true_z)] {
        for (i, (v, name)) in values.iter().zip(names).enumerate() {
            if compare {
                let rel = (v - truth[i]) / truth[i];
                let _ = writeln!(s, "{name}: {v:.6e} (true {:.6e}, {:+.3}%)", truth[i], 100.0 * rel);
            } else {
                let _ = writeln!(s, "{name}: {v:.6e}");
            }
        }
    }
    for (name, v) in est.constraint_names.iter().zip(&est.constraint_params).take(8) {
        let _ = writeln!(s, "{name}: {v:.6e}");
    }
    if est.constraint_params.len() > 8 {
        let _ = writeln!(s, "... {} covariance parameters in {ESTIMATE}", est.constraint_params.len());
    }
    s
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    let cfg = load_config(args.common.config.as_ref())?;
    let horizon = args.horizon.unwrap_or(cfg.predict.horizon);
    if horizon < 1 {
        return Err(Error::InvalidArgument(format!("horizon must be at least 1, got {horizon}")));
    }
    let horizon = horizon as usize;
    let mut est_path = args
        .estimate
        .as_ref()
        .or(cfg.paths.estimate.as_ref())
        .cloned()
        .ok_or_else(|| Error::InvalidArgument("no estimate (use --estimate)".to_string()))?;
    if est_path.is_dir() {
        est_path = est_path.join(ESTIMATE);
    }
    let est: Estimate = toml::from_str(&read_text(&est_path)?).map_err(|e| Error::Parse(format!("{}: {e}", est_path.display())))?;
    let est_dir = est_path.parent().unwrap_or(Path::new("."));
    let toy = resolve_toy(&cfg, &est_dir.join(TOY))?;
    let ops = toy.ops(est.scheme);
    let theta = ThetaParams::new(est.k.clone(), est.z.clone(), est.dtau)?;
    let (n, ny) = (ops.n(), toy.observed.len());
    let model = assemble(ops, &theta, &toy.observed, DMatrix::zeros(n, n), DMatrix::zeros(ny, ny))?;
    let inputs = toy.inputs(horizon + 1)?;
    let pred = rollout(&model, &toy.initial_state(), &inputs)?;

    let dir = out_dir(args.common.out.as_ref(), &cfg)?;
    write_series(create(&dir.join(PREDICTION))?, SeriesKind::States, &pred.states, &pred.inputs)?;

    let truth_path = args.truth.as_ref().or(cfg.paths.truth.as_ref());
    let summary = match truth_path {
        None => {
            println!("predicted {horizon} steps; error report: absent (no ground truth)");
            PredictionSummary {
                horizon,
                ground_truth: false,
                compared_steps: None,
                max_error: None,
                worst_compartment: None,
                rise: None,
                percent_of_rise: None,
            }
        }
        Some(path) => {
            let truth: Series = read_series(open(path)?)?;
            if truth.kind != SeriesKind::States || truth.values.nrows() != n {
                return Err(Error::Dimension(format!("{} is not a {n}-state trajectory", path.display())));
            }
            let steps = truth.values.ncols().min(pred.states.ncols());
            let diff = (truth.values.columns(0, steps) - pred.states.columns(0, steps)).abs();
            let mut w = create(&dir.join(ERRORS))?;
            let mut text = String::from("compartment,layer,role,observed,max_abs_error\n");
            let mut worst = (0, 0.0);
            for (i, c) in toy.mesh.compartments().iter().enumerate() {
                let e = diff.row(i).max();
                if e > worst.1 {
                    worst = (i, e);
                }
                let _ = writeln!(text, "{i},{},{},{},{e:e}", c.layer, c.role.name(), c.observed);
            }
            std::io::Write::write_all(&mut w, text.as_bytes()).map_err(|e| io_context(&dir.join(ERRORS), e))?;
            let rise = truth.values.columns(0, steps).max() - toy.spec.ambient;
            let pct = 100.0 * worst.1 / rise;
            println!(
                "predicted {horizon} steps; max error {:.4} at compartment {} over {steps} steps ({pct:.2}% of the {rise:.3} rise)",
                worst.1, worst.0
            );
            PredictionSummary {
                horizon,
                ground_truth: true,
                compared_steps: Some(steps),
                max_error: Some(worst.1),
                worst_compartment: Some(worst.0),
                rise: Some(rise),
                percent_of_rise: Some(pct),
            }
        }
    };
    write_text(&dir.join(PREDICTION_SUMMARY), &to_toml(&summary)?)?;
    Ok(())
}

pub fn report(args: &ReportArgs) -> Result<()> {
    if args.traces.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one trace file".to_string()));
    }
    let observed = match &args.data {
        Some(dir) => Some(Manifest::from_toml(&read_text(&dir.join(MANIFEST))?)?.observed),
        None => None,
    };
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| io_context(dir, e))?;
    }
    for path in &args.traces {
        let table = read_table(open(path)?).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let out = tabulate(&table, observed.as_deref())?;
        let text = render(&out);
        match &args.out {
            Some(dir) => {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
                let target = dir.join(format!("{stem}.table.csv"));
                write_text(&target, &text)?;
                println!("{}: {} iterations -> {}", path.display(), out.rows.len(), target.display());
            }
            None => print!("{text}"),
        }
    }
    Ok(())
}

/// Per-iteration table; the entries of a diagonal covariance are reduced to
/// min / median / max over observed and unobserved compartments.
fn tabulate(table: &Table, observed: Option<&[usize]>) -> Result<Table> {
    let q_cols: Vec<(usize, usize)> = table
        .columns
        .iter()
        .enumerate()
        .filter_map(|(j, c)| c.strip_prefix("q_").and_then(|i| i.parse::<usize>().ok()).map(|i| (j, i - 1)))
        .collect();
    if q_cols.is_empty() {
        return Ok(table.clone());
    }
    let observed = observed
        .ok_or_else(|| Error::InvalidArgument("diagonal-constraint trace: pass --data to split observed compartments".to_string()))?;
    if q_cols.iter().any(|&(_, i)| i >= q_cols.len()) || observed.iter().any(|&i| i >= q_cols.len()) {
        return Err(Error::Dimension("trace covariance entries do not match the dataset".to_string()));
    }
    let keep: Vec<usize> = (0..table.columns.len()).filter(|j| !q_cols.iter().any(|(c, _)| c == j)).collect();
    let mut columns: Vec<String> = keep.iter().map(|&j| table.columns[j].clone()).collect();
    for group in ["q_obs", "q_unobs"] {
        for stat in ["min", "median", "max"] {
            columns.push(format!("{group}_{stat}"));
        }
    }
    let rows = table
        .rows
        .iter()
        .map(|row| {
            let mut out: Vec<f64> = keep.iter().map(|&j| row[j]).collect();
            let (mut obs, mut unobs) = (Vec::new(), Vec::new());
            for &(j, i) in &q_cols {
                if observed.contains(&i) { obs.push(row[j]) } else { unobs.push(row[j]) }
            }
            out.extend(spread(&mut obs));
            out.extend(spread(&mut unobs));
            out
        })
        .collect();
    Ok(Table { columns, rows })
}

fn spread(values: &mut [f64]) -> [f64; 3] {
    if values.is_empty() {
        return [f64::NAN; 3];
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    let median = if values.len() % 2 == 0 { 0.5 * (values[mid - 1] + values[mid]) } else { values[mid] };
    [values[0], median, values[values.len() - 1]]
}

fn render(table: &Table) -> String {
    let mut s = table.columns.join(",");
    s.push('\n');
    for row in &table.rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_trace_is_split() {
        let table = Table {
            columns: vec!["iteration".into(), "k1".into(), "q_1".into(), "q_2".into(), "q_3".into(), "loglik".into()],
            rows: vec![vec![1.0, 0.02, 1e-4, 1e-2, 3e-2, -5.0]],
        };
        let out = tabulate(&table, Some(&[0])).unwrap();
        assert_eq!(out.columns[..3], ["iteration", "k1", "loglik"]);
        assert_eq!(out.rows[0][3..], [1e-4, 1e-4, 1e-4, 1e-2, 2e-2, 3e-2]);
        assert!(tabulate(&table, None).is_err());
    }

    #[test]
    fn plain_trace_passes_through() {
        let table = Table { columns: vec!["iteration".into(), "q".into()], rows: vec![vec![1.0, 2.0]] };
        assert_eq!(tabulate(&table, None).unwrap(), table);
        assert_eq!(render(&table), "iteration,q\n1e0,2e0\n");
    }
}
