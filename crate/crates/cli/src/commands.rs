use std::fmt::Write as _;
use std::path::Path;

use natcf::bench::{ablate_epsilon, ablation_json, gen_toy, run_mae, BenchError, BenchReport, TEST_SEED_OFFSET};
use natcf::estimator::EstimatorError;
use natcf::fio::FioError;
use natcf::oracle::{grid_search, GridSpec, OracleError};
use natcf::scm::DEFAULT_EVIDENCE_BAND;
use natcf::toys::toy_equations;
use natcf::*;
use rayon::prelude::*;
use serde::Serialize;
use toml::Table;

use crate::spec::{fio_config, fit_config, parse_change, set, ExperimentSpec};
use crate::{AblateArgs, BenchArgs, CliError, FioArgs, FitArgs, FitFlags, GenerateArgs, Outcome, QueryArgs, Source, VerifyArgs};

const DEFAULT_ROWS: usize = 10_000;
/// Rows of the model's own sample used for standardization when no
/// statistics are supplied.
const PILOT_ROWS: usize = 10_000;
const PILOT_SALT: u64 = 0x5EED_57A7;
const VERIFY_AGREEMENT: f64 = 0.99;
const VERIFY_GAP: f64 = 1e-3;

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn fio_err(e: FioError) -> CliError {
    match e {
        FioError::InvalidConfig(m) => CliError::Usage(m),
        e => data_err(e),
    }
}

fn bench_err(e: BenchError) -> CliError {
    match e {
        BenchError::Fio(e) => fio_err(e),
        e @ (BenchError::UnknownToy(_) | BenchError::EpsilonOrder) => CliError::Usage(e.to_string()),
        e => data_err(e),
    }
}

fn fit_err(e: EstimatorError) -> CliError {
    match e {
        EstimatorError::InvalidConfig(m) => CliError::Usage(m),
        e => data_err(e),
    }
}

fn var(name: &str) -> Result<VariableId, CliError> {
    VariableId::new(name).map_err(|e| CliError::Usage(e.to_string()))
}

/// The model named by `--toy` or `--scm`, with any statistics its file carries.
struct Model {
    scm: Scm,
    stats: Option<StandardizationStats>,
    toy: Option<usize>,
    label: String,
}

fn model(source: &Source, spec: &ExperimentSpec) -> Result<Model, CliError> {
    let toy = source.toy.or(spec.toy);
    let path = source.scm.clone().or_else(|| spec.scm.clone());
    match (toy, path) {
        (Some(_), Some(_)) => Err(CliError::Usage("give either a toy or an SCM file, not both".into())),
        (None, None) => Err(CliError::Usage("a model is required: pass --toy or --scm".into())),
        (Some(k), None) => {
            let eqs = toy_equations(k).ok_or_else(|| CliError::Usage(format!("no toy {k}; expected 1..=4")))?;
            let scm = Scm::from_equations(eqs).map_err(data_err)?;
            Ok(Model { scm, stats: None, toy: Some(k), label: format!("toy{k}") })
        }
        (None, Some(p)) => {
            let (scm, stats) = Scm::load(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            Ok(Model { scm, stats, toy: None, label: p.display().to_string() })
        }
    }
}

fn pilot_stats(scm: &Scm, seed: u64) -> Result<StandardizationStats, CliError> {
    column_stats(&scm.sample(PILOT_ROWS, seed ^ PILOT_SALT)).map_err(data_err)
}

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    Dataset::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn fio_table(mut t: Table, a: &FioArgs) -> Table {
    set(&mut t, "epsilon", a.eps);
    set(&mut t, "w_epsilon", a.w_eps);
    set(&mut t, "learning_rate", a.lr);
    set(&mut t, "steps", a.steps.map(|s| s as i64));
    set(&mut t, "optimizer", a.optimizer.clone());
    set(&mut t, "restarts", a.restarts.map(i64::from));
    set(&mut t, "seed", a.fio_seed.map(|s| s as i64));
    set(&mut t, "change_tolerance", a.change_tol);
    set(&mut t, "inversion_tolerance", a.inversion_tol);
    set(&mut t, "distance", a.distance.clone());
    set(&mut t, "measure", a.measure.clone());
    set(&mut t, "penalty_space", a.penalty_space.clone());
    t
}

fn fit_table(mut t: Table, a: &FitFlags) -> Table {
    set(&mut t, "degree", a.degree.map(i64::from));
    set(&mut t, "ridge", a.ridge);
    set(&mut t, "sin_frequencies", a.sin_freq.clone());
    t
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Format {
    Text,
    Json,
}

fn format(flag: Option<&String>, spec: &ExperimentSpec) -> Result<Format, CliError> {
    match flag.or(spec.format.as_ref()).map(String::as_str) {
        None | Some("text") => Ok(Format::Text),
        Some("json") => Ok(Format::Json),
        Some(other) => Err(CliError::Usage(format!("format must be text or json, got {other:?}"))),
    }
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports always serialize")
}

pub fn generate(a: GenerateArgs) -> Result<Outcome, CliError> {
    let spec = ExperimentSpec::load(a.source.config.as_deref())?;
    let m = model(&a.source, &spec)?;
    let n = a.n.or(spec.n).unwrap_or(DEFAULT_ROWS);
    let seed = a.source.seed.or(spec.seed).unwrap_or(0);
    let out = a.out.or(spec.out).ok_or_else(|| CliError::Usage("--out is required".into()))?;
    if out.is_empty() || out.len() > 2 {
        return Err(CliError::Usage("--out takes a train path and optionally a test path".into()));
    }
    let (train, test) = match m.toy {
        Some(k) => {
            let (_, train, test) = gen_toy(k, n, seed).map_err(bench_err)?;
            (train, test)
        }
        None => sample_split(&m, n, seed),
    };
    for (path, d) in out.iter().zip([&train, &test]) {
        d.save(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        println!("{}: {} rows", path.display(), d.n_rows());
    }
    Ok(Outcome::Ok)
}

fn sample_split(m: &Model, n: usize, seed: u64) -> (Dataset, Dataset) {
    let test_seed = seed.wrapping_add(TEST_SEED_OFFSET);
    (
        m.scm.sample(n, seed).with_provenance(format!("{}/train", m.label), seed),
        m.scm.sample(n, test_seed).with_provenance(format!("{}/test", m.label), test_seed),
    )
}

pub fn fit(a: FitArgs) -> Result<Outcome, CliError> {
    let spec = ExperimentSpec::load(a.source.config.as_deref())?;
    let cfg = fit_config(fit_table(spec.fit.clone(), &a.fit))?;
    let m = model(&a.source, &spec)?;
    let data_path = a.data.or(spec.data.clone()).ok_or_else(|| CliError::Usage("--data is required".into()))?;
    let out = match a.out {
        Some(p) => p,
        None => spec
            .out
            .as_ref()
            .and_then(|o| o.first().cloned())
            .ok_or_else(|| CliError::Usage("--out is required".into()))?,
    };
    let data = load_data(&data_path)?;
    let fitted = fit_location_scale(&data, m.scm.graph(), &cfg).map_err(fit_err)?;
    let stats = column_stats(&data).map_err(fit_err)?;
    fitted.save(&out, Some(&stats)).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    let g = fitted.graph();
    for &i in g.topo_indices() {
        if let NodeMechanism::Structural(mech) = fitted.mechanism(i) {
            println!("{} = {}", g.node(i), mech.source());
        }
    }
    println!("wrote {}", out.display());
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct QueryReport<'a> {
    change: &'a ChangeRequest,
    evidence: &'a Assignment,
    #[serde(flatten)]
    answer: &'a CounterfactualAnswer,
}

fn evidence(m: &Model, path: &Path, seed: u64, band: f64) -> Result<Assignment, CliError> {
    let d = load_data(path)?;
    if d.n_rows() != 1 {
        return Err(CliError::Data(format!("{}: evidence needs exactly one row, found {}", path.display(), d.n_rows())));
    }
    let row = d.row_assignment(0);
    for k in row.keys() {
        if !m.scm.graph().contains(k) {
            return Err(CliError::Data(format!("evidence column `{k}` is not a model variable")));
        }
    }
    if row.len() == m.scm.graph().len() {
        return Ok(row);
    }
    m.scm.complete_partial_evidence(&row, seed, band).map_err(data_err)
}

pub fn query(a: QueryArgs) -> Result<Outcome, CliError> {
    let spec = ExperimentSpec::load(a.source.config.as_deref())?;
    let cfg = fio_config(fio_table(spec.fio.clone(), &a.fio))?;
    let fmt = format(a.format.as_ref(), &spec)?;
    let natural = match a.mode.as_ref().or(spec.mode.as_ref()).map(String::as_str) {
        None | Some("natural") => true,
        Some("nonbacktracking") => false,
        Some(other) => return Err(CliError::Usage(format!("mode must be natural or nonbacktracking, got {other:?}"))),
    };
    let change_text = a.change.or(spec.change.clone()).ok_or_else(|| CliError::Usage("--change is required".into()))?;
    let (target, value) = parse_change(&change_text)?;
    let change = ChangeRequest::new(var(&target)?, value);
    let m = model(&a.source, &spec)?;
    if !m.scm.graph().contains(&change.target) {
        return Err(CliError::Usage(format!("`{}` is not a model variable", change.target)));
    }
    let seed = a.source.seed.or(spec.seed).unwrap_or(0);
    let band = a.band.or(spec.band).unwrap_or(DEFAULT_EVIDENCE_BAND);
    let ev_path = a.evidence.or(spec.evidence.clone()).ok_or_else(|| CliError::Usage("--evidence is required".into()))?;
    let ev = evidence(&m, &ev_path, seed, band)?;

    let answer = if natural {
        let stats = match (&m.stats, a.data.or(spec.data.clone())) {
            (Some(s), _) => s.clone(),
            (None, Some(p)) => column_stats(&load_data(&p)?).map_err(data_err)?,
            (None, None) => pilot_stats(&m.scm, seed)?,
        };
        natural_cf(&m.scm, &ev, &change, &stats, &cfg).map_err(fio_err)?
    } else {
        nonbacktracking_cf(&m.scm, &ev, &change).map_err(fio_err)?
    };
    match fmt {
        Format::Json => println!("{}", json(&QueryReport { change: &change, evidence: &ev, answer: &answer })),
        Format::Text => print!("{}", query_text(&change, &ev, &answer)),
    }
    let infeasible = answer.fio.as_ref().is_some_and(|f| !f.is_feasible());
    Ok(if infeasible { Outcome::Negative } else { Outcome::Ok })
}

fn query_text(change: &ChangeRequest, ev: &Assignment, answer: &CounterfactualAnswer) -> String {
    let mut s = String::new();
    let kind = match answer.kind {
        CounterfactualKind::Natural => "natural",
        CounterfactualKind::NonBacktracking => "nonbacktracking",
    };
    let _ = writeln!(s, "{kind} counterfactual for change({} = {})", change.target, change.value);
    if let Some(f) = &answer.fio {
        let status = if f.is_feasible() { "feasible" } else { "infeasible" };
        let _ = writeln!(s, "status     {status}");
        let lbf: Vec<String> = f.lbf_targets.iter().map(|(k, v)| format!("{k} = {v}")).collect();
        let _ = writeln!(s, "lbf        {}", lbf.join(", "));
        let _ = writeln!(s, "distance   {}", f.distance);
        let _ = writeln!(s, "penalty    {}", f.penalty_residual);
        let _ = writeln!(s, "steps      {}", f.steps_used);
    }
    let _ = writeln!(s, "{:<10} {:>22} {:>22}", "variable", "evidence", "counterfactual");
    for (k, v) in ev.iter() {
        let cf = answer.point.as_ref().map_or_else(|| "-".to_string(), |p| p[k].to_string());
        let _ = writeln!(s, "{:<10} {:>22} {:>22}", k.as_str(), v.to_string(), cf);
    }
    s
}

/// Shared setup of `bench` and `ablate`.
struct BenchSetup {
    truth: Scm,
    fitted: Scm,
    test: Dataset,
    stats: StandardizationStats,
    target: VariableId,
    outcomes: Vec<VariableId>,
    cfg: FioConfig,
    seed: u64,
    format: Format,
}

fn bench_setup(a: &BenchArgs, spec: &ExperimentSpec) -> Result<BenchSetup, CliError> {
    let cfg = fio_config(fio_table(spec.fio.clone(), &a.fio))?;
    let fit_cfg = fit_config(fit_table(spec.fit.clone(), &a.fit))?;
    let format = format(a.format.as_ref(), spec)?;
    let m = model(&a.source, spec)?;
    let g = m.scm.graph();
    let target = match a.target.as_ref().or(spec.target.as_ref()) {
        Some(t) => var(t)?,
        None if m.toy.is_some() => var("n2")?,
        None => return Err(CliError::Usage("--target is required for SCM files".into())),
    };
    let ti = g.index_of(&target).map_err(|e| CliError::Usage(e.to_string()))?;
    let outcomes = match a.outcomes.as_ref().or(spec.outcomes.as_ref()) {
        Some(list) => list.iter().map(|o| var(o)).collect::<Result<Vec<_>, _>>()?,
        None => {
            let mask = g.descendant_mask(ti);
            g.topo_indices().iter().filter(|&&i| mask[i]).map(|&i| g.node(i).clone()).collect()
        }
    };
    if outcomes.is_empty() {
        return Err(CliError::Usage(format!("`{target}` has no descendants; pass --outcomes")));
    }
    for o in &outcomes {
        g.index_of(o).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let n = a.n.or(spec.n).unwrap_or(DEFAULT_ROWS);
    let seed = a.source.seed.or(spec.seed).unwrap_or(0);
    let (train, test) = match m.toy {
        Some(k) => {
            let (_, train, test) = gen_toy(k, n, seed).map_err(bench_err)?;
            (train, test)
        }
        None => sample_split(&m, n, seed),
    };
    let fitted = fit_location_scale(&train, g, &fit_cfg).map_err(fit_err)?;
    let stats = column_stats(&train).map_err(fit_err)?;
    Ok(BenchSetup { truth: m.scm, fitted, test, stats, target, outcomes, cfg, seed, format })
}

pub fn bench(a: BenchArgs) -> Result<Outcome, CliError> {
    let spec = ExperimentSpec::load(a.source.config.as_deref())?;
    let s = bench_setup(&a, &spec)?;
    let report = run_mae(&s.truth, &s.fitted, &s.test, &s.target, &s.outcomes, &s.stats, &s.cfg, s.seed).map_err(bench_err)?;
    print_reports(&[(s.cfg.epsilon, report)], s.format, false);
    Ok(Outcome::Ok)
}

pub fn ablate(a: AblateArgs) -> Result<Outcome, CliError> {
    let spec = ExperimentSpec::load(a.bench.source.config.as_deref())?;
    let s = bench_setup(&a.bench, &spec)?;
    let eps = a.eps_list.or(spec.eps_list.clone()).unwrap_or_else(|| vec![1e-4, 1e-3, 1e-2]);
    let reports = ablate_epsilon(&s.truth, &s.fitted, &s.test, &s.target, &s.outcomes, &eps, &s.stats, &s.cfg, s.seed)
        .map_err(bench_err)?;
    print_reports(&reports, s.format, true);
    Ok(Outcome::Ok)
}

fn print_reports(reports: &[(f64, BenchReport)], format: Format, keyed: bool) {
    match (format, keyed) {
        (Format::Json, true) => println!("{}", ablation_json(reports)),
        (Format::Json, false) => println!("{}", reports[0].1.to_json()),
        (Format::Text, _) => {
            for (i, (_, r)) in reports.iter().enumerate() {
                if i > 0 {
                    println!();
                }
                print!("{}", r.to_table());
            }
        }
    }
}

#[derive(Serialize)]
struct VerifyReport {
    target: VariableId,
    cases: usize,
    resolution: usize,
    agree: usize,
    jointly_feasible: usize,
    solver_feasible: usize,
    oracle_feasible: usize,
    /// Largest `|d_solve - d_oracle|` over jointly feasible cases.
    worst_gap: f64,
    /// Largest gap minus its allowance `1e-3 + cell bound`; positive fails.
    worst_excess: f64,
    pass: bool,
    config: FioConfig,
}

pub fn verify(a: VerifyArgs) -> Result<Outcome, CliError> {
    let spec = ExperimentSpec::load(a.source.config.as_deref())?;
    // oracle-suite defaults, below any file or flag value
    let mut base = Table::new();
    set(&mut base, "epsilon", Some(1e-2));
    set(&mut base, "restarts", Some(4i64));
    base.extend(spec.fio.clone());
    let cfg = fio_config(fio_table(base, &a.fio))?;
    let fmt = format(a.format.as_ref(), &spec)?;
    let m = model(&a.source, &spec)?;
    let g = m.scm.graph();
    let target = match a.target.as_ref().or(spec.target.as_ref()) {
        Some(t) => var(t)?,
        None => g.node(*g.topo_indices().last().expect("graphs are nonempty")).clone(),
    };
    let ti = g.index_of(&target).map_err(|e| CliError::Usage(e.to_string()))?;
    let cases = a.cases.or(spec.cases).unwrap_or(200);
    if cases == 0 {
        return Err(CliError::Usage("--cases must be positive".into()));
    }
    let seed = a.source.seed.or(spec.seed).unwrap_or(0);
    let grid = GridSpec { resolution: a.resolution.or(spec.resolution).unwrap_or(GridSpec::default().resolution), ..GridSpec::default() };
    let stats = match &m.stats {
        Some(s) => s.clone(),
        None => pilot_stats(&m.scm, seed)?,
    };
    let evidence = m.scm.sample(cases, seed);
    let donors = m.scm.sample(cases, seed.wrapping_add(1));

    let rows: Vec<(FioResult, natcf::oracle::GridOutcome)> = (0..cases)
        .into_par_iter()
        .map(|r| {
            let ev = evidence.row_assignment(r);
            let ch = ChangeRequest::new(target.clone(), donors.row(r)[ti]);
            let s = solve(&m.scm, &ev, &ch, &stats, &cfg).map_err(fio_err)?;
            let o = grid_search(&m.scm, &ev, &ch, &stats, &cfg, &grid).map_err(|e| match e {
                OracleError::Fio(e) => fio_err(e),
                e => CliError::Usage(e.to_string()),
            })?;
            Ok((s, o))
        })
        .collect::<Result<_, CliError>>()?;

    let mut report = VerifyReport {
        target,
        cases,
        resolution: grid.resolution,
        agree: 0,
        jointly_feasible: 0,
        solver_feasible: 0,
        oracle_feasible: 0,
        worst_gap: 0.0,
        worst_excess: f64::NEG_INFINITY,
        pass: false,
        config: cfg,
    };
    for (s, o) in &rows {
        report.solver_feasible += s.is_feasible() as usize;
        report.oracle_feasible += o.result.is_feasible() as usize;
        report.agree += (s.is_feasible() == o.result.is_feasible()) as usize;
        if s.is_feasible() && o.result.is_feasible() {
            report.jointly_feasible += 1;
            let gap = (s.distance - o.result.distance).abs();
            report.worst_gap = report.worst_gap.max(gap);
            report.worst_excess = report.worst_excess.max(gap - (VERIFY_GAP + o.cell_bound));
        }
    }
    report.pass = report.agree as f64 >= VERIFY_AGREEMENT * cases as f64 && report.worst_excess <= 0.0;
    match fmt {
        Format::Json => println!("{}", json(&report)),
        Format::Text => print!("{}", verify_text(&report)),
    }
    Ok(if report.pass { Outcome::Ok } else { Outcome::Negative })
}

fn verify_text(r: &VerifyReport) -> String {
    let rows = [
        ("agree", format!("{}/{}", r.agree, r.cases)),
        ("solver feasible", r.solver_feasible.to_string()),
        ("oracle feasible", r.oracle_feasible.to_string()),
        ("jointly feasible", r.jointly_feasible.to_string()),
        ("worst gap", format!("{:e}", r.worst_gap)),
        ("worst excess", format!("{:e}", r.worst_excess)),
    ];
    let mut s = format!(
        "verify change({}) eps={:e} restarts={} grid={}\n",
        r.target, r.config.epsilon, r.config.restarts, r.resolution
    );
    for (k, v) in rows {
        let _ = writeln!(s, "{k:<17} {v}");
    }
    let _ = writeln!(s, "{}", if r.pass { "PASS" } else { "FAIL" });
    s
}
