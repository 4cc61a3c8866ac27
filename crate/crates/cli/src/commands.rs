use std::path::Path;

use hdae_core::Error;
use hdae_core::adjoint::{AdjointConfig, GradientReport, gradient_adjoint_at};
use hdae_core::benchmarks::{BallsParams, BuiltinModel, CauerParams, generate_synthetic_data, make_bouncing_balls, make_cauer};
use hdae_core::model::{MapKind, Model, eval_primal};
use hdae_core::optim::{
    CompareConfig, CompareRow, IdentificationRun, IdentifyConfig, Method, StopReason, compare_methods, log_uniform_bias,
    run_identify,
};
use hdae_core::simulate::{SimConfig, simulate};
use hdae_core::targets::{BlendConfig, TargetSet};
use hdae_core::trajectory::{GrazingWarning, trajectory_rows};
use serde::Serialize;

use crate::args::{
    BlendArg, CompareArgs, DataArgs, GradcheckArgs, IdentifyArgs, MethodArg, ModelArgs, ModelName, SimulateArgs,
    SolverArgs, TrainArgs,
};
use crate::output::{num, read_targets, sibling, write_csv, write_json};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 2,
            CliError::Usage(_) | CliError::Io(_) => 1,
        }
    }

    /// Tags a core error with the operation that raised it.
    fn core(op: &str) -> impl Fn(Error) -> CliError + '_ {
        move |e| {
            if e.is_numerical() {
                CliError::Numerical(format!("{op}: {e}"))
            } else {
                CliError::Usage(format!("{op}: {e}"))
            }
        }
    }

    fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
        move |e| CliError::Io(format!("writing {}: {e}", path.display()))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

pub fn build_model(a: &ModelArgs) -> CliResult<BuiltinModel> {
    let mut m = match a.model {
        ModelName::Cauer => BuiltinModel::Cauer(make_cauer(&CauerParams::truth()).map_err(CliError::core("make_cauer"))?),
        ModelName::Balls => BuiltinModel::Balls(
            make_bouncing_balls(a.n_balls as usize, &BallsParams::truth(), a.radius, a.half_width, a.seed)
                .map_err(CliError::core("make_bouncing_balls"))?,
        ),
    };
    if let Some(t1) = a.t1 {
        m.set_horizon(t1);
    }
    Ok(m)
}

fn sim_config(s: &SolverArgs) -> SimConfig {
    SimConfig { rtol: s.rtol, atol: s.atol, n_nodes_min: s.nodes as usize, k_max: s.k_max as usize, ..SimConfig::default() }
}

fn method(m: MethodArg) -> Method {
    match m {
        MethodArg::Fwd => Method::Fwd,
        MethodArg::Adjoint => Method::Adjoint,
    }
}

fn check_len(m: &BuiltinModel, p: &[f64]) -> CliResult<()> {
    let n = m.layout().n_opt();
    if p.len() != n {
        return Err(CliError::Usage(format!("--params has {} values, {} expects {n} ({})", p.len(), m.name(), m.param_names().join(","))));
    }
    Ok(())
}

fn targets(m: &BuiltinModel, d: &DataArgs, seed: u64, sim: &SimConfig) -> CliResult<TargetSet> {
    match &d.data {
        Some(path) => read_targets(path, m.n_y()).map_err(CliError::Usage),
        None => generate_synthetic_data(m, &m.layout().base_opt(), d.targets as usize, d.noise, seed, sim)
            .map_err(CliError::core("generate_synthetic_data")),
    }
}

#[derive(Serialize)]
struct EventOut {
    tau: f64,
    event_index: usize,
    guard_rate: f64,
    x_minus: Vec<f64>,
    x_plus: Vec<f64>,
}

#[derive(Serialize)]
struct EventsFile<'a> {
    model: &'a str,
    param_names: Vec<String>,
    params: Vec<f64>,
    horizon: f64,
    saturated: bool,
    n_events: usize,
    events: Vec<EventOut>,
    grazing: &'a [GrazingWarning],
}

pub fn run_simulate(a: &SimulateArgs) -> CliResult<()> {
    let m = build_model(&a.model)?;
    let sim = sim_config(&a.solver);
    let p_opt = a.params.clone().unwrap_or_else(|| m.layout().base_opt());
    check_len(&m, &p_opt)?;
    let p = m.layout().assemble(&p_opt).map_err(CliError::core("assemble"))?;
    let traj = simulate(&m, &p, m.horizon(), &sim).map_err(CliError::core("simulate"))?;
    let (nx, nz, ny) = (m.n_x(), m.n_z(), m.n_y());
    let mut header = vec!["t".to_string()];
    header.extend((0..nx).map(|i| format!("x{i}")));
    header.extend((0..nz).map(|i| format!("z{i}")));
    header.extend((0..ny).map(|i| format!("y{i}")));
    let rows: Vec<Vec<String>> = trajectory_rows(&traj)
        .into_iter()
        .map(|(t, x, z)| {
            let y = eval_primal(&m, MapKind::Output, t, &x, &z, &p);
            std::iter::once(t).chain(x).chain(z).chain(y).map(num).collect()
        })
        .collect();
    write_csv(&a.out, &header, &rows).map_err(CliError::io(&a.out))?;
    let side = sibling(&a.out, "events.json");
    let events = traj
        .events()
        .map(|e| EventOut {
            tau: e.tau,
            event_index: e.event_index,
            guard_rate: e.guard_rate,
            x_minus: e.x_minus.clone(),
            x_plus: e.x_plus.clone(),
        })
        .collect();
    let file = EventsFile {
        model: m.name(),
        param_names: m.param_names(),
        params: p_opt,
        horizon: m.horizon(),
        saturated: traj.saturated,
        n_events: traj.n_events(),
        events,
        grazing: &traj.grazing,
    };
    write_json(&side, &file).map_err(CliError::io(&side))?;
    println!(
        "{}: {} events on [0, {}]{}, {} rows -> {}",
        m.name(),
        traj.n_events(),
        m.horizon(),
        if traj.saturated { " (saturated)" } else { "" },
        rows.len(),
        a.out.display()
    );
    for w in &traj.grazing {
        eprintln!("warning: grazing event {} at t={} (guard rate {:e})", w.event, w.tau, w.rate);
    }
    Ok(())
}

#[derive(Serialize)]
struct GradcheckReport {
    model: String,
    method: Method,
    blend: &'static str,
    param_names: Vec<String>,
    p_opt: Vec<f64>,
    loss: f64,
    n_events: usize,
    rows: Vec<CompareRow>,
    failures: Vec<(String, String)>,
    /// Over event-stable components, checked route vs FD.
    max_rel_err: f64,
    tol: Option<f64>,
    /// False when a route failed or the tolerance was exceeded.
    pass: bool,
    adjoint_report: Option<GradientReport>,
}

pub fn run_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let m = build_model(&a.model)?;
    let sim = sim_config(&a.solver);
    let targets = targets(&m, &a.data, a.model.seed, &sim)?;
    let p = match &a.params {
        Some(p) => p.clone(),
        None => log_uniform_bias(&m.layout().base_opt(), a.bias, a.model.seed).map_err(CliError::core("log_uniform_bias"))?,
    };
    check_len(&m, &p)?;
    let blend = match a.blend {
        BlendArg::Hard => BlendConfig::hard(),
        BlendArg::Soft => BlendConfig::soft(a.beta),
    };
    let names = m.param_names();
    let cfg = CompareConfig { blend, sim, adjoint: AdjointConfig::default(), eps_rel: a.eps_rel };
    let table = compare_methods(&m, &p, &targets, &names, &cfg);
    let meth = method(a.method);
    let errs = table.rows.iter().filter(|r| !r.unstable).map(|r| match meth {
        Method::Fwd => r.fwd_vs_fd,
        Method::Adjoint => r.adjoint_vs_fd,
    });
    let max_rel_err = errs.fold(0.0f64, |acc, e| if e.is_nan() { f64::NAN } else { acc.max(e) });
    let adjoint_report = match meth {
        Method::Adjoint => gradient_adjoint_at(&m, &p, &targets, &blend, &sim, &cfg.adjoint).ok().map(|g| g.report),
        Method::Fwd => None,
    };
    let report = GradcheckReport {
        model: m.name().to_string(),
        method: meth,
        blend: match a.blend {
            BlendArg::Hard => "hard",
            BlendArg::Soft => "soft",
        },
        param_names: names,
        p_opt: p,
        loss: table.loss,
        n_events: table.n_events,
        rows: table.rows,
        failures: table.failures,
        max_rel_err,
        tol: a.tol,
        pass: max_rel_err.is_finite() && a.tol.is_none_or(|t| max_rel_err <= t),
        adjoint_report,
    };
    println!("{} at loss {:.6e}, {} events", report.model, report.loss, report.n_events);
    println!("{:>8} {:>24} {:>24} {:>24} {:>10} {:>10}", "param", "fwd", "adjoint", "fd", "fwd/fd", "adj/fd");
    for r in &report.rows {
        println!(
            "{:>8} {:>24.16e} {:>24.16e} {:>24.16e} {:>10.2e} {:>10.2e}{}",
            r.name,
            r.fwd,
            r.adjoint,
            r.fd,
            r.fwd_vs_fd,
            r.adjoint_vs_fd,
            if r.unstable { "  event count changes" } else { "" }
        );
    }
    for (route, msg) in &report.failures {
        eprintln!("{route} failed: {msg}");
    }
    if let Some(out) = &a.out {
        write_json(out, &report).map_err(CliError::io(out))?;
    }
    if !report.max_rel_err.is_finite() {
        let why = report.failures.iter().map(|(r, m)| format!("{r}: {m}")).collect::<Vec<_>>().join("; ");
        return Err(CliError::Numerical(format!("gradcheck: {meth} or finite differences failed ({why})")));
    }
    println!("{meth} vs fd: max rel err {:.3e} over event-stable components", report.max_rel_err);
    if let Some(t) = a.tol.filter(|_| !report.pass) {
        return Err(CliError::Numerical(format!("gradcheck: {meth} max relative error {:e} exceeds {t:e}", report.max_rel_err)));
    }
    Ok(())
}

fn identify_config(model: &ModelArgs, solver: &SolverArgs, data: &DataArgs, train: &TrainArgs) -> IdentifyConfig {
    IdentifyConfig {
        iters: train.iters,
        lr: train.lr,
        grad_tol: train.grad_tol,
        beta: train.beta,
        n_targets: data.targets as usize,
        noise_std: data.noise,
        bias_half_width: train.bias,
        seed: model.seed,
        rtol: solver.rtol,
        atol: solver.atol,
        n_nodes_min: solver.nodes as usize,
        k_max: solver.k_max as usize,
    }
}

/// Targets, truth (when known) and the starting point of a run.
fn problem(
    m: &BuiltinModel,
    data: &DataArgs,
    train: &TrainArgs,
    cfg: &IdentifyConfig,
) -> CliResult<(TargetSet, Option<Vec<f64>>, Vec<f64>)> {
    let sim = cfg.sim();
    let targets = targets(m, data, cfg.seed, &sim)?;
    let truth = m.layout().base_opt();
    let p_init = match &train.params {
        Some(p) => p.clone(),
        None => log_uniform_bias(&truth, cfg.bias_half_width, cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15))
            .map_err(CliError::core("log_uniform_bias"))?,
    };
    check_len(m, &p_init)?;
    let truth = if data.data.is_none() { Some(truth) } else { None };
    Ok((targets, truth, p_init))
}

fn history(run: &IdentificationRun) -> (Vec<String>, Vec<Vec<String>>) {
    let header = ["iter", "train_loss", "eval_loss", "grad_norm", "wall_ms"].map(String::from).to_vec();
    let rows = run
        .iterates
        .iter()
        .map(|it| vec![it.iter.to_string(), num(it.train_loss), num(it.eval_loss), num(it.grad_norm), num(it.wall_ms)])
        .collect();
    (header, rows)
}

fn save_run(run: &IdentificationRun, out: &Path) -> CliResult<()> {
    write_json(out, run).map_err(CliError::io(out))?;
    let h = sibling(out, "history.csv");
    let (header, rows) = history(run);
    write_csv(&h, &header, &rows).map_err(CliError::io(&h))
}

fn summarize(run: &IdentificationRun) {
    let first = &run.iterates[0];
    println!(
        "{} {} seed {}: {} updates, stop {:?}, eval loss {:.3e} -> best {:.3e} at iter {}",
        run.model,
        run.method,
        run.config.seed,
        run.iterates.len() - 1,
        run.stop_reason,
        first.eval_loss,
        run.best.eval_loss,
        run.best.iter
    );
    if let Some(errs) = run.relative_errors() {
        let parts: Vec<String> = run.param_names.iter().zip(errs).map(|(n, e)| format!("{n} {:.3}%", 100.0 * e)).collect();
        println!("  relative errors: {}", parts.join(", "));
    }
    if let Some(msg) = &run.message {
        eprintln!("  stopped early: {msg}");
    }
}

fn identify_one(a: &IdentifyArgs, seed: u64) -> CliResult<IdentificationRun> {
    let margs = ModelArgs { seed, ..a.model.clone() };
    let m = build_model(&margs)?;
    let cfg = identify_config(&margs, &a.solver, &a.data, &a.train);
    let (targets, truth, p_init) = problem(&m, &a.data, &a.train, &cfg)?;
    run_identify(&m, method(a.method), &targets, &p_init, truth.as_deref(), m.param_names(), &cfg)
        .map_err(CliError::core("run_identify"))
}

pub fn run_identify_cmd(a: &IdentifyArgs) -> CliResult<()> {
    let Some(seeds) = &a.seeds else {
        let run = identify_one(a, a.model.seed)?;
        summarize(&run);
        if let Some(out) = &a.out {
            save_run(&run, out)?;
        }
        return nonfinite_exit(&run);
    };
    let results: Vec<CliResult<IdentificationRun>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds.0.iter().map(|&seed| s.spawn(move || identify_one(a, seed))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Numerical("identify: worker thread panicked".into()))))
            .collect()
    });
    let mut worst: Option<CliError> = None;
    for (seed, r) in seeds.0.iter().zip(results) {
        match r {
            Ok(run) => {
                summarize(&run);
                if let Some(out) = &a.out {
                    save_run(&run, &sibling(out, &format!("seed{seed}.json")))?;
                }
            }
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                if worst.as_ref().is_none_or(|w| e.exit_code() > w.exit_code()) {
                    worst = Some(e);
                }
            }
        }
    }
    worst.map_or(Ok(()), Err)
}

/// A run that ended on a non-finite loss is reported but still fails.
fn nonfinite_exit(run: &IdentificationRun) -> CliResult<()> {
    if run.stop_reason == StopReason::Nonfinite {
        return Err(CliError::Numerical(format!(
            "run_identify: non-finite loss or gradient after {} updates{}",
            run.iterates.len() - 1,
            run.message.as_ref().map(|m| format!(" ({m})")).unwrap_or_default()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct CompareEntry {
    method: String,
    rel_err_pct: Option<Vec<f64>>,
    eval_loss: f64,
    best_iter: Option<usize>,
    ms_per_iter: Option<f64>,
    stop_reason: Option<StopReason>,
}

#[derive(Serialize)]
struct CompareReport {
    model: String,
    param_names: Vec<String>,
    p_true: Option<Vec<f64>>,
    p_init: Vec<f64>,
    config: IdentifyConfig,
    rows: Vec<CompareEntry>,
}

pub fn run_compare(a: &CompareArgs) -> CliResult<()> {
    let m = build_model(&a.model)?;
    let cfg = identify_config(&a.model, &a.solver, &a.data, &a.train);
    let (targets, truth, p_init) = problem(&m, &a.data, &a.train, &cfg)?;
    let pct = |p: &[f64]| truth.as_ref().map(|t| t.iter().zip(p).map(|(a, b)| 100.0 * (b - a).abs() / a.abs()).collect());
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for meth in [Method::Fwd, Method::Adjoint] {
        let run = run_identify(&m, meth, &targets, &p_init, truth.as_deref(), m.param_names(), &cfg)
            .map_err(CliError::core("run_identify"))?;
        if rows.is_empty() {
            rows.push(CompareEntry {
                method: "initial".into(),
                rel_err_pct: pct(&p_init),
                eval_loss: run.iterates[0].eval_loss,
                best_iter: None,
                ms_per_iter: None,
                stop_reason: None,
            });
        }
        let updates = (run.iterates.len() - 1).max(1);
        rows.push(CompareEntry {
            method: meth.to_string(),
            rel_err_pct: pct(&run.best.p_opt),
            eval_loss: run.best.eval_loss,
            best_iter: Some(run.best.iter),
            ms_per_iter: Some(run.final_iterate().wall_ms / updates as f64),
            stop_reason: Some(run.stop_reason),
        });
        runs.push(run);
    }
    let names = m.param_names();
    print!("{:>8}", "method");
    for n in &names {
        print!(" {n:>8}");
    }
    println!(" {:>10} {:>10}", "loss", "ms/iter");
    for r in &rows {
        print!("{:>8}", r.method);
        match &r.rel_err_pct {
            Some(e) => e.iter().for_each(|v| print!(" {v:>8.2}")),
            None => names.iter().for_each(|_| print!(" {:>8}", "-")),
        }
        let ms = r.ms_per_iter.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into());
        println!(" {:>10.3e} {ms:>10}", r.eval_loss);
    }
    if let Some(out) = &a.out {
        let report = CompareReport {
            model: m.name().to_string(),
            param_names: names,
            p_true: truth.clone(),
            p_init: p_init.clone(),
            config: cfg.clone(),
            rows,
        };
        write_json(out, &report).map_err(CliError::io(out))?;
        for run in &runs {
            let h = sibling(out, &format!("{}.history.csv", run.method));
            let (header, hrows) = history(run);
            write_csv(&h, &header, &hrows).map_err(CliError::io(&h))?;
        }
    }
    Ok(())
}
