//! Adam-based parameter identification, the finite-difference oracle and the
//! gradient comparison harness.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{AdjointConfig, gradient_adjoint_at};
use crate::benchmarks::generate_synthetic_data;
use crate::error::{Error, Result};
use crate::forward::gradient_forward;
use crate::model::Model;
use crate::simulate::{SimConfig, simulate};
use crate::targets::{BlendConfig, TargetSet, trajectory_loss};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step_count: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update; returns the new state and the step to add.
pub fn adam_step(state: &AdamState, grad: &[f64]) -> Result<(AdamState, Vec<f64>)> {
    if grad.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!("gradient has {} entries, expected {}", grad.len(), state.m.len())));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericalFailure { context: "adam gradient".into() });
    }
    let mut next = state.clone();
    next.step_count += 1;
    let k = next.step_count as i32;
    let c1 = 1.0 - state.beta1.powi(k);
    let c2 = 1.0 - state.beta2.powi(k);
    let mut delta = Vec::with_capacity(grad.len());
    for (i, &g) in grad.iter().enumerate() {
        next.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        next.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mh = next.m[i] / c1;
        let vh = next.v[i] / c2;
        delta.push(-state.lr * mh / (vh.sqrt() + state.eps));
    }
    Ok((next, delta))
}

/// Central-difference gradient with per-component event-count flags.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FdGradient {
    pub grad: Vec<f64>,
    /// True where the two probes saw different event counts.
    pub flagged: Vec<bool>,
}

/// Central differences with step `eps_rel * max(1, |p_i|)`.
///
/// `loss_fn` returns the loss and the number of events it saw.
pub fn fd_gradient<F>(mut loss_fn: F, p_opt: &[f64], eps_rel: f64) -> Result<FdGradient>
where
    F: FnMut(&[f64]) -> Result<(f64, usize)>,
{
    if !(eps_rel > 0.0) {
        return Err(Error::InvalidArgument("eps_rel must be positive".into()));
    }
    let mut grad = Vec::with_capacity(p_opt.len());
    let mut flagged = Vec::with_capacity(p_opt.len());
    let mut q = p_opt.to_vec();
    for i in 0..p_opt.len() {
        let h = eps_rel * p_opt[i].abs().max(1.0);
        q[i] = p_opt[i] + h;
        let (lp, np) = loss_fn(&q).map_err(|_| Error::OracleFailure { component: i })?;
        q[i] = p_opt[i] - h;
        let (lm, nm) = loss_fn(&q).map_err(|_| Error::OracleFailure { component: i })?;
        q[i] = p_opt[i];
        if !(lp.is_finite() && lm.is_finite()) {
            return Err(Error::OracleFailure { component: i });
        }
        grad.push((lp - lm) / (2.0 * h));
        flagged.push(np != nm);
    }
    Ok(FdGradient { grad, flagged })
}

/// `p_i = p_true_i * exp(u_i)` with `u_i ~ U(-w, w)`.
pub fn log_uniform_bias(p_true: &[f64], half_width: f64, seed: u64) -> Result<Vec<f64>> {
    if p_true.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::InvalidArgument("log-uniform bias needs positive parameters".into()));
    }
    if !(half_width >= 0.0 && half_width.is_finite()) {
        return Err(Error::InvalidArgument("half width must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(p_true.iter().map(|&p| p * rng.random_range(-half_width..=half_width).exp()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fwd,
    Adjoint,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fwd" => Ok(Method::Fwd),
            "adjoint" => Ok(Method::Adjoint),
            _ => Err(Error::InvalidArgument(format!("unknown method {s:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Fwd => "fwd",
            Method::Adjoint => "adjoint",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifyConfig {
    pub iters: usize,
    pub lr: f64,
    /// Stop once the largest gradient entry falls below this.
    pub grad_tol: f64,
    /// Sharpness of the training blend.
    pub beta: f64,
    pub n_targets: usize,
    pub noise_std: f64,
    pub bias_half_width: f64,
    pub seed: u64,
    pub rtol: f64,
    pub atol: f64,
    pub n_nodes_min: usize,
    /// Segment capacity of every simulation.
    pub k_max: usize,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        Self {
            iters: 500,
            lr: 1e-2,
            grad_tol: 0.0,
            beta: 150.0,
            n_targets: 500,
            noise_std: 0.0,
            bias_half_width: 0.1,
            seed: 0,
            rtol: sim.rtol,
            atol: sim.atol,
            n_nodes_min: sim.n_nodes_min,
            k_max: sim.k_max,
        }
    }
}

impl IdentifyConfig {
    pub fn sim(&self) -> SimConfig {
        SimConfig {
            rtol: self.rtol,
            atol: self.atol,
            n_nodes_min: self.n_nodes_min,
            k_max: self.k_max,
            ..SimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.grad_tol >= 0.0
            && self.beta > 0.0
            && self.n_targets >= 1
            && self.noise_std >= 0.0
            && self.bias_half_width >= 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("bad identification config {self:?}")));
        }
        self.sim().validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    Nonfinite,
    GradTol,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Iterate {
    pub iter: usize,
    pub p_opt: Vec<f64>,
    /// Blended loss the gradient was taken of.
    pub train_loss: f64,
    /// Unblended loss of the explicit simulation.
    pub eval_loss: f64,
    pub grad_norm: f64,
    /// Elapsed since the start of the run.
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Best {
    pub p_opt: Vec<f64>,
    pub eval_loss: f64,
    pub iter: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IdentificationRun {
    pub model: String,
    pub method: Method,
    pub param_names: Vec<String>,
    pub p_true: Option<Vec<f64>>,
    pub p_init: Vec<f64>,
    pub config: IdentifyConfig,
    pub iterates: Vec<Iterate>,
    pub best: Best,
    pub stop_reason: StopReason,
    /// Error that ended the run early, if any.
    pub message: Option<String>,
}

impl IdentificationRun {
    /// `|best - truth| / |truth|` per component.
    pub fn relative_errors(&self) -> Option<Vec<f64>> {
        self.p_true
            .as_ref()
            .map(|t| t.iter().zip(&self.best.p_opt).map(|(a, b)| (b - a).abs() / a.abs()).collect())
    }

    pub fn final_iterate(&self) -> &Iterate {
        self.iterates.last().expect("a run logs at least the initial point")
    }
}

/// Unblended loss of a plain simulation and its event count.
pub fn eval_loss<M: Model>(model: &M, p_opt: &[f64], targets: &TargetSet, sim: &SimConfig) -> Result<(f64, usize)> {
    let p = model.layout().assemble(p_opt)?;
    let traj = simulate(model, &p, model.horizon(), sim)?;
    let l = trajectory_loss(model, &traj, targets, &BlendConfig::hard(), &sim.alg)?;
    Ok((l, traj.n_events()))
}

/// Training loss and gradient along the chosen route.
pub fn method_gradient<M: Model>(
    model: &M,
    method: Method,
    p_opt: &[f64],
    targets: &TargetSet,
    blend: &BlendConfig,
    sim: &SimConfig,
) -> Result<(f64, Vec<f64>)> {
    match method {
        Method::Fwd => gradient_forward(model, p_opt, targets, blend, sim).map(|g| (g.loss, g.grad)),
        Method::Adjoint => {
            gradient_adjoint_at(model, p_opt, targets, blend, sim, &AdjointConfig::default()).map(|g| (g.loss, g.grad))
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| if x.is_nan() { f64::NAN } else { a.max(x.abs()) })
}

/// Adam on the selected gradient route from `p_init`.
///
/// Iterate `k` logs the losses at the point the `k`-th update starts from, so
/// a budget of `n` updates logs `n + 1` points.
pub fn run_identify<M: Model>(
    model: &M,
    method: Method,
    targets: &TargetSet,
    p_init: &[f64],
    p_true: Option<&[f64]>,
    param_names: Vec<String>,
    cfg: &IdentifyConfig,
) -> Result<IdentificationRun> {
    cfg.validate()?;
    if p_init.len() != model.layout().n_opt() {
        return Err(Error::InvalidArgument(format!("{} initial parameters for {} optimized", p_init.len(), model.layout().n_opt())));
    }
    let sim = cfg.sim();
    let blend = BlendConfig::soft(cfg.beta);
    let floor: Vec<f64> = p_init.iter().map(|p| 1e-8 * p.abs()).collect();
    let start = Instant::now();
    let mut state = AdamState::new(p_init.len(), cfg.lr);
    let mut p = p_init.to_vec();
    let mut iterates = Vec::with_capacity(cfg.iters + 1);
    let mut message = None;
    let mut stop = StopReason::Budget;
    for k in 0..=cfg.iters {
        let step = method_gradient(model, method, &p, targets, &blend, &sim)
            .and_then(|(train, grad)| eval_loss(model, &p, targets, &sim).map(|(e, _)| (train, grad, e)));
        let (train, grad, eval) = match step {
            Ok(v) => v,
            Err(e) if k == 0 => return Err(e),
            Err(e) => {
                message = Some(e.to_string());
                stop = StopReason::Nonfinite;
                break;
            }
        };
        if k == 0 && !train.is_finite() {
            return Err(Error::Setup("trajectory saturates at the initial point".into()));
        }
        let grad_norm = inf_norm(&grad);
        iterates.push(Iterate {
            iter: k,
            p_opt: p.clone(),
            train_loss: train,
            eval_loss: eval,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if !(train.is_finite() && eval.is_finite() && grad_norm.is_finite()) {
            stop = StopReason::Nonfinite;
            break;
        }
        if grad_norm < cfg.grad_tol {
            stop = StopReason::GradTol;
            break;
        }
        if k == cfg.iters {
            break;
        }
        let (next, delta) = adam_step(&state, &grad)?;
        state = next;
        for ((pi, d), f) in p.iter_mut().zip(delta).zip(&floor) {
            *pi = (*pi + d).max(*f);
        }
    }
    let best = iterates
        .iter()
        .filter(|it| it.eval_loss.is_finite())
        .fold(None::<&Iterate>, |b, it| match b {
            Some(b) if b.eval_loss <= it.eval_loss => Some(b),
            _ => Some(it),
        })
        .map(|it| Best { p_opt: it.p_opt.clone(), eval_loss: it.eval_loss, iter: it.iter })
        .ok_or_else(|| Error::Setup("no finite evaluation loss".into()))?;
    Ok(IdentificationRun {
        model: model.name().to_string(),
        method,
        param_names,
        p_true: p_true.map(<[f64]>::to_vec),
        p_init: p_init.to_vec(),
        config: cfg.clone(),
        iterates,
        best,
        stop_reason: stop,
        message,
    })
}

/// Synthetic targets at the model's base parameters and a biased start.
pub fn synthetic_problem<M: Model>(model: &M, cfg: &IdentifyConfig) -> Result<(TargetSet, Vec<f64>, Vec<f64>)> {
    let p_true = model.layout().base_opt();
    let targets = generate_synthetic_data(model, &p_true, cfg.n_targets, cfg.noise_std, cfg.seed, &cfg.sim())?;
    // Separate stream from the noise draw.
    let p_init = log_uniform_bias(&p_true, cfg.bias_half_width, cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?;
    Ok((targets, p_true, p_init))
}

/// Synthetic data, biased start and a run, for one seed.
pub fn identify_synthetic<M: Model>(
    model: &M,
    method: Method,
    param_names: Vec<String>,
    cfg: &IdentifyConfig,
) -> Result<IdentificationRun> {
    let (targets, p_true, p_init) = synthetic_problem(model, cfg)?;
    run_identify(model, method, &targets, &p_init, Some(&p_true), param_names, cfg)
}

/// One synthetic run per seed, concurrently; results in seed order.
pub fn identify_seeds<M: Model>(
    model: &M,
    method: Method,
    param_names: &[String],
    cfg: &IdentifyConfig,
    seeds: &[u64],
) -> Vec<Result<IdentificationRun>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let cfg = IdentifyConfig { seed, ..cfg.clone() };
                s.spawn(move || identify_synthetic(model, method, param_names.to_vec(), &cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Internal("identification thread panicked".into()))))
            .collect()
    })
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 { 0.0 } else { (a - b).abs() / s }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub name: String,
    pub fwd: f64,
    pub adjoint: f64,
    pub fd: f64,
    pub fwd_vs_fd: f64,
    pub adjoint_vs_fd: f64,
    pub fwd_vs_adjoint: f64,
    /// FD probes saw different event counts.
    pub unstable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareTable {
    pub loss: f64,
    pub n_events: usize,
    pub rows: Vec<CompareRow>,
    /// Errors of routes that failed, by route name.
    pub failures: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareConfig {
    pub blend: BlendConfig,
    pub sim: SimConfig,
    pub adjoint: AdjointConfig,
    pub eps_rel: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { blend: BlendConfig::hard(), sim: SimConfig::default(), adjoint: AdjointConfig::default(), eps_rel: 1e-6 }
    }
}

/// Forward, adjoint and finite-difference gradients side by side. Failed or
/// saturated routes show up as NaN columns.
pub fn compare_methods<M: Model>(
    model: &M,
    p_opt: &[f64],
    targets: &TargetSet,
    param_names: &[String],
    cfg: &CompareConfig,
) -> CompareTable {
    let n = p_opt.len();
    let nan = vec![f64::NAN; n];
    let mut failures = Vec::new();
    let mut keep = |route: &str, r: Result<(f64, Vec<f64>)>| match r {
        Ok((l, g)) if l.is_finite() => g,
        Ok(_) => {
            failures.push((route.to_string(), "saturated trajectory".to_string()));
            nan.clone()
        }
        Err(e) => {
            failures.push((route.to_string(), e.to_string()));
            nan.clone()
        }
    };
    let (loss, n_events) = eval_loss(model, p_opt, targets, &cfg.sim).unwrap_or((f64::NAN, 0));
    let fwd = keep("fwd", gradient_forward(model, p_opt, targets, &cfg.blend, &cfg.sim).map(|g| (g.loss, g.grad)));
    let adj = keep(
        "adjoint",
        gradient_adjoint_at(model, p_opt, targets, &cfg.blend, &cfg.sim, &cfg.adjoint).map(|g| (g.loss, g.grad)),
    );
    let fd_loss = |q: &[f64]| -> Result<(f64, usize)> {
        let p = model.layout().assemble(q)?;
        let traj = simulate(model, &p, model.horizon(), &cfg.sim)?;
        Ok((trajectory_loss(model, &traj, targets, &cfg.blend, &cfg.sim.alg)?, traj.n_events()))
    };
    let (fd, flags) = match fd_gradient(fd_loss, p_opt, cfg.eps_rel) {
        Ok(f) => (f.grad, f.flagged),
        Err(e) => {
            failures.push(("fd".to_string(), e.to_string()));
            (nan.clone(), vec![false; n])
        }
    };
    let rows = (0..n)
        .map(|i| CompareRow {
            name: param_names.get(i).cloned().unwrap_or_else(|| format!("p{i}")),
            fwd: fwd[i],
            adjoint: adj[i],
            fd: fd[i],
            fwd_vs_fd: rel_err(fwd[i], fd[i]),
            adjoint_vs_fd: rel_err(adj[i], fd[i]),
            fwd_vs_adjoint: rel_err(fwd[i], adj[i]),
            unstable: flags[i],
        })
        .collect();
    CompareTable { loss, n_events, rows, failures }
}
