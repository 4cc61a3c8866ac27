//! Discrete adjoint of the event-split trapezoidal residual system.
//!
//! The stored trajectory is first made exactly feasible for the residuals
//! (implicit trapezoidal steps on the frozen node grids, event times re-solved
//! from the guard rows). The reverse scan then solves the step and event
//! multiplier equations, resolving each event's affine multiplier family from
//! event-time stationarity.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::algebraic::{AlgebraicConfig, factor, solve_algebraic};
use crate::dual::{Point, Seed, Tan, jvp_flat};
use crate::dual::Scalar;
use crate::error::{Error, Result};
use crate::forward::{map_along, z_tangents};
use crate::model::{MapKind, Model, eval_primal, map_tangents};
use crate::simulate::{SimConfig, guard_rate, simulate};
use crate::targets::{BlendConfig, BlendMode, TargetSet, locate, loss, reconstruct_output, select_hard, window_weight};
use crate::trajectory::{Block, EventBlock, EventSplitTrajectory, SegmentBlock};

#[derive(Clone, Debug, PartialEq)]
pub struct AdjointConfig {
    /// Relative Newton update size at which trapezoidal steps and event times stop.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Residual level above which a trajectory is rejected as stale.
    pub stale_tol: f64,
    /// Added to tiny stationarity denominators.
    pub den_reg: f64,
    /// Denominators below this are flagged as near-singular.
    pub den_warn: f64,
    /// Multiple of the null vector added to every particular event multiplier.
    /// The resolved gradient must not depend on it.
    pub mu0_null_shift: f64,
    pub interp: NodeInterp,
    pub alg: AlgebraicConfig,
}

impl Default for AdjointConfig {
    fn default() -> Self {
        Self {
            newton_tol: 1e-15,
            newton_max_iter: 40,
            stale_tol: 1e-7,
            den_reg: 1e-12,
            den_warn: 1e-10,
            mu0_null_shift: 0.0,
            interp: NodeInterp::Hermite,
            alg: AlgebraicConfig { tol_g: 1e-13, ..AlgebraicConfig::default() },
        }
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = a.to_vec();
    v.extend_from_slice(b);
    v
}

fn node_w(seg: &SegmentBlock, k: usize) -> Vec<f64> {
    concat(&seg.nodes_x[k], &seg.nodes_z[k])
}

fn amax(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

fn trapezoid_eval<M: Model, S: Scalar>(model: &M, tc: S, tn: S, wc: &[S], wn: &[S], p: &[S], out: &mut [S]) {
    let nx = model.n_x();
    let (xc, zc) = wc.split_at(nx);
    let (xn, zn) = wn.split_at(nx);
    let mut fc = vec![S::cst(0.0); nx];
    let mut fnx = vec![S::cst(0.0); nx];
    model.rhs(tc, xc, zc, p, &mut fc);
    model.rhs(tn, xn, zn, p, &mut fnx);
    let half = (tn - tc) * 0.5;
    for i in 0..nx {
        out[i] = xc[i] - xn[i] + half * (fc[i] + fnx[i]);
    }
    model.constraint(tn, xn, zn, p, &mut out[nx..]);
}

/// Trapezoidal step residual: differential rows then `g` at the next node.
pub fn trapezoid_residual<M: Model>(model: &M, w_c: &[f64], w_n: &[f64], t_c: f64, t_n: f64, p: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; model.n_x() + model.n_z()];
    trapezoid_eval(model, t_c, t_n, w_c, w_n, p, &mut out);
    out
}

/// Jacobians of one trapezoidal step residual at stored values.
#[derive(Clone, Debug, PartialEq)]
pub struct StepJacobians {
    pub j_n: DMatrix<f64>,
    pub j_c: DMatrix<f64>,
    /// Columns over the optimized parameters.
    pub j_p: DMatrix<f64>,
    pub r_tc: DVector<f64>,
    pub r_tn: DVector<f64>,
    pub residual: DVector<f64>,
}

fn step_input(t_c: f64, t_n: f64, w_c: &[f64], w_n: &[f64], p: &[f64]) -> Vec<f64> {
    let mut v = vec![t_c, t_n];
    v.extend_from_slice(w_c);
    v.extend_from_slice(w_n);
    v.extend_from_slice(p);
    v
}

fn step_jvp<M: Model>(model: &M, input: &[f64], dirs: &DMatrix<f64>) -> Result<crate::dual::TangentBundle> {
    let nw = model.n_x() + model.n_z();
    jvp_flat(input, dirs, nw, |a: &[Tan], out| {
        trapezoid_eval(model, a[0], a[1], &a[2..2 + nw], &a[2 + nw..2 + 2 * nw], &a[2 + 2 * nw..], out)
    })
}

pub fn step_jacobians<M: Model>(
    model: &M,
    t_c: f64,
    t_n: f64,
    w_c: &[f64],
    w_n: &[f64],
    p: &[f64],
    opt: &[usize],
) -> Result<StepJacobians> {
    let nw = w_c.len();
    let input = step_input(t_c, t_n, w_c, w_n, p);
    let base = 2 + 2 * nw;
    let mut dirs = DMatrix::zeros(input.len(), base + opt.len());
    for k in 0..base {
        dirs[(k, k)] = 1.0;
    }
    for (j, &i) in opt.iter().enumerate() {
        dirs[(base + i, base + j)] = 1.0;
    }
    let b = step_jvp(model, &input, &dirs)?;
    let tg = &b.tangents;
    Ok(StepJacobians {
        r_tc: tg.column(0).into_owned(),
        r_tn: tg.column(1).into_owned(),
        j_c: tg.columns(2, nw).into_owned(),
        j_n: tg.columns(2 + nw, nw).into_owned(),
        j_p: tg.columns(base, opt.len()).into_owned(),
        residual: b.value,
    })
}

/// Newton solve of one trapezoidal step for `w_n`.
fn trapezoid_step<M: Model>(
    model: &M,
    t_c: f64,
    t_n: f64,
    w_c: &[f64],
    guess: &[f64],
    p: &[f64],
    cfg: &AdjointConfig,
) -> Result<Vec<f64>> {
    let nw = w_c.len();
    let mut w = guess.to_vec();
    let mut dirs = DMatrix::zeros(2 + 2 * nw + p.len(), nw);
    for k in 0..nw {
        dirs[(2 + nw + k, k)] = 1.0;
    }
    let mut last_r = f64::INFINITY;
    for _ in 0..cfg.newton_max_iter {
        let b = step_jvp(model, &step_input(t_c, t_n, w_c, &w, p), &dirs)?;
        last_r = b.value.amax();
        let lu = factor(b.tangents, t_n)?;
        let dw = lu.solve(&(-&b.value)).ok_or(Error::SingularJacobian { t: t_n })?;
        for (wi, d) in w.iter_mut().zip(dw.iter()) {
            *wi += d;
        }
        if dw.amax() <= cfg.newton_tol * (1.0 + amax(&w)) {
            return Ok(w);
        }
    }
    // Stagnation at round-off level still yields a feasible step.
    let r = trapezoid_residual(model, w_c, &w, t_c, t_n, p);
    if amax(&r) <= 1e-12 * (1.0 + amax(&w)) {
        return Ok(w);
    }
    Err(Error::NumericalFailure { context: format!("trapezoidal step at t={t_n} (residual {last_r:e})") })
}

struct GridSolve {
    nodes: Vec<Vec<f64>>,
    /// `d w_last / d t_e` with the start of the segment fixed.
    dw_dte: Option<DVector<f64>>,
}

fn grid_times(eta: &[f64], t_s: f64, t_e: f64) -> Vec<f64> {
    let n = eta.len();
    (0..n).map(|k| if k + 1 == n { t_e } else { t_s + eta[k] * (t_e - t_s) }).collect()
}

#[allow(clippy::too_many_arguments)]
fn integrate_grid<M: Model>(
    model: &M,
    eta: &[f64],
    t_s: f64,
    t_e: f64,
    w0: &[f64],
    guesses: &[Vec<f64>],
    p: &[f64],
    tangent: bool,
    cfg: &AdjointConfig,
) -> Result<GridSolve> {
    let times = grid_times(eta, t_s, t_e);
    let mut nodes = vec![w0.to_vec()];
    let mut dw = tangent.then(|| DVector::zeros(w0.len()));
    for k in 0..eta.len() - 1 {
        let wc = nodes[k].clone();
        let wn = trapezoid_step(model, times[k], times[k + 1], &wc, &guesses[k + 1], p, cfg)?;
        if let Some(d) = dw.as_mut() {
            let j = step_jacobians(model, times[k], times[k + 1], &wc, &wn, p, &[])?;
            let rhs = &j.j_c * &*d + &j.r_tc * eta[k] + &j.r_tn * eta[k + 1];
            let lu = factor(j.j_n, times[k + 1])?;
            *d = -lu.solve(&rhs).ok_or(Error::SingularJacobian { t: times[k + 1] })?;
        }
        nodes.push(wn);
    }
    Ok(GridSolve { nodes, dw_dte: dw })
}

/// Solve the segment ending in event `e` together with its end time.
#[allow(clippy::too_many_arguments)]
fn solve_event_segment<M: Model>(
    model: &M,
    e: usize,
    eta: &[f64],
    t_s: f64,
    tau_guess: f64,
    w0: &[f64],
    guesses: &[Vec<f64>],
    p: &[f64],
    cfg: &AdjointConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let nx = model.n_x();
    let mut tau = tau_guess;
    let mut prev = f64::INFINITY;
    for _ in 0..cfg.newton_max_iter {
        let g = integrate_grid(model, eta, t_s, tau, w0, guesses, p, true, cfg)?;
        let wl = g.nodes.last().unwrap();
        let dw = g.dw_dte.unwrap();
        let pt = Point::new(tau, &wl[..nx], &wl[nx..], p);
        let seed = Seed { dt: 1.0, dx: dw.rows(0, nx).iter().copied().collect(), dz: dw.rows(nx, wl.len() - nx).iter().copied().collect(), dp: vec![0.0; p.len()] };
        let b = map_tangents(model, MapKind::Guard(e), &pt, &[seed])?;
        let (phi, dphi) = (b.value[0], b.tangents[(0, 0)]);
        if phi == 0.0 {
            return Ok((tau, g.nodes));
        }
        if dphi == 0.0 || !dphi.is_finite() {
            return Err(Error::GrazingEvent { event: e, tau, rate: dphi, loss: f64::NAN });
        }
        let step = -phi / dphi;
        let scale = 1.0 + tau.abs();
        // Quadratic convergence that stops shrinking has hit round-off.
        let stalled = step.abs() <= 1e-12 * scale && step.abs() >= 0.5 * prev;
        if step.abs() <= cfg.newton_tol * scale || stalled {
            return Ok((tau, g.nodes));
        }
        prev = step.abs();
        tau += step;
    }
    Err(Error::NumericalFailure { context: format!("event time {e} did not converge near {tau_guess}") })
}

/// Re-solve a trajectory on its frozen node grids with trapezoidal steps,
/// keeping the event sequence and re-solving every event time.
pub fn resolve_trapezoidal<M: Model>(
    model: &M,
    p: &[f64],
    template: &EventSplitTrajectory,
    cfg: &AdjointConfig,
) -> Result<EventSplitTrajectory> {
    if template.saturated {
        return Err(Error::InvalidArgument("cannot re-solve a saturated trajectory".into()));
    }
    let segs = template.segment_list();
    let evs = template.event_list();
    let x0 = model.x0().to_vec();
    let z0 = solve_algebraic(model, 0.0, &x0, p, &segs[0].nodes_z[0], &cfg.alg)?;
    let mut w = concat(&x0, &z0);
    let mut t_s = 0.0;
    let mut blocks = Vec::with_capacity(template.blocks.len());
    let nx = model.n_x();
    for (m, seg) in segs.iter().enumerate() {
        let guesses: Vec<Vec<f64>> = (0..seg.len()).map(|k| node_w(seg, k)).collect();
        let (t_e, nodes) = if m < evs.len() {
            solve_event_segment(model, evs[m].event_index, &seg.eta, t_s, evs[m].tau, &w, &guesses, p, cfg)?
        } else {
            let g = integrate_grid(model, &seg.eta, t_s, template.horizon, &w, &guesses, p, false, cfg)?;
            (template.horizon, g.nodes)
        };
        let times = grid_times(&seg.eta, t_s, t_e);
        let nodes_x: Vec<Vec<f64>> = nodes.iter().map(|n| n[..nx].to_vec()).collect();
        let nodes_z: Vec<Vec<f64>> = nodes.iter().map(|n| n[nx..].to_vec()).collect();
        let nodes_xdot = (0..nodes.len())
            .map(|k| eval_primal(model, MapKind::Rhs, times[k], &nodes_x[k], &nodes_z[k], p))
            .collect();
        let last = nodes.len() - 1;
        blocks.push(Block::Segment(SegmentBlock {
            t_start: t_s,
            t_end: t_e,
            eta: seg.eta.clone(),
            nodes_x: nodes_x.clone(),
            nodes_z: nodes_z.clone(),
            nodes_xdot,
            nodes_aux: Vec::new(),
            nodes_auxdot: Vec::new(),
        }));
        if m < evs.len() {
            let e = evs[m].event_index;
            let (xm, zm) = (&nodes_x[last], &nodes_z[last]);
            let xp = eval_primal(model, MapKind::Reset(e), t_e, xm, zm, p);
            let zp = solve_algebraic(model, t_e, &xp, p, &evs[m].z_plus, &cfg.alg)?;
            let rate = guard_rate(model, e, t_e, xm, zm, p)?;
            blocks.push(Block::Event(EventBlock {
                tau: t_e,
                event_index: e,
                x_minus: xm.clone(),
                z_minus: zm.clone(),
                x_plus: xp.clone(),
                z_plus: zp.clone(),
                guard_rate: rate,
                aux_minus: Vec::new(),
                aux_plus: Vec::new(),
                aux_record: Vec::new(),
            }));
            w = concat(&xp, &zp);
            t_s = t_e;
        }
    }
    while blocks.len() < template.blocks.len() {
        blocks.push(Block::Padding);
    }
    Ok(EventSplitTrajectory {
        blocks,
        k_max: template.k_max,
        saturated: false,
        horizon: template.horizon,
        p: p.to_vec(),
        grazing: Vec::new(),
    })
}

fn event_eval<M: Model, S: Scalar>(model: &M, e: usize, tau: S, wp: &[S], wm: &[S], p: &[S], out: &mut [S]) {
    let nx = model.n_x();
    let (xp, zp) = wp.split_at(nx);
    let (xm, zm) = wm.split_at(nx);
    out[0] = model.guard(e, tau, xm, zm, p);
    let mods = model.reset_modifies(e);
    let mut psi = vec![S::cst(0.0); nx];
    model.reset(e, tau, xm, zm, p, &mut psi);
    let mut r = 1;
    for &i in &mods {
        out[r] = xp[i] - psi[i];
        r += 1;
    }
    for j in (0..nx).filter(|j| !mods.contains(j)) {
        out[r] = xp[j] - xm[j];
        r += 1;
    }
    model.constraint(tau, xp, zp, p, &mut out[r..]);
}

/// Event residual `[guard; reset rows; continuity rows; g at w+]`.
pub fn event_residual<M: Model>(model: &M, e: usize, tau: f64, w_plus: &[f64], w_minus: &[f64], p: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; 1 + model.n_x() + model.n_z()];
    event_eval(model, e, tau, w_plus, w_minus, p, &mut out);
    out
}

/// Jacobians of one event residual.
#[derive(Clone, Debug, PartialEq)]
pub struct EventJacobians {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub e_tau: DVector<f64>,
    pub residual: DVector<f64>,
}

pub fn event_jacobians<M: Model>(model: &M, ev: &EventBlock, p: &[f64], opt: &[usize]) -> Result<EventJacobians> {
    let wp = concat(&ev.x_plus, &ev.z_plus);
    let wm = concat(&ev.x_minus, &ev.z_minus);
    let nw = wp.len();
    let mut input = vec![ev.tau];
    input.extend_from_slice(&wp);
    input.extend_from_slice(&wm);
    input.extend_from_slice(p);
    let base = 1 + 2 * nw;
    let mut dirs = DMatrix::zeros(input.len(), base + opt.len());
    for k in 0..base {
        dirs[(k, k)] = 1.0;
    }
    for (j, &i) in opt.iter().enumerate() {
        dirs[(base + i, base + j)] = 1.0;
    }
    let e = ev.event_index;
    let b = jvp_flat(&input, &dirs, nw + 1, |a: &[Tan], out| {
        event_eval(model, e, a[0], &a[1..1 + nw], &a[1 + nw..base], &a[base..], out)
    })?;
    let tg = &b.tangents;
    Ok(EventJacobians {
        e_tau: tg.column(0).into_owned(),
        a: tg.columns(1, nw).into_owned(),
        b: tg.columns(1 + nw, nw).into_owned(),
        c: tg.columns(base, opt.len()).into_owned(),
        residual: b.value,
    })
}

/// Result of one smooth-step adjoint solve.
#[derive(Clone, Debug, PartialEq)]
pub struct StepAdjoint {
    pub lambda: DVector<f64>,
    pub a_c: DVector<f64>,
    pub dq_p: DVector<f64>,
    pub d_c: f64,
    pub d_n: f64,
}

/// Solve `J_n^T lambda = -a_n` and propagate the load to the previous node.
pub fn step_adjoint(a_n: &DVector<f64>, step: &StepJacobians, ell_c: &DVector<f64>) -> Result<StepAdjoint> {
    let fail = Error::AdjointLinearFailure { segment: 0, step: 0 };
    let lu = factor(step.j_n.transpose(), f64::NAN).map_err(|_| fail.clone())?;
    let lambda = lu.solve(&(-a_n)).ok_or(fail)?;
    Ok(StepAdjoint {
        a_c: ell_c + step.j_c.tr_mul(&lambda),
        dq_p: step.j_p.tr_mul(&lambda),
        d_c: step.r_tc.dot(&lambda),
        d_n: step.r_tn.dot(&lambda),
        lambda,
    })
}

/// Outputs of a reverse sweep through one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub a_s: DVector<f64>,
    pub qp: DVector<f64>,
    pub qts: f64,
    pub qte: f64,
}

fn sweep(
    jacs: &[StepJacobians],
    eta: &[f64],
    terminal: &DVector<f64>,
    loads: Option<&[DVector<f64>]>,
    n_opt: usize,
    segment: usize,
) -> Result<SweepResult> {
    let nw = terminal.len();
    let load = |k: usize| loads.map_or_else(|| DVector::zeros(nw), |l| l[k].clone());
    let n = eta.len();
    let mut a = terminal + load(n - 1);
    let mut out = SweepResult { a_s: DVector::zeros(nw), qp: DVector::zeros(n_opt), qts: 0.0, qte: 0.0 };
    for k in (0..n - 1).rev() {
        let s = step_adjoint(&a, &jacs[k], &load(k)).map_err(|_| Error::AdjointLinearFailure { segment, step: k })?;
        out.qp += &s.dq_p;
        let (ec, en) = (eta[k], eta[k + 1]);
        out.qts += s.d_c * (1.0 - ec) + s.d_n * (1.0 - en);
        out.qte += s.d_c * ec + s.d_n * en;
        a = s.a_c;
    }
    out.a_s = a;
    Ok(out)
}

fn segment_jacobians<M: Model>(model: &M, seg: &SegmentBlock, p: &[f64], opt: &[usize]) -> Result<Vec<StepJacobians>> {
    let times = seg.node_times();
    (0..seg.len() - 1)
        .map(|k| step_jacobians(model, times[k], times[k + 1], &node_w(seg, k), &node_w(seg, k + 1), p, opt))
        .collect()
}

/// Reverse sweep of one segment from `terminal_load` (plus the node loads).
pub fn segment_sweep<M: Model>(
    model: &M,
    seg: &SegmentBlock,
    terminal_load: &DVector<f64>,
    node_loads: Option<&[DVector<f64>]>,
    p: &[f64],
) -> Result<SweepResult> {
    let opt = model.layout().opt_indices();
    let jacs = segment_jacobians(model, seg, p, opt)?;
    sweep(&jacs, &seg.eta, terminal_load, node_loads, opt.len(), 0)
}

/// Minimum-norm `mu0` with `A^T mu0 = -a_plus` and the unit null vector of `A^T`.
pub fn event_adjoint(ev: &EventJacobians, a_plus: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let a = &ev.a;
    let (rows, nw) = a.shape();
    let degenerate = Error::DegenerateEvent { event: 0 };
    let qr = a.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let scale = a.amax().max(1e-300);
    if r.diagonal().iter().any(|d| !(d.abs() > 1e-12 * scale)) {
        return Err(degenerate);
    }
    let y = r.transpose().solve_lower_triangular(&(-a_plus)).ok_or(degenerate)?;
    let mu0 = &q * y;
    let project = |v: DVector<f64>| -> DVector<f64> {
        let c = q.tr_mul(&v);
        v - &q * c
    };
    let mut best = DVector::zeros(rows);
    for i in 0..rows {
        let cand = project(DVector::from_fn(rows, |k, _| if k == i { 1.0 } else { 0.0 }));
        if cand.norm() > best.norm() {
            best = cand;
        }
    }
    let mut v = project(best.normalize()).normalize();
    if let Some(first) = v.iter().find(|c| c.abs() > 1e-12) {
        if *first < 0.0 {
            v = -v;
        }
    }
    debug_assert_eq!(v.len(), nw + 1);
    Ok((mu0, v))
}

/// Affine description of an event whose stationarity scalar is still open.
#[derive(Clone, Debug, PartialEq)]
pub struct PendingEvent {
    pub a_minus_0: DVector<f64>,
    pub a_minus_v: DVector<f64>,
    pub qp_0: DVector<f64>,
    pub qp_v: DVector<f64>,
    pub qtau_0: f64,
    pub qtau_v: f64,
}

pub fn build_pending(
    ev: &EventJacobians,
    mu0: &DVector<f64>,
    v: &DVector<f64>,
    ell_tau_m: f64,
    qtau_plus: f64,
) -> PendingEvent {
    PendingEvent {
        a_minus_0: ev.b.tr_mul(mu0),
        a_minus_v: ev.b.tr_mul(v),
        qp_0: ev.c.tr_mul(mu0),
        qp_v: ev.c.tr_mul(v),
        qtau_0: ell_tau_m + qtau_plus + ev.e_tau.dot(mu0),
        qtau_v: ev.e_tau.dot(v),
    }
}

/// A resolved pending event.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolution {
    pub c: f64,
    pub a_s: DVector<f64>,
    pub dq_p: DVector<f64>,
    /// Start-time sensitivity of the preceding segment.
    pub qts: f64,
    pub denominator: f64,
    pub near_singular: bool,
}

/// Fix the affine scalar from event-time stationarity and combine both sweeps.
pub fn resolve_pending(pending: &PendingEvent, seg0: &SweepResult, segv: &SweepResult, den_reg: f64, den_warn: f64) -> Resolution {
    let num = pending.qtau_0 + seg0.qte;
    let mut den = pending.qtau_v + segv.qte;
    if den.abs() < den_reg {
        den += if den < 0.0 { -den_reg } else { den_reg };
    }
    let c = -num / den;
    Resolution {
        c,
        a_s: &seg0.a_s + &segv.a_s * c,
        dq_p: (&pending.qp_0 + &seg0.qp) + (&pending.qp_v + &segv.qp) * c,
        qts: seg0.qts + c * segv.qts,
        denominator: den,
        near_singular: den.abs() < den_warn,
    }
}

/// Direct derivatives of the discrete loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossLoads {
    pub loss: f64,
    pub y_hat: Vec<Vec<f64>>,
    /// `[segment][node]` loads on `w = (x, z)`.
    pub node: Vec<Vec<DVector<f64>>>,
    pub ell_p: DVector<f64>,
    pub ell_tau: Vec<f64>,
}

/// How the discrete loss reads states between stored nodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeInterp {
    /// Piecewise linear in the node states.
    Linear,
    /// Cubic Hermite with node slopes `f(t_k, x_k, z_k, p)`.
    #[default]
    Hermite,
}

/// Interpolated state of one segment at a target time with its first-order
/// dependence on nodes, parameters and the segment boundary times.
struct Candidate {
    x: Vec<f64>,
    /// `(node, dX/dw_node)` with `n_x x n_w` blocks.
    nodes: Vec<(usize, DMatrix<f64>)>,
    d_p: DMatrix<f64>,
    d_ts: Vec<f64>,
    d_te: Vec<f64>,
}

fn state_selector(nx: usize, nw: usize, scale: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(nx, nw);
    for i in 0..nx {
        m[(i, i)] = scale;
    }
    m
}

fn end_candidate(seg: &SegmentBlock, k: usize, n_opt: usize) -> Candidate {
    let nx = seg.nodes_x[0].len();
    let nw = nx + seg.nodes_z[0].len();
    Candidate {
        x: seg.nodes_x[k].clone(),
        nodes: vec![(k, state_selector(nx, nw, 1.0))],
        d_p: DMatrix::zeros(nx, n_opt),
        d_ts: vec![0.0; nx],
        d_te: vec![0.0; nx],
    }
}

/// Node rhs value and its Jacobian columns `[f_t | f_x | f_z | f_p(opt)]`.
fn rhs_jacobian<M: Model>(model: &M, seg: &SegmentBlock, k: usize, p: &[f64], opt: &[usize]) -> Result<crate::dual::TangentBundle> {
    let pt = Point::new(seg.node_time(k), &seg.nodes_x[k], &seg.nodes_z[k], p);
    let (nx, nz) = (pt.x.len(), pt.z.len());
    let mut seeds = Vec::with_capacity(1 + nx + nz + opt.len());
    let mut s = Seed::zeros(&pt);
    s.dt = 1.0;
    seeds.push(s);
    for i in 0..nx + nz {
        let mut s = Seed::zeros(&pt);
        if i < nx {
            s.dx[i] = 1.0;
        } else {
            s.dz[i - nx] = 1.0;
        }
        seeds.push(s);
    }
    for &i in opt {
        let mut s = Seed::zeros(&pt);
        s.dp[i] = 1.0;
        seeds.push(s);
    }
    map_tangents(model, MapKind::Rhs, &pt, &seeds)
}

fn candidate<M: Model>(
    model: &M,
    seg: &SegmentBlock,
    t: f64,
    p: &[f64],
    opt: &[usize],
    interp: NodeInterp,
) -> Result<Candidate> {
    let n = seg.len();
    let n_opt = opt.len();
    if t <= seg.t_start || n < 2 {
        return Ok(end_candidate(seg, 0, n_opt));
    }
    if t >= seg.t_end {
        return Ok(end_candidate(seg, n - 1, n_opt));
    }
    let loc = locate(seg, t);
    let (j, th, h) = (loc.j, loc.s, loc.h);
    if !(h > 0.0) {
        return Ok(end_candidate(seg, j, n_opt));
    }
    let nx = seg.nodes_x[0].len();
    let nw = nx + seg.nodes_z[0].len();
    let (x0, x1) = (&seg.nodes_x[j], &seg.nodes_x[j + 1]);
    let (e0, e1) = (seg.eta[j], seg.eta[j + 1]);
    let dth0 = -(1.0 - th) / h;
    let dth1 = -th / h;
    // derivatives with respect to the two node times
    let mut d_t0 = vec![0.0; nx];
    let mut d_t1 = vec![0.0; nx];
    let mut out = Candidate {
        x: vec![0.0; nx],
        nodes: Vec::with_capacity(2),
        d_p: DMatrix::zeros(nx, n_opt),
        d_ts: vec![0.0; nx],
        d_te: vec![0.0; nx],
    };
    match interp {
        NodeInterp::Linear => {
            for i in 0..nx {
                out.x[i] = (1.0 - th) * x0[i] + th * x1[i];
                let dx = x1[i] - x0[i];
                d_t0[i] = dx * dth0;
                d_t1[i] = dx * dth1;
            }
            out.nodes.push((j, state_selector(nx, nw, 1.0 - th)));
            out.nodes.push((j + 1, state_selector(nx, nw, th)));
        }
        NodeInterp::Hermite => {
            let j0 = rhs_jacobian(model, seg, j, p, opt)?;
            let j1 = rhs_jacobian(model, seg, j + 1, p, opt)?;
            let (f0, f1) = (&j0.value, &j1.value);
            let (b, db) = crate::targets::hermite_basis(th);
            for i in 0..nx {
                out.x[i] = b[0] * x0[i] + b[1] * h * f0[i] + b[2] * x1[i] + b[3] * h * f1[i];
                let dth = db[0] * x0[i] + db[1] * h * f0[i] + db[2] * x1[i] + db[3] * h * f1[i];
                let dh = b[1] * f0[i] + b[3] * f1[i];
                d_t0[i] = dth * dth0 - dh + b[1] * h * j0.tangents[(i, 0)];
                d_t1[i] = dth * dth1 + dh + b[3] * h * j1.tangents[(i, 0)];
            }
            let mut n0 = state_selector(nx, nw, b[0]);
            n0 += j0.tangents.columns(1, nw) * (b[1] * h);
            let mut n1 = state_selector(nx, nw, b[2]);
            n1 += j1.tangents.columns(1, nw) * (b[3] * h);
            out.nodes.push((j, n0));
            out.nodes.push((j + 1, n1));
            out.d_p = j0.tangents.columns(1 + nw, n_opt) * (b[1] * h) + j1.tangents.columns(1 + nw, n_opt) * (b[3] * h);
        }
    }
    for i in 0..nx {
        out.d_ts[i] = d_t0[i] * (1.0 - e0) + d_t1[i] * (1.0 - e1);
        out.d_te[i] = d_t0[i] * e0 + d_t1[i] * e1;
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Discrete loss from interpolation of the stored nodes and its direct
/// derivatives with respect to nodes, parameters and event times.
pub fn loss_loads<M: Model>(
    model: &M,
    traj: &EventSplitTrajectory,
    targets: &TargetSet,
    blend: &BlendConfig,
    interp: NodeInterp,
    alg: &AlgebraicConfig,
) -> Result<LossLoads> {
    if traj.saturated {
        return Err(Error::InvalidArgument("cannot evaluate a saturated trajectory".into()));
    }
    let data = targets.data.as_ref().ok_or_else(|| Error::InvalidArgument("targets carry no data".into()))?;
    let segs = traj.segment_list();
    let n_ev = traj.n_events();
    let (nx, nz) = (model.n_x(), model.n_z());
    let p = &traj.p;
    let opt = model.layout().opt_indices();
    let n_opt = opt.len();
    let mut node: Vec<Vec<DVector<f64>>> = segs.iter().map(|s| vec![DVector::zeros(nx + nz); s.len()]).collect();
    let mut ell_p = DVector::zeros(n_opt);
    let mut ell_tau = vec![0.0; n_ev];
    let mut y_hat = Vec::with_capacity(targets.len());
    let scale = 2.0 / targets.len() as f64;
    let mut dirs: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..nx)
        .map(|c| {
            let mut dx = vec![0.0; nx];
            dx[c] = 1.0;
            (0.0, dx, vec![0.0; p.len()])
        })
        .collect();
    for &i in opt {
        let mut dp = vec![0.0; p.len()];
        dp[i] = 1.0;
        dirs.push((0.0, vec![0.0; nx], dp));
    }
    for (i, &t) in targets.times.iter().enumerate() {
        let k_sel = select_hard(traj, t)?;
        // (segment, coefficient, candidate, raw weight, sigmoids)
        let mut parts: Vec<(usize, f64, Candidate, f64, f64, f64)> = Vec::new();
        let mut den = 1.0;
        match blend.mode {
            BlendMode::Hard => parts.push((k_sel, 1.0, candidate(model, segs[k_sel], t, p, opt, interp)?, 1.0, 1.0, 1.0)),
            BlendMode::Soft => {
                den = blend.eps_omega;
                for (k, seg) in segs.iter().enumerate() {
                    let (w, sa, sb) = window_weight(seg.t_start, seg.t_end, t, blend.beta);
                    den += w;
                    parts.push((k, w, candidate(model, seg, t, p, opt, interp)?, w, sa, sb));
                }
                for part in parts.iter_mut() {
                    part.1 /= den;
                }
            }
        }
        let mut x_hat = vec![0.0; nx];
        for (_, c, lc, ..) in &parts {
            for (o, v) in x_hat.iter_mut().zip(&lc.x) {
                *o += c * v;
            }
        }
        let seg = segs[k_sel];
        let loc = locate(seg, t);
        let zw = seg.nodes_z[if loc.s < 0.5 { loc.j } else { (loc.j + 1).min(seg.len() - 1) }].clone();
        let (z_hat, y) = reconstruct_output(model, t, &x_hat, p, &zw, alg)?;
        let zt = z_tangents(model, t, &x_hat, &z_hat, p, &dirs)?;
        let dy = map_along(model, MapKind::Output, t, &x_hat, &z_hat, p, &dirs, &zt)?;
        let r: Vec<f64> = y.iter().zip(&data[i]).map(|(a, b)| scale * (a - b)).collect();
        let g: Vec<f64> = (0..nx + n_opt).map(|c| (0..r.len()).map(|row| r[row] * dy[(row, c)]).sum()).collect();
        let (gx, gp) = g.split_at(nx);
        for j in 0..n_opt {
            ell_p[j] += gp[j];
        }
        let gxv = DVector::from_column_slice(gx);
        for (k, c, lc, w, sa, sb) in &parts {
            for (nd, jac) in &lc.nodes {
                node[*k][*nd] += jac.tr_mul(&gxv) * *c;
            }
            ell_p += lc.d_p.tr_mul(&gxv) * *c;
            if *k > 0 {
                ell_tau[k - 1] += c * dot(gx, &lc.d_ts);
            }
            if *k < n_ev {
                ell_tau[*k] += c * dot(gx, &lc.d_te);
            }
            if blend.mode == BlendMode::Soft {
                let gw: f64 = (0..nx).map(|q| gx[q] * (lc.x[q] - x_hat[q]) / den).sum();
                if *k > 0 {
                    ell_tau[k - 1] += gw * (-blend.beta * (1.0 - sa) * w);
                }
                if *k < n_ev {
                    ell_tau[*k] += gw * blend.beta * (1.0 - sb) * w;
                }
            }
        }
        y_hat.push(y);
    }
    let l = loss(&y_hat, data);
    Ok(LossLoads { loss: l, y_hat, node, ell_p, ell_tau })
}

/// Per-event diagnostics of the reverse scan.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventReport {
    pub tau: f64,
    pub c: f64,
    pub denominator: f64,
    pub feasibility: f64,
    pub near_singular: bool,
    /// `max(|A^T v|, |A^T mu0 + a+|)`.
    pub null_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientReport {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub per_event: Vec<EventReport>,
    pub feasibility_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjointGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub report: GradientReport,
}

/// Largest step and event residuals of a stored trajectory.
pub fn feasibility<M: Model>(model: &M, traj: &EventSplitTrajectory) -> (f64, Vec<f64>) {
    let p = &traj.p;
    let mut steps = 0.0f64;
    for seg in traj.segments() {
        let times = seg.node_times();
        for k in 0..seg.len() - 1 {
            let r = trapezoid_residual(model, &node_w(seg, k), &node_w(seg, k + 1), times[k], times[k + 1], p);
            steps = steps.max(amax(&r));
        }
    }
    let events = traj
        .events()
        .map(|ev| {
            let wp = concat(&ev.x_plus, &ev.z_plus);
            let wm = concat(&ev.x_minus, &ev.z_minus);
            amax(&event_residual(model, ev.event_index, ev.tau, &wp, &wm, p))
        })
        .collect();
    (steps, events)
}

/// Gradient of the discrete loss by the reverse multiplier scan over a
/// feasible trajectory.
pub fn gradient_adjoint<M: Model>(
    model: &M,
    traj: &EventSplitTrajectory,
    targets: &TargetSet,
    blend: &BlendConfig,
    cfg: &AdjointConfig,
) -> Result<AdjointGradient> {
    blend.validate()?;
    let opt = model.layout().opt_indices();
    let n_opt = opt.len();
    if traj.saturated {
        let grad = vec![0.0; n_opt];
        let report = GradientReport { loss: f64::INFINITY, grad: grad.clone(), per_event: Vec::new(), feasibility_max: 0.0 };
        return Ok(AdjointGradient { loss: f64::INFINITY, grad, report });
    }
    let p = &traj.p;
    let (nx, nz) = (model.n_x(), model.n_z());
    let segs = traj.segment_list();
    let evs = traj.event_list();
    let jacs: Vec<Vec<StepJacobians>> =
        segs.iter().map(|s| segment_jacobians(model, s, p, opt)).collect::<Result<_>>()?;
    let ejacs: Vec<EventJacobians> = evs.iter().map(|e| event_jacobians(model, e, p, opt)).collect::<Result<_>>()?;
    let step_feas = jacs.iter().flatten().fold(0.0f64, |a, j| a.max(j.residual.amax()));
    let ev_feas: Vec<f64> = ejacs.iter().map(|e| e.residual.amax()).collect();
    let feasibility_max = ev_feas.iter().fold(step_feas, |a, v| a.max(*v));
    if !(feasibility_max <= cfg.stale_tol) {
        return Err(Error::StaleTrajectory { residual: feasibility_max });
    }
    let loads = loss_loads(model, traj, targets, blend, cfg.interp, &cfg.alg)?;
    let last = segs.len() - 1;
    let tail = sweep(&jacs[last], &segs[last].eta, &DVector::zeros(nx + nz), Some(&loads.node[last]), n_opt, last)?;
    let mut qp = &loads.ell_p + &tail.qp;
    let mut a_plus = tail.a_s;
    let mut qtau_plus = tail.qts;
    let mut per_event = Vec::with_capacity(evs.len());
    for m in (0..evs.len()).rev() {
        let ej = &ejacs[m];
        let (mut mu0, v) = event_adjoint(ej, &a_plus).map_err(|_| Error::DegenerateEvent { event: m })?;
        if cfg.mu0_null_shift != 0.0 {
            mu0 += &v * cfg.mu0_null_shift;
        }
        let null_residual = ej.a.tr_mul(&v).amax().max((ej.a.tr_mul(&mu0) + &a_plus).amax());
        let pending = build_pending(ej, &mu0, &v, loads.ell_tau[m], qtau_plus);
        let s0 = sweep(&jacs[m], &segs[m].eta, &pending.a_minus_0, Some(&loads.node[m]), n_opt, m)?;
        let sv = sweep(&jacs[m], &segs[m].eta, &pending.a_minus_v, None, n_opt, m)?;
        let res = resolve_pending(&pending, &s0, &sv, cfg.den_reg, cfg.den_warn);
        qp += &res.dq_p;
        a_plus = res.a_s;
        qtau_plus = res.qts;
        per_event.push(EventReport {
            tau: evs[m].tau,
            c: res.c,
            denominator: res.denominator,
            feasibility: ev_feas[m],
            near_singular: res.near_singular,
            null_residual,
        });
    }
    per_event.reverse();
    if nz > 0 {
        // z0 is fixed by g(0, x0, z0, p) = 0 while x0 carries no parameters.
        let s0 = segs[0];
        let pt = Point::new(s0.t_start, &s0.nodes_x[0], &s0.nodes_z[0], p);
        let mut seeds = Vec::with_capacity(nz + n_opt);
        for c in 0..nz {
            let mut s = Seed::zeros(&pt);
            s.dz[c] = 1.0;
            seeds.push(s);
        }
        for &i in opt {
            let mut s = Seed::zeros(&pt);
            s.dp[i] = 1.0;
            seeds.push(s);
        }
        let b = map_tangents(model, MapKind::Constraint, &pt, &seeds)?;
        let gz = b.tangents.columns(0, nz).into_owned();
        let gp = b.tangents.columns(nz, n_opt).into_owned();
        let a_z = a_plus.rows(nx, nz).into_owned();
        let lu = factor(gz.transpose(), 0.0)?;
        let nu = -lu.solve(&a_z).ok_or(Error::SingularJacobian { t: 0.0 })?;
        qp += gp.tr_mul(&nu);
    }
    let grad: Vec<f64> = qp.iter().copied().collect();
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericalFailure { context: "adjoint gradient".into() });
    }
    let report = GradientReport { loss: loads.loss, grad: grad.clone(), per_event, feasibility_max };
    Ok(AdjointGradient { loss: loads.loss, grad, report })
}

/// Explicit simulation followed by the trapezoidal re-solve used by the adjoint.
pub fn adjoint_trajectory<M: Model>(
    model: &M,
    p_opt: &[f64],
    sim: &SimConfig,
    cfg: &AdjointConfig,
) -> Result<EventSplitTrajectory> {
    let p = model.layout().assemble(p_opt)?;
    let rk = simulate(model, &p, model.horizon(), sim)?;
    if rk.saturated {
        return Ok(rk);
    }
    resolve_trapezoidal(model, &p, &rk, cfg)
}

/// Simulate, re-solve and run the adjoint scan.
pub fn gradient_adjoint_at<M: Model>(
    model: &M,
    p_opt: &[f64],
    targets: &TargetSet,
    blend: &BlendConfig,
    sim: &SimConfig,
    cfg: &AdjointConfig,
) -> Result<AdjointGradient> {
    let traj = adjoint_trajectory(model, p_opt, sim, cfg)?;
    gradient_adjoint(model, &traj, targets, blend, cfg)
}

/// The discrete objective at `p_opt` on the grids and event sequence of
/// `template`.
pub fn discrete_objective<M: Model>(
    model: &M,
    p_opt: &[f64],
    template: &EventSplitTrajectory,
    targets: &TargetSet,
    blend: &BlendConfig,
    cfg: &AdjointConfig,
) -> Result<f64> {
    let p = model.layout().assemble(p_opt)?;
    let traj = resolve_trapezoidal(model, &p, template, cfg)?;
    Ok(loss_loads(model, &traj, targets, blend, cfg.interp, &cfg.alg)?.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::gradient_forward;
    use crate::model::ParameterLayout;
    use crate::targets::predict;
    use crate::testmodels::{Ball1D, Constant, Decay, LinearAlg, Quadratic};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `x' = 1`, event when `t` reaches the parameter, reset halves `x`.
    struct Timer(ParameterLayout);

    impl Model for Timer {
        fn name(&self) -> &str {
            "timer"
        }
        fn n_x(&self) -> usize {
            1
        }
        fn n_e(&self) -> usize {
            1
        }
        fn layout(&self) -> &ParameterLayout {
            &self.0
        }
        fn x0(&self) -> &[f64] {
            &[0.0]
        }
        fn horizon(&self) -> f64 {
            2.0
        }
        fn rhs<S: Scalar>(&self, _t: S, _x: &[S], _z: &[S], _p: &[S], out: &mut [S]) {
            out[0] = S::cst(1.0);
        }
        fn guard<S: Scalar>(&self, _e: usize, t: S, _x: &[S], _z: &[S], p: &[S]) -> S {
            p[0] - t
        }
        fn reset<S: Scalar>(&self, _e: usize, _t: S, x: &[S], _z: &[S], _p: &[S], out: &mut [S]) {
            out[0] = x[0] * 0.5;
        }
        fn reset_modifies(&self, _e: usize) -> Vec<usize> {
            vec![0]
        }
    }

    fn col(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn self_data<M: Model>(m: &M, p_opt: &[f64], n: usize) -> TargetSet {
        let cfg = SimConfig::gradcheck();
        let p = m.layout().assemble(p_opt).unwrap();
        let traj = simulate(m, &p, m.horizon(), &cfg).unwrap();
        let t = TargetSet::uniform(m.horizon(), n);
        let pred = predict(m, &traj, &t, &BlendConfig::hard(), &cfg.alg).unwrap();
        t.with_data(pred.y_hat).unwrap()
    }

    fn discrete_fd<M: Model>(
        m: &M,
        p_opt: &[f64],
        template: &EventSplitTrajectory,
        targets: &TargetSet,
        blend: &BlendConfig,
    ) -> Vec<f64> {
        let cfg = AdjointConfig::default();
        (0..p_opt.len())
            .map(|j| {
                let h = 1e-6 * p_opt[j].abs().max(1e-3);
                let mut a = p_opt.to_vec();
                let mut b = p_opt.to_vec();
                a[j] += h;
                b[j] -= h;
                let fa = discrete_objective(m, &a, template, targets, blend, &cfg).unwrap();
                let fb = discrete_objective(m, &b, template, targets, blend, &cfg).unwrap();
                (fa - fb) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], rel: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= rel * y.abs().max(1e-8), "adjoint {a:?} vs reference {b:?}");
        }
    }

    #[test]
    fn trapezoid_residual_examples() {
        let m = Constant::new(0.0, 1.0);
        // x' = 1 is exact under the trapezoid rule
        let lin = LinearAlg::with_params(1.0, 0.0, 0.0, 1.0);
        let p = lin.layout().p_base().to_vec();
        let r = trapezoid_residual(&lin, &[0.0, 0.0], &[1.0, 0.0], 0.0, 1.0, &p);
        assert_eq!(r, vec![0.0, 0.0]);
        // x' = a x with a = 1
        let d = Decay::new(-1.0, 1.0, 1.0);
        let xn = 1.05 / 0.95;
        let r = trapezoid_residual(&d, &[1.0], &[xn], 0.0, 0.1, &[-1.0]);
        assert!(r[0].abs() < 1e-15);
        // g = z - p x with p = 1: last row is z_n - x_n
        let lin = LinearAlg::with_params(1.0, 1.0, 0.0, 1.0);
        let r = trapezoid_residual(&lin, &[0.0, 0.0], &[0.5, 0.8], 0.0, 0.5, &[1.0, 1.0]);
        assert!((r[1] - 0.3).abs() < 1e-15);
        assert_eq!(trapezoid_residual(&m, &[2.0], &[2.0], 0.0, 1.0, &[]), vec![0.0]);
    }

    #[test]
    fn trivial_step_propagates_load() {
        let m = Constant::new(0.0, 1.0);
        let j = step_jacobians(&m, 0.0, 1.0, &[0.0], &[0.0], &[], &[]).unwrap();
        assert_eq!(j.j_n[(0, 0)], -1.0);
        assert_eq!(j.j_c[(0, 0)], 1.0);
        let s = step_adjoint(&col(&[1.0]), &j, &col(&[0.0])).unwrap();
        assert_eq!(s.lambda[0], 1.0);
        assert_eq!(s.a_c[0], 1.0);
        assert_eq!(s.dq_p.len(), 0);
        let s = step_adjoint(&col(&[0.0]), &j, &col(&[0.0])).unwrap();
        assert_eq!((s.lambda[0], s.a_c[0], s.d_c, s.d_n), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn parameter_free_step_has_no_parameter_load() {
        let m = Decay::new(0.5, 1.0, 1.0);
        let layout_free = Constant::new(1.0, 1.0);
        let j = step_jacobians(&layout_free, 0.0, 0.1, &[1.0], &[1.0], &[], &[]).unwrap();
        let s = step_adjoint(&col(&[2.0]), &j, &col(&[0.0])).unwrap();
        assert_eq!(s.dq_p.len(), 0);
        let j = step_jacobians(&m, 0.0, 0.1, &[1.0], &[0.95], &[0.5], &[0]).unwrap();
        let s = step_adjoint(&col(&[2.0]), &j, &col(&[0.0])).unwrap();
        assert!(s.dq_p[0] != 0.0);
    }

    #[test]
    fn singular_step_is_reported() {
        let j = StepJacobians {
            j_n: DMatrix::zeros(1, 1),
            j_c: DMatrix::identity(1, 1),
            j_p: DMatrix::zeros(1, 0),
            r_tc: col(&[0.0]),
            r_tn: col(&[0.0]),
            residual: col(&[0.0]),
        };
        assert!(matches!(step_adjoint(&col(&[1.0]), &j, &col(&[0.0])), Err(Error::AdjointLinearFailure { .. })));
    }

    fn constant_segment(n: usize) -> SegmentBlock {
        let eta: Vec<f64> = (0..n).map(|k| k as f64 / (n - 1) as f64).collect();
        SegmentBlock {
            t_start: 0.0,
            t_end: 1.0,
            nodes_x: vec![vec![1.0]; n],
            nodes_z: vec![Vec::new(); n],
            nodes_xdot: vec![vec![0.0]; n],
            nodes_aux: Vec::new(),
            nodes_auxdot: Vec::new(),
            eta,
        }
    }

    #[test]
    fn sweep_examples() {
        let m = Constant::new(1.0, 1.0);
        let seg = constant_segment(2);
        let r = segment_sweep(&m, &seg, &col(&[0.0]), None, &[]).unwrap();
        assert_eq!((r.a_s[0], r.qts, r.qte), (0.0, 0.0, 0.0));
        let r = segment_sweep(&m, &seg, &col(&[1.0]), None, &[]).unwrap();
        assert_eq!(r.a_s[0], 1.0);
        // rhs is zero, so both time sensitivities vanish
        assert_eq!((r.qts, r.qte), (0.0, 0.0));
        // sum identity on a time-dependent field
        let d = Decay::new(0.7, 1.0, 1.0);
        let mut seg = constant_segment(5);
        seg.nodes_x = (0..5).map(|k| vec![(-0.7 * k as f64 / 4.0).exp()]).collect();
        let jacs = segment_jacobians(&d, &seg, &[0.7], &[0]).unwrap();
        let mut total = 0.0;
        let mut a = col(&[1.0]);
        for k in (0..4).rev() {
            let s = step_adjoint(&a, &jacs[k], &col(&[0.0])).unwrap();
            total += s.d_c + s.d_n;
            a = s.a_c;
        }
        let r = segment_sweep(&d, &seg, &col(&[1.0]), None, &[0.7]).unwrap();
        assert_relative_eq!(r.qts + r.qte, total, epsilon = 1e-14);
    }

    #[test]
    fn event_residual_layout() {
        let m = Timer(ParameterLayout::all(vec![1.0]));
        let r = event_residual(&m, 0, 1.0, &[0.5], &[1.0], &[1.0]);
        assert_eq!(r.len(), 2);
        assert_eq!(r, vec![0.0, 0.0]);
        let b = Ball1D::new(9.81, 0.8, 10.0, 3.0);
        let p = [9.81, 0.8];
        let base = event_residual(&b, 0, 1.0, &[0.0, 4.0], &[0.0, -5.0], &p);
        assert_eq!(base, vec![0.0, 0.0, 0.0]);
        let moved = event_residual(&b, 0, 1.0, &[1e-3, 4.0], &[0.0, -5.0], &p);
        // rows: guard, reset (velocity), continuity (height)
        assert_eq!(moved[0], 0.0);
        assert_eq!(moved[1], 0.0);
        assert_eq!(moved[2], 1e-3);
    }

    fn scalar_event(beta1: f64, beta2: f64) -> EventJacobians {
        EventJacobians {
            a: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            b: DMatrix::from_row_slice(2, 1, &[beta1, beta2]),
            c: DMatrix::zeros(2, 0),
            e_tau: col(&[0.0, 0.0]),
            residual: col(&[0.0, 0.0]),
        }
    }

    #[test]
    fn scalar_event_adjoint() {
        let ev = scalar_event(0.3, -0.7);
        let alpha = 2.5;
        let (mu0, v) = event_adjoint(&ev, &col(&[alpha])).unwrap();
        assert_relative_eq!(mu0[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(mu0[1], -alpha, epsilon = 1e-15);
        assert_relative_eq!(v[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(v[1], 0.0, epsilon = 1e-15);
        let (mu0, v2) = event_adjoint(&ev, &col(&[0.0])).unwrap();
        assert_eq!(mu0.amax(), 0.0);
        assert_eq!(v, v2);
        let pend = build_pending(&ev, &col(&[0.0, -alpha]), &v, 0.0, 0.0);
        assert_relative_eq!(pend.a_minus_0[0], -0.7 * -alpha);
        assert_relative_eq!(pend.a_minus_v[0], 0.3);
        assert_eq!(pend.qp_0.len(), 0);
        let zero = build_pending(&ev, &col(&[0.0, 0.0]), &v, 0.0, 0.0);
        assert_eq!((zero.a_minus_0[0], zero.qtau_0), (0.0, 0.0));
    }

    #[test]
    fn rank_deficient_event() {
        let mut ev = scalar_event(1.0, 1.0);
        ev.a = DMatrix::zeros(2, 1);
        assert!(matches!(event_adjoint(&ev, &col(&[1.0])), Err(Error::DegenerateEvent { .. })));
    }

    #[test]
    fn resolve_arithmetic() {
        let pend = PendingEvent {
            a_minus_0: col(&[0.0]),
            a_minus_v: col(&[0.0]),
            qp_0: col(&[1.0]),
            qp_v: col(&[2.0]),
            qtau_0: 1.0,
            qtau_v: 3.0,
        };
        let s0 = SweepResult { a_s: col(&[1.0]), qp: col(&[0.5]), qts: 2.0, qte: 1.0 };
        let sv = SweepResult { a_s: col(&[4.0]), qp: col(&[1.0]), qts: 1.0, qte: 1.0 };
        let r = resolve_pending(&pend, &s0, &sv, 1e-12, 1e-10);
        assert_eq!(r.c, -0.5);
        assert_eq!(r.a_s[0], -1.0);
        assert_eq!(r.dq_p[0], 1.5 - 0.5 * 3.0);
        assert_eq!(r.qts, 1.5);
        assert!(!r.near_singular);
        let zero_v = SweepResult { a_s: col(&[0.0]), qp: col(&[0.0]), qts: 0.0, qte: 0.0 };
        let r = resolve_pending(&pend, &s0, &zero_v, 1e-12, 1e-10);
        assert_relative_eq!(r.c, -2.0 / 3.0);
        let mut tiny = pend.clone();
        tiny.qtau_v = 0.0;
        let r = resolve_pending(&tiny, &s0, &zero_v, 1e-12, 1e-10);
        assert_eq!(r.denominator, 1e-12);
        assert!(r.near_singular);
    }

    #[test]
    fn linear_interpolation_loads() {
        let m = Constant::new(0.0, 1.0);
        let mut seg = constant_segment(3);
        seg.nodes_x = vec![vec![0.0], vec![1.0], vec![2.0]];
        let traj = EventSplitTrajectory {
            blocks: vec![Block::Segment(seg)],
            k_max: 1,
            saturated: false,
            horizon: 1.0,
            p: Vec::new(),
            grazing: Vec::new(),
        };
        // x_hat(0.3) = 0.6, data 0, theta = 0.6 on the first interval
        let targets = TargetSet::new(vec![0.3], Some(vec![vec![0.0]])).unwrap();
        let l = loss_loads(&m, &traj, &targets, &BlendConfig::hard(), NodeInterp::Linear, &AlgebraicConfig::default()).unwrap();
        assert_relative_eq!(l.loss, 0.36, epsilon = 1e-15);
        assert_relative_eq!(l.node[0][0][0], 1.2 * 0.4, epsilon = 1e-15);
        assert_relative_eq!(l.node[0][1][0], 1.2 * 0.6, epsilon = 1e-15);
        assert_eq!(l.node[0][2][0], 0.0);
        let exact = TargetSet::new(vec![0.3], Some(vec![vec![0.6]])).unwrap();
        let l = loss_loads(&m, &traj, &exact, &BlendConfig::hard(), NodeInterp::Linear, &AlgebraicConfig::default()).unwrap();
        assert!(l.loss < 1e-30);
        assert!(l.node[0].iter().all(|v| v.amax() < 1e-15));
    }

    #[test]
    fn event_time_loads_match_fd() {
        let m = Ball1D::new(9.81, 0.8, 10.0, 3.0);
        let p = [9.81, 0.8];
        let cfg = AdjointConfig::default();
        let traj = adjoint_trajectory(&m, &p, &SimConfig::gradcheck(), &cfg).unwrap();
        let data = self_data(&m, &[9.7, 0.78], 25);
        let blend = BlendConfig::hard();
        let l = loss_loads(&m, &traj, &data, &blend, cfg.interp, &cfg.alg).unwrap();
        // shift the event time with every node value frozen
        let shifted = |d: f64| {
            let mut t = traj.clone();
            for b in t.blocks.iter_mut() {
                match b {
                    Block::Segment(s) if s.t_end < 3.0 => s.t_end += d,
                    Block::Segment(s) => s.t_start += d,
                    Block::Event(e) => e.tau += d,
                    Block::Padding => {}
                }
            }
            loss_loads(&m, &t, &data, &blend, cfg.interp, &cfg.alg).unwrap().loss
        };
        let h = 1e-7;
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        assert!((l.ell_tau[0] - fd).abs() <= 1e-6 * fd.abs().max(1e-6), "{} vs {fd}", l.ell_tau[0]);
    }

    #[test]
    fn resolved_trajectory_is_feasible() {
        let m = Ball1D::new(9.81, 0.8, 10.0, 6.0);
        let traj = adjoint_trajectory(&m, &[9.81, 0.8], &SimConfig::default(), &AdjointConfig::default()).unwrap();
        assert_eq!(traj.n_events(), 3);
        let (steps, events) = feasibility(&m, &traj);
        assert!(steps <= 1e-10, "{steps}");
        assert!(events.iter().all(|e| *e <= 1e-9), "{events:?}");
        let q = adjoint_trajectory(&Quadratic, &[1.5], &SimConfig::default(), &AdjointConfig::default()).unwrap();
        assert!(feasibility(&Quadratic, &q).0 <= 1e-10);
    }

    #[test]
    fn lagrangian_identity() {
        let m = Ball1D::new(9.81, 0.8, 10.0, 6.0);
        let cfg = AdjointConfig::default();
        let traj = adjoint_trajectory(&m, &[9.81, 0.8], &SimConfig::default(), &cfg).unwrap();
        let data = self_data(&m, &[9.5, 0.7], 30);
        let j = loss_loads(&m, &traj, &data, &BlendConfig::hard(), cfg.interp, &cfg.alg).unwrap().loss;
        let p = &traj.p;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let mut lag = j;
            for seg in traj.segments() {
                let times = seg.node_times();
                for k in 0..seg.len() - 1 {
                    let r = trapezoid_residual(&m, &node_w(seg, k), &node_w(seg, k + 1), times[k], times[k + 1], p);
                    lag += r.iter().map(|v| v * rng.random_range(-1.0..1.0)).sum::<f64>();
                }
            }
            for ev in traj.events() {
                let e = event_residual(
                    &m,
                    ev.event_index,
                    ev.tau,
                    &concat(&ev.x_plus, &ev.z_plus),
                    &concat(&ev.x_minus, &ev.z_minus),
                    p,
                );
                lag += e.iter().map(|v| v * rng.random_range(-1.0..1.0)).sum::<f64>();
            }
            assert!((lag - j).abs() <= 1e-9 * (1.0 + j.abs()));
        }
    }

    #[test]
    fn stale_trajectory_rejected() {
        let m = Decay::new(3.0, 1.0, 2.0);
        let data = self_data(&m, &[2.5], 10);
        let rk = simulate(&m, &[3.0], 2.0, &SimConfig::default()).unwrap();
        let r = gradient_adjoint(&m, &rk, &data, &BlendConfig::hard(), &AdjointConfig::default());
        assert!(matches!(r, Err(Error::StaleTrajectory { .. })));
    }

    #[test]
    fn zero_mismatch_zero_gradient() {
        let m = Ball1D::new(9.81, 0.8, 10.0, 4.0);
        let cfg = AdjointConfig::default();
        let traj = adjoint_trajectory(&m, &[9.81, 0.8], &SimConfig::default(), &cfg).unwrap();
        let targets = TargetSet::uniform(4.0, 20);
        let y = loss_loads(&m, &traj, &targets.with_data(vec![vec![0.0]; 20]).unwrap(), &BlendConfig::hard(), cfg.interp, &cfg.alg)
            .unwrap()
            .y_hat;
        let g = gradient_adjoint(&m, &traj, &targets.with_data(y).unwrap(), &BlendConfig::hard(), &cfg).unwrap();
        assert!(g.loss < 1e-28);
        assert!(g.grad.iter().all(|v| v.abs() < 1e-12), "{:?}", g.grad);
    }

    #[test]
    fn eventless_matches_forward_when_both_are_exact() {
        let m = LinearAlg::with_params(0.7, 1.3, 0.2, 2.0);
        let data = self_data(&m, &[1.1, 0.9], 15);
        let sim = SimConfig::gradcheck();
        let fwd = gradient_forward(&m, &[1.3, 0.7], &data, &BlendConfig::hard(), &sim).unwrap();
        let adj = gradient_adjoint_at(&m, &[1.3, 0.7], &data, &BlendConfig::hard(), &sim, &AdjointConfig::default()).unwrap();
        assert_close(&adj.grad, &fwd.grad, 1e-6);
    }

    #[test]
    fn discrete_exactness_ball_hard() {
        let m = Ball1D::new(9.81, 0.8, 10.0, 6.0);
        let cfg = AdjointConfig::default();
        let p = [9.81, 0.8];
        let traj = adjoint_trajectory(&m, &p, &SimConfig::default(), &cfg).unwrap();
        let data = self_data(&m, &[9.6, 0.75], 40);
        let g = gradient_adjoint(&m, &traj, &data, &BlendConfig::hard(), &cfg).unwrap();
        assert!(g.report.per_event.iter().all(|e| e.null_residual < 1e-12));
        assert_close(&g.grad, &discrete_fd(&m, &p, &traj, &data, &BlendConfig::hard()), 1e-6);
    }

    #[test]
    fn discrete_exactness_ball_soft() {
        let m = Ball1D::new(9.81, 0.8, 10.0, 6.0);
        let cfg = AdjointConfig::default();
        let p = [9.81, 0.8];
        let traj = adjoint_trajectory(&m, &p, &SimConfig::default(), &cfg).unwrap();
        let data = self_data(&m, &[9.6, 0.75], 40);
        let blend = BlendConfig::soft(30.0);
        let g = gradient_adjoint(&m, &traj, &data, &blend, &cfg).unwrap();
        assert_close(&g.grad, &discrete_fd(&m, &p, &traj, &data, &blend), 1e-6);
    }

    #[test]
    fn discrete_exactness_with_algebraic_part() {
        let cfg = AdjointConfig::default();
        let traj = adjoint_trajectory(&Quadratic, &[1.5], &SimConfig::default(), &cfg).unwrap();
        let data = self_data(&Quadratic, &[1.2], 10);
        let g = gradient_adjoint(&Quadratic, &traj, &data, &BlendConfig::hard(), &cfg).unwrap();
        assert_close(&g.grad, &discrete_fd(&Quadratic, &[1.5], &traj, &data, &BlendConfig::hard()), 1e-6);
    }

    #[test]
    fn time_triggered_event_gradient() {
        let m = Timer(ParameterLayout::all(vec![1.0]));
        let cfg = AdjointConfig::default();
        let traj = adjoint_trajectory(&m, &[1.0], &SimConfig::default(), &cfg).unwrap();
        let data = self_data(&m, &[1.2], 15);
        let g = gradient_adjoint(&m, &traj, &data, &BlendConfig::hard(), &cfg).unwrap();
        assert_close(&g.grad, &discrete_fd(&m, &[1.0], &traj, &data, &BlendConfig::hard()), 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn gradient_invariant_under_null_shift(shift in -3.0f64..3.0, g in 9.0f64..10.5, e in 0.6f64..0.9) {
            let m = Ball1D::new(g, e, 10.0, 6.0);
            let cfg = AdjointConfig::default();
            let traj = adjoint_trajectory(&m, &[g, e], &SimConfig::default(), &cfg).unwrap();
            let data = self_data(&m, &[9.81, 0.8], 30);
            let base = gradient_adjoint(&m, &traj, &data, &BlendConfig::hard(), &cfg).unwrap();
            let shifted = AdjointConfig { mu0_null_shift: shift, ..cfg };
            let other = gradient_adjoint(&m, &traj, &data, &BlendConfig::hard(), &shifted).unwrap();
            for (a, b) in base.grad.iter().zip(&other.grad) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
        }
    }
}
