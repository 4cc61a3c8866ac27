//! Segmented forward simulation with guard masking, event location and resets.

use crate::algebraic::{AlgebraicConfig, Direction, algebraic_tangent, solve_algebraic};
use crate::dual::{Point, Seed};
use crate::error::{Error, Result};
use crate::integrator::{DenseStep, StepControl, dp5_trial, initial_step, next_step};
use crate::model::{MapKind, Model, eval_primal, map_tangents};
use crate::trajectory::{Block, EventBlock, EventSplitTrajectory, GrazingWarning, SegmentBlock};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    pub k_max: usize,
    pub eps_phi: f64,
    pub c_big: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; chosen from the local derivative scale when `None`.
    pub h_init: Option<f64>,
    pub h_min: f64,
    /// Largest step; `horizon / 20` when `None`.
    pub h_max: Option<f64>,
    pub n_nodes_min: usize,
    /// Also store accepted step endpoints as nodes.
    pub merge_step_nodes: bool,
    pub tol_event: f64,
    pub tol_transv: f64,
    pub bisect_iters: usize,
    /// Interior dense-output samples of the composite guard per step.
    pub guard_samples: usize,
    pub alg: AlgebraicConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            k_max: 64,
            eps_phi: 1e-9,
            c_big: 1e6,
            rtol: 1e-8,
            atol: 1e-8,
            h_init: None,
            h_min: 1e-12,
            h_max: None,
            n_nodes_min: 33,
            merge_step_nodes: false,
            tol_event: 1e-10,
            tol_transv: 1e-8,
            bisect_iters: 20,
            guard_samples: 4,
            alg: AlgebraicConfig::default(),
        }
    }
}

impl SimConfig {
    /// Tight tolerances used for gradient verification.
    pub fn gradcheck() -> Self {
        Self { rtol: 1e-10, atol: 1e-10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.alg.validate()?;
        let ok = self.k_max >= 1
            && self.eps_phi > 0.0
            && self.c_big > 0.0
            && self.rtol > 0.0
            && self.atol > 0.0
            && self.h_min > 0.0
            && self.n_nodes_min >= 2
            && self.tol_event > 0.0
            && self.tol_transv >= 0.0
            && self.h_init.is_none_or(|h| h > 0.0)
            && self.h_max.is_none_or(|h| h > 0.0);
        if !ok {
            return Err(Error::InvalidArgument(format!("bad simulation config {self:?}")));
        }
        Ok(())
    }
}

/// Data handed to an [`Augment`] at an event.
#[derive(Clone, Debug)]
pub struct EventContext<'a> {
    pub tau: f64,
    pub event_index: usize,
    pub x_minus: &'a [f64],
    pub z_minus: &'a [f64],
    pub x_plus: &'a [f64],
    pub z_plus: &'a [f64],
    pub f_minus: &'a [f64],
    pub f_plus: &'a [f64],
    pub p: &'a [f64],
    pub guard_rate: f64,
}

/// Extra state integrated with `x` by the same steps, e.g. sensitivities.
pub trait Augment {
    fn n_aux(&self) -> usize {
        0
    }

    fn aux0(&self, _x0: &[f64], _z0: &[f64]) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }

    fn aux_rhs(&self, _t: f64, _x: &[f64], _z: &[f64], _xdot: &[f64], _aux: &[f64], _out: &mut [f64]) -> Result<()> {
        Ok(())
    }

    /// Returns the post-event auxiliary state and a per-event record.
    fn aux_jump(&self, _ctx: &EventContext, _aux_minus: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((Vec::new(), Vec::new()))
    }
}

/// No auxiliary state.
pub struct NoAux;

impl Augment for NoAux {}

/// `z = zeta(t, x, p)` warm-started at `z_warm`, then `xdot = f(t, x, z, p)`.
pub fn reduced_rhs<M: Model>(
    model: &M,
    t: f64,
    x: &[f64],
    p: &[f64],
    z_warm: &[f64],
    alg: &AlgebraicConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let z = solve_algebraic(model, t, x, p, z_warm, alg)?;
    let xdot = eval_primal(model, MapKind::Rhs, t, x, &z, p);
    if xdot.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure { context: format!("vector field at t={t}") });
    }
    Ok((xdot, z))
}

pub fn guard_values<M: Model>(model: &M, t: f64, x: &[f64], z: &[f64], p: &[f64]) -> Vec<f64> {
    (0..model.n_e()).map(|e| model.guard(e, t, x, z, p)).collect()
}

/// `mask_e = [phi_e > eps_phi]` at a consistent point.
pub fn active_guard_mask<M: Model>(model: &M, t: f64, x: &[f64], z: &[f64], p: &[f64], eps_phi: f64) -> Vec<bool> {
    guard_values(model, t, x, z, p).into_iter().map(|v| v > eps_phi).collect()
}

fn masked_min(values: &[f64], mask: &[bool], c_big: f64) -> f64 {
    values.iter().zip(mask).map(|(&v, &m)| if m { v } else { c_big }).fold(c_big, f64::min)
}

/// Minimum over active guards, masked guards counting as `c_big`.
pub fn composite_guard<M: Model>(
    model: &M,
    t: f64,
    x: &[f64],
    p: &[f64],
    mask: &[bool],
    z_warm: &[f64],
    cfg: &SimConfig,
) -> Result<f64> {
    let z = solve_algebraic(model, t, x, p, z_warm, &cfg.alg)?;
    Ok(masked_min(&guard_values(model, t, x, &z, p), mask, cfg.c_big))
}

/// Refine a root of `phi` inside `[t_lo, t_hi]` where `phi(t_lo) > 0 >= phi(t_hi)`.
///
/// Bisection first, then up to five Illinois steps, then bisection again
/// until the bracket is a few ulps wide. Returns the nonpositive end.
pub fn locate_event<F>(t_lo: f64, t_hi: f64, mut phi: F, bisect_iters: usize, tol_event: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (mut lo, mut hi) = (t_lo, t_hi);
    let mut flo = phi(lo)?;
    let mut fhi = phi(hi)?;
    if !(flo > 0.0 && fhi <= 0.0) {
        return Err(Error::Bracket { lo: t_lo, hi: t_hi });
    }
    let narrow = |lo: f64, hi: f64| hi - lo <= 4.0 * f64::EPSILON * hi.abs().max(1.0);
    let update = |t: f64, ft: f64, lo: &mut f64, hi: &mut f64, flo: &mut f64, fhi: &mut f64| {
        if ft > 0.0 {
            *lo = t;
            *flo = ft;
            false
        } else {
            *hi = t;
            *fhi = ft;
            true
        }
    };
    for _ in 0..bisect_iters {
        if fhi == 0.0 || narrow(lo, hi) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let fm = phi(mid)?;
        update(mid, fm, &mut lo, &mut hi, &mut flo, &mut fhi);
    }
    let mut last_hi = None;
    for _ in 0..5 {
        if fhi == 0.0 || narrow(lo, hi) {
            break;
        }
        let mut t = hi - fhi * (hi - lo) / (fhi - flo);
        if !(t > lo && t < hi) {
            t = 0.5 * (lo + hi);
        }
        let ft = phi(t)?;
        let moved_hi = update(t, ft, &mut lo, &mut hi, &mut flo, &mut fhi);
        // Illinois: halve the stale endpoint when the same side moves twice
        if last_hi == Some(moved_hi) {
            if moved_hi {
                flo *= 0.5;
            } else {
                fhi *= 0.5;
            }
        }
        last_hi = Some(moved_hi);
    }
    // restore true endpoint values before the final bisection
    flo = phi(lo)?;
    fhi = phi(hi)?;
    let mut guard = 0;
    while fhi != 0.0 && !narrow(lo, hi) && guard < 200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = phi(mid)?;
        update(mid, fm, &mut lo, &mut hi, &mut flo, &mut fhi);
        guard += 1;
    }
    if fhi.abs() > tol_event && flo.abs() > tol_event && !narrow(lo, hi) {
        return Err(Error::Bracket { lo, hi });
    }
    Ok(hi)
}

/// Index of the smallest active guard at `(tau, x-, z-)`, lowest index on ties.
pub fn select_event_index<M: Model>(
    model: &M,
    tau: f64,
    x_minus: &[f64],
    z_minus: &[f64],
    p: &[f64],
    mask: &[bool],
) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for e in 0..model.n_e() {
        if !mask[e] {
            continue;
        }
        let v = model.guard(e, tau, x_minus, z_minus, p);
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((e, v));
        }
    }
    best.map(|(e, _)| e).ok_or_else(|| Error::Internal("event selected with no active guard".into()))
}

/// `x+ = Psi_e(tau, x-, z-, p)` then `z+` re-solved from `z-`.
pub fn apply_reset<M: Model>(
    model: &M,
    e: usize,
    tau: f64,
    x_minus: &[f64],
    z_minus: &[f64],
    p: &[f64],
    alg: &AlgebraicConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let x_plus = eval_primal(model, MapKind::Reset(e), tau, x_minus, z_minus, p);
    if x_plus.iter().any(|v| !v.is_finite()) {
        return Err(Error::ReinitFailure { event: e, tau });
    }
    let z_plus = solve_algebraic(model, tau, &x_plus, p, z_minus, alg).map_err(|_| Error::ReinitFailure { event: e, tau })?;
    Ok((x_plus, z_plus))
}

/// `d/dt phi_e` along the flow: `phi_t + phi_x f + phi_z zdot`.
pub fn guard_rate<M: Model>(model: &M, e: usize, t: f64, x: &[f64], z: &[f64], p: &[f64]) -> Result<f64> {
    let f = eval_primal(model, MapKind::Rhs, t, x, z, p);
    let zdot = algebraic_tangent(model, t, x, p, z, &[Direction { dt: 1.0, dx: f.clone(), dp: vec![0.0; p.len()] }])?;
    let pt = Point::new(t, x, z, p);
    let seed = Seed { dt: 1.0, dx: f, dz: zdot.column(0).iter().copied().collect(), dp: vec![0.0; p.len()] };
    Ok(map_tangents(model, MapKind::Guard(e), &pt, &[seed])?.tangents[(0, 0)])
}

/// How a segment ended.
#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Terminal,
    Event { t_hit: f64 },
}

/// A finished segment plus what is needed to continue.
#[derive(Clone, Debug)]
pub struct SegmentResult {
    pub block: SegmentBlock,
    pub outcome: Outcome,
    /// Guard mask in force when the segment ended.
    pub mask: Vec<bool>,
    pub steps: Vec<DenseStep>,
    pub h_next: f64,
}

struct Flow<'a, M: Model, A: Augment> {
    model: &'a M,
    aug: &'a A,
    p: &'a [f64],
    alg: &'a AlgebraicConfig,
    n_x: usize,
}

impl<M: Model, A: Augment> Flow<'_, M, A> {
    fn rhs(&self, t: f64, y: &[f64], z_warm: &mut Vec<f64>, out: &mut [f64]) -> Result<()> {
        let (x, aux) = y.split_at(self.n_x);
        let (xdot, z) = reduced_rhs(self.model, t, x, self.p, z_warm, self.alg)?;
        out[..self.n_x].copy_from_slice(&xdot);
        self.aug.aux_rhs(t, x, &z, &xdot, aux, &mut out[self.n_x..])?;
        *z_warm = z;
        Ok(())
    }

    fn guards_at(&self, t: f64, x: &[f64], z_warm: &mut Vec<f64>) -> Result<Vec<f64>> {
        let z = solve_algebraic(self.model, t, x, self.p, z_warm, self.alg)?;
        let g = guard_values(self.model, t, x, &z, self.p);
        *z_warm = z;
        Ok(g)
    }
}

fn dense_at(steps: &[DenseStep], t: f64) -> Vec<f64> {
    let i = steps.partition_point(|s| s.t0 <= t).saturating_sub(1);
    steps[i].eval(t)
}

#[allow(clippy::too_many_arguments)]
fn build_block<M: Model, A: Augment>(
    flow: &Flow<M, A>,
    t0: f64,
    t_end: f64,
    y0: &[f64],
    y_end: &[f64],
    z0: &[f64],
    steps: &[DenseStep],
    cfg: &SimConfig,
) -> Result<SegmentBlock> {
    let n = cfg.n_nodes_min.max(2);
    let mut eta: Vec<f64> = (0..n).map(|k| k as f64 / (n - 1) as f64).collect();
    let dur = t_end - t0;
    if cfg.merge_step_nodes && dur > 0.0 {
        for s in steps {
            let e = (s.t0 - t0) / dur;
            if e > 0.0 && e < 1.0 {
                eta.push(e);
            }
        }
        eta.sort_by(f64::total_cmp);
        eta.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    }
    let n_x = flow.n_x;
    let n_aux = flow.aug.n_aux();
    let mut block = SegmentBlock {
        t_start: t0,
        t_end,
        eta: eta.clone(),
        nodes_x: Vec::with_capacity(eta.len()),
        nodes_z: Vec::with_capacity(eta.len()),
        nodes_xdot: Vec::with_capacity(eta.len()),
        nodes_aux: Vec::new(),
        nodes_auxdot: Vec::new(),
    };
    let mut zw = z0.to_vec();
    let last = eta.len() - 1;
    for k in 0..eta.len() {
        let t = block.node_time(k);
        let y = if k == 0 {
            y0.to_vec()
        } else if k == last {
            y_end.to_vec()
        } else {
            dense_at(steps, t)
        };
        let mut dy = vec![0.0; y.len()];
        flow.rhs(t, &y, &mut zw, &mut dy)?;
        block.nodes_x.push(y[..n_x].to_vec());
        block.nodes_z.push(zw.clone());
        block.nodes_xdot.push(dy[..n_x].to_vec());
        if n_aux > 0 {
            block.nodes_aux.push(y[n_x..].to_vec());
            block.nodes_auxdot.push(dy[n_x..].to_vec());
        }
    }
    Ok(block)
}

/// Integrate from a consistent start until `horizon` or the first crossing
/// of the composite guard.
#[allow(clippy::too_many_arguments)]
pub fn integrate_segment<M: Model, A: Augment>(
    model: &M,
    aug: &A,
    t0: f64,
    y0: &[f64],
    z0: &[f64],
    p: &[f64],
    mask: &[bool],
    horizon: f64,
    h_start: f64,
    segment: usize,
    cfg: &SimConfig,
) -> Result<SegmentResult> {
    let n_x = model.n_x();
    let flow = Flow { model, aug, p, alg: &cfg.alg, n_x };
    let ctl = StepControl {
        rtol: cfg.rtol,
        atol: cfg.atol,
        h_min: cfg.h_min,
        h_max: cfg.h_max.unwrap_or(horizon / 20.0),
    };
    let mut mask = mask.to_vec();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut zw = z0.to_vec();
    let mut k1 = vec![0.0; y.len()];
    flow.rhs(t, &y, &mut zw, &mut k1)?;
    let mut h = if h_start > 0.0 { h_start } else { initial_step(horizon - t0, &y, &k1, &ctl) };
    let mut rejected = false;
    let mut steps: Vec<DenseStep> = Vec::new();
    let mut z_step = zw.clone();
    loop {
        let remaining = horizon - t;
        h = h.min(ctl.h_max);
        let last = h >= remaining || remaining - h < cfg.h_min;
        if last {
            h = remaining;
        }
        let mut zs = z_step.clone();
        let trial = {
            let mut f = |ts: f64, ys: &[f64], out: &mut [f64]| flow.rhs(ts, ys, &mut zs, out);
            dp5_trial(&mut f, t, &y, &k1, h, &ctl)
        };
        let trial = match trial {
            Ok(tr) => tr,
            Err(_) if h > cfg.h_min * 4.0 => {
                h *= 0.25;
                rejected = true;
                continue;
            }
            Err(e) => return Err(e),
        };
        if trial.err > 1.0 {
            h = next_step(h, trial.err, true);
            rejected = true;
            if h < cfg.h_min {
                return Err(Error::Stiffness { t, segment });
            }
            continue;
        }
        let t1 = if last { horizon } else { t + h };
        // composite guard on interior samples and the step end
        let ns = cfg.guard_samples;
        let mut prev_t = t;
        let mut hit: Option<(f64, f64)> = None;
        let mut zg = z_step.clone();
        let mut end_guards = Vec::new();
        for j in 1..=ns + 1 {
            let ts = if j == ns + 1 { t1 } else { t + h * j as f64 / (ns + 1) as f64 };
            let xs = if j == ns + 1 { trial.y1[..n_x].to_vec() } else { trial.dense.eval(ts)[..n_x].to_vec() };
            let g = flow.guards_at(ts, &xs, &mut zg)?;
            if masked_min(&g, &mask, cfg.c_big) <= 0.0 {
                hit = Some((prev_t, ts));
                break;
            }
            prev_t = ts;
            if j == ns + 1 {
                end_guards = g;
            }
        }
        if let Some((lo, hi)) = hit {
            let dense = trial.dense.clone();
            let mut zl = z_step.clone();
            let tau = locate_event(
                lo,
                hi,
                |ts| {
                    let xs = dense.eval(ts);
                    let g = flow.guards_at(ts, &xs[..n_x], &mut zl)?;
                    Ok(masked_min(&g, &mask, cfg.c_big))
                },
                cfg.bisect_iters,
                cfg.tol_event,
            )?;
            let y_end = trial.dense.eval(tau);
            steps.push(trial.dense);
            let block = build_block(&flow, t0, tau, y0, &y_end, z0, &steps, cfg)?;
            return Ok(SegmentResult { block, outcome: Outcome::Event { t_hit: tau }, mask, steps, h_next: h });
        }
        steps.push(trial.dense);
        t = t1;
        y = trial.y1;
        k1 = trial.k7;
        z_step = zs;
        for (m, g) in mask.iter_mut().zip(&end_guards) {
            if !*m && *g > cfg.eps_phi {
                *m = true;
            }
        }
        let h_used = h;
        h = next_step(h, trial.err, rejected);
        rejected = false;
        if last {
            let block = build_block(&flow, t0, horizon, y0, &y, z0, &steps, cfg)?;
            return Ok(SegmentResult { block, outcome: Outcome::Terminal, mask, steps, h_next: h_used.max(h) });
        }
    }
}

/// Simulate `model` on `[0, horizon]` with full parameter vector `p`.
pub fn simulate<M: Model>(model: &M, p: &[f64], horizon: f64, cfg: &SimConfig) -> Result<EventSplitTrajectory> {
    simulate_with(model, &NoAux, p, horizon, cfg)
}

/// [`simulate`] with an auxiliary state integrated alongside `x`.
pub fn simulate_with<M: Model, A: Augment>(
    model: &M,
    aug: &A,
    p: &[f64],
    horizon: f64,
    cfg: &SimConfig,
) -> Result<EventSplitTrajectory> {
    cfg.validate()?;
    if !(horizon > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    if p.len() != model.layout().n_p() {
        return Err(Error::InvalidArgument(format!("expected {} parameters, got {}", model.layout().n_p(), p.len())));
    }
    let n_x = model.n_x();
    let x0 = model.x0().to_vec();
    let z0 = solve_algebraic(model, 0.0, &x0, p, &model.z0_guess(), &cfg.alg)?;
    let mut y = x0.clone();
    y.extend(aug.aux0(&x0, &z0)?);
    let mut z = z0;
    let mut t = 0.0;
    let mut h = cfg.h_init.unwrap_or(0.0);
    let mut blocks = Vec::with_capacity(2 * cfg.k_max - 1);
    let mut saturated = false;
    let mut grazing = Vec::new();
    for seg in 0..cfg.k_max {
        let mask = active_guard_mask(model, t, &y[..n_x], &z, p, cfg.eps_phi);
        let res = integrate_segment(model, aug, t, &y, &z, p, &mask, horizon, h, seg, cfg)?;
        h = res.h_next;
        let tau = match res.outcome {
            Outcome::Terminal => {
                blocks.push(Block::Segment(res.block));
                break;
            }
            Outcome::Event { t_hit } => t_hit,
        };
        let x_minus = res.block.nodes_x.last().cloned().unwrap_or_default();
        let z_minus = res.block.nodes_z.last().cloned().unwrap_or_default();
        let f_minus = res.block.nodes_xdot.last().cloned().unwrap_or_default();
        let aux_minus = res.block.nodes_aux.last().cloned().unwrap_or_default();
        blocks.push(Block::Segment(res.block));
        if seg + 1 == cfg.k_max {
            saturated = true;
            break;
        }
        let e = select_event_index(model, tau, &x_minus, &z_minus, p, &res.mask)?;
        let (x_plus, z_plus) = apply_reset(model, e, tau, &x_minus, &z_minus, p, &cfg.alg)?;
        let rate = guard_rate(model, e, tau, &x_minus, &z_minus, p)?;
        let event_no = blocks.len() / 2;
        if !(rate <= -cfg.tol_transv) {
            grazing.push(GrazingWarning { event: event_no, tau, rate });
        }
        let f_plus = eval_primal(model, MapKind::Rhs, tau, &x_plus, &z_plus, p);
        let ctx = EventContext {
            tau,
            event_index: e,
            x_minus: &x_minus,
            z_minus: &z_minus,
            x_plus: &x_plus,
            z_plus: &z_plus,
            f_minus: &f_minus,
            f_plus: &f_plus,
            p,
            guard_rate: rate,
        };
        let (aux_plus, aux_record) = aug.aux_jump(&ctx, &aux_minus)?;
        y = x_plus.clone();
        y.extend_from_slice(&aux_plus);
        z = z_plus.clone();
        t = tau;
        blocks.push(Block::Event(EventBlock {
            tau,
            event_index: e,
            x_minus,
            z_minus,
            x_plus,
            z_plus,
            guard_rate: rate,
            aux_minus,
            aux_plus,
            aux_record,
        }));
        if t >= horizon {
            // an event exactly at the horizon leaves a zero-length final segment
            let block = SegmentBlock {
                t_start: t,
                t_end: t,
                eta: vec![0.0, 1.0],
                nodes_x: vec![y[..n_x].to_vec(); 2],
                nodes_z: vec![z.clone(); 2],
                nodes_xdot: vec![f_plus.clone(); 2],
                nodes_aux: Vec::new(),
                nodes_auxdot: Vec::new(),
            };
            let mut block = block;
            if aug.n_aux() > 0 {
                let mut d = vec![0.0; aug.n_aux()];
                aug.aux_rhs(t, &y[..n_x], &z, &f_plus, &y[n_x..], &mut d)?;
                block.nodes_aux = vec![y[n_x..].to_vec(); 2];
                block.nodes_auxdot = vec![d; 2];
            }
            blocks.push(Block::Segment(block));
            break;
        }
    }
    blocks.resize(2 * cfg.k_max - 1, Block::Padding);
    Ok(EventSplitTrajectory { blocks, k_max: cfg.k_max, saturated, horizon, p: p.to_vec(), grazing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testmodels::{Ball1D, ConstAlg, Constant, Cubic, Decay};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn reduced_rhs_examples() {
        let alg = AlgebraicConfig::default();
        let (xd, _) = reduced_rhs(&Decay::new(1.0, 2.0, 1.0), 0.0, &[2.0], &[1.0], &[], &alg).unwrap();
        assert_eq!(xd, vec![-2.0]);
        let (xd, z) = reduced_rhs(&ConstAlg::new(4.0), 0.0, &[0.0], &[4.0], &[0.0], &alg).unwrap();
        assert_relative_eq!(xd[0], 4.0, epsilon = 1e-12);
        assert_relative_eq!(z[0], 4.0, epsilon = 1e-12);
        let (xd, z) = reduced_rhs(&Cubic, 0.0, &[2.0], &[], &[0.8], &alg).unwrap();
        assert_relative_eq!(z[0], 1.0, epsilon = 1e-10);
        assert_relative_eq!(xd[0], 2.0, epsilon = 1e-10);
    }

    #[test]
    fn masks_and_composite() {
        assert_eq!(masked_min(&[0.2, 0.7], &[true, true], 1e6), 0.2);
        assert_eq!(masked_min(&[0.2, -0.3], &[false, false], 1e6), 1e6);
        assert_eq!(masked_min(&[0.2, -0.3], &[true, false], 1e6), 0.2);
        let m = Ball1D::new(9.81, 0.8, 10.0, 3.0);
        let p = [9.81, 0.8];
        assert_eq!(active_guard_mask(&m, 0.0, &[0.2, 0.0], &[], &p, 1e-9), vec![true]);
        assert_eq!(active_guard_mask(&m, 0.0, &[-0.1, 0.0], &[], &p, 1e-9), vec![false]);
        assert_eq!(active_guard_mask(&m, 0.0, &[0.0, 0.0], &[], &p, 1e-9), vec![false]);
        assert_eq!(active_guard_mask(&m, 0.0, &[1e-12, 0.0], &[], &p, 1e-9), vec![false]);
        let cfg = SimConfig::default();
        assert_eq!(composite_guard(&m, 0.0, &[0.2, 0.0], &p, &[true], &[], &cfg).unwrap(), 0.2);
        assert_eq!(composite_guard(&m, 0.0, &[0.2, 0.0], &p, &[false], &[], &cfg).unwrap(), 1e6);
    }

    #[test]
    fn locate_examples() {
        let tau = locate_event(0.0, 2.0, |t| Ok(1.0 - t), 20, 1e-10).unwrap();
        assert_relative_eq!(tau, 1.0, epsilon = 1e-14);
        let tau = locate_event(1.0, 2.0, |t| Ok(t.cos()), 20, 1e-10).unwrap();
        assert_relative_eq!(tau, std::f64::consts::FRAC_PI_2, epsilon = 1e-14);
        assert!(matches!(locate_event(0.0, 1.0, |_| Ok(1.0), 20, 1e-10), Err(Error::Bracket { .. })));
    }

    #[test]
    fn select_examples() {
        struct Two;
        impl Model for Two {
            fn name(&self) -> &str {
                "two"
            }
            fn n_x(&self) -> usize {
                2
            }
            fn n_e(&self) -> usize {
                2
            }
            fn layout(&self) -> &crate::model::ParameterLayout {
                static L: std::sync::OnceLock<crate::model::ParameterLayout> = std::sync::OnceLock::new();
                L.get_or_init(|| crate::model::ParameterLayout::all(vec![]))
            }
            fn x0(&self) -> &[f64] {
                &[1.0, 1.0]
            }
            fn horizon(&self) -> f64 {
                1.0
            }
            fn rhs<S: crate::dual::Scalar>(&self, _t: S, _x: &[S], _z: &[S], _p: &[S], out: &mut [S]) {
                out[0] = S::cst(0.0);
                out[1] = S::cst(0.0);
            }
            fn guard<S: crate::dual::Scalar>(&self, e: usize, _t: S, x: &[S], _z: &[S], _p: &[S]) -> S {
                x[e]
            }
            fn reset<S: crate::dual::Scalar>(&self, _e: usize, _t: S, x: &[S], _z: &[S], _p: &[S], out: &mut [S]) {
                out.copy_from_slice(x);
            }
            fn reset_modifies(&self, _e: usize) -> Vec<usize> {
                vec![]
            }
        }
        assert_eq!(select_event_index(&Two, 0.0, &[1e-12, 0.4], &[], &[], &[true, true]).unwrap(), 0);
        assert_eq!(select_event_index(&Two, 0.0, &[1e-12, 0.4], &[], &[], &[false, true]).unwrap(), 1);
        assert_eq!(select_event_index(&Two, 0.0, &[0.0, 0.0], &[], &[], &[true, true]).unwrap(), 0);
        assert!(matches!(select_event_index(&Two, 0.0, &[0.0, 0.0], &[], &[], &[false, false]), Err(Error::Internal(_))));
        let (xp, zp) = apply_reset(&Two, 0, 0.0, &[0.3, 0.4], &[], &[], &AlgebraicConfig::default()).unwrap();
        assert_eq!(xp, vec![0.3, 0.4]);
        assert!(zp.is_empty());
    }

    #[test]
    fn ball_reset_arithmetic() {
        let m = Ball1D::new(9.81, 0.8, 10.0, 3.0);
        let (xp, _) = apply_reset(&m, 0, 1.0, &[0.0, -5.0], &[], &[9.81, 0.8], &AlgebraicConfig::default()).unwrap();
        assert_relative_eq!(xp[1], 4.0, epsilon = 1e-15);
    }

    #[test]
    fn constant_segment() {
        let m = Constant::new(1.0, 1.0);
        let traj = simulate(&m, &[], 1.0, &SimConfig::default()).unwrap();
        assert_eq!(traj.n_segments(), 1);
        assert_eq!(traj.n_events(), 0);
        let s = traj.segment_list()[0];
        assert_eq!(s.t_end, 1.0);
        assert!(s.nodes_x.iter().all(|x| x[0] == 1.0));
        assert!(!traj.saturated);
    }

    #[test]
    fn free_fall_event_time() {
        let m = Ball1D::new(9.81, 0.8, 10.0, 3.0);
        let cfg = SimConfig::gradcheck();
        let traj = simulate(&m, &[9.81, 0.8], 3.0, &cfg).unwrap();
        let exact = (20.0f64 / 9.81).sqrt();
        assert_eq!(traj.n_events(), 1);
        let ev = traj.event_list()[0];
        assert!((ev.tau - exact).abs() <= 1e-8, "tau={} exact={exact}", ev.tau);
        assert!(ev.x_minus[0].abs() <= cfg.tol_event);
        assert_relative_eq!(ev.x_plus[1], -0.8 * ev.x_minus[1], epsilon = 1e-14);
        assert!(ev.guard_rate < 0.0);
        assert!(traj.grazing.is_empty());
    }

    #[test]
    fn ball_repeated_bounces() {
        // second impact at tau1 + 2 e v / g with v = g tau1
        let m = Ball1D::new(9.81, 0.8, 10.0, 6.0);
        let traj = simulate(&m, &[9.81, 0.8], 6.0, &SimConfig::gradcheck()).unwrap();
        let t1 = (20.0f64 / 9.81).sqrt();
        let t2 = t1 + 2.0 * 0.8 * t1;
        let t3 = t2 + 2.0 * 0.64 * t1;
        let taus = traj.event_times();
        assert_eq!(taus.len(), 3);
        assert!((taus[1] - t2).abs() < 1e-8);
        assert!((taus[2] - t3).abs() < 1e-8);
    }

    #[test]
    fn kmax_saturation_and_padding() {
        let m = Ball1D::new(9.81, 0.8, 10.0, 3.0);
        let cfg = SimConfig { k_max: 1, ..SimConfig::default() };
        let traj = simulate(&m, &[9.81, 0.8], 3.0, &cfg).unwrap();
        assert!(traj.saturated);
        assert_eq!(traj.blocks.len(), 1);
        let cfg = SimConfig { k_max: 4, ..SimConfig::default() };
        let traj = simulate(&m, &[9.81, 0.8], 3.0, &cfg).unwrap();
        assert!(!traj.saturated);
        assert_eq!(traj.kind_codes(), vec![1, 2, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn guard_free_single_segment() {
        let m = Decay::new(0.5, 1.0, 2.0);
        let traj = simulate(&m, &[0.5], 2.0, &SimConfig::default()).unwrap();
        assert_eq!(traj.n_segments(), 1);
        let s = traj.segment_list()[0];
        assert_eq!(s.eta.len(), 33);
        for k in 0..s.len() {
            assert!((s.nodes_x[k][0] - (-0.5 * s.node_time(k)).exp()).abs() < 1e-7);
        }
    }

    #[test]
    fn grazing_is_flagged() {
        let m = crate::testmodels::FlatCrossing::new(1.0, 2.0);
        let traj = simulate(&m, &[1.0], 2.0, &SimConfig::default()).unwrap();
        assert_eq!(traj.n_events(), 1);
        assert_eq!(traj.grazing.len(), 1);
        assert!(traj.grazing[0].rate > -1e-8);
        assert!((traj.grazing[0].tau - 1.0).abs() < 1e-4);
    }

    #[test]
    fn start_on_guard_is_masked() {
        let m = Ball1D::new(9.81, 0.8, 0.0, 1.0);
        let traj = simulate(&m, &[9.81, 0.8], 1.0, &SimConfig::default()).unwrap();
        assert_eq!(traj.n_events(), 0);
    }

    #[test]
    fn deterministic() {
        let m = Ball1D::new(9.81, 0.8, 10.0, 5.0);
        let a = simulate(&m, &[9.81, 0.8], 5.0, &SimConfig::default()).unwrap();
        let b = simulate(&m, &[9.81, 0.8], 5.0, &SimConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn alternation_and_feasibility(g in 5.0f64..15.0, e in 0.3f64..0.95, h0 in 1.0f64..12.0) {
            let m = Ball1D::new(g, e, h0, 4.0);
            let cfg = SimConfig::default();
            let traj = simulate(&m, &[g, e], 4.0, &cfg).unwrap();
            prop_assert!(!traj.saturated);
            let codes: Vec<u8> = traj.kind_codes().into_iter().filter(|&c| c != 0).collect();
            for (i, c) in codes.iter().enumerate() {
                prop_assert_eq!(*c, if i % 2 == 0 { 1 } else { 2 });
            }
            prop_assert_eq!(*codes.last().unwrap(), 1);
            for ev in traj.events() {
                prop_assert!(ev.x_minus[0].abs() <= cfg.tol_event);
                let psi = eval_primal(&m, MapKind::Reset(0), ev.tau, &ev.x_minus, &ev.z_minus, &[g, e]);
                prop_assert_eq!(&psi, &ev.x_plus);
            }
            for s in traj.segments() {
                let mask = active_guard_mask(&m, s.t_start, &s.nodes_x[0], &s.nodes_z[0], &[g, e], cfg.eps_phi);
                let v = masked_min(&guard_values(&m, s.t_start, &s.nodes_x[0], &s.nodes_z[0], &[g, e]), &mask, cfg.c_big);
                prop_assert!(v > 0.0);
            }
        }
    }
}
