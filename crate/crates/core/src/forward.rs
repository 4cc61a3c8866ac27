//! Forward sensitivities `S = dx/dp_opt` through segments and events, and the
//! resulting loss gradient.

use nalgebra::DMatrix;

use crate::algebraic::{AlgebraicConfig, Direction, algebraic_tangent};
use crate::dual::{Point, Seed};
use crate::error::{Error, Result};
use crate::model::{MapKind, Model, map_tangents};
use crate::simulate::{Augment, EventContext, SimConfig, simulate_with};
use crate::targets::{
    BlendConfig, BlendMode, TargetSet, hermite_basis, hermite_values, locate, loss, reconstruct_output, select_hard,
    window_weight,
};
use crate::trajectory::{EventSplitTrajectory, SegmentBlock};

fn unit(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Implicit tangents `Z_j` for directions `(dt_j, S_j, e_{I[j]})`.
pub(crate) fn z_tangents<M: Model>(
    model: &M,
    t: f64,
    x: &[f64],
    z: &[f64],
    p: &[f64],
    dirs: &[(f64, Vec<f64>, Vec<f64>)],
) -> Result<Vec<Vec<f64>>> {
    let d: Vec<Direction> = dirs.iter().map(|(dt, dx, dp)| Direction { dt: *dt, dx: dx.clone(), dp: dp.clone() }).collect();
    let zt = algebraic_tangent(model, t, x, p, z, &d)?;
    Ok((0..dirs.len()).map(|j| zt.column(j).iter().copied().collect()).collect())
}

/// Tangents of a model map along `(dt, dx, dz, dp)` seeds, one column each.
pub(crate) fn map_along<M: Model>(
    model: &M,
    kind: MapKind,
    t: f64,
    x: &[f64],
    z: &[f64],
    p: &[f64],
    dirs: &[(f64, Vec<f64>, Vec<f64>)],
    dz: &[Vec<f64>],
) -> Result<DMatrix<f64>> {
    let pt = Point::new(t, x, z, p);
    let seeds: Vec<Seed> = dirs
        .iter()
        .zip(dz)
        .map(|((dt, dx, dp), dz)| Seed { dt: *dt, dx: dx.clone(), dz: dz.clone(), dp: dp.clone() })
        .collect();
    Ok(map_tangents(model, kind, &pt, &seeds)?.tangents)
}

fn param_dirs(s: &DMatrix<f64>, n_p: usize, opt: &[usize], dt: &[f64]) -> Vec<(f64, Vec<f64>, Vec<f64>)> {
    opt.iter()
        .enumerate()
        .map(|(j, &i)| (dt[j], s.column(j).iter().copied().collect(), unit(n_p, i)))
        .collect()
}

/// `S' = f_x S + f_z Z + f_p` over the optimized parameter columns.
pub fn sensitivity_rhs<M: Model>(
    model: &M,
    t: f64,
    x: &[f64],
    z: &[f64],
    s: &DMatrix<f64>,
    p: &[f64],
) -> Result<DMatrix<f64>> {
    let opt = model.layout().opt_indices();
    let dirs = param_dirs(s, p.len(), opt, &vec![0.0; opt.len()]);
    let zt = z_tangents(model, t, x, z, p, &dirs)?;
    map_along(model, MapKind::Rhs, t, x, z, p, &dirs, &zt)
}

/// `dtau/dp = -(phi_x S + phi_z Z + phi_p) / phidot`.
#[allow(clippy::too_many_arguments)]
pub fn event_time_sensitivity<M: Model>(
    model: &M,
    e: usize,
    tau: f64,
    x_minus: &[f64],
    z_minus: &[f64],
    s_minus: &DMatrix<f64>,
    p: &[f64],
    rate: f64,
    tol_transv: f64,
) -> Result<Vec<f64>> {
    if !(rate.abs() >= tol_transv) {
        return Err(Error::GrazingEvent { event: e, tau, rate, loss: f64::NAN });
    }
    let opt = model.layout().opt_indices();
    let dirs = param_dirs(s_minus, p.len(), opt, &vec![0.0; opt.len()]);
    let zt = z_tangents(model, tau, x_minus, z_minus, p, &dirs)?;
    let num = map_along(model, MapKind::Guard(e), tau, x_minus, z_minus, p, &dirs, &zt)?;
    Ok((0..opt.len()).map(|j| -num[(0, j)] / rate).collect())
}

/// `S+ = Psi_x (S + f- dtau) + Psi_z (Z + zdot- dtau) + Psi_p + Psi_t dtau - f+ dtau`.
#[allow(clippy::too_many_arguments)]
pub fn sensitivity_jump<M: Model>(
    model: &M,
    e: usize,
    tau: f64,
    dtau: &[f64],
    x_minus: &[f64],
    z_minus: &[f64],
    s_minus: &DMatrix<f64>,
    p: &[f64],
    f_minus: &[f64],
    f_plus: &[f64],
) -> Result<DMatrix<f64>> {
    let opt = model.layout().opt_indices();
    let mut shifted = s_minus.clone();
    for j in 0..opt.len() {
        for i in 0..x_minus.len() {
            shifted[(i, j)] += f_minus[i] * dtau[j];
        }
    }
    // Z + zdot dtau is the implicit tangent along (dtau, S + f dtau, e_j)
    let dirs = param_dirs(&shifted, p.len(), opt, dtau);
    let zt = z_tangents(model, tau, x_minus, z_minus, p, &dirs)?;
    let mut s_plus = map_along(model, MapKind::Reset(e), tau, x_minus, z_minus, p, &dirs, &zt)?;
    for j in 0..opt.len() {
        for i in 0..x_minus.len() {
            s_plus[(i, j)] -= f_plus[i] * dtau[j];
        }
    }
    Ok(s_plus)
}

/// Sensitivities co-integrated with the state; column-major `n_x x n_opt`.
pub struct SensitivityAugment<'a, M: Model> {
    pub model: &'a M,
    pub p: Vec<f64>,
    pub tol_transv: f64,
}

impl<M: Model> SensitivityAugment<'_, M> {
    fn n_opt(&self) -> usize {
        self.model.layout().n_opt()
    }
}

impl<M: Model> Augment for SensitivityAugment<'_, M> {
    fn n_aux(&self) -> usize {
        self.model.n_x() * self.n_opt()
    }

    fn aux0(&self, _x0: &[f64], _z0: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.n_aux()])
    }

    fn aux_rhs(&self, t: f64, x: &[f64], z: &[f64], _xdot: &[f64], aux: &[f64], out: &mut [f64]) -> Result<()> {
        if aux.is_empty() {
            return Ok(());
        }
        let s = DMatrix::from_column_slice(x.len(), self.n_opt(), aux);
        let sd = sensitivity_rhs(self.model, t, x, z, &s, &self.p)?;
        out.copy_from_slice(sd.as_slice());
        Ok(())
    }

    fn aux_jump(&self, ctx: &EventContext, aux_minus: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n_opt = self.n_opt();
        let s = DMatrix::from_column_slice(ctx.x_minus.len(), n_opt, aux_minus);
        let dtau = match event_time_sensitivity(
            self.model,
            ctx.event_index,
            ctx.tau,
            ctx.x_minus,
            ctx.z_minus,
            &s,
            ctx.p,
            ctx.guard_rate,
            self.tol_transv,
        ) {
            Ok(d) => d,
            // recorded as grazing by the simulator; the gradient is refused later
            Err(Error::GrazingEvent { .. }) => return Ok((aux_minus.to_vec(), vec![f64::NAN; n_opt])),
            Err(e) => return Err(e),
        };
        let sp = sensitivity_jump(
            self.model,
            ctx.event_index,
            ctx.tau,
            &dtau,
            ctx.x_minus,
            ctx.z_minus,
            &s,
            ctx.p,
            ctx.f_minus,
            ctx.f_plus,
        )?;
        Ok((sp.as_slice().to_vec(), dtau))
    }
}

/// Loss, gradient and the trajectory they were computed on.
#[derive(Clone, Debug)]
pub struct ForwardGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub traj: EventSplitTrajectory,
}

/// Simulate at `p_opt` with co-propagated sensitivities.
pub fn simulate_sensitivities<M: Model>(model: &M, p_opt: &[f64], cfg: &SimConfig) -> Result<EventSplitTrajectory> {
    let p = model.layout().assemble(p_opt)?;
    let aug = SensitivityAugment { model, p: p.clone(), tol_transv: cfg.tol_transv };
    simulate_with(model, &aug, &p, model.horizon(), cfg)
}

/// Total parameter derivatives of a segment's stored nodes and node slopes.
///
/// Node `k` sits at `a + eta_k (b - a)`, so it moves with the boundary times:
/// `dX_k = S_k + f_k dt_k`, and the slope `f(t_k, x_k, z_k, p)` is
/// differentiated along `(dt_k, dX_k, e_j)`.
struct NodeDerivs {
    dx: Vec<DMatrix<f64>>,
    dm: Vec<DMatrix<f64>>,
    dt: Vec<Vec<f64>>,
}

fn node_derivs<M: Model>(model: &M, seg: &SegmentBlock, p: &[f64], da: &[f64], db: &[f64]) -> Result<NodeDerivs> {
    let opt = model.layout().opt_indices();
    let (n_x, n_opt) = (model.n_x(), opt.len());
    let mut out = NodeDerivs { dx: Vec::new(), dm: Vec::new(), dt: Vec::new() };
    for k in 0..seg.len() {
        let eta = seg.eta[k];
        let dt: Vec<f64> = (0..n_opt).map(|j| da[j] + eta * (db[j] - da[j])).collect();
        let mut dx = DMatrix::from_column_slice(n_x, n_opt, &seg.nodes_aux[k]);
        for j in 0..n_opt {
            for i in 0..n_x {
                dx[(i, j)] += seg.nodes_xdot[k][i] * dt[j];
            }
        }
        let t = seg.node_time(k);
        let dirs = param_dirs(&dx, p.len(), opt, &dt);
        let zt = z_tangents(model, t, &seg.nodes_x[k], &seg.nodes_z[k], p, &dirs)?;
        let dm = map_along(model, MapKind::Rhs, t, &seg.nodes_x[k], &seg.nodes_z[k], p, &dirs, &zt)?;
        out.dx.push(dx);
        out.dm.push(dm);
        out.dt.push(dt);
    }
    Ok(out)
}

/// Candidate state of a segment at clipped `t` and the total parameter
/// derivative of that Hermite interpolant, node motion included.
fn candidate(seg: &SegmentBlock, nd: &NodeDerivs, t: f64) -> (Vec<f64>, DMatrix<f64>) {
    let last = seg.len() - 1;
    if t <= seg.t_start {
        return (seg.nodes_x[0].clone(), nd.dx[0].clone());
    }
    if t >= seg.t_end {
        return (seg.nodes_x[last].clone(), nd.dx[last].clone());
    }
    let loc = locate(seg, t);
    let x = hermite_values(&loc, &seg.nodes_x, &seg.nodes_xdot);
    let (j, h) = (loc.j, loc.h);
    if h == 0.0 {
        return (x, nd.dx[j].clone());
    }
    let (b, bd) = hermite_basis(loc.s);
    let (xa, xb, ma, mb) = (&seg.nodes_x[j], &seg.nodes_x[j + 1], &seg.nodes_xdot[j], &seg.nodes_xdot[j + 1]);
    let mut d = &nd.dx[j] * b[0] + &nd.dm[j] * (b[1] * h) + &nd.dx[j + 1] * b[2] + &nd.dm[j + 1] * (b[3] * h);
    for c in 0..d.ncols() {
        let (ta, tb) = (nd.dt[j][c], nd.dt[j + 1][c]);
        let dh = tb - ta;
        let ds = -(ta + loc.s * dh) / h;
        for i in 0..d.nrows() {
            let h_s = bd[0] * xa[i] + bd[1] * h * ma[i] + bd[2] * xb[i] + bd[3] * h * mb[i];
            d[(i, c)] += (b[1] * ma[i] + b[3] * mb[i]) * dh + h_s * ds;
        }
    }
    (x, d)
}

/// Loss and its gradient with respect to `p_opt` by forward sensitivities.
///
/// Saturated trajectories give `(+inf, 0)`. A grazing event makes the gradient
/// undefined and is reported as an error carrying the loss.
pub fn gradient_forward<M: Model>(
    model: &M,
    p_opt: &[f64],
    targets: &TargetSet,
    blend: &BlendConfig,
    cfg: &SimConfig,
) -> Result<ForwardGradient> {
    blend.validate()?;
    let data = targets.data.as_ref().ok_or_else(|| Error::InvalidArgument("targets carry no data".into()))?;
    let n_opt = p_opt.len();
    let traj = simulate_sensitivities(model, p_opt, cfg)?;
    let p = traj.p.clone();
    if traj.saturated {
        return Ok(ForwardGradient { loss: f64::INFINITY, grad: vec![0.0; n_opt], traj });
    }
    let alg: &AlgebraicConfig = &cfg.alg;
    let segs = traj.segment_list();
    let evs = traj.event_list();
    let zero = vec![0.0; n_opt];
    let bounds: Vec<(Vec<f64>, Vec<f64>)> = (0..segs.len())
        .map(|k| {
            let da = if k == 0 { zero.clone() } else { evs[k - 1].aux_record.clone() };
            let db = if k < evs.len() { evs[k].aux_record.clone() } else { zero.clone() };
            (da, db)
        })
        .collect();
    // A grazing event leaves NaN boundary sensitivities; the gradient is
    // refused below, so any finite stand-in keeps the loss computable.
    let finite = |v: &[f64]| if v.iter().all(|x| x.is_finite()) { v.to_vec() } else { zero.clone() };
    let node_d: Vec<NodeDerivs> = segs
        .iter()
        .zip(&bounds)
        .map(|(seg, (da, db))| node_derivs(model, seg, &p, &finite(da), &finite(db)))
        .collect::<Result<_>>()?;
    let mut preds = Vec::with_capacity(targets.len());
    let mut grad = vec![0.0; n_opt];
    let opt = model.layout().opt_indices();
    for (i, &t) in targets.times.iter().enumerate() {
        let k = select_hard(&traj, t)?;
        let (x_hat, dx) = match blend.mode {
            BlendMode::Hard => candidate(segs[k], &node_d[k], t),
            BlendMode::Soft => {
                let mut den = blend.eps_omega;
                let mut parts = Vec::with_capacity(segs.len());
                for (kk, seg) in segs.iter().enumerate() {
                    let (w, sa, sb) = window_weight(seg.t_start, seg.t_end, t, blend.beta);
                    let (da, db) = &bounds[kk];
                    let (xk, dk) = candidate(seg, &node_d[kk], t);
                    let dw: Vec<f64> = (0..n_opt)
                        .map(|j| -blend.beta * (1.0 - sa) * w * da[j] + blend.beta * (1.0 - sb) * w * db[j])
                        .collect();
                    den += w;
                    parts.push((w, xk, dk, dw));
                }
                let n_x = model.n_x();
                let mut xh = vec![0.0; n_x];
                for (w, xk, _, _) in &parts {
                    for c in 0..n_x {
                        xh[c] += w * xk[c] / den;
                    }
                }
                let mut d = DMatrix::zeros(n_x, n_opt);
                for (w, xk, dk, dw) in &parts {
                    for j in 0..n_opt {
                        for c in 0..n_x {
                            d[(c, j)] += (w * dk[(c, j)] + (xk[c] - xh[c]) * dw[j]) / den;
                        }
                    }
                }
                (xh, d)
            }
        };
        let seg = segs[k];
        let loc = locate(seg, t);
        let zw = seg.nodes_z[if loc.s < 0.5 { loc.j } else { (loc.j + 1).min(seg.len() - 1) }].clone();
        let (z_hat, y_hat) = reconstruct_output(model, t, &x_hat, &p, &zw, alg)?;
        let dirs = param_dirs(&dx, p.len(), opt, &zero);
        let zt = z_tangents(model, t, &x_hat, &z_hat, &p, &dirs)?;
        let dy = map_along(model, MapKind::Output, t, &x_hat, &z_hat, &p, &dirs, &zt)?;
        let scale = 2.0 / targets.len() as f64;
        for j in 0..n_opt {
            for (r, (yh, yd)) in y_hat.iter().zip(&data[i]).enumerate() {
                grad[j] += scale * (yh - yd) * dy[(r, j)];
            }
        }
        preds.push(y_hat);
    }
    let l = loss(&preds, data);
    if let Some(g) = traj.grazing.first() {
        return Err(Error::GrazingEvent { event: g.event, tau: g.tau, rate: g.rate, loss: l });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericalFailure { context: "forward gradient".into() });
    }
    Ok(ForwardGradient { loss: l, grad, traj })
}
