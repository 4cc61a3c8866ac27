//! Trajectory evaluation at observation times and the mean-squared loss.

use crate::algebraic::{AlgebraicConfig, solve_algebraic};
use crate::error::{Error, Result};
use crate::model::{MapKind, Model, eval_primal};
use crate::trajectory::{EventSplitTrajectory, SegmentBlock};

/// Observation times with optional data rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSet {
    pub times: Vec<f64>,
    pub data: Option<Vec<Vec<f64>>>,
}

impl TargetSet {
    pub fn new(times: Vec<f64>, data: Option<Vec<Vec<f64>>>) -> Result<Self> {
        if times.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::InvalidArgument("target times must be sorted".into()));
        }
        if let Some(d) = &data {
            if d.len() != times.len() {
                return Err(Error::InvalidArgument(format!("{} data rows for {} targets", d.len(), times.len())));
            }
        }
        Ok(Self { times, data })
    }

    /// `t_i = i T / n` for `i = 1..=n`.
    pub fn uniform(horizon: f64, n: usize) -> Self {
        let times = (1..=n).map(|i| if i == n { horizon } else { i as f64 * horizon / n as f64 }).collect();
        Self { times, data: None }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn with_data(&self, data: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(self.times.clone(), Some(data))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendMode {
    Hard,
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendConfig {
    pub mode: BlendMode,
    pub beta: f64,
    pub eps_omega: f64,
}

impl BlendConfig {
    pub fn hard() -> Self {
        Self { mode: BlendMode::Hard, beta: 150.0, eps_omega: 1e-12 }
    }

    pub fn soft(beta: f64) -> Self {
        Self { mode: BlendMode::Soft, beta, eps_omega: 1e-12 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.eps_omega > 0.0) {
            return Err(Error::InvalidArgument(format!("bad blend config {self:?}")));
        }
        Ok(())
    }
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self::hard()
    }
}

/// Logistic function without overflow.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Position of `t` inside a segment: node interval and local coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Locator {
    pub j: usize,
    pub s: f64,
    pub h: f64,
}

/// Clip `t` into the segment and find its node interval.
pub fn locate(seg: &SegmentBlock, t: f64) -> Locator {
    let tc = t.clamp(seg.t_start, seg.t_end);
    let n = seg.len();
    if seg.t_end <= seg.t_start || n < 2 {
        return Locator { j: 0, s: 0.0, h: 0.0 };
    }
    let eta = (tc - seg.t_start) / seg.duration();
    let mut j = seg.eta.partition_point(|&e| e <= eta).saturating_sub(1);
    j = j.min(n - 2);
    let (t0, t1) = (seg.node_time(j), seg.node_time(j + 1));
    let h = t1 - t0;
    let s = if h > 0.0 { ((tc - t0) / h).clamp(0.0, 1.0) } else { 0.0 };
    Locator { j, s, h }
}

/// Cubic Hermite basis `(h00, h10, h01, h11)` and its `s`-derivative.
pub fn hermite_basis(s: f64) -> ([f64; 4], [f64; 4]) {
    let s2 = s * s;
    let s3 = s2 * s;
    (
        [2.0 * s3 - 3.0 * s2 + 1.0, s3 - 2.0 * s2 + s, -2.0 * s3 + 3.0 * s2, s3 - s2],
        [6.0 * s2 - 6.0 * s, 3.0 * s2 - 4.0 * s + 1.0, -6.0 * s2 + 6.0 * s, 3.0 * s2 - 2.0 * s],
    )
}

/// Hermite interpolation of `values` (with slopes `derivs`) at a located time.
pub fn hermite_values(loc: &Locator, values: &[Vec<f64>], derivs: &[Vec<f64>]) -> Vec<f64> {
    let (b, _) = hermite_basis(loc.s);
    let (j, h) = (loc.j, loc.h);
    if values.len() < 2 {
        return values[0].clone();
    }
    (0..values[j].len())
        .map(|i| b[0] * values[j][i] + b[1] * h * derivs[j][i] + b[2] * values[j + 1][i] + b[3] * h * derivs[j + 1][i])
        .collect()
}

/// Time derivative of the Hermite interpolant at a located time.
pub fn hermite_slope(loc: &Locator, values: &[Vec<f64>], derivs: &[Vec<f64>]) -> Vec<f64> {
    let (_, d) = hermite_basis(loc.s);
    let (j, h) = (loc.j, loc.h);
    if values.len() < 2 || h == 0.0 {
        return derivs[0].clone();
    }
    (0..values[j].len())
        .map(|i| (d[0] * values[j][i] + d[2] * values[j + 1][i]) / h + d[1] * derivs[j][i] + d[3] * derivs[j + 1][i])
        .collect()
}

/// State of a segment at `t` clipped into `[t_start, t_end]`.
pub fn segment_state(seg: &SegmentBlock, t: f64) -> Vec<f64> {
    if t <= seg.t_start {
        return seg.nodes_x[0].clone();
    }
    if t >= seg.t_end {
        return seg.nodes_x[seg.len() - 1].clone();
    }
    hermite_values(&locate(seg, t), &seg.nodes_x, &seg.nodes_xdot)
}

/// `X[k][i]`: state of real segment `k` at clipped target `i`.
pub fn segment_states_at_targets(traj: &EventSplitTrajectory, targets: &TargetSet) -> Vec<Vec<Vec<f64>>> {
    traj.segments().map(|seg| targets.times.iter().map(|&t| segment_state(seg, t)).collect()).collect()
}

/// Latest real segment whose closed interval contains `t`.
pub fn select_hard(traj: &EventSplitTrajectory, t: f64) -> Result<usize> {
    if !(t >= 0.0 && t <= traj.horizon) {
        return Err(Error::InvalidArgument(format!("target time {t} outside [0, {}]", traj.horizon)));
    }
    let mut best = None;
    for (k, seg) in traj.segments().enumerate() {
        if seg.t_start <= t && t <= seg.t_end {
            best = Some(k);
        }
    }
    best.ok_or_else(|| Error::InvalidArgument(format!("target time {t} not covered by the trajectory")))
}

/// Raw sigmoid window weight of `[a, b]` at `t` with its two sigmoids.
pub fn window_weight(a: f64, b: f64, t: f64, beta: f64) -> (f64, f64, f64) {
    let sa = sigmoid(beta * (t - a));
    let sb = sigmoid(beta * (b - t));
    (sa * sb, sa, sb)
}

/// Normalized blending weights over the real segments.
pub fn blend_weights(traj: &EventSplitTrajectory, t: f64, cfg: &BlendConfig) -> Vec<f64> {
    let raw: Vec<f64> = traj.segments().map(|s| window_weight(s.t_start, s.t_end, t, cfg.beta).0).collect();
    let den: f64 = raw.iter().sum::<f64>() + cfg.eps_omega;
    raw.into_iter().map(|w| w / den).collect()
}

/// Weighted mixture of the candidate states of target `i`.
pub fn blend_soft(traj: &EventSplitTrajectory, x: &[Vec<Vec<f64>>], i: usize, t: f64, cfg: &BlendConfig) -> Vec<f64> {
    let w = blend_weights(traj, t, cfg);
    let n = x[0][i].len();
    let mut out = vec![0.0; n];
    for (k, wk) in w.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(&x[k][i]) {
            *o += wk * v;
        }
    }
    out
}

/// `z_hat = zeta(t, x_hat, p)` warm-started at `z_warm`, then `y_hat = h(...)`.
pub fn reconstruct_output<M: Model>(
    model: &M,
    t: f64,
    x_hat: &[f64],
    p: &[f64],
    z_warm: &[f64],
    alg: &AlgebraicConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let z = solve_algebraic(model, t, x_hat, p, z_warm, alg)?;
    let y = eval_primal(model, MapKind::Output, t, x_hat, &z, p);
    Ok((z, y))
}

/// Mean over observations of the squared output mismatch.
pub fn loss(predictions: &[Vec<f64>], data: &[Vec<f64>]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let total: f64 = predictions
        .iter()
        .zip(data)
        .map(|(p, d)| p.iter().zip(d).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    total / predictions.len() as f64
}

/// Reconstructed states and outputs at every target.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub x_hat: Vec<Vec<f64>>,
    pub z_hat: Vec<Vec<f64>>,
    pub y_hat: Vec<Vec<f64>>,
    /// Hard-selected segment per target (warm-start source in soft mode).
    pub selected: Vec<usize>,
}

fn nearest_node_z(seg: &SegmentBlock, t: f64) -> Vec<f64> {
    let loc = locate(seg, t);
    let k = if loc.s < 0.5 { loc.j } else { (loc.j + 1).min(seg.len() - 1) };
    seg.nodes_z[k].clone()
}

pub fn predict<M: Model>(
    model: &M,
    traj: &EventSplitTrajectory,
    targets: &TargetSet,
    blend: &BlendConfig,
    alg: &AlgebraicConfig,
) -> Result<Predictions> {
    if traj.saturated {
        return Err(Error::InvalidArgument("cannot evaluate a saturated trajectory".into()));
    }
    let segs = traj.segment_list();
    let xs = match blend.mode {
        BlendMode::Soft => Some(segment_states_at_targets(traj, targets)),
        BlendMode::Hard => None,
    };
    let mut out = Predictions { x_hat: Vec::new(), z_hat: Vec::new(), y_hat: Vec::new(), selected: Vec::new() };
    for (i, &t) in targets.times.iter().enumerate() {
        let k = select_hard(traj, t)?;
        let x_hat = match &xs {
            None => segment_state(segs[k], t),
            Some(x) => blend_soft(traj, x, i, t, blend),
        };
        let (z, y) = reconstruct_output(model, t, &x_hat, &traj.p, &nearest_node_z(segs[k], t), alg)?;
        out.x_hat.push(x_hat);
        out.z_hat.push(z);
        out.y_hat.push(y);
        out.selected.push(k);
    }
    Ok(out)
}

/// Loss of a trajectory against target data; `+inf` when saturated.
pub fn trajectory_loss<M: Model>(
    model: &M,
    traj: &EventSplitTrajectory,
    targets: &TargetSet,
    blend: &BlendConfig,
    alg: &AlgebraicConfig,
) -> Result<f64> {
    if traj.saturated {
        return Ok(f64::INFINITY);
    }
    let data = targets.data.as_ref().ok_or_else(|| Error::InvalidArgument("targets carry no data".into()))?;
    let pred = predict(model, traj, targets, blend, alg)?;
    Ok(loss(&pred.y_hat, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{SimConfig, simulate};
    use crate::testmodels::{Ball1D, Constant, Decay, LinearAlg};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ball_traj() -> (Ball1D, EventSplitTrajectory) {
        let m = Ball1D::new(9.81, 0.8, 10.0, 3.0);
        let t = simulate(&m, &[9.81, 0.8], 3.0, &SimConfig::gradcheck()).unwrap();
        (m, t)
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]]), 0.0);
        assert_eq!(loss(&[vec![1.0, 0.0]], &[vec![0.0, 0.0]]), 1.0);
        assert_eq!(loss(&[vec![1.0], vec![0.0]], &[vec![0.0], vec![0.0]]), 0.5);
    }

    #[test]
    fn uniform_grid_spacing() {
        let t = TargetSet::uniform(20.0, 500);
        assert_eq!(t.len(), 500);
        assert_relative_eq!(t.times[1] - t.times[0], 0.04, epsilon = 1e-12);
        assert_eq!(*t.times.last().unwrap(), 20.0);
    }

    #[test]
    fn hermite_reproduces_cubics() {
        let f = |t: f64| 2.0 * t * t * t - t + 0.5;
        let df = |t: f64| 6.0 * t * t - 1.0;
        let seg = SegmentBlock {
            t_start: 0.0,
            t_end: 2.0,
            eta: vec![0.0, 0.5, 1.0],
            nodes_x: [0.0, 1.0, 2.0].iter().map(|&t| vec![f(t)]).collect(),
            nodes_z: vec![vec![]; 3],
            nodes_xdot: [0.0, 1.0, 2.0].iter().map(|&t| vec![df(t)]).collect(),
            nodes_aux: vec![],
            nodes_auxdot: vec![],
        };
        for t in [0.1, 0.77, 1.0, 1.5, 1.99] {
            assert_relative_eq!(segment_state(&seg, t)[0], f(t), epsilon = 1e-12);
            let loc = locate(&seg, t);
            assert_relative_eq!(hermite_slope(&loc, &seg.nodes_x, &seg.nodes_xdot)[0], df(t), epsilon = 1e-11);
        }
        assert_eq!(segment_state(&seg, -1.0)[0], f(0.0));
        assert_eq!(segment_state(&seg, 3.0)[0], f(2.0));
    }

    #[test]
    fn candidate_matrix_clips() {
        let (_, traj) = ball_traj();
        let tau = traj.event_times()[0];
        let targets = TargetSet::uniform(3.0, 6);
        let x = segment_states_at_targets(&traj, &targets);
        assert_eq!(x.len(), 2);
        // targets before the second segment clip to its start
        assert_eq!(x[1][0], traj.segment_list()[1].nodes_x[0]);
        assert!(targets.times[0] < tau);
        let exact = 10.0 - 0.5 * 9.81 * 0.25;
        assert!((x[0][0][0] - exact).abs() < 1e-9);
    }

    #[test]
    fn constant_candidates() {
        let m = Constant::new(3.5, 1.0);
        let traj = simulate(&m, &[], 1.0, &SimConfig::default()).unwrap();
        let x = segment_states_at_targets(&traj, &TargetSet::uniform(1.0, 5));
        assert!(x.iter().flatten().all(|v| v[0] == 3.5));
    }

    #[test]
    fn hard_selection() {
        let (_, traj) = ball_traj();
        let tau = traj.event_times()[0];
        assert_eq!(select_hard(&traj, 0.0).unwrap(), 0);
        assert_eq!(select_hard(&traj, 0.5).unwrap(), 0);
        assert_eq!(select_hard(&traj, tau).unwrap(), 1);
        assert_eq!(select_hard(&traj, 2.5).unwrap(), 1);
        assert!(matches!(select_hard(&traj, 3.5), Err(Error::InvalidArgument(_))));
        assert!(matches!(select_hard(&traj, -0.1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn right_continuity_at_event() {
        let (m, traj) = ball_traj();
        let ev = traj.event_list()[0].clone();
        let targets = TargetSet::new(vec![ev.tau], None).unwrap();
        let pred = predict(&m, &traj, &targets, &BlendConfig::hard(), &AlgebraicConfig::default()).unwrap();
        assert!((pred.x_hat[0][1] - ev.x_plus[1]).abs() <= 1e-9);
    }

    #[test]
    fn soft_single_segment_center() {
        let m = Decay::new(1.0, 1.0, 2.0);
        let traj = simulate(&m, &[1.0], 2.0, &SimConfig::default()).unwrap();
        let w = blend_weights(&traj, 1.0, &BlendConfig::soft(150.0));
        let s = sigmoid(150.0);
        assert_relative_eq!(w[0], s * s / (s * s + 1e-12), epsilon = 1e-15);
    }

    #[test]
    fn soft_midpoint_at_boundary() {
        let m = Ball1D::new(9.81, 0.8, 10.0, 3.0);
        let traj = simulate(&m, &[9.81, 0.8], 3.0, &SimConfig::gradcheck()).unwrap();
        let tau = traj.event_times()[0];
        let targets = TargetSet::new(vec![tau], None).unwrap();
        let x = segment_states_at_targets(&traj, &targets);
        let xh = blend_soft(&traj, &x, 0, tau, &BlendConfig::soft(150.0));
        let w = blend_weights(&traj, tau, &BlendConfig::soft(150.0));
        assert_relative_eq!(w[0], w[1], epsilon = 1e-9);
        for c in 0..2 {
            assert_relative_eq!(xh[c], 0.5 * (x[0][0][c] + x[1][0][c]), epsilon = 1e-8);
        }
    }

    #[test]
    fn reconstruct_examples() {
        let alg = AlgebraicConfig::default();
        let (_, y) = reconstruct_output(&Decay::new(1.0, 1.0, 1.0), 0.0, &[0.7], &[1.0], &[], &alg).unwrap();
        assert_eq!(y, vec![0.7]);
        let (_, y) = reconstruct_output(&LinearAlg::new(1.0), 0.0, &[0.7], &[1.0, 1.0], &[0.0], &alg).unwrap();
        assert_relative_eq!(y[0], 0.7, epsilon = 1e-12);
    }

    #[test]
    fn saturated_loss_is_infinite() {
        let m = Ball1D::new(9.81, 0.8, 10.0, 3.0);
        let cfg = SimConfig { k_max: 1, ..SimConfig::default() };
        let traj = simulate(&m, &[9.81, 0.8], 3.0, &cfg).unwrap();
        let targets = TargetSet::uniform(3.0, 3).with_data(vec![vec![0.0]; 3]).unwrap();
        let l = trajectory_loss(&m, &traj, &targets, &BlendConfig::hard(), &AlgebraicConfig::default()).unwrap();
        assert_eq!(l, f64::INFINITY);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn blend_approaches_hard(u in 0.0f64..1.0) {
            let (_, traj) = ball_traj();
            let tau = traj.event_times()[0];
            let beta = 1e4;
            let t = 0.01 + u * 2.98;
            prop_assume!((t - tau).abs() > 10.0 / beta);
            let targets = TargetSet::new(vec![t], None).unwrap();
            let x = segment_states_at_targets(&traj, &targets);
            let soft = blend_soft(&traj, &x, 0, t, &BlendConfig::soft(beta));
            let k = select_hard(&traj, t).unwrap();
            let hard = &x[k][0];
            let scale = 1.0 + hard.iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..2 {
                prop_assert!((soft[c] - hard[c]).abs() <= 1e-6 * scale);
            }
        }

        #[test]
        fn weights_normalized(t in 0.0f64..3.0, beta in 1.0f64..500.0) {
            let (_, traj) = ball_traj();
            let w = blend_weights(&traj, t, &BlendConfig::soft(beta));
            let s: f64 = w.iter().sum();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!(w.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn loss_nonnegative(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
            let pa: Vec<Vec<f64>> = a.chunks(2).map(|c| c.to_vec()).collect();
            let pb: Vec<Vec<f64>> = b.chunks(2).map(|c| c.to_vec()).collect();
            let l = loss(&pa, &pb);
            prop_assert!(l >= 0.0);
            prop_assert_eq!(loss(&pa, &pa), 0.0);
            prop_assert_eq!(l == 0.0, pa == pb);
        }
    }
}
