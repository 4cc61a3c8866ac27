//! Built-in benchmark models: a Cauer-type RLC ladder with a voltage-threshold
//! reinit, and N balls bouncing in a square box.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dual::Scalar;
use crate::error::{Error, Result};
use crate::model::{Model, ParameterLayout};
use crate::simulate::{SimConfig, simulate};
use crate::targets::{BlendConfig, TargetSet, predict};

/// Capacitances and inductances of the ladder, in parameter order
/// `(C1, C2, C3, C4, C5, L1, L2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CauerParams {
    pub c: [f64; 5],
    pub l: [f64; 2],
}

impl CauerParams {
    pub fn truth() -> Self {
        Self { c: [0.7, 1.5, 2.3, 1.3, 1.5], l: [1.6, 2.6] }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.c.iter().chain(&self.l).copied().collect()
    }

    pub fn from_slice(p: &[f64]) -> Result<Self> {
        if p.len() != 7 {
            return Err(Error::InvalidArgument(format!("expected 7 ladder parameters, got {}", p.len())));
        }
        Ok(Self { c: [p[0], p[1], p[2], p[3], p[4]], l: [p[5], p[6]] })
    }
}

pub const CAUER_PARAM_NAMES: [&str; 7] = ["C1", "C2", "C3", "C4", "C5", "L1", "L2"];

/// Doubly terminated ladder driven by a unit step:
///
/// ```text
/// u --Rs--+--Ra--+--L1--+--L2--+--Rb--+
///         C1     C2     C3     C4     C5  RL
/// ```
///
/// `x = (v1..v5, i1, i2)`, `z` are the five capacitor currents. When `v3`
/// rises through the threshold it is reset to zero.
#[derive(Clone, Debug)]
pub struct Cauer {
    pub layout: ParameterLayout,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub r_source: f64,
    pub r_a: f64,
    pub r_b: f64,
    pub r_load: f64,
    pub source: f64,
    pub threshold: f64,
}

pub fn make_cauer(params: &CauerParams) -> Result<Cauer> {
    let p = params.to_vec();
    if p.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument("ladder parameters must be positive".into()));
    }
    Ok(Cauer {
        layout: ParameterLayout::all(p),
        x0: vec![0.0; 7],
        horizon: 20.0,
        r_source: 1.0,
        r_a: 0.4,
        r_b: 0.4,
        r_load: 1.0,
        source: 1.0,
        threshold: 0.5,
    })
}

impl Model for Cauer {
    fn name(&self) -> &str {
        "cauer"
    }
    fn n_x(&self) -> usize {
        7
    }
    fn n_z(&self) -> usize {
        5
    }
    fn n_e(&self) -> usize {
        1
    }
    fn n_y(&self) -> usize {
        2
    }
    fn layout(&self) -> &ParameterLayout {
        &self.layout
    }
    fn x0(&self) -> &[f64] {
        &self.x0
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn rhs<S: Scalar>(&self, _t: S, x: &[S], z: &[S], p: &[S], out: &mut [S]) {
        for k in 0..5 {
            out[k] = z[k] / p[k];
        }
        out[5] = (x[1] - x[2]) / p[5];
        out[6] = (x[2] - x[3]) / p[6];
    }
    fn constraint<S: Scalar>(&self, _t: S, x: &[S], z: &[S], _p: &[S], out: &mut [S]) {
        let i_s = (x[0] * -1.0 + self.source) / self.r_source;
        let i_a = (x[0] - x[1]) / self.r_a;
        let i_b = (x[3] - x[4]) / self.r_b;
        let i_l = x[4] / self.r_load;
        out[0] = z[0] - (i_s - i_a);
        out[1] = z[1] - (i_a - x[5]);
        out[2] = z[2] - (x[5] - x[6]);
        out[3] = z[3] - (x[6] - i_b);
        out[4] = z[4] - (i_b - i_l);
    }
    fn output<S: Scalar>(&self, _t: S, x: &[S], _z: &[S], _p: &[S], out: &mut [S]) {
        out[0] = x[4];
        out[1] = x[2];
    }
    fn guard<S: Scalar>(&self, _e: usize, _t: S, x: &[S], _z: &[S], _p: &[S]) -> S {
        x[2] * -1.0 + self.threshold
    }
    fn reset<S: Scalar>(&self, _e: usize, _t: S, x: &[S], _z: &[S], _p: &[S], out: &mut [S]) {
        out.copy_from_slice(x);
        out[2] = S::cst(0.0);
    }
    fn reset_modifies(&self, _e: usize) -> Vec<usize> {
        vec![2]
    }
}

/// Gravity, ground restitution and wall/ceiling restitution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BallsParams {
    pub g: f64,
    pub e_ground: f64,
    pub e_wall: f64,
}

impl BallsParams {
    pub fn truth() -> Self {
        Self { g: 9.81, e_ground: 0.85, e_wall: 0.95 }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.g, self.e_ground, self.e_wall]
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.g > 0.0 && self.e_ground > 0.0 && self.e_ground <= 1.0 && self.e_wall > 0.0 && self.e_wall <= 1.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid ball parameters {self:?}")));
        }
        Ok(())
    }
}

pub const BALLS_PARAM_NAMES: [&str; 3] = ["g", "e_ground", "e_wall"];

/// Equal balls in the box `[-w, w] x [0, w]`. State per ball
/// `(qx, qy, vx, vy)`; outputs are the positions.
///
/// Guards per ball, in order: right wall, left wall, ceiling, ground. Pair
/// contacts follow in lexicographic pair order.
#[derive(Clone, Debug)]
pub struct BouncingBalls {
    pub layout: ParameterLayout,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub n: usize,
    pub radius: f64,
    pub half_width: f64,
    pairs: Vec<(usize, usize)>,
}

impl BouncingBalls {
    /// Balls at explicit initial states `(qx, qy, vx, vy)`.
    pub fn with_state(
        states: &[[f64; 4]],
        params: &BallsParams,
        radius: f64,
        half_width: f64,
        horizon: f64,
    ) -> Result<Self> {
        params.validate()?;
        if states.is_empty() {
            return Err(Error::InvalidArgument("need at least one ball".into()));
        }
        if !(radius > 0.0 && half_width > 2.0 * radius && horizon > 0.0) {
            return Err(Error::InvalidArgument("invalid box geometry or horizon".into()));
        }
        let lim = half_width - radius;
        for (i, s) in states.iter().enumerate() {
            if !(s[0].abs() < lim && s[1] > radius && s[1] < lim) {
                return Err(Error::Setup(format!("ball {i} starts outside the box")));
            }
        }
        let n = states.len();
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let d = (states[i][0] - states[j][0]).hypot(states[i][1] - states[j][1]);
                if d <= 2.0 * radius {
                    return Err(Error::Setup(format!("balls {i} and {j} overlap at the start")));
                }
                pairs.push((i, j));
            }
        }
        Ok(Self {
            layout: ParameterLayout::all(params.to_vec()),
            x0: states.iter().flatten().copied().collect(),
            horizon,
            n,
            radius,
            half_width,
            pairs,
        })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Total kinetic plus potential energy (unit masses).
    pub fn energy(&self, x: &[f64], g: f64) -> f64 {
        (0..self.n).map(|i| 0.5 * (x[4 * i + 2].powi(2) + x[4 * i + 3].powi(2)) + g * x[4 * i + 1]).sum()
    }
}

/// Seeded non-overlapping placement: each ball starts at rest vertically in
/// its own horizontal slot, the outermost balls moving towards the side walls.
pub fn make_bouncing_balls(n: usize, params: &BallsParams, radius: f64, half_width: f64, seed: u64) -> Result<BouncingBalls> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one ball".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inner = half_width - radius;
    let slot = 2.0 * (inner - 2.5) / n as f64;
    let mut states = Vec::with_capacity(n);
    for i in 0..n {
        let center = -(inner - 2.5) + slot * (i as f64 + 0.5);
        let jitter = (0.5 * slot - radius - 0.05).clamp(0.0, 1.0);
        let qx = center + rng.random_range(-1.0..=1.0) * jitter;
        let qy = rng.random_range(0.7..0.9) * inner + 0.1 * radius;
        let speed = rng.random_range(2.0..3.0);
        let vx = if n == 1 {
            rng.random_range(-1.0..1.0)
        } else if i == 0 {
            -speed
        } else if i == n - 1 {
            speed
        } else {
            rng.random_range(-1.0..1.0) * speed
        };
        states.push([qx, qy, vx, 0.0]);
    }
    BouncingBalls::with_state(&states, params, radius, half_width, 5.0)
}

impl Model for BouncingBalls {
    fn name(&self) -> &str {
        "balls"
    }
    fn n_x(&self) -> usize {
        4 * self.n
    }
    fn n_e(&self) -> usize {
        4 * self.n + self.pairs.len()
    }
    fn n_y(&self) -> usize {
        2 * self.n
    }
    fn layout(&self) -> &ParameterLayout {
        &self.layout
    }
    fn x0(&self) -> &[f64] {
        &self.x0
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn rhs<S: Scalar>(&self, _t: S, x: &[S], _z: &[S], p: &[S], out: &mut [S]) {
        for i in 0..self.n {
            let b = 4 * i;
            out[b] = x[b + 2];
            out[b + 1] = x[b + 3];
            out[b + 2] = S::cst(0.0);
            out[b + 3] = -p[0];
        }
    }
    fn output<S: Scalar>(&self, _t: S, x: &[S], _z: &[S], _p: &[S], out: &mut [S]) {
        for i in 0..self.n {
            out[2 * i] = x[4 * i];
            out[2 * i + 1] = x[4 * i + 1];
        }
    }
    fn guard<S: Scalar>(&self, e: usize, _t: S, x: &[S], _z: &[S], _p: &[S]) -> S {
        let lim = self.half_width - self.radius;
        if e < 4 * self.n {
            let b = 4 * (e / 4);
            return match e % 4 {
                0 => x[b] * -1.0 + lim,
                1 => x[b] + lim,
                2 => x[b + 1] * -1.0 + lim,
                _ => x[b + 1] - self.radius,
            };
        }
        let (i, j) = self.pairs[e - 4 * self.n];
        let dx = x[4 * i] - x[4 * j];
        let dy = x[4 * i + 1] - x[4 * j + 1];
        (dx * dx + dy * dy).sqrt() - 2.0 * self.radius
    }
    fn reset<S: Scalar>(&self, e: usize, _t: S, x: &[S], _z: &[S], p: &[S], out: &mut [S]) {
        out.copy_from_slice(x);
        if e < 4 * self.n {
            let b = 4 * (e / 4);
            match e % 4 {
                0 | 1 => out[b + 2] = -(p[2] * x[b + 2]),
                2 => out[b + 3] = -(p[2] * x[b + 3]),
                _ => out[b + 3] = -(p[1] * x[b + 3]),
            }
            return;
        }
        let (i, j) = self.pairs[e - 4 * self.n];
        let (bi, bj) = (4 * i, 4 * j);
        let dx = x[bi] - x[bj];
        let dy = x[bi + 1] - x[bj + 1];
        let d = (dx * dx + dy * dy).sqrt();
        let (nx, ny) = (dx / d, dy / d);
        let rel = (x[bi + 2] - x[bj + 2]) * nx + (x[bi + 3] - x[bj + 3]) * ny;
        out[bi + 2] = x[bi + 2] - rel * nx;
        out[bi + 3] = x[bi + 3] - rel * ny;
        out[bj + 2] = x[bj + 2] + rel * nx;
        out[bj + 3] = x[bj + 3] + rel * ny;
    }
    fn reset_modifies(&self, e: usize) -> Vec<usize> {
        if e < 4 * self.n {
            let b = 4 * (e / 4);
            return match e % 4 {
                0 | 1 => vec![b + 2],
                _ => vec![b + 3],
            };
        }
        let (i, j) = self.pairs[e - 4 * self.n];
        vec![4 * i + 2, 4 * i + 3, 4 * j + 2, 4 * j + 3]
    }
}

/// Either built-in model behind one concrete type.
#[derive(Clone, Debug)]
pub enum BuiltinModel {
    Cauer(Cauer),
    Balls(BouncingBalls),
}

impl BuiltinModel {
    pub fn param_names(&self) -> Vec<String> {
        match self {
            BuiltinModel::Cauer(_) => CAUER_PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
            BuiltinModel::Balls(_) => BALLS_PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn set_horizon(&mut self, t1: f64) {
        match self {
            BuiltinModel::Cauer(m) => m.horizon = t1,
            BuiltinModel::Balls(m) => m.horizon = t1,
        }
    }
}

macro_rules! delegate {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            BuiltinModel::Cauer($m) => $e,
            BuiltinModel::Balls($m) => $e,
        }
    };
}

impl Model for BuiltinModel {
    fn name(&self) -> &str {
        delegate!(self, m => m.name())
    }
    fn n_x(&self) -> usize {
        delegate!(self, m => m.n_x())
    }
    fn n_z(&self) -> usize {
        delegate!(self, m => m.n_z())
    }
    fn n_e(&self) -> usize {
        delegate!(self, m => m.n_e())
    }
    fn n_y(&self) -> usize {
        delegate!(self, m => m.n_y())
    }
    fn layout(&self) -> &ParameterLayout {
        delegate!(self, m => m.layout())
    }
    fn x0(&self) -> &[f64] {
        delegate!(self, m => m.x0())
    }
    fn z0_guess(&self) -> Vec<f64> {
        delegate!(self, m => m.z0_guess())
    }
    fn horizon(&self) -> f64 {
        delegate!(self, m => m.horizon())
    }
    fn rhs<S: Scalar>(&self, t: S, x: &[S], z: &[S], p: &[S], out: &mut [S]) {
        delegate!(self, m => m.rhs(t, x, z, p, out))
    }
    fn constraint<S: Scalar>(&self, t: S, x: &[S], z: &[S], p: &[S], out: &mut [S]) {
        delegate!(self, m => m.constraint(t, x, z, p, out))
    }
    fn output<S: Scalar>(&self, t: S, x: &[S], z: &[S], p: &[S], out: &mut [S]) {
        delegate!(self, m => m.output(t, x, z, p, out))
    }
    fn guard<S: Scalar>(&self, e: usize, t: S, x: &[S], z: &[S], p: &[S]) -> S {
        delegate!(self, m => m.guard(e, t, x, z, p))
    }
    fn reset<S: Scalar>(&self, e: usize, t: S, x: &[S], z: &[S], p: &[S], out: &mut [S]) {
        delegate!(self, m => m.reset(e, t, x, z, p, out))
    }
    fn reset_modifies(&self, e: usize) -> Vec<usize> {
        delegate!(self, m => m.reset_modifies(e))
    }
}

/// Uniform targets on `(0, T]` with outputs simulated at `p_true` plus seeded
/// Gaussian noise.
pub fn generate_synthetic_data<M: Model>(
    model: &M,
    p_true: &[f64],
    n_targets: usize,
    noise_std: f64,
    seed: u64,
    cfg: &SimConfig,
) -> Result<TargetSet> {
    if n_targets == 0 {
        return Err(Error::InvalidArgument("need at least one target".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidArgument("noise standard deviation must be nonnegative".into()));
    }
    let p = model.layout().assemble(p_true)?;
    let traj = simulate(model, &p, model.horizon(), cfg)?;
    if traj.saturated {
        return Err(Error::Setup("truth simulation saturated the segment capacity".into()));
    }
    let targets = TargetSet::uniform(model.horizon(), n_targets);
    let mut y = predict(model, &traj, &targets, &BlendConfig::hard(), &cfg.alg)?.y_hat;
    if noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in y.iter_mut().flatten() {
            *v += normal.sample(&mut rng);
        }
    }
    targets.with_data(y)
}
