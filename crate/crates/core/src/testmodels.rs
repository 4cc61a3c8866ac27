//! Small analytic models with closed-form behavior, used by tests and examples.

use crate::dual::Scalar;
use crate::model::{Model, ParameterLayout};

macro_rules! base_accessors {
    () => {
        fn layout(&self) -> &ParameterLayout {
            &self.layout
        }
        fn x0(&self) -> &[f64] {
            &self.x0
        }
        fn horizon(&self) -> f64 {
            self.horizon
        }
    };
}

macro_rules! no_events {
    () => {
        fn n_e(&self) -> usize {
            0
        }
        fn guard<S: Scalar>(&self, _e: usize, _t: S, _x: &[S], _z: &[S], _p: &[S]) -> S {
            S::cst(1.0)
        }
        fn reset<S: Scalar>(&self, _e: usize, _t: S, x: &[S], _z: &[S], _p: &[S], out: &mut [S]) {
            out.copy_from_slice(x);
        }
        fn reset_modifies(&self, _e: usize) -> Vec<usize> {
            Vec::new()
        }
    };
}

/// `x' = -p x`, no algebraic part, no events.
#[derive(Clone, Debug)]
pub struct Decay {
    pub layout: ParameterLayout,
    pub x0: Vec<f64>,
    pub horizon: f64,
}

impl Decay {
    pub fn new(p: f64, x0: f64, horizon: f64) -> Self {
        Self { layout: ParameterLayout::all(vec![p]), x0: vec![x0], horizon }
    }
}

impl Model for Decay {
    fn name(&self) -> &str {
        "decay"
    }
    fn n_x(&self) -> usize {
        1
    }
    base_accessors!();
    no_events!();
    fn rhs<S: Scalar>(&self, _t: S, x: &[S], _z: &[S], p: &[S], out: &mut [S]) {
        out[0] = -(p[0] * x[0]);
    }
}

/// `x' = p_0`, `0 = z - p_1 x`, `y = z`: smooth, event-free and exactly
/// integrable by any second-order scheme.
#[derive(Clone, Debug)]
pub struct LinearAlg {
    pub layout: ParameterLayout,
    pub x0: Vec<f64>,
    pub horizon: f64,
}

impl LinearAlg {
    /// Single parameter `p` in `0 = z - p x`, with `x' = 1`.
    pub fn new(p: f64) -> Self {
        Self::with_params(1.0, p, 0.0, 1.0)
    }

    pub fn with_params(rate: f64, p: f64, x0: f64, horizon: f64) -> Self {
        Self { layout: ParameterLayout::new(vec![p, rate], vec![0, 1]).unwrap(), x0: vec![x0], horizon }
    }
}

impl Model for LinearAlg {
    fn name(&self) -> &str {
        "linear-alg"
    }
    fn n_x(&self) -> usize {
        1
    }
    fn n_z(&self) -> usize {
        1
    }
    fn n_y(&self) -> usize {
        1
    }
    base_accessors!();
    no_events!();
    fn rhs<S: Scalar>(&self, _t: S, _x: &[S], _z: &[S], p: &[S], out: &mut [S]) {
        out[0] = if p.len() > 1 { p[1] } else { S::cst(1.0) };
    }
    fn constraint<S: Scalar>(&self, _t: S, x: &[S], z: &[S], p: &[S], out: &mut [S]) {
        out[0] = z[0] - p[0] * x[0];
    }
    fn output<S: Scalar>(&self, _t: S, _x: &[S], z: &[S], _p: &[S], out: &mut [S]) {
        out[0] = z[0];
    }
}

/// `x' = z`, `0 = z - p`.
#[derive(Clone, Debug)]
pub struct ConstAlg {
    pub layout: ParameterLayout,
    pub x0: Vec<f64>,
    pub horizon: f64,
}

impl ConstAlg {
    pub fn new(p: f64) -> Self {
        Self { layout: ParameterLayout::all(vec![p]), x0: vec![0.0], horizon: 1.0 }
    }
}

impl Model for ConstAlg {
    fn name(&self) -> &str {
        "const-alg"
    }
    fn n_x(&self) -> usize {
        1
    }
    fn n_z(&self) -> usize {
        1
    }
    base_accessors!();
    no_events!();
    fn rhs<S: Scalar>(&self, _t: S, _x: &[S], z: &[S], _p: &[S], out: &mut [S]) {
        out[0] = z[0];
    }
    fn constraint<S: Scalar>(&self, _t: S, _x: &[S], z: &[S], p: &[S], out: &mut [S]) {
        out[0] = z[0] - p[0];
    }
}

/// `x' = -z`, `0 = z - p x^2`.
#[derive(Clone, Copy, Debug)]
pub struct Quadratic;

static QUAD_X0: [f64; 1] = [1.0];

impl Model for Quadratic {
    fn name(&self) -> &str {
        "quadratic"
    }
    fn n_x(&self) -> usize {
        1
    }
    fn n_z(&self) -> usize {
        1
    }
    fn layout(&self) -> &ParameterLayout {
        static L: std::sync::OnceLock<ParameterLayout> = std::sync::OnceLock::new();
        L.get_or_init(|| ParameterLayout::all(vec![1.5]))
    }
    fn x0(&self) -> &[f64] {
        &QUAD_X0
    }
    fn horizon(&self) -> f64 {
        1.0
    }
    no_events!();
    fn rhs<S: Scalar>(&self, _t: S, _x: &[S], z: &[S], _p: &[S], out: &mut [S]) {
        out[0] = -z[0];
    }
    fn constraint<S: Scalar>(&self, _t: S, x: &[S], z: &[S], p: &[S], out: &mut [S]) {
        out[0] = z[0] - p[0] * x[0] * x[0];
    }
}

/// `x' = z x`, `0 = z^3 + z - x`, no parameters.
#[derive(Clone, Copy, Debug)]
pub struct Cubic;

static CUBIC_X0: [f64; 1] = [2.0];

impl Model for Cubic {
    fn name(&self) -> &str {
        "cubic"
    }
    fn n_x(&self) -> usize {
        1
    }
    fn n_z(&self) -> usize {
        1
    }
    fn layout(&self) -> &ParameterLayout {
        static L: std::sync::OnceLock<ParameterLayout> = std::sync::OnceLock::new();
        L.get_or_init(|| ParameterLayout::all(Vec::new()))
    }
    fn x0(&self) -> &[f64] {
        &CUBIC_X0
    }
    fn z0_guess(&self) -> Vec<f64> {
        vec![1.0]
    }
    fn horizon(&self) -> f64 {
        1.0
    }
    no_events!();
    fn rhs<S: Scalar>(&self, _t: S, x: &[S], z: &[S], _p: &[S], out: &mut [S]) {
        out[0] = z[0] * x[0];
    }
    fn constraint<S: Scalar>(&self, _t: S, x: &[S], z: &[S], _p: &[S], out: &mut [S]) {
        out[0] = z[0] * z[0] * z[0] + z[0] - x[0];
    }
}

/// One vertical bouncing ball: `x = (height, velocity)`, `p = (g, e)`,
/// guard `height`, reset `v+ = -e v-`.
#[derive(Clone, Debug)]
pub struct Ball1D {
    pub layout: ParameterLayout,
    pub x0: Vec<f64>,
    pub horizon: f64,
}

impl Ball1D {
    pub fn new(g: f64, e: f64, height: f64, horizon: f64) -> Self {
        Self { layout: ParameterLayout::all(vec![g, e]), x0: vec![height, 0.0], horizon }
    }
}

impl Model for Ball1D {
    fn name(&self) -> &str {
        "ball1d"
    }
    fn n_x(&self) -> usize {
        2
    }
    fn n_e(&self) -> usize {
        1
    }
    fn n_y(&self) -> usize {
        1
    }
    base_accessors!();
    fn rhs<S: Scalar>(&self, _t: S, x: &[S], _z: &[S], p: &[S], out: &mut [S]) {
        out[0] = x[1];
        out[1] = -p[0];
    }
    fn output<S: Scalar>(&self, _t: S, x: &[S], _z: &[S], _p: &[S], out: &mut [S]) {
        out[0] = x[0];
    }
    fn guard<S: Scalar>(&self, _e: usize, _t: S, x: &[S], _z: &[S], _p: &[S]) -> S {
        x[0]
    }
    fn reset<S: Scalar>(&self, _e: usize, _t: S, x: &[S], _z: &[S], p: &[S], out: &mut [S]) {
        out[0] = x[0];
        out[1] = -(p[1] * x[1]);
    }
    fn reset_modifies(&self, _e: usize) -> Vec<usize> {
        vec![1]
    }
}

/// Guard-free model whose event never fires: `x' = 0`, constant state.
#[derive(Clone, Debug)]
pub struct Constant {
    pub layout: ParameterLayout,
    pub x0: Vec<f64>,
    pub horizon: f64,
}

impl Constant {
    pub fn new(c: f64, horizon: f64) -> Self {
        Self { layout: ParameterLayout::all(Vec::new()), x0: vec![c], horizon }
    }
}

impl Model for Constant {
    fn name(&self) -> &str {
        "constant"
    }
    fn n_x(&self) -> usize {
        1
    }
    base_accessors!();
    no_events!();
    fn rhs<S: Scalar>(&self, _t: S, _x: &[S], _z: &[S], _p: &[S], out: &mut [S]) {
        out[0] = S::cst(0.0);
    }
}

/// `x' = 1` with guard `-(x - c)^3`: a sign change with zero rate at `x = c`.
#[derive(Clone, Debug)]
pub struct FlatCrossing {
    pub layout: ParameterLayout,
    pub x0: Vec<f64>,
    pub horizon: f64,
}

impl FlatCrossing {
    pub fn new(c: f64, horizon: f64) -> Self {
        Self { layout: ParameterLayout::all(vec![c]), x0: vec![0.0], horizon }
    }
}

impl Model for FlatCrossing {
    fn name(&self) -> &str {
        "flat-crossing"
    }
    fn n_x(&self) -> usize {
        1
    }
    fn n_e(&self) -> usize {
        1
    }
    base_accessors!();
    fn rhs<S: Scalar>(&self, _t: S, _x: &[S], _z: &[S], _p: &[S], out: &mut [S]) {
        out[0] = S::cst(1.0);
    }
    fn guard<S: Scalar>(&self, _e: usize, _t: S, x: &[S], _z: &[S], p: &[S]) -> S {
        let d = x[0] - p[0];
        -(d * d * d)
    }
    fn reset<S: Scalar>(&self, _e: usize, _t: S, x: &[S], _z: &[S], _p: &[S], out: &mut [S]) {
        out.copy_from_slice(x);
    }
    fn reset_modifies(&self, _e: usize) -> Vec<usize> {
        Vec::new()
    }
}
