//! The hybrid-DAE model contract.
//!
//! A model supplies `xdot = f(t,x,z,p)`, `0 = g(t,x,z,p)`, `y = h(t,x,z,p)`,
//! scalar guards `phi_e` that fire on positive-to-nonpositive crossings, and
//! reset maps `x+ = Psi_e(t, x-, z-, p)` acting on differential states only.
//! All maps are generic over [`Scalar`] so exact Jacobians come from the same
//! code as the primal values.

use crate::dual::{Point, Scalar, Seed, Tan, TangentBundle, tangent_eval};
use crate::error::{Error, Result};

/// Problem dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub n_x: usize,
    pub n_z: usize,
    pub n_p: usize,
    pub n_opt: usize,
    pub n_e: usize,
    pub n_y: usize,
}

impl Dims {
    pub fn n_w(&self) -> usize {
        self.n_x + self.n_z
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_y == 0 || self.n_opt > self.n_p {
            return Err(Error::InvalidArgument(format!("inconsistent dimensions {self:?}")));
        }
        Ok(())
    }
}

/// Fixed baseline parameters plus the indices that are optimized.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterLayout {
    p_base: Vec<f64>,
    opt_indices: Vec<usize>,
}

impl ParameterLayout {
    pub fn new(p_base: Vec<f64>, opt_indices: Vec<usize>) -> Result<Self> {
        if opt_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("optimized indices must be strictly increasing".into()));
        }
        if opt_indices.last().is_some_and(|&i| i >= p_base.len()) {
            return Err(Error::InvalidArgument("optimized index out of range".into()));
        }
        Ok(Self { p_base, opt_indices })
    }

    /// Layout optimizing every parameter.
    pub fn all(p_base: Vec<f64>) -> Self {
        let idx = (0..p_base.len()).collect();
        Self { p_base, opt_indices: idx }
    }

    pub fn p_base(&self) -> &[f64] {
        &self.p_base
    }

    pub fn opt_indices(&self) -> &[usize] {
        &self.opt_indices
    }

    pub fn n_p(&self) -> usize {
        self.p_base.len()
    }

    pub fn n_opt(&self) -> usize {
        self.opt_indices.len()
    }

    /// Full parameter vector with `p_opt` inserted at the optimized indices.
    pub fn assemble(&self, p_opt: &[f64]) -> Result<Vec<f64>> {
        if p_opt.len() != self.opt_indices.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} optimized parameters, got {}",
                self.opt_indices.len(),
                p_opt.len()
            )));
        }
        let mut p = self.p_base.clone();
        for (&i, &v) in self.opt_indices.iter().zip(p_opt) {
            p[i] = v;
        }
        Ok(p)
    }

    pub fn extract(&self, p: &[f64]) -> Vec<f64> {
        self.opt_indices.iter().map(|&i| p[i]).collect()
    }

    /// Baseline values of the optimized entries.
    pub fn base_opt(&self) -> Vec<f64> {
        self.extract(&self.p_base)
    }

    /// Same layout with a different baseline vector.
    pub fn with_base(&self, p_base: Vec<f64>) -> Result<Self> {
        Self::new(p_base, self.opt_indices.clone())
    }
}

/// `assemble_full_params` in functional form.
pub fn assemble_full_params(layout: &ParameterLayout, p_opt: &[f64]) -> Result<Vec<f64>> {
    layout.assemble(p_opt)
}

/// A semi-explicit hybrid DAE.
///
/// Maps must be smooth in all arguments: switching belongs in guards, never
/// inside `rhs`, `constraint`, `output` or `reset`.
pub trait Model: Sync {
    fn name(&self) -> &str;
    fn n_x(&self) -> usize;
    fn n_z(&self) -> usize {
        0
    }
    fn n_e(&self) -> usize;
    fn n_y(&self) -> usize {
        self.n_x()
    }
    fn layout(&self) -> &ParameterLayout;
    fn x0(&self) -> &[f64];
    fn z0_guess(&self) -> Vec<f64> {
        vec![0.0; self.n_z()]
    }
    fn horizon(&self) -> f64;

    fn rhs<S: Scalar>(&self, t: S, x: &[S], z: &[S], p: &[S], out: &mut [S]);

    fn constraint<S: Scalar>(&self, _t: S, _x: &[S], _z: &[S], _p: &[S], _out: &mut [S]) {}

    /// Defaults to the differential state.
    fn output<S: Scalar>(&self, _t: S, x: &[S], _z: &[S], _p: &[S], out: &mut [S]) {
        out.copy_from_slice(x);
    }

    fn guard<S: Scalar>(&self, e: usize, t: S, x: &[S], z: &[S], p: &[S]) -> S;

    /// Writes the full post-event state; entries not listed by
    /// [`Model::reset_modifies`] must be copied from `x`.
    fn reset<S: Scalar>(&self, e: usize, t: S, x: &[S], z: &[S], p: &[S], out: &mut [S]);

    /// Differential-state indices written by reset `e`, increasing.
    fn reset_modifies(&self, e: usize) -> Vec<usize>;

    fn dims(&self) -> Dims {
        Dims {
            n_x: self.n_x(),
            n_z: self.n_z(),
            n_p: self.layout().n_p(),
            n_opt: self.layout().n_opt(),
            n_e: self.n_e(),
            n_y: self.n_y(),
        }
    }
}

/// Which model map to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Rhs,
    Constraint,
    Output,
    Guard(usize),
    Reset(usize),
}

impl MapKind {
    pub fn n_out<M: Model>(self, model: &M) -> usize {
        match self {
            MapKind::Rhs | MapKind::Reset(_) => model.n_x(),
            MapKind::Constraint => model.n_z(),
            MapKind::Output => model.n_y(),
            MapKind::Guard(_) => 1,
        }
    }
}

/// Evaluate one model map over arbitrary scalars.
pub fn eval_map<M: Model, S: Scalar>(model: &M, kind: MapKind, t: S, x: &[S], z: &[S], p: &[S], out: &mut [S]) {
    match kind {
        MapKind::Rhs => model.rhs(t, x, z, p, out),
        MapKind::Constraint => model.constraint(t, x, z, p, out),
        MapKind::Output => model.output(t, x, z, p, out),
        MapKind::Guard(e) => out[0] = model.guard(e, t, x, z, p),
        MapKind::Reset(e) => model.reset(e, t, x, z, p, out),
    }
}

/// Tangents of a model map along the given seeds.
pub fn map_tangents<M: Model>(model: &M, kind: MapKind, point: &Point, seeds: &[Seed]) -> Result<TangentBundle> {
    tangent_eval(point, seeds, kind.n_out(model), |t: Tan, x, z, p, out| eval_map(model, kind, t, x, z, p, out))
}

/// Primal evaluation of a model map into a fresh vector.
pub fn eval_primal<M: Model>(model: &M, kind: MapKind, t: f64, x: &[f64], z: &[f64], p: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; kind.n_out(model)];
    eval_map(model, kind, t, x, z, p, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn assemble_examples() {
        let l = ParameterLayout::new(vec![1.0, 2.0, 3.0], vec![0, 2]).unwrap();
        assert_eq!(l.assemble(&[10.0, 30.0]).unwrap(), vec![10.0, 2.0, 30.0]);

        let l = ParameterLayout::new(vec![5.0], vec![]).unwrap();
        assert_eq!(l.assemble(&[]).unwrap(), vec![5.0]);

        let l = ParameterLayout::new(vec![1.0, 2.0], vec![0, 1]).unwrap();
        assert_eq!(l.assemble(&[7.0, 8.0]).unwrap(), vec![7.0, 8.0]);
    }

    #[test]
    fn assemble_length_mismatch() {
        let l = ParameterLayout::new(vec![1.0, 2.0], vec![1]).unwrap();
        assert!(matches!(l.assemble(&[1.0, 2.0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn layout_rejects_bad_indices() {
        assert!(ParameterLayout::new(vec![1.0, 2.0], vec![1, 0]).is_err());
        assert!(ParameterLayout::new(vec![1.0, 2.0], vec![0, 0]).is_err());
        assert!(ParameterLayout::new(vec![1.0, 2.0], vec![2]).is_err());
    }

    proptest! {
        #[test]
        fn assemble_then_extract_is_identity(
            base in prop::collection::vec(-10.0f64..10.0, 1..8),
            mask in prop::collection::vec(any::<bool>(), 8),
            fill in prop::collection::vec(-5.0f64..5.0, 8),
        ) {
            let idx: Vec<usize> = (0..base.len()).filter(|&i| mask[i]).collect();
            let layout = ParameterLayout::new(base.clone(), idx.clone()).unwrap();
            let p_opt: Vec<f64> = fill[..idx.len()].to_vec();
            let p = layout.assemble(&p_opt).unwrap();
            prop_assert_eq!(layout.extract(&p), p_opt);
            for i in 0..base.len() {
                if !idx.contains(&i) {
                    prop_assert_eq!(p[i], base[i]);
                }
            }
        }
    }
}
