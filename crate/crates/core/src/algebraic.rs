//! Chord-Newton solution of `g(t,x,z,p) = 0` and its implicit-function tangent.

use nalgebra::{DMatrix, DVector, LU};

use crate::dual::{Point, Seed};
use crate::error::{Error, Result};
use crate::model::{MapKind, Model, eval_primal, map_tangents};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlgebraicConfig {
    pub q: usize,
    pub eps_z: f64,
    pub tol_g: f64,
    pub max_restarts: usize,
}

impl Default for AlgebraicConfig {
    fn default() -> Self {
        Self { q: 8, eps_z: 1e-10, tol_g: 1e-10, max_restarts: 3 }
    }
}

impl AlgebraicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || !(self.eps_z >= 0.0) || !(self.tol_g > 0.0) {
            return Err(Error::InvalidArgument(format!("bad algebraic config {self:?}")));
        }
        Ok(())
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, a| m.max(a.abs()))
}

/// `g_z` at a point, as a dense `n_z x n_z` matrix.
pub fn constraint_jacobian_z<M: Model>(model: &M, t: f64, x: &[f64], z: &[f64], p: &[f64]) -> Result<DMatrix<f64>> {
    let pt = Point::new(t, x, z, p);
    let seeds: Vec<Seed> = (0..z.len())
        .map(|i| {
            let mut s = Seed::zeros(&pt);
            s.dz[i] = 1.0;
            s
        })
        .collect();
    Ok(map_tangents(model, MapKind::Constraint, &pt, &seeds)?.tangents)
}

pub(crate) fn factor(m: DMatrix<f64>, t: f64) -> Result<LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let lu = m.lu();
    let u = lu.u();
    let tiny = u.diagonal().iter().any(|d| !(d.abs() > 1e-14 * scale));
    if tiny {
        return Err(Error::SingularJacobian { t });
    }
    Ok(lu)
}

/// Solve for the algebraic variables by chord-Newton iteration.
///
/// The regularized Jacobian is factored once per restart and reused for up to
/// `q` updates. A restart re-factors at the current iterate.
pub fn solve_algebraic<M: Model>(
    model: &M,
    t: f64,
    x: &[f64],
    p: &[f64],
    z_guess: &[f64],
    cfg: &AlgebraicConfig,
) -> Result<Vec<f64>> {
    let nz = model.n_z();
    if nz == 0 {
        return Ok(Vec::new());
    }
    if z_guess.len() != nz {
        return Err(Error::InvalidArgument(format!("z guess has length {}, expected {nz}", z_guess.len())));
    }
    let mut z = z_guess.to_vec();
    let mut res = f64::INFINITY;
    for restart in 0..=cfg.max_restarts {
        let mut gz = constraint_jacobian_z(model, t, x, &z, p)?;
        for i in 0..nz {
            gz[(i, i)] += cfg.eps_z;
        }
        let lu = factor(gz, t)?;
        let mut g = eval_primal(model, MapKind::Constraint, t, x, &z, p);
        let mut g_norm = inf_norm(&g);
        for it in 0..cfg.q {
            let z_prev = z.clone();
            let dz = lu
                .solve(&DVector::from_vec(g))
                .ok_or(Error::SingularJacobian { t })?;
            for (zi, d) in z.iter_mut().zip(dz.iter()) {
                *zi -= d;
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalFailure { context: format!("algebraic solve at t={t}") });
            }
            let small_step = inf_norm(dz.as_slice()) <= 1e-15 * (1.0 + inf_norm(&z));
            g = eval_primal(model, MapKind::Constraint, t, x, &z, p);
            let next = inf_norm(&g);
            // a growing residual means the frozen Jacobian is stale
            if next > g_norm && next > cfg.tol_g {
                // a full Newton step is kept; later chord steps are rolled back
                if it > 0 {
                    z = z_prev;
                } else {
                    g_norm = next;
                }
                break;
            }
            g_norm = next;
            if small_step {
                break;
            }
        }
        res = g_norm;
        if res <= cfg.tol_g {
            return Ok(z);
        }
        if restart == cfg.max_restarts {
            break;
        }
    }
    Err(Error::AlgebraicConvergence { t, residual: res, restarts: cfg.max_restarts })
}

/// A perturbation `(dt, dx, dp)` of the arguments of the implicit map.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    pub dt: f64,
    pub dx: Vec<f64>,
    pub dp: Vec<f64>,
}

/// Implicit-function tangents `dz = -g_z^{-1}(g_t dt + g_x dx + g_p dp)`,
/// one column per direction, all sharing one factorization of `g_z`.
pub fn algebraic_tangent<M: Model>(
    model: &M,
    t: f64,
    x: &[f64],
    p: &[f64],
    z: &[f64],
    directions: &[Direction],
) -> Result<DMatrix<f64>> {
    let nz = model.n_z();
    if nz == 0 {
        return Ok(DMatrix::zeros(0, directions.len()));
    }
    let pt = Point::new(t, x, z, p);
    let seeds: Vec<Seed> = directions
        .iter()
        .map(|d| Seed { dt: d.dt, dx: d.dx.clone(), dz: vec![0.0; nz], dp: d.dp.clone() })
        .collect();
    let rhs = map_tangents(model, MapKind::Constraint, &pt, &seeds)?.tangents;
    let lu = factor(constraint_jacobian_z(model, t, x, z, p)?, t)?;
    let sol = lu.solve(&rhs).ok_or(Error::SingularJacobian { t })?;
    Ok(-sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testmodels::{Cubic, LinearAlg, Quadratic};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dir(dt: f64, dx: f64, dp: f64) -> Direction {
        Direction { dt, dx: vec![dx], dp: vec![dp] }
    }

    #[test]
    fn linear_constraint_one_update() {
        let m = LinearAlg::new(1.0);
        let cfg = AlgebraicConfig { q: 1, max_restarts: 0, eps_z: 0.0, ..Default::default() };
        let z = solve_algebraic(&m, 0.0, &[3.0], &[1.0], &[-17.0], &cfg).unwrap();
        assert_relative_eq!(z[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn quadratic_explicit() {
        let m = Quadratic;
        let z = solve_algebraic(&m, 0.0, &[2.0], &[1.5], &[0.0], &AlgebraicConfig::default()).unwrap();
        assert_relative_eq!(z[0], 6.0, epsilon = 1e-10);
    }

    #[test]
    fn cubic_root_from_guess() {
        let m = Cubic;
        let cfg = AlgebraicConfig { q: 12, ..Default::default() };
        let z = solve_algebraic(&m, 0.0, &[2.0], &[], &[0.8], &cfg).unwrap();
        assert!((z[0] - 1.0).abs() <= 1e-10);
        let g = eval_primal(&m, MapKind::Constraint, 0.0, &[2.0], &z, &[]);
        assert!(g[0].abs() <= 1e-10);
    }

    #[test]
    fn nonconvergence_reported() {
        let m = Cubic;
        let cfg = AlgebraicConfig { q: 1, max_restarts: 0, ..Default::default() };
        let err = solve_algebraic(&m, 0.0, &[2.0], &[], &[0.8], &cfg).unwrap_err();
        assert!(matches!(err, Error::AlgebraicConvergence { .. }));
    }

    #[test]
    fn singular_jacobian_reported() {
        // g = z^3 + z - x has g_z = 1 at z=0; use eps_z = -1 to cancel it.
        let m = Cubic;
        let cfg = AlgebraicConfig { eps_z: -1.0, ..Default::default() };
        let err = solve_algebraic(&m, 0.0, &[2.0], &[], &[0.0], &cfg).unwrap_err();
        assert_eq!(err, Error::SingularJacobian { t: 0.0 });
    }

    #[test]
    fn tangent_examples() {
        let m = LinearAlg::new(1.0);
        let (x, p) = (2.0, 3.0);
        let dz = algebraic_tangent(&m, 0.0, &[x], &[p], &[p * x], &[dir(0.0, 1.0, 0.0), dir(0.0, 0.0, 1.0), dir(1.0, 0.0, 0.0)])
            .unwrap();
        assert_relative_eq!(dz[(0, 0)], p, epsilon = 1e-14);
        assert_relative_eq!(dz[(0, 1)], x, epsilon = 1e-14);
        assert_eq!(dz[(0, 2)], 0.0);

        let dz = algebraic_tangent(&Cubic, 0.0, &[2.0], &[], &[1.0], &[Direction { dt: 0.0, dx: vec![1.0], dp: vec![] }])
            .unwrap();
        assert_relative_eq!(dz[(0, 0)], 0.25, epsilon = 1e-14);
    }

    #[test]
    fn empty_algebraic_part() {
        let m = crate::testmodels::Decay::new(1.0, 1.0, 1.0);
        assert!(solve_algebraic(&m, 0.0, &[1.0], &[1.0], &[], &AlgebraicConfig::default()).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn cubic_consistency_and_ift(x in -20.0f64..20.0) {
            let m = Cubic;
            let cfg = AlgebraicConfig::default();
            let z = solve_algebraic(&m, 0.0, &[x], &[], &[0.9 * x.cbrt()], &cfg).unwrap();
            let g = eval_primal(&m, MapKind::Constraint, 0.0, &[x], &z, &[]);
            prop_assert!(g[0].abs() <= cfg.tol_g);
            let h = 1e-6;
            let zp = solve_algebraic(&m, 0.0, &[x + h], &[], &z, &cfg).unwrap()[0];
            let zm = solve_algebraic(&m, 0.0, &[x - h], &[], &z, &cfg).unwrap()[0];
            let fd = (zp - zm) / (2.0 * h);
            let dz = algebraic_tangent(&m, 0.0, &[x], &[], &z, &[Direction { dt: 0.0, dx: vec![1.0], dp: vec![] }]).unwrap();
            prop_assert!((dz[(0, 0)] - fd).abs() <= 1e-5 * fd.abs().max(1e-8));
        }

        #[test]
        fn tangent_is_linear(a in -3.0f64..3.0, d1 in prop::collection::vec(-1.0f64..1.0, 3), d2 in prop::collection::vec(-1.0f64..1.0, 3)) {
            let m = LinearAlg::new(1.0);
            let (x, p) = (1.3, 0.7);
            let mk = |d: &[f64]| dir(d[0], d[1], d[2]);
            let comb: Vec<f64> = d1.iter().zip(&d2).map(|(u, v)| a * u + v).collect();
            let dz = algebraic_tangent(&m, 0.0, &[x], &[p], &[p * x], &[mk(&d1), mk(&d2), mk(&comb)]).unwrap();
            prop_assert!((dz[(0, 2)] - (a * dz[(0, 0)] + dz[(0, 1)])).abs() <= 1e-13);
        }
    }
}
