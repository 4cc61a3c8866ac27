//! Dormand-Prince 5(4) steps with 4th-order dense output.

use crate::error::{Error, Result};

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];

const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];

const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// Step-size control settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepControl {
    pub rtol: f64,
    pub atol: f64,
    pub h_min: f64,
    pub h_max: f64,
}

/// Continuous extension of one accepted step on `[t0, t0 + h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseStep {
    pub t0: f64,
    pub h: f64,
    rcont: [Vec<f64>; 5],
}

impl DenseStep {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    pub fn dim(&self) -> usize {
        self.rcont[0].len()
    }

    /// State at `t`; `t` should lie in the step interval.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let s = if self.h == 0.0 { 0.0 } else { (t - self.t0) / self.h };
        let s1 = 1.0 - s;
        let [r1, r2, r3, r4, r5] = &self.rcont;
        for i in 0..out.len() {
            out[i] = r1[i] + s * (r2[i] + s1 * (r3[i] + s * (r4[i] + s1 * r5[i])));
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, &mut out);
        out
    }

    /// Dense output restricted to the leading `n` components.
    pub fn truncated(&self, n: usize) -> DenseStep {
        DenseStep { t0: self.t0, h: self.h, rcont: self.rcont.clone().map(|mut v| {
            v.truncate(n);
            v
        }) }
    }
}

/// Result of one trial step.
#[derive(Clone, Debug)]
pub struct Trial {
    pub y1: Vec<f64>,
    /// Derivative at the step end, reused as the next first stage.
    pub k7: Vec<f64>,
    /// Scaled RMS error estimate; the step is acceptable when `<= 1`.
    pub err: f64,
    pub dense: DenseStep,
}

/// One Dormand-Prince trial step from `(t, y)` with first stage `k1 = f(t, y)`.
pub fn dp5_trial<F>(f: &mut F, t: f64, y: &[f64], k1: &[f64], h: f64, ctl: &StepControl) -> Result<Trial>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let n = y.len();
    let mut k: Vec<Vec<f64>> = vec![k1.to_vec()];
    let mut stage = vec![0.0; n];
    for s in 1..7 {
        for i in 0..n {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                acc += A[s][j] * kj[i];
            }
            stage[i] = y[i] + h * acc;
        }
        let mut ks = vec![0.0; n];
        f(t + C[s] * h, &stage, &mut ks)?;
        k.push(ks);
    }
    // the seventh stage point is the 5th-order solution
    let y1 = stage;
    let mut sq = 0.0;
    for i in 0..n {
        let mut e = 0.0;
        for (s, ks) in k.iter().enumerate() {
            e += E[s] * ks[i];
        }
        let sc = ctl.atol + ctl.rtol * y[i].abs().max(y1[i].abs());
        sq += (h * e / sc).powi(2);
    }
    let err = if n == 0 { 0.0 } else { (sq / n as f64).sqrt() };
    let mut r2 = vec![0.0; n];
    let mut r3 = vec![0.0; n];
    let mut r4 = vec![0.0; n];
    let mut r5 = vec![0.0; n];
    for i in 0..n {
        let ydiff = y1[i] - y[i];
        let bspl = h * k[0][i] - ydiff;
        r2[i] = ydiff;
        r3[i] = bspl;
        r4[i] = ydiff - h * k[6][i] - bspl;
        let mut d = 0.0;
        for (s, ks) in k.iter().enumerate() {
            d += D[s] * ks[i];
        }
        r5[i] = h * d;
    }
    if !err.is_finite() || y1.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure { context: format!("Runge-Kutta step at t={t}") });
    }
    let k7 = k.pop().unwrap_or_default();
    Ok(Trial { dense: DenseStep { t0: t, h, rcont: [y.to_vec(), r2, r3, r4, r5] }, y1, k7, err })
}

/// Next step size from the error of the last trial.
pub fn next_step(h: f64, err: f64, rejected: bool) -> f64 {
    let fac = if err == 0.0 { 10.0 } else { 0.9 * err.powf(-0.2) };
    let hi = if rejected { 1.0 } else { 10.0 };
    h * fac.clamp(0.2, hi)
}

/// Starting step size estimate from the local derivative scale.
pub fn initial_step(t_span: f64, y: &[f64], f0: &[f64], ctl: &StepControl) -> f64 {
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for i in 0..y.len() {
        let sc = ctl.atol + ctl.rtol * y[i].abs();
        d0 += (y[i] / sc).powi(2);
        d1 += (f0[i] / sc).powi(2);
    }
    let h = if d0 < 1e-10 || d1 < 1e-10 { 1e-6 } else { 0.01 * (d0 / d1).sqrt() };
    h.min(ctl.h_max).min(t_span).max(ctl.h_min)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CTL: StepControl = StepControl { rtol: 1e-10, atol: 1e-10, h_min: 1e-14, h_max: 1.0 };

    fn integrate<F>(mut f: F, y0: &[f64], t_end: f64) -> (Vec<f64>, Vec<DenseStep>)
    where
        F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
    {
        let mut t = 0.0;
        let mut y = y0.to_vec();
        let mut k1 = vec![0.0; y.len()];
        f(t, &y, &mut k1).unwrap();
        let mut h = initial_step(t_end, &y, &k1, &CTL);
        let mut steps = Vec::new();
        let mut rejected = false;
        while t < t_end {
            h = h.min(t_end - t);
            let tr = dp5_trial(&mut f, t, &y, &k1, h, &CTL).unwrap();
            if tr.err <= 1.0 {
                t = if t + h >= t_end { t_end } else { t + h };
                y = tr.y1;
                k1 = tr.k7;
                steps.push(tr.dense);
                h = next_step(h, tr.err, rejected);
                rejected = false;
            } else {
                h = next_step(h, tr.err, true);
                rejected = true;
            }
        }
        (y, steps)
    }

    #[test]
    fn exponential_decay() {
        let (y, _) = integrate(|_, y, o| {
            o[0] = -y[0];
            Ok(())
        }, &[1.0], 2.0);
        assert!((y[0] - (-2.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn dense_output_is_accurate() {
        let (_, steps) = integrate(|_, y, o| {
            o[0] = y[1];
            o[1] = -y[0];
            Ok(())
        }, &[0.0, 1.0], 6.0);
        for s in &steps {
            for q in [0.25, 0.5, 0.9] {
                let t = s.t0 + q * s.h;
                let v = s.eval(t);
                assert!((v[0] - t.sin()).abs() < 1e-8, "t={t}");
                assert!((v[1] - t.cos()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn dense_endpoints_match_step() {
        let mut f = |_t: f64, y: &[f64], o: &mut [f64]| {
            o[0] = y[0] * y[0];
            Ok(())
        };
        let tr = dp5_trial(&mut f, 0.0, &[0.5], &[0.25], 0.1, &CTL).unwrap();
        assert_eq!(tr.dense.eval(0.0)[0], 0.5);
        assert!((tr.dense.eval(0.1)[0] - tr.y1[0]).abs() < 1e-15);
    }

    #[test]
    fn cubic_polynomial_is_exact() {
        let mut f = |t: f64, _y: &[f64], o: &mut [f64]| {
            o[0] = 3.0 * t * t;
            Ok(())
        };
        let tr = dp5_trial(&mut f, 0.0, &[0.0], &[0.0], 1.0, &CTL).unwrap();
        assert!((tr.y1[0] - 1.0).abs() < 1e-14);
        assert!((tr.dense.eval(0.3)[0] - 0.027).abs() < 1e-14);
    }

    #[test]
    fn step_factor_is_clamped() {
        assert_eq!(next_step(1.0, 0.0, false), 10.0);
        assert_eq!(next_step(1.0, 1e9, false), 0.2);
        assert!(next_step(1.0, 1e-9, true) <= 1.0);
    }
}
