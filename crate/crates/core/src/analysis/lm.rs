//! Bounded Levenberg–Marquardt least squares with central-difference
//! Jacobians and Marquardt diagonal scaling.

use nalgebra::{DMatrix, DVector};

pub(crate) type ModelFn<'a> = dyn Fn(&[f64], f64) -> f64 + Sync + 'a;

pub(crate) struct Problem<'a> {
    pub f: &'a ModelFn<'a>,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub free: Vec<bool>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Typical magnitude of each parameter, used for difference steps and
    /// step-size convergence.
    pub scale: Vec<f64>,
    pub max_iter: usize,
}

pub(crate) struct Outcome {
    pub p: Vec<f64>,
    pub ssr: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl Problem<'_> {
    fn clamp(&self, p: &mut [f64]) {
        for j in 0..p.len() {
            p[j] = p[j].clamp(self.lower[j], self.upper[j]);
        }
    }

    fn residuals(&self, p: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.x.len(), self.x.iter().zip(self.y).map(|(&x, &y)| y - (self.f)(p, x)))
    }

    fn free_indices(&self) -> Vec<usize> {
        (0..self.free.len()).filter(|&j| self.free[j]).collect()
    }

    /// Jacobian of the model (not the residual) with respect to the scaled
    /// free parameters `q_j = p_j / scale_j`.
    fn jacobian(&self, p: &[f64], idx: &[usize]) -> DMatrix<f64> {
        let n = self.x.len();
        let mut jac = DMatrix::zeros(n, idx.len());
        let mut q = p.to_vec();
        for (col, &j) in idx.iter().enumerate() {
            let h = 1e-6 * p[j].abs().max(self.scale[j]);
            let hi = (p[j] + h).min(self.upper[j]);
            let lo = (p[j] - h).max(self.lower[j]);
            if hi <= lo {
                continue;
            }
            q[j] = hi;
            let f_hi: Vec<f64> = self.x.iter().map(|&x| (self.f)(&q, x)).collect();
            q[j] = lo;
            for (i, &x) in self.x.iter().enumerate() {
                jac[(i, col)] = (f_hi[i] - (self.f)(&q, x)) / (hi - lo) * self.scale[j];
            }
            q[j] = p[j];
        }
        jac
    }

    /// `JᵀJ` in scaled parameters at `p`.
    pub fn information(&self, p: &[f64]) -> DMatrix<f64> {
        let jac = self.jacobian(p, &self.free_indices());
        jac.transpose() * jac
    }

    pub fn solve(&self, p0: &[f64]) -> Outcome {
        let idx = self.free_indices();
        let mut p = p0.to_vec();
        self.clamp(&mut p);
        let mut r = self.residuals(&p);
        let mut cost = r.norm_squared();
        let y_norm = self.y.iter().map(|v| v * v).sum::<f64>();
        let mut lambda = 1e-3;
        let mut converged = idx.is_empty();
        let mut iterations = 0;
        let mut small_steps = 0;
        while !converged && iterations < self.max_iter && cost.is_finite() {
            iterations += 1;
            let jac = self.jacobian(&p, &idx);
            let a = jac.transpose() * &jac;
            let g = jac.transpose() * &r;
            let max_diag = a.diagonal().max();
            if !(max_diag > 0.0) {
                converged = true;
                break;
            }
            let diag: Vec<f64> = a.diagonal().iter().map(|&d| d.max(1e-12 * max_diag)).collect();
            let mut nu = 2.0;
            let mut accepted = false;
            while lambda < 1e20 {
                let mut m = a.clone();
                for k in 0..idx.len() {
                    m[(k, k)] += lambda * diag[k];
                }
                let Some(chol) = m.cholesky() else {
                    lambda *= nu;
                    nu *= 2.0;
                    continue;
                };
                let delta = chol.solve(&g);
                let mut trial = p.clone();
                for (k, &j) in idx.iter().enumerate() {
                    trial[j] += delta[k] * self.scale[j];
                }
                self.clamp(&mut trial);
                let r_trial = self.residuals(&trial);
                let cost_trial = r_trial.norm_squared();
                let mut scaled = delta.clone();
                for k in 0..idx.len() {
                    scaled[k] *= lambda * diag[k];
                }
                let predicted = delta.dot(&(scaled + &g));
                let rho = (cost - cost_trial) / predicted;
                if cost_trial.is_finite() && cost_trial < cost && rho > 0.0 {
                    let step = idx
                        .iter()
                        .map(|&j| (trial[j] - p[j]).abs() / (p[j].abs() + self.scale[j]))
                        .fold(0.0, f64::max);
                    let gain = (cost - cost_trial) / cost.max(f64::MIN_POSITIVE);
                    p = trial;
                    r = r_trial;
                    cost = cost_trial;
                    lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                    accepted = true;
                    if step < 1e-10 || gain < 1e-14 {
                        small_steps += 1;
                    } else {
                        small_steps = 0;
                    }
                    break;
                }
                lambda *= nu;
                nu *= 2.0;
            }
            if !accepted || small_steps >= 2 || cost <= 1e-28 * y_norm {
                // no downhill step exists at machine precision: a minimum
                converged = true;
            }
        }
        Outcome {
            p,
            ssr: cost,
            converged: converged && cost.is_finite(),
            iterations,
        }
    }
}
