//! Maximizers for binomial-type objectives.
//!
//! The MLE and the Kullback-Leibler projection both maximize
//!
//! `F(beta) = sum_j N_j [t_j ln pi_j(beta) + (1 - t_j) ln(1 - pi_j(beta))]`
//!
//! for some target probabilities `t_j` (observed proportions for the MLE).
//! `F` is concave in `beta` for both families, so a damped Newton method is
//! used. Multistage fits add a barrier for `d_j' beta >= MULTISTAGE_FLOOR`
//! and follow the central path down to a tiny barrier weight. A Nelder-Mead
//! simplex is the fallback when Newton breaks down.

use nalgebra::{DMatrix, DVector};

use crate::models::{dose_basis, linear_predictor, Family, ModelSpec};

/// Lower bound on the multistage linear predictor at design doses.
pub const MULTISTAGE_FLOOR: f64 = 1e-10;
/// Coefficients larger than this in absolute value signal separation.
pub const SEPARATION_LIMIT: f64 = 1e3;

const MAX_NEWTON_ITERS: usize = 500;
const ARMIJO: f64 = 1e-4;

/// `F` restricted to one model class, design and target.
#[derive(Debug, Clone, Copy)]
pub struct BinomialObjective<'a> {
    pub spec: ModelSpec,
    pub doses: &'a [f64],
    pub weights: &'a [f64],
    pub target: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Maximum {
    pub beta: Vec<f64>,
    /// Unclamped objective value at `beta`.
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub separation: bool,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<'a> BinomialObjective<'a> {
    fn multistage(&self) -> bool {
        self.spec.family == Family::Multistage
    }

    /// Per-dose value, first and second derivative in the linear predictor.
    fn terms(&self, j: usize, eta: f64) -> (f64, f64, f64) {
        let (n, t) = (self.weights[j], self.target[j]);
        match self.spec.family {
            Family::Logistic => {
                let lp = -softplus(-eta);
                let lq = -softplus(eta);
                let p = lp.exp();
                let pb = lq.exp();
                let v = n * (xlogy(t, lp) + xlogy(1.0 - t, lq));
                (v, n * (t - p), -n * p * pb)
            }
            Family::Multistage => {
                if eta <= 0.0 {
                    return (f64::NEG_INFINITY, f64::NAN, f64::NAN);
                }
                let p = -(-eta).exp_m1();
                let pb = (-eta).exp();
                let v = n * (xlogy(t, p.ln()) - (1.0 - t) * eta);
                (v, n * (t / p - 1.0), -n * t * pb / (p * p))
            }
        }
    }

    pub fn value(&self, beta: &[f64]) -> f64 {
        (0..self.doses.len())
            .map(|j| self.terms(j, linear_predictor(beta, self.doses[j])).0)
            .sum()
    }

    /// Value, gradient and Hessian of `F + mu * sum b(eta_j - floor)` with the
    /// barrier `b(s) = ln(s) - s`. The linear term keeps the barrier from
    /// pushing a flat objective off to infinity.
    fn eval(&self, beta: &[f64], mu: f64) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        let k = beta.len();
        let mut v = 0.0;
        let mut g = DVector::zeros(k);
        let mut h = DMatrix::zeros(k, k);
        for (j, &d) in self.doses.iter().enumerate() {
            let x = DVector::from_vec(dose_basis(d, self.spec.order));
            let eta = linear_predictor(beta, d);
            let (mut tv, mut t1, mut t2) = self.terms(j, eta);
            if self.multistage() && mu > 0.0 {
                let s = eta - MULTISTAGE_FLOOR;
                if s <= 0.0 {
                    return None;
                }
                tv += mu * (s.ln() - s);
                t1 += mu * (1.0 / s - 1.0);
                t2 -= mu / (s * s);
            }
            if !tv.is_finite() || !t1.is_finite() || !t2.is_finite() {
                return None;
            }
            v += tv;
            g.axpy(t1, &x, 1.0);
            h.ger(t2, &x, &x, 1.0);
        }
        Some((v, g, h))
    }

    fn barrier_value(&self, beta: &[f64], mu: f64) -> f64 {
        let mut v = self.value(beta);
        if self.multistage() && mu > 0.0 {
            for &d in self.doses {
                let s = linear_predictor(beta, d) - MULTISTAGE_FLOOR;
                if s <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                v += mu * (s.ln() - s);
            }
        }
        v
    }

    /// Whether `beta` satisfies the multistage floor at every design dose.
    pub fn feasible(&self, beta: &[f64]) -> bool {
        !self.multistage()
            || self
                .doses
                .iter()
                .all(|&d| linear_predictor(beta, d) >= MULTISTAGE_FLOOR)
    }

    /// Shift the intercept so the start lies strictly inside the feasible set.
    fn interior_start(&self, start: &[f64]) -> Vec<f64> {
        let mut b = start.to_vec();
        if self.multistage() {
            let min = self
                .doses
                .iter()
                .map(|&d| linear_predictor(&b, d))
                .fold(f64::INFINITY, f64::min);
            let want = MULTISTAGE_FLOOR + 1e-2;
            if min < want {
                b[0] += want - min;
            }
        }
        b
    }

    /// Damped Newton on the barrier objective at fixed `mu`.
    /// Returns `(beta, converged, iterations, separation)`.
    fn newton(&self, mut beta: Vec<f64>, mu: f64, budget: usize) -> (Vec<f64>, bool, usize, bool) {
        let mut iters = 0;
        let mut flat = 0;
        while iters < budget {
            iters += 1;
            let Some((v, g, h)) = self.eval(&beta, mu) else {
                return (beta, false, iters, false);
            };
            let Some(step) = newton_direction(&g, &h) else {
                return (beta, false, iters, false);
            };
            let decrement = g.dot(&step);
            let scale = 1.0 + beta.iter().fold(0.0_f64, |m, b| m.max(b.abs()));
            if step.amax() < 1e-14 * scale {
                return (beta, true, iters, false);
            }
            if decrement < 1e-15 * (1.0 + v.abs()) {
                flat += 1;
                // keep polishing while the gradient is visibly nonzero, but
                // give up on progress lost in rounding
                if g.amax() < 1e-8 || flat >= 5 {
                    return (beta, true, iters, false);
                }
            } else {
                flat = 0;
            }
            let mut alpha = 1.0_f64;
            if self.multistage() && mu > 0.0 {
                for &d in self.doses {
                    let x = dose_basis(d, self.spec.order);
                    let dir: f64 = x.iter().zip(step.iter()).map(|(a, b)| a * b).sum();
                    if dir < 0.0 {
                        let s = linear_predictor(&beta, d) - MULTISTAGE_FLOOR;
                        alpha = alpha.min(0.99 * s / -dir);
                    }
                }
            }
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + alpha * s).collect();
                let tv = self.barrier_value(&trial, mu);
                if tv.is_finite() && tv >= v + ARMIJO * alpha * decrement {
                    beta = trial;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                // no ascent possible in floating point: treat as stationary
                return (beta, decrement < 1e-8 * (1.0 + v.abs()), iters, false);
            }
            if beta.iter().any(|b| b.abs() > SEPARATION_LIMIT) {
                return (beta, true, iters, true);
            }
        }
        (beta, false, iters, false)
    }

    /// Maximize from one start.
    pub fn maximize_from(&self, start: &[f64]) -> Maximum {
        let mut beta = self.interior_start(start);
        let mut iterations = 0;
        let mut converged = true;
        let mut separation = false;
        if self.multistage() {
            let mut mu = 1.0;
            while mu >= 1e-12 {
                let (b, ok, it, sep) = self.newton(beta, mu, MAX_NEWTON_ITERS.saturating_sub(iterations).max(1));
                beta = b;
                iterations += it;
                converged &= ok;
                if sep {
                    separation = true;
                    break;
                }
                mu *= 0.1;
            }
        } else {
            let (b, ok, it, sep) = self.newton(beta, 0.0, MAX_NEWTON_ITERS);
            beta = b;
            iterations = it;
            converged = ok;
            separation = sep;
        }
        if converged && self.saturated(&beta) {
            separation = true;
        }
        if !converged && !separation {
            let fallback = self.simplex(&beta);
            if fallback.value >= self.value(&beta) || !self.value(&beta).is_finite() {
                return Maximum { iterations: iterations + fallback.iterations, ..fallback };
            }
        }
        Maximum {
            value: self.value(&beta),
            beta,
            converged,
            iterations,
            separation,
        }
    }

    /// A fitted probability pinned at 0 or 1 with large coefficients means
    /// the supremum lies at infinity.
    fn saturated(&self, beta: &[f64]) -> bool {
        if beta.iter().all(|b| b.abs() < 20.0) {
            return false;
        }
        self.doses.iter().any(|&d| {
            let eta = linear_predictor(beta, d);
            match self.spec.family {
                Family::Logistic => eta.abs() > 27.0,
                Family::Multistage => eta > 27.0,
            }
        })
    }

    /// Best of several starts; the first converged start with the highest
    /// value wins.
    pub fn maximize(&self, starts: &[Vec<f64>]) -> Maximum {
        let mut best: Option<Maximum> = None;
        for s in starts {
            let m = self.maximize_from(s);
            let better = match &best {
                None => true,
                Some(b) => (m.converged && !b.converged) || (m.converged == b.converged && m.value > b.value),
            };
            if better {
                best = Some(m);
            }
        }
        best.expect("at least one start")
    }

    fn simplex(&self, start: &[f64]) -> Maximum {
        let f = |b: &[f64]| {
            if !self.feasible(b) {
                return f64::INFINITY;
            }
            let v = self.value(b);
            if v.is_finite() {
                -v
            } else {
                f64::INFINITY
            }
        };
        let x0 = self.interior_start(start);
        let r = nelder_mead(f, &x0, &NelderMeadOptions::default());
        let separation = r.x.iter().any(|b| b.abs() > SEPARATION_LIMIT);
        Maximum {
            value: -r.fx,
            beta: r.x,
            converged: r.converged && !separation,
            iterations: r.iterations,
            separation,
        }
    }

    /// Start from a weighted least-squares fit of link-transformed targets on
    /// the dose basis.
    pub fn default_start(&self) -> Vec<f64> {
        let k = self.spec.n_params();
        let mut xtx = DMatrix::<f64>::zeros(k, k);
        let mut xty = DVector::<f64>::zeros(k);
        for (j, &d) in self.doses.iter().enumerate() {
            let n = self.weights[j];
            let p = (self.target[j] * n + 0.5) / (n + 1.0);
            let (z, w) = match self.spec.family {
                Family::Logistic => ((p / (1.0 - p)).ln(), n * p * (1.0 - p)),
                Family::Multistage => (-(1.0 - p).ln(), n * (1.0 - p) / p),
            };
            let x = DVector::from_vec(dose_basis(d, self.spec.order));
            xtx.ger(w, &x, &x, 1.0);
            xty.axpy(w * z, &x, 1.0);
        }
        for i in 0..k {
            xtx[(i, i)] += 1e-8;
        }
        let sol = xtx.cholesky().map(|c| c.solve(&xty));
        match sol {
            Some(s) if s.iter().all(|v| v.is_finite()) => self.interior_start(s.as_slice()),
            _ => self.interior_start(&vec![0.0; k]),
        }
    }
}

fn xlogy(x: f64, logy: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * logy
    }
}

/// Solve `(-H) step = g`, regularizing if `-H` is not positive definite.
fn newton_direction(g: &DVector<f64>, h: &DMatrix<f64>) -> Option<DVector<f64>> {
    let neg = -h;
    let scale = neg.diagonal().amax().max(1e-300);
    let mut ridge = 0.0;
    for _ in 0..20 {
        let mut m = neg.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += ridge;
        }
        if let Some(c) = m.cholesky() {
            let s = c.solve(g);
            if s.iter().all(|v| v.is_finite()) {
                return Some(s);
            }
        }
        ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 100.0 };
    }
    None
}

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_iter: usize,
    pub ftol: f64,
    pub xtol: f64,
    pub initial_step: f64,
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            ftol: 1e-14,
            xtol: 1e-12,
            initial_step: 0.1,
            restarts: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimize `f` with the Nelder-Mead simplex, restarting from the incumbent
/// to guard against premature collapse. Infeasible points should return
/// `+inf`.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], opts: &NelderMeadOptions) -> NelderMeadResult {
    let mut x = x0.to_vec();
    let mut total = 0;
    let mut converged = false;
    let mut fx = f(&x);
    for _ in 0..=opts.restarts {
        let r = nelder_mead_once(&f, &x, opts);
        total += r.iterations;
        let improved = r.fx < fx - opts.ftol * (1.0 + fx.abs());
        if r.fx <= fx {
            x = r.x;
            fx = r.fx;
        }
        converged = r.converged;
        if !improved && converged {
            break;
        }
    }
    NelderMeadResult { x, fx, iterations: total, converged }
}

fn nelder_mead_once<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], opts: &NelderMeadOptions) -> NelderMeadResult {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut v = x0.to_vec();
        let h = if v[i] != 0.0 { opts.initial_step * v[i].abs() } else { opts.initial_step };
        v[i] += h;
        if !f(&v).is_finite() {
            v[i] -= 2.0 * h;
        }
        simplex.push(v);
    }
    let mut fs: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut it = 0;
    let mut converged = false;
    while it < opts.max_iter {
        it += 1;
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| fs[a].total_cmp(&fs[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        fs = idx.iter().map(|&i| fs[i]).collect();

        let frange = (fs[n] - fs[0]).abs();
        let xrange = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0_f64, f64::max);
        if fs[0].is_finite() && frange <= opts.ftol * (1.0 + fs[0].abs()) && xrange <= opts.xtol * (1.0 + norm_inf(&simplex[0])) {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|v| v[k]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&simplex[n]).map(|(c, w)| c + t * (w - c)).collect()
        };
        let xr = along(-alpha);
        let fr = f(&xr);
        if fr < fs[0] {
            let xe = along(-gamma);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                fs[n] = fe;
            } else {
                simplex[n] = xr;
                fs[n] = fr;
            }
            continue;
        }
        if fr < fs[n - 1] {
            simplex[n] = xr;
            fs[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < fs[n] {
            let xc = along(-rho);
            let fc = f(&xc);
            (xc, fc)
        } else {
            let xc = along(rho);
            let fc = f(&xc);
            (xc, fc)
        };
        if fc < fs[n].min(fr) {
            simplex[n] = xc;
            fs[n] = fc;
            continue;
        }
        let best = simplex[0].clone();
        for i in 1..=n {
            simplex[i] = best.iter().zip(&simplex[i]).map(|(b, v)| b + sigma * (v - b)).collect();
            fs[i] = f(&simplex[i]);
        }
    }
    let i = (0..=n).min_by(|&a, &b| fs[a].total_cmp(&fs[b])).unwrap();
    NelderMeadResult {
        x: simplex[i].clone(),
        fx: fs[i],
        iterations: it,
        converged,
    }
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}
