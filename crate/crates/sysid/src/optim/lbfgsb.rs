//! Limited-memory quasi-Newton minimization under box constraints.
//!
//! Each iteration builds the quadratic model `m(x) = g'(x - xk) +
//! 1/2 (x - xk)' B (x - xk)` with the compact limited-memory form
//! `B = theta I - W M W'`, walks the projected-gradient path to its
//! generalized Cauchy point, minimizes the model over the free variables
//! (direct primal method), and refines the step with a strong Wolfe line
//! search clipped to the feasible box.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SysidError};

use super::{
    clip_into_bounds, projected_grad_inf_norm, IterationLog, LbfgsbOptions, SolveResult,
    SolveStatus,
};

struct History {
    s: Vec<DVector<f64>>,
    y: Vec<DVector<f64>>,
    theta: f64,
    /// `[Y, theta S]`, n x 2m.
    w: DMatrix<f64>,
    /// Inverse middle matrix, 2m x 2m.
    m: DMatrix<f64>,
}

impl History {
    fn new(n: usize) -> Self {
        History {
            s: Vec::new(),
            y: Vec::new(),
            theta: 1.0,
            w: DMatrix::zeros(n, 0),
            m: DMatrix::zeros(0, 0),
        }
    }

    fn clear(&mut self) {
        let n = self.w.nrows();
        *self = History::new(n);
    }

    fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Push a correction pair and rebuild the compact matrices. Pairs with
    /// `s'y <= 1e-10 ||s|| ||y||` are discarded to keep the approximation
    /// positive definite.
    fn update(&mut self, s: DVector<f64>, y: DVector<f64>, memory: usize) -> bool {
        let sy = s.dot(&y);
        if sy <= 1e-10 * s.norm() * y.norm() {
            return false;
        }
        self.theta = y.dot(&y) / sy;
        self.s.push(s);
        self.y.push(y);
        if self.s.len() > memory {
            self.s.remove(0);
            self.y.remove(0);
        }
        self.rebuild();
        true
    }

    fn rebuild(&mut self) {
        let n = self.s[0].len();
        let m = self.s.len();
        let mut w = DMatrix::zeros(n, 2 * m);
        for (j, y) in self.y.iter().enumerate() {
            w.column_mut(j).copy_from(y);
        }
        for (j, s) in self.s.iter().enumerate() {
            w.column_mut(m + j).copy_from(&(s * self.theta));
        }
        // Middle matrix: [[-D, L'], [L, theta S'S]]^{-1} with
        // D = diag(s_i'y_i) and L the strictly lower triangle of S'Y.
        let mut inner = DMatrix::zeros(2 * m, 2 * m);
        for i in 0..m {
            for j in 0..m {
                let sy = self.s[i].dot(&self.y[j]);
                if i == j {
                    inner[(i, i)] = -sy;
                }
                if i > j {
                    inner[(m + i, j)] = sy;
                    inner[(j, m + i)] = sy;
                }
                inner[(m + i, m + j)] = self.theta * self.s[i].dot(&self.s[j]);
            }
        }
        match inner.try_inverse() {
            Some(minv) => {
                self.m = minv;
                self.w = w;
            }
            None => self.clear(),
        }
    }

    /// `W' v` (length 2m; empty when no history).
    fn wt(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.is_empty() {
            DVector::zeros(0)
        } else {
            self.w.transpose() * v
        }
    }
}

/// Generalized Cauchy point: walk the piecewise-linear projection of the
/// steepest-descent ray and stop at the minimizer of the quadratic model.
/// Returns the point, the accumulated `c = W'(x_cp - x)` and the free set.
fn cauchy_point(
    x: &DVector<f64>,
    g: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    hist: &History,
) -> (DVector<f64>, DVector<f64>, Vec<usize>) {
    let n = x.len();
    let mut t = DVector::zeros(n);
    let mut d = DVector::zeros(n);
    for i in 0..n {
        let ti = if g[i] < 0.0 {
            (x[i] - upper[i]) / g[i]
        } else if g[i] > 0.0 {
            (x[i] - lower[i]) / g[i]
        } else {
            f64::INFINITY
        };
        t[i] = ti;
        d[i] = if ti > 0.0 { -g[i] } else { 0.0 };
    }
    let mut x_cp = x.clone();
    let mut order: Vec<usize> = (0..n).filter(|&i| t[i] > 0.0 && t[i].is_finite()).collect();
    order.sort_by(|&a, &b| t[a].total_cmp(&t[b]));

    let mw = |v: &DVector<f64>| -> DVector<f64> {
        if hist.is_empty() {
            DVector::zeros(0)
        } else {
            &hist.m * v
        }
    };

    let mut p = hist.wt(&d);
    let mut c = DVector::zeros(p.len());
    let mut fp = -d.dot(&d);
    let mut fpp = hist.theta * d.dot(&d) - p.dot(&mw(&p));
    let fpp_floor = 1e-15 * fpp.abs().max(1.0);
    let mut dt_min = if fpp > 0.0 { -fp / fpp } else { f64::INFINITY };
    let mut t_old = 0.0;

    let mut seg = 0usize;
    while seg < order.len() {
        let b = order[seg];
        let dt_b = t[b] - t_old;
        if dt_min < dt_b {
            break;
        }
        // Fix coordinate b at its bound and update the model derivatives.
        x_cp[b] = if d[b] > 0.0 { upper[b] } else { lower[b] };
        let z_b = x_cp[b] - x[b];
        if !c.is_empty() {
            c += &p * dt_b;
        }
        let g_b = g[b];
        if hist.is_empty() {
            fp += dt_b * fpp + g_b * g_b + hist.theta * g_b * z_b;
            fpp -= hist.theta * g_b * g_b;
        } else {
            let w_b = hist.w.row(b).transpose();
            let m_wb = mw(&w_b);
            fp += dt_b * fpp + g_b * g_b + hist.theta * g_b * z_b - g_b * m_wb.dot(&c);
            fpp -= hist.theta * g_b * g_b + 2.0 * g_b * m_wb.dot(&p) + g_b * g_b * m_wb.dot(&w_b);
            p += w_b * g_b;
        }
        fpp = fpp.max(fpp_floor);
        d[b] = 0.0;
        dt_min = -fp / fpp;
        t_old = t[b];
        seg += 1;
    }

    dt_min = dt_min.max(0.0);
    if !dt_min.is_finite() {
        dt_min = 0.0;
    }
    t_old += dt_min;
    for i in 0..n {
        if d[i] != 0.0 {
            x_cp[i] = (x[i] + t_old * d[i]).clamp(lower[i], upper[i]);
        }
    }
    if !c.is_empty() {
        c += &p * dt_min;
    }
    let free: Vec<usize> = (0..n)
        .filter(|&i| x_cp[i] > lower[i] && x_cp[i] < upper[i])
        .collect();
    (x_cp, c, free)
}

/// Minimize the quadratic model over the free variables starting from the
/// Cauchy point (direct primal method), staying inside the box.
#[allow(clippy::too_many_arguments)]
fn subspace_min(
    x: &DVector<f64>,
    g: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    hist: &History,
    x_cp: &DVector<f64>,
    c: &DVector<f64>,
    free: &[usize],
) -> DVector<f64> {
    if free.is_empty() {
        return x_cp.clone();
    }
    let theta = hist.theta;
    // Reduced gradient of the model at the Cauchy point.
    let mut r = DVector::zeros(free.len());
    let wmc = if hist.is_empty() {
        DVector::zeros(x.len())
    } else {
        &hist.w * (&hist.m * c)
    };
    for (k, &i) in free.iter().enumerate() {
        r[k] = g[i] + theta * (x_cp[i] - x[i]) - wmc[i];
    }

    let d_free = if hist.is_empty() {
        -&r / theta
    } else {
        let m2 = hist.m.nrows();
        // W'Z: 2m x |free|
        let mut wtz = DMatrix::zeros(m2, free.len());
        for (k, &i) in free.iter().enumerate() {
            wtz.column_mut(k).copy_from(&hist.w.row(i).transpose());
        }
        let n_mat = DMatrix::identity(m2, m2) - (&hist.m * (&wtz * wtz.transpose())) / theta;
        let rhs = &hist.m * (&wtz * &r);
        match n_mat.lu().solve(&rhs) {
            Some(v) => -(&r + (wtz.transpose() * v) / theta) / theta,
            None => return x_cp.clone(),
        }
    };

    // Longest feasible fraction of the subspace step.
    let mut alpha: f64 = 1.0;
    for (k, &i) in free.iter().enumerate() {
        let dk = d_free[k];
        if dk > 0.0 {
            alpha = alpha.min((upper[i] - x_cp[i]) / dk);
        } else if dk < 0.0 {
            alpha = alpha.min((lower[i] - x_cp[i]) / dk);
        }
    }
    alpha = alpha.clamp(0.0, 1.0);
    let mut x_bar = x_cp.clone();
    for (k, &i) in free.iter().enumerate() {
        x_bar[i] = (x_cp[i] + alpha * d_free[k]).clamp(lower[i], upper[i]);
    }
    x_bar
}

struct LineSearchOutcome {
    f: f64,
    g: DVector<f64>,
    x: DVector<f64>,
}

enum LineSearchResult {
    Accepted(LineSearchOutcome),
    Failed,
    BudgetExhausted(Option<LineSearchOutcome>),
}

/// Strong Wolfe line search over `phi(a) = f(clip(x + a d))`, `a` in
/// `(0, alpha_max]`, bracketing then bisection/interpolation zoom.
#[allow(clippy::too_many_arguments)]
fn wolfe_search<F>(
    obj: &F,
    x: &DVector<f64>,
    d: &DVector<f64>,
    f0: f64,
    dphi0: f64,
    alpha_max: f64,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    opts: &LbfgsbOptions,
    nev: &mut usize,
) -> Result<LineSearchResult>
where
    F: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let eval = |a: f64, nev: &mut usize| -> Result<(DVector<f64>, f64, DVector<f64>)> {
        let mut xt = x + d * a;
        clip_into_bounds(&mut xt, lower, upper);
        *nev += 1;
        let (f, g) = obj(&xt)?;
        Ok((xt, f, g))
    };
    let armijo = |a: f64, f: f64| f <= f0 + opts.c1 * a * dphi0;
    let mut best: Option<LineSearchOutcome> = None;
    let mut track_best = |f: f64, g: &DVector<f64>, xt: &DVector<f64>| {
        if f.is_finite() && f < best.as_ref().map_or(f0, |b| b.f) {
            best = Some(LineSearchOutcome {
                f,
                g: g.clone(),
                x: xt.clone(),
            });
        }
    };

    let mut a_prev = 0.0;
    let mut f_prev = f0;
    let mut dphi_prev = dphi0;
    let mut a = alpha_max.min(1.0);
    let mut bracket: Option<(f64, f64, f64, f64, f64, f64)> = None; // (lo, f_lo, dphi_lo, hi, f_hi, dphi_hi)

    for it in 0..20 {
        if *nev >= opts.max_fun_evals {
            return Ok(LineSearchResult::BudgetExhausted(best));
        }
        let (xt, f, g) = eval(a, nev)?;
        let dphi = g.dot(d);
        if f.is_finite() {
            track_best(f, &g, &xt);
        }
        if !f.is_finite() {
            // retreat into the finite region
            a = 0.5 * (a_prev + a);
            if a <= f64::EPSILON {
                return Ok(LineSearchResult::Failed);
            }
            continue;
        }
        if !armijo(a, f) || (it > 0 && f >= f_prev) {
            bracket = Some((a_prev, f_prev, dphi_prev, a, f, dphi));
            break;
        }
        if dphi.abs() <= opts.c2 * dphi0.abs() {
            return Ok(LineSearchResult::Accepted(LineSearchOutcome {
                f,
                g,
                x: xt,
            }));
        }
        if dphi >= 0.0 {
            bracket = Some((a, f, dphi, a_prev, f_prev, dphi_prev));
            break;
        }
        if a >= alpha_max {
            // Bound active along the ray and still descending: take it.
            return Ok(LineSearchResult::Accepted(LineSearchOutcome {
                f,
                g,
                x: xt,
            }));
        }
        a_prev = a;
        f_prev = f;
        dphi_prev = dphi;
        a = (2.0 * a).min(alpha_max);
    }

    let Some((mut lo, mut f_lo, mut dphi_lo, mut hi, mut f_hi, _)) = bracket else {
        return Ok(match best {
            Some(b) => LineSearchResult::Accepted(b),
            None => LineSearchResult::Failed,
        });
    };

    for _ in 0..25 {
        if *nev >= opts.max_fun_evals {
            return Ok(LineSearchResult::BudgetExhausted(best));
        }
        // Quadratic interpolation with a bisection safeguard.
        let denom = f_hi - f_lo - dphi_lo * (hi - lo);
        let mut a_j = if denom.abs() > 1e-12 {
            lo - 0.5 * dphi_lo * (hi - lo) * (hi - lo) / denom
        } else {
            0.5 * (lo + hi)
        };
        let width = (hi - lo).abs();
        let lo_hi_min = lo.min(hi);
        let lo_hi_max = lo.max(hi);
        if !a_j.is_finite()
            || a_j <= lo_hi_min + 0.1 * width
            || a_j >= lo_hi_max - 0.1 * width
        {
            a_j = 0.5 * (lo + hi);
        }
        let (xt, f, g) = eval(a_j, nev)?;
        let dphi = g.dot(d);
        if f.is_finite() {
            track_best(f, &g, &xt);
        }
        if !f.is_finite() || !armijo(a_j, f) || f >= f_lo {
            hi = a_j;
            f_hi = f;
        } else {
            if dphi.abs() <= opts.c2 * dphi0.abs() {
                return Ok(LineSearchResult::Accepted(LineSearchOutcome {
                    f,
                    g,
                    x: xt,
                }));
            }
            if dphi * (hi - lo) >= 0.0 {
                hi = lo;
                f_hi = f_lo;
            }
            lo = a_j;
            f_lo = f;
            dphi_lo = dphi;
        }
        if (hi - lo).abs() < 1e-14 * lo.abs().max(1.0) {
            break;
        }
    }
    Ok(match best {
        Some(b) => LineSearchResult::Accepted(b),
        None => LineSearchResult::Failed,
    })
}

/// Minimize `objective` subject to `lower <= x <= upper`.
///
/// The starting point is clipped into the box, every evaluated candidate
/// stays feasible, the objective is non-increasing across accepted
/// iterates, and the run is deterministic for identical inputs. A failed
/// line search first drops the correction history and retries; a second
/// failure returns the best iterate with [`SolveStatus::LineSearchFailure`].
pub fn lbfgsb_minimize<F>(
    objective: F,
    x0: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    opts: &LbfgsbOptions,
    mut log: Option<&mut dyn FnMut(IterationLog)>,
) -> Result<SolveResult>
where
    F: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    opts.validate()?;
    let n = x0.len();
    if lower.len() != n || upper.len() != n {
        return Err(SysidError::InvalidConfig("bound length mismatch".into()));
    }
    for i in 0..n {
        if lower[i] > upper[i] {
            return Err(SysidError::InvalidConfig(format!(
                "contradictory bounds at index {i}"
            )));
        }
    }

    let mut x = x0.clone();
    clip_into_bounds(&mut x, lower, upper);
    let mut nev = 1usize;
    let (mut f, mut g) = objective(&x)?;
    if !f.is_finite() {
        return Err(SysidError::Diverged(
            "objective not finite at the starting point".into(),
        ));
    }
    let mut best_f = f;
    let mut best_x = x.clone();
    let mut hist = History::new(n);
    let mut n_iters = 0usize;
    let mut pg = projected_grad_inf_norm(&x, &g, lower, upper);
    let status;
    let mut retried_after_reset = false;

    loop {
        if pg <= opts.grad_tol {
            status = SolveStatus::Converged;
            break;
        }
        if nev >= opts.max_fun_evals {
            status = SolveStatus::FevalBudget;
            break;
        }

        let (x_cp, c, free) = cauchy_point(&x, &g, lower, upper, &hist);
        let x_bar = subspace_min(&x, &g, lower, upper, &hist, &x_cp, &c, &free);
        let d = &x_bar - &x;
        let dphi0 = g.dot(&d);
        if !dphi0.is_finite() || dphi0 >= 0.0 || d.norm() == 0.0 {
            if !hist.is_empty() {
                hist.clear();
                continue;
            }
            status = if pg <= 10.0 * opts.grad_tol {
                SolveStatus::Converged
            } else {
                SolveStatus::LineSearchFailure
            };
            break;
        }

        // Largest multiple of d that stays inside the box.
        let mut alpha_max = f64::INFINITY;
        for i in 0..n {
            if d[i] > 0.0 {
                alpha_max = alpha_max.min((upper[i] - x[i]) / d[i]);
            } else if d[i] < 0.0 {
                alpha_max = alpha_max.min((lower[i] - x[i]) / d[i]);
            }
        }
        if !alpha_max.is_finite() {
            alpha_max = 1e10;
        }
        alpha_max = alpha_max.max(1.0);

        match wolfe_search(
            &objective, &x, &d, f, dphi0, alpha_max, lower, upper, opts, &mut nev,
        )? {
            LineSearchResult::Accepted(out) => {
                let s = &out.x - &x;
                let y = &out.g - &g;
                let f_old = f;
                x = out.x;
                f = out.f;
                g = out.g;
                n_iters += 1;
                retried_after_reset = false;
                if f < best_f {
                    best_f = f;
                    best_x = x.clone();
                }
                hist.update(s, y, opts.memory);
                pg = projected_grad_inf_norm(&x, &g, lower, upper);
                if let Some(cb) = log.as_deref_mut() {
                    cb(IterationLog {
                        iter: n_iters,
                        f,
                        projected_grad_norm: pg,
                    });
                }
                if f_old - f <= opts.ftol * f_old.abs().max(f.abs()).max(1.0) {
                    status = SolveStatus::Converged;
                    break;
                }
            }
            LineSearchResult::Failed => {
                if !hist.is_empty() && !retried_after_reset {
                    hist.clear();
                    retried_after_reset = true;
                    continue;
                }
                status = SolveStatus::LineSearchFailure;
                break;
            }
            LineSearchResult::BudgetExhausted(maybe) => {
                if let Some(out) = maybe {
                    if out.f < best_f {
                        best_f = out.f;
                        best_x = out.x;
                    }
                }
                status = SolveStatus::FevalBudget;
                break;
            }
        }
    }

    if best_f < f {
        x = best_x;
        f = best_f;
        nev += 1;
        let (_, g_best) = objective(&x)?;
        g = g_best;
        pg = projected_grad_inf_norm(&x, &g, lower, upper);
    }
    clip_into_bounds(&mut x, lower, upper);
    Ok(SolveResult {
        x_opt: x,
        f_opt: f,
        n_fun_evals: nev,
        n_iters,
        status,
        projected_grad_norm: pg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unbounded(n: usize) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_element(n, f64::NEG_INFINITY),
            DVector::from_element(n, f64::INFINITY),
        )
    }

    #[test]
    fn bound_active_scalar_quadratic() {
        // min (x-2)^2 s.t. x <= 1 -> x* = 1, f* = 1, projected gradient 0
        let obj = |x: &DVector<f64>| {
            let e = x[0] - 2.0;
            Ok((e * e, DVector::from_row_slice(&[2.0 * e])))
        };
        let res = lbfgsb_minimize(
            obj,
            &DVector::from_row_slice(&[-3.0]),
            &DVector::from_row_slice(&[f64::NEG_INFINITY]),
            &DVector::from_row_slice(&[1.0]),
            &LbfgsbOptions::default(),
            None,
        )
        .unwrap();
        assert!((res.x_opt[0] - 1.0).abs() < 1e-10);
        assert!((res.f_opt - 1.0).abs() < 1e-10);
        assert!(res.projected_grad_norm <= 1e-8);
    }

    #[test]
    fn rosenbrock_in_box() {
        let obj = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_row_slice(&[
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ]);
            Ok((f, g))
        };
        let res = lbfgsb_minimize(
            obj,
            &DVector::from_row_slice(&[-1.2, 1.0]),
            &DVector::from_element(2, -10.0),
            &DVector::from_element(2, 10.0),
            &LbfgsbOptions {
                max_fun_evals: 500,
                ..Default::default()
            },
            None,
        )
        .unwrap();
        assert!((res.x_opt[0] - 1.0).abs() < 1e-6, "{:?}", res.x_opt);
        assert!((res.x_opt[1] - 1.0).abs() < 1e-6);
        assert!(res.f_opt < 1e-12);
    }

    #[test]
    fn nonsmooth_objective_returns_best_iterate_without_panicking() {
        // |x| has no point satisfying the curvature condition near 0; the
        // search must hand back its best decrease instead of failing hard.
        let obj = |x: &DVector<f64>| {
            Ok((x[0].abs(), DVector::from_row_slice(&[x[0].signum()])))
        };
        let (l, u) = unbounded(1);
        let res = lbfgsb_minimize(
            obj,
            &DVector::from_row_slice(&[1.0]),
            &l,
            &u,
            &LbfgsbOptions {
                max_fun_evals: 200,
                ..Default::default()
            },
            None,
        )
        .unwrap();
        assert!(res.f_opt.is_finite());
        assert!(res.f_opt <= 1.0);
    }

    #[test]
    fn never_worse_than_start_and_deterministic() {
        let obj = |x: &DVector<f64>| {
            let f = x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum::<f64>();
            let g = DVector::from_fn(x.len(), |i, _| 2.0 * (i as f64 + 1.0) * x[i]);
            Ok((f, g))
        };
        let x0 = DVector::from_row_slice(&[3.0, -2.0, 1.0]);
        let (l, u) = unbounded(3);
        let a = lbfgsb_minimize(obj, &x0, &l, &u, &LbfgsbOptions::default(), None).unwrap();
        let b = lbfgsb_minimize(obj, &x0, &l, &u, &LbfgsbOptions::default(), None).unwrap();
        assert!(a.f_opt <= obj(&x0).map(|t: (f64, DVector<f64>)| t.0).unwrap());
        assert_eq!(a, b);
    }
}
