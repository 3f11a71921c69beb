//! Adam with bound projection, used to warm-start the quasi-Newton stage.

use nalgebra::DVector;

use crate::error::{Result, SysidError};

use super::{
    clip_into_bounds, projected_grad_inf_norm, AdamOptions, IterationLog, SolveResult, SolveStatus,
};

/// Run `opts.iters` Adam steps, projecting every iterate into the box.
///
/// With `track_best` the best-loss iterate encountered is returned instead
/// of the last one (there is no line search, so the trajectory need not be
/// monotone). A non-finite objective value skips the best-iterate update
/// and continues from the projected previous point; fifty consecutive
/// non-finite evaluations abort the run.
pub fn adam_minimize<F>(
    objective: F,
    x0: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    opts: &AdamOptions,
    mut log: Option<&mut dyn FnMut(IterationLog)>,
) -> Result<SolveResult>
where
    F: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    opts.validate()?;
    let n = x0.len();
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
    let mut m: DVector<f64> = DVector::zeros(n);
    let mut v: DVector<f64> = DVector::zeros(n);
    let mut consecutive_bad = 0usize;

    for t in 1..=opts.iters {
        m = &m * opts.beta1 + &g * (1.0 - opts.beta1);
        for i in 0..n {
            v[i] = opts.beta2 * v[i] + (1.0 - opts.beta2) * g[i] * g[i];
        }
        let bc1 = 1.0 - opts.beta1.powi(t as i32);
        let bc2 = 1.0 - opts.beta2.powi(t as i32);
        let mut x_new = x.clone();
        for i in 0..n {
            let m_hat = m[i] / bc1;
            let v_hat: f64 = v[i] / bc2;
            x_new[i] -= opts.learning_rate * m_hat / (v_hat.sqrt() + opts.eps);
        }
        clip_into_bounds(&mut x_new, lower, upper);
        nev += 1;
        match objective(&x_new) {
            Ok((f_new, g_new)) if f_new.is_finite() && g_new.iter().all(|a| a.is_finite()) => {
                x = x_new;
                f = f_new;
                g = g_new;
                consecutive_bad = 0;
                if f < best_f {
                    best_f = f;
                    best_x = x.clone();
                }
            }
            _ => {
                consecutive_bad += 1;
                if consecutive_bad >= 50 {
                    return Err(SysidError::Diverged(format!(
                        "{consecutive_bad} consecutive non-finite evaluations at iteration {t}"
                    )));
                }
                // keep the previous (already projected) point and gradient
            }
        }
        if let Some(cb) = log.as_deref_mut() {
            cb(IterationLog {
                iter: t,
                f,
                projected_grad_norm: projected_grad_inf_norm(&x, &g, lower, upper),
            });
        }
    }

    let (x_opt, f_opt) = if opts.track_best {
        (best_x, best_f)
    } else {
        (x.clone(), f)
    };
    let pg = projected_grad_inf_norm(&x, &g, lower, upper);
    Ok(SolveResult {
        x_opt,
        f_opt,
        n_fun_evals: nev,
        n_iters: opts.iters,
        status: SolveStatus::Converged,
        projected_grad_norm: pg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        Ok((x[0] * x[0], DVector::from_row_slice(&[2.0 * x[0]])))
    }

    #[test]
    fn converges_on_scalar_quadratic_and_matches_reference_recurrence() {
        let opts = AdamOptions {
            iters: 500,
            learning_rate: 0.1,
            track_best: false,
            ..Default::default()
        };
        let (l, u) = (
            DVector::from_element(1, f64::NEG_INFINITY),
            DVector::from_element(1, f64::INFINITY),
        );
        let res = adam_minimize(quadratic, &DVector::from_element(1, 1.0), &l, &u, &opts, None)
            .unwrap();
        assert!(res.x_opt[0].abs() < 1e-2, "{}", res.x_opt[0]);

        // Independent hand-rolled recurrence.
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=500 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((res.x_opt[0] - x).abs() < 1e-12);
    }

    #[test]
    fn track_best_returns_minimum_over_trajectory() {
        // Large learning rate makes the tail oscillate.
        let opts = AdamOptions {
            iters: 60,
            learning_rate: 0.9,
            track_best: true,
            ..Default::default()
        };
        let (l, u) = (
            DVector::from_element(1, f64::NEG_INFINITY),
            DVector::from_element(1, f64::INFINITY),
        );
        let res =
            adam_minimize(quadratic, &DVector::from_element(1, 1.0), &l, &u, &opts, None).unwrap();
        let last = adam_minimize(
            quadratic,
            &DVector::from_element(1, 1.0),
            &l,
            &u,
            &AdamOptions {
                track_best: false,
                ..opts
            },
            None,
        )
        .unwrap();
        assert!(res.f_opt <= last.f_opt);
    }

    #[test]
    fn non_finite_region_is_skipped() {
        // NaN above 1.2: the optimizer stays on the last finite point and
        // keeps going.
        let obj = |x: &DVector<f64>| {
            if x[0] > 1.2 {
                Ok((f64::NAN, DVector::zeros(1)))
            } else {
                Ok((x[0] * x[0], DVector::from_row_slice(&[2.0 * x[0]])))
            }
        };
        let opts = AdamOptions {
            iters: 200,
            learning_rate: 0.05,
            ..Default::default()
        };
        let (l, u) = (
            DVector::from_element(1, f64::NEG_INFINITY),
            DVector::from_element(1, f64::INFINITY),
        );
        let res = adam_minimize(obj, &DVector::from_element(1, 1.0), &l, &u, &opts, None).unwrap();
        assert!(res.f_opt.is_finite());
        assert!(res.f_opt <= 1.0);
    }

    #[test]
    fn aborts_after_fifty_consecutive_non_finite() {
        // Finite only at the exact starting point; every step lands in the
        // NaN region and the run must abort instead of spinning.
        let obj = |x: &DVector<f64>| {
            if x[0] == 1.0 {
                Ok((1.0, DVector::from_row_slice(&[2.0])))
            } else {
                Ok((f64::NAN, DVector::zeros(1)))
            }
        };
        let opts = AdamOptions {
            iters: 500,
            learning_rate: 0.1,
            ..Default::default()
        };
        let (l, u) = (
            DVector::from_element(1, f64::NEG_INFINITY),
            DVector::from_element(1, f64::INFINITY),
        );
        let err = adam_minimize(obj, &DVector::from_element(1, 1.0), &l, &u, &opts, None);
        assert!(err.is_err());
    }

    #[test]
    fn projection_pins_to_bound() {
        let opts = AdamOptions {
            iters: 400,
            learning_rate: 0.05,
            ..Default::default()
        };
        let res = adam_minimize(
            quadratic,
            &DVector::from_element(1, 1.5),
            &DVector::from_element(1, 0.5),
            &DVector::from_element(1, 2.0),
            &opts,
            None,
        )
        .unwrap();
        assert!((res.x_opt[0] - 0.5).abs() < 1e-12);
    }
}
