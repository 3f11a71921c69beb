//! Initial-state reconstruction for validation data: multi-epoch forward
//! extended Kalman filtering with backward Rauch-Tung-Striebel smoothing,
//! an optional local refinement of the reconstructed state, and p-step
//! ahead prediction with an output-disturbance augmented filter.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SysidError};
use crate::gradient::{output_jacobian, state_jacobian, x0_loss_and_grad};
use crate::model::{output_map, step_state, ModelParams, ModelSpec, SaturationConfig};
use crate::objectives::{r2_average, r2_scores};
use crate::optim::{lbfgsb_minimize, LbfgsbOptions};

/// Covariance specification: a scaled identity or a full matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cov {
    Scaled(f64),
    Full(DMatrix<f64>),
}

impl Cov {
    fn materialize(&self, dim: usize, what: &str) -> Result<DMatrix<f64>> {
        match self {
            Cov::Scaled(s) => {
                if !s.is_finite() || *s <= 0.0 {
                    return Err(SysidError::InvalidConfig(format!(
                        "{what} scale must be finite and positive"
                    )));
                }
                Ok(DMatrix::identity(dim, dim) * *s)
            }
            Cov::Full(m) => {
                if m.nrows() != dim || m.ncols() != dim {
                    return Err(SysidError::DimensionMismatch {
                        block: what.into(),
                        expected: format!("{dim}x{dim}"),
                        found: format!("{}x{}", m.nrows(), m.ncols()),
                    });
                }
                Ok(m.clone())
            }
        }
    }
}

/// Filter/smoother configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EkfConfig {
    /// Forward-backward passes; one is enough for linear models, the
    /// nonlinear path benefits from around ten.
    pub n_epochs: usize,
    /// Process-noise covariance.
    pub q: Cov,
    /// Output-noise covariance.
    pub r: Cov,
    /// Initial covariance; `None` ties it to the x0 regularization weight
    /// as `1/(rho_x N) I`, falling back to `1e3 I` when `rho_x = 0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<Cov>,
    /// Initial mean; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0_init: Option<Vec<f64>>,
    /// Process noise of the random-walk output disturbance used by the
    /// p-step predictor.
    pub q_disturbance: f64,
    /// Initial variance of the output disturbance.
    pub p0_disturbance: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        EkfConfig {
            n_epochs: 1,
            q: Cov::Scaled(1e-8),
            r: Cov::Scaled(1.0),
            p0: None,
            x0_init: None,
            q_disturbance: 1e-4,
            p0_disturbance: 1.0,
        }
    }
}

impl EkfConfig {
    fn p0_matrix(&self, n_x: usize, n_samples: usize, rho_x: f64) -> Result<DMatrix<f64>> {
        match &self.p0 {
            Some(c) => c.materialize(n_x, "P0"),
            None => {
                let scale = if rho_x > 0.0 {
                    1.0 / (rho_x * n_samples as f64)
                } else {
                    1e3
                };
                Ok(DMatrix::identity(n_x, n_x) * scale)
            }
        }
    }
}

/// Per-step quantities of the final epoch, kept for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct SmootherTrace {
    pub filtered: Vec<DVector<f64>>,
    pub predicted: Vec<DVector<f64>>,
    pub p_filtered: Vec<DMatrix<f64>>,
    pub p_predicted: Vec<DMatrix<f64>>,
    pub smoothed: Vec<DVector<f64>>,
    pub p_smoothed: Vec<DMatrix<f64>>,
    /// Reconstructed initial state after each epoch.
    pub x0_per_epoch: Vec<DVector<f64>>,
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for r in 0..n {
        for c in (r + 1)..n {
            let v = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
}

/// Generic model interface the filter runs on; the augmented predictor
/// reuses the same recursion with an extended state.
trait FilterModel {
    fn dim_x(&self) -> usize;
    fn f(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn g(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn jac_f(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    fn jac_g(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
}

struct PlainModel<'a> {
    params: &'a ModelParams,
    spec: &'a ModelSpec,
    sat: &'a SaturationConfig,
}

impl FilterModel for PlainModel<'_> {
    fn dim_x(&self) -> usize {
        self.spec.n_x
    }
    fn f(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        step_state(self.params, self.spec, self.sat, x, u)
    }
    fn g(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        output_map(self.params, self.spec, x, u)
    }
    fn jac_f(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        state_jacobian(self.params, self.spec, self.sat, x, u)
    }
    fn jac_g(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        output_jacobian(self.params, self.spec, x, u)
    }
}

/// State augmented with a random-walk output disturbance `q`: the output
/// becomes `g(x, u) + q`.
struct AugmentedModel<'a> {
    inner: PlainModel<'a>,
}

impl FilterModel for AugmentedModel<'_> {
    fn dim_x(&self) -> usize {
        self.inner.spec.n_x + self.inner.spec.n_y
    }
    fn f(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let n_x = self.inner.spec.n_x;
        let xs = x.rows(0, n_x).into_owned();
        let next = self.inner.f(&xs, u);
        let mut out = x.clone();
        out.rows_mut(0, n_x).copy_from(&next);
        out
    }
    fn g(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let n_x = self.inner.spec.n_x;
        let xs = x.rows(0, n_x).into_owned();
        self.inner.g(&xs, u) + x.rows(n_x, self.inner.spec.n_y)
    }
    fn jac_f(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let n_x = self.inner.spec.n_x;
        let n_y = self.inner.spec.n_y;
        let xs = x.rows(0, n_x).into_owned();
        let jf = self.inner.jac_f(&xs, u);
        let mut out = DMatrix::identity(n_x + n_y, n_x + n_y);
        out.view_mut((0, 0), (n_x, n_x)).copy_from(&jf);
        out
    }
    fn jac_g(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let n_x = self.inner.spec.n_x;
        let n_y = self.inner.spec.n_y;
        let xs = x.rows(0, n_x).into_owned();
        let jg = self.inner.jac_g(&xs, u);
        let mut out = DMatrix::zeros(n_y, n_x + n_y);
        out.view_mut((0, 0), (n_y, n_x)).copy_from(&jg);
        out.view_mut((0, n_x), (n_y, n_y))
            .copy_from(&DMatrix::identity(n_y, n_y));
        out
    }
}

struct ForwardPass {
    filtered: Vec<DVector<f64>>,
    predicted: Vec<DVector<f64>>,
    p_filtered: Vec<DMatrix<f64>>,
    p_predicted: Vec<DMatrix<f64>>,
    jac_a: Vec<DMatrix<f64>>,
}

/// One forward EKF sweep over the data.
fn ekf_forward<M: FilterModel>(
    model: &M,
    u: &DMatrix<f64>,
    y: &DMatrix<f64>,
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<ForwardPass> {
    let n = u.nrows();
    let dim = model.dim_x();
    let mut filtered = Vec::with_capacity(n);
    let mut predicted = Vec::with_capacity(n);
    let mut p_filtered = Vec::with_capacity(n);
    let mut p_predicted = Vec::with_capacity(n);
    let mut jac_a = Vec::with_capacity(n);

    let mut x_pred = x0.clone();
    let mut p_pred = p0.clone();
    for k in 0..n {
        let uk = u.row(k).transpose();
        let yk = y.row(k).transpose();
        predicted.push(x_pred.clone());
        p_predicted.push(p_pred.clone());

        let c_k = model.jac_g(&x_pred, &uk);
        let z_k = &p_pred * c_k.transpose();
        let mut s = r + &c_k * &z_k;
        symmetrize(&mut s);
        let chol = s.clone().cholesky().ok_or(SysidError::SingularMatrix {
            what: "innovation covariance".into(),
            step: k,
        })?;
        // M = Z S^{-1}  via  S M' = Z'
        let m_gain = chol.solve(&z_k.transpose()).transpose();
        let innov = &yk - model.g(&x_pred, &uk);
        if innov.iter().any(|v| !v.is_finite()) {
            return Err(SysidError::NonFinite {
                what: "innovation".into(),
                step: k,
            });
        }
        let x_filt = &x_pred + &m_gain * innov;
        let mut p_filt = &p_pred - &m_gain * z_k.transpose();
        symmetrize(&mut p_filt);
        let a_k = model.jac_f(&x_filt, &uk);
        p_pred = &a_k * &p_filt * a_k.transpose() + q;
        symmetrize(&mut p_pred);
        x_pred = model.f(&x_filt, &uk);
        if x_pred.iter().any(|v| !v.is_finite()) {
            return Err(SysidError::NonFinite {
                what: "predicted state".into(),
                step: k + 1,
            });
        }
        filtered.push(x_filt);
        p_filtered.push(p_filt);
        jac_a.push(a_k);
        debug_assert_eq!(p_pred.nrows(), dim);
    }
    Ok(ForwardPass {
        filtered,
        predicted,
        p_filtered,
        p_predicted,
        jac_a,
    })
}

/// Backward RTS recursion; returns smoothed means and covariances for
/// every step, index 0 first.
type SmoothedPass = (Vec<DVector<f64>>, Vec<DMatrix<f64>>);

fn rts_backward(
    fwd: &ForwardPass,
    x_end: &DVector<f64>,
    p_end: &DMatrix<f64>,
) -> Result<SmoothedPass> {
    let n = fwd.filtered.len();
    let mut xs = vec![DVector::zeros(x_end.len()); n];
    let mut ps = vec![DMatrix::zeros(p_end.nrows(), p_end.ncols()); n];
    let mut x_next = x_end.clone();
    let mut p_next = p_end.clone();
    for k in (0..n).rev() {
        // Next-step predicted quantities: stored at k+1, or the final pair.
        let (x_pred_next, p_pred_next) = if k + 1 < n {
            (&fwd.predicted[k + 1], &fwd.p_predicted[k + 1])
        } else {
            (x_end, p_end)
        };
        let chol = p_pred_next
            .clone()
            .cholesky()
            .ok_or(SysidError::SingularMatrix {
                what: "predicted covariance".into(),
                step: k,
            })?;
        // G = P_filt A' P_pred^{-1}  via  P_pred X = A P_filt, G = X'
        let g_k = chol
            .solve(&(&fwd.jac_a[k] * &fwd.p_filtered[k]))
            .transpose();
        let x_s = &fwd.filtered[k] + &g_k * (&x_next - x_pred_next);
        let mut p_s = &fwd.p_filtered[k] + &g_k * (&p_next - p_pred_next) * g_k.transpose();
        symmetrize(&mut p_s);
        xs[k] = x_s.clone();
        ps[k] = p_s.clone();
        x_next = x_s;
        p_next = p_s;
    }
    Ok((xs, ps))
}

#[allow(clippy::too_many_arguments)]
fn run_epochs<M: FilterModel>(
    model: &M,
    u: &DMatrix<f64>,
    y: &DMatrix<f64>,
    x0_init: DVector<f64>,
    p0_init: DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    n_epochs: usize,
) -> Result<(DVector<f64>, SmootherTrace)> {
    let mut x0 = x0_init;
    let mut p0 = p0_init;
    let mut trace = None;
    let mut x0_per_epoch = Vec::with_capacity(n_epochs);
    for _ in 0..n_epochs {
        let fwd = ekf_forward(model, u, y, &x0, &p0, q, r)?;
        let n = u.nrows();
        // Final predicted pair closes the smoother recursion.
        let x_end = model.f(fwd.filtered.last().unwrap(), &u.row(n - 1).transpose());
        let p_end = fwd.p_predicted.last().map(|_| {
            let a = fwd.jac_a.last().unwrap();
            let mut p = a * fwd.p_filtered.last().unwrap() * a.transpose() + q;
            symmetrize(&mut p);
            p
        });
        let p_end = p_end.unwrap();
        let (smoothed, p_smoothed) = rts_backward(&fwd, &x_end, &p_end)?;
        x0 = smoothed[0].clone();
        p0 = p_smoothed[0].clone();
        x0_per_epoch.push(x0.clone());
        trace = Some(SmootherTrace {
            filtered: fwd.filtered,
            predicted: fwd.predicted,
            p_filtered: fwd.p_filtered,
            p_predicted: fwd.p_predicted,
            smoothed,
            p_smoothed,
            x0_per_epoch: Vec::new(),
        });
    }
    let mut trace = trace.expect("at least one epoch");
    trace.x0_per_epoch = x0_per_epoch;
    Ok((x0, trace))
}

/// Reconstruct the initial state of `(u, y)` under the given model by
/// `cfg.n_epochs` rounds of forward EKF and backward RTS smoothing; each
/// round restarts the filter from the previous smoothed estimate.
pub fn ekf_rts_reconstruct(
    params: &ModelParams,
    spec: &ModelSpec,
    sat: &SaturationConfig,
    u: &DMatrix<f64>,
    y: &DMatrix<f64>,
    cfg: &EkfConfig,
    rho_x: f64,
) -> Result<DVector<f64>> {
    Ok(ekf_rts_detailed(params, spec, sat, u, y, cfg, rho_x)?.0)
}

/// As [`ekf_rts_reconstruct`], also returning the per-step trace of the
/// final epoch.
#[allow(clippy::too_many_arguments)]
pub fn ekf_rts_detailed(
    params: &ModelParams,
    spec: &ModelSpec,
    sat: &SaturationConfig,
    u: &DMatrix<f64>,
    y: &DMatrix<f64>,
    cfg: &EkfConfig,
    rho_x: f64,
) -> Result<(DVector<f64>, SmootherTrace)> {
    if cfg.n_epochs < 1 {
        return Err(SysidError::InvalidConfig("n_epochs must be >= 1".into()));
    }
    let n = u.nrows();
    if n == 0 || y.nrows() != n {
        return Err(SysidError::InvalidConfig(
            "empty data or row mismatch".into(),
        ));
    }
    let model = PlainModel { params, spec, sat };
    let q = cfg.q.materialize(spec.n_x, "Q")?;
    let r = cfg.r.materialize(spec.n_y, "R")?;
    let p0 = cfg.p0_matrix(spec.n_x, n, rho_x)?;
    let x0 = match &cfg.x0_init {
        Some(v) => DVector::from_row_slice(v),
        None => DVector::zeros(spec.n_x),
    };
    run_epochs(&model, u, y, x0, p0, &q, &r, cfg.n_epochs)
}

/// Refine an initial-state estimate by locally minimizing
/// `rho_x/2 ||x0||^2 + (1/N) sum ||y - yhat||^2` over `x0` only.
#[allow(clippy::too_many_arguments)]
pub fn refine_x0(
    params: &ModelParams,
    spec: &ModelSpec,
    sat: &SaturationConfig,
    u: &DMatrix<f64>,
    y: &DMatrix<f64>,
    x0_init: &DVector<f64>,
    rho_x: f64,
    opts: &LbfgsbOptions,
) -> Result<DVector<f64>> {
    let obj = |x0: &DVector<f64>| x0_loss_and_grad(params, spec, sat, u, y, x0, rho_x);
    let lower = DVector::from_element(spec.n_x, f64::NEG_INFINITY);
    let upper = DVector::from_element(spec.n_x, f64::INFINITY);
    let res = lbfgsb_minimize(obj, x0_init, &lower, &upper, opts, None)?;
    Ok(res.x_opt)
}

/// Average R² of the `p`-step-ahead predictions for `p = 1..=horizon`.
///
/// The filter runs on the state augmented with a random-walk output
/// disturbance (`augment = true`, the default use) or on the plain state
/// for baseline comparisons. At every step the filtered state is
/// propagated `p` steps open-loop with the disturbance frozen.
#[allow(clippy::too_many_arguments)]
pub fn ekf_p_step_r2(
    params: &ModelParams,
    spec: &ModelSpec,
    sat: &SaturationConfig,
    u: &DMatrix<f64>,
    y: &DMatrix<f64>,
    horizon: usize,
    cfg: &EkfConfig,
    rho_x: f64,
    augment: bool,
) -> Result<Vec<f64>> {
    if horizon < 1 {
        return Err(SysidError::InvalidConfig("horizon must be >= 1".into()));
    }
    let n = u.nrows();
    if n <= horizon {
        return Err(SysidError::InvalidConfig(
            "horizon longer than the data".into(),
        ));
    }
    let plain = PlainModel { params, spec, sat };
    let n_x = spec.n_x;
    let n_y = spec.n_y;

    let filtered: Vec<DVector<f64>> = if augment {
        let model = AugmentedModel { inner: plain };
        let mut q = DMatrix::zeros(n_x + n_y, n_x + n_y);
        q.view_mut((0, 0), (n_x, n_x))
            .copy_from(&cfg.q.materialize(n_x, "Q")?);
        for i in 0..n_y {
            q[(n_x + i, n_x + i)] = cfg.q_disturbance;
        }
        let r = cfg.r.materialize(n_y, "R")?;
        let mut p0 = DMatrix::zeros(n_x + n_y, n_x + n_y);
        p0.view_mut((0, 0), (n_x, n_x))
            .copy_from(&cfg.p0_matrix(n_x, n, rho_x)?);
        for i in 0..n_y {
            p0[(n_x + i, n_x + i)] = cfg.p0_disturbance;
        }
        let x0 = DVector::zeros(n_x + n_y);
        ekf_forward(&model, u, y, &x0, &p0, &q, &r)?.filtered
    } else {
        let q = cfg.q.materialize(n_x, "Q")?;
        let r = cfg.r.materialize(n_y, "R")?;
        let p0 = cfg.p0_matrix(n_x, n, rho_x)?;
        let x0 = DVector::zeros(n_x);
        ekf_forward(&plain, u, y, &x0, &p0, &q, &r)?.filtered
    };

    let mut scores = Vec::with_capacity(horizon);
    for p in 1..=horizon {
        let rows = n - p;
        let mut y_true = DMatrix::zeros(rows, n_y);
        let mut y_pred = DMatrix::zeros(rows, n_y);
        #[allow(clippy::needless_range_loop)]
        for k in 0..rows {
            let mut x = filtered[k].rows(0, n_x).into_owned();
            let qhat = if augment {
                filtered[k].rows(n_x, n_y).into_owned()
            } else {
                DVector::zeros(n_y)
            };
            for j in 0..p {
                let uj = u.row(k + j).transpose();
                x = step_state(params, spec, sat, &x, &uj);
            }
            let u_t = u.row(k + p).transpose();
            let yhat = output_map(params, spec, &x, &u_t) + &qhat;
            y_pred.row_mut(k).copy_from(&yhat.transpose());
            y_true.row_mut(k).copy_from(&y.row(k + p));
        }
        scores.push(r2_average(&r2_scores(&y_true, &y_pred)?));
    }
    Ok(scores)
}

/// Spec-level entry point: the output-disturbance augmented predictor.
#[allow(clippy::too_many_arguments)]
pub fn ekf_output_disturbance_predict(
    params: &ModelParams,
    spec: &ModelSpec,
    sat: &SaturationConfig,
    u: &DMatrix<f64>,
    y: &DMatrix<f64>,
    horizon: usize,
    cfg: &EkfConfig,
    rho_x: f64,
) -> Result<Vec<f64>> {
    ekf_p_step_r2(params, spec, sat, u, y, horizon, cfg, rho_x, true)
}
