//! Condensed simulation-error loss and its exact gradient with respect to
//! the flat parameter vector, computed by reverse-mode differentiation
//! through the state recurrence.
//!
//! The forward sweep stores the state trajectory and simulated outputs;
//! the backward sweep recomputes the per-step network activations, so the
//! stored memory stays `O(N * n_x)` per experiment. Hard saturation is
//! differentiated with the clamp subgradient (zero where the state is
//! clamped), the soft mode analytically.

use nalgebra::{DMatrix, DVector};

use crate::datasets::Dataset;
use crate::error::{Result, SysidError};
use crate::model::{
    mlp_forward, simulate_from, stack_xu, Activation, Layer, ModelParams, ModelSpec, ParamLayout,
    SaturationConfig,
};

/// Loss value and gradient over the packed parameter vector.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub value: f64,
    pub grad: DVector<f64>,
}

struct MlpCache {
    /// Pre-activation of each layer.
    pre: Vec<DVector<f64>>,
    /// Post-activation of each layer (last layer: identical to `pre`).
    post: Vec<DVector<f64>>,
}

fn mlp_forward_cached(layers: &[Layer], act: Activation, input: &DVector<f64>) -> MlpCache {
    let mut pre = Vec::with_capacity(layers.len());
    let mut post = Vec::with_capacity(layers.len());
    let mut a = input.clone();
    for (l, layer) in layers.iter().enumerate() {
        let z = &layer.w * &a + &layer.b;
        a = if l + 1 < layers.len() {
            z.map(|v| act.apply(v))
        } else {
            z.clone()
        };
        pre.push(z);
        post.push(a.clone());
    }
    MlpCache { pre, post }
}

/// Backpropagate `upstream` through the network; accumulates layer
/// gradients into `grads` and returns the gradient w.r.t. the input.
fn mlp_backward(
    layers: &[Layer],
    act: Activation,
    input: &DVector<f64>,
    cache: &MlpCache,
    upstream: &DVector<f64>,
    grads: &mut [Layer],
) -> DVector<f64> {
    let ell = layers.len();
    let mut delta = upstream.clone();
    for l in (0..ell).rev() {
        let a_prev = if l == 0 { input } else { &cache.post[l - 1] };
        grads[l].w += &delta * a_prev.transpose();
        grads[l].b += &delta;
        let mut back = layers[l].w.transpose() * &delta;
        if l > 0 {
            let z = &cache.pre[l - 1];
            for i in 0..back.len() {
                back[i] *= act.deriv(z[i]);
            }
        }
        delta = back;
    }
    delta
}

/// Jacobian of the network output with respect to its input.
fn mlp_input_jacobian(layers: &[Layer], act: Activation, input: &DVector<f64>) -> DMatrix<f64> {
    let cache = mlp_forward_cached(layers, act, input);
    let mut jac = layers[0].w.clone();
    for (l, layer) in layers.iter().enumerate().skip(1) {
        let z = &cache.pre[l - 1];
        let mut scaled = jac;
        for r in 0..scaled.nrows() {
            let d = act.deriv(z[r]);
            for c in 0..scaled.ncols() {
                scaled[(r, c)] *= d;
            }
        }
        jac = &layer.w * scaled;
    }
    jac
}

/// Jacobian of the saturated state update with respect to the state,
/// `diag(sat'(s)) * (A + d f_x / d x)` evaluated at `(x, u)`.
pub fn state_jacobian(
    params: &ModelParams,
    spec: &ModelSpec,
    sat: &SaturationConfig,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> DMatrix<f64> {
    let mut jac = params.a.clone();
    let mut s = &params.a * x + &params.b * u;
    if !params.theta_x.is_empty() {
        let input = stack_xu(x, u);
        s += mlp_forward(&params.theta_x, spec.activation, &input);
        let full = mlp_input_jacobian(&params.theta_x, spec.activation, &input);
        jac += full.columns(0, spec.n_x);
    }
    for r in 0..spec.n_x {
        let d = sat.deriv_at(s[r], r);
        for c in 0..spec.n_x {
            jac[(r, c)] *= d;
        }
    }
    jac
}

/// Jacobian of the output map with respect to the state,
/// `C + d f_y / d x` evaluated at `(x, u)`.
pub fn output_jacobian(
    params: &ModelParams,
    spec: &ModelSpec,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> DMatrix<f64> {
    let mut jac = params.c.clone();
    if !params.theta_y.is_empty() {
        let input = if spec.feedthrough { stack_xu(x, u) } else { x.clone() };
        let full = mlp_input_jacobian(&params.theta_y, spec.activation, &input);
        jac += full.columns(0, spec.n_x);
    }
    jac
}

struct FullGrads {
    x0: Vec<DVector<f64>>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    theta_x: Vec<Layer>,
    theta_y: Vec<Layer>,
}

impl FullGrads {
    fn zeros(spec: &ModelSpec, n_experiments: usize) -> Self {
        let p = ModelParams::zeros(spec, n_experiments);
        FullGrads {
            x0: p.x0_list,
            a: p.a,
            b: p.b,
            c: p.c,
            d: p.d,
            theta_x: p.theta_x,
            theta_y: p.theta_y,
        }
    }
}

/// Condensed loss over all experiments and its exact gradient.
///
/// The loss is the squared simulation error summed over every experiment
/// and step, divided by the total sample count.
pub fn loss_and_grad(
    v: &DVector<f64>,
    layout: &ParamLayout,
    data: &Dataset,
    sat: &SaturationConfig,
) -> Result<LossGradient> {
    let spec = layout.spec();
    if data.experiments.len() != layout.n_experiments() {
        return Err(SysidError::DimensionMismatch {
            block: "experiments".into(),
            expected: format!("{}", layout.n_experiments()),
            found: format!("{}", data.experiments.len()),
        });
    }
    let params = layout.unpack(v)?;
    let n_total: usize = data.experiments.iter().map(|e| e.len()).sum();
    if n_total == 0 {
        return Ok(LossGradient {
            value: 0.0,
            grad: DVector::zeros(layout.len()),
        });
    }
    let mut grads = FullGrads::zeros(spec, layout.n_experiments());
    let mut sse = 0.0;
    let w_scale = 2.0 / n_total as f64;

    for (j, exp) in data.experiments.iter().enumerate() {
        let x0 = if layout.x0_free() {
            params.x0_list[j].clone()
        } else {
            DVector::zeros(spec.n_x)
        };
        let (states, outputs) = simulate_from(&params, spec, &x0, &exp.u, sat)?;
        let n = exp.len();
        for k in 0..n {
            for c in 0..spec.n_y {
                let e = outputs[(k, c)] - exp.y[(k, c)];
                sse += e * e;
            }
        }

        // Backward sweep: lambda carries dL/dx_{k+1}.
        let mut lambda = DVector::zeros(spec.n_x);
        for k in (0..n).rev() {
            let x_k = states.row(k).transpose();
            let u_k = exp.u.row(k).transpose();
            let w_k = (outputs.row(k) - exp.y.row(k)).transpose() * w_scale;

            let mut lam_k = params.c.transpose() * &w_k;
            grads.c += &w_k * x_k.transpose();
            if spec.feedthrough {
                grads.d += &w_k * u_k.transpose();
            }
            if !params.theta_y.is_empty() {
                let input = if spec.feedthrough {
                    stack_xu(&x_k, &u_k)
                } else {
                    x_k.clone()
                };
                let cache = mlp_forward_cached(&params.theta_y, spec.activation, &input);
                let in_grad = mlp_backward(
                    &params.theta_y,
                    spec.activation,
                    &input,
                    &cache,
                    &w_k,
                    &mut grads.theta_y,
                );
                lam_k += in_grad.rows(0, spec.n_x);
            }

            if k + 1 < n {
                let mut s = &params.a * &x_k + &params.b * &u_k;
                let fx_input = stack_xu(&x_k, &u_k);
                let fx_cache = if params.theta_x.is_empty() {
                    None
                } else {
                    let cache = mlp_forward_cached(&params.theta_x, spec.activation, &fx_input);
                    s += &cache.post[cache.post.len() - 1];
                    Some(cache)
                };
                let mut delta = lambda.clone();
                for i in 0..spec.n_x {
                    delta[i] *= sat.deriv_at(s[i], i);
                }
                grads.a += &delta * x_k.transpose();
                grads.b += &delta * u_k.transpose();
                lam_k += params.a.transpose() * &delta;
                if let Some(cache) = fx_cache {
                    let in_grad = mlp_backward(
                        &params.theta_x,
                        spec.activation,
                        &fx_input,
                        &cache,
                        &delta,
                        &mut grads.theta_x,
                    );
                    lam_k += in_grad.rows(0, spec.n_x);
                }
            }
            lambda = lam_k;
        }
        grads.x0[j] = lambda;
    }

    let grad_params = ModelParams {
        x0_list: grads.x0,
        a: grads.a,
        b: grads.b,
        c: grads.c,
        d: grads.d,
        theta_x: grads.theta_x,
        theta_y: grads.theta_y,
    };
    let grad = layout.pack(&grad_params)?;
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(SysidError::NonFinite {
            what: "gradient".into(),
            step: 0,
        });
    }
    Ok(LossGradient {
        value: sse / n_total as f64,
        grad,
    })
}

/// Value and gradient of the validation objective
/// `rho_x/2 ||x0||^2 + (1/N) sum_k ||y_k - yhat_k||^2` with respect to the
/// initial state only, all model parameters frozen.
pub fn x0_loss_and_grad(
    params: &ModelParams,
    spec: &ModelSpec,
    sat: &SaturationConfig,
    u: &DMatrix<f64>,
    y: &DMatrix<f64>,
    x0: &DVector<f64>,
    rho_x: f64,
) -> Result<(f64, DVector<f64>)> {
    let (states, outputs) = simulate_from(params, spec, x0, u, sat)?;
    let n = u.nrows();
    let mut sse = 0.0;
    for k in 0..n {
        for c in 0..spec.n_y {
            let e = outputs[(k, c)] - y[(k, c)];
            sse += e * e;
        }
    }
    let w_scale = 2.0 / n as f64;
    let mut lambda = DVector::zeros(spec.n_x);
    for k in (0..n).rev() {
        let x_k = states.row(k).transpose();
        let u_k = u.row(k).transpose();
        let w_k = (outputs.row(k) - y.row(k)).transpose() * w_scale;
        let mut lam_k = output_jacobian(params, spec, &x_k, &u_k).transpose() * &w_k;
        if k + 1 < n {
            lam_k += state_jacobian(params, spec, sat, &x_k, &u_k).transpose() * &lambda;
        }
        lambda = lam_k;
    }
    let value = sse / n as f64 + 0.5 * rho_x * x0.norm_squared();
    let grad = lambda + rho_x * x0;
    Ok((value, grad))
}
