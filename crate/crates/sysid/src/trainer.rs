//! End-to-end training: scaling, random initialization, optional
//! presampling, multi-start Adam warm-up, split construction, quasi-Newton
//! refinement, model selection and sparsity/order post-processing.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Result, SysidError};
use crate::estimation::{ekf_rts_reconstruct, refine_x0, EkfConfig};
use crate::gradient::loss_and_grad;
use crate::model::{
    simulate_from, ModelParams, ModelSpec, ParamLayout, SaturationConfig,
};
use crate::objectives::{
    build_groups, r2_average, r2_scores, regularizer_subgrad, regularizer_value, GroupIndexSet,
    GroupKind, RegularizationConfig, Scaling,
};
use crate::optim::{
    adam_minimize, lbfgsb_minimize, AdamOptions, LbfgsbOptions, SolveStatus,
};
use crate::split::{build_elastic_net_split, build_group_lasso_split, RegIndexSets, EPS_FLOOR};

/// How the per-experiment initial states are treated during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum X0Mode {
    #[default]
    FreePerExperiment,
    FixedZero,
}

/// Rule for picking the best start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Highest average training R².
    #[default]
    TrainR2,
    /// Lowest penalized objective.
    Loss,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_starts: usize,
    pub seed: u64,
    pub adam: AdamOptions,
    pub lbfgsb: LbfgsbOptions,
    pub reg: RegularizationConfig,
    pub sat: SaturationConfig,
    /// `A` starts at this multiple of the identity.
    pub init_a_scale: f64,
    /// Remaining coefficients start as zero-mean Gaussians with this std.
    pub init_std: f64,
    pub x0_mode: X0Mode,
    /// Coefficients below this magnitude count as zero.
    pub zero_threshold: f64,
    pub selection: Selection,
    /// Candidates drawn per start before any optimization; the lowest-loss
    /// one seeds the run. `1` disables presampling.
    pub presample: usize,
    /// Standard-scale the data before fitting unless already scaled.
    pub scale_data: bool,
    /// Fixed initial point for start 0, replacing the random draw.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_override: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_starts: 1,
            seed: 0,
            adam: AdamOptions::default(),
            lbfgsb: LbfgsbOptions::default(),
            reg: RegularizationConfig::default(),
            sat: SaturationConfig::default(),
            init_a_scale: 0.5,
            init_std: 0.1,
            x0_mode: X0Mode::FreePerExperiment,
            zero_threshold: 1e-6,
            selection: Selection::TrainR2,
            presample: 1,
            scale_data: true,
            init_override: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_starts < 1 {
            return Err(SysidError::InvalidConfig("n_starts must be >= 1".into()));
        }
        if self.zero_threshold <= 0.0 {
            return Err(SysidError::InvalidConfig(
                "zero_threshold must be > 0".into(),
            ));
        }
        if self.presample < 1 {
            return Err(SysidError::InvalidConfig("presample must be >= 1".into()));
        }
        self.adam.validate()?;
        self.lbfgsb.validate()?;
        self.reg.validate()?;
        self.sat.validate()?;
        Ok(())
    }
}

/// Outcome of a single start.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartSummary {
    pub start: usize,
    pub seed: u64,
    pub presample_loss: Option<f64>,
    pub adam_loss: Option<f64>,
    /// Penalized objective after refinement.
    pub final_objective: f64,
    pub mse: f64,
    pub r2_per_output: Vec<f64>,
    pub r2_avg: f64,
    pub solver_status: Option<SolveStatus>,
    pub fun_evals: usize,
    pub complementarity: Option<f64>,
    pub diverged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Recovered flat parameter vector (absent for diverged starts).
    #[serde(skip)]
    pub packed: Option<DVector<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    pub total_s: f64,
    pub per_start_s: Vec<f64>,
}

/// Result of [`fit`]: the selected model plus per-start diagnostics.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub best_params: ModelParams,
    pub best_start: usize,
    pub r2_train: Vec<f64>,
    pub r2_train_avg: f64,
    /// Penalized objective of the selected start.
    pub final_loss: f64,
    pub mse: f64,
    /// Zero count over the network parameters.
    pub sparsity_zeros: usize,
    pub sparsity_total: usize,
    /// State groups whose slice infinity-norm exceeds the zero threshold.
    pub effective_order: usize,
    /// Input groups whose slice infinity-norm exceeds the zero threshold.
    pub active_inputs: usize,
    pub starts: Vec<StartSummary>,
    pub scaling: Option<Scaling>,
    /// Saturation is applied during evaluation as well as training.
    pub saturation_in_eval: bool,
    pub timings: Timings,
}

/// Training phase reported to progress callbacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Presample,
    Adam,
    Lbfgsb,
}

#[derive(Debug, Clone, Copy)]
pub struct ProgressEvent {
    pub start: usize,
    pub phase: Phase,
    pub iter: usize,
    pub f: f64,
}

pub type ProgressCallback<'a> = dyn Fn(ProgressEvent) + Sync + 'a;

/// Draw initial parameters: `A = init_a_scale I`, everything else Gaussian
/// with std `init_std`, initial states zero.
fn draw_initial(
    layout: &ParamLayout,
    rng: &mut ChaCha8Rng,
    init_a_scale: f64,
    init_std: f64,
) -> Result<DVector<f64>> {
    let spec = layout.spec();
    let normal = Normal::new(0.0, init_std).map_err(|e| {
        SysidError::InvalidConfig(format!("bad init_std: {e}"))
    })?;
    let mut params = ModelParams::zeros(spec, layout.n_experiments());
    for i in 0..spec.n_x {
        params.a[(i, i)] = init_a_scale;
    }
    fn fill(m: &mut DMatrix<f64>, normal: &Normal<f64>, rng: &mut ChaCha8Rng) {
        for v in m.iter_mut() {
            *v = normal.sample(rng);
        }
    }
    fill(&mut params.b, &normal, rng);
    fill(&mut params.c, &normal, rng);
    if spec.feedthrough {
        fill(&mut params.d, &normal, rng);
    }
    for layer in params.theta_x.iter_mut().chain(params.theta_y.iter_mut()) {
        fill(&mut layer.w, &normal, rng);
        for v in layer.b.iter_mut() {
            *v = normal.sample(rng);
        }
    }
    layout.pack(&params)
}

/// Draw `n_samples` candidate parameter vectors from one rng stream and
/// return the one with the lowest condensed loss, with that loss.
pub fn multi_start_presample(
    layout: &ParamLayout,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    n_samples: usize,
) -> Result<(DVector<f64>, f64)> {
    if n_samples < 1 {
        return Err(SysidError::InvalidConfig("n_samples must be >= 1".into()));
    }
    let mut best: Option<(DVector<f64>, f64)> = None;
    for _ in 0..n_samples {
        let v = draw_initial(layout, rng, cfg.init_a_scale, cfg.init_std)?;
        let f = match loss_and_grad(&v, layout, data, &cfg.sat) {
            Ok(lg) if lg.value.is_finite() => lg.value,
            _ => continue,
        };
        if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
            best = Some((v, f));
        }
    }
    best.ok_or_else(|| SysidError::Diverged("all presampled candidates non-finite".into()))
}

struct Prepared {
    layout: ParamLayout,
    groups: Option<GroupIndexSet>,
    theta_idx: Vec<usize>,
    x0_idx: Vec<usize>,
}

fn prepare(spec: &ModelSpec, data: &Dataset, cfg: &TrainConfig) -> Result<Prepared> {
    let layout = ParamLayout::new(
        spec,
        data.experiments.len(),
        cfg.x0_mode == X0Mode::FreePerExperiment,
    )?;
    let groups = match cfg.reg.group_kind {
        GroupKind::None => None,
        kind => Some(build_groups(&layout, kind)?),
    };
    Ok(Prepared {
        theta_idx: layout.theta_indices(),
        x0_idx: layout.x0_indices(),
        layout,
        groups,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_start(
    start: usize,
    start_seed: u64,
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    prep: &Prepared,
    progress: Option<&ProgressCallback<'_>>,
) -> StartSummary {
    let mut summary = StartSummary {
        start,
        seed: start_seed,
        presample_loss: None,
        adam_loss: None,
        final_objective: f64::INFINITY,
        mse: f64::INFINITY,
        r2_per_output: Vec::new(),
        r2_avg: f64::NEG_INFINITY,
        solver_status: None,
        fun_evals: 0,
        complementarity: None,
        diverged: false,
        error: None,
        packed: None,
    };
    let result = (|| -> Result<()> {
        let layout = &prep.layout;
        let mut rng = ChaCha8Rng::seed_from_u64(start_seed);

        let mut v = if let (0, Some(init)) = (start, cfg.init_override.as_ref()) {
            if init.len() != layout.len() {
                return Err(SysidError::DimensionMismatch {
                    block: "init_override".into(),
                    expected: format!("{}", layout.len()),
                    found: format!("{}", init.len()),
                });
            }
            DVector::from_row_slice(init)
        } else if cfg.presample > 1 {
            let (v, f) = multi_start_presample(layout, data, cfg, &mut rng, cfg.presample)?;
            summary.presample_loss = Some(f);
            if let Some(cb) = progress {
                cb(ProgressEvent {
                    start,
                    phase: Phase::Presample,
                    iter: cfg.presample,
                    f,
                });
            }
            v
        } else {
            // The solvers require a finite objective at the starting
            // point; redraw on the rare non-finite initialization.
            let mut v = draw_initial(layout, &mut rng, cfg.init_a_scale, cfg.init_std)?;
            let mut attempts = 0;
            while !loss_and_grad(&v, layout, data, &cfg.sat)
                .map(|lg| lg.value.is_finite())
                .unwrap_or(false)
            {
                attempts += 1;
                if attempts > 20 {
                    return Err(SysidError::Diverged(
                        "initialization produced non-finite losses 20 times".into(),
                    ));
                }
                v = draw_initial(layout, &mut rng, cfg.init_a_scale, cfg.init_std)?;
            }
            v
        };

        // Warm start on the unsplit vector: the non-smooth terms are
        // evaluated exactly with subgradients.
        if cfg.adam.iters > 0 {
            let obj = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
                let lg = loss_and_grad(x, layout, data, &cfg.sat)?;
                let r = regularizer_value(
                    x,
                    &cfg.reg,
                    prep.groups.as_ref(),
                    &prep.theta_idx,
                    &prep.x0_idx,
                );
                let rg = regularizer_subgrad(
                    x,
                    &cfg.reg,
                    prep.groups.as_ref(),
                    &prep.theta_idx,
                    &prep.x0_idx,
                );
                Ok((lg.value + r, lg.grad + rg))
            };
            let lower = DVector::from_element(layout.len(), f64::NEG_INFINITY);
            let upper = DVector::from_element(layout.len(), f64::INFINITY);
            let mut log_cb = progress.map(|cb| {
                move |rec: crate::optim::IterationLog| {
                    cb(ProgressEvent {
                        start,
                        phase: Phase::Adam,
                        iter: rec.iter,
                        f: rec.f,
                    })
                }
            });
            let res = adam_minimize(
                obj,
                &v,
                &lower,
                &upper,
                &cfg.adam,
                log_cb
                    .as_mut()
                    .map(|f| f as &mut dyn FnMut(crate::optim::IterationLog)),
            )?;
            summary.adam_loss = Some(res.f_opt);
            summary.fun_evals += res.n_fun_evals;
            v = res.x_opt;
        }

        // Quasi-Newton refinement, on the split problem when any
        // non-smooth term is active.
        let mut log_cb = progress.map(|cb| {
            move |rec: crate::optim::IterationLog| {
                cb(ProgressEvent {
                    start,
                    phase: Phase::Lbfgsb,
                    iter: rec.iter,
                    f: rec.f,
                })
            }
        });
        let log_arg = log_cb
            .as_mut()
            .map(|f| f as &mut dyn FnMut(crate::optim::IterationLog));

        if cfg.reg.needs_split() {
            let idx = RegIndexSets {
                theta: prep.theta_idx.clone(),
                x0: prep.x0_idx.clone(),
            };
            let f = |x: &DVector<f64>| {
                let lg = loss_and_grad(x, layout, data, &cfg.sat)?;
                Ok((lg.value, lg.grad))
            };
            // The l1 term covers the model parameters only, but state
            // groups reach the initial states too, so those coordinates
            // join the split set whenever they appear in a group.
            let mut split_idx = prep.theta_idx.clone();
            if let Some(gs) = prep.groups.as_ref() {
                if cfg.reg.tau_g > 0.0 {
                    split_idx.extend(gs.all_indices());
                    split_idx.sort_unstable();
                    split_idx.dedup();
                }
            }
            let problem = if cfg.reg.tau_g > 0.0 {
                build_group_lasso_split(
                    f,
                    layout.len(),
                    &cfg.reg,
                    prep.groups.as_ref().expect("groups built for tau_g > 0"),
                    idx,
                    &split_idx,
                )?
            } else {
                build_elastic_net_split(f, layout.len(), &cfg.reg, idx, &split_idx)?
            };
            let floor = if cfg.reg.tau_g > 0.0 { EPS_FLOOR } else { 0.0 };
            let v0 = problem.map.expand(&v, floor);
            let res = lbfgsb_minimize(
                |w| problem.eval(w),
                &v0,
                &problem.bounds.lower,
                &problem.bounds.upper,
                &cfg.lbfgsb,
                log_arg,
            )?;
            summary.fun_evals += res.n_fun_evals;
            summary.solver_status = Some(res.status);
            summary.complementarity = Some(problem.map.complementarity(&res.x_opt));
            v = problem.recover(&res.x_opt);
        } else {
            let obj = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
                let lg = loss_and_grad(x, layout, data, &cfg.sat)?;
                let r = regularizer_value(x, &cfg.reg, None, &prep.theta_idx, &prep.x0_idx);
                let rg = regularizer_subgrad(x, &cfg.reg, None, &prep.theta_idx, &prep.x0_idx);
                Ok((lg.value + r, lg.grad + rg))
            };
            let lower = DVector::from_element(layout.len(), f64::NEG_INFINITY);
            let upper = DVector::from_element(layout.len(), f64::INFINITY);
            let res = lbfgsb_minimize(obj, &v, &lower, &upper, &cfg.lbfgsb, log_arg)?;
            summary.fun_evals += res.n_fun_evals;
            summary.solver_status = Some(res.status);
            v = res.x_opt;
        }

        // Score the recovered model.
        let lg = loss_and_grad(&v, layout, data, &cfg.sat)?;
        summary.mse = lg.value;
        summary.final_objective = lg.value
            + regularizer_value(
                &v,
                &cfg.reg,
                prep.groups.as_ref(),
                &prep.theta_idx,
                &prep.x0_idx,
            );
        let params = layout.unpack(&v)?;
        let (y_true, y_pred) = stack_outputs(&params, spec, data, &cfg.sat, layout.x0_free())?;
        summary.r2_per_output = r2_scores(&y_true, &y_pred)?;
        summary.r2_avg = r2_average(&summary.r2_per_output);
        summary.packed = Some(v);
        Ok(())
    })();
    if let Err(e) = result {
        summary.diverged = true;
        summary.error = Some(e.to_string());
    }
    summary.fun_evals = summary.fun_evals.max(1);
    summary
}

/// Simulate every experiment and stack true/predicted outputs row-wise.
fn stack_outputs(
    params: &ModelParams,
    spec: &ModelSpec,
    data: &Dataset,
    sat: &SaturationConfig,
    x0_free: bool,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let total: usize = data.experiments.iter().map(|e| e.len()).sum();
    let mut y_true = DMatrix::zeros(total, spec.n_y);
    let mut y_pred = DMatrix::zeros(total, spec.n_y);
    let mut row = 0;
    for (j, exp) in data.experiments.iter().enumerate() {
        let x0 = if x0_free {
            params.x0_list[j].clone()
        } else {
            DVector::zeros(spec.n_x)
        };
        let (_, yhat) = simulate_from(params, spec, &x0, &exp.u, sat)?;
        y_true.view_mut((row, 0), (exp.len(), spec.n_y)).copy_from(&exp.y);
        y_pred
            .view_mut((row, 0), (exp.len(), spec.n_y))
            .copy_from(&yhat);
        row += exp.len();
    }
    Ok((y_true, y_pred))
}

fn group_slice_inf_norm(v: &DVector<f64>, group: &[usize]) -> f64 {
    group.iter().map(|&i| v[i].abs()).fold(0.0, f64::max)
}

/// Fit a model to the dataset.
///
/// Runs `cfg.n_starts` independent starts (concurrently; aggregation is
/// deterministic in start order), each drawing initial parameters, warm
/// starting with Adam on the subgradient objective, then refining with the
/// bound-constrained quasi-Newton solver on the split problem whenever a
/// non-smooth penalty is active. The best start is selected by training R²
/// (or lowest penalized loss, per `cfg.selection`).
pub fn fit(spec: &ModelSpec, data: &Dataset, cfg: &TrainConfig) -> Result<FitReport> {
    fit_with_progress(spec, data, cfg, None)
}

pub fn fit_with_progress(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    progress: Option<&ProgressCallback<'_>>,
) -> Result<FitReport> {
    cfg.validate()?;
    spec.validate()?;
    if spec.n_u != data.n_u() || spec.n_y != data.n_y() {
        return Err(SysidError::DimensionMismatch {
            block: "data channels".into(),
            expected: format!("{} inputs / {} outputs", spec.n_u, spec.n_y),
            found: format!("{} / {}", data.n_u(), data.n_y()),
        });
    }
    let t_total = std::time::Instant::now();

    let scaled;
    let (data, scaling) = if data.scaling.is_some() || !cfg.scale_data {
        (data, data.scaling.clone())
    } else {
        let sc = Scaling::fit(data)?;
        scaled = sc.apply(data)?;
        (&scaled, Some(sc))
    };

    let prep = prepare(spec, data, cfg)?;

    // Independent per-start seeds from one master stream.
    let mut seed_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds: Vec<u64> = (0..cfg.n_starts).map(|_| seed_rng.random()).collect();

    let mut start_times = vec![0.0f64; cfg.n_starts];
    let starts: Vec<StartSummary> = seeds
        .par_iter()
        .enumerate()
        .map(|(s, &seed)| {
            let t = std::time::Instant::now();
            let summary = run_start(s, seed, spec, data, cfg, &prep, progress);
            (summary, t.elapsed().as_secs_f64())
        })
        .collect::<Vec<_>>()
        .into_iter()
        .enumerate()
        .map(|(s, (summary, dt))| {
            start_times[s] = dt;
            summary
        })
        .collect();

    let viable: Vec<&StartSummary> = starts.iter().filter(|s| !s.diverged).collect();
    if viable.is_empty() {
        let diagnostics = starts
            .iter()
            .map(|s| format!("start {}: {}", s.start, s.error.as_deref().unwrap_or("?")))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(SysidError::AllStartsDiverged {
            n_starts: cfg.n_starts,
            diagnostics,
        });
    }
    let best = match cfg.selection {
        Selection::TrainR2 => viable
            .iter()
            .max_by(|a, b| a.r2_avg.total_cmp(&b.r2_avg))
            .unwrap(),
        Selection::Loss => viable
            .iter()
            .min_by(|a, b| a.final_objective.total_cmp(&b.final_objective))
            .unwrap(),
    };
    let best_start = best.start;
    let v_best = best.packed.as_ref().expect("viable start has parameters");
    let best_params = prep.layout.unpack(v_best)?;

    // Sparsity over the network parameters.
    let net_idx = prep.layout.network_indices();
    let sparsity_zeros = net_idx
        .iter()
        .filter(|&&i| v_best[i].abs() < cfg.zero_threshold)
        .count();

    // Effective order / active inputs from group slice norms.
    let state_groups = build_groups(&prep.layout, GroupKind::StateGroups)?;
    let effective_order = state_groups
        .groups
        .iter()
        .filter(|g| group_slice_inf_norm(v_best, g) > cfg.zero_threshold)
        .count();
    let active_inputs = if spec.n_u > 0 {
        let input_groups = build_groups(&prep.layout, GroupKind::InputGroups)?;
        input_groups
            .groups
            .iter()
            .filter(|g| group_slice_inf_norm(v_best, g) > cfg.zero_threshold)
            .count()
    } else {
        0
    };

    Ok(FitReport {
        r2_train: best.r2_per_output.clone(),
        r2_train_avg: best.r2_avg,
        final_loss: best.final_objective,
        mse: best.mse,
        best_start,
        best_params,
        sparsity_zeros,
        sparsity_total: net_idx.len(),
        effective_order,
        active_inputs,
        starts,
        scaling,
        saturation_in_eval: true,
        timings: Timings {
            total_s: t_total.elapsed().as_secs_f64(),
            per_start_s: start_times,
        },
    })
}

/// Initial-state policy for evaluation on a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum X0Policy {
    /// Use the fitted per-experiment initial states (training data only).
    #[default]
    FromFit,
    /// Reconstruct by multi-epoch EKF + RTS smoothing.
    EkfRts,
    /// Reconstruct, then refine by a local solve over the initial state.
    Refine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub r2_per_output: Vec<f64>,
    pub r2_avg: f64,
    pub mse: f64,
    pub x0_used: Vec<Vec<f64>>,
}

/// Open-loop evaluation of a fitted model on (already scaled) data.
pub fn evaluate(
    params: &ModelParams,
    spec: &ModelSpec,
    sat: &SaturationConfig,
    data: &Dataset,
    policy: X0Policy,
    ekf: &EkfConfig,
    rho_x: f64,
) -> Result<EvalReport> {
    let total: usize = data.experiments.iter().map(|e| e.len()).sum();
    let mut y_true = DMatrix::zeros(total, spec.n_y);
    let mut y_pred = DMatrix::zeros(total, spec.n_y);
    let mut x0_used = Vec::with_capacity(data.experiments.len());
    let mut row = 0;
    for (j, exp) in data.experiments.iter().enumerate() {
        let x0 = match policy {
            X0Policy::FromFit => {
                params
                    .x0_list
                    .get(j)
                    .cloned()
                    .ok_or_else(|| SysidError::InvalidConfig(format!(
                        "no fitted initial state for experiment {j}"
                    )))?
            }
            X0Policy::EkfRts => {
                ekf_rts_reconstruct(params, spec, sat, &exp.u, &exp.y, ekf, rho_x)?
            }
            X0Policy::Refine => {
                let x0 = ekf_rts_reconstruct(params, spec, sat, &exp.u, &exp.y, ekf, rho_x)?;
                refine_x0(
                    params,
                    spec,
                    sat,
                    &exp.u,
                    &exp.y,
                    &x0,
                    rho_x,
                    &LbfgsbOptions::default(),
                )?
            }
        };
        let (_, yhat) = simulate_from(params, spec, &x0, &exp.u, sat)?;
        y_true.view_mut((row, 0), (exp.len(), spec.n_y)).copy_from(&exp.y);
        y_pred
            .view_mut((row, 0), (exp.len(), spec.n_y))
            .copy_from(&yhat);
        row += exp.len();
        x0_used.push(x0.iter().copied().collect());
    }
    let r2_per_output = r2_scores(&y_true, &y_pred)?;
    let mse = crate::objectives::mse_loss(&y_true, &y_pred)?;
    Ok(EvalReport {
        r2_avg: r2_average(&r2_per_output),
        r2_per_output,
        mse,
        x0_used,
    })
}
