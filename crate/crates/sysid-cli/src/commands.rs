//! Subcommand implementations.

use std::path::Path;

use sysid::{
    ekf_output_disturbance_predict, evaluate, export_csv, fit_with_progress, gen_causal,
    gen_input_selection, gen_order_reduction, load_csv, load_sidecar, Dataset, EkfConfig,
    FitReport, GroupKind, ModelSpec, Phase, ProgressEvent, SavedModel, TrainConfig, X0Policy,
};

use crate::config::RunConfig;
use crate::report::{EvalReportFile, FitReportFile};
use crate::util::{read_to_string, write_atomic, CmdResult, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GenerateKind {
    OrderReduction,
    InputSelection,
    Causal,
}

pub fn cmd_generate(
    kind: GenerateKind,
    seed: u64,
    out: &Path,
    n: Option<usize>,
    noise_std: Option<f64>,
) -> CmdResult {
    let ds = match kind {
        GenerateKind::OrderReduction => {
            gen_order_reduction(seed, n.unwrap_or(2000), noise_std.unwrap_or(0.01)).0
        }
        GenerateKind::InputSelection => {
            gen_input_selection(seed, n.unwrap_or(10_000), noise_std.unwrap_or(0.01)).0
        }
        GenerateKind::Causal => gen_causal(seed, n.unwrap_or(1000), noise_std.unwrap_or(0.05)).0,
    };
    export_csv(&ds, out)?;
    println!(
        "wrote {} ({} rows, {} input / {} output channels)",
        out.display(),
        ds.n_samples(),
        ds.n_u(),
        ds.n_y()
    );
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = read_to_string(path)?;
    RunConfig::parse(&text).map_err(Failure::usage)
}

fn load_data(config: &RunConfig, data_path: &Path) -> Result<Dataset, Failure> {
    let spec = &config.model;
    if let Some(sidecar) = load_sidecar(data_path)? {
        if sidecar.n_u != spec.n_u || sidecar.n_y != spec.n_y {
            return Err(Failure::usage(format!(
                "data sidecar says {} inputs / {} outputs but the config model has {} / {}",
                sidecar.n_u, sidecar.n_y, spec.n_u, spec.n_y
            )));
        }
    }
    Ok(load_csv(data_path, spec.n_u, spec.n_y, &config.data.boundaries)?)
}

fn verbose_progress(ev: ProgressEvent) {
    let phase = match ev.phase {
        Phase::Presample => "presample",
        Phase::Adam => "adam",
        Phase::Lbfgsb => "lbfgsb",
    };
    if ev.iter.is_multiple_of(100) || ev.phase == Phase::Presample {
        eprintln!("start {:>2} {:<9} iter {:>5} f {:.6e}", ev.start, phase, ev.iter, ev.f);
    }
}

fn run_fit(
    config: &RunConfig,
    data: &Dataset,
    verbose: bool,
) -> Result<(ModelSpec, TrainConfig, FitReport), Failure> {
    let spec = config.model.to_spec();
    let train = config.train_config();
    let report = if verbose {
        fit_with_progress(&spec, data, &train, Some(&verbose_progress))
    } else {
        fit_with_progress(&spec, data, &train, None)
    }?;
    Ok((spec, train, report))
}

pub fn cmd_fit(
    config_path: &Path,
    data_path: &Path,
    model_path: &Path,
    report_path: &Path,
    verbose: bool,
) -> CmdResult {
    let config = load_config(config_path)?;
    let data = load_data(&config, data_path)?;
    let (spec, train, report) = run_fit(&config, &data, verbose)?;

    let model = SavedModel::new(&spec, &report.best_params, &train.sat, report.scaling.clone());
    write_atomic(
        model_path,
        &model.to_json().map_err(Failure::from)?,
    )?;
    let file = FitReportFile::new(&config, &report);
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Failure::numerical(format!("report serialization: {e}")))?;
    write_atomic(report_path, &json)?;
    println!(
        "fit: R2 per output {:?}, average {:.4}, effective order {}, active inputs {}, zeros {}/{}",
        file.r2_train
            .iter()
            .map(|v| (v * 1e4).round() / 1e4)
            .collect::<Vec<_>>(),
        file.r2_train_avg,
        file.effective_order,
        file.active_inputs,
        file.sparsity.zeros,
        file.sparsity.total
    );
    Ok(())
}

fn policy_from_str(s: &str) -> Result<X0Policy, Failure> {
    match s {
        "from-fit" => Ok(X0Policy::FromFit),
        "ekf-rts" => Ok(X0Policy::EkfRts),
        "refine" => Ok(X0Policy::Refine),
        other => Err(Failure::usage(format!("unknown x0 policy '{other}'"))),
    }
}

/// Smoother settings for eval/reconstruction: the optional config file's
/// `[ekf]` section, with the epoch count defaulting to 1 for linear models
/// and 10 when networks are present.
fn ekf_for(
    config: Option<&RunConfig>,
    spec: &ModelSpec,
    epochs: Option<usize>,
    rho_x_flag: f64,
) -> (EkfConfig, f64) {
    let has_networks = !spec.fx_layers.is_empty() || !spec.fy_layers.is_empty();
    let mut ekf = config.map(|c| c.ekf.to_config()).unwrap_or_default();
    ekf.n_epochs = epochs
        .or(config.map(|c| c.ekf.n_epochs))
        .unwrap_or(if has_networks { 10 } else { 1 });
    let rho_x = config.map(|c| c.reg.rho_x).unwrap_or(rho_x_flag);
    (ekf, rho_x)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    model_path: &Path,
    data_path: &Path,
    policy: &str,
    horizon: Option<usize>,
    epochs: Option<usize>,
    rho_x: f64,
    boundaries: &[usize],
    config_path: Option<&Path>,
    out: Option<&Path>,
    report_path: Option<&Path>,
) -> CmdResult {
    let policy = policy_from_str(policy)?;
    let config = config_path.map(load_config).transpose()?;
    let model = SavedModel::load(model_path)?;
    let spec = model.spec.clone();
    let params = model.params()?;
    let raw = load_csv(data_path, spec.n_u, spec.n_y, boundaries)?;
    let data = match &model.scaling {
        Some(sc) => sc.apply(&raw)?,
        None => raw,
    };
    let (ekf, rho_x) = ekf_for(config.as_ref(), &spec, epochs, rho_x);
    let eval = evaluate(&params, &spec, &model.sat, &data, policy, &ekf, rho_x)?;
    println!("R2 per output:");
    for (i, r2) in eval.r2_per_output.iter().enumerate() {
        println!("  y{}: {r2:.4}", i + 1);
    }
    println!("average R2: {:.4}", eval.r2_avg);

    let mut horizon_r2 = None;
    if let Some(p) = horizon {
        let exp = &data.experiments[0];
        let scores = ekf_output_disturbance_predict(
            &params, &spec, &model.sat, &exp.u, &exp.y, p, &ekf, rho_x,
        )?;
        let mut table = String::from("p\tr2_avg\n");
        println!("p-step ahead prediction:");
        for (i, s) in scores.iter().enumerate() {
            println!("  p={}: {s:.4}", i + 1);
            table.push_str(&format!("{}\t{}\n", i + 1, s));
        }
        if let Some(path) = out {
            write_atomic(path, &table)?;
        }
        horizon_r2 = Some(scores);
    } else if let Some(path) = out {
        let mut table = String::from("output\tr2\n");
        for (i, r2) in eval.r2_per_output.iter().enumerate() {
            table.push_str(&format!("y{}\t{}\n", i + 1, r2));
        }
        table.push_str(&format!("average\t{}\n", eval.r2_avg));
        write_atomic(path, &table)?;
    }
    if let Some(path) = report_path {
        let file = EvalReportFile {
            version: env!("CARGO_PKG_VERSION").to_string(),
            x0_policy: format!("{policy:?}"),
            r2_per_output: eval.r2_per_output.clone(),
            r2_avg: eval.r2_avg,
            mse: eval.mse,
            x0_used: eval.x0_used.clone(),
            horizon_r2,
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| Failure::numerical(format!("report serialization: {e}")))?;
        write_atomic(path, &json)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepParam {
    Tau,
    TauG,
}

pub fn cmd_sweep(
    config_path: &Path,
    data_path: &Path,
    param: SweepParam,
    grid: &[f64],
    out: &Path,
    verbose: bool,
) -> CmdResult {
    if grid.is_empty() {
        return Err(Failure::usage("empty sweep grid".to_string()));
    }
    if grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Failure::usage("grid values must be nonnegative".to_string()));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Failure::usage("grid must be sorted ascending".to_string()));
    }
    let mut config = load_config(config_path)?;
    if param == SweepParam::TauG && config.reg.group_kind == GroupKind::None {
        return Err(Failure::usage(
            "tau-g sweep requires reg.group_kind = \"state_groups\" or \"input_groups\"".to_string(),
        ));
    }
    let data = load_data(&config, data_path)?;

    let mut table = String::from(
        "penalty\tr2_train_avg\teffective_order\tactive_inputs\tzeros\tloss\tstatus\n",
    );
    for &value in grid {
        match param {
            SweepParam::Tau => config.reg.tau = value,
            SweepParam::TauG => config.reg.tau_g = value,
        }
        match run_fit(&config, &data, verbose) {
            Ok((_, _, report)) => {
                table.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\tok\n",
                    value,
                    report.r2_train_avg,
                    report.effective_order,
                    report.active_inputs,
                    report.sparsity_zeros,
                    report.final_loss
                ));
                println!(
                    "penalty {value:.3e}: R2 {:.3} order {} inputs {}",
                    report.r2_train_avg, report.effective_order, report.active_inputs
                );
            }
            Err(f) if f.code == 2 => return Err(f),
            Err(f) => {
                table.push_str(&format!(
                    "{value}\tnan\tnan\tnan\tnan\tnan\tfailed: {}\n",
                    f.message.replace(['\t', '\n'], " ")
                ));
                eprintln!("penalty {value:.3e}: failed ({})", f.message);
            }
        }
    }
    write_atomic(out, &table)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_causal(
    config_path: &Path,
    data_path: &Path,
    threshold: f64,
    out: Option<&Path>,
    verbose: bool,
) -> CmdResult {
    let config = load_config(config_path)?;
    if config.model.n_u != config.model.n_y {
        return Err(Failure::usage(
            "causal analysis expects the stacked signal as both input and output (n_u == n_y)"
                .to_string(),
        ));
    }
    if config.model.feedthrough {
        return Err(Failure::usage(
            "causal analysis requires feedthrough = false (strictly causal self-regression)"
                .to_string(),
        ));
    }
    let data = load_data(&config, data_path)?;
    let (_, _, report) = run_fit(&config, &data, verbose)?;
    let mut table = String::from("channel\tr2\tverdict\n");
    println!("per-channel training R2 (threshold {threshold}):");
    for (i, r2) in report.r2_train.iter().enumerate() {
        let verdict = if *r2 >= threshold { "output" } else { "input" };
        println!("  channel {:>2}: {r2:>9.4}  -> {verdict}", i + 1);
        table.push_str(&format!("{}\t{}\t{}\n", i + 1, r2, verdict));
    }
    if let Some(path) = out {
        write_atomic(path, &table)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_reconstruct_x0(
    model_path: &Path,
    data_path: &Path,
    epochs: Option<usize>,
    refine: bool,
    rho_x: f64,
    boundaries: &[usize],
    config_path: Option<&Path>,
) -> CmdResult {
    let config = config_path.map(load_config).transpose()?;
    let model = SavedModel::load(model_path)?;
    let spec = model.spec.clone();
    let params = model.params()?;
    let raw = load_csv(data_path, spec.n_u, spec.n_y, boundaries)?;
    let data = match &model.scaling {
        Some(sc) => sc.apply(&raw)?,
        None => raw,
    };
    let (ekf, rho_x) = ekf_for(config.as_ref(), &spec, epochs, rho_x);
    let policy = if refine { X0Policy::Refine } else { X0Policy::EkfRts };
    let eval = evaluate(&params, &spec, &model.sat, &data, policy, &ekf, rho_x)?;
    for (j, x0) in eval.x0_used.iter().enumerate() {
        println!("experiment {j}: x0 = {x0:?}");
    }
    println!("open-loop average R2 from reconstructed state: {:.4}", eval.r2_avg);
    Ok(())
}
