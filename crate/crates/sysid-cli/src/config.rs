//! Run configuration file (TOML). Every field is optional and falls back
//! to the documented default; unknown keys are rejected. The resolved
//! configuration is echoed into the output report for provenance.

use serde::{Deserialize, Serialize};
use sysid::{
    Activation, AdamOptions, Cov, EkfConfig, EntryMask, GroupKind, LbfgsbOptions, ModelSpec,
    RegularizationConfig, SatBound, SatMode, SaturationConfig, Selection, StructureMask,
    TrainConfig, X0Mode,
};

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    #[serde(default)]
    pub fx_layers: Vec<usize>,
    #[serde(default)]
    pub fy_layers: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub feedthrough: bool,
    /// Restrict `A` to its diagonal.
    #[serde(default)]
    pub a_diagonal: bool,
}

fn default_activation() -> Activation {
    Activation::Swish
}

impl ModelSection {
    pub fn to_spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::residual_rnn(
            self.n_x,
            self.n_u,
            self.n_y,
            self.fx_layers.clone(),
            self.fy_layers.clone(),
            self.activation,
            self.feedthrough,
        );
        if self.a_diagonal {
            spec.structure_mask = Some(StructureMask {
                a: Some(EntryMask::diagonal(self.n_x)),
                b: None,
                c: None,
                d: None,
            });
        }
        spec
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub n_starts: usize,
    pub seed: u64,
    pub selection: Selection,
    pub x0_mode: X0Mode,
    pub init_a_scale: f64,
    pub init_std: f64,
    pub zero_threshold: f64,
    pub presample: usize,
    pub scale: bool,
    pub adam: AdamSection,
    pub lbfgsb: LbfgsbSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            n_starts: 1,
            seed: 0,
            selection: Selection::TrainR2,
            x0_mode: X0Mode::FreePerExperiment,
            init_a_scale: 0.5,
            init_std: 0.1,
            zero_threshold: 1e-6,
            presample: 1,
            scale: true,
            adam: AdamSection::default(),
            lbfgsb: LbfgsbSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamSection {
    pub iters: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub track_best: bool,
}

impl Default for AdamSection {
    fn default() -> Self {
        let d = AdamOptions::default();
        AdamSection {
            iters: d.iters,
            learning_rate: d.learning_rate,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            track_best: d.track_best,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsbSection {
    pub memory: usize,
    pub max_fun_evals: usize,
    pub grad_tol: f64,
    pub ftol: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LbfgsbSection {
    fn default() -> Self {
        let d = LbfgsbOptions::default();
        LbfgsbSection {
            memory: d.memory,
            max_fun_evals: d.max_fun_evals,
            grad_tol: d.grad_tol,
            ftol: d.ftol,
            c1: d.c1,
            c2: d.c2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegSection {
    pub rho_theta: f64,
    pub rho_x: f64,
    pub tau: f64,
    pub tau_g: f64,
    pub epsilon: f64,
    pub group_kind: GroupKind,
}

impl Default for RegSection {
    fn default() -> Self {
        let d = RegularizationConfig::default();
        RegSection {
            rho_theta: d.rho_theta,
            rho_x: d.rho_x,
            tau: d.tau,
            tau_g: d.tau_g,
            epsilon: d.epsilon,
            group_kind: d.group_kind,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SatSection {
    pub bound: f64,
    pub mode: SatMode,
    pub gamma: f64,
}

impl Default for SatSection {
    fn default() -> Self {
        SatSection {
            bound: 1e4,
            mode: SatMode::Hard,
            gamma: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EkfSection {
    pub n_epochs: usize,
    pub q: f64,
    pub r: f64,
    /// `0` ties the initial covariance to `rho_x` (the library default).
    pub p0: f64,
    pub q_disturbance: f64,
    pub p0_disturbance: f64,
}

impl Default for EkfSection {
    fn default() -> Self {
        EkfSection {
            n_epochs: 1,
            q: 1e-8,
            r: 1.0,
            p0: 0.0,
            q_disturbance: 1e-4,
            p0_disturbance: 1.0,
        }
    }
}

impl EkfSection {
    pub fn to_config(&self) -> EkfConfig {
        EkfConfig {
            n_epochs: self.n_epochs,
            q: Cov::Scaled(self.q),
            r: Cov::Scaled(self.r),
            p0: if self.p0 > 0.0 {
                Some(Cov::Scaled(self.p0))
            } else {
                None
            },
            x0_init: None,
            q_disturbance: self.q_disturbance,
            p0_disturbance: self.p0_disturbance,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Start row of each experiment in the CSV; `[0]` = one experiment.
    pub boundaries: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Embed wall-clock timings in the report file. Disable for
    /// byte-identical reports across reruns.
    #[serde(default = "default_true")]
    pub include_timings: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            include_timings: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub reg: RegSection,
    #[serde(default)]
    pub sat: SatSection,
    #[serde(default)]
    pub ekf: EkfSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub report: ReportSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| format!("config parse error: {e}"))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            n_starts: self.train.n_starts,
            seed: self.train.seed,
            adam: AdamOptions {
                iters: self.train.adam.iters,
                learning_rate: self.train.adam.learning_rate,
                beta1: self.train.adam.beta1,
                beta2: self.train.adam.beta2,
                eps: self.train.adam.eps,
                track_best: self.train.adam.track_best,
            },
            lbfgsb: LbfgsbOptions {
                memory: self.train.lbfgsb.memory,
                max_fun_evals: self.train.lbfgsb.max_fun_evals,
                grad_tol: self.train.lbfgsb.grad_tol,
                ftol: self.train.lbfgsb.ftol,
                c1: self.train.lbfgsb.c1,
                c2: self.train.lbfgsb.c2,
            },
            reg: RegularizationConfig {
                rho_theta: self.reg.rho_theta,
                rho_x: self.reg.rho_x,
                tau: self.reg.tau,
                tau_g: self.reg.tau_g,
                epsilon: self.reg.epsilon,
                group_kind: self.reg.group_kind,
            },
            sat: SaturationConfig {
                bound: SatBound::Uniform(self.sat.bound),
                mode: self.sat.mode,
                gamma: self.sat.gamma,
            },
            init_a_scale: self.train.init_a_scale,
            init_std: self.train.init_std,
            x0_mode: self.train.x0_mode,
            zero_threshold: self.train.zero_threshold,
            selection: self.train.selection,
            presample: self.train.presample,
            scale_data: self.train.scale,
            init_override: None,
        }
    }
}
