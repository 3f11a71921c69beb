//! Loss and regularization terms, group-index construction over the flat
//! parameter vector, quality-of-fit scores and standard scaling.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Result, SysidError};
use crate::model::ParamLayout;

/// Which parameter families the group-Lasso penalty ties together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    #[default]
    None,
    /// One group per state: annihilating group `i` removes state `i`.
    StateGroups,
    /// One group per input channel: annihilating group `i` drops input `i`.
    InputGroups,
}

/// Weights of the combined regularizer
/// `r(v) = rho_theta/2 ||Theta||^2 + rho_x/2 ||x0||^2 + tau ||Theta||_1 + tau_g sum_i ||group_i||_2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizationConfig {
    pub rho_theta: f64,
    pub rho_x: f64,
    pub tau: f64,
    pub tau_g: f64,
    /// Small l1 weight required on the split problem whenever `tau_g > 0`.
    pub epsilon: f64,
    pub group_kind: GroupKind,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        RegularizationConfig {
            rho_theta: 0.0,
            rho_x: 0.0,
            tau: 0.0,
            tau_g: 0.0,
            epsilon: 1e-16,
            group_kind: GroupKind::None,
        }
    }
}

impl RegularizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rho_theta < 0.0
            || self.rho_x < 0.0
            || self.tau < 0.0
            || self.tau_g < 0.0
            || self.epsilon < 0.0
        {
            return Err(SysidError::InvalidConfig(
                "regularization weights must be nonnegative".into(),
            ));
        }
        if self.tau_g > 0.0 && self.epsilon <= 0.0 {
            return Err(SysidError::InvalidConfig(
                "group-Lasso requires epsilon > 0".into(),
            ));
        }
        if self.tau_g > 0.0 && self.group_kind == GroupKind::None {
            return Err(SysidError::InvalidConfig(
                "tau_g > 0 requires a group kind".into(),
            ));
        }
        Ok(())
    }

    /// True when any non-smooth term is active and splitting is required.
    pub fn needs_split(&self) -> bool {
        self.tau > 0.0 || self.tau_g > 0.0
    }
}

/// Index lists into the flat parameter vector, one per group.
///
/// State groups follow the coupling of state `i`: its initial-state entries
/// (all experiments), row `i` and column `i` of `A` (the diagonal entry
/// once), row `i` of `B`, column `i` of `C`, column `i` of the first-layer
/// weights of both networks, and row `i` of the last-layer weight plus
/// entry `i` of the last-layer bias of `f_x`. Off-diagonal `A` entries
/// therefore belong to two state groups. Input groups collect column `i`
/// of `B` and `D` and column `n_x + i` of the first-layer weights; they are
/// pairwise disjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupIndexSet {
    pub groups: Vec<Vec<usize>>,
    pub kind: GroupKind,
}

impl GroupIndexSet {
    /// Union of all group indices, sorted and deduplicated.
    pub fn all_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.groups.iter().flatten().copied().collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }
}

/// Build the group-index set for a layout.
pub fn build_groups(layout: &ParamLayout, kind: GroupKind) -> Result<GroupIndexSet> {
    let spec = layout.spec();
    match kind {
        GroupKind::None => Ok(GroupIndexSet {
            groups: Vec::new(),
            kind,
        }),
        GroupKind::StateGroups => {
            let mut groups = Vec::with_capacity(spec.n_x);
            let fx_dims = spec.fx_dims();
            let fy_dims = spec.fy_dims();
            for i in 0..spec.n_x {
                let mut g = Vec::new();
                for j in 0..layout.n_experiments() {
                    g.extend(layout.x0_index(j, i));
                }
                for c in 0..spec.n_x {
                    g.extend(layout.a_index(i, c));
                }
                for r in 0..spec.n_x {
                    if r != i {
                        g.extend(layout.a_index(r, i));
                    }
                }
                for c in 0..spec.n_u {
                    g.extend(layout.b_index(i, c));
                }
                for r in 0..spec.n_y {
                    g.extend(layout.c_index(r, i));
                }
                if let Some(&(rows, _)) = fx_dims.first() {
                    for r in 0..rows {
                        g.extend(layout.fx_w_index(0, r, i));
                    }
                }
                if let Some(&(_, cols)) = fx_dims.last() {
                    let last = fx_dims.len() - 1;
                    for c in 0..cols {
                        g.extend(layout.fx_w_index(last, i, c));
                    }
                    g.extend(layout.fx_b_index(last, i));
                }
                if let Some(&(rows, _)) = fy_dims.first() {
                    for r in 0..rows {
                        g.extend(layout.fy_w_index(0, r, i));
                    }
                }
                groups.push(g);
            }
            Ok(GroupIndexSet { groups, kind })
        }
        GroupKind::InputGroups => {
            if spec.n_u == 0 {
                return Err(SysidError::InvalidConfig(
                    "input groups require n_u >= 1".into(),
                ));
            }
            let mut groups = Vec::with_capacity(spec.n_u);
            let fx_dims = spec.fx_dims();
            let fy_dims = spec.fy_dims();
            for i in 0..spec.n_u {
                let mut g = Vec::new();
                for r in 0..spec.n_x {
                    g.extend(layout.b_index(r, i));
                }
                if spec.feedthrough {
                    for r in 0..spec.n_y {
                        g.extend(layout.d_index(r, i));
                    }
                }
                if let Some(&(rows, _)) = fx_dims.first() {
                    for r in 0..rows {
                        g.extend(layout.fx_w_index(0, r, spec.n_x + i));
                    }
                }
                if spec.feedthrough {
                    if let Some(&(rows, _)) = fy_dims.first() {
                        for r in 0..rows {
                            g.extend(layout.fy_w_index(0, r, spec.n_x + i));
                        }
                    }
                }
                groups.push(g);
            }
            Ok(GroupIndexSet { groups, kind })
        }
    }
}

/// Mean squared simulation error, `(1/N) sum_k ||y_k - yhat_k||^2`.
pub fn mse_loss(y_true: &DMatrix<f64>, y_pred: &DMatrix<f64>) -> Result<f64> {
    if y_true.nrows() != y_pred.nrows() || y_true.ncols() != y_pred.ncols() {
        return Err(SysidError::DimensionMismatch {
            block: "mse".into(),
            expected: format!("{}x{}", y_true.nrows(), y_true.ncols()),
            found: format!("{}x{}", y_pred.nrows(), y_pred.ncols()),
        });
    }
    let n = y_true.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for k in 0..n {
        for c in 0..y_true.ncols() {
            let e = y_true[(k, c)] - y_pred[(k, c)];
            sum += e * e;
        }
    }
    Ok(sum / n as f64)
}

/// Value of the combined regularizer at a flat vector.
pub fn regularizer_value(
    v: &DVector<f64>,
    cfg: &RegularizationConfig,
    groups: Option<&GroupIndexSet>,
    theta_idx: &[usize],
    x0_idx: &[usize],
) -> f64 {
    let mut r = 0.0;
    if cfg.rho_theta > 0.0 {
        let sq: f64 = theta_idx.iter().map(|&i| v[i] * v[i]).sum();
        r += 0.5 * cfg.rho_theta * sq;
    }
    if cfg.rho_x > 0.0 {
        let sq: f64 = x0_idx.iter().map(|&i| v[i] * v[i]).sum();
        r += 0.5 * cfg.rho_x * sq;
    }
    if cfg.tau > 0.0 {
        let l1: f64 = theta_idx.iter().map(|&i| v[i].abs()).sum();
        r += cfg.tau * l1;
    }
    if cfg.tau_g > 0.0 {
        if let Some(gs) = groups {
            for g in &gs.groups {
                let norm: f64 = g.iter().map(|&i| v[i] * v[i]).sum::<f64>().sqrt();
                r += cfg.tau_g * norm;
            }
        }
    }
    r
}

/// Subgradient of [`regularizer_value`]; the l1 subgradient is zero at the
/// origin and group terms contribute nothing from all-zero groups.
pub fn regularizer_subgrad(
    v: &DVector<f64>,
    cfg: &RegularizationConfig,
    groups: Option<&GroupIndexSet>,
    theta_idx: &[usize],
    x0_idx: &[usize],
) -> DVector<f64> {
    let mut g = DVector::zeros(v.len());
    for &i in theta_idx {
        g[i] += cfg.rho_theta * v[i] + cfg.tau * v[i].signum() * f64::from(v[i] != 0.0);
    }
    for &i in x0_idx {
        g[i] += cfg.rho_x * v[i];
    }
    if cfg.tau_g > 0.0 {
        if let Some(gs) = groups {
            for grp in &gs.groups {
                let norm: f64 = grp.iter().map(|&i| v[i] * v[i]).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for &i in grp {
                        g[i] += cfg.tau_g * v[i] / norm;
                    }
                }
            }
        }
    }
    g
}

/// Per-output R² scores in percent: `100 (1 - SS_res / SS_tot)`.
pub fn r2_scores(y_true: &DMatrix<f64>, y_pred: &DMatrix<f64>) -> Result<Vec<f64>> {
    if y_true.nrows() != y_pred.nrows() || y_true.ncols() != y_pred.ncols() {
        return Err(SysidError::DimensionMismatch {
            block: "r2".into(),
            expected: format!("{}x{}", y_true.nrows(), y_true.ncols()),
            found: format!("{}x{}", y_pred.nrows(), y_pred.ncols()),
        });
    }
    let n = y_true.nrows();
    let mut scores = Vec::with_capacity(y_true.ncols());
    for c in 0..y_true.ncols() {
        let mean = y_true.column(c).sum() / n as f64;
        let mut ss_tot = 0.0;
        let mut ss_res = 0.0;
        for k in 0..n {
            let d = y_true[(k, c)] - mean;
            ss_tot += d * d;
            let e = y_true[(k, c)] - y_pred[(k, c)];
            ss_res += e * e;
        }
        if ss_tot == 0.0 {
            return Err(SysidError::ZeroVariance { channel: c });
        }
        scores.push(100.0 * (1.0 - ss_res / ss_tot));
    }
    Ok(scores)
}

/// Average R² over output channels.
pub fn r2_average(scores: &[f64]) -> f64 {
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Per-channel standard-scaling statistics fitted on training data.
/// Population (1/N) standard deviation convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub u_mean: Vec<f64>,
    pub u_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

fn channel_stats(
    columns: usize,
    total: usize,
    get: impl Fn(usize, usize) -> f64,
    label: &str,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut means = Vec::with_capacity(columns);
    let mut stds = Vec::with_capacity(columns);
    for c in 0..columns {
        let mut sum = 0.0;
        for k in 0..total {
            sum += get(k, c);
        }
        let mean = sum / total as f64;
        let mut var = 0.0;
        for k in 0..total {
            let d = get(k, c) - mean;
            var += d * d;
        }
        var /= total as f64;
        let std = var.sqrt();
        if std == 0.0 {
            return Err(SysidError::ZeroStd {
                channel: format!("{label}{}", c + 1),
            });
        }
        means.push(mean);
        stds.push(std);
    }
    Ok((means, stds))
}

impl Scaling {
    /// Fit per-channel statistics, pooling rows over all experiments.
    pub fn fit(ds: &Dataset) -> Result<Scaling> {
        let n_u = ds.n_u();
        let n_y = ds.n_y();
        let total = ds.n_samples();
        let u_rows: Vec<&DMatrix<f64>> = ds.experiments.iter().map(|e| &e.u).collect();
        let y_rows: Vec<&DMatrix<f64>> = ds.experiments.iter().map(|e| &e.y).collect();
        let flat = |mats: &[&DMatrix<f64>], k: usize, c: usize| -> f64 {
            let mut row = k;
            for m in mats {
                if row < m.nrows() {
                    return m[(row, c)];
                }
                row -= m.nrows();
            }
            unreachable!("row index out of range");
        };
        let (u_mean, u_std) = if n_u > 0 {
            channel_stats(n_u, total, |k, c| flat(&u_rows, k, c), "u")?
        } else {
            (Vec::new(), Vec::new())
        };
        let (y_mean, y_std) = channel_stats(n_y, total, |k, c| flat(&y_rows, k, c), "y")?;
        Ok(Scaling {
            u_mean,
            u_std,
            y_mean,
            y_std,
        })
    }

    /// Apply the stored statistics: `x <- (x - mean) / std` per channel.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.n_u() != self.u_mean.len() || ds.n_y() != self.y_mean.len() {
            return Err(SysidError::DimensionMismatch {
                block: "scaling".into(),
                expected: format!("{} inputs / {} outputs", self.u_mean.len(), self.y_mean.len()),
                found: format!("{} / {}", ds.n_u(), ds.n_y()),
            });
        }
        let mut out = ds.clone();
        for e in &mut out.experiments {
            for c in 0..e.u.ncols() {
                for k in 0..e.u.nrows() {
                    e.u[(k, c)] = (e.u[(k, c)] - self.u_mean[c]) / self.u_std[c];
                }
            }
            for c in 0..e.y.ncols() {
                for k in 0..e.y.nrows() {
                    e.y[(k, c)] = (e.y[(k, c)] - self.y_mean[c]) / self.y_std[c];
                }
            }
        }
        out.scaling = Some(self.clone());
        Ok(out)
    }

    /// Undo output scaling on a matrix of output rows.
    pub fn unscale_outputs(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = y.clone();
        for c in 0..out.ncols() {
            for k in 0..out.nrows() {
                out[(k, c)] = out[(k, c)] * self.y_std[c] + self.y_mean[c];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelSpec};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_identical_is_zero() {
        let y = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        assert_eq!(mse_loss(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn mse_mean_of_squares() {
        let y = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let yh = DMatrix::zeros(2, 1);
        assert_eq!(mse_loss(&y, &yh).unwrap(), 1.0);
    }

    #[test]
    fn mse_matches_double_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = DMatrix::from_fn(5, 2, |_, _| rng.random::<f64>());
        let yh = DMatrix::from_fn(5, 2, |_, _| rng.random::<f64>());
        let mut reference = 0.0;
        for k in 0..5 {
            for c in 0..2 {
                reference += (y[(k, c)] - yh[(k, c)]).powi(2);
            }
        }
        reference /= 5.0;
        assert_abs_diff_eq!(mse_loss(&y, &yh).unwrap(), reference, epsilon = 1e-15);
    }

    #[test]
    fn mse_rejects_length_mismatch() {
        let y = DMatrix::zeros(3, 1);
        let yh = DMatrix::zeros(2, 1);
        assert!(mse_loss(&y, &yh).is_err());
    }

    #[test]
    fn state_group_linear_example() {
        // n_x=2, n_u=1, n_y=1, single experiment: group 0 has 6 indices
        // (x0, A row+col with the diagonal once, B row, C column).
        let spec = ModelSpec::linear(2, 1, 1, false);
        let layout = ParamLayout::new(&spec, 1, true).unwrap();
        let gs = build_groups(&layout, GroupKind::StateGroups).unwrap();
        assert_eq!(gs.groups.len(), 2);
        assert_eq!(gs.groups[0].len(), 6);
        let a00 = layout.a_index(0, 0).unwrap();
        assert_eq!(gs.groups[0].iter().filter(|&&i| i == a00).count(), 1);
        assert!(!gs.groups[1].contains(&a00));
    }

    #[test]
    fn input_group_linear_masked_d() {
        let spec = ModelSpec::linear(2, 3, 1, false);
        let layout = ParamLayout::new(&spec, 1, true).unwrap();
        let gs = build_groups(&layout, GroupKind::InputGroups).unwrap();
        assert_eq!(gs.groups.len(), 3);
        for (i, g) in gs.groups.iter().enumerate() {
            let expected: Vec<usize> = (0..2).map(|r| layout.b_index(r, i).unwrap()).collect();
            assert_eq!(g, &expected);
        }
    }

    #[test]
    fn state_group_rnn_count() {
        // 12 states, widths 36/24: 1 + 23 + 6 + 6 + 36 + 24 + 36 + 1 = 133.
        let spec =
            ModelSpec::residual_rnn(12, 6, 6, vec![36], vec![24], Activation::Swish, false);
        let layout = ParamLayout::new(&spec, 1, true).unwrap();
        let gs = build_groups(&layout, GroupKind::StateGroups).unwrap();
        for g in &gs.groups {
            assert_eq!(g.len(), 133);
        }
    }

    #[test]
    fn state_groups_touch_fy_only_through_first_layer() {
        let spec = ModelSpec::residual_rnn(3, 2, 2, vec![5], vec![4], Activation::Tanh, true);
        let layout = ParamLayout::new(&spec, 1, true).unwrap();
        let gs = build_groups(&layout, GroupKind::StateGroups).unwrap();
        let union = gs.all_indices();
        let mut fy_first_cols = Vec::new();
        for r in 0..4 {
            for c in 0..3 {
                fy_first_cols.push(layout.fy_w_index(0, r, c).unwrap());
            }
        }
        // every f_y index present in a state group is a first-layer column
        // for some state
        let fy_all: Vec<usize> = {
            let mut v = Vec::new();
            for (l, &(rows, cols)) in spec.fy_dims().iter().enumerate() {
                for r in 0..rows {
                    for c in 0..cols {
                        v.push(layout.fy_w_index(l, r, c).unwrap());
                    }
                    v.push(layout.fy_b_index(l, r).unwrap());
                }
            }
            v
        };
        for &i in &union {
            if fy_all.contains(&i) {
                assert!(fy_first_cols.contains(&i));
            }
        }
    }

    #[test]
    fn state_group_union_covers_expected_families() {
        let spec = ModelSpec::residual_rnn(3, 2, 2, vec![5], vec![4], Activation::Tanh, true);
        let layout = ParamLayout::new(&spec, 2, true).unwrap();
        let gs = build_groups(&layout, GroupKind::StateGroups).unwrap();
        let union: std::collections::HashSet<usize> =
            gs.all_indices().into_iter().collect();
        let mut expected = std::collections::HashSet::new();
        for j in 0..2 {
            for i in 0..3 {
                expected.insert(layout.x0_index(j, i).unwrap());
            }
        }
        for r in 0..3 {
            for c in 0..3 {
                expected.insert(layout.a_index(r, c).unwrap());
            }
        }
        for r in 0..3 {
            for c in 0..2 {
                expected.insert(layout.b_index(r, c).unwrap());
            }
        }
        for r in 0..2 {
            for c in 0..3 {
                expected.insert(layout.c_index(r, c).unwrap());
            }
        }
        // first-layer columns 0..n_x of both networks
        for r in 0..5 {
            for c in 0..3 {
                expected.insert(layout.fx_w_index(0, r, c).unwrap());
            }
        }
        for r in 0..4 {
            for c in 0..3 {
                expected.insert(layout.fy_w_index(0, r, c).unwrap());
            }
        }
        // full last layer of f_x (every row i and bias entry i)
        for r in 0..3 {
            for c in 0..5 {
                expected.insert(layout.fx_w_index(1, r, c).unwrap());
            }
            expected.insert(layout.fx_b_index(1, r).unwrap());
        }
        assert_eq!(union, expected);
        // off-diagonal A entries sit in exactly two groups, everything
        // else in exactly one
        for r in 0..3 {
            for c in 0..3 {
                let idx = layout.a_index(r, c).unwrap();
                let count = gs.groups.iter().filter(|g| g.contains(&idx)).count();
                assert_eq!(count, if r == c { 1 } else { 2 });
            }
        }
    }

    #[test]
    fn input_groups_are_disjoint() {
        let spec = ModelSpec::residual_rnn(3, 4, 2, vec![6], vec![5], Activation::Swish, true);
        let layout = ParamLayout::new(&spec, 1, true).unwrap();
        let gs = build_groups(&layout, GroupKind::InputGroups).unwrap();
        let mut seen = std::collections::HashSet::new();
        for g in &gs.groups {
            for &i in g {
                assert!(seen.insert(i), "index {i} in two input groups");
            }
        }
    }

    #[test]
    fn regularizer_examples() {
        let v0 = DVector::zeros(3);
        let cfg = RegularizationConfig {
            rho_theta: 2.0,
            tau: 1.0,
            ..Default::default()
        };
        assert_eq!(regularizer_value(&v0, &cfg, None, &[0, 1, 2], &[]), 0.0);

        // rho=2, Theta=(1,1): 0.5*2*2 = 2
        let v = DVector::from_row_slice(&[1.0, 1.0]);
        let cfg = RegularizationConfig {
            rho_theta: 2.0,
            ..Default::default()
        };
        assert_eq!(regularizer_value(&v, &cfg, None, &[0, 1], &[]), 2.0);

        // tau_g=1, one group {0,1}, v=(3,4): Euclidean norm 5
        let v = DVector::from_row_slice(&[3.0, 4.0]);
        let cfg = RegularizationConfig {
            tau_g: 1.0,
            group_kind: GroupKind::StateGroups,
            ..Default::default()
        };
        let gs = GroupIndexSet {
            groups: vec![vec![0, 1]],
            kind: GroupKind::StateGroups,
        };
        assert_eq!(regularizer_value(&v, &cfg, Some(&gs), &[0, 1], &[]), 5.0);
    }

    #[test]
    fn regularizer_homogeneity_degrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = DVector::from_fn(6, |_, _| rng.random::<f64>() - 0.5);
        let theta: Vec<usize> = (0..4).collect();
        let x0: Vec<usize> = vec![4, 5];
        let gs = GroupIndexSet {
            groups: vec![vec![0, 1], vec![2, 3]],
            kind: GroupKind::StateGroups,
        };
        let l1 = RegularizationConfig {
            tau: 0.7,
            tau_g: 0.3,
            group_kind: GroupKind::StateGroups,
            ..Default::default()
        };
        let l2 = RegularizationConfig {
            rho_theta: 0.7,
            rho_x: 0.4,
            ..Default::default()
        };
        let r1 = regularizer_value(&v, &l1, Some(&gs), &theta, &x0);
        let r1s = regularizer_value(&(&v * 2.0), &l1, Some(&gs), &theta, &x0);
        assert_abs_diff_eq!(r1s, 2.0 * r1, epsilon = 1e-12);
        let r2 = regularizer_value(&v, &l2, None, &theta, &x0);
        let r2s = regularizer_value(&(&v * 2.0), &l2, None, &theta, &x0);
        assert_abs_diff_eq!(r2s, 4.0 * r2, epsilon = 1e-12);
    }

    #[test]
    fn zeroing_group_removes_exactly_its_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut v = DVector::from_fn(6, |_, _| rng.random::<f64>() + 0.1);
        let gs = GroupIndexSet {
            groups: vec![vec![0, 1, 2], vec![3, 4, 5]],
            kind: GroupKind::StateGroups,
        };
        let cfg = RegularizationConfig {
            tau_g: 2.5,
            group_kind: GroupKind::StateGroups,
            ..Default::default()
        };
        let theta: Vec<usize> = (0..6).collect();
        let before = regularizer_value(&v, &cfg, Some(&gs), &theta, &[]);
        let slice_norm: f64 = gs.groups[0].iter().map(|&i| v[i] * v[i]).sum::<f64>().sqrt();
        for &i in &gs.groups[0] {
            v[i] = 0.0;
        }
        let after = regularizer_value(&v, &cfg, Some(&gs), &theta, &[]);
        assert_abs_diff_eq!(before - after, 2.5 * slice_norm, epsilon = 1e-12);
    }

    #[test]
    fn r2_perfect_and_mean_predictor() {
        let y = DMatrix::from_row_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        assert_abs_diff_eq!(r2_scores(&y, &y).unwrap()[0], 100.0, epsilon = 1e-12);
        let mean = DMatrix::from_element(4, 1, 2.5);
        assert_abs_diff_eq!(r2_scores(&y, &mean).unwrap()[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn r2_worse_than_mean_is_negative() {
        let y = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let yh = DMatrix::zeros(3, 1);
        assert_abs_diff_eq!(r2_scores(&y, &yh).unwrap()[0], -150.0, epsilon = 1e-12);
    }

    #[test]
    fn r2_zero_variance_errors() {
        let y = DMatrix::from_element(3, 1, 2.0);
        let yh = DMatrix::zeros(3, 1);
        match r2_scores(&y, &yh) {
            Err(SysidError::ZeroVariance { channel }) => assert_eq!(channel, 0),
            other => panic!("expected zero-variance error, got {other:?}"),
        }
    }

    #[test]
    fn r2_invariant_under_joint_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = DMatrix::from_fn(20, 2, |_, _| rng.random::<f64>());
        let yh = DMatrix::from_fn(20, 2, |_, _| rng.random::<f64>());
        let base = r2_scores(&y, &yh).unwrap();
        let (a, b) = (-2.5, 0.7);
        let my = y.map(|v| a * v + b);
        let myh = yh.map(|v| a * v + b);
        let mapped = r2_scores(&my, &myh).unwrap();
        for (x, y) in base.iter().zip(&mapped) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn scaling_population_convention() {
        let u = DMatrix::from_row_slice(2, 1, &[0.0, 2.0]);
        let y = DMatrix::from_row_slice(2, 1, &[0.0, 2.0]);
        let ds = Dataset::single(u, y).unwrap();
        let sc = Scaling::fit(&ds).unwrap();
        assert_eq!(sc.y_mean[0], 1.0);
        assert_eq!(sc.y_std[0], 1.0);
        let scaled = sc.apply(&ds).unwrap();
        assert_eq!(scaled.experiments[0].y.as_slice(), &[-1.0, 1.0]);
    }

    #[test]
    fn scaling_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = DMatrix::from_fn(50, 2, |_, _| 3.0 + rng.random::<f64>());
        let u = DMatrix::from_fn(50, 1, |_, _| rng.random::<f64>());
        let ds = Dataset::single(u, y.clone()).unwrap();
        let sc = Scaling::fit(&ds).unwrap();
        let scaled = sc.apply(&ds).unwrap();
        let back = sc.unscale_outputs(&scaled.experiments[0].y);
        for (a, b) in y.iter().zip(back.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn test_data_scaled_with_training_stats() {
        let train = Dataset::single(
            DMatrix::from_row_slice(2, 1, &[0.0, 2.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 2.0]),
        )
        .unwrap();
        let test = Dataset::single(
            DMatrix::from_row_slice(2, 1, &[10.0, 12.0]),
            DMatrix::from_row_slice(2, 1, &[10.0, 12.0]),
        )
        .unwrap();
        let sc = Scaling::fit(&train).unwrap();
        let scaled_test = sc.apply(&test).unwrap();
        // (10 - 1) / 1 = 9, not 0: training statistics are reused.
        assert_eq!(scaled_test.experiments[0].y[(0, 0)], 9.0);
    }

    #[test]
    fn scaling_zero_std_names_channel() {
        let ds = Dataset::single(
            DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]),
            DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]),
        )
        .unwrap();
        match Scaling::fit(&ds) {
            Err(SysidError::ZeroStd { channel }) => assert_eq!(channel, "u2"),
            other => panic!("expected zero-std error, got {other:?}"),
        }
    }
}
