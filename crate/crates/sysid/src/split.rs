//! Variable-splitting reformulation: the regularized problem over `x` is
//! rewritten over nonnegative positive/negative parts `(y, z)` with
//! `x = y - z`, turning l1 and group-Lasso penalties into smooth terms on
//! the nonnegative orthant so a bound-constrained quasi-Newton solver can
//! handle them. At any solution the parts satisfy `y_i z_i = 0`, and the
//! original solution is recovered as `x* = y* - z*`.
//!
//! Only coordinates entering non-smooth terms are doubled; the remaining
//! coordinates pass through unsplit.

use nalgebra::DVector;

use crate::error::{Result, SysidError};
use crate::objectives::{GroupIndexSet, RegularizationConfig};

/// Lower bound placed on split parts when group norms are present, keeping
/// the group-norm gradient defined at the origin.
pub const EPS_FLOOR: f64 = 1e-16;

/// Box bounds on a vector; entries may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Bounds {
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(SysidError::InvalidConfig("bound length mismatch".into()));
        }
        for i in 0..self.lower.len() {
            if self.lower[i] > self.upper[i] {
                return Err(SysidError::InvalidConfig(format!(
                    "contradictory bounds at index {i}: [{}, {}]",
                    self.lower[i], self.upper[i]
                )));
            }
        }
        Ok(())
    }
}

/// Index map between the original vector of length `n` and the doubled
/// vector of length `n + |split|`. Slot `i < n` holds the positive part of
/// split coordinate `i` (or the coordinate itself when unsplit); slot
/// `n + k` holds the negative part of the `k`-th split coordinate.
#[derive(Debug, Clone)]
pub struct SplitMap {
    n: usize,
    split: Vec<usize>,
    z_slot: Vec<Option<usize>>,
}

impl SplitMap {
    pub fn new(n: usize, split_idx: &[usize]) -> Result<Self> {
        let mut split = split_idx.to_vec();
        split.sort_unstable();
        split.dedup();
        if split.last().is_some_and(|&i| i >= n) {
            return Err(SysidError::InvalidConfig(
                "split index out of range".into(),
            ));
        }
        let mut z_slot = vec![None; n];
        for (k, &i) in split.iter().enumerate() {
            z_slot[i] = Some(n + k);
        }
        Ok(SplitMap { n, split, z_slot })
    }

    pub fn dim_original(&self) -> usize {
        self.n
    }

    pub fn dim_doubled(&self) -> usize {
        self.n + self.split.len()
    }

    pub fn split_indices(&self) -> &[usize] {
        &self.split
    }

    pub fn is_split(&self, i: usize) -> bool {
        self.z_slot[i].is_some()
    }

    pub fn z_slot(&self, i: usize) -> Option<usize> {
        self.z_slot[i]
    }

    /// Map an original vector to the doubled vector via positive/negative
    /// parts, clipped up to `floor` on split slots.
    pub fn expand(&self, x: &DVector<f64>, floor: f64) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim_doubled());
        for i in 0..self.n {
            match self.z_slot[i] {
                Some(z) => {
                    v[i] = x[i].max(0.0).max(floor);
                    v[z] = (-x[i]).max(0.0).max(floor);
                }
                None => v[i] = x[i],
            }
        }
        v
    }

    /// Recover the original vector: `x_i = y_i - z_i` on split coordinates,
    /// pass-through elsewhere.
    pub fn recover(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut x = DVector::zeros(self.n);
        for i in 0..self.n {
            x[i] = match self.z_slot[i] {
                Some(z) => v[i] - v[z],
                None => v[i],
            };
        }
        x
    }

    /// Largest violation of the complementarity condition,
    /// `max_i min(y_i, z_i)`.
    pub fn complementarity(&self, v: &DVector<f64>) -> f64 {
        self.split
            .iter()
            .map(|&i| v[i].min(v[self.z_slot[i].unwrap()]))
            .fold(0.0, f64::max)
    }
}

/// Which regularizer weight applies to each original coordinate.
#[derive(Debug, Clone, Default)]
pub struct RegIndexSets {
    /// Model-parameter coordinates (l2 weight `rho_theta`, l1 weight `tau`).
    pub theta: Vec<usize>,
    /// Initial-state coordinates (l2 weight `rho_x`, never split).
    pub x0: Vec<usize>,
}

type Objective<'a> = Box<dyn Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)> + Send + Sync + 'a>;

/// The doubled, bound-constrained smooth problem equivalent to the
/// regularized original.
pub struct SplitProblem<'a> {
    pub map: SplitMap,
    pub bounds: Bounds,
    objective: Objective<'a>,
}

impl<'a> SplitProblem<'a> {
    /// Objective value and gradient over the doubled vector.
    pub fn eval(&self, v: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        (self.objective)(v)
    }

    pub fn recover(&self, v: &DVector<f64>) -> DVector<f64> {
        self.map.recover(v)
    }

    pub fn dim(&self) -> usize {
        self.map.dim_doubled()
    }
}

fn quadratic_terms(
    map: &SplitMap,
    idx: &[usize],
    weight: f64,
    v: &DVector<f64>,
    grad: &mut DVector<f64>,
) -> f64 {
    if weight == 0.0 {
        return 0.0;
    }
    let mut val = 0.0;
    for &i in idx {
        match map.z_slot(i) {
            Some(z) => {
                // 1/2 w (y^2 + z^2): positive definite on the doubled pair,
                // equal to 1/2 w x^2 under complementarity.
                val += 0.5 * weight * (v[i] * v[i] + v[z] * v[z]);
                grad[i] += weight * v[i];
                grad[z] += weight * v[z];
            }
            None => {
                val += 0.5 * weight * v[i] * v[i];
                grad[i] += weight * v[i];
            }
        }
    }
    val
}

/// Linear `weight * (y_i + z_i)` over the split coordinates in `idx`.
fn linear_terms_on(
    map: &SplitMap,
    idx: &[usize],
    weight: f64,
    v: &DVector<f64>,
    grad: &mut DVector<f64>,
) -> f64 {
    if weight == 0.0 {
        return 0.0;
    }
    let mut val = 0.0;
    for &i in idx {
        if let Some(z) = map.z_slot(i) {
            val += weight * (v[i] + v[z]);
            grad[i] += weight;
            grad[z] += weight;
        }
    }
    val
}

fn base_objective<'a, F>(
    f: F,
    map: &SplitMap,
    v: &DVector<f64>,
) -> Result<(f64, DVector<f64>)>
where
    F: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)> + 'a,
{
    let x = map.recover(v);
    let (fval, fgrad) = f(&x)?;
    let mut grad = DVector::zeros(map.dim_doubled());
    for i in 0..map.dim_original() {
        grad[i] += fgrad[i];
        if let Some(z) = map.z_slot(i) {
            grad[z] -= fgrad[i];
        }
    }
    Ok((fval, grad))
}

/// Split problem for the elastic-net regularizer: minimizes
/// `f(y - z) + tau sum(y_i + z_i) + rho_theta/2 (||y_T||^2 + ||z_T||^2) + rho_x/2 ||x0||^2`
/// over `y, z >= 0`. The quadratic is applied to the parts separately,
/// which keeps it positive definite without changing the solution.
pub fn build_elastic_net_split<'a, F>(
    f: F,
    n: usize,
    cfg: &RegularizationConfig,
    idx: RegIndexSets,
    split_idx: &[usize],
) -> Result<SplitProblem<'a>>
where
    F: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)> + Send + Sync + 'a,
{
    cfg.validate()?;
    let map = SplitMap::new(n, split_idx)?;
    if cfg.tau > 0.0 {
        if let Some(&i) = idx.theta.iter().find(|&&i| !map.is_split(i)) {
            return Err(SysidError::InvalidConfig(format!(
                "l1-penalized coordinate {i} is not split"
            )));
        }
    }
    let mut bounds = Bounds::unbounded(map.dim_doubled());
    for &i in map.split_indices() {
        bounds.lower[i] = 0.0;
        bounds.lower[map.z_slot(i).unwrap()] = 0.0;
    }
    let cfg = *cfg;
    let map_c = map.clone();
    let objective: Objective<'a> = Box::new(move |v| {
        let (mut val, mut grad) = base_objective(&f, &map_c, v)?;
        val += linear_terms_on(&map_c, &idx.theta, cfg.tau, v, &mut grad);
        val += quadratic_terms(&map_c, &idx.theta, cfg.rho_theta, v, &mut grad);
        val += quadratic_terms(&map_c, &idx.x0, cfg.rho_x, v, &mut grad);
        Ok((val, grad))
    });
    Ok(SplitProblem {
        map,
        bounds,
        objective,
    })
}

/// Split problem for group-Lasso (optionally combined with elastic-net
/// terms): adds `tau_g sum_i ||group_i(y + z)||_2` and the small linear
/// `epsilon` term, with parts floored at [`EPS_FLOOR`] so the group-norm
/// gradient stays defined.
pub fn build_group_lasso_split<'a, F>(
    f: F,
    n: usize,
    cfg: &RegularizationConfig,
    groups: &GroupIndexSet,
    idx: RegIndexSets,
    split_idx: &[usize],
) -> Result<SplitProblem<'a>>
where
    F: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)> + Send + Sync + 'a,
{
    cfg.validate()?;
    if cfg.tau_g <= 0.0 {
        return Err(SysidError::InvalidConfig(
            "group-Lasso split requires tau_g > 0".into(),
        ));
    }
    let map = SplitMap::new(n, split_idx)?;
    for g in &groups.groups {
        if g.iter().any(|&i| !map.is_split(i)) {
            return Err(SysidError::InvalidConfig(
                "all group indices must be split".into(),
            ));
        }
    }
    let mut bounds = Bounds::unbounded(map.dim_doubled());
    for &i in map.split_indices() {
        bounds.lower[i] = EPS_FLOOR;
        bounds.lower[map.z_slot(i).unwrap()] = EPS_FLOOR;
    }
    if cfg.tau > 0.0 {
        if let Some(&i) = idx.theta.iter().find(|&&i| !map.is_split(i)) {
            return Err(SysidError::InvalidConfig(format!(
                "l1-penalized coordinate {i} is not split"
            )));
        }
    }
    let cfg = *cfg;
    let groups = groups.clone();
    let map_c = map.clone();
    let all_split: Vec<usize> = map.split_indices().to_vec();
    let objective: Objective<'a> = Box::new(move |v| {
        let (mut val, mut grad) = base_objective(&f, &map_c, v)?;
        // The small epsilon term covers every split coordinate; the l1
        // weight tau applies to the model parameters only.
        val += linear_terms_on(&map_c, &all_split, cfg.epsilon, v, &mut grad);
        val += linear_terms_on(&map_c, &idx.theta, cfg.tau, v, &mut grad);
        val += quadratic_terms(&map_c, &idx.theta, cfg.rho_theta, v, &mut grad);
        val += quadratic_terms(&map_c, &idx.x0, cfg.rho_x, v, &mut grad);
        for g in &groups.groups {
            let mut norm_sq = 0.0;
            for &i in g {
                let z = map_c.z_slot(i).unwrap();
                let s = v[i] + v[z];
                norm_sq += s * s;
            }
            let norm = norm_sq.sqrt();
            val += cfg.tau_g * norm;
            if norm > 0.0 {
                for &i in g {
                    let z = map_c.z_slot(i).unwrap();
                    let s = cfg.tau_g * (v[i] + v[z]) / norm;
                    grad[i] += s;
                    grad[z] += s;
                }
            }
        }
        Ok((val, grad))
    });
    Ok(SplitProblem {
        map,
        bounds,
        objective,
    })
}

/// Map user box constraints on the original vector to bounds on the
/// doubled vector:
///
/// * `x_max_i > 0` bounds the positive part, `y_i <= x_max_i`;
/// * `x_max_i <= 0` removes the positive part (zero-width bound) and
///   forces `z_i >= -x_max_i`;
/// * `x_min_i < 0` bounds the negative part, `z_i <= -x_min_i`;
/// * `x_min_i >= 0` removes the negative part and forces `y_i >= x_min_i`.
///
/// A removed part is realized as the zero-width bound `[0, 0]`. Unsplit
/// coordinates keep their box unchanged.
pub fn map_box_bounds(
    x_min: &DVector<f64>,
    x_max: &DVector<f64>,
    map: &SplitMap,
) -> Result<Bounds> {
    let n = map.dim_original();
    if x_min.len() != n || x_max.len() != n {
        return Err(SysidError::InvalidConfig(
            "box bound length mismatch".into(),
        ));
    }
    for i in 0..n {
        if x_min[i] > x_max[i] {
            return Err(SysidError::InvalidConfig(format!(
                "contradictory box at index {i}: [{}, {}]",
                x_min[i], x_max[i]
            )));
        }
    }
    let mut bounds = Bounds::unbounded(map.dim_doubled());
    for i in 0..n {
        match map.z_slot(i) {
            None => {
                bounds.lower[i] = x_min[i];
                bounds.upper[i] = x_max[i];
            }
            Some(z) => {
                bounds.lower[i] = 0.0;
                bounds.lower[z] = 0.0;
                if x_max[i] > 0.0 {
                    if x_max[i].is_finite() {
                        bounds.upper[i] = x_max[i];
                    }
                } else {
                    bounds.upper[i] = 0.0;
                    bounds.lower[z] = -x_max[i];
                }
                if x_min[i] < 0.0 {
                    if x_min[i].is_finite() {
                        bounds.upper[z] = -x_min[i];
                    }
                } else {
                    bounds.upper[z] = 0.0;
                    bounds.lower[i] = x_min[i];
                }
            }
        }
    }
    bounds.validate()?;
    Ok(bounds)
}
