//! Input/output datasets: synthetic generators for the three benchmark
//! experiments and CSV ingestion/export for external data.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SysidError};
use crate::objectives::Scaling;

/// One experiment: input rows `U` (N x n_u) and output rows `Y` (N x n_y).
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl Experiment {
    pub fn new(u: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if u.nrows() != y.nrows() {
            return Err(SysidError::DimensionMismatch {
                block: "experiment".into(),
                expected: format!("{} rows in U and Y", u.nrows()),
                found: format!("{} vs {}", u.nrows(), y.nrows()),
            });
        }
        Ok(Experiment { u, y })
    }

    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Provenance of a synthetic dataset, written next to exported CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorDescriptor {
    pub kind: String,
    pub seed: u64,
    pub n: usize,
    pub noise_std: f64,
    /// Input excitation; all generators draw i.i.d. standard Gaussians.
    pub excitation: String,
}

/// A collection of experiments with consistent channel counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub experiments: Vec<Experiment>,
    /// Present once standard scaling has been fitted/applied.
    pub scaling: Option<Scaling>,
    pub descriptor: Option<GeneratorDescriptor>,
}

impl Dataset {
    pub fn new(experiments: Vec<Experiment>) -> Result<Self> {
        if experiments.is_empty() {
            return Err(SysidError::InvalidConfig("dataset has no experiments".into()));
        }
        let n_u = experiments[0].u.ncols();
        let n_y = experiments[0].y.ncols();
        for (j, e) in experiments.iter().enumerate() {
            if e.u.ncols() != n_u || e.y.ncols() != n_y {
                return Err(SysidError::DimensionMismatch {
                    block: format!("experiment {j}"),
                    expected: format!("{n_u} input / {n_y} output channels"),
                    found: format!("{} / {}", e.u.ncols(), e.y.ncols()),
                });
            }
        }
        Ok(Dataset {
            experiments,
            scaling: None,
            descriptor: None,
        })
    }

    pub fn single(u: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        Dataset::new(vec![Experiment::new(u, y)?])
    }

    pub fn n_u(&self) -> usize {
        self.experiments[0].u.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.experiments[0].y.ncols()
    }

    /// Total sample count over all experiments.
    pub fn n_samples(&self) -> usize {
        self.experiments.iter().map(Experiment::len).sum()
    }
}

/// A linear state-space system used as ground truth by the generators.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl LinearSystem {
    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }
}

/// Largest eigenvalue magnitude.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|e| e.norm())
        .fold(0.0, f64::max)
}

fn draw_matrix(rng: &mut ChaCha8Rng, nr: usize, nc: usize, dist: &Normal<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(nr, nc);
    for r in 0..nr {
        for c in 0..nc {
            m[(r, c)] = dist.sample(rng);
        }
    }
    m
}

/// Simulate `sys` from zero initial state under Gaussian process and
/// measurement noise of the given standard deviation.
fn simulate_noisy(
    sys: &LinearSystem,
    u: &DMatrix<f64>,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> DMatrix<f64> {
    let n = u.nrows();
    let n_x = sys.n_x();
    let n_y = sys.c.nrows();
    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let mut y = DMatrix::zeros(n, n_y);
    let mut x = DVector::zeros(n_x);
    for k in 0..n {
        let uk = u.row(k).transpose();
        let mut yk = &sys.c * &x + &sys.d * &uk;
        if noise_std > 0.0 {
            for i in 0..n_y {
                yk[i] += noise.sample(rng);
            }
        }
        y.row_mut(k).copy_from(&yk.transpose());
        let mut xn = &sys.a * &x + &sys.b * &uk;
        if noise_std > 0.0 {
            for i in 0..n_x {
                xn[i] += noise.sample(rng);
            }
        }
        x = xn;
    }
    y
}

fn gaussian_inputs(rng: &mut ChaCha8Rng, n: usize, n_u: usize) -> DMatrix<f64> {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut u = DMatrix::zeros(n, n_u);
    for k in 0..n {
        for c in 0..n_u {
            u[(k, c)] = std_normal.sample(rng);
        }
    }
    u
}

/// Sample a random stable linear system: Gaussian `A` rescaled to spectral
/// radius 0.9, Gaussian `B`, `C` (and `D` when requested) with unit std.
fn random_stable_system(
    rng: &mut ChaCha8Rng,
    n_x: usize,
    n_u: usize,
    n_y: usize,
    feedthrough: bool,
) -> LinearSystem {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut a = draw_matrix(rng, n_x, n_x, &std_normal);
    let rho = spectral_radius(&a);
    if rho > 0.0 {
        a *= 0.9 / rho;
    }
    let b = draw_matrix(rng, n_x, n_u, &std_normal);
    let c = draw_matrix(rng, n_y, n_x, &std_normal);
    let d = if feedthrough {
        draw_matrix(rng, n_y, n_u, &std_normal)
    } else {
        DMatrix::zeros(n_y, n_u)
    };
    LinearSystem { a, b, c, d }
}

/// The fixed 6-state, 2-input, 2-output system of the order-reduction
/// experiment; outputs select states 1 and 3.
pub fn order_reduction_system() -> LinearSystem {
    let a = DMatrix::from_row_slice(
        6,
        6,
        &[
            0.96, 0.26, 0.04, 0.0, 0.0, 0.0, //
            -0.26, 0.70, 0.26, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.93, 0.32, 0.07, 0.0, //
            0.0, 0.0, -0.32, 0.61, 0.32, 0.0, //
            0.0, 0.0, 0.0, 0.0, 0.90, 0.38, //
            0.0, 0.0, 0.0, 0.0, -0.38, 0.52,
        ],
    );
    let b = DMatrix::from_row_slice(
        6,
        2,
        &[
            0.0, 0.0, //
            0.0, 0.0, //
            0.07, 0.0, //
            0.32, 0.0, //
            0.0, 0.10, //
            0.0, 0.38,
        ],
    );
    let mut c = DMatrix::zeros(2, 6);
    c[(0, 0)] = 1.0;
    c[(1, 2)] = 1.0;
    let d = DMatrix::zeros(2, 2);
    LinearSystem { a, b, c, d }
}

/// Training data for the model-order-reduction experiment: the fixed
/// 6-state system driven by Gaussian inputs under process and measurement
/// noise.
pub fn gen_order_reduction(seed: u64, n: usize, noise_std: f64) -> (Dataset, LinearSystem) {
    let sys = order_reduction_system();
    debug_assert!(spectral_radius(&sys.a) < 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = gaussian_inputs(&mut rng, n, 2);
    let y = simulate_noisy(&sys, &u, noise_std, &mut rng);
    let mut ds = Dataset::single(u, y).unwrap();
    ds.descriptor = Some(GeneratorDescriptor {
        kind: "order_reduction".into(),
        seed,
        n,
        noise_std,
        excitation: "gaussian_iid_std1".into(),
    });
    (ds, sys)
}

/// Training data for the input-selection experiment: a random stable
/// 3-state, 10-input, 1-output system whose last five `B` columns are
/// scaled by 1e-3, making those inputs almost redundant.
pub fn gen_input_selection(seed: u64, n: usize, noise_std: f64) -> (Dataset, LinearSystem) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sys = random_stable_system(&mut rng, 3, 10, 1, false);
    debug_assert!(spectral_radius(&sys.a) < 1.0);
    for c in 5..10 {
        for r in 0..3 {
            sys.b[(r, c)] *= 1e-3;
        }
    }
    let u = gaussian_inputs(&mut rng, n, 10);
    let y = simulate_noisy(&sys, &u, noise_std, &mut rng);
    let mut ds = Dataset::single(u, y).unwrap();
    ds.descriptor = Some(GeneratorDescriptor {
        kind: "input_selection".into(),
        seed,
        n,
        noise_std,
        excitation: "gaussian_iid_std1".into(),
    });
    (ds, sys)
}

/// Training data for the causal-effects experiment: a random stable
/// strictly-causal system (10 states, 5 inputs, 5 outputs, `D = 0`). The
/// stacked signal `[y; u]` is returned as both the input and the output
/// channels so a self-regression model can be fitted on unlabeled data.
pub fn gen_causal(seed: u64, n: usize, noise_std: f64) -> (Dataset, LinearSystem) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sys = random_stable_system(&mut rng, 10, 5, 5, false);
    debug_assert!(spectral_radius(&sys.a) < 1.0);
    let u = gaussian_inputs(&mut rng, n, 5);
    let y = simulate_noisy(&sys, &u, noise_std, &mut rng);
    let mut stacked = DMatrix::zeros(n, 10);
    stacked.view_mut((0, 0), (n, 5)).copy_from(&y);
    stacked.view_mut((0, 5), (n, 5)).copy_from(&u);
    let mut ds = Dataset::single(stacked.clone(), stacked).unwrap();
    ds.descriptor = Some(GeneratorDescriptor {
        kind: "causal".into(),
        seed,
        n,
        noise_std,
        excitation: "gaussian_iid_std1".into(),
    });
    (ds, sys)
}

/// Sidecar metadata written next to exported CSV files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSidecar {
    pub n_u: usize,
    pub n_y: usize,
    /// Start row of each experiment; the first entry is always 0.
    pub boundaries: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor: Option<GeneratorDescriptor>,
}

/// Path of the metadata sidecar for a CSV file.
pub fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
    let mut os = csv_path.as_os_str().to_owned();
    os.push(".meta.toml");
    std::path::PathBuf::from(os)
}

/// Load a dataset from CSV. Columns must be `u1..u_{n_u}, y1..y_{n_y}`
/// with a header row; `boundaries` lists the start row of each experiment
/// (`[0]` for a single experiment).
pub fn load_csv(path: &Path, n_u: usize, n_y: usize, boundaries: &[usize]) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| SysidError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header_len = reader
        .headers()
        .map_err(SysidError::Csv)?
        .len();
    if header_len != n_u + n_y {
        return Err(SysidError::MalformedData {
            line: 1,
            msg: format!("expected {} columns, header has {}", n_u + n_y, header_len),
        });
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // 1-based, after the header
        let record = record.map_err(SysidError::Csv)?;
        if record.len() != n_u + n_y {
            return Err(SysidError::MalformedData {
                line,
                msg: format!("expected {} fields, found {}", n_u + n_y, record.len()),
            });
        }
        let mut row = Vec::with_capacity(n_u + n_y);
        for field in record.iter() {
            let v: f64 = field.trim().parse().map_err(|_| SysidError::MalformedData {
                line,
                msg: format!("cannot parse '{field}' as a number"),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(SysidError::MalformedData {
            line: 1,
            msg: "no data rows".into(),
        });
    }
    let bounds: Vec<usize> = if boundaries.is_empty() {
        vec![0]
    } else {
        boundaries.to_vec()
    };
    if bounds[0] != 0 {
        return Err(SysidError::InvalidConfig(
            "experiment boundaries must start at 0".into(),
        ));
    }
    if bounds.windows(2).any(|w| w[0] >= w[1]) || *bounds.last().unwrap() >= rows.len() {
        return Err(SysidError::InvalidConfig(format!(
            "experiment boundaries {bounds:?} invalid for {} rows",
            rows.len()
        )));
    }
    let mut experiments = Vec::with_capacity(bounds.len());
    for (j, &start) in bounds.iter().enumerate() {
        let end = bounds.get(j + 1).copied().unwrap_or(rows.len());
        let len = end - start;
        let mut u = DMatrix::zeros(len, n_u);
        let mut y = DMatrix::zeros(len, n_y);
        for (k, row) in rows[start..end].iter().enumerate() {
            for c in 0..n_u {
                u[(k, c)] = row[c];
            }
            for c in 0..n_y {
                y[(k, c)] = row[n_u + c];
            }
        }
        experiments.push(Experiment::new(u, y)?);
    }
    Dataset::new(experiments)
}

/// Export a dataset as CSV plus a metadata sidecar. Floats are written in
/// shortest round-trip form so `load(export(d)) == d` exactly.
pub fn export_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let n_u = ds.n_u();
    let n_y = ds.n_y();
    let header: Vec<String> = (1..=n_u)
        .map(|i| format!("u{i}"))
        .chain((1..=n_y).map(|i| format!("y{i}")))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for e in &ds.experiments {
        for k in 0..e.len() {
            let mut fields = Vec::with_capacity(n_u + n_y);
            for c in 0..n_u {
                fields.push(format!("{}", e.u[(k, c)]));
            }
            for c in 0..n_y {
                fields.push(format!("{}", e.y[(k, c)]));
            }
            out.push_str(&fields.join(","));
            out.push('\n');
        }
    }
    let io_err = |e: std::io::Error| SysidError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(out.as_bytes()).map_err(io_err)?;

    let mut boundaries = Vec::with_capacity(ds.experiments.len());
    let mut offset = 0;
    for e in &ds.experiments {
        boundaries.push(offset);
        offset += e.len();
    }
    let sidecar = CsvSidecar {
        n_u,
        n_y,
        boundaries,
        descriptor: ds.descriptor.clone(),
    };
    let text = toml::to_string_pretty(&sidecar)
        .map_err(|e| SysidError::Serialization(e.to_string()))?;
    let sc_path = sidecar_path(path);
    fs::write(&sc_path, text).map_err(|e| SysidError::Io {
        path: sc_path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// Read the sidecar written by [`export_csv`], if present.
pub fn load_sidecar(csv_path: &Path) -> Result<Option<CsvSidecar>> {
    let sc_path = sidecar_path(csv_path);
    if !sc_path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&sc_path).map_err(|e| SysidError::Io {
        path: sc_path.display().to_string(),
        source: e,
    })?;
    let sidecar: CsvSidecar =
        toml::from_str(&text).map_err(|e| SysidError::Serialization(e.to_string()))?;
    Ok(Some(sidecar))
}
