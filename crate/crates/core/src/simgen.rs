//! Synthetic sparse regression data: `Y = Xθ + ε` with Gaussian design and noise.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_core::{precompute, DatasetView};

/// Magnitude bound of the nonzero coefficients.
pub const SIGNAL_BOUND: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub s: usize,
    pub seed: u64,
    pub test_n: usize,
}

impl SimConfig {
    /// Configuration with a held-out set of the same size as the training set.
    pub fn new(n: usize, p: usize, s: usize, seed: u64) -> Self {
        Self {
            n,
            p,
            s,
            seed,
            test_n: n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.test_n == 0 {
            return Err(Error::InvalidConfig("n, p and test_n must be positive".into()));
        }
        if self.s > self.p {
            return Err(Error::InvalidSparsity { s: self.s, p: self.p });
        }
        Ok(())
    }
}

/// The four named benchmark designs as `(n, p, s)`.
pub const NAMED_CONFIGS: [(&str, (usize, usize, usize)); 4] = [
    ("i", (100, 200, 10)),
    ("ii", (400, 1000, 40)),
    ("iii", (200, 800, 5)),
    ("iv", (300, 450, 20)),
];

pub fn predefined_config(name: &str, seed: u64) -> Result<SimConfig> {
    NAMED_CONFIGS
        .iter()
        .find(|(k, _)| *k == name)
        .map(|&(_, (n, p, s))| SimConfig::new(n, p, s, seed))
        .ok_or_else(|| Error::UnknownConfig(name.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimInstance {
    pub train: DatasetView,
    pub test: DatasetView,
    pub theta_true: Vec<f64>,
    /// Sorted ascending.
    pub support: Vec<usize>,
}

fn draw_design(rng: &mut ChaCha8Rng, n: usize, p: usize, theta: &[f64]) -> (Array2<f64>, Array1<f64>) {
    let x = Array2::from_shape_fn((n, p), |_| rng.sample::<f64, _>(StandardNormal));
    let signal = x.dot(&Array1::from(theta.to_vec()));
    let y = signal.mapv(|m| m + rng.sample::<f64, _>(StandardNormal));
    (x, y)
}

/// Draws the support, the coefficients, then the training and test sets,
/// all from a single stream seeded by `config.seed`.
pub fn generate(config: &SimConfig) -> Result<SimInstance> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut support = rand::seq::index::sample(&mut rng, config.p, config.s).into_vec();
    support.sort_unstable();
    let mut theta = vec![0.0; config.p];
    for &i in &support {
        theta[i] = rng.random_range(-SIGNAL_BOUND..SIGNAL_BOUND);
    }
    let (x, y) = draw_design(&mut rng, config.n, config.p, &theta);
    let (xt, yt) = draw_design(&mut rng, config.test_n, config.p, &theta);
    Ok(SimInstance {
        train: precompute(x, y)?,
        test: precompute(xt, yt)?,
        theta_true: theta,
        support,
    })
}

fn write_matrix(path: &Path, prefix: &str, m: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..m.ncols()).map(|j| format!("{prefix}{}", j + 1)))?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_vector(path: &Path, header: &str, v: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([header])?;
    for x in v {
        w.write_record([x.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `X.csv`, `Y.csv`, `theta.csv`, `X_test.csv` and `Y_test.csv` into `dir`.
pub fn write_instance(instance: &SimInstance, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_matrix(&dir.join("X.csv"), "x", instance.train.x())?;
    write_vector(&dir.join("Y.csv"), "y", &instance.train.y().to_vec())?;
    write_vector(&dir.join("theta.csv"), "theta", &instance.theta_true)?;
    write_matrix(&dir.join("X_test.csv"), "x", instance.test.x())?;
    write_vector(&dir.join("Y_test.csv"), "y", &instance.test.y().to_vec())?;
    Ok(())
}

/// Reads a numeric CSV with a header row into a matrix.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut data = Vec::new();
    let mut ncols = None;
    let mut nrows = 0;
    for rec in r.records() {
        let rec = rec?;
        match ncols {
            None => ncols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(Error::Shape(format!(
                    "{}: row {} has {} fields, expected {c}",
                    path.display(),
                    nrows + 1,
                    rec.len()
                )))
            }
            _ => {}
        }
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{}: cannot parse {field:?} as a number", path.display())))?;
            data.push(v);
        }
        nrows += 1;
    }
    let ncols = ncols.ok_or_else(|| Error::Shape(format!("{}: no data rows", path.display())))?;
    Array2::from_shape_vec((nrows, ncols), data).map_err(|e| Error::Shape(e.to_string()))
}

/// Reads a single-column CSV with a header row.
pub fn read_vector(path: &Path) -> Result<Array1<f64>> {
    let m = read_matrix(path)?;
    if m.ncols() != 1 {
        return Err(Error::Shape(format!(
            "{}: expected one column, found {}",
            path.display(),
            m.ncols()
        )));
    }
    Ok(m.column(0).to_owned())
}

/// Inverse of [`write_instance`].
pub fn read_instance(dir: &Path) -> Result<SimInstance> {
    let train = precompute(read_matrix(&dir.join("X.csv"))?, read_vector(&dir.join("Y.csv"))?)?;
    let test = precompute(
        read_matrix(&dir.join("X_test.csv"))?,
        read_vector(&dir.join("Y_test.csv"))?,
    )?;
    let theta_true = read_vector(&dir.join("theta.csv"))?.to_vec();
    if theta_true.len() != train.p() || test.p() != train.p() {
        return Err(Error::Shape("theta, X and X_test disagree on p".into()));
    }
    let support = (0..theta_true.len()).filter(|&i| theta_true[i] != 0.0).collect();
    Ok(SimInstance {
        train,
        test,
        theta_true,
        support,
    })
}
