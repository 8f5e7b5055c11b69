//! The pinned synthetic layer suite used by ablations and acceptance runs.
//!
//! A layer is `rows x cols` weights drawn from a Gaussian, Laplacian or
//! Student-t (4 degrees of freedom) source, unit-variance normalized, with an
//! AR(1) correlation of `ROW_CORRELATION` down each column so sub-blocks have
//! non-trivial covariance. Calibration inputs are i.i.d. standard normal.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::GlvqError;

pub const SUITE_VERSION: u32 = 1;
pub const SUITE_ROWS: usize = 256;
pub const SUITE_COLS_UNIT: usize = 64;
pub const SUITE_CALIB_TOKENS: usize = 128;
pub const SUITE_SEEDS: u64 = 20;
pub const SUITE_DIMS: [usize; 2] = [4, 8];
pub const ROW_CORRELATION: f64 = 0.5;
pub const STUDENT_T_DOF: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Gaussian,
    Laplacian,
    StudentT,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Gaussian, Source::Laplacian, Source::StudentT];

    fn sample(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Source::Gaussian => StandardNormal.sample(rng),
            Source::Laplacian => {
                // Unit-variance Laplace via inverse CDF (b = 1/sqrt 2).
                let u: f64 = rng.random::<f64>() - 0.5;
                -(1.0 - 2.0 * u.abs()).ln() * u.signum() / std::f64::consts::SQRT_2
            }
            Source::StudentT => {
                let t = StudentT::new(STUDENT_T_DOF).expect("valid dof");
                // Variance of t_4 is 2.
                t.sample(rng) / 2f64.sqrt()
            }
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Gaussian => "gaussian",
            Source::Laplacian => "laplacian",
            Source::StudentT => "student-t",
        })
    }
}

impl FromStr for Source {
    type Err = GlvqError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(Source::Gaussian),
            "laplacian" => Ok(Source::Laplacian),
            "student-t" | "student" => Ok(Source::StudentT),
            other => Err(GlvqError::InvalidArgument(format!("unknown source {other:?}"))),
        }
    }
}

/// Shape and distribution of one synthetic layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub source: Source,
    pub rows: usize,
    pub cols: usize,
    pub calib_tokens: usize,
}

impl LayerSpec {
    pub fn suite(source: Source, col_units: usize) -> Self {
        Self { source, rows: SUITE_ROWS, cols: SUITE_COLS_UNIT * col_units, calib_tokens: SUITE_CALIB_TOKENS }
    }
}

/// A weight matrix and its calibration inputs.
#[derive(Debug, Clone)]
pub struct SyntheticLayer {
    pub weights: DMatrix<f64>,
    pub calib: DMatrix<f64>,
}

pub fn generate(spec: &LayerSpec, seed: u64) -> SyntheticLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((SUITE_VERSION as u64) << 48));
    let innov = (1.0 - ROW_CORRELATION * ROW_CORRELATION).sqrt();
    let mut weights = DMatrix::zeros(spec.rows, spec.cols);
    for c in 0..spec.cols {
        let mut prev = spec.source.sample(&mut rng);
        weights[(0, c)] = prev;
        for r in 1..spec.rows {
            prev = ROW_CORRELATION * prev + innov * spec.source.sample(&mut rng);
            weights[(r, c)] = prev;
        }
    }
    let calib = DMatrix::from_fn(spec.cols, spec.calib_tokens, |_, _| StandardNormal.sample(&mut rng));
    SyntheticLayer { weights, calib }
}
