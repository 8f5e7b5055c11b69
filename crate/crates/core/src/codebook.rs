//! Per-group lattice codebook learning.
//!
//! A weight group `W` (m x n) is scaled by `max|W|`, flattened column-major,
//! zero-padded and cut into `l` columns of length `d`. Those columns are
//! companded, assigned to lattice points by Babai rounding (codes clamped to
//! the b-bit range) and decoded as `scale * expand(G Z)`. The generation
//! matrix `G` and the companding strength are fitted by gradient descent on
//! the output reconstruction error with a Frobenius anchor to the initial
//! basis, while the codes are refreshed at every step.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::companding::{self, CompandingParam, KurtosisConvention, MuLaw};
use crate::error::{GlvqError, Result};
use crate::lattice::{round_half_up, GenerationMatrix};

/// Default Frobenius regularization weight.
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Maximum number of step halvings tried within a single iteration.
const MAX_HALVINGS: usize = 40;

/// Consecutive low-progress iterations that end a fit.
const PATIENCE: usize = 5;

/// Inclusive code range `[-2^(b-1), 2^(b-1) - 1]`.
pub fn code_range(bits: u8) -> (i32, i32) {
    let half = 1i32 << (bits - 1);
    (-half, half - 1)
}

fn check_bits(bits: u8) -> Result<()> {
    if !(1..=16).contains(&bits) {
        return Err(GlvqError::InvalidArgument(format!("bit-width {bits} outside 1..=16")));
    }
    Ok(())
}

/// A block of layer weights quantized with one shared codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGroup {
    weights: DMatrix<f64>,
}

impl WeightGroup {
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(GlvqError::NonFinite("weight group"));
        }
        if weights.is_empty() {
            return Err(GlvqError::ShapeMismatch("weight group is empty".into()));
        }
        Ok(Self { weights })
    }

    pub fn rows(&self) -> usize {
        self.weights.nrows()
    }

    pub fn cols(&self) -> usize {
        self.weights.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn max_abs(&self) -> f64 {
        self.weights.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Calibration inputs `X` (n x T): one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBatch {
    features: DMatrix<f64>,
}

impl CalibrationBatch {
    pub fn new(features: DMatrix<f64>) -> Result<Self> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(GlvqError::NonFinite("calibration batch"));
        }
        if features.ncols() == 0 || features.nrows() == 0 {
            return Err(GlvqError::ShapeMismatch("calibration batch needs T >= 1 samples".into()));
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn samples(&self) -> usize {
        self.features.ncols()
    }

    /// Rows `start..start+len`, i.e. the inputs seen by a column block of a layer.
    pub fn rows_slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.dim() {
            return Err(GlvqError::ShapeMismatch(format!(
                "rows {start}..{} exceed calibration dimension {}",
                start + len,
                self.dim()
            )));
        }
        Self::new(self.features.rows(start, len).into_owned())
    }

    /// `X X^T`, the only statistic of `X` the output loss depends on.
    pub fn gram(&self) -> DMatrix<f64> {
        &self.features * self.features.transpose()
    }
}

fn check_calib(weights: &WeightGroup, calib: &CalibrationBatch) -> Result<()> {
    if weights.cols() != calib.dim() {
        return Err(GlvqError::ShapeMismatch(format!(
            "weight group has {} columns but calibration inputs have dimension {}",
            weights.cols(),
            calib.dim()
        )));
    }
    Ok(())
}

/// Integer lattice indices, one length-`d` column per sub-block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMatrix {
    codes: DMatrix<i32>,
    bits: u8,
}

impl CodeMatrix {
    /// Validates that every code fits the b-bit range.
    pub fn new(codes: DMatrix<i32>, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        let (lo, hi) = code_range(bits);
        if let Some(&c) = codes.iter().find(|&&c| c < lo || c > hi) {
            return Err(GlvqError::CodeOutOfRange { code: c as i64, bits });
        }
        Ok(Self { codes, bits })
    }

    pub fn zeros(dim: usize, columns: usize, bits: u8) -> Self {
        Self { codes: DMatrix::zeros(dim, columns), bits }
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn dim(&self) -> usize {
        self.codes.nrows()
    }

    pub fn columns(&self) -> usize {
        self.codes.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<i32> {
        &self.codes
    }

    /// Codes in column-major order.
    pub fn as_slice(&self) -> &[i32] {
        self.codes.as_slice()
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        self.codes.map(|c| c as f64)
    }
}

/// Everything needed to decode one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCodec {
    pub basis: GenerationMatrix,
    /// `None` when companding is disabled (linear decode).
    pub mu: Option<CompandingParam>,
    pub bits: u8,
    /// Pre-companding normalizer, `max|W|` of the group.
    pub scale: f64,
    pub rows: usize,
    pub cols: usize,
    pub pad: usize,
}

impl GroupCodec {
    pub fn new(
        basis: GenerationMatrix,
        mu: Option<CompandingParam>,
        bits: u8,
        scale: f64,
        rows: usize,
        cols: usize,
    ) -> Result<Self> {
        check_bits(bits)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(GlvqError::InvalidArgument(format!("scale must be positive, got {scale}")));
        }
        if rows == 0 || cols == 0 {
            return Err(GlvqError::ShapeMismatch("group geometry must be non-empty".into()));
        }
        let d = basis.dim();
        let pad = (d - (rows * cols) % d) % d;
        Ok(Self { basis, mu, bits, scale, rows, cols, pad })
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    /// Number of length-`d` sub-blocks `l`, with `d l = rows cols + pad`.
    pub fn columns(&self) -> usize {
        (self.rows * self.cols + self.pad) / self.dim()
    }

    fn curve(&self) -> Option<MuLaw> {
        self.mu.map(MuLaw::new)
    }

    /// Companded, normalized sub-blocks `F(reshape(W) / scale)`.
    pub fn latent(&self, weights: &WeightGroup) -> Result<DMatrix<f64>> {
        self.check_geometry(weights)?;
        let (blocks, _) = reshape_group(weights.matrix(), self.dim());
        Ok(compand_blocks(&(blocks / self.scale), self.curve()))
    }

    /// Decodes a single sub-block: `scale * F^{-1}(G z)`.
    pub fn decode_block(&self, z: &[i32]) -> Result<Vec<f64>> {
        let d = self.dim();
        if z.len() != d {
            return Err(GlvqError::ShapeMismatch(format!("code column length {} != {d}", z.len())));
        }
        let g = self.basis.matrix();
        let curve = self.curve();
        Ok((0..d)
            .map(|r| {
                let y: f64 = (0..d).map(|c| g[(r, c)] * z[c] as f64).sum();
                self.scale * expand_point(curve, y)
            })
            .collect())
    }

    fn check_geometry(&self, weights: &WeightGroup) -> Result<()> {
        if weights.rows() != self.rows || weights.cols() != self.cols {
            return Err(GlvqError::ShapeMismatch(format!(
                "codec geometry {}x{} does not match weights {}x{}",
                self.rows,
                self.cols,
                weights.rows(),
                weights.cols()
            )));
        }
        Ok(())
    }
}

fn expand_point(curve: Option<MuLaw>, y: f64) -> f64 {
    curve.map_or(y, |c| c.expand(y))
}

fn compand_blocks(blocks: &DMatrix<f64>, curve: Option<MuLaw>) -> DMatrix<f64> {
    match curve {
        Some(c) => blocks.map(|v| c.compress(v)),
        None => blocks.clone(),
    }
}

/// Column-major flatten, zero-pad to a multiple of `dim`, cut into columns.
/// Returns the `dim x l` block matrix and the pad count.
pub fn reshape_group(weights: &DMatrix<f64>, dim: usize) -> (DMatrix<f64>, usize) {
    assert!(dim >= 1, "lattice dimension must be positive");
    let total = weights.len();
    let pad = (dim - total % dim) % dim;
    let mut flat = Vec::with_capacity(total + pad);
    flat.extend_from_slice(weights.as_slice());
    flat.resize(total + pad, 0.0);
    let l = (total + pad) / dim;
    (DMatrix::from_vec(dim, l, flat), pad)
}

/// Inverse of [`reshape_group`]; drops the padded tail.
pub fn unreshape(blocks: &DMatrix<f64>, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let total = rows * cols;
    if blocks.len() < total || blocks.len() - total >= blocks.nrows().max(1) {
        return Err(GlvqError::ShapeMismatch(format!(
            "{} block entries cannot hold a {rows}x{cols} matrix",
            blocks.len()
        )));
    }
    Ok(DMatrix::from_column_slice(rows, cols, &blocks.as_slice()[..total]))
}

/// Babai rounding of every column followed by clamping to the b-bit range.
pub fn quantize_columns(latent: &DMatrix<f64>, codec: &GroupCodec) -> Result<CodeMatrix> {
    let d = codec.dim();
    if latent.nrows() != d {
        return Err(GlvqError::ShapeMismatch(format!(
            "latent has {} rows, lattice dimension is {d}",
            latent.nrows()
        )));
    }
    let coords = if d == 1 {
        latent / codec.basis.matrix()[(0, 0)]
    } else {
        codec.basis.matrix().clone().lu().solve(latent).ok_or(GlvqError::SingularBasis)?
    };
    let (lo, hi) = code_range(codec.bits);
    let (lo, hi) = (lo as f64, hi as f64);
    let codes = coords.map(|x| round_half_up(x).clamp(lo, hi) as i32);
    Ok(CodeMatrix { codes, bits: codec.bits })
}

/// Greedy coordinate descent index assignment: starting from zero codes,
/// each coordinate in turn takes the in-range integer minimizing the
/// column residual with the others held fixed.
pub fn gcd_quantize_columns(
    latent: &DMatrix<f64>,
    codec: &GroupCodec,
    sweeps: usize,
) -> Result<CodeMatrix> {
    let d = codec.dim();
    if latent.nrows() != d {
        return Err(GlvqError::ShapeMismatch(format!(
            "latent has {} rows, lattice dimension is {d}",
            latent.nrows()
        )));
    }
    if sweeps == 0 {
        return Err(GlvqError::InvalidArgument("GCD needs at least one sweep".into()));
    }
    let g = codec.basis.matrix();
    let norms: Vec<f64> = g.column_iter().map(|c| c.norm_squared()).collect();
    let (lo, hi) = code_range(codec.bits);
    let (lo, hi) = (lo as f64, hi as f64);
    let mut codes = DMatrix::<i32>::zeros(d, latent.ncols());
    let mut residual = vec![0.0; d];
    for (j, target) in latent.column_iter().enumerate() {
        residual.copy_from_slice(target.as_slice());
        for _ in 0..sweeps {
            for k in 0..d {
                let gk = g.column(k);
                let zk = codes[(k, j)] as f64;
                // Best real value for z_k given the others, then the nearest
                // in-range integer (exact minimizer of a 1-D quadratic).
                let proj: f64 = (0..d).map(|r| residual[r] * gk[r]).sum::<f64>() / norms[k] + zk;
                let new = round_half_up(proj).clamp(lo, hi);
                if new != zk {
                    for (r, res) in residual.iter_mut().enumerate() {
                        *res -= (new - zk) * gk[r];
                    }
                    codes[(k, j)] = new as i32;
                }
            }
        }
    }
    Ok(CodeMatrix { codes, bits: codec.bits })
}

/// Decoded blocks `G Z` before expansion and scaling.
fn lattice_points(codes: &CodeMatrix, basis: &DMatrix<f64>) -> DMatrix<f64> {
    basis * codes.to_f64()
}

/// `W_hat = scale * F^{-1}(G Z)` reshaped back to the group geometry.
pub fn reconstruct(codes: &CodeMatrix, codec: &GroupCodec) -> Result<DMatrix<f64>> {
    if codes.dim() != codec.dim() || codes.columns() != codec.columns() {
        return Err(GlvqError::ShapeMismatch(format!(
            "codes are {}x{}, codec expects {}x{}",
            codes.dim(),
            codes.columns(),
            codec.dim(),
            codec.columns()
        )));
    }
    let y = lattice_points(codes, codec.basis.matrix());
    let curve = codec.curve();
    let blocks = y.map(|v| codec.scale * expand_point(curve, v));
    unreshape(&blocks, codec.rows, codec.cols)
}

/// `|W X - W_hat X|_F^2 + lambda |G - G0|_F^2`, evaluated directly from `X`.
pub fn group_loss(
    weights: &WeightGroup,
    codec: &GroupCodec,
    codes: &CodeMatrix,
    calib: &CalibrationBatch,
    basis_init: &GenerationMatrix,
    lambda: f64,
) -> Result<f64> {
    check_calib(weights, calib)?;
    codec.check_geometry(weights)?;
    let w_hat = reconstruct(codes, codec)?;
    let x = calib.features();
    let data = (weights.matrix() * x - w_hat * x).norm_squared();
    Ok(data + lambda * regularizer(codec.basis.matrix(), basis_init.matrix()))
}

fn regularizer(g: &DMatrix<f64>, g0: &DMatrix<f64>) -> f64 {
    (g - g0).norm_squared()
}

/// Gradients of the group loss with the codes held constant.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub basis: DMatrix<f64>,
    /// Zero when companding is disabled.
    pub mu: f64,
}

/// Loss terms and gradients over precomputed calibration statistics.
struct Objective<'a> {
    weights: &'a DMatrix<f64>,
    gram: DMatrix<f64>,
    basis_init: DMatrix<f64>,
    lambda: f64,
    rows: usize,
    cols: usize,
}

struct Evaluation {
    data: f64,
    total: f64,
}

impl<'a> Objective<'a> {
    fn new(weights: &'a WeightGroup, calib: &CalibrationBatch, basis_init: &GenerationMatrix, lambda: f64) -> Self {
        Self {
            weights: weights.matrix(),
            gram: calib.gram(),
            basis_init: basis_init.matrix().clone(),
            lambda,
            rows: weights.rows(),
            cols: weights.cols(),
        }
    }

    fn residual(&self, basis: &DMatrix<f64>, curve: Option<MuLaw>, scale: f64, codes: &CodeMatrix) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let y = lattice_points(codes, basis);
        let blocks = y.map(|v| scale * expand_point(curve, v));
        let w_hat = unreshape(&blocks, self.rows, self.cols)?;
        Ok((self.weights - w_hat, y))
    }

    fn evaluate(&self, basis: &DMatrix<f64>, curve: Option<MuLaw>, scale: f64, codes: &CodeMatrix) -> Result<Evaluation> {
        let (diff, _) = self.residual(basis, curve, scale, codes)?;
        let data = (&diff * &self.gram).component_mul(&diff).sum().max(0.0);
        let total = data + self.lambda * regularizer(basis, &self.basis_init);
        Ok(Evaluation { data, total })
    }

    fn gradients(&self, basis: &DMatrix<f64>, curve: Option<MuLaw>, scale: f64, codes: &CodeMatrix) -> Result<LossGradients> {
        let (diff, y) = self.residual(basis, curve, scale, codes)?;
        // dL/dW_hat = -2 (W - W_hat) X X^T, moved into block layout.
        let dw = (&diff * &self.gram) * -2.0;
        let (dblocks, _) = reshape_group(&dw, basis.nrows());
        let (dy, dmu) = match curve {
            Some(c) => {
                let mut dmu = 0.0;
                let dy = DMatrix::from_fn(y.nrows(), y.ncols(), |r, col| {
                    let v = y[(r, col)];
                    let up = dblocks[(r, col)] * scale;
                    dmu += up * c.expand_dmu(v);
                    up * c.expand_dy(v)
                });
                (dy, dmu)
            }
            None => (dblocks * scale, 0.0),
        };
        let reg = (basis - &self.basis_init) * (2.0 * self.lambda);
        Ok(LossGradients { basis: dy * codes.to_f64().transpose() + reg, mu: dmu })
    }
}

/// Analytic gradients of [`group_loss`] w.r.t. the basis entries and `mu`.
pub fn loss_gradients(
    weights: &WeightGroup,
    codec: &GroupCodec,
    codes: &CodeMatrix,
    calib: &CalibrationBatch,
    basis_init: &GenerationMatrix,
    lambda: f64,
) -> Result<LossGradients> {
    check_calib(weights, calib)?;
    codec.check_geometry(weights)?;
    let obj = Objective::new(weights, calib, basis_init, lambda);
    obj.gradients(codec.basis.matrix(), codec.curve(), codec.scale, codes)
}

pub fn grad_basis(
    weights: &WeightGroup,
    codec: &GroupCodec,
    codes: &CodeMatrix,
    calib: &CalibrationBatch,
    basis_init: &GenerationMatrix,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    loss_gradients(weights, codec, codes, calib, basis_init, lambda).map(|g| g.basis)
}

pub fn grad_mu(
    weights: &WeightGroup,
    codec: &GroupCodec,
    codes: &CodeMatrix,
    calib: &CalibrationBatch,
    basis_init: &GenerationMatrix,
    lambda: f64,
) -> Result<f64> {
    loss_gradients(weights, codec, codes, calib, basis_init, lambda).map(|g| g.mu)
}

/// Clamps the singular values of `basis` into `[sigma_min, sigma_max]`.
pub fn spectral_normalize(basis: &GenerationMatrix, sigma_min: f64, sigma_max: f64) -> Result<GenerationMatrix> {
    if !(sigma_min > 0.0 && sigma_min < sigma_max) {
        return Err(GlvqError::InvalidArgument(format!(
            "spectral range [{sigma_min}, {sigma_max}] is invalid"
        )));
    }
    Ok(clamp_spectrum(basis.matrix(), sigma_min, sigma_max))
}

fn clamp_spectrum(m: &DMatrix<f64>, sigma_min: f64, sigma_max: f64) -> GenerationMatrix {
    let eig = (m.transpose() * m).symmetric_eigen();
    let sigma = eig.eigenvalues.map(|e| e.max(0.0).sqrt());
    let slack = 1e-12;
    if sigma.iter().all(|&s| s >= sigma_min * (1.0 - slack) && s <= sigma_max * (1.0 + slack)) {
        return GenerationMatrix::from_matrix_unchecked(m.clone());
    }
    let ratio = sigma.map(|s| if s > 0.0 { s.clamp(sigma_min, sigma_max) / s } else { 1.0 });
    let v = &eig.eigenvectors;
    GenerationMatrix::from_matrix_unchecked(m * v * DMatrix::from_diagonal(&ratio) * v.transpose())
}

/// Index assignment strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rounding {
    Babai,
    Gcd { sweeps: usize },
}

impl Default for Rounding {
    fn default() -> Self {
        Rounding::Babai
    }
}

/// Optimizer and initialization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lr_basis: f64,
    pub lr_mu: f64,
    /// Relative loss change below which the loop stops.
    pub tolerance: f64,
    pub max_iters: usize,
    pub lambda: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub companding: bool,
    /// Keep the basis at its (identity-shaped) initialization.
    pub fixed_basis: bool,
    pub rounding: Rounding,
    pub kurtosis: KurtosisConvention,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr_basis: 1e-3,
            lr_mu: 1e-1,
            tolerance: 1e-4,
            max_iters: 200,
            lambda: DEFAULT_LAMBDA,
            sigma_min: 1e-2,
            sigma_max: 1e1,
            companding: true,
            fixed_basis: false,
            rounding: Rounding::Babai,
            kurtosis: KurtosisConvention::Excess,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(GlvqError::InvalidArgument(msg.to_string()));
        if !(self.lr_basis > 0.0 && self.lr_basis.is_finite()) {
            return bad("basis learning rate must be positive");
        }
        if !(self.lr_mu >= 0.0 && self.lr_mu.is_finite()) {
            return bad("mu learning rate must be non-negative");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return bad("spectral range must satisfy 0 < sigma_min < sigma_max");
        }
        if let Rounding::Gcd { sweeps: 0 } = self.rounding {
            return bad("GCD rounding needs at least one sweep");
        }
        Ok(())
    }
}

/// Outcome of one [`fit_group`] run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Loss at initialization followed by every accepted step.
    pub loss_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_loss: f64,
    /// Output reconstruction term of the final loss.
    pub final_data_loss: f64,
}

fn percentile_abs(values: impl Iterator<Item = f64>, q: f64) -> f64 {
    let mut v: Vec<f64> = values.map(f64::abs).collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Cholesky-based initial codec for a group.
///
/// The basis is `alpha * chol(cov)` where `cov` is the covariance of the
/// companded sub-blocks and `alpha` puts the 99th percentile of the
/// whitened coordinates on the outermost code level `2^(b-1) - 0.5`.
/// With `fixed_basis` the Cholesky factor is replaced by the identity.
pub fn init_codec(weights: &WeightGroup, dim: usize, bits: u8, config: &FitConfig) -> Result<GroupCodec> {
    check_bits(bits)?;
    if dim == 0 || weights.rows() * weights.cols() < dim {
        return Err(GlvqError::InvalidArgument(format!(
            "group of {} weights cannot fill a dimension-{dim} block",
            weights.rows() * weights.cols()
        )));
    }
    let level = (1u32 << (bits - 1)) as f64 - 0.5;
    let max_abs = weights.max_abs();
    if max_abs == 0.0 {
        let basis = GenerationMatrix::from_matrix_unchecked(
            DMatrix::identity(dim, dim) * 2f64.powi(-(bits as i32 - 1)),
        );
        let mu = config.companding.then(|| CompandingParam::projected(companding::MU_MIN));
        return GroupCodec::new(basis, mu, bits, 1.0, weights.rows(), weights.cols());
    }

    let mu = if config.companding {
        let flat = weights.matrix().as_slice();
        Some(match companding::kurtosis(flat, config.kurtosis) {
            Ok(k) => companding::init_mu(k),
            Err(GlvqError::DegenerateSample(_)) => CompandingParam::projected(companding::MU_MIN),
            Err(e) => return Err(e),
        })
    } else {
        None
    };
    let (blocks, _) = reshape_group(weights.matrix(), dim);
    let latent = compand_blocks(&(blocks / max_abs), mu.map(MuLaw::new));
    let l = latent.ncols() as f64;

    let factor = if config.fixed_basis {
        DMatrix::identity(dim, dim)
    } else {
        let cov = (&latent * latent.transpose()) / l + DMatrix::identity(dim, dim) * 1e-6;
        cov.cholesky().ok_or(GlvqError::SingularBasis)?.l()
    };
    let whitened = factor
        .solve_lower_triangular(&latent)
        .ok_or(GlvqError::SingularBasis)?;
    let p99 = percentile_abs(whitened.iter().copied(), 0.99);
    let alpha = if p99 > 0.0 { p99 / level } else { 1.0 / level };
    let basis = clamp_spectrum(&(factor * alpha), config.sigma_min, config.sigma_max);
    GroupCodec::new(basis, mu, bits, max_abs, weights.rows(), weights.cols())
}

fn assign_codes(latent: &DMatrix<f64>, codec: &GroupCodec, rounding: Rounding) -> Result<CodeMatrix> {
    match rounding {
        Rounding::Babai => quantize_columns(latent, codec),
        Rounding::Gcd { sweeps } => gcd_quantize_columns(latent, codec, sweeps),
    }
}

/// Codes for `weights` under `codec` with the configured rounding.
pub fn encode_group(weights: &WeightGroup, codec: &GroupCodec, rounding: Rounding) -> Result<CodeMatrix> {
    assign_codes(&codec.latent(weights)?, codec, rounding)
}

/// Initializes a codec and runs [`fit_group_from`].
pub fn fit_group(
    weights: &WeightGroup,
    calib: &CalibrationBatch,
    dim: usize,
    bits: u8,
    config: &FitConfig,
) -> Result<(GroupCodec, CodeMatrix, FitReport)> {
    config.validate()?;
    let codec = init_codec(weights, dim, bits, config)?;
    fit_group_from(weights, calib, codec, config)
}

struct FitState {
    codec: GroupCodec,
    latent: DMatrix<f64>,
    codes: CodeMatrix,
    eval: Evaluation,
}

/// Tries `propose` starting from step size `lr`, halving until the loss does
/// not increase. Refreshed codes are preferred; if they raise the loss, the
/// parameter step is tried with the previous codes.
fn line_search(
    objective: &Objective<'_>,
    normalized: &DMatrix<f64>,
    state: &FitState,
    config: &FitConfig,
    mut lr: f64,
    propose: impl Fn(&GroupCodec, f64) -> GroupCodec,
) -> Result<Option<FitState>> {
    let scale = state.codec.scale;
    for _ in 0..MAX_HALVINGS {
        let trial = propose(&state.codec, lr);
        let latent = if trial.mu != state.codec.mu {
            compand_blocks(normalized, trial.curve())
        } else {
            state.latent.clone()
        };
        let codes = assign_codes(&latent, &trial, config.rounding)?;
        let eval = objective.evaluate(trial.basis.matrix(), trial.curve(), scale, &codes)?;
        if eval.total <= state.eval.total {
            return Ok(Some(FitState { codec: trial, latent, codes, eval }));
        }
        let kept = objective.evaluate(trial.basis.matrix(), trial.curve(), scale, &state.codes)?;
        if kept.total < state.eval.total {
            return Ok(Some(FitState { codec: trial, latent, codes: state.codes.clone(), eval: kept }));
        }
        lr *= 0.5;
    }
    Ok(None)
}

/// Alternating optimization starting from `initial`, which also anchors the
/// Frobenius regularizer.
///
/// Each iteration takes a gradient step on the basis and then on `mu`, each
/// with codes held constant for the gradient and refreshed for the loss. A
/// step that raises the loss is retried at half the step size, and every
/// iteration starts again from the configured size.
pub fn fit_group_from(
    weights: &WeightGroup,
    calib: &CalibrationBatch,
    initial: GroupCodec,
    config: &FitConfig,
) -> Result<(GroupCodec, CodeMatrix, FitReport)> {
    config.validate()?;
    check_calib(weights, calib)?;
    initial.check_geometry(weights)?;
    if config.companding != initial.mu.is_some() {
        return Err(GlvqError::InvalidArgument(
            "initial codec companding does not match configuration".into(),
        ));
    }

    let basis_init = initial.basis.clone();
    let objective = Objective::new(weights, calib, &basis_init, config.lambda);
    let (blocks, _) = reshape_group(weights.matrix(), initial.dim());
    let normalized = blocks / initial.scale;
    let scale = initial.scale;

    let codec = initial;
    let latent = compand_blocks(&normalized, codec.curve());
    let codes = assign_codes(&latent, &codec, config.rounding)?;
    let eval = objective.evaluate(codec.basis.matrix(), codec.curve(), scale, &codes)?;
    let mut history = vec![eval.total];
    let mut state = FitState { codec, latent, codes, eval };
    let mut converged = false;
    let mut iterations = 0;
    let mut quiet = 0;

    while iterations < config.max_iters {
        iterations += 1;
        if state.eval.total == 0.0 {
            converged = true;
            break;
        }
        let start = state.eval.total;
        let mut moved = false;

        if !config.fixed_basis {
            let grad = objective.gradients(state.codec.basis.matrix(), state.codec.curve(), scale, &state.codes)?.basis;
            let next = line_search(&objective, &normalized, &state, config, config.lr_basis, |codec, lr| {
                let stepped = codec.basis.matrix() - &grad * lr;
                let mut trial = codec.clone();
                trial.basis = clamp_spectrum(&stepped, config.sigma_min, config.sigma_max);
                trial
            })?;
            if let Some(next) = next {
                state = next;
                moved = true;
            }
        }
        if state.codec.mu.is_some() {
            let grad = objective.gradients(state.codec.basis.matrix(), state.codec.curve(), scale, &state.codes)?.mu;
            let next = line_search(&objective, &normalized, &state, config, config.lr_mu, |codec, lr| {
                let mut trial = codec.clone();
                trial.mu = codec.mu.map(|m| CompandingParam::projected(m.value() - lr * grad));
                trial
            })?;
            if let Some(next) = next {
                state = next;
                moved = true;
            }
        }

        if !moved {
            // No step survives the code refresh.
            converged = true;
            break;
        }
        history.push(state.eval.total);
        if (start - state.eval.total) / start < config.tolerance {
            quiet += 1;
            if quiet >= PATIENCE {
                converged = true;
                break;
            }
        } else {
            quiet = 0;
        }
    }

    let FitState { codec, codes, eval, .. } = state;
    let report = FitReport {
        loss_history: history,
        iterations,
        converged,
        final_loss: eval.total,
        final_data_loss: eval.data,
    };
    Ok((codec, codes, report))
}

/// Symmetric round-to-nearest scalar quantizer over the whole group.
pub fn rtn_quantize(weights: &DMatrix<f64>, bits: u8) -> DMatrix<f64> {
    assert!((1..=16).contains(&bits), "bit-width {bits} outside 1..=16");
    let max_abs = weights.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return DMatrix::zeros(weights.nrows(), weights.ncols());
    }
    let (lo, hi) = code_range(bits);
    let step = if bits == 1 { max_abs } else { max_abs / hi as f64 };
    weights.map(|w| step * round_half_up(w / step).clamp(lo as f64, hi as f64))
}

/// `|W X - W_hat X|_F^2 / (m T)`.
pub fn output_mse(weights: &DMatrix<f64>, w_hat: &DMatrix<f64>, calib: &DMatrix<f64>) -> f64 {
    let e = (weights - w_hat) * calib;
    e.norm_squared() / e.len() as f64
}

pub fn weight_mse(weights: &DMatrix<f64>, w_hat: &DMatrix<f64>) -> f64 {
    (weights - w_hat).norm_squared() / weights.len() as f64
}
