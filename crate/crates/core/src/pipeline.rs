//! Layer-level driver: column grouping, bit allocation, per-group fitting
//! and evaluation.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bit_alloc::{
    allocate_bits, compute_salience, fractional_allocation, kl_objective, BitAllocation, BitTarget,
    SalienceScores, SearchMode,
};
use crate::codebook::{
    encode_group, fit_group, fit_group_from, group_loss, output_mse, rtn_quantize, weight_mse,
    CalibrationBatch, CodeMatrix, FitConfig, FitReport, GroupCodec, WeightGroup,
};
use crate::container::{concat_columns, round_side_info, side_info_bytes, ArchiveGroup};
use crate::error::{GlvqError, Result};

pub const DEFAULT_GROUP_WIDTH: usize = 128;
pub const DEFAULT_DIM: usize = 8;

/// Everything that controls one quantization run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub dim: usize,
    pub target_bits: f64,
    /// Columns per group.
    pub group_width: usize,
    pub fit: FitConfig,
    pub bit_alloc: bool,
    pub search: SearchMode,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            target_bits: 2.0,
            group_width: DEFAULT_GROUP_WIDTH,
            fit: FitConfig::default(),
            bit_alloc: true,
            search: SearchMode::Bisection,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=64).contains(&self.dim) {
            return Err(GlvqError::InvalidArgument(format!("lattice dimension {} outside 1..=64", self.dim)));
        }
        if self.group_width == 0 {
            return Err(GlvqError::InvalidArgument("group width must be positive".into()));
        }
        BitTarget::from_f64(self.target_bits)?;
        self.fit.validate()
    }
}

/// Column ranges `(start, len)` of consecutive groups; the last may be narrower.
pub fn partition_columns(cols: usize, width: usize) -> Vec<(usize, usize)> {
    (0..cols).step_by(width.max(1)).map(|s| (s, width.min(cols - s))).collect()
}

/// Per-group summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub index: usize,
    pub col_start: usize,
    pub cols: usize,
    pub bits: u8,
    /// Zero when companding is disabled.
    pub mu: f64,
    pub final_loss: f64,
    pub final_data_loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct LayerQuantization {
    pub groups: Vec<ArchiveGroup>,
    pub allocation: BitAllocation,
    pub summaries: Vec<GroupSummary>,
    /// Accepted-loss trajectory of every group fit.
    pub loss_histories: Vec<Vec<f64>>,
}

impl LayerQuantization {
    pub fn reconstruct(&self) -> Result<DMatrix<f64>> {
        dequantize(&self.groups)
    }
}

fn split_layer(weights: &DMatrix<f64>, calib: &DMatrix<f64>, width: usize) -> Result<(Vec<(usize, usize)>, Vec<WeightGroup>, Vec<CalibrationBatch>)> {
    if weights.ncols() != calib.nrows() {
        return Err(GlvqError::ShapeMismatch(format!(
            "weights have {} columns but calibration inputs have {} rows",
            weights.ncols(),
            calib.nrows()
        )));
    }
    let parts = partition_columns(weights.ncols(), width);
    let mut groups = Vec::with_capacity(parts.len());
    let mut calibs = Vec::with_capacity(parts.len());
    for &(s, n) in &parts {
        groups.push(WeightGroup::new(weights.columns(s, n).into_owned())?);
        calibs.push(CalibrationBatch::new(calib.rows(s, n).into_owned())?);
    }
    Ok((parts, groups, calibs))
}

/// Chooses per-group bit-widths for a partitioned layer.
pub fn allocate_layer_bits(
    groups: &[WeightGroup],
    calibs: &[CalibrationBatch],
    target: BitTarget,
    enabled: bool,
    search: SearchMode,
) -> Result<BitAllocation> {
    let g = groups.len();
    let uniform_salience = || SalienceScores::new(vec![0.0; g]);
    match target {
        BitTarget::Integer(n) if !enabled || g < 2 => Ok(BitAllocation::uniform(g, n)),
        BitTarget::Fractional(r) if !enabled => Ok(fractional_allocation(&uniform_salience()?, r)),
        _ => {
            let salience = compute_salience(groups, calibs, target.nearest_bits())?;
            if let BitTarget::Fractional(r) = target {
                return Ok(fractional_allocation(&salience, r));
            }
            let BitTarget::Integer(n) = target else { unreachable!() };
            // Outputs of every group under an RTN probe at N-1, N, N+1.
            let probes: Vec<[DMatrix<f64>; 3]> = groups
                .par_iter()
                .zip(calibs.par_iter())
                .map(|(w, x)| {
                    [n - 1, n, n + 1].map(|b| rtn_quantize(w.matrix(), b) * x.features())
                })
                .collect();
            let reference = groups
                .iter()
                .zip(calibs)
                .map(|(w, x)| w.matrix() * x.features())
                .reduce(|a, b| a + b)
                .expect("at least two groups");
            allocate_bits(&salience, target, &reference, search, |bits| {
                let mut out = DMatrix::zeros(reference.nrows(), reference.ncols());
                for (p, &b) in probes.iter().zip(bits) {
                    out += &p[(b + 1 - n) as usize];
                }
                Ok(out)
            })
        }
    }
}

fn summarize(index: usize, (col_start, cols): (usize, usize), codec: &GroupCodec, report: &FitReport) -> GroupSummary {
    GroupSummary {
        index,
        col_start,
        cols,
        bits: codec.bits,
        mu: codec.mu.map_or(0.0, |m| m.value()),
        final_loss: report.final_loss,
        final_data_loss: report.final_data_loss,
        iterations: report.iterations,
        converged: report.converged,
    }
}

/// Allocates bits, fits every group and rounds side information to binary16.
/// Each group keeps whichever of its fitted codes and codes re-derived under
/// the rounded parameters decodes with lower output error.
pub fn quantize_layer(weights: &DMatrix<f64>, calib: &DMatrix<f64>, config: &RunConfig) -> Result<LayerQuantization> {
    config.validate()?;
    let (parts, groups, calibs) = split_layer(weights, calib, config.group_width)?;
    let target = BitTarget::from_f64(config.target_bits)?;
    let allocation = allocate_layer_bits(&groups, &calibs, target, config.bit_alloc, config.search)?;
    let fits = groups
        .par_iter()
        .zip(calibs.par_iter())
        .zip(allocation.bits.par_iter())
        .map(|((w, x), &b)| fit_group(w, x, config.dim, b, &config.fit))
        .collect::<Result<Vec<_>>>()?;
    finish(parts, groups, calibs, allocation, fits, config)
}

/// Like [`quantize_layer`], but every group starts from a caller-supplied
/// codec (which also fixes its bit-width).
pub fn quantize_layer_from(
    weights: &DMatrix<f64>,
    calib: &DMatrix<f64>,
    codecs: Vec<GroupCodec>,
    config: &RunConfig,
) -> Result<LayerQuantization> {
    config.fit.validate()?;
    let (parts, groups, calibs) = split_layer(weights, calib, config.group_width)?;
    if codecs.len() != groups.len() {
        return Err(GlvqError::ShapeMismatch(format!("{} codecs for {} groups", codecs.len(), groups.len())));
    }
    let allocation = BitAllocation {
        bits: codecs.iter().map(|c| c.bits).collect(),
        target: config.target_bits,
    };
    let fits = groups
        .par_iter()
        .zip(calibs.par_iter())
        .zip(codecs.into_par_iter())
        .map(|((w, x), c)| fit_group_from(w, x, c, &config.fit))
        .collect::<Result<Vec<_>>>()?;
    finish(parts, groups, calibs, allocation, fits, config)
}

fn finish(
    parts: Vec<(usize, usize)>,
    groups: Vec<WeightGroup>,
    calibs: Vec<CalibrationBatch>,
    allocation: BitAllocation,
    fits: Vec<(GroupCodec, CodeMatrix, FitReport)>,
    config: &RunConfig,
) -> Result<LayerQuantization> {
    let mut out_groups = Vec::with_capacity(fits.len());
    let mut summaries = Vec::with_capacity(fits.len());
    let mut histories = Vec::with_capacity(fits.len());
    for (i, ((codec, fitted, report), w)) in fits.into_iter().zip(&groups).enumerate() {
        let stored = round_side_info(&codec)?;
        let fresh = encode_group(w, &stored, config.fit.rounding)?;
        let loss = |c: &CodeMatrix| group_loss(w, &stored, c, &calibs[i], &stored.basis, 0.0);
        let codes = if loss(&fitted)? <= loss(&fresh)? { fitted } else { fresh };
        summaries.push(summarize(i, parts[i], &stored, &report));
        histories.push(report.loss_history);
        out_groups.push(ArchiveGroup { codec: stored, codes });
    }
    Ok(LayerQuantization { groups: out_groups, allocation, summaries, loss_histories: histories })
}

/// Decodes archived groups into the full layer matrix.
pub fn dequantize(groups: &[ArchiveGroup]) -> Result<DMatrix<f64>> {
    let parts = groups
        .iter()
        .map(|g| crate::codebook::reconstruct(&g.codes, &g.codec))
        .collect::<Result<Vec<_>>>()?;
    concat_columns(&parts)
}

/// Plain round-to-nearest baseline applied group by group.
pub fn rtn_layer(weights: &DMatrix<f64>, group_width: usize, bits: u8) -> Result<DMatrix<f64>> {
    let parts = partition_columns(weights.ncols(), group_width)
        .into_iter()
        .map(|(s, n)| rtn_quantize(&weights.columns(s, n).into_owned(), bits))
        .collect::<Vec<_>>();
    concat_columns(&parts)
}

/// Reconstruction quality and storage accounting of a quantized layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub weight_mse: f64,
    /// `|W X - W_hat X|_F^2 / (m T)`.
    pub output_mse: f64,
    pub kl: f64,
    pub bits_per_weight: f64,
    /// FP16 basis and `mu` relative to code bits, in percent.
    pub overhead_pct: f64,
    /// Every stored header byte relative to code bits, in percent.
    pub actual_overhead_pct: f64,
}

pub fn evaluate(
    original: &DMatrix<f64>,
    reconstructed: &DMatrix<f64>,
    calib: &DMatrix<f64>,
    groups: &[ArchiveGroup],
) -> Result<EvalMetrics> {
    if original.shape() != reconstructed.shape() {
        return Err(GlvqError::ShapeMismatch(format!(
            "original {:?} vs reconstruction {:?}",
            original.shape(),
            reconstructed.shape()
        )));
    }
    if original.ncols() != calib.nrows() {
        return Err(GlvqError::ShapeMismatch(format!(
            "weights have {} columns but calibration inputs have {} rows",
            original.ncols(),
            calib.nrows()
        )));
    }
    let kl = kl_objective(&(original * calib), &(reconstructed * calib))?;
    let (mut code_bits, mut weights, mut side, mut actual) = (0f64, 0f64, 0f64, 0f64);
    for g in groups {
        let n = (g.codec.rows * g.codec.cols) as f64;
        weights += n;
        code_bits += n * g.codec.bits as f64;
        let s = side_info_bytes(g.codec.dim());
        side += s.accounted as f64 * 8.0;
        actual += s.actual as f64 * 8.0;
    }
    let pct = |b: f64| if code_bits > 0.0 { 100.0 * b / code_bits } else { 0.0 };
    Ok(EvalMetrics {
        weight_mse: weight_mse(original, reconstructed),
        output_mse: output_mse(original, reconstructed, calib),
        kl,
        bits_per_weight: if weights > 0.0 { code_bits / weights } else { 0.0 },
        overhead_pct: pct(side),
        actual_overhead_pct: pct(actual),
    })
}
