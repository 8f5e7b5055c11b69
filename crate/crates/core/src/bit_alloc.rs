//! Salience-driven mixed-precision bit allocation.
//!
//! For an integer mean `N`, the `k` most salient groups get `N + 1` bits, the
//! `k` least salient get `N - 1` and the rest keep `N`, so the mean stays at
//! `N` exactly. `k` is chosen to minimize the KL divergence between the
//! softmax-normalized reference and quantized layer outputs. Fractional
//! targets mix `floor(R)` and `ceil(R)` groups with no search.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::codebook::{rtn_quantize, CalibrationBatch, WeightGroup};
use crate::error::{GlvqError, Result};

/// Per-group importance with a stable descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct SalienceScores {
    scores: Vec<f64>,
    order: Vec<usize>,
}

impl SalienceScores {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(GlvqError::InvalidArgument("salience scores must be finite and >= 0".into()));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        // Stable sort keeps ties in index order.
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        Ok(Self { scores, order })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Group indices from most to least salient.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// `s_g = |(W_g - RTN_b(W_g)) X_g|_F^2`: output damage of a round-to-nearest
/// probe at `probe_bits`.
pub fn compute_salience(
    groups: &[WeightGroup],
    calib: &[CalibrationBatch],
    probe_bits: u8,
) -> Result<SalienceScores> {
    if probe_bits == 0 {
        return Err(GlvqError::InvalidArgument("probe bit-width must be >= 1".into()));
    }
    if groups.len() != calib.len() {
        return Err(GlvqError::ShapeMismatch(format!(
            "{} groups but {} calibration batches",
            groups.len(),
            calib.len()
        )));
    }
    let scores = groups
        .par_iter()
        .zip(calib.par_iter())
        .map(|(g, x)| {
            if g.cols() != x.dim() {
                return Err(GlvqError::ShapeMismatch(format!(
                    "group has {} columns, calibration dimension is {}",
                    g.cols(),
                    x.dim()
                )));
            }
            let dw = g.matrix() - rtn_quantize(g.matrix(), probe_bits);
            Ok((dw * x.features()).norm_squared())
        })
        .collect::<Result<Vec<_>>>()?;
    SalienceScores::new(scores)
}

fn log_softmax_column(col: &[f64], out: &mut [f64]) {
    let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(col) {
        *o = v - lse;
    }
}

/// Mean over columns of `KL(softmax(ref_col) || softmax(quant_col))`, in nats.
pub fn kl_objective(reference: &DMatrix<f64>, quantized: &DMatrix<f64>) -> Result<f64> {
    if reference.shape() != quantized.shape() {
        return Err(GlvqError::ShapeMismatch(format!(
            "reference outputs {:?} vs quantized outputs {:?}",
            reference.shape(),
            quantized.shape()
        )));
    }
    let (m, t) = reference.shape();
    if m == 0 || t == 0 {
        return Err(GlvqError::ShapeMismatch("outputs must be non-empty".into()));
    }
    if reference.iter().chain(quantized.iter()).any(|v| !v.is_finite()) {
        return Err(GlvqError::NonFinite("layer outputs"));
    }
    let mut lp = vec![0.0; m];
    let mut lq = vec![0.0; m];
    let mut total = 0.0;
    for j in 0..t {
        log_softmax_column(reference.column(j).as_slice(), &mut lp);
        log_softmax_column(quantized.column(j).as_slice(), &mut lq);
        let kl: f64 = lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum();
        total += kl.max(0.0);
    }
    Ok(total / t as f64)
}

/// Requested mean bit-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BitTarget {
    Integer(u8),
    Fractional(f64),
}

impl BitTarget {
    pub fn from_f64(target: f64) -> Result<Self> {
        if !(target.is_finite() && target >= 1.0) {
            return Err(GlvqError::InfeasibleTarget { target, reason: "target must be >= 1" });
        }
        if target.fract() == 0.0 {
            if target > 15.0 {
                return Err(GlvqError::InfeasibleTarget { target, reason: "N + 1 must fit 16 bits" });
            }
            Ok(BitTarget::Integer(target as u8))
        } else {
            if target > 16.0 {
                return Err(GlvqError::InfeasibleTarget { target, reason: "ceil(R) must fit 16 bits" });
            }
            Ok(BitTarget::Fractional(target))
        }
    }

    pub fn value(self) -> f64 {
        match self {
            BitTarget::Integer(n) => n as f64,
            BitTarget::Fractional(r) => r,
        }
    }

    /// Bit-width used for salience probes and uniform allocations.
    pub fn nearest_bits(self) -> u8 {
        match self {
            BitTarget::Integer(n) => n,
            BitTarget::Fractional(r) => (r + 0.5).floor().max(1.0) as u8,
        }
    }
}

/// Per-group bit-widths with their mean target.
#[derive(Debug, Clone, PartialEq)]
pub struct BitAllocation {
    pub bits: Vec<u8>,
    pub target: f64,
}

impl BitAllocation {
    pub fn uniform(groups: usize, bits: u8) -> Self {
        Self { bits: vec![bits; groups], target: bits as f64 }
    }

    pub fn mean(&self) -> f64 {
        self.bits.iter().map(|&b| b as f64).sum::<f64>() / self.bits.len() as f64
    }

    /// Checks the balanced-mean or two-width invariant for this target.
    pub fn validate(&self) -> Result<()> {
        let g = self.bits.len();
        if g == 0 {
            return Err(GlvqError::InvalidArgument("allocation is empty".into()));
        }
        let fail = |msg: String| Err(GlvqError::InvalidArgument(msg));
        if self.target.fract() == 0.0 {
            let n = self.target as i64;
            let hi = self.bits.iter().filter(|&&b| b as i64 == n + 1).count();
            let lo = self.bits.iter().filter(|&&b| b as i64 == n - 1).count();
            if self.bits.iter().any(|&b| (b as i64 - n).abs() > 1) {
                return fail(format!("bit-widths must lie in {{{}, {n}, {}}}", n - 1, n + 1));
            }
            if hi != lo {
                return fail(format!("{hi} groups at N+1 but {lo} at N-1"));
            }
            let sum: i64 = self.bits.iter().map(|&b| b as i64).sum();
            if sum != n * g as i64 {
                return fail(format!("mean {} != {n}", self.mean()));
            }
        } else {
            let (f, c) = (self.target.floor() as u8, self.target.ceil() as u8);
            if self.bits.iter().any(|&b| b != f && b != c) {
                return fail(format!("bit-widths must lie in {{{f}, {c}}}"));
            }
            if (self.mean() - self.target).abs() > 1.0 / (2.0 * g as f64) + 1e-12 {
                return fail(format!("mean {} too far from {}", self.mean(), self.target));
            }
        }
        Ok(())
    }
}

/// How the split size `k` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SearchMode {
    /// Bisection on `D(k) <= D(k + 1)`; assumes `D` is unimodal in `k`.
    #[default]
    Bisection,
    /// Evaluates every `k`; ground truth for any objective.
    Exhaustive,
}

/// Groups above this count are never scanned exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 64;

/// Bits per group for split size `k` at integer mean `n`.
pub fn split_allocation(salience: &SalienceScores, n: u8, k: usize) -> Vec<u8> {
    let g = salience.len();
    let mut bits = vec![n; g];
    for &idx in &salience.order()[..k] {
        bits[idx] = n + 1;
    }
    for &idx in &salience.order()[g - k..] {
        bits[idx] = n - 1;
    }
    bits
}

/// Smallest minimizer of `objective` over `0..=max_k`.
pub fn select_split<F>(max_k: usize, mode: SearchMode, mut objective: F) -> Result<usize>
where
    F: FnMut(usize) -> Result<f64>,
{
    let mut cache: HashMap<usize, f64> = HashMap::new();
    let mut eval = |k: usize| -> Result<f64> {
        if let Some(&v) = cache.get(&k) {
            return Ok(v);
        }
        let v = objective(k)?;
        cache.insert(k, v);
        Ok(v)
    };
    match mode {
        SearchMode::Exhaustive => {
            let mut best = (0, eval(0)?);
            for k in 1..=max_k {
                let v = eval(k)?;
                if v < best.1 {
                    best = (k, v);
                }
            }
            Ok(best.0)
        }
        SearchMode::Bisection => {
            let (mut lo, mut hi) = (0, max_k);
            while lo < hi {
                let mid = lo + (hi - lo) / 2;
                if eval(mid)? <= eval(mid + 1)? {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
            Ok(lo)
        }
    }
}

/// Balanced allocation around `target`.
///
/// `quantize_probe` returns the quantized layer outputs for a candidate
/// per-group allocation; those are compared against `reference_out` with
/// [`kl_objective`]. Fractional targets never call the probe.
pub fn allocate_bits<P>(
    salience: &SalienceScores,
    target: BitTarget,
    reference_out: &DMatrix<f64>,
    mode: SearchMode,
    mut quantize_probe: P,
) -> Result<BitAllocation>
where
    P: FnMut(&[u8]) -> Result<DMatrix<f64>>,
{
    let g = salience.len();
    if g < 2 {
        return Err(GlvqError::InvalidArgument("bit allocation needs at least two groups".into()));
    }
    match target {
        BitTarget::Integer(n) => {
            if n < 2 {
                return Err(GlvqError::InfeasibleTarget { target: n as f64, reason: "N - 1 must be >= 1" });
            }
            if n >= 16 {
                return Err(GlvqError::InfeasibleTarget { target: n as f64, reason: "N + 1 must fit 16 bits" });
            }
            let mode = if g > EXHAUSTIVE_LIMIT { SearchMode::Bisection } else { mode };
            let k = select_split(g / 2, mode, |k| {
                let out = quantize_probe(&split_allocation(salience, n, k))?;
                kl_objective(reference_out, &out)
            })?;
            Ok(BitAllocation { bits: split_allocation(salience, n, k), target: n as f64 })
        }
        BitTarget::Fractional(r) => Ok(fractional_allocation(salience, r)),
    }
}

/// `ceil(R)` bits for the `round((R - floor R) G)` most salient groups,
/// `floor(R)` for the rest.
pub fn fractional_allocation(salience: &SalienceScores, target: f64) -> BitAllocation {
    let g = salience.len();
    let (lo, hi) = (target.floor() as u8, target.ceil() as u8);
    let count = (((target - target.floor()) * g as f64) + 0.5).floor() as usize;
    let mut bits = vec![lo; g];
    for &idx in &salience.order()[..count.min(g)] {
        bits[idx] = hi;
    }
    BitAllocation { bits, target }
}
