//! Grouped lattice vector quantization (GLVQ) for post-training weight
//! compression.
//!
//! Each group of weights gets its own learned lattice basis and mu-law
//! companding curve; codes come from Babai rounding and are clamped to a
//! per-group bit-width chosen by balanced salience-driven allocation. The
//! result is stored in a compact archive of packed codes plus FP16 side
//! information.

pub mod ablation;
pub mod bit_alloc;
pub mod codebook;
pub mod companding;
pub mod container;
pub mod error;
pub mod lattice;
pub mod pipeline;
pub mod synthetic;

pub use bit_alloc::{BitAllocation, BitTarget, SalienceScores, SearchMode};
pub use codebook::{CalibrationBatch, CodeMatrix, FitConfig, FitReport, GroupCodec, Rounding, WeightGroup};
pub use companding::{CompandingParam, KurtosisConvention};
pub use container::{ArchiveGroup, ArchiveReader, TensorFile};
pub use error::{GlvqError, Result};
pub use lattice::{CodeVector, GenerationMatrix, GramSchmidtBasis};
pub use pipeline::{EvalMetrics, LayerQuantization, RunConfig};
