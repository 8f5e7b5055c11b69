//! Paired ablation runs over the synthetic suite with sign-test summaries.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::bit_alloc::BitTarget;
use crate::codebook::Rounding;
use crate::container::overhead_report;
use crate::error::{GlvqError, Result};
use crate::pipeline::{evaluate, quantize_layer, rtn_layer, EvalMetrics, RunConfig};
use crate::synthetic::{generate, LayerSpec, Source, SUITE_SEEDS};

/// Group widths swept by [`Preset::GroupSize`].
pub const GROUP_WIDTHS: [usize; 5] = [32, 64, 128, 256, 512];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    BitAlloc,
    Lattice,
    Companding,
    GroupSize,
    Rounding,
}

impl Preset {
    pub const ALL: [Preset; 5] =
        [Preset::BitAlloc, Preset::Lattice, Preset::Companding, Preset::GroupSize, Preset::Rounding];
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::BitAlloc => "bit-alloc",
            Preset::Lattice => "lattice",
            Preset::Companding => "companding",
            Preset::GroupSize => "group-size",
            Preset::Rounding => "rounding",
        })
    }
}

impl FromStr for Preset {
    type Err = GlvqError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| GlvqError::InvalidArgument(format!("unknown ablation preset {s:?}")))
    }
}

/// Base configuration shared by every variant of an ablation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationSettings {
    pub source: Source,
    pub run: RunConfig,
    /// Layer width in units of 64 columns.
    pub col_units: usize,
    pub seeds: u64,
}

impl AblationSettings {
    /// Suite defaults: Student-t source, 256 x 128 layers in two groups of
    /// 64 columns, d = 8, uniform 2 bits, 20 seeds.
    pub fn suite_defaults() -> Self {
        Self {
            source: Source::StudentT,
            run: RunConfig { group_width: 64, bit_alloc: false, ..RunConfig::default() },
            col_units: 2,
            seeds: SUITE_SEEDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub preset: String,
    pub seed: u64,
    pub variant: String,
    pub group_width: usize,
    pub output_mse: f64,
    pub weight_mse: f64,
    pub kl: f64,
    pub bits_per_weight: f64,
    pub overhead_pct: f64,
}

/// Sign test of "`better` has lower output MSE than `worse`".
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub better: String,
    pub worse: String,
    pub wins: usize,
    pub trials: usize,
    /// One-sided `P(X >= wins)` for `X ~ Binomial(trials, 1/2)`.
    pub p_value: f64,
}

impl Comparison {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub preset: Preset,
    pub rows: Vec<AblationRow>,
    pub comparisons: Vec<Comparison>,
}

/// One-sided binomial sign-test p-value.
pub fn sign_test_p(wins: usize, trials: usize) -> f64 {
    let mut p = 0.0;
    for k in wins..=trials {
        p += binomial(trials, k);
    }
    p / 2f64.powi(trials as i32)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

struct Variant {
    name: String,
    run: RunConfig,
    rtn: bool,
}

fn variants(preset: Preset, base: &RunConfig) -> Vec<Variant> {
    let v = |name: &str, run: RunConfig| Variant { name: name.to_string(), run, rtn: false };
    match preset {
        Preset::BitAlloc => vec![
            v("alloc", RunConfig { bit_alloc: true, ..*base }),
            v("uniform", RunConfig { bit_alloc: false, ..*base }),
        ],
        Preset::Lattice => {
            let mut fixed = *base;
            fixed.fit.fixed_basis = true;
            let mut learned = *base;
            learned.fit.fixed_basis = false;
            vec![v("learned", learned), v("fixed", fixed), Variant { name: "rtn".into(), run: *base, rtn: true }]
        }
        Preset::Companding => {
            let (mut on, mut off) = (*base, *base);
            on.fit.companding = true;
            off.fit.companding = false;
            vec![v("companded", on), v("linear", off)]
        }
        Preset::GroupSize => GROUP_WIDTHS
            .iter()
            .map(|&w| v(&format!("w{w}"), RunConfig { group_width: w, ..*base }))
            .collect(),
        Preset::Rounding => {
            let (mut babai, mut gcd) = (*base, *base);
            babai.fit.rounding = Rounding::Babai;
            gcd.fit.rounding = Rounding::Gcd { sweeps: 1 };
            vec![v("babai", babai), v("gcd", gcd)]
        }
    }
}

fn comparisons_for(preset: Preset) -> &'static [(&'static str, &'static str)] {
    match preset {
        Preset::BitAlloc => &[("alloc", "uniform")],
        Preset::Lattice => &[("learned", "fixed"), ("learned", "rtn")],
        Preset::Companding => &[("companded", "linear")],
        Preset::GroupSize => &[],
        Preset::Rounding => &[("babai", "gcd")],
    }
}

fn run_variant(preset: Preset, seed: u64, spec: &LayerSpec, variant: &Variant) -> Result<AblationRow> {
    let layer = generate(spec, seed);
    let run = RunConfig { seed, ..variant.run };
    let (metrics, width): (EvalMetrics, usize) = if variant.rtn {
        let bits = BitTarget::from_f64(run.target_bits)?.nearest_bits();
        let w_hat = rtn_layer(&layer.weights, run.group_width, bits)?;
        let mut m = evaluate(&layer.weights, &w_hat, &layer.calib, &[])?;
        m.bits_per_weight = bits as f64;
        (m, run.group_width)
    } else {
        let q = quantize_layer(&layer.weights, &layer.calib, &run)?;
        let w_hat = q.reconstruct()?;
        (evaluate(&layer.weights, &w_hat, &layer.calib, &q.groups)?, run.group_width)
    };
    Ok(AblationRow {
        preset: preset.to_string(),
        seed,
        variant: variant.name.clone(),
        group_width: width,
        output_mse: metrics.output_mse,
        weight_mse: metrics.weight_mse,
        kl: metrics.kl,
        bits_per_weight: metrics.bits_per_weight,
        overhead_pct: metrics.overhead_pct,
    })
}

/// Runs every variant of `preset` on each seed of the suite.
pub fn run_ablation(preset: Preset, settings: &AblationSettings) -> Result<AblationTable> {
    settings.run.validate()?;
    let col_units = match preset {
        Preset::GroupSize => settings.col_units.max(GROUP_WIDTHS[GROUP_WIDTHS.len() - 1] / 64),
        _ => settings.col_units,
    };
    let spec = LayerSpec::suite(settings.source, col_units);
    let vars = variants(preset, &settings.run);
    let jobs: Vec<(u64, usize)> =
        (0..settings.seeds).flat_map(|s| (0..vars.len()).map(move |v| (s, v))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(seed, v)| run_variant(preset, seed, &spec, &vars[v]))
        .collect::<Result<Vec<_>>>()?;

    let comparisons = comparisons_for(preset)
        .iter()
        .map(|&(better, worse)| {
            let mse = |name: &str, seed: u64| {
                rows.iter()
                    .find(|r| r.variant == name && r.seed == seed)
                    .map(|r| r.output_mse)
                    .expect("every variant runs on every seed")
            };
            let wins = (0..settings.seeds).filter(|&s| mse(better, s) < mse(worse, s)).count();
            let trials = settings.seeds as usize;
            Comparison {
                better: better.into(),
                worse: worse.into(),
                wins,
                trials,
                p_value: sign_test_p(wins, trials),
            }
        })
        .collect();
    Ok(AblationTable { preset, rows, comparisons })
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "preset,seed,variant,group_width,output_mse,weight_mse,kl,bits_per_weight,overhead_pct\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.9e},{:.9e},{:.9e},{:.6},{:.6}",
                r.preset, r.seed, r.variant, r.group_width, r.output_mse, r.weight_mse, r.kl, r.bits_per_weight, r.overhead_pct
            );
        }
        s
    }

    /// Mean of each variant's metrics plus the sign-test verdicts.
    pub fn summary(&self) -> String {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.variant.as_str()) {
                names.push(&r.variant);
            }
        }
        let mut s = format!("ablation: {}\n", self.preset);
        let _ = writeln!(s, "{:<12} {:>14} {:>14} {:>10} {:>12}", "variant", "output_mse", "weight_mse", "bits", "overhead_%");
        for name in names {
            let sel: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == name).collect();
            let n = sel.len() as f64;
            let mean = |f: fn(&AblationRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
            let _ = writeln!(
                s,
                "{:<12} {:>14.6e} {:>14.6e} {:>10.4} {:>12.4}",
                name,
                mean(|r| r.output_mse),
                mean(|r| r.weight_mse),
                mean(|r| r.bits_per_weight),
                mean(|r| r.overhead_pct)
            );
        }
        for c in &self.comparisons {
            let _ = writeln!(
                s,
                "{} < {}: {}/{} seeds, sign-test p = {:.4} [{}]",
                c.better,
                c.worse,
                c.wins,
                c.trials,
                c.p_value,
                if c.significant(0.05) { "significant" } else { "not significant" }
            );
        }
        s
    }
}

/// Reference overhead for a group-size sweep (`m` rows, `d`, `b`).
pub fn overhead_by_width(dim: u64, rows: u64, bits: u64) -> Result<Vec<(usize, f64)>> {
    GROUP_WIDTHS
        .iter()
        .map(|&w| Ok((w, overhead_report(dim, rows, w as u64, bits)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sign_test_values() {
        assert_abs_diff_eq!(sign_test_p(0, 20), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sign_test_p(20, 20), 2f64.powi(-20), epsilon = 1e-18);
        // P(X >= 15) for Binomial(20, 1/2) = 21700 / 2^20
        assert_abs_diff_eq!(sign_test_p(15, 20), 21700.0 / 1048576.0, epsilon = 1e-12);
        assert!(sign_test_p(14, 20) > 0.05);
        assert!(sign_test_p(15, 20) < 0.05);
    }

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.to_string().parse::<Preset>().unwrap(), p);
        }
        assert!("nope".parse::<Preset>().is_err());
    }

    #[test]
    fn overhead_decreases_with_width() {
        let o = overhead_by_width(8, 256, 2).unwrap();
        assert!(o.windows(2).all(|w| w[1].1 < w[0].1));
    }
}
