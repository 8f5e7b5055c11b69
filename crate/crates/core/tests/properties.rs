use approx::assert_abs_diff_eq;
use glvq_core::bit_alloc::{fractional_allocation, select_split, split_allocation};
use glvq_core::codebook::{
    gcd_quantize_columns, group_loss, init_codec, loss_gradients, quantize_columns, reconstruct, reshape_group,
    rtn_quantize, spectral_normalize, unreshape,
};
use glvq_core::companding::{self, MuLaw};
use glvq_core::container::{pack_codes, read_archive, unpack_codes, write_archive};
use glvq_core::lattice::{babai_round, decode, gram_schmidt, lll_reduce, residual_norm};
use glvq_core::{
    ArchiveGroup, CalibrationBatch, CodeMatrix, CompandingParam, FitConfig, GenerationMatrix, GroupCodec,
    SalienceScores, SearchMode, WeightGroup,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_basis(rng: &mut ChaCha8Rng, d: usize, spread: f64) -> GenerationMatrix {
    loop {
        let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-spread..spread));
        if let Ok(g) = GenerationMatrix::new(m) {
            if g.matrix().determinant().abs() > 1e-3 {
                return g;
            }
        }
    }
}

fn random_codes(rng: &mut ChaCha8Rng, d: usize, l: usize, bits: u8) -> CodeMatrix {
    let lo = -(1i32 << (bits - 1));
    let hi = (1i32 << (bits - 1)) - 1;
    CodeMatrix::new(DMatrix::from_fn(d, l, |_, _| rng.random_range(lo..=hi)), bits).unwrap()
}

#[test]
fn lll_output_is_size_reduced_and_unimodular() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100 {
        let b = random_basis(&mut rng, 6, 3.0);
        let r = lll_reduce(&b, 0.75).unwrap();
        let gs = gram_schmidt(&r).unwrap();
        assert!(gs.max_abs_coeff() <= 0.5 + 1e-9);
        // Same lattice: the change of basis B^-1 R is integral with det +-1.
        let u = b.matrix().clone().lu().solve(r.matrix()).unwrap();
        for v in u.iter() {
            assert_abs_diff_eq!(*v, v.round(), epsilon = 1e-6);
        }
        assert_abs_diff_eq!(u.map(f64::round).determinant().abs(), 1.0, epsilon = 1e-6);
        // Lovasz condition.
        let n = gs.ortho_norms_sq();
        for k in 1..n.len() {
            let c = gs.gs_coeff[(k - 1, k)];
            assert!(n[k] >= (0.75 - c * c) * n[k - 1] - 1e-9);
        }
    }
}

#[test]
fn decoded_lattice_points_are_closed_under_addition() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = random_basis(&mut rng, 5, 2.0);
    for _ in 0..200 {
        let a: Vec<i64> = (0..5).map(|_| rng.random_range(-9..=9)).collect();
        let b: Vec<i64> = (0..5).map(|_| rng.random_range(-9..=9)).collect();
        let sum: Vec<i64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let pa = decode(&g, &glvq_core::CodeVector(a)).unwrap();
        let pb = decode(&g, &glvq_core::CodeVector(b)).unwrap();
        let ps = decode(&g, &glvq_core::CodeVector(sum.clone())).unwrap();
        assert!((pa + pb - &ps).norm() < 1e-9);
        // A lattice point is its own Babai code.
        assert_eq!(babai_round(&g, ps.as_slice()).unwrap().0, sum);
    }
}

#[test]
fn companding_is_odd_monotone_and_invertible() {
    let mut prev = f64::NEG_INFINITY;
    for mu in [10.0, 37.5, 100.0, 255.0] {
        let c = MuLaw::new(CompandingParam::new(mu).unwrap());
        prev = f64::NEG_INFINITY;
        for i in 0..=2000 {
            let x = -1.0 + i as f64 / 1000.0;
            let y = c.compress(x);
            assert_eq!(c.compress(-x), -y);
            assert_eq!(c.expand(-y), -c.expand(y));
            assert!(y > prev);
            prev = y;
            assert!((c.expand(y) - x).abs() <= 1e-12);
        }
    }
    assert!(prev <= 1.0 + 1e-15);
}

#[test]
fn companding_derivatives_match_finite_differences() {
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..500 {
        let mu = rng.random_range(10.0..255.0);
        let x: f64 = rng.random_range(-1.0..1.0);
        if x.abs() < 1e-3 {
            continue;
        }
        let c = |m: f64| MuLaw::new(CompandingParam::new(m).unwrap());
        let g = companding::grad(x, CompandingParam::new(mu).unwrap());
        let rel = |a: f64, b: f64| (a - b).abs() / (a.abs().max(b.abs()) + 1e-4);
        let fd_dx = (c(mu).compress(x + h) - c(mu).compress(x - h)) / (2.0 * h);
        let fd_dmu = (c(mu + h).compress(x) - c(mu - h).compress(x)) / (2.0 * h);
        let y = c(mu).compress(x);
        let fd_dy = (c(mu).expand(y + h) - c(mu).expand(y - h)) / (2.0 * h);
        let fd_emu = (c(mu + h).expand(y) - c(mu - h).expand(y)) / (2.0 * h);
        assert!(rel(g.dcompand_dx, fd_dx) < 1e-5, "dx {} vs {fd_dx}", g.dcompand_dx);
        assert!(rel(g.dcompand_dmu, fd_dmu) < 1e-5, "dmu {} vs {fd_dmu}", g.dcompand_dmu);
        assert!(rel(c(mu).expand_dy(y), fd_dy) < 1e-5);
        assert!(rel(c(mu).expand_dmu(y), fd_emu) < 1e-5, "emu {} vs {fd_emu} mu {mu} y {y}", c(mu).expand_dmu(y));
    }
}

#[test]
fn uncompanded_gradient_reduces_to_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let d = 4;
        // One row per lattice column keeps Z X well defined: m = d, scale 1.
        let n = 6;
        let basis = random_basis(&mut rng, d, 1.0);
        let codes = random_codes(&mut rng, d, n, 3);
        let w = DMatrix::from_fn(d, n, |_, _| rng.random_range(-3.0..3.0));
        let x = DMatrix::from_fn(n, 7, |_, _| rng.random_range(-1.0..1.0));
        let codec = GroupCodec::new(basis.clone(), None, 3, 1.0, d, n).unwrap();
        let g = loss_gradients(
            &WeightGroup::new(w.clone()).unwrap(),
            &codec,
            &codes,
            &CalibrationBatch::new(x.clone()).unwrap(),
            &basis,
            0.0,
        )
        .unwrap();
        let zx = codes.to_f64() * &x;
        let expected = (&w * &x - basis.matrix() * &zx) * zx.transpose() * -2.0;
        assert!((&g.basis - &expected).abs().max() <= 1e-9 * expected.abs().max().max(1.0));
        assert_eq!(g.mu, 0.0);
    }
}

#[test]
fn spectral_normalize_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let g = random_basis(&mut rng, 5, 20.0);
        let once = spectral_normalize(&g, 0.01, 10.0).unwrap();
        let twice = spectral_normalize(&once, 0.01, 10.0).unwrap();
        let diff = (once.matrix() - twice.matrix()).abs().max();
        assert!(diff < 1e-9, "diff {diff} sv {:?}", once.matrix().clone().singular_values());
        let gram = once.matrix().transpose() * once.matrix();
        let sv = gram.symmetric_eigen().eigenvalues.map(f64::sqrt);
        assert!(sv.iter().all(|&s| (0.01 - 1e-9..=10.0 + 1e-9).contains(&s)), "{sv:?}");
    }
}

#[test]
fn reshape_round_trips_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..100 {
        let (m, n, d) = (rng.random_range(1..40), rng.random_range(1..20), rng.random_range(1..10));
        let w = DMatrix::from_fn(m, n, |_, _| rng.random::<f64>());
        let (blocks, pad) = reshape_group(&w, d);
        assert_eq!(blocks.nrows() * blocks.ncols(), m * n + pad);
        assert!(pad < d);
        assert_eq!(unreshape(&blocks, m, n).unwrap(), w);
    }
}

proptest! {
    #[test]
    fn pack_round_trip(bits in 1u8..=8, dim in 1usize..9, columns in 1usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes = random_codes(&mut rng, dim, columns, bits);
        let packed = pack_codes(codes.as_slice(), bits).unwrap();
        prop_assert_eq!(packed.len(), (dim * columns * bits as usize).div_ceil(8));
        prop_assert_eq!(unpack_codes(&packed, bits, dim, columns).unwrap(), codes);
    }

    #[test]
    fn fractional_allocation_hits_target(groups in 2usize..200, target in 1.0f64..6.0) {
        let s = SalienceScores::new((0..groups).map(|i| ((i * 7919) % 101) as f64).collect()).unwrap();
        let a = fractional_allocation(&s, target);
        prop_assert!((a.mean() - target).abs() <= 1.0 / (2.0 * groups as f64) + 1e-12);
    }

    #[test]
    fn split_allocations_are_balanced(groups in 2usize..100, n in 2u8..8, k_frac in 0.0f64..1.0) {
        let s = SalienceScores::new((0..groups).map(|i| ((i * 31) % 17) as f64).collect()).unwrap();
        let k = ((groups / 2) as f64 * k_frac) as usize;
        let bits = split_allocation(&s, n, k);
        let up = bits.iter().filter(|&&b| b == n + 1).count();
        let down = bits.iter().filter(|&&b| b == n - 1).count();
        prop_assert_eq!(up, k);
        prop_assert_eq!(down, k);
        prop_assert_eq!(bits.iter().map(|&b| b as usize).sum::<usize>(), n as usize * groups);
    }
}

#[test]
fn bisection_matches_exhaustive_on_unimodal_objectives() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..500 {
        let max_k = rng.random_range(0..40);
        let opt = rng.random_range(0..=max_k) as f64;
        let (a, b) = (rng.random_range(0.1..3.0), rng.random_range(0.1..3.0));
        let f = |k: usize| -> glvq_core::Result<f64> {
            let k = k as f64;
            Ok(if k < opt { a * (opt - k) } else { b * (k - opt) })
        };
        let bis = select_split(max_k, SearchMode::Bisection, f).unwrap();
        let exh = select_split(max_k, SearchMode::Exhaustive, f).unwrap();
        assert_eq!(bis, exh);
        assert_eq!(bis as f64, opt);
    }
    // Flat objective: ties go to k = 0.
    assert_eq!(select_split(10, SearchMode::Bisection, |_| Ok(1.0)).unwrap(), 0);
    assert_eq!(select_split(10, SearchMode::Exhaustive, |_| Ok(1.0)).unwrap(), 0);
}

#[test]
fn scalar_codec_matches_classical_mu_law() {
    // d = 1, b = 8, basis 1/127: codes are the classical 8-bit mu-law levels.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let w = DMatrix::from_fn(1000, 1, |_, _| rng.random_range(-2.0..2.0));
    let scale = w.amax();
    let mu = CompandingParam::new(255.0).unwrap();
    let basis = GenerationMatrix::new(DMatrix::from_element(1, 1, 1.0 / 127.0)).unwrap();
    let codec = GroupCodec::new(basis, Some(mu), 8, scale, 1000, 1).unwrap();
    let group = WeightGroup::new(w.clone()).unwrap();
    let codes = quantize_columns(&codec.latent(&group).unwrap(), &codec).unwrap();
    let out = reconstruct(&codes, &codec).unwrap();
    let curve = MuLaw::new(mu);
    for (i, &v) in w.iter().enumerate() {
        let q = (curve.compress(v / scale) * 127.0 + 0.5).floor().clamp(-128.0, 127.0);
        let expected = scale * curve.expand(q / 127.0);
        assert_abs_diff_eq!(out[i], expected, epsilon = 1e-12);
    }
}

#[test]
fn init_codec_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let normal = rand_distr::StandardNormal;
    let w = DMatrix::from_fn(400, 500, |_, _| rng.sample::<f64, _>(normal));
    let group = WeightGroup::new(w).unwrap();
    let cfg = FitConfig { companding: false, ..FitConfig::default() };
    let codec = init_codec(&group, 2, 2, &cfg).unwrap();
    let g = codec.basis.matrix();
    assert!(g[(0, 1)].abs().max(g[(1, 0)].abs()) / g[(0, 0)].abs().min(g[(1, 1)].abs()) < 0.1);
    let codes = quantize_columns(&codec.latent(&group).unwrap(), &codec).unwrap();
    let raw = codec.basis.matrix().clone().lu().solve(&codec.latent(&group).unwrap()).unwrap();
    let clamped = raw.iter().filter(|v| !(-2.5..1.5).contains(&(*v + 0.0))).count() as f64 / raw.len() as f64;
    assert!(clamped <= 0.02, "clamped fraction {clamped}");
    assert_eq!(codes.dim(), 2);
}

#[test]
fn zero_group_gets_fallback_codec() {
    let group = WeightGroup::new(DMatrix::zeros(8, 4)).unwrap();
    let codec = init_codec(&group, 4, 3, &FitConfig::default()).unwrap();
    assert_eq!(codec.scale, 1.0);
    assert_abs_diff_eq!(codec.basis.matrix()[(0, 0)], 0.25, epsilon = 1e-15);
    let codes = quantize_columns(&codec.latent(&group).unwrap(), &codec).unwrap();
    assert!(codes.as_slice().iter().all(|&z| z == 0));
}

#[test]
fn gcd_is_never_better_on_average_than_babai() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let (mut gcd_total, mut babai_total) = (0.0, 0.0);
    for _ in 0..10 {
        let basis = GenerationMatrix::new(
            DMatrix::identity(4, 4) + DMatrix::from_fn(4, 4, |r, c| if c > r { rng.random_range(-1.5..1.5) } else { 0.0 }),
        )
        .unwrap();
        let codec = GroupCodec::new(basis.clone(), None, 8, 1.0, 4, 100).unwrap();
        let latent = DMatrix::from_fn(4, 100, |_, _| rng.random_range(-20.0..20.0));
        let babai = quantize_columns(&latent, &codec).unwrap();
        let gcd = gcd_quantize_columns(&latent, &codec, 1).unwrap();
        let res = |z: &CodeMatrix| {
            (0..100)
                .map(|c| (latent.column(c) - basis.matrix() * z.to_f64().column(c)).norm())
                .sum::<f64>()
        };
        babai_total += res(&babai);
        gcd_total += res(&gcd);
    }
    assert!(gcd_total >= babai_total, "gcd {gcd_total} babai {babai_total}");
}

#[test]
fn gcd_equals_babai_on_orthogonal_bases() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..20 {
        let q = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let diag = DMatrix::from_diagonal(&DVector::from_fn(4, |_, _| rng.random_range(0.2..2.0)));
        let basis = GenerationMatrix::new(q * diag).unwrap();
        let codec = GroupCodec::new(basis, None, 4, 1.0, 4, 50).unwrap();
        let latent = DMatrix::from_fn(4, 50, |_, _| rng.random_range(-5.0..5.0));
        let babai = quantize_columns(&latent, &codec).unwrap();
        let gcd = gcd_quantize_columns(&latent, &codec, 1).unwrap();
        for c in 0..50 {
            let t: Vec<f64> = latent.column(c).iter().copied().collect();
            let rb = residual_norm(&codec.basis, &t, &col_codes(&babai, c)).unwrap();
            let rg = residual_norm(&codec.basis, &t, &col_codes(&gcd, c)).unwrap();
            assert_abs_diff_eq!(rb, rg, epsilon = 1e-9);
        }
    }
}

fn col_codes(z: &CodeMatrix, c: usize) -> glvq_core::CodeVector {
    glvq_core::CodeVector(z.matrix().column(c).iter().map(|&v| v as i64).collect())
}

#[test]
fn representable_weights_are_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for companded in [false, true] {
        let basis = GenerationMatrix::new(
            DMatrix::identity(4, 4) * 0.12 + DMatrix::from_fn(4, 4, |_, _| rng.random_range(-0.02..0.02)),
        )
        .unwrap();
        let mu = companded.then(|| CompandingParam::new(40.0).unwrap());
        let codec = GroupCodec::new(basis, mu, 3, 2.5, 8, 6).unwrap();
        let codes = random_codes(&mut rng, 4, 12, 3);
        let w = reconstruct(&codes, &codec).unwrap();
        let group = WeightGroup::new(w.clone()).unwrap();
        let again = quantize_columns(&codec.latent(&group).unwrap(), &codec).unwrap();
        assert_eq!(again, codes);
        let w2 = reconstruct(&again, &codec).unwrap();
        assert!((&w2 - &w).norm() <= 1e-9 * w.norm());
        let x = CalibrationBatch::new(DMatrix::identity(6, 6)).unwrap();
        assert!(group_loss(&group, &codec, &again, &x, &codec.basis, 0.1).unwrap() <= 1e-18);
    }
}

#[test]
fn rtn_uniform_noise_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let w = DMatrix::from_fn(200, 200, |_, _| rng.random_range(-1.0..1.0));
    let q = rtn_quantize(&w, 8);
    let s = w.amax() / 127.0;
    let rmse = ((&w - &q).norm_squared() / w.len() as f64).sqrt();
    let expected = s / 12f64.sqrt();
    assert!((rmse - expected).abs() / expected < 0.1, "rmse {rmse} expected {expected}");
}

#[test]
fn archive_rewrite_is_byte_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut groups = Vec::new();
    for (i, bits) in [1u8, 2, 3, 5].into_iter().enumerate() {
        let d = 2 + i;
        let basis = random_basis(&mut rng, d, 1.0);
        let rows = 7 + i;
        let codec = GroupCodec::new(basis, (i % 2 == 0).then(|| CompandingParam::new(33.3).unwrap()), bits, 1.7, rows, 5)
            .unwrap();
        let codec = glvq_core::container::round_side_info(&codec).unwrap();
        let l = codec.columns();
        groups.push(ArchiveGroup { codes: random_codes(&mut rng, d, l, bits), codec });
    }
    let bytes = write_archive(&groups).unwrap();
    let again = write_archive(&read_archive(&bytes).unwrap()).unwrap();
    assert_eq!(bytes, again);
}
