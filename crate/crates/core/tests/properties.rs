use mmdiv::data::{load_csv, Dataset};
use mmdiv::estimator::{build_instruments, kernel_for};
use mmdiv::inference::{spec_test, WildWeights};
use mmdiv::kernels::{entry_sd, kernel_matrix, kernel_sd_mc, wmd_lambda, KernelMatrix, KernelMeta, KernelSpec};
use mmdiv::mdd::{gmdc, gmdd_sq, mdd_sq};
use mmdiv::rng::child_rng;
use mmdiv::simulate::{gen_dgp, omega, run_mc, summarize, DgpConfig, DgpId};
use mmdiv::{estimate, Method};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(n: usize, p: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-5.0f64..5.0, n * p).prop_map(move |v| DMatrix::from_row_slice(n, p, &v))
}

fn sample(nmax: usize, pmax: usize) -> impl Strategy<Value = (DVector<f64>, DMatrix<f64>)> {
    (3..=nmax, 1..=pmax).prop_flat_map(|(n, p)| {
        (
            prop::collection::vec(-5.0f64..5.0, n).prop_map(DVector::from_vec),
            matrix(n, p),
        )
    })
}

/// Orthogonal matrix from the QR factor of a square matrix.
fn rotation(seed: &DMatrix<f64>) -> DMatrix<f64> {
    let p = seed.nrows();
    let m = seed + DMatrix::identity(p, p) * 3.0;
    m.qr().q()
}

fn shift_scale_rotate(z: &DMatrix<f64>, c: &DVector<f64>, q: f64, rot: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = z * rot.transpose() * q;
    for mut row in out.row_iter_mut() {
        row += c.transpose();
    }
    out
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

fn dgp_dataset(seed: u64, n: usize) -> Dataset {
    gen_dgp(&DgpConfig::new(DgpId::Dgp1A, n, 1.0, seed), 0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kernels_are_symmetric_with_valid_ranges((_, z) in sample(25, 3)) {
        let n = z.nrows();
        let mmd = kernel_matrix(&z, KernelSpec::Mmd, None).unwrap();
        let dl = kernel_matrix(&z, KernelSpec::Dl, None).unwrap();
        let esc6 = kernel_matrix(&z, KernelSpec::Esc6, None).unwrap();
        for k in [&mmd, &dl, &esc6] {
            prop_assert_eq!(&k.values, &k.values.transpose());
        }
        for i in 0..n {
            prop_assert_eq!(mmd.values[(i, i)], 0.0);
            for j in 0..n {
                prop_assert!(mmd.values[(i, j)] <= 0.0);
                let d = dl.values[(i, j)];
                prop_assert!((0.0..=1.0).contains(&d));
                prop_assert!(d <= dl.values[(i, i)].min(dl.values[(j, j)]));
                prop_assert!(esc6.values[(i, j)] >= 0.0);
            }
            prop_assert!(dl.values[(i, i)] >= 1.0 / n as f64);
        }
        if let Ok(iiv) = kernel_matrix(&z, KernelSpec::IivGauss, None) {
            prop_assert_eq!(&iiv.values, &iiv.values.transpose());
            for i in 0..n {
                prop_assert_eq!(iiv.values[(i, i)], 1.0);
                for j in 0..n {
                    prop_assert!(iiv.values[(i, j)] > 0.0 || i != j);
                    prop_assert!(iiv.values[(i, j)] <= 1.0);
                }
            }
        }
    }

    #[test]
    fn mdd_scales_with_abs_q((w, z) in sample(30, 3), q in -20.0f64..20.0) {
        let base = mdd_sq(&w, &z).unwrap();
        let scaled = mdd_sq(&w, &(&z * q)).unwrap();
        prop_assert!((scaled - q.abs() * base).abs() <= 1e-10 * (1.0 + q.abs() * base.abs()));
    }

    #[test]
    fn mdd_is_nonnegative_and_permutation_invariant((w, z) in sample(30, 3), seed in any::<u64>()) {
        let base = mdd_sq(&w, &z).unwrap();
        let scale = w.amax().powi(2) * z.amax().max(1.0);
        prop_assert!(base >= -1e-12 * scale);
        let n = w.len();
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut child_rng(seed, 0));
        let wp = DVector::from_fn(n, |i, _| w[perm[i]]);
        let zp = DMatrix::from_fn(n, z.ncols(), |i, c| z[(perm[i], c)]);
        let permuted = mdd_sq(&wp, &zp).unwrap();
        prop_assert!((permuted - base).abs() <= 1e-12 * (1.0 + scale));
    }

    #[test]
    fn esc6_is_invariant_to_similarity_transforms(
        z in matrix(12, 3),
        seed in matrix(3, 3),
        c in prop::collection::vec(-10.0f64..10.0, 3),
        q in prop_oneof![-8.0f64..-0.2, 0.2f64..8.0],
    ) {
        let rot = rotation(&seed);
        let moved = shift_scale_rotate(&z, &DVector::from_vec(c), q, &rot);
        let a = kernel_matrix(&z, KernelSpec::Esc6, None).unwrap();
        let b = kernel_matrix(&moved, KernelSpec::Esc6, None).unwrap();
        prop_assert!(max_abs_diff(&a.values, &b.values) < 1e-10);
    }

    #[test]
    fn iiv_is_affine_invariant(
        z in matrix(15, 2),
        a in matrix(2, 2),
        c in prop::collection::vec(-10.0f64..10.0, 2),
    ) {
        let base = kernel_matrix(&z, KernelSpec::IivGauss, None);
        prop_assume!(base.is_ok());
        let mix = DMatrix::identity(2, 2) * 6.0 + a;
        let mut moved = &z * mix;
        for mut row in moved.row_iter_mut() {
            row += DVector::from_vec(c.clone()).transpose();
        }
        let b = kernel_matrix(&moved, KernelSpec::IivGauss, None).unwrap();
        prop_assert!(max_abs_diff(&base.unwrap().values, &b.values) < 1e-9);
    }

    #[test]
    fn gmdc_is_invariant_to_affine_maps_of_w(
        (w, z) in sample(25, 3),
        a in -10.0f64..10.0,
        b in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
    ) {
        prop_assume!(w.variance() > 1e-3);
        for spec in [KernelSpec::Mmd, KernelSpec::Dl] {
            let k = kernel_matrix(&z, spec, None).unwrap();
            let g = gmdc(&w, &k).unwrap();
            let moved = w.map(|v| a + b * v);
            prop_assert!((gmdc(&moved, &k).unwrap() - g).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&g));
        }
    }

    #[test]
    fn mmd_gmdc_is_invariant_to_similarity_maps_of_z(
        (w, z) in sample(20, 3),
        c in prop::collection::vec(-10.0f64..10.0, 3),
        q in prop_oneof![-8.0f64..-0.2, 0.2f64..8.0],
    ) {
        prop_assume!(w.variance() > 1e-3);
        let p = z.ncols();
        let seed = DMatrix::from_fn(p, p, |i, j| (i as f64 + 1.3 * j as f64).sin());
        let moved = shift_scale_rotate(&z, &DVector::from_vec(c[..p].to_vec()), q, &rotation(&seed));
        let k1 = kernel_matrix(&z, KernelSpec::Mmd, None).unwrap();
        let k2 = kernel_matrix(&moved, KernelSpec::Mmd, None).unwrap();
        prop_assert!((gmdc(&w, &k1).unwrap() - gmdc(&w, &k2).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn gmdd_obeys_the_cauchy_schwarz_bound(
        w in prop::collection::vec(-5.0f64..5.0, 12),
        entries in prop::collection::vec(-3.0f64..3.0, 144),
    ) {
        let raw = DMatrix::from_row_slice(12, 12, &entries);
        let values = (&raw + raw.transpose()) * 0.5;
        let k = KernelMatrix { values, spec: KernelSpec::Dl, meta: KernelMeta::default() };
        let w = DVector::from_vec(w);
        let wc = w.map(|v| v - w.mean());
        let bound = wc.norm_squared() / 12.0 * entry_sd(&k.values);
        prop_assert!(gmdd_sq(&w, &k).unwrap().abs() <= bound * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn wmd_lambda_is_invariant_to_column_scaling(
        seed in 0u64..1000,
        scales in prop::collection::vec(prop_oneof![-10.0f64..-0.1, 0.1f64..10.0], 4),
    ) {
        let ds = dgp_dataset(seed, 30);
        let k = kernel_for(&ds, KernelSpec::Wmd { bandwidth: 1.0 }).unwrap();
        let mut kt = k.values.clone();
        kt.fill_diagonal(0.0);
        let mut aux = DMatrix::zeros(30, 4);
        aux.set_column(0, ds.y());
        aux.columns_mut(1, 3).copy_from(ds.x());
        let base = wmd_lambda(&aux, &kt).unwrap();
        let scaled = DMatrix::from_fn(30, 4, |i, c| aux[(i, c)] * scales[c]);
        let moved = wmd_lambda(&scaled, &kt).unwrap();
        prop_assert!((moved - base).abs() <= 1e-8 * (1.0 + base.abs()));
        prop_assert_eq!(k.meta.lambda.unwrap(), base);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn estimates_move_with_outcome_shifts_and_scales(
        seed in 0u64..10_000,
        shift in prop::collection::vec(-3.0f64..3.0, 3),
        c in prop_oneof![-4.0f64..-0.25, 0.25f64..4.0],
    ) {
        let ds = dgp_dataset(seed, 60);
        let b = DVector::from_vec(shift);
        for spec in [KernelSpec::Mmd, KernelSpec::Dl, KernelSpec::IivGauss, KernelSpec::Esc6] {
            let base = estimate(&ds, spec).unwrap().theta;
            let shifted = ds.with_outcome(ds.y() + ds.x() * &b).unwrap();
            let moved = estimate(&shifted, spec).unwrap().theta;
            prop_assert!((&moved - (&base + &b)).amax() <= 1e-8 * (1.0 + base.amax() + b.amax()));
            let scaled = ds.with_outcome(ds.y() * c).unwrap();
            let moved = estimate(&scaled, spec).unwrap().theta;
            prop_assert!((&moved - &base * c).amax() <= 1e-8 * (1.0 + c.abs() * base.amax()));
        }
    }

    #[test]
    fn estimates_solve_the_normal_equations_and_vcov_is_psd(seed in 0u64..10_000) {
        let ds = dgp_dataset(seed, 60);
        for spec in [KernelSpec::Mmd, KernelSpec::Dl, KernelSpec::IivGauss, KernelSpec::Wmd { bandwidth: 1.0 }] {
            let fit = estimate(&ds, spec).unwrap();
            let h = build_instruments(&ds, &kernel_for(&ds, spec).unwrap()).unwrap().h;
            let score = h.transpose() * &fit.residuals;
            let scale = (h.transpose().abs() * ds.y().abs()).amax();
            prop_assert!(score.amax() <= 1e-9 * scale, "{}", spec);
            prop_assert_eq!(&fit.vcov, &fit.vcov.transpose());
            let eig = fit.vcov.clone().symmetric_eigenvalues();
            prop_assert!(eig.min() >= -1e-12 * eig.max().abs());
            prop_assert!(fit.se.iter().zip(fit.vcov.diagonal().iter()).all(|(s, v)| (s * s - v).abs() <= 1e-12 * v.abs().max(1e-300)));
        }
    }

    #[test]
    fn mmd_estimate_is_invariant_to_similarity_maps_of_z(
        seed in 0u64..10_000,
        c in prop::collection::vec(-10.0f64..10.0, 2),
        q in prop_oneof![-8.0f64..-0.2, 0.2f64..8.0],
        angle in 0.0f64..6.3,
    ) {
        let ds = dgp_dataset(seed, 50);
        let rot = DMatrix::from_row_slice(2, 2, &[angle.cos(), -angle.sin(), angle.sin(), angle.cos()]);
        let z = shift_scale_rotate(ds.z(), &DVector::from_vec(c), q, &rot);
        let moved = Dataset::new(
            ds.y().clone(), ds.x().clone(), z, "y",
            ds.x_names().to_vec(), ds.z_names().to_vec(), ds.endog_mask().to_vec(),
        ).unwrap();
        for spec in [KernelSpec::Mmd, KernelSpec::Esc6, KernelSpec::IivGauss] {
            let a = estimate(&ds, spec).unwrap().theta;
            let b = estimate(&moved, spec).unwrap().theta;
            prop_assert!((&a - &b).amax() <= 1e-8 * (1.0 + a.amax()), "{}", spec);
        }
    }

    #[test]
    fn csv_round_trip_is_exact(
        values in prop::collection::vec(-1e6f64..1e6, 3 * 8),
        tiny in -1e-300f64..1e-300,
    ) {
        let n = 8;
        let mut v = values.clone();
        v[0] = tiny;
        let y = DVector::from_fn(n, |i, _| v[i]);
        let x = DMatrix::from_fn(n, 1, |i, _| v[n + i]);
        let z = DMatrix::from_fn(n, 1, |i, _| v[2 * n + i] + i as f64);
        let ds = Dataset::with_intercept(y, x, z, "y", vec!["d".into()], vec!["z".into()], vec![true]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.csv");
        ds.write_csv(&path).unwrap();
        let back = load_csv(&path, "y", &["d".into()], &["z".into()], &["d".into()]).unwrap();
        prop_assert_eq!(back.y(), ds.y());
        prop_assert_eq!(back.x(), ds.x());
        prop_assert_eq!(back.z(), ds.z());
        back.write_csv(&path).unwrap();
        let again = load_csv(&path, "y", &["d".into()], &["z".into()], &["d".into()]).unwrap();
        prop_assert_eq!(again, back);
    }

    #[test]
    fn mc_metrics_satisfy_identities(
        outcomes in prop::collection::vec(prop::option::weighted(0.95, (-2.0f64..2.0, any::<bool>())), 1..80),
    ) {
        let row = summarize(Method::Tsls, &outcomes);
        let ok: Vec<(f64, bool)> = outcomes.iter().flatten().copied().collect();
        prop_assert_eq!(row.failures, outcomes.len() - ok.len());
        if ok.is_empty() {
            prop_assert!(row.mb.is_nan());
        } else {
            prop_assert!(row.rmse * row.rmse >= row.mb * row.mb - 1e-12);
            let max_abs = ok.iter().map(|o| o.0.abs()).fold(0.0, f64::max);
            prop_assert!(row.mad <= max_abs && row.mad >= 0.0);
            prop_assert!(row.rmse <= max_abs + 1e-12);
            prop_assert!((0.0..=1.0).contains(&row.rej));
        }
        prop_assert_eq!(row.valid, row.failures as f64 <= 0.01 * outcomes.len() as f64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn bootstrap_pvalues_are_bounded_and_reproducible(seed in any::<u64>(), data_seed in 0u64..1000) {
        let ds = dgp_dataset(data_seed, 50);
        let a = spec_test(&ds, KernelSpec::Mmd, 99, seed, WildWeights::Rademacher).unwrap();
        let b = spec_test(&ds, KernelSpec::Mmd, 99, seed, WildWeights::Rademacher).unwrap();
        prop_assert_eq!(&a, &b);
        let m = (a.boot_stats.len() + 1) as f64;
        prop_assert!(a.pvalue >= 1.0 / m && a.pvalue <= 1.0);
        prop_assert!(((a.pvalue * m).round() - a.pvalue * m).abs() < 1e-9);
        prop_assert!(a.stat >= 0.0);
        prop_assert_eq!(a.boot_stats.len() + a.failed_draws, 99);
    }
}

#[test]
fn bootstrap_is_thread_count_invariant() {
    let ds = dgp_dataset(3, 60);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| spec_test(&ds, KernelSpec::Dl, 99, 11, WildWeights::Mammen).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn wild_weights_have_the_right_moments() {
    let mut rng = child_rng(42, 0);
    let draws = 400_000;
    for scheme in [WildWeights::Mammen, WildWeights::Rademacher] {
        let v: Vec<f64> = (0..draws).map(|_| scheme.draw(&mut rng)).collect();
        let m = |k: i32| v.iter().map(|x| x.powi(k)).sum::<f64>() / draws as f64;
        let third = if scheme == WildWeights::Mammen { 1.0 } else { 0.0 };
        // sampling sd of each moment is below 2 / sqrt(draws)
        assert!(m(1).abs() < 0.01, "{scheme} mean");
        assert!((m(2) - 1.0).abs() < 0.01, "{scheme} variance");
        assert!((m(3) - third).abs() < 0.02, "{scheme} third moment");
    }
}

#[test]
fn mmd_kernel_sd_is_stable_while_gaussian_sd_vanishes() {
    let mut last = f64::INFINITY;
    for p in [1, 2, 4, 8, 12, 18] {
        let iiv = kernel_sd_mc(KernelSpec::IivGauss, p, 20_000, 1).unwrap();
        assert!(iiv.sd < last, "p = {p}");
        last = iiv.sd;
        if p >= 4 {
            let mmd = kernel_sd_mc(KernelSpec::Mmd, p, 20_000, 1).unwrap();
            assert!((0.9..=1.1).contains(&mmd.sd), "p = {p}: {}", mmd.sd);
        }
    }
}

#[test]
fn kernel_sd_is_thread_count_invariant() {
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| kernel_sd_mc(KernelSpec::Dl, 3, 10_000, 5).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn dgp_draws_are_deterministic_per_replication() {
    for id in [DgpId::Dgp0A, DgpId::Dgp0B, DgpId::Dgp1A, DgpId::Dgp1B, DgpId::Dgp4] {
        let cfg = DgpConfig::new(id, 40, 0.5, 77);
        let a = gen_dgp(&cfg, 3).unwrap();
        assert_eq!(a, gen_dgp(&cfg, 3).unwrap());
        assert_ne!(a.y(), gen_dgp(&cfg, 4).unwrap().y());
    }
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn dgp_moments_match_their_definitions() {
    let n = 40_000;
    // instruments follow the exp(-|k - l|) correlation structure
    let ds = gen_dgp(&DgpConfig::new(DgpId::Dgp4, n, 0.0, 5).with_pz(3), 0).unwrap();
    let col = |k: usize| ds.z().column(k).iter().copied().collect::<Vec<_>>();
    let om = omega(3);
    for (k, l) in [(0, 1), (0, 2), (1, 2)] {
        assert!((corr(&col(k), &col(l)) - om[(k, l)]).abs() < 0.02, "({k},{l})");
    }
    // structural error: U = y - 1 - D; first-stage error V = D - sum(Z)/sqrt(p)
    let d: Vec<f64> = ds.x().column(1).iter().copied().collect();
    let u: Vec<f64> = (0..n).map(|i| ds.y()[i] - 1.0 - d[i]).collect();
    let v: Vec<f64> = (0..n).map(|i| d[i] - ds.z().row(i).sum() / 3f64.sqrt()).collect();
    assert!((corr(&u, &v) - 0.5).abs() < 0.02);

    // DGP 1B: D is uncorrelated with each instrument yet depends on their product
    let ds = gen_dgp(&DgpConfig::new(DgpId::Dgp1B, n, 1.0, 6), 0).unwrap();
    let d: Vec<f64> = ds.x().column(1).iter().copied().collect();
    let prod: Vec<f64> = (0..n).map(|i| ds.z()[(i, 0)].sin() * ds.z()[(i, 1)].sin()).collect();
    for k in 0..2 {
        let zk: Vec<f64> = ds.z().column(k).iter().copied().collect();
        assert!(corr(&d, &zk).abs() < 0.03, "instrument {k}");
    }
    assert!(corr(&d, &prod) > 0.3);
}

#[test]
fn single_replication_summary_is_the_raw_error() {
    let cfg = DgpConfig::new(DgpId::Dgp4, 80, 0.0, 9).with_pz(2);
    let s = run_mc(&cfg, 1, &[Method::Icm(KernelSpec::Mmd)]).unwrap();
    let fit = estimate(&gen_dgp(&cfg, 0).unwrap(), KernelSpec::Mmd).unwrap();
    let err = fit.theta[1] - 1.0;
    let row = &s.rows[0];
    assert_eq!(row.mb, err);
    assert_eq!(row.mad, err.abs());
    assert!((row.rmse - err.abs()).abs() < 1e-15);
}

#[test]
fn data_dependent_kernels_need_whole_sample() {
    let z = DMatrix::from_fn(10, 2, |i, j| ((i * 7 + j * 3) % 11) as f64);
    let k = kernel_matrix(&z, KernelSpec::Dl, None).unwrap();
    let sub = kernel_matrix(&z.rows(0, 5).into_owned(), KernelSpec::Dl, None).unwrap();
    assert!(KernelSpec::Dl.is_data_dependent());
    assert!(!KernelSpec::Mmd.is_data_dependent());
    assert_ne!(k.values.view((0, 0), (5, 5)).into_owned(), sub.values);
}
