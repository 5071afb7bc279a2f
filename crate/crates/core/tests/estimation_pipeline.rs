use fbmlab::estimation::*;
use fbmlab::kernels::{KernelSpec, ThetaLaw};
use fbmlab::particles::RunSpec;
use fbmlab::stable::StableParams;
use fbmlab::step::TestFamily;

fn every_kind() -> Vec<KernelSpec> {
    let a = |x: f64| StableParams::new(x).unwrap();
    vec![
        KernelSpec::Fbm { h: 0.3 },
        KernelSpec::SubFbm { h: 0.7 },
        KernelSpec::NsFbm { h: 1.25 },
        KernelSpec::OddPart { h: 0.4 },
        KernelSpec::SpecialH1,
        KernelSpec::DensityRho { theta: ThetaLaw::Deterministic { count: 1 }, alpha: a(1.5), family: TestFamily::OddPair },
        KernelSpec::ZLimit { theta_mean: 1.0, alpha: a(0.5), family: TestFamily::SymmetricInterval },
        KernelSpec::OccLimit { alpha: a(0.5), family: TestFamily::IndicatorRight },
        KernelSpec::NsfK { gamma: 3.5, prefactor: 1.0 },
    ]
}

#[test]
fn reference_samples_match_their_own_kernel() {
    let grid = [0.5, 1.0, 1.5, 2.0];
    for (i, spec) in every_kind().into_iter().enumerate() {
        let batch = cholesky_batch(&spec, &grid, RunSpec { replicates: 20_000, seed: i as u64 }).unwrap();
        let report = compare_to_kernel(&estimate_batch(&batch).unwrap(), &spec, false).unwrap();
        assert!(report.pass, "{}", report.table());
    }
}

#[test]
fn standard_errors_are_calibrated() {
    let spec = KernelSpec::SubFbm { h: 0.3 };
    let grid = [1.0, 2.0, 3.0];
    let (mut big, mut total) = (0usize, 0usize);
    for rep in 0..200 {
        let batch = cholesky_batch(&spec, &grid, RunSpec { replicates: 500, seed: 1000 + rep }).unwrap();
        let report = compare_to_kernel(&estimate_batch(&batch).unwrap(), &spec, false).unwrap();
        for i in 0..3 {
            for k in i..3 {
                total += 1;
                big += usize::from(report.z_scores[(i, k)].abs() > 2.0);
            }
        }
    }
    let frac = big as f64 / total as f64;
    assert!((0.02..=0.08).contains(&frac), "{frac}");
}

#[test]
fn ks_null_calibration() {
    let spec = KernelSpec::Fbm { h: 0.5 };
    let mut rejections = 0;
    for rep in 0..200u64 {
        let a = cholesky_batch(&spec, &[1.0], RunSpec { replicates: 2000, seed: 2 * rep }).unwrap();
        let b = cholesky_batch(&spec, &[1.0], RunSpec { replicates: 2000, seed: 2 * rep + 1 }).unwrap();
        let col = |x: &fbmlab::particles::FluctuationBatch| x.values.iter().map(|v| v[0]).collect::<Vec<_>>();
        let (_, p) = two_sample_ks(&col(&a), &col(&b)).unwrap();
        rejections += usize::from(p < 1e-3);
    }
    assert!(rejections <= 2);
}

#[test]
fn marginals_of_negative_subfractional_samples_are_normal() {
    let spec = KernelSpec::NsFbm { h: 1.25 };
    let grid: Vec<f64> = (1..=10).map(|i| i as f64 * 0.3).collect();
    let batch = cholesky_batch(&spec, &grid, RunSpec { replicates: 5000, seed: 8 }).unwrap();
    let reference = cholesky_batch(&KernelSpec::Fbm { h: 0.5 }, &[1.0], RunSpec { replicates: 5000, seed: 9 }).unwrap();
    let z: Vec<f64> = reference.values.iter().map(|v| v[0]).collect();
    for (i, t) in grid.iter().enumerate() {
        let sd = spec.eval(*t, *t).unwrap().sqrt();
        let col: Vec<f64> = batch.values.iter().map(|v| v[i] / sd).collect();
        assert!(two_sample_ks(&col, &z).unwrap().1 > 1e-3);
    }
}

#[test]
fn report_json_has_the_documented_fields() {
    let spec = KernelSpec::Fbm { h: 0.5 };
    let batch = cholesky_batch(&spec, &[1.0, 2.0], RunSpec { replicates: 100, seed: 0 }).unwrap();
    let json = compare_to_kernel(&estimate_batch(&batch).unwrap(), &spec, true).unwrap().to_json();
    for key in ["grid", "cov", "se", "z", "fitted_const", "pass"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}
