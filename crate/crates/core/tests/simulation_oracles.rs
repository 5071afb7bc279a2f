use fbmlab::estimation::{compare_to_matrix, estimate_batch};
use fbmlab::oracles::*;
use fbmlab::particles::*;
use fbmlab::rng::replicate_rng;
use fbmlab::stable::{StableLaw, StableParams};
use fbmlab::step::{StepFunction, TestFamily};
use nalgebra::DMatrix;

#[test]
fn branching_moments_match_simulation() {
    let alpha = StableParams::new(1.0).unwrap();
    let law = StableLaw::new(alpha).unwrap();
    let phi = StepFunction::new(vec![-1.0, 0.0, 1.5], vec![1.0, -2.0]).unwrap();
    let (x, v, times) = (0.3, 2.0, [0.5, 1.0]);
    let n = 20_000u64;
    let (mut s1, mut s2, mut s4, mut pop) = ([0.0; 2], [0.0; 2], [0.0; 2], [0.0; 2]);
    for r in 0..n {
        let (mut acc, mut cnt) = ([0.0; 2], [0.0; 2]);
        evolve_branching(x, alpha, v, &times, &mut replicate_rng(21, r), POPULATION_CAP, |i, y| {
            acc[i] += phi.eval(y);
            cnt[i] += 1.0;
        })
        .unwrap();
        for i in 0..2 {
            s1[i] += acc[i];
            s2[i] += acc[i] * acc[i];
            s4[i] += acc[i].powi(4);
            pop[i] += cnt[i];
        }
    }
    let nf = n as f64;
    for i in 0..2 {
        let m = branching_moments(&law, v, times[i], &phi, x).unwrap();
        let (mean, second) = (s1[i] / nf, s2[i] / nf);
        assert!((mean - m.mean).abs() < 3.5 * ((second - mean * mean) / nf).sqrt());
        assert!((second - m.second).abs() < 3.5 * ((s4[i] / nf - second * second) / nf).sqrt());
        assert!((pop[i] / nf - 1.0).abs() < 0.05);
    }
}

#[test]
fn occupation_covariance_matches_the_grid_oracle() {
    let alpha = StableParams::new(1.5).unwrap();
    let model = OccupationModel { intensity: 0.2, alpha, horizon: 5.0, dt: 0.05 };
    let grid = [0.5, 1.0, 2.0];
    let fam = TestFamily::OddPair;
    let batch = occupation_batches(&model, std::slice::from_ref(&fam), &grid, RunSpec { replicates: 20_000, seed: 4 }).unwrap();
    let est = estimate_batch(&batch[0]).unwrap();
    let oracle = DMatrix::from_fn(3, 3, |i, k| {
        occupation_cov_grid(0.2, alpha, 5.0, 0.05, &fam.at(grid[i]).unwrap(), &fam.at(grid[k]).unwrap()).unwrap()
    });
    let report = compare_to_matrix(&est, &oracle, None, false, 4.0, "occupation").unwrap();
    assert!(report.pass, "{}", report.table());
}

#[test]
fn branching_occupation_variance_matches_the_grid_oracle() {
    let model = BranchingOccupationModel {
        intensity: 2.0,
        rate_v: 2.0,
        alpha: StableParams::new(1.0).unwrap(),
        horizon: 2.0,
        dt: 0.05,
        radius: 200.0,
        max_ancestors: 1e5,
    };
    let f = TestFamily::OddPair.at(1.0).unwrap();
    let batch = branching_occupation_batch(&model, &TestFamily::OddPair, &[1.0], RunSpec { replicates: 4000, seed: 6 }).unwrap();
    let est = estimate_batch(&batch).unwrap();
    let want = branching_occupation_cov_grid(2.0, model.alpha, 2.0, 0.05, &f, &f).unwrap();
    // Ancestors beyond the window are missing; allow 2% on top of MC error.
    assert!((est.cov[(0, 0)] - want).abs() < 3.0 * est.se[(0, 0)] + 0.02 * want, "{} vs {want}", est.cov[(0, 0)]);
}
