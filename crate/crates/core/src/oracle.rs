//! Self-checks against closed-form and brute-force references, as run by
//! `iftflow oracle-check`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::energy::MmdEnergy;
use crate::flows::{euler_spherical_mmd, fit_decay_rate, interpolation_oracle};
use crate::kernels::KernelSpec;
use crate::measures::{simplex_project, ParticleMeasure};
use crate::points::PointCloud;
use crate::solvers::{brute_force_simplex, solve_qp_exact, SimplexQp};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_probability(rng: &mut ChaCha8Rng, n: usize, d: usize, spread: f64) -> ParticleMeasure {
    let pts: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-spread..spread)).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    ParticleMeasure::new(
        PointCloud::from_flat(d, pts).expect("d > 0"),
        raw.iter().map(|w| w / total).collect(),
    )
    .expect("valid by construction")
}

/// `MMD^2(mu_t, pi) = e^{-2t} MMD^2(mu_0, pi)` along the interpolation.
pub fn check_interpolation_law(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for pair in 0..20 {
        let sigma = [0.5, 1.0, 10.0][pair % 3];
        let mu0 = random_probability(&mut rng, 5, 2, 3.0);
        let pi = random_probability(&mut rng, 4, 2, 3.0);
        let energy = MmdEnergy::new(KernelSpec::gaussian(sigma).expect("positive"), pi.clone())
            .expect("valid target");
        let base = energy.mmd_squared(&mu0).expect("dims match");
        for t in [0.0, 0.25, 0.5, 1.0, 2.0] {
            let mu_t = interpolation_oracle(&mu0, &pi, t).expect("valid");
            let got = energy.mmd_squared(&mu_t).expect("dims match");
            worst = worst.max((got - (-2.0 * t).exp() * base).abs());
        }
    }
    CheckResult {
        name: "interpolation_law",
        passed: worst <= 1e-10,
        detail: format!("max abs error {worst:e} (tol 1e-10)"),
    }
}

/// Euler at `h = 1e-3` up to `T = 2` against the closed form and its rate.
pub fn check_euler_consistency(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu0 = random_probability(&mut rng, 5, 2, 3.0);
    let pi = random_probability(&mut rng, 4, 2, 3.0);
    let energy = MmdEnergy::new(KernelSpec::gaussian(1.0).expect("positive"), pi.clone())
        .expect("valid target");
    let h = 1e-3;
    let steps = 2000;
    let trace = match euler_spherical_mmd(&energy, &mu0, h, steps) {
        Ok(t) => t,
        Err(e) => {
            return CheckResult {
                name: "euler_consistency",
                passed: false,
                detail: e.to_string(),
            }
        }
    };
    let exact = interpolation_oracle(&mu0, &pi, 2.0).expect("valid");
    let last = trace.final_measure().expect("final snapshot");
    let weight_err = last
        .weights
        .iter()
        .zip(&exact.weights)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let rate = fit_decay_rate(&trace, 0..trace.losses.len(), h).unwrap_or(f64::NAN);
    CheckResult {
        name: "euler_consistency",
        passed: weight_err <= 5e-3 && (rate + 2.0).abs() <= 0.02,
        detail: format!("weight error {weight_err:e} (tol 5e-3), fitted rate {rate:.6} (want -2 +/- 0.02)"),
    }
}

/// Exact QP solver against a 1e-3 grid on random 3-dimensional instances.
pub fn check_qp_against_grid(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let a = nalgebra::DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-0.5..0.5));
        let q = &a * a.transpose();
        let q = (&q + q.transpose()) * 0.5;
        let c = nalgebra::DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let qp = SimplexQp::new(q, c).expect("PSD by construction");
        let start = simplex_project(&[rng.gen(), rng.gen(), rng.gen()]);
        let exact = match solve_qp_exact(&qp, &start, 1e-10, 10_000) {
            Ok(b) => b,
            Err(e) => {
                return CheckResult {
                    name: "qp_vs_grid",
                    passed: false,
                    detail: e.to_string(),
                }
            }
        };
        let grid = brute_force_simplex(&qp, 1e-3).expect("n = 3");
        worst = worst.max((qp.objective(&exact) - qp.objective(&grid)).abs());
    }
    CheckResult {
        name: "qp_vs_grid",
        passed: worst <= 1e-6,
        detail: format!("max objective gap {worst:e} (tol 1e-6)"),
    }
}

/// Witness gradient against central differences of the witness.
pub fn check_witness_gradient(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = random_probability(&mut rng, 10, 2, 2.0);
    let pi = random_probability(&mut rng, 10, 2, 2.0);
    let energy = MmdEnergy::new(KernelSpec::gaussian(1.0).expect("positive"), pi).expect("valid target");
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let z = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let g = energy.witness_gradient(&mu, &z).expect("dims match");
        let mut err = 0.0;
        let mut norm = 0.0;
        for d in 0..2 {
            let mut zp = z;
            let mut zm = z;
            zp[d] += h;
            zm[d] -= h;
            let fd = (energy.witness(&mu, &zp).expect("dims") - energy.witness(&mu, &zm).expect("dims"))
                / (2.0 * h);
            err += (fd - g[d]).powi(2);
            norm += fd * fd;
        }
        worst = worst.max(err.sqrt() / norm.sqrt().max(1e-12));
    }
    CheckResult {
        name: "witness_gradient",
        passed: worst <= 1e-4,
        detail: format!("max relative error {worst:e} (tol 1e-4)"),
    }
}

pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        check_interpolation_law(seed),
        check_euler_consistency(seed),
        check_qp_against_grid(seed),
        check_witness_gradient(seed),
    ]
}
