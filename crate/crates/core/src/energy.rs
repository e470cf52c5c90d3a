//! The squared-MMD energy against a fixed empirical target.
//!
//! [`MmdEnergy::mmd_squared`] returns the full `MMD^2(mu, pi)`. The flows
//! minimize `F = MMD^2 / 2`, whose first variation is the witness function
//! `w(z) = sum_i a_i k(x_i, z) - sum_j b_j k(y_j, z)`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::measures::ParticleMeasure;
use crate::points::PointCloud;

/// Quadratic forms below this are reported before being clamped to zero.
pub const NEGATIVE_WARN_THRESHOLD: f64 = -1e-10;

#[derive(Debug, Clone)]
pub struct MmdEnergy {
    kernel: KernelSpec,
    target: ParticleMeasure,
    target_self: f64,
}

impl MmdEnergy {
    pub fn new(kernel: KernelSpec, target: ParticleMeasure) -> Result<Self> {
        target.validate_probability()?;
        let kyy = kernel.gram_symmetric(&target.locations)?;
        let target_self = quad(&target.weights, &kyy, &target.weights);
        Ok(Self {
            kernel,
            target,
            target_self,
        })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn target(&self) -> &ParticleMeasure {
        &self.target
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    fn check(&self, mu: &ParticleMeasure) -> Result<()> {
        if mu.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: mu.dim(),
            });
        }
        mu.validate()
    }

    fn check_point(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: z.len(),
            });
        }
        Ok(())
    }

    /// `MMD^2(mu, pi) = a'Kxx a - 2 a'Kxy b + b'Kyy b`, clamped at zero.
    pub fn mmd_squared(&self, mu: &ParticleMeasure) -> Result<f64> {
        self.check(mu)?;
        let kxx = self.kernel.gram_symmetric(&mu.locations)?;
        let kxy = self.kernel.gram(&mu.locations, &self.target.locations)?;
        Ok(self.mmd_squared_from_grams(&mu.weights, &kxx, &kxy))
    }

    /// Same as [`mmd_squared`](Self::mmd_squared) with precomputed Gram blocks.
    pub fn mmd_squared_from_grams(&self, weights: &[f64], kxx: &DMatrix<f64>, kxy: &DMatrix<f64>) -> f64 {
        let value = quad(weights, kxx, weights) - 2.0 * quad(weights, kxy, &self.target.weights)
            + self.target_self;
        clamp_quadratic_form(value)
    }

    /// Witness function of `mu - pi` at `z`.
    pub fn witness(&self, mu: &ParticleMeasure, z: &[f64]) -> Result<f64> {
        self.check(mu)?;
        self.check_point(z)?;
        Ok(self.witness_unchecked(mu, z))
    }

    pub(crate) fn witness_unchecked(&self, mu: &ParticleMeasure, z: &[f64]) -> f64 {
        let pos: f64 = mu
            .locations
            .iter()
            .zip(&mu.weights)
            .map(|(x, a)| a * self.kernel.value(x, z))
            .sum();
        let neg: f64 = self
            .target
            .locations
            .iter()
            .zip(&self.target.weights)
            .map(|(y, b)| b * self.kernel.value(y, z))
            .sum();
        pos - neg
    }

    /// Spatial gradient of the witness function at `z`.
    pub fn witness_gradient(&self, mu: &ParticleMeasure, z: &[f64]) -> Result<Vec<f64>> {
        self.check(mu)?;
        self.check_point(z)?;
        let mut out = vec![0.0; z.len()];
        self.witness_gradient_into(mu, z, &mut out);
        Ok(out)
    }

    fn witness_gradient_into(&self, mu: &ParticleMeasure, z: &[f64], out: &mut [f64]) {
        let k = &self.kernel;
        accumulate_gradient(
            out,
            z,
            &mu.locations,
            &mu.weights,
            |i| k.value(mu.locations.point(i), z),
            &self.target.locations,
            &self.target.weights,
            |j| k.value(self.target.locations.point(j), z),
            k.grad_scale(),
        );
    }

    /// Witness gradients at each row of `points`.
    pub fn witness_gradients(&self, mu: &ParticleMeasure, points: &PointCloud) -> Result<PointCloud> {
        self.check(mu)?;
        if points.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: points.dim(),
            });
        }
        let mut out = PointCloud::from_flat(points.dim(), vec![0.0; points.as_flat().len()])?;
        for i in 0..points.len() {
            self.witness_gradient_into(mu, points.point(i), out.point_mut(i));
        }
        Ok(out)
    }

    /// Witness gradients at the atoms of `mu` itself, reusing `Kxx` and `Kxy`
    /// of its current locations. Bit-identical to [`witness_gradients`](Self::witness_gradients)
    /// evaluated at `mu.locations`.
    pub(crate) fn witness_gradients_at_atoms(
        &self,
        mu: &ParticleMeasure,
        kxx: &DMatrix<f64>,
        kxy: &DMatrix<f64>,
    ) -> PointCloud {
        let dim = mu.dim();
        let mut out = PointCloud::from_flat(dim, vec![0.0; mu.len() * dim])
            .expect("dimension is positive");
        for i in 0..mu.len() {
            let z = mu.locations.point(i);
            accumulate_gradient(
                out.point_mut(i),
                z,
                &mu.locations,
                &mu.weights,
                |j| kxx[(j, i)],
                &self.target.locations,
                &self.target.weights,
                |j| kxy[(i, j)],
                self.kernel.grad_scale(),
            );
        }
        out
    }

    /// Witness values at the rows of `points`.
    pub fn witness_values(&self, mu: &ParticleMeasure, points: &PointCloud) -> Result<Vec<f64>> {
        self.check(mu)?;
        if points.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: points.dim(),
            });
        }
        Ok(points.iter().map(|z| self.witness_unchecked(mu, z)).collect())
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_gradient(
    out: &mut [f64],
    z: &[f64],
    atoms: &PointCloud,
    weights: &[f64],
    k_atoms: impl Fn(usize) -> f64,
    targets: &PointCloud,
    target_weights: &[f64],
    k_targets: impl Fn(usize) -> f64,
    scale: f64,
) {
    out.fill(0.0);
    for (i, (x, a)) in atoms.iter().zip(weights).enumerate() {
        if *a == 0.0 {
            continue;
        }
        let c = a * k_atoms(i) * scale;
        for ((o, xd), zd) in out.iter_mut().zip(x).zip(z) {
            *o += c * (xd - zd);
        }
    }
    for (j, (y, b)) in targets.iter().zip(target_weights).enumerate() {
        let c = b * k_targets(j) * scale;
        for ((o, yd), zd) in out.iter_mut().zip(y).zip(z) {
            *o -= c * (yd - zd);
        }
    }
}

/// `u' M v`.
pub(crate) fn quad(u: &[f64], m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let mut total = 0.0;
    for (j, vj) in v.iter().enumerate() {
        if *vj == 0.0 {
            continue;
        }
        let col = m.column(j);
        let dot: f64 = u.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
        total += dot * vj;
    }
    total
}

fn clamp_quadratic_form(value: f64) -> f64 {
    if value < NEGATIVE_WARN_THRESHOLD {
        log::warn!("squared MMD evaluated to {value:e}; clamping to 0");
    }
    value.max(0.0)
}

/// `MMD^2` between two arbitrary weighted measures.
pub fn mmd_squared_between(kernel: &KernelSpec, a: &ParticleMeasure, b: &ParticleMeasure) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    a.validate()?;
    b.validate()?;
    let kaa = kernel.gram_symmetric(&a.locations)?;
    let kab = kernel.gram(&a.locations, &b.locations)?;
    let kbb = kernel.gram_symmetric(&b.locations)?;
    let value = quad(&a.weights, &kaa, &a.weights) - 2.0 * quad(&a.weights, &kab, &b.weights)
        + quad(&b.weights, &kbb, &b.weights);
    Ok(clamp_quadratic_form(value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_measure(rng: &mut ChaCha8Rng, n: usize, d: usize, spread: f64) -> ParticleMeasure {
        let pts: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-spread..spread)).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        ParticleMeasure::new(
            PointCloud::from_flat(d, pts).unwrap(),
            raw.iter().map(|w| w / s).collect(),
        )
        .unwrap()
    }

    /// Double loop over every pair of atoms of the signed measure.
    fn brute_mmd(k: &KernelSpec, a: &ParticleMeasure, b: &ParticleMeasure) -> f64 {
        let mut atoms: Vec<(&[f64], f64)> = a.locations.iter().zip(a.weights.iter().copied()).collect();
        atoms.extend(b.locations.iter().zip(b.weights.iter().map(|w| -w)));
        let mut s = 0.0;
        for (x, wx) in &atoms {
            for (y, wy) in &atoms {
                s += wx * wy * k.eval(x, y).unwrap();
            }
        }
        s
    }

    #[test]
    fn zero_at_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target = random_measure(&mut rng, 6, 2, 2.0);
        let e = MmdEnergy::new(KernelSpec::gaussian(1.0).unwrap(), target.clone()).unwrap();
        assert!(e.mmd_squared(&target).unwrap() <= 1e-12);
        for _ in 0..5 {
            let z: Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
            assert!(e.witness(&target, &z).unwrap().abs() <= 1e-15);
            assert!(e.witness_gradient(&target, &z).unwrap().iter().all(|g| g.abs() <= 1e-15));
        }
    }

    #[test]
    fn permuted_atoms_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = random_measure(&mut rng, 5, 3, 2.0);
        let order = [3, 1, 4, 0, 2];
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| target.locations.point(i).to_vec()).collect();
        let weights: Vec<f64> = order.iter().map(|&i| target.weights[i]).collect();
        let permuted = ParticleMeasure::new(PointCloud::from_rows(&rows).unwrap(), weights).unwrap();
        let e = MmdEnergy::new(KernelSpec::gaussian(0.7).unwrap(), target).unwrap();
        assert!(e.mmd_squared(&permuted).unwrap() <= 1e-12);
    }

    #[test]
    fn single_atoms_closed_form() {
        let sigma = 1.7;
        let k = KernelSpec::gaussian(sigma).unwrap();
        let x = [0.3, -1.0];
        let y = [1.1, 0.4];
        let mu = ParticleMeasure::uniform(PointCloud::from_rows(&[x]).unwrap()).unwrap();
        let pi = ParticleMeasure::uniform(PointCloud::from_rows(&[y]).unwrap()).unwrap();
        let e = MmdEnergy::new(k, pi).unwrap();
        let r2 = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
        let expected = 2.0 * (1.0 - (-r2 / (2.0 * sigma * sigma)).exp());
        assert_relative_eq!(e.mmd_squared(&mu).unwrap(), expected, epsilon = 1e-14);
        // witness at z = x is 1 - k(y, x)
        let w = e.witness(&mu, &x).unwrap();
        assert_relative_eq!(w, 1.0 - k.eval(&y, &x).unwrap(), epsilon = 1e-15);
    }

    #[test]
    fn matches_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mu = random_measure(&mut rng, 3, 2, 2.0);
            let pi = random_measure(&mut rng, 2, 2, 2.0);
            let k = KernelSpec::gaussian(rng.gen_range(0.5..3.0)).unwrap();
            let e = MmdEnergy::new(k, pi.clone()).unwrap();
            let brute = brute_mmd(&k, &mu, &pi);
            assert!((e.mmd_squared(&mu).unwrap() - brute).abs() <= 1e-12);
        }
    }

    #[test]
    fn symmetric_as_discrepancy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_measure(&mut rng, 4, 2, 2.0);
        let b = random_measure(&mut rng, 7, 2, 2.0);
        let k = KernelSpec::gaussian(1.2).unwrap();
        let ab = mmd_squared_between(&k, &a, &b).unwrap();
        let ba = mmd_squared_between(&k, &b, &a).unwrap();
        assert!((ab - ba).abs() <= 1e-14);
        let e = MmdEnergy::new(k, b).unwrap();
        assert!((e.mmd_squared(&a).unwrap() - ab).abs() <= 1e-14);
    }

    #[test]
    fn integral_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let mu = random_measure(&mut rng, 5, 2, 2.0);
            let pi = random_measure(&mut rng, 4, 2, 2.0);
            let e = MmdEnergy::new(KernelSpec::gaussian(1.0).unwrap(), pi.clone()).unwrap();
            let lhs: f64 = mu
                .locations
                .iter()
                .zip(&mu.weights)
                .map(|(x, a)| a * e.witness(&mu, x).unwrap())
                .sum::<f64>()
                - pi
                    .locations
                    .iter()
                    .zip(&pi.weights)
                    .map(|(y, b)| b * e.witness(&mu, y).unwrap())
                    .sum::<f64>();
            assert!((lhs - e.mmd_squared(&mu).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn joint_gram_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mu = random_measure(&mut rng, 5, 2, 2.0);
        let pi = random_measure(&mut rng, 3, 2, 2.0);
        let k = KernelSpec::gaussian(0.9).unwrap();
        let joint = mu.locations.concat(&pi.locations).unwrap();
        let g = k.gram(&joint, &joint).unwrap();
        let signed: Vec<f64> = mu.weights.iter().copied().chain(pi.weights.iter().map(|w| -w)).collect();
        let e = MmdEnergy::new(k, pi).unwrap();
        assert!((quad(&signed, &g, &signed) - e.mmd_squared(&mu).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn coincident_single_atoms_have_zero_gradient() {
        let x = [0.5, 0.5];
        let mu = ParticleMeasure::uniform(PointCloud::from_rows(&[x]).unwrap()).unwrap();
        let e = MmdEnergy::new(KernelSpec::gaussian(1.0).unwrap(), mu.clone()).unwrap();
        assert_eq!(e.witness_gradient(&mu, &[2.0, -1.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mu = random_measure(&mut rng, 10, 2, 2.0);
        let pi = random_measure(&mut rng, 10, 2, 2.0);
        let e = MmdEnergy::new(KernelSpec::gaussian(1.0).unwrap(), pi).unwrap();
        let h = 1e-6;
        for _ in 0..100 {
            let z: Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let g = e.witness_gradient(&mu, &z).unwrap();
            let mut err = 0.0;
            let mut norm = 0.0;
            for d in 0..2 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[d] += h;
                zm[d] -= h;
                let fd = (e.witness(&mu, &zp).unwrap() - e.witness(&mu, &zm).unwrap()) / (2.0 * h);
                err += (fd - g[d]).powi(2);
                norm += fd * fd;
            }
            assert!(err.sqrt() <= 1e-4 * norm.sqrt().max(1e-8));
        }
    }

    #[test]
    fn cached_gradients_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mu = random_measure(&mut rng, 8, 3, 2.0);
        let pi = random_measure(&mut rng, 6, 3, 2.0);
        let k = KernelSpec::gaussian(1.5).unwrap();
        let e = MmdEnergy::new(k, pi.clone()).unwrap();
        let kxx = k.gram_symmetric(&mu.locations).unwrap();
        let kxy = k.gram(&mu.locations, &pi.locations).unwrap();
        let direct = e.witness_gradients(&mu, &mu.locations).unwrap();
        let cached = e.witness_gradients_at_atoms(&mu, &kxx, &kxy);
        assert_eq!(direct, cached);
    }

    #[test]
    fn dimension_errors() {
        let pi = ParticleMeasure::uniform(PointCloud::from_rows(&[[0.0, 0.0]]).unwrap()).unwrap();
        let e = MmdEnergy::new(KernelSpec::gaussian(1.0).unwrap(), pi).unwrap();
        let mu3 = ParticleMeasure::uniform(PointCloud::from_rows(&[[0.0, 0.0, 0.0]]).unwrap()).unwrap();
        assert!(e.mmd_squared(&mu3).is_err());
        let mu2 = ParticleMeasure::uniform(PointCloud::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        assert!(e.witness(&mu2, &[0.0]).is_err());
        assert!(e.witness_gradient(&mu2, &[0.0, 0.0, 1.0]).is_err());
    }
}
