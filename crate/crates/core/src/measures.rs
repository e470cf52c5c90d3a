//! Weighted particle measures, simplex projection, and target samplers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::PointCloud;

/// Tolerance on `|sum(weights) - 1|` for a probability measure.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Weights below this are set to exactly zero and the atom counts as vanished.
pub const VANISH_THRESHOLD: f64 = 1e-15;

/// A finite weighted sum of Dirac masses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleMeasure {
    pub locations: PointCloud,
    pub weights: Vec<f64>,
}

impl ParticleMeasure {
    pub fn new(locations: PointCloud, weights: Vec<f64>) -> Result<Self> {
        let mu = Self { locations, weights };
        mu.validate()?;
        Ok(mu)
    }

    /// Equal weights `1/n` on every location.
    pub fn uniform(locations: PointCloud) -> Result<Self> {
        let n = locations.len();
        if n == 0 {
            return Err(Error::invalid("uniform measure over an empty point set"));
        }
        let weights = vec![1.0 / n as f64; n];
        Ok(Self { locations, weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.locations.dim()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn is_probability(&self) -> bool {
        (self.total_mass() - 1.0).abs() <= MASS_TOLERANCE
    }

    /// Checks shape, finiteness and nonnegativity.
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.locations.len() {
            return Err(Error::DimensionMismatch {
                expected: self.locations.len(),
                found: self.weights.len(),
            });
        }
        if !self.locations.is_finite() {
            return Err(Error::invalid("non-finite particle location"));
        }
        if let Some(w) = self.weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::invalid(format!("invalid particle weight {w}")));
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus the unit-mass condition.
    pub fn validate_probability(&self) -> Result<()> {
        self.validate()?;
        if !self.is_probability() {
            return Err(Error::invalid(format!(
                "weights sum to {}, not 1",
                self.total_mass()
            )));
        }
        Ok(())
    }

    /// Indices of atoms whose weight is exactly zero.
    pub fn vanished(&self) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w == 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Zeroes weights under [`VANISH_THRESHOLD`]. The atoms stay in the measure.
    pub fn clamp_vanished(&mut self) {
        clamp_small_weights(&mut self.weights);
    }
}

pub(crate) fn clamp_small_weights(weights: &mut [f64]) {
    for w in weights.iter_mut() {
        if *w < VANISH_THRESHOLD {
            *w = 0.0;
        }
    }
}

/// Euclidean projection onto the probability simplex.
///
/// Sort-based threshold method: find the largest `k` with
/// `u_k - (sum_{i<=k} u_i - 1) / k > 0` over the sorted-descending `u`, then
/// shift by that threshold and clamp at zero.
pub fn simplex_project(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "simplex projection of an empty vector");
    let mut u = v.to_vec();
    u.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cumsum += uk;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|x| (x - theta).max(0.0)).collect();
    // Re-center the residual round-off on the support.
    let support: Vec<usize> = (0..out.len()).filter(|&i| out[i] > 0.0).collect();
    let excess = out.iter().sum::<f64>() - 1.0;
    if excess != 0.0 && !support.is_empty() {
        let shift = excess / support.len() as f64;
        for &i in &support {
            out[i] = (out[i] - shift).max(0.0);
        }
    }
    out
}

/// One Gaussian component of a target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetVariant {
    Gaussian {
        mean: Vec<f64>,
        covariance: Vec<Vec<f64>>,
    },
    Mixture {
        components: Vec<GaussianComponent>,
    },
    /// Equal-weight mixture with generated parameters. `structure_seed` fixes
    /// the means and covariances independently of the sample seed.
    RandomMixture {
        dim: usize,
        components: usize,
        mean_norm: f64,
        min_eigenvalue: f64,
        structure_seed: u64,
    },
}

/// A distribution to draw `samples` atoms from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub variant: TargetVariant,
    pub samples: usize,
}

impl TargetSpec {
    pub fn dim(&self) -> usize {
        match &self.variant {
            TargetVariant::Gaussian { mean, .. } => mean.len(),
            TargetVariant::Mixture { components } => {
                components.first().map_or(0, |c| c.mean.len())
            }
            TargetVariant::RandomMixture { dim, .. } => *dim,
        }
    }

    /// Expands the spec into explicit mixture components.
    pub fn components(&self) -> Result<Vec<GaussianComponent>> {
        match &self.variant {
            TargetVariant::Gaussian { mean, covariance } => Ok(vec![GaussianComponent {
                weight: 1.0,
                mean: mean.clone(),
                covariance: covariance.clone(),
            }]),
            TargetVariant::Mixture { components } => Ok(components.clone()),
            TargetVariant::RandomMixture {
                dim,
                components,
                mean_norm,
                min_eigenvalue,
                structure_seed,
            } => random_mixture_components(
                *dim,
                *components,
                *mean_norm,
                *min_eigenvalue,
                *structure_seed,
            ),
        }
    }
}

/// Means of norm `mean_norm` in uniformly random directions; covariances
/// `A A^T + min_eigenvalue * I` with `A` standard normal scaled by `1/sqrt(dim)`.
pub fn random_mixture_components(
    dim: usize,
    count: usize,
    mean_norm: f64,
    min_eigenvalue: f64,
    structure_seed: u64,
) -> Result<Vec<GaussianComponent>> {
    if dim == 0 || count == 0 {
        return Err(Error::invalid("random mixture needs positive dimension and count"));
    }
    if !(mean_norm >= 0.0 && min_eigenvalue > 0.0) {
        return Err(Error::invalid("random mixture needs mean_norm >= 0 and min_eigenvalue > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(structure_seed);
    let scale = 1.0 / (dim as f64).sqrt();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mean: Vec<f64> = dir.iter().map(|v| v / norm * mean_norm).collect();
        let a = DMatrix::<f64>::from_fn(dim, dim, |_, _| {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        let mut cov = &a * a.transpose();
        for i in 0..dim {
            cov[(i, i)] += min_eigenvalue;
        }
        let cov = symmetrize(&cov);
        out.push(GaussianComponent {
            weight: 1.0 / count as f64,
            mean,
            covariance: (0..dim).map(|i| cov.row(i).iter().copied().collect()).collect(),
        });
    }
    Ok(out)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

struct PreparedComponent {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
}

fn prepare(component: &GaussianComponent, dim: usize) -> Result<PreparedComponent> {
    if component.mean.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: component.mean.len(),
        });
    }
    if component.covariance.len() != dim || component.covariance.iter().any(|r| r.len() != dim) {
        return Err(Error::invalid("covariance must be a square matrix matching the mean"));
    }
    let cov = DMatrix::from_fn(dim, dim, |i, j| component.covariance[i][j]);
    if (&cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
        return Err(Error::invalid("covariance is not symmetric"));
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::invalid("covariance is not positive definite"))?;
    Ok(PreparedComponent {
        mean: DVector::from_column_slice(&component.mean),
        chol: chol.l(),
    })
}

/// Draws `spec.samples` i.i.d. atoms with uniform weights `1/m`.
pub fn sample_target(spec: &TargetSpec, seed: u64) -> Result<ParticleMeasure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_target_with(spec, &mut rng)
}

/// Like [`sample_target`] but drawing from a caller-owned generator.
pub fn sample_target_with<R: Rng + ?Sized>(spec: &TargetSpec, rng: &mut R) -> Result<ParticleMeasure> {
    if spec.samples == 0 {
        return Err(Error::invalid("target sample count must be positive"));
    }
    let dim = spec.dim();
    let components = spec.components()?;
    if components.is_empty() || dim == 0 {
        return Err(Error::invalid("target has no components"));
    }
    let weights: Vec<f64> = components.iter().map(|c| c.weight).collect();
    if weights.iter().any(|w| !(*w >= 0.0)) || ((weights.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("mixture weights must lie on the simplex"));
    }
    let prepared = components
        .iter()
        .map(|c| prepare(c, dim))
        .collect::<Result<Vec<_>>>()?;
    let picker = WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?;

    let mut data = Vec::with_capacity(spec.samples * dim);
    for _ in 0..spec.samples {
        let c = if prepared.len() == 1 { 0 } else { picker.sample(rng) };
        let z = DVector::<f64>::from_fn(dim, |_, _| rng.sample(StandardNormal));
        let x = &prepared[c].mean + &prepared[c].chol * z;
        data.extend(x.iter());
    }
    ParticleMeasure::uniform(PointCloud::from_flat(dim, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn objective(beta: &[f64], v: &[f64]) -> f64 {
        beta.iter().zip(v).map(|(b, x)| (b - x).powi(2)).sum()
    }

    /// Grid search over the 3-simplex at the given resolution.
    fn grid_min3(v: &[f64], res: f64) -> f64 {
        let steps = (1.0 / res).round() as usize;
        let mut best = f64::INFINITY;
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let b = [
                    i as f64 / steps as f64,
                    j as f64 / steps as f64,
                    (steps - i - j) as f64 / steps as f64,
                ];
                best = best.min(objective(&b, v));
            }
        }
        best
    }

    #[test]
    fn uniform_weights() {
        let pts = PointCloud::from_rows(&[[0.0], [1.0], [2.0], [3.0]]).unwrap();
        let mu = ParticleMeasure::uniform(pts).unwrap();
        assert_eq!(mu.weights, vec![0.25; 4]);
        assert!(mu.is_probability());

        let one = ParticleMeasure::uniform(PointCloud::from_rows(&[[5.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(one.weights, vec![1.0]);
    }

    #[test]
    fn uniform_random_sizes_sum_to_one() {
        for n in [1, 3, 7, 100, 997] {
            let pts = PointCloud::from_flat(1, (0..n).map(f64::from).collect()).unwrap();
            let mu = ParticleMeasure::uniform(pts).unwrap();
            assert!((mu.total_mass() - 1.0).abs() <= MASS_TOLERANCE);
        }
    }

    #[test]
    fn negative_weight_rejected() {
        let pts = PointCloud::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(ParticleMeasure::new(pts, vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn vanished_atoms_are_kept() {
        let pts = PointCloud::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        let mut mu = ParticleMeasure::new(pts, vec![0.5, 0.5, 1e-17]).unwrap();
        mu.clamp_vanished();
        assert_eq!(mu.vanished(), vec![2]);
        assert_eq!(mu.len(), 3);
    }

    #[test]
    fn json_shape() {
        let pts = PointCloud::from_rows(&[[0.0, 1.0], [2.0, 3.0]]).unwrap();
        let mu = ParticleMeasure::new(pts, vec![0.25, 0.75]).unwrap();
        let s = serde_json::to_string(&mu).unwrap();
        assert_eq!(s, r#"{"locations":[[0.0,1.0],[2.0,3.0]],"weights":[0.25,0.75]}"#);
        let back: ParticleMeasure = serde_json::from_str(&s).unwrap();
        assert_eq!(back, mu);
    }

    #[test]
    fn project_fixed_point() {
        let v = [0.2, 0.3, 0.5];
        assert_eq!(simplex_project(&v), v.to_vec());
    }

    #[test]
    fn project_hand_cases() {
        assert_eq!(simplex_project(&[2.0, 0.0]), vec![1.0, 0.0]);
        assert_eq!(simplex_project(&[0.6, 0.6]), vec![0.5, 0.5]);
        assert_eq!(simplex_project(&[-3.0]), vec![1.0]);
    }

    #[test]
    fn project_two_dim_against_grid() {
        // Brute force on a fine grid of the 2-simplex for the hand cases.
        for v in [[2.0, 0.0], [0.6, 0.6]] {
            let mut best = (f64::INFINITY, 0.0);
            for i in 0..=100_000 {
                let t = i as f64 / 100_000.0;
                let f = objective(&[t, 1.0 - t], &v);
                if f < best.0 {
                    best = (f, t);
                }
            }
            let p = simplex_project(&v);
            assert!((p[0] - best.1).abs() <= 1e-5);
        }
    }

    proptest! {
        #[test]
        fn projection_invariants(v in proptest::collection::vec(-10.0f64..10.0, 1..40)) {
            let p = simplex_project(&v);
            prop_assert!(p.iter().all(|x| *x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let pp = simplex_project(&p);
            for (a, b) in p.iter().zip(&pp) {
                prop_assert!((a - b).abs() <= 1e-14);
            }
        }

        #[test]
        fn projection_optimal_vs_grid(v in proptest::collection::vec(-2.0f64..2.0, 3)) {
            let p = simplex_project(&v);
            let best = grid_min3(&v, 1e-3);
            prop_assert!((objective(&p, &v) - best).abs() <= 1e-6);
        }
    }

    #[test]
    fn gaussian_sample_mean() {
        let spec = TargetSpec {
            variant: TargetVariant::Gaussian {
                mean: vec![5.0, 5.0],
                covariance: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            },
            samples: 400,
        };
        let mu = sample_target(&spec, 11).unwrap();
        let m = mu.len() as f64;
        for d in 0..2 {
            let mean = mu.locations.iter().map(|p| p[d]).sum::<f64>() / m;
            assert!((mean - 5.0).abs() <= 3.0 / m.sqrt(), "mean {mean}");
        }
        assert!(mu.is_probability());
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = TargetSpec {
            variant: TargetVariant::Gaussian {
                mean: vec![0.0, 0.0],
                covariance: vec![vec![1.0, 0.5], vec![0.5, 2.0]],
            },
            samples: 50,
        };
        assert_eq!(sample_target(&spec, 3).unwrap(), sample_target(&spec, 3).unwrap());
        assert_ne!(sample_target(&spec, 3).unwrap(), sample_target(&spec, 4).unwrap());
    }

    #[test]
    fn one_component_mixture_matches_gaussian() {
        let mean = vec![1.0, -2.0];
        let cov = vec![vec![2.0, 0.3], vec![0.3, 1.0]];
        let g = TargetSpec {
            variant: TargetVariant::Gaussian {
                mean: mean.clone(),
                covariance: cov.clone(),
            },
            samples: 64,
        };
        let mix = TargetSpec {
            variant: TargetVariant::Mixture {
                components: vec![GaussianComponent {
                    weight: 1.0,
                    mean,
                    covariance: cov,
                }],
            },
            samples: 64,
        };
        assert_eq!(sample_target(&g, 9).unwrap(), sample_target(&mix, 9).unwrap());
    }

    #[test]
    fn non_pd_covariance_rejected() {
        let spec = TargetSpec {
            variant: TargetVariant::Gaussian {
                mean: vec![0.0, 0.0],
                covariance: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
            },
            samples: 5,
        };
        assert!(matches!(sample_target(&spec, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn random_mixture_constraints() {
        let comps = random_mixture_components(100, 3, 20.0, 0.5, 1).unwrap();
        assert_eq!(comps.len(), 3);
        for c in &comps {
            let norm = c.mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 20.0).abs() <= 1e-9);
            let cov = DMatrix::from_fn(100, 100, |i, j| c.covariance[i][j]);
            let min = cov.symmetric_eigenvalues().min();
            assert!(min >= 0.5, "min eigenvalue {min}");
            assert!((c.weight - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}
