use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{row_l2_normalize, sign, DenseTensor};

/// Magnitude and per-view seeds for embedding-space perturbation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbSpec {
    pub epsilon: f64,
    pub seeds: [u64; 2],
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Usage(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Standard-normal rows scaled to unit length.
pub fn perturbation_directions(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseTensor {
    let values = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    row_l2_normalize(&DenseTensor::new(rows, cols, values).expect("shape"))
}

/// `ε · sign(r) ⊙ directions`
pub fn perturbation_noise(
    r: &DenseTensor,
    epsilon: f64,
    directions: &DenseTensor,
) -> Result<DenseTensor> {
    if r.shape() != directions.shape() {
        return Err(dim_err(
            "perturb",
            format!("{:?} vs directions {:?}", r.shape(), directions.shape()),
        ));
    }
    let values = r
        .values()
        .iter()
        .zip(directions.values())
        .map(|(&x, &u)| epsilon * sign(x) * u)
        .collect();
    DenseTensor::new(r.rows(), r.cols(), values)
}

/// Two independently perturbed copies of `r`.
pub fn perturb_embeddings(
    r: &DenseTensor,
    spec: &PerturbSpec,
) -> Result<(DenseTensor, DenseTensor)> {
    spec.validate()?;
    let view = |seed: u64| -> Result<DenseTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dirs = perturbation_directions(r.rows(), r.cols(), &mut rng);
        crate::numerics::add(r, &perturbation_noise(r, spec.epsilon, &dirs)?)
    };
    Ok((view(spec.seeds[0])?, view(spec.seeds[1])?))
}
