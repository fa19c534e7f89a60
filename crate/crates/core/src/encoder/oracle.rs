use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::patching::Patch;
use crate::scalar::{Real, Vec3};

/// Test-double embedding: the patch center carried into the target frame
/// by `to_target`, plus isotropic Gaussian noise.
pub fn oracle_embed<T: Real, R: Rng + ?Sized>(
    patch: &Patch<T>,
    to_target: impl Fn(&Vec3<T>) -> Vec3<T>,
    noise_std: f64,
    rng: &mut R,
) -> Result<DVector<T>> {
    oracle_embed_point(&to_target(&patch.center), noise_std, rng)
}

pub fn oracle_embed_point<T: Real, R: Rng + ?Sized>(
    mapped: &Vec3<T>,
    noise_std: f64,
    rng: &mut R,
) -> Result<DVector<T>> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid(format!("noise_std {noise_std} must be >= 0")));
    }
    let mut e = DVector::from_column_slice(mapped.as_slice());
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        for v in e.iter_mut() {
            *v += T::lit(normal.sample(rng));
        }
    }
    Ok(e)
}
