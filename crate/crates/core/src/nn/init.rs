use ndarray::{Array, Dimension, ShapeBuilder};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Scalar;

/// Normal sample with the given std, resampled until within two std.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub fn trunc_normal_array<T, D, Sh, R>(shape: Sh, std: f64, rng: &mut R) -> Array<T, D>
where
    T: Scalar,
    D: Dimension,
    Sh: ShapeBuilder<Dim = D>,
    R: Rng + ?Sized,
{
    Array::from_shape_simple_fn(shape, || T::lit(trunc_normal(rng, std)))
}
