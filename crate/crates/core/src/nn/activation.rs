use ndarray::{Array, ArrayView, Dimension, Zip};

use crate::Scalar;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu<T: Scalar, D: Dimension>(x: ArrayView<'_, T, D>) -> Array<T, D> {
    let half = T::lit(0.5);
    let k = T::lit(INV_SQRT_2);
    x.mapv(|v| half * v * (T::one() + (v * k).erf()))
}

pub fn gelu_backward<T: Scalar, D: Dimension>(
    x: ArrayView<'_, T, D>,
    dy: ArrayView<'_, T, D>,
) -> Array<T, D> {
    let half = T::lit(0.5);
    let k = T::lit(INV_SQRT_2);
    let c = T::lit(INV_SQRT_2PI);
    Zip::from(&x).and(&dy).map_collect(|&v, &g| {
        let cdf = half * (T::one() + (v * k).erf());
        let pdf = c * (-(v * v) * half).exp();
        g * (cdf + v * pdf)
    })
}

pub fn relu<T: Scalar, D: Dimension>(x: ArrayView<'_, T, D>) -> Array<T, D> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar, D: Dimension>(
    x: ArrayView<'_, T, D>,
    dy: ArrayView<'_, T, D>,
) -> Array<T, D> {
    Zip::from(&x)
        .and(&dy)
        .map_collect(|&v, &g| if v > T::zero() { g } else { T::zero() })
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
