use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

use crate::Scalar;

/// Named traversal over the trainable tensors (and non-trainable buffers)
/// of a module. Names follow the dotted convention of tensor archives.
pub trait Parameterized<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>));

    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {}

    fn visit_buffers_mut(
        &mut self,
        _prefix: &str,
        _f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>),
    ) {
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn param_count<T: Scalar>(m: &dyn Parameterized<T>) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, v| n += v.len());
    n
}

pub fn zero_params<T: Scalar>(m: &mut dyn Parameterized<T>) {
    m.visit_mut("", &mut |_, mut v| v.fill(T::zero()));
}

/// A copy of `m` with every trainable tensor zeroed, for use as a
/// gradient accumulator.
pub fn zeroed_like<T: Scalar, M: Parameterized<T> + Clone>(m: &M) -> M {
    let mut g = m.clone();
    zero_params(&mut g);
    g
}

/// Owned copies of every trainable tensor in visit order.
pub fn params_to_vec<T: Scalar>(m: &dyn Parameterized<T>) -> Vec<(String, ArrayD<T>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, v| out.push((name.to_string(), v.to_owned())));
    out
}
