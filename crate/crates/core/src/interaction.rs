//! Multi-level 4D interaction features and their guidance-weighted pooling.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView5, Axis};

use crate::grid::PatchGrid;
use crate::{Error, Result, Scalar};

/// Patch-to-patch attention stacked over capture layers and heads.
///
/// Stored as `[K·H, h·w, h·w]`; [`InteractionStack::as_5d`] exposes the
/// `[channel, query_y, query_x, key_y, key_x]` view. Channels are ordered
/// layer-major, then head.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionStack<T> {
    pub data: Array3<T>,
    pub grid: PatchGrid,
    /// Per-row sums before renormalisation, kept for the backward pass.
    row_mass: Option<Array2<T>>,
}

impl<T: Scalar> InteractionStack<T> {
    pub fn channels(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn as_5d(&self) -> ArrayView5<'_, T> {
        let g = self.grid;
        self.data
            .view()
            .into_shape_with_order((self.channels(), g.h, g.w, g.h, g.w))
            .expect("contiguous stack")
    }
}

/// Drops the class/register rows and columns from every captured map and
/// stacks the remaining patch blocks. With `renormalize` each patch row is
/// rescaled to sum to one.
pub fn assemble<T: Scalar>(
    attention: &[Array3<T>],
    grid: &PatchGrid,
    prefix: usize,
    renormalize: bool,
) -> Result<InteractionStack<T>> {
    let n = grid.num_patches();
    let heads = attention.first().map_or(0, |a| a.len_of(Axis(0)));
    for (i, a) in attention.iter().enumerate() {
        let (h, l1, l2) = a.dim();
        if h != heads || l1 != prefix + n || l2 != prefix + n {
            return Err(Error::Shape(format!(
                "attention layer {i} has shape [{h}, {l1}, {l2}], expected [{heads}, {}, {}] for a {}x{} grid",
                prefix + n,
                prefix + n,
                grid.h,
                grid.w
            )));
        }
    }
    let mut data = Array3::zeros((attention.len() * heads, n, n));
    for (l, a) in attention.iter().enumerate() {
        for h in 0..heads {
            data.index_axis_mut(Axis(0), l * heads + h)
                .assign(&a.slice(s![h, prefix.., prefix..]));
        }
    }
    let row_mass = if renormalize {
        let mass = data.sum_axis(Axis(2));
        for (mut plane, m) in data.outer_iter_mut().zip(mass.outer_iter()) {
            for (mut row, &s) in plane.rows_mut().into_iter().zip(m.iter()) {
                row.mapv_inplace(|v| v / s);
            }
        }
        Some(mass)
    } else {
        None
    };
    Ok(InteractionStack {
        data,
        grid: *grid,
        row_mass,
    })
}

/// Scatters a stack gradient back onto the full attention maps.
pub fn assemble_backward<T: Scalar>(
    stack: &InteractionStack<T>,
    d_stack: &Array3<T>,
    heads: usize,
    prefix: usize,
) -> Vec<Array3<T>> {
    let n = stack.grid.num_patches();
    let mut d = d_stack.clone();
    if let Some(mass) = &stack.row_mass {
        // y = a / s with s = Σ a  ⇒  da = (dy − Σ dy·y) / s
        for ((mut dp, yp), m) in d.outer_iter_mut().zip(stack.data.outer_iter()).zip(mass.outer_iter()) {
            for ((mut dr, yr), &s) in dp.rows_mut().into_iter().zip(yp.rows()).zip(m.iter()) {
                let dot = dr.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                dr.mapv_inplace(|v| (v - dot) / s);
            }
        }
    }
    let layers = stack.channels() / heads;
    (0..layers)
        .map(|l| {
            let mut a = Array3::zeros((heads, prefix + n, prefix + n));
            for h in 0..heads {
                a.slice_mut(s![h, prefix.., prefix..])
                    .assign(&d.index_axis(Axis(0), l * heads + h));
            }
            a
        })
        .collect()
}

/// `F_pi[c, k] = Σ_q G[q] · A[c, q, k]`, returned as `[K·H, h, w]`.
pub fn aggregate_person<T: Scalar>(stack: &InteractionStack<T>, g: ArrayView2<'_, T>) -> Array3<T> {
    let grid = stack.grid;
    let gv = g.iter().copied().collect::<Array1<T>>();
    let mut out = Array3::zeros((stack.channels(), grid.h, grid.w));
    for (plane, mut o) in stack.data.outer_iter().zip(out.outer_iter_mut()) {
        let row = gv.dot(&plane);
        o.assign(&row.into_shape_with_order((grid.h, grid.w)).unwrap());
    }
    out
}

/// Gradients of [`aggregate_person`] with respect to the stack and to `G`.
pub fn aggregate_person_backward<T: Scalar>(
    stack: &InteractionStack<T>,
    g: ArrayView2<'_, T>,
    d_out: &Array3<T>,
) -> (Array3<T>, Array2<T>) {
    let grid = stack.grid;
    let n = grid.num_patches();
    let gv = g.iter().copied().collect::<Array1<T>>().into_shape_with_order((n, 1)).unwrap();
    let mut d_stack = Array3::zeros(stack.data.raw_dim());
    let mut d_g = Array1::<T>::zeros(n);
    for ((plane, dp), mut ds) in stack
        .data
        .outer_iter()
        .zip(d_out.outer_iter())
        .zip(d_stack.outer_iter_mut())
    {
        let dv = dp.to_owned().into_shape_with_order((1, n)).unwrap();
        ds.assign(&gv.dot(&dv));
        d_g += &plane.dot(&dv.row(0));
    }
    (d_stack, d_g.into_shape_with_order((grid.h, grid.w)).unwrap())
}

/// `F_io[c] = Σ_q G[q] · T[q, c]` over `[h·w, C]` patch tokens.
pub fn aggregate_inout<T: Scalar>(patch_tokens: ArrayView2<'_, T>, g: ArrayView2<'_, T>) -> Array1<T> {
    let gv = g.iter().copied().collect::<Array1<T>>();
    gv.dot(&patch_tokens)
}

/// Gradients of [`aggregate_inout`] with respect to the tokens and to `G`.
pub fn aggregate_inout_backward<T: Scalar>(
    patch_tokens: ArrayView2<'_, T>,
    g: ArrayView2<'_, T>,
    d_out: &Array1<T>,
) -> (Array2<T>, Array2<T>) {
    let n = patch_tokens.nrows();
    let gv = g.iter().copied().collect::<Array1<T>>().into_shape_with_order((n, 1)).unwrap();
    let d_tokens = gv.dot(&d_out.view().insert_axis(Axis(0)));
    let d_g = patch_tokens.dot(d_out).into_shape_with_order(g.raw_dim()).unwrap();
    (d_tokens, d_g)
}
