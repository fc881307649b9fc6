//! Unquantised Gaussian heatmap encoding and distribution-aware sub-pixel
//! decoding. Pixel `(r, c)` has its centre at continuous coordinate
//! `(c, r)`, so a target `x` maps to column `x · W`.

use ndarray::{Array1, Array2, ArrayView2};

use crate::data::HeadBox;
use crate::grid::PatchGrid;
use crate::{Error, Result, Scalar};

/// Gaze heatmap σ in pixels: 3 at a 64-pixel side, scaled linearly.
pub fn default_sigma(out_height: usize) -> f64 {
    3.0 * out_height as f64 / 64.0
}

const LOG_FLOOR: f64 = 1e-10;

/// Gaussian blob centred exactly at `target` (no rounding).
pub fn encode<T: Scalar>(target: (f64, f64), out_shape: (usize, usize), sigma: f64) -> Result<Array2<T>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    let (x, y) = target;
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(Error::Validation(format!("target ({x}, {y}) outside the unit square")));
    }
    let (h, w) = out_shape;
    let (cx, cy) = (x * w as f64, y * h as f64);
    let k = 1.0 / (2.0 * sigma * sigma);
    let col: Vec<f64> = (0..w).map(|c| (-(c as f64 - cx).powi(2) * k).exp()).collect();
    let row: Vec<f64> = (0..h).map(|r| (-(r as f64 - cy).powi(2) * k).exp()).collect();
    Ok(Array2::from_shape_fn((h, w), |(r, c)| T::lit(row[r] * col[c])))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn safe_ln(v: f64) -> f64 {
    v.max(LOG_FLOOR).ln()
}

/// Log-domain quadratic through the three samples nearest a border,
/// evaluated `k` steps outside it.
fn extrapolate(l0: f64, l1: f64, l2: f64, k: f64) -> f64 {
    // Newton form through x = 0, -1, -2, evaluated at x = k
    let d1 = l0 - l1;
    let d2 = (l0 - 2.0 * l1 + l2) / 2.0;
    l0 + d1 * k + d2 * k * (k + 1.0)
}

/// One-dimensional smoothing. Samples beyond each end are continued by a
/// quadratic in the log domain (exact for Gaussian profiles), capped at
/// the border value.
fn blur_line(line: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = line.len();
    let r = kernel.len() / 2;
    let mut ext = Vec::with_capacity(n + 2 * r);
    let outside = |l0: f64, l1: f64, l2: f64, k: usize| {
        if n >= 3 {
            extrapolate(safe_ln(l0), safe_ln(l1), safe_ln(l2), k as f64).min(safe_ln(l0)).exp()
        } else {
            l0
        }
    };
    for k in (1..=r).rev() {
        ext.push(outside(line[0], line[1.min(n - 1)], line[2.min(n - 1)], k));
    }
    ext.extend_from_slice(line);
    for k in 1..=r {
        ext.push(outside(line[n - 1], line[n.saturating_sub(2)], line[n.saturating_sub(3)], k));
    }
    (0..n)
        .map(|i| kernel.iter().zip(&ext[i..i + kernel.len()]).map(|(a, b)| a * b).sum())
        .collect()
}

fn blur(m: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma);
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let b = blur_line(&row.to_vec(), &k);
        row.iter_mut().zip(b).for_each(|(o, v)| *o = v);
    }
    for mut col in out.columns_mut() {
        let b = blur_line(&col.to_vec(), &k);
        col.iter_mut().zip(b).for_each(|(o, v)| *o = v);
    }
    out
}

/// Row-major argmax; ties resolve to the lowest flat index.
pub fn argmax<T: Scalar>(m: ArrayView2<'_, T>) -> (usize, usize) {
    let w = m.ncols();
    let mut best = 0;
    let mut best_v = T::neg_infinity();
    for (i, &v) in m.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    (best / w, best % w)
}

fn check_decodable<T: Scalar>(heatmap: ArrayView2<'_, T>) -> Result<()> {
    if heatmap.is_empty() {
        return Err(Error::Degenerate("empty heatmap".into()));
    }
    if heatmap.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("heatmap contains non-finite values".into()));
    }
    let first = heatmap[(0, 0)];
    if heatmap.iter().all(|&v| v == first) {
        return Err(Error::Degenerate("constant heatmap has no peak".into()));
    }
    Ok(())
}

/// Argmax-only decoding at pixel centres, normalised.
pub fn decode_argmax<T: Scalar>(heatmap: ArrayView2<'_, T>) -> Result<(f64, f64)> {
    check_decodable(heatmap)?;
    let (h, w) = heatmap.dim();
    let (r, c) = argmax(heatmap);
    Ok((c as f64 / w as f64, r as f64 / h as f64))
}

/// Distribution-aware decoding: smooth, take logs, then one Newton step
/// from the argmax using central differences. Returns normalised `(x, y)`.
pub fn decode<T: Scalar>(heatmap: ArrayView2<'_, T>) -> Result<(f64, f64)> {
    check_decodable(heatmap)?;
    let (h, w) = heatmap.dim();
    let raw = heatmap.mapv(|v| v.as_f64());
    let orig_min = raw.fold(f64::INFINITY, |a, &b| a.min(b));
    // shift so the map is non-negative before the log-domain fit
    let shifted = if orig_min < 0.0 { raw.mapv(|v| v - orig_min) } else { raw };
    let target_max = shifted.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut smooth = blur(&shifted, default_sigma(h));
    let smooth_max = smooth.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if smooth_max > 0.0 {
        smooth.mapv_inplace(|v| v * target_max / smooth_max);
    }
    let logp = smooth.mapv(safe_ln);
    let (r, c) = argmax(logp.view());
    let (mut mx, mut my) = (c as f64, r as f64);
    if h >= 3 && w >= 3 {
        // log value at an offset from the argmax, continued past the border
        // by the same quadratic used for smoothing
        let at = |y: isize, x: isize| -> f64 {
            let clampq = |i: isize, n: usize| -> (usize, usize, usize, f64) {
                if i < 0 {
                    (0, 1, 2, (-i) as f64)
                } else if i as usize >= n {
                    (n - 1, n - 2, n - 3, (i as usize - (n - 1)) as f64)
                } else {
                    (i as usize, i as usize, i as usize, 0.0)
                }
            };
            let (y0, y1, y2, ky) = clampq(y, h);
            let (x0, x1, x2, kx) = clampq(x, w);
            let row = |yy: usize| {
                if kx == 0.0 {
                    logp[(yy, x0)]
                } else {
                    extrapolate(logp[(yy, x0)], logp[(yy, x1)], logp[(yy, x2)], kx)
                }
            };
            if ky == 0.0 {
                row(y0)
            } else {
                extrapolate(row(y0), row(y1), row(y2), ky)
            }
        };
        let (ri, ci) = (r as isize, c as isize);
        let l = |dy: isize, dx: isize| at(ri + dy, ci + dx);
        let gx = 0.5 * (l(0, 1) - l(0, -1));
        let gy = 0.5 * (l(1, 0) - l(-1, 0));
        let hxx = l(0, 1) - 2.0 * l(0, 0) + l(0, -1);
        let hyy = l(1, 0) - 2.0 * l(0, 0) + l(-1, 0);
        let hxy = 0.25 * (l(1, 1) - l(1, -1) - l(-1, 1) + l(-1, -1));
        let det = hxx * hyy - hxy * hxy;
        if det.abs() > 1e-12 && det.is_finite() {
            mx -= (hyy * gx - hxy * gy) / det;
            my -= (hxx * gy - hxy * gx) / det;
        }
    }
    mx = mx.clamp(0.0, (w - 1) as f64);
    my = my.clamp(0.0, (h - 1) as f64);
    Ok((mx / w as f64, my / h as f64))
}

/// Auxiliary target: one Gaussian per head box on the patch grid, centred
/// at the box centre with σ = `sigma_scale` × box diagonal (in patches),
/// combined by elementwise max.
pub fn head_gt_map<T: Scalar>(heads: &[HeadBox], grid: &PatchGrid, sigma_scale: f64) -> Array2<T> {
    let mut out = Array2::<f64>::zeros((grid.h, grid.w));
    let (gh, gw) = (grid.h as f64, grid.w as f64);
    for b in heads {
        let (cx, cy) = b.center();
        let (cx, cy) = (cx * gw - 0.5, cy * gh - 0.5);
        let diag = ((b.width() * gw).powi(2) + (b.height() * gh).powi(2)).sqrt();
        let sigma = (diag * sigma_scale).max(1e-6);
        let k = 1.0 / (2.0 * sigma * sigma);
        let col = Array1::from_shape_fn(grid.w, |c| (-(c as f64 - cx).powi(2) * k).exp());
        for r in 0..grid.h {
            let ry = (-(r as f64 - cy).powi(2) * k).exp();
            for c in 0..grid.w {
                let v = ry * col[c];
                if v > out[(r, c)] {
                    out[(r, c)] = v;
                }
            }
        }
    }
    out.mapv(T::lit)
}
