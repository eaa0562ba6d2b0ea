//! Differentiable resampling between a regular pixel grid and a set of
//! mapped points.
//!
//! Both kernels use the tent weight `max(0, 1 - |x - m|) * max(0, 1 - |y - n|)`.
//! The gather sampler reads: every grid point pulls a weighted sum of the
//! (at most four) pixels around its source coordinate. The scatter sampler is
//! the transpose, followed by division by the accumulated weight `S`, so each
//! output pixel holds a weighted mean of the values that landed near it.

use crate::error::{DtnError, Result};
use crate::tensor::Tensor;
use crate::tps::{MappedGrid, Point};

/// Cells whose accumulated scatter weight falls below this are holes.
pub const HOLE_EPS: f64 = 1e-12;

#[inline]
fn tent(d: f64) -> f64 {
    (1.0 - d.abs()).max(0.0)
}

/// Derivative of `tent(x - m)` with respect to `x`; 0 at the kinks.
#[inline]
fn tent_slope(x: f64, m: f64) -> f64 {
    let d = m - x;
    if d.abs() >= 1.0 || d == 0.0 {
        0.0
    } else {
        d.signum()
    }
}

/// In-bounds pixel indices with nonzero (or boundary) tent support along one axis.
#[inline]
fn support(v: f64, len: usize) -> impl Iterator<Item = usize> {
    let base = v.floor();
    (0..2).filter_map(move |o| {
        let idx = base + o as f64;
        (idx >= 0.0 && idx < len as f64).then_some(idx as usize)
    })
}

/// Calls `f(n, m, weight, slope_x, slope_y)` for every pixel in the support of `p`.
#[inline]
fn for_each_neighbor(
    p: Point,
    h: usize,
    w: usize,
    mut f: impl FnMut(usize, usize, f64, f64, f64, f64, f64),
) {
    if !(p.x.is_finite() && p.y.is_finite()) {
        return;
    }
    for n in support(p.y, h) {
        let wy = tent(p.y - n as f64);
        let sy = tent_slope(p.y, n as f64);
        for m in support(p.x, w) {
            let wx = tent(p.x - m as f64);
            let sx = tent_slope(p.x, m as f64);
            f(n, m, wx, wy, sx, sy, wx * wy);
        }
    }
}

fn check_grid_input(
    op: &'static str,
    u: &Tensor,
    grid: &MappedGrid,
) -> Result<(usize, usize, usize)> {
    let (h, w, c) = u.dims3(op)?;
    if (h, w) != (grid.h_in, grid.w_in) {
        return Err(DtnError::dim(
            op,
            format!(
                "grid was mapped into {}x{} pixels but the feature map is {h}x{w}",
                grid.h_in, grid.w_in
            ),
        ));
    }
    Ok((h, w, c))
}

/// Bilinear gather: `V_i = Σ U_nm tent(x_i - m) tent(y_i - n)`.
pub fn gather_forward(u: &Tensor, grid: &MappedGrid) -> Result<Tensor> {
    let (h, w, c) = check_grid_input("gather_forward", u, grid)?;
    let mut v = Tensor::zeros(&[grid.h_out, grid.w_out, c]);
    let src = u.data();
    let dst = v.data_mut();
    for (i, &p) in grid.coords.iter().enumerate() {
        let out = &mut dst[i * c..(i + 1) * c];
        for_each_neighbor(p, h, w, |n, m, _, _, _, _, wt| {
            if wt == 0.0 {
                return;
            }
            let px = &src[(n * w + m) * c..(n * w + m + 1) * c];
            for (o, &s) in out.iter_mut().zip(px) {
                *o += wt * s;
            }
        });
    }
    Ok(v)
}

/// Gradients of [`gather_forward`] with respect to the input map and the
/// source coordinates.
pub fn gather_backward(
    u: &Tensor,
    grid: &MappedGrid,
    d_v: &Tensor,
) -> Result<(Tensor, Vec<Point>)> {
    let (h, w, c) = check_grid_input("gather_backward", u, grid)?;
    if d_v.shape() != [grid.h_out, grid.w_out, c] {
        return Err(DtnError::dim(
            "gather_backward",
            format!(
                "output gradient is {:?}, expected [{}, {}, {c}]",
                d_v.shape(),
                grid.h_out,
                grid.w_out
            ),
        ));
    }
    let mut d_u = Tensor::zeros(&[h, w, c]);
    let mut d_coords = vec![Point::default(); grid.coords.len()];
    let src = u.data();
    let gv = d_v.data();
    let du = d_u.data_mut();
    for (i, &p) in grid.coords.iter().enumerate() {
        let g = &gv[i * c..(i + 1) * c];
        let mut dp = Point::default();
        for_each_neighbor(p, h, w, |n, m, wx, wy, sx, sy, wt| {
            let base = (n * w + m) * c;
            let mut dot = 0.0;
            for ch in 0..c {
                du[base + ch] += wt * g[ch];
                dot += g[ch] * src[base + ch];
            }
            dp.x += dot * wy * sx;
            dp.y += dot * wx * sy;
        });
        d_coords[i] = dp;
    }
    Ok((d_u, d_coords))
}

/// Output of the normalized scatter.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatterResult {
    /// `H x W x C`; zero on holes.
    pub out: Tensor,
    /// `H x W` accumulated weights.
    pub s: Tensor,
    pub holes: Vec<bool>,
}

impl ScatterResult {
    pub fn hole_count(&self) -> usize {
        self.holes.iter().filter(|&&h| h).count()
    }
}

fn check_scatter(
    op: &'static str,
    v: &Tensor,
    grid: &MappedGrid,
    h_out: usize,
    w_out: usize,
) -> Result<usize> {
    let (hv, wv, c) = v.dims3(op)?;
    if (hv, wv) != (grid.h_out, grid.w_out) {
        return Err(DtnError::dim(
            op,
            format!(
                "grid enumerates {}x{} points but the input map is {hv}x{wv}",
                grid.h_out, grid.w_out
            ),
        ));
    }
    if (h_out, w_out) != (grid.h_in, grid.w_in) {
        return Err(DtnError::dim(
            op,
            format!(
                "grid coordinates live in {}x{} pixels but the requested output is {h_out}x{w_out}",
                grid.h_in, grid.w_in
            ),
        ));
    }
    Ok(c)
}

/// Normalized scatter: each value `V_i` is spread onto the pixels around
/// `p_i` with tent weights, then every pixel is divided by its total weight
///
/// ```text
/// S_nm = Σ_i tent(x_i - m) tent(y_i - n)
/// U_nm = (1 / S_nm) Σ_i V_i tent(x_i - m) tent(y_i - n)
/// ```
///
/// Accumulation runs in input-pixel order, so results are deterministic.
pub fn scatter_forward(
    v: &Tensor,
    grid: &MappedGrid,
    h_out: usize,
    w_out: usize,
) -> Result<ScatterResult> {
    let c = check_scatter("scatter_forward", v, grid, h_out, w_out)?;
    let mut out = Tensor::zeros(&[h_out, w_out, c]);
    let mut s = Tensor::zeros(&[h_out, w_out]);
    {
        let acc = out.data_mut();
        let sd = s.data_mut();
        let src = v.data();
        for (i, &p) in grid.coords.iter().enumerate() {
            let val = &src[i * c..(i + 1) * c];
            for_each_neighbor(p, h_out, w_out, |n, m, _, _, _, _, wt| {
                if wt == 0.0 {
                    return;
                }
                let cell = n * w_out + m;
                sd[cell] += wt;
                for (a, &x) in acc[cell * c..(cell + 1) * c].iter_mut().zip(val) {
                    *a += wt * x;
                }
            });
        }
    }
    let holes: Vec<bool> = s.data().iter().map(|&x| x < HOLE_EPS).collect();
    let acc = out.data_mut();
    for (cell, (&sv, &hole)) in s.data().iter().zip(&holes).enumerate() {
        let px = &mut acc[cell * c..(cell + 1) * c];
        if hole {
            px.fill(0.0);
        } else {
            px.iter_mut().for_each(|a| *a /= sv);
        }
    }
    Ok(ScatterResult { out, s, holes })
}

/// Gradients of [`scatter_forward`]:
///
/// ```text
/// dV_i  = Σ_nm dU_nm / S_nm · w_i,nm
/// dS_nm = -dU_nm / S_nm² · Σ_i V_i w_i,nm  (= -dU_nm U_nm / S_nm)
/// dx_i  = Σ_nm (dU_nm V_i / S_nm + dS_nm) tent(y_i - n) · sign(m - x_i)
/// ```
///
/// summed over channels; `dy_i` is symmetric. Hole cells pass no gradient.
pub fn scatter_backward(
    v: &Tensor,
    grid: &MappedGrid,
    result: &ScatterResult,
    d_u: &Tensor,
) -> Result<(Tensor, Vec<Point>)> {
    let (h_out, w_out, _) = result.out.dims3("scatter_backward")?;
    let c = check_scatter("scatter_backward", v, grid, h_out, w_out)?;
    if d_u.shape() != result.out.shape() || result.out.shape()[2] != c {
        return Err(DtnError::dim(
            "scatter_backward",
            format!(
                "gradient {:?} / result {:?} do not match the {c}-channel input",
                d_u.shape(),
                result.out.shape()
            ),
        ));
    }
    let cells = h_out * w_out;
    // per-cell dU/S and the channel-summed dS
    let mut g_over_s = vec![0.0; cells * c];
    let mut d_s = vec![0.0; cells];
    let gu = d_u.data();
    let out = result.out.data();
    for cell in 0..cells {
        if result.holes[cell] {
            continue;
        }
        let sv = result.s.data()[cell];
        let mut ds = 0.0;
        for ch in 0..c {
            let g = gu[cell * c + ch] / sv;
            g_over_s[cell * c + ch] = g;
            ds -= g * out[cell * c + ch];
        }
        d_s[cell] = ds;
    }

    let mut d_v = Tensor::zeros(v.shape());
    let mut d_coords = vec![Point::default(); grid.coords.len()];
    let src = v.data();
    let dv = d_v.data_mut();
    for (i, &p) in grid.coords.iter().enumerate() {
        let val = &src[i * c..(i + 1) * c];
        let dvi = &mut dv[i * c..(i + 1) * c];
        let mut dp = Point::default();
        for_each_neighbor(p, h_out, w_out, |n, m, wx, wy, sx, sy, wt| {
            let cell = n * w_out + m;
            if result.holes[cell] {
                return;
            }
            let g = &g_over_s[cell * c..(cell + 1) * c];
            let mut coeff = d_s[cell];
            for ch in 0..c {
                dvi[ch] += g[ch] * wt;
                coeff += g[ch] * val[ch];
            }
            dp.x += coeff * wy * sx;
            dp.y += coeff * wx * sy;
        });
        d_coords[i] = dp;
    }
    Ok((d_v, d_coords))
}

/// Fills hole cells from their 3x3 neighbourhood with an `S`-weighted mean,
/// in expanding passes until no holes remain. Each pass reads only cells
/// that were valid before it started. Cells filled in a pass carry the mean
/// weight of the neighbours they were filled from. An all-hole map yields zeros.
pub fn fill_holes(result: &ScatterResult) -> Tensor {
    let (h, w, c) = match result.out.dims3("fill_holes") {
        Ok(d) => d,
        Err(_) => return result.out.clone(),
    };
    let mut out = result.out.clone();
    let mut weight = result.s.data().to_vec();
    let mut valid: Vec<bool> = result.holes.iter().map(|&hole| !hole).collect();
    if !valid.iter().any(|&v| v) {
        return Tensor::zeros(&[h, w, c]);
    }
    let mut pending: Vec<usize> = (0..h * w).filter(|&i| !valid[i]).collect();
    while !pending.is_empty() {
        let mut filled = Vec::new();
        for &cell in &pending {
            let (n, m) = (cell / w, cell % w);
            let mut total = 0.0;
            let mut count = 0usize;
            let mut acc = vec![0.0; c];
            for nn in n.saturating_sub(1)..=(n + 1).min(h - 1) {
                for mm in m.saturating_sub(1)..=(m + 1).min(w - 1) {
                    let nb = nn * w + mm;
                    if !valid[nb] {
                        continue;
                    }
                    let wt = weight[nb];
                    total += wt;
                    count += 1;
                    for (a, &x) in acc.iter_mut().zip(&out.data()[nb * c..(nb + 1) * c]) {
                        *a += wt * x;
                    }
                }
            }
            if count > 0 && total > 0.0 {
                acc.iter_mut().for_each(|a| *a /= total);
                filled.push((cell, acc, total / count as f64));
            }
        }
        if filled.is_empty() {
            break;
        }
        for (cell, vals, wt) in &filled {
            out.data_mut()[cell * c..(cell + 1) * c].copy_from_slice(vals);
            weight[*cell] = *wt;
            valid[*cell] = true;
        }
        pending.retain(|&cell| !valid[cell]);
    }
    out
}
