//! Thin-plate-spline grid generation.
//!
//! Coordinates are normalized to `[-1, 1]` with the align-corners convention:
//! `x_pix = (x_norm + 1) / 2 * (W - 1)`, so `-1` and `1` land on the centers
//! of the first and last pixel. `x` runs along columns, `y` along rows.

use crate::error::{DtnError, Result};
use crate::tensor::{matmul, Lu, Tensor};

/// Ridge added to the radial block when the system matrix is numerically singular.
pub const DELTA_RIDGE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist2(self, other: Point) -> f64 {
        let (dx, dy) = (self.x - other.x, self.y - other.y);
        dx * dx + dy * dy
    }
}

/// `d² ln d²`, with the limit value 0 at `d = 0`.
#[inline]
pub fn radial_kernel(d2: f64) -> f64 {
    if d2 <= 0.0 {
        0.0
    } else {
        d2 * d2.ln()
    }
}

/// Normalized coordinate of pixel index `i` on an axis with `len` pixels.
#[inline]
pub fn normalize_index(i: usize, len: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (len - 1) as f64
}

#[inline]
pub fn denormalize(v: f64, len: usize) -> f64 {
    (v + 1.0) * 0.5 * (len - 1) as f64
}

/// `sqrt(k) x sqrt(k)` lattice over `[-1, 1]²`, corners included, row-major
/// (x varies fastest).
pub fn regular_fiducials(k: usize) -> Result<Vec<Point>> {
    let side = (k as f64).sqrt().round() as usize;
    if k < 4 || side * side != k {
        return Err(DtnError::Config(format!(
            "fiducial count must be a perfect square >= 4, got {k}"
        )));
    }
    let axis = |i: usize| normalize_index(i, side);
    Ok((0..k)
        .map(|i| Point::new(axis(i % side), axis(i / side)))
        .collect())
}

/// Fixed output-side fiducials `F̃` and predicted input-side fiducials `F`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiducialSet {
    pub f_out: Vec<Point>,
    pub f_in: Vec<Point>,
}

impl FiducialSet {
    pub fn new(f_out: Vec<Point>, f_in: Vec<Point>) -> Result<Self> {
        if f_out.len() != f_in.len() {
            return Err(DtnError::Config(format!(
                "{} output fiducials but {} input fiducials",
                f_out.len(),
                f_in.len()
            )));
        }
        check_unit_square(&f_in)?;
        Ok(Self { f_out, f_in })
    }

    pub fn k(&self) -> usize {
        self.f_out.len()
    }
}

fn check_unit_square(points: &[Point]) -> Result<()> {
    for (i, p) in points.iter().enumerate() {
        if !(p.x.abs() <= 1.0 && p.y.abs() <= 1.0) {
            return Err(DtnError::Config(format!(
                "input fiducial {i} = ({}, {}) lies outside [-1, 1]²",
                p.x, p.y
            )));
        }
    }
    Ok(())
}

/// The `(K+3) x (K+3)` TPS system matrix, a function of `F̃` only.
///
/// Layout (rows):
///
/// ```text
/// [ 1_K  F̃ᵀ  R   ]   K rows
/// [ 0    0   1ᵀ  ]   1 row
/// [ 0    0   F̃   ]   2 rows
/// ```
#[derive(Clone, Debug)]
pub struct DeltaMatrix {
    pub delta: Tensor,
    pub r: Tensor,
    f_out: Vec<Point>,
    lu: Lu,
    ridge: f64,
}

impl DeltaMatrix {
    pub fn f_out(&self) -> &[Point] {
        &self.f_out
    }

    pub fn k(&self) -> usize {
        self.f_out.len()
    }

    /// Ridge that was added to `R`'s diagonal (0 unless the plain system was singular).
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn lu(&self) -> &Lu {
        &self.lu
    }
}

pub fn build_delta(f_out: &[Point]) -> Result<DeltaMatrix> {
    let k = f_out.len();
    if k < 3 {
        return Err(DtnError::Config(format!(
            "need at least 3 fiducials, got {k}"
        )));
    }
    let mut r = Tensor::zeros(&[k, k]);
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let d2 = f_out[i].dist2(f_out[j]);
            if d2 == 0.0 {
                return Err(DtnError::Config(format!(
                    "degenerate fiducials: points {i} and {j} coincide"
                )));
            }
            r.data_mut()[i * k + j] = radial_kernel(d2);
        }
    }

    let assemble = |ridge: f64| {
        let n = k + 3;
        let mut d = Tensor::zeros(&[n, n]);
        let dm = d.data_mut();
        for i in 0..k {
            dm[i * n] = 1.0;
            dm[i * n + 1] = f_out[i].x;
            dm[i * n + 2] = f_out[i].y;
            for j in 0..k {
                dm[i * n + 3 + j] = r.at2(i, j) + if i == j { ridge } else { 0.0 };
            }
        }
        for j in 0..k {
            dm[k * n + 3 + j] = 1.0;
            dm[(k + 1) * n + 3 + j] = f_out[j].x;
            dm[(k + 2) * n + 3 + j] = f_out[j].y;
        }
        d
    };

    let delta = assemble(0.0);
    let (delta, lu, ridge) = match Lu::factor(&delta) {
        Ok(lu) => (delta, lu, 0.0),
        Err(DtnError::Singular { .. }) => {
            let delta = assemble(DELTA_RIDGE);
            let lu = Lu::factor(&delta)?;
            (delta, lu, DELTA_RIDGE)
        }
        Err(e) => return Err(e),
    };
    Ok(DeltaMatrix {
        delta,
        r,
        f_out: f_out.to_vec(),
        lu,
        ridge,
    })
}

/// `q = [1, x, y, s_1 .. s_K]` with `s_j = e_j² ln e_j²`.
pub fn lift_point(p: Point, f_out: &[Point]) -> Vec<f64> {
    let mut q = Vec::with_capacity(f_out.len() + 3);
    q.extend([1.0, p.x, p.y]);
    q.extend(f_out.iter().map(|&f| radial_kernel(p.dist2(f))));
    q
}

/// The `2 x (K+3)` TPS coefficient matrix mapping output to input coordinates.
#[derive(Clone, Debug)]
pub struct TpsTransform {
    pub t: Tensor,
    pub fiducials: FiducialSet,
}

impl TpsTransform {
    /// Maps a normalized output coordinate to a normalized input coordinate.
    pub fn apply(&self, p: Point) -> Point {
        let q = lift_point(p, &self.fiducials.f_out);
        let n = q.len();
        let row = |r: usize| (0..n).map(|j| self.t.at2(r, j) * q[j]).sum::<f64>();
        Point::new(row(0), row(1))
    }

    /// Coefficients of the radial basis terms, per output axis.
    pub fn radial_coefficients(&self) -> impl Iterator<Item = f64> + '_ {
        let n = self.t.shape()[1];
        (0..2).flat_map(move |r| (3..n).map(move |j| self.t.at2(r, j)))
    }
}

pub fn build_transform(f_in: &[Point], delta: &DeltaMatrix) -> Result<TpsTransform> {
    let k = delta.k();
    let fiducials = FiducialSet::new(delta.f_out.clone(), f_in.to_vec())?;
    let mut rhs = Tensor::zeros(&[k + 3, 2]);
    for (j, p) in f_in.iter().enumerate() {
        rhs.data_mut()[j * 2] = p.x;
        rhs.data_mut()[j * 2 + 1] = p.y;
    }
    let coeffs = delta.lu.solve(&rhs)?;
    Ok(TpsTransform {
        t: coeffs.transpose()?,
        fiducials,
    })
}

/// Pulls a gradient on `T` back to the input fiducials `F`.
///
/// `Δ` depends on `F̃` only, so the gradient flows through the right-hand side:
/// `dB = Δ⁻ᵀ dTᵀ` and `dF` is the first `K` rows of `dB`.
pub fn transform_backward(d_t: &Tensor, delta: &DeltaMatrix) -> Result<Vec<Point>> {
    let k = delta.k();
    let (r, c) = d_t.dims2("transform_backward")?;
    if (r, c) != (2, k + 3) {
        return Err(DtnError::dim(
            "transform_backward",
            format!("gradient must be 2x{}, got {r}x{c}", k + 3),
        ));
    }
    let d_rhs = delta.lu.solve_transposed(&d_t.transpose()?)?;
    Ok((0..k)
        .map(|j| Point::new(d_rhs.at2(j, 0), d_rhs.at2(j, 1)))
        .collect())
}

/// Per-output-pixel source coordinates in input pixel space.
///
/// `h_out x w_out` is the regular grid the points enumerate (row-major);
/// `h_in x w_in` is the pixel space the coordinates live in.
#[derive(Clone, Debug, PartialEq)]
pub struct MappedGrid {
    pub h_out: usize,
    pub w_out: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub coords: Vec<Point>,
}

impl MappedGrid {
    pub fn new(
        h_out: usize,
        w_out: usize,
        h_in: usize,
        w_in: usize,
        coords: Vec<Point>,
    ) -> Result<Self> {
        if coords.len() != h_out * w_out {
            return Err(DtnError::dim(
                "MappedGrid::new",
                format!(
                    "{h_out}x{w_out} grid needs {} points, got {}",
                    h_out * w_out,
                    coords.len()
                ),
            ));
        }
        Ok(Self {
            h_out,
            w_out,
            h_in,
            w_in,
            coords,
        })
    }

    /// Every pixel maps to itself, exactly.
    pub fn identity(h: usize, w: usize) -> Self {
        let coords = (0..h * w)
            .map(|i| Point::new((i % w) as f64, (i / w) as f64))
            .collect();
        Self {
            h_out: h,
            w_out: w,
            h_in: h,
            w_in: w,
            coords,
        }
    }
}

/// The lifted regular output grid `Q` (one `q` row per output pixel), cached
/// per `(F̃, H̃, W̃)` so repeated forward passes only pay for `Q Tᵀ`.
#[derive(Clone, Debug)]
pub struct LiftedGrid {
    h_out: usize,
    w_out: usize,
    q: Tensor,
}

impl LiftedGrid {
    pub fn new(f_out: &[Point], h_out: usize, w_out: usize) -> Result<Self> {
        if h_out < 2 || w_out < 2 {
            return Err(DtnError::Config(format!(
                "grid extents must be >= 2, got {h_out}x{w_out}"
            )));
        }
        let k3 = f_out.len() + 3;
        let mut q = Vec::with_capacity(h_out * w_out * k3);
        for n in 0..h_out {
            for m in 0..w_out {
                let p = Point::new(normalize_index(m, w_out), normalize_index(n, h_out));
                q.extend(lift_point(p, f_out));
            }
        }
        Ok(Self {
            h_out,
            w_out,
            q: Tensor::new(&[h_out * w_out, k3], q)?,
        })
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.h_out, self.w_out)
    }

    pub fn map(&self, t: &TpsTransform, h_in: usize, w_in: usize) -> Result<MappedGrid> {
        if h_in < 2 || w_in < 2 {
            return Err(DtnError::Config(format!(
                "input extents must be >= 2, got {h_in}x{w_in}"
            )));
        }
        let norm = matmul(&self.q, &t.t.transpose()?)?;
        let coords = norm
            .data()
            .chunks_exact(2)
            .map(|xy| Point::new(denormalize(xy[0], w_in), denormalize(xy[1], h_in)))
            .collect();
        MappedGrid::new(self.h_out, self.w_out, h_in, w_in, coords)
    }

    /// Gradient on `T` from gradients on the mapped pixel coordinates.
    pub fn backward(&self, d_coords: &[Point], h_in: usize, w_in: usize) -> Result<Tensor> {
        if d_coords.len() != self.h_out * self.w_out {
            return Err(DtnError::dim(
                "LiftedGrid::backward",
                format!(
                    "expected {} coordinate gradients, got {}",
                    self.h_out * self.w_out,
                    d_coords.len()
                ),
            ));
        }
        let (sx, sy) = (0.5 * (w_in - 1) as f64, 0.5 * (h_in - 1) as f64);
        let d_norm_t = Tensor::from_fn(&[2, d_coords.len()], |i| {
            let (axis, p) = (i / d_coords.len(), i % d_coords.len());
            if axis == 0 {
                d_coords[p].x * sx
            } else {
                d_coords[p].y * sy
            }
        });
        matmul(&d_norm_t, &self.q)
    }
}

pub fn map_grid(
    t: &TpsTransform,
    h_out: usize,
    w_out: usize,
    h_in: usize,
    w_in: usize,
) -> Result<MappedGrid> {
    LiftedGrid::new(&t.fiducials.f_out, h_out, w_out)?.map(t, h_in, w_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fiducial_lattices() {
        let f = regular_fiducials(4).unwrap();
        assert_eq!(
            f,
            vec![
                Point::new(-1.0, -1.0),
                Point::new(1.0, -1.0),
                Point::new(-1.0, 1.0),
                Point::new(1.0, 1.0)
            ]
        );
        assert_eq!(regular_fiducials(9).unwrap()[4], Point::new(0.0, 0.0));
        let f16 = regular_fiducials(16).unwrap();
        for col in 0..3 {
            assert!((f16[col + 1].x - f16[col].x - 2.0 / 3.0).abs() < 1e-15);
        }
        assert!(regular_fiducials(8).is_err());
        assert!(regular_fiducials(1).is_err());
    }

    #[test]
    fn delta_for_corner_fiducials() {
        let f = regular_fiducials(4).unwrap();
        let d = build_delta(&f).unwrap();
        assert_eq!(d.delta.shape(), &[7, 7]);
        assert!((d.r.at2(0, 1) - 4.0 * 4.0f64.ln()).abs() < 1e-12);
        assert!((d.r.at2(0, 1) - 5.5452).abs() < 1e-4);
        for i in 0..4 {
            assert_eq!(d.r.at2(i, i), 0.0);
            for j in 0..4 {
                assert_eq!(d.r.at2(i, j), d.r.at2(j, i));
            }
        }
        assert_eq!(d.ridge(), 0.0);
        // block layout
        assert_eq!(d.delta.at2(0, 0), 1.0);
        assert_eq!(d.delta.at2(1, 1), 1.0);
        assert_eq!(d.delta.at2(1, 2), -1.0);
        assert_eq!(d.delta.at2(4, 0), 0.0);
        assert_eq!(d.delta.at2(4, 3), 1.0);
        assert_eq!(d.delta.at2(5, 4), 1.0);
        assert_eq!(d.delta.at2(6, 4), -1.0);
    }

    #[test]
    fn duplicate_fiducials_rejected() {
        let f = vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(0.0, 1.0),
            Point::new(1.0, 0.0),
        ];
        assert!(matches!(build_delta(&f), Err(DtnError::Config(_))));
    }

    #[test]
    fn collinear_fiducials_fall_back_to_ridge_or_fail_cleanly() {
        // Collinear points make the affine block rank-deficient; the ridge
        // cannot fix that, so a singularity error must surface.
        let f: Vec<Point> = (0..4)
            .map(|i| Point::new(i as f64 * 0.5 - 0.75, 0.0))
            .collect();
        assert!(matches!(build_delta(&f), Err(DtnError::Singular { .. })));
    }

    #[test]
    fn identity_and_half_scale_transforms() {
        let f = regular_fiducials(16).unwrap();
        let d = build_delta(&f).unwrap();
        let t = build_transform(&f, &d).unwrap();
        for p in &f {
            let q = t.apply(*p);
            assert!((q.x - p.x).abs() < 1e-12 && (q.y - p.y).abs() < 1e-12);
        }

        let half: Vec<Point> = f.iter().map(|p| Point::new(0.5 * p.x, 0.5 * p.y)).collect();
        let t = build_transform(&half, &d).unwrap();
        assert!(t.radial_coefficients().all(|c| c.abs() < 1e-8));
        let grid = map_grid(&t, 8, 8, 8, 8).unwrap();
        assert!((grid.coords[0].x - 1.75).abs() < 1e-10);
        assert!((grid.coords[0].y - 1.75).abs() < 1e-10);
        for n in 0..8 {
            for m in 0..8 {
                let p = grid.coords[n * 8 + m];
                let ex = denormalize(0.5 * normalize_index(m, 8), 8);
                let ey = denormalize(0.5 * normalize_index(n, 8), 8);
                assert!((p.x - ex).abs() < 1e-8 && (p.y - ey).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn out_of_range_fiducial_is_rejected() {
        let f = regular_fiducials(4).unwrap();
        let d = build_delta(&f).unwrap();
        let mut bad = f.clone();
        bad[2].x = 1.5;
        assert!(matches!(
            build_transform(&bad, &d),
            Err(DtnError::Config(_))
        ));
    }

    #[test]
    fn lifting() {
        let f = regular_fiducials(4).unwrap();
        let q = lift_point(f[0], &f);
        assert_eq!(&q[..4], &[1.0, -1.0, -1.0, 0.0]);
        assert!((q[4] - radial_kernel(4.0)).abs() < 1e-15);
        let q = lift_point(Point::new(0.0, 0.0), &f);
        for s in &q[3..] {
            assert!((s - 2.0 * 2.0f64.ln()).abs() < 1e-15);
            assert!((s - 1.3863).abs() < 1e-4);
        }
        assert_eq!(lift_point(Point::new(0.3, -0.7), &f).len(), 7);
    }

    #[test]
    fn identity_grid_and_shapes() {
        let f = regular_fiducials(16).unwrap();
        let d = build_delta(&f).unwrap();
        let t = build_transform(&f, &d).unwrap();
        let grid = map_grid(&t, 6, 6, 6, 6).unwrap();
        let id = MappedGrid::identity(6, 6);
        for (a, b) in grid.coords.iter().zip(&id.coords) {
            assert!((a.x - b.x).abs() < 1e-8 && (a.y - b.y).abs() < 1e-8);
        }
        assert_eq!(map_grid(&t, 4, 6, 4, 6).unwrap().coords.len(), 24);
        assert!(map_grid(&t, 1, 6, 4, 6).is_err());
    }

    #[test]
    fn transform_backward_matches_finite_differences() {
        let f = regular_fiducials(9).unwrap();
        let d = build_delta(&f).unwrap();
        let f_in: Vec<Point> = f
            .iter()
            .enumerate()
            .map(|(i, p)| {
                Point::new(
                    0.8 * p.x + 0.05 * (i as f64).sin(),
                    0.8 * p.y - 0.04 * (i as f64).cos(),
                )
            })
            .collect();
        let lifted = LiftedGrid::new(&f, 5, 6).unwrap();
        let weights: Vec<Point> = (0..30)
            .map(|i| Point::new((i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()))
            .collect();
        let loss = |fi: &[Point]| {
            let t = build_transform(fi, &d).unwrap();
            let g = lifted.map(&t, 7, 9).unwrap();
            g.coords
                .iter()
                .zip(&weights)
                .map(|(p, w)| p.x * w.x + p.y * w.y)
                .sum::<f64>()
        };
        let d_t = lifted.backward(&weights, 7, 9).unwrap();
        let d_f = transform_backward(&d_t, &d).unwrap();
        let eps = 1e-5;
        for j in 0..f_in.len() {
            for axis in 0..2 {
                let mut plus = f_in.clone();
                let mut minus = f_in.clone();
                if axis == 0 {
                    plus[j].x += eps;
                    minus[j].x -= eps;
                } else {
                    plus[j].y += eps;
                    minus[j].y -= eps;
                }
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let analytic = if axis == 0 { d_f[j].x } else { d_f[j].y };
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(rel < 1e-6, "F[{j}].{axis}: {analytic} vs {numeric}");
            }
        }
    }

    proptest! {
        #[test]
        fn delta_ignores_f_in(seed in 0u64..1000) {
            let f = regular_fiducials(16).unwrap();
            let a = build_delta(&f).unwrap();
            let f_in: Vec<Point> = f.iter().map(|p| Point::new(p.x * 0.3, (seed as f64).sin() * 0.5)).collect();
            let _ = build_transform(&f_in, &a).unwrap();
            let b = build_delta(&f).unwrap();
            prop_assert_eq!(a.delta, b.delta);
        }

        #[test]
        fn interpolation_property(coords in prop::collection::vec(-0.9f64..0.9, 32)) {
            let f = regular_fiducials(16).unwrap();
            let d = build_delta(&f).unwrap();
            let f_in: Vec<Point> = coords.chunks(2).map(|c| Point::new(c[0], c[1])).collect();
            let t = build_transform(&f_in, &d).unwrap();
            for (src, dst) in f.iter().zip(&f_in) {
                let p = t.apply(*src);
                prop_assert!((p.x - dst.x).abs() < 1e-8 && (p.y - dst.y).abs() < 1e-8);
            }
        }

        #[test]
        fn affine_reproduction(a in prop::collection::vec(-0.5f64..0.5, 6)) {
            let f = regular_fiducials(16).unwrap();
            let d = build_delta(&f).unwrap();
            let affine = |p: Point| Point::new(a[0] * p.x + a[1] * p.y + a[4], a[2] * p.x + a[3] * p.y + a[5]);
            let f_in: Vec<Point> = f.iter().map(|&p| affine(p)).collect();
            // F must stay inside the tanh range
            prop_assume!(f_in.iter().all(|p| p.x.abs() <= 1.0 && p.y.abs() <= 1.0));
            let t = build_transform(&f_in, &d).unwrap();
            let (h, w) = (9, 11);
            let grid = map_grid(&t, h, w, h, w).unwrap();
            for n in 0..h {
                for m in 0..w {
                    let e = affine(Point::new(normalize_index(m, w), normalize_index(n, h)));
                    let p = grid.coords[n * w + m];
                    prop_assert!((p.x - denormalize(e.x, w)).abs() < 1e-6);
                    prop_assert!((p.y - denormalize(e.y, h)).abs() < 1e-6);
                }
            }
        }
    }
}
