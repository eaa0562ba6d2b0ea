use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dtn_core::samplers::{fill_holes, gather_forward, scatter_forward};
use dtn_core::tps::{build_delta, build_transform, map_grid, regular_fiducials, Point};
use dtn_core::Tensor;

fn argmax(t: &Tensor) -> usize {
    t.data()
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |b, (i, &v)| if v > b.1 { (i, v) } else { b },
        )
        .0
}

#[test]
fn delta_returns_to_its_origin_after_gather_then_scatter() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let delta = build_delta(&regular_fiducials(16).unwrap()).unwrap();
    let (h, w) = (24, 24);
    for draw in 0..200 {
        let f_in: Vec<Point> = delta
            .f_out()
            .iter()
            .map(|p| {
                let mut j = |v: f64| (v + rng.random_range(-0.2..=0.2)).clamp(-1.0, 1.0);
                Point::new(j(p.x), j(p.y))
            })
            .collect();
        let t = build_transform(&f_in, &delta).unwrap();
        let grid = map_grid(&t, h, w, h, w).unwrap();

        let (n0, m0) = (rng.random_range(4..h - 4), rng.random_range(4..w - 4));
        let mut img = Tensor::zeros(&[h, w, 1]);
        img.data_mut()[n0 * w + m0] = 1.0;

        let v = gather_forward(&img, &grid).unwrap();
        assert!(
            v.max_abs() > 0.0,
            "draw {draw}: the warped grid missed the delta"
        );
        let back = fill_holes(&scatter_forward(&v, &grid, h, w).unwrap());
        let peak = argmax(&back);
        let (n, m) = (peak / w, peak % w);
        assert!(
            n.abs_diff(n0) <= 1 && m.abs_diff(m0) <= 1,
            "draw {draw}: delta at ({n0}, {m0}) came back at ({n}, {m})"
        );
    }
}

#[test]
fn identity_warp_returns_delta_exactly() {
    let f = regular_fiducials(16).unwrap();
    let t = build_transform(&f, &build_delta(&f).unwrap()).unwrap();
    let grid = map_grid(&t, 12, 12, 12, 12).unwrap();
    let mut img = Tensor::zeros(&[12, 12, 1]);
    img.data_mut()[5 * 12 + 7] = 1.0;
    let back =
        fill_holes(&scatter_forward(&gather_forward(&img, &grid).unwrap(), &grid, 12, 12).unwrap());
    assert!(back.max_abs_diff(&img).unwrap() < 1e-12);
}
