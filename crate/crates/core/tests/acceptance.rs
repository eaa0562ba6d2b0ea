//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

#![allow(clippy::needless_range_loop)]

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dtn_core::commands::{bench, evaluate, train, TrainOptions, DEFAULT_LR};
use dtn_core::gradcheck::run_suite;
use dtn_core::model::{ModelKind, NetConfig, Network};
use dtn_core::samplers::{fill_holes, gather_forward, scatter_forward, HOLE_EPS};
use dtn_core::tps::{build_delta, build_transform, map_grid, regular_fiducials, MappedGrid, Point};
use dtn_core::Tensor;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn c1_gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = match run_suite(0, 1e-6) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    outcome(
        failed.is_empty() && secs < 10.0,
        format!(
            "{} checks, worst rel err {worst:.2e} (< 1e-6), {secs:.2}s (< 10s){}",
            results.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failed: {}", failed.join(", "))
            }
        ),
    )
}

fn c2_interpolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let delta = build_delta(&regular_fiducials(16).unwrap()).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let f_in: Vec<Point> = (0..16)
            .map(|_| Point::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)))
            .collect();
        let t = build_transform(&f_in, &delta).unwrap();
        for (src, dst) in delta.f_out().iter().zip(&f_in) {
            let p = t.apply(*src);
            worst = worst.max((p.x - dst.x).abs()).max((p.y - dst.y).abs());
        }
    }
    outcome(
        worst < 1e-8,
        format!("100 draws, K=16, max |T f~ - f| = {worst:.2e} (< 1e-8)"),
    )
}

fn c3_affine() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f_out = regular_fiducials(16).unwrap();
    let delta = build_delta(&f_out).unwrap();
    let (h_out, w_out, h_in, w_in) = (9, 13, 17, 11);
    let (mut draws, mut rejected, mut worst) = (0, 0, 0.0f64);
    while draws < 100 {
        let c: Vec<f64> = (0..6).map(|_| rng.random_range(-0.5..=0.5)).collect();
        let affine = |p: Point| {
            Point::new(
                c[0] * p.x + c[1] * p.y + c[2],
                c[3] * p.x + c[4] * p.y + c[5],
            )
        };
        let f_in: Vec<Point> = f_out.iter().map(|&p| affine(p)).collect();
        // fiducials must stay inside the normalized square
        if f_in.iter().any(|p| p.x.abs() > 1.0 || p.y.abs() > 1.0) {
            rejected += 1;
            continue;
        }
        draws += 1;
        let t = build_transform(&f_in, &delta).unwrap();
        let grid = map_grid(&t, h_out, w_out, h_in, w_in).unwrap();
        for (i, q) in grid.coords.iter().enumerate() {
            let (n, m) = (i / w_out, i % w_out);
            let p = Point::new(
                -1.0 + 2.0 * m as f64 / (w_out - 1) as f64,
                -1.0 + 2.0 * n as f64 / (h_out - 1) as f64,
            );
            let a = affine(p);
            let want = Point::new(
                (a.x + 1.0) / 2.0 * (w_in - 1) as f64,
                (a.y + 1.0) / 2.0 * (h_in - 1) as f64,
            );
            worst = worst.max((q.x - want.x).abs()).max((q.y - want.y).abs());
        }
    }
    outcome(
        worst < 1e-6,
        format!("100 affine draws ({rejected} rejected out of range), max grid error {worst:.2e} px (< 1e-6)"),
    )
}

/// `W[p][q] = tent(x_p - m_q) * tent(y_p - n_q)`, written out per entry.
fn brute_weights(coords: &[Point], h_in: usize, w_in: usize) -> Vec<Vec<f64>> {
    coords
        .iter()
        .map(|p| {
            (0..h_in * w_in)
                .map(|q| {
                    let (n, m) = ((q / w_in) as f64, (q % w_in) as f64);
                    (1.0 - (p.x - m).abs()).max(0.0) * (1.0 - (p.y - n).abs()).max(0.0)
                })
                .collect()
        })
        .collect()
}

fn c4_sampler_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w, c) = (3, 3, 2);
    let (mut gather_err, mut scatter_err, mut holes) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..200 {
        let coords: Vec<Point> = (0..h * w)
            .map(|_| Point::new(rng.random_range(-0.7..2.7), rng.random_range(-0.7..2.7)))
            .collect();
        let grid = MappedGrid::new(h, w, h, w, coords.clone()).unwrap();
        let wm = brute_weights(&coords, h, w);
        let u = Tensor::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0));

        let g = gather_forward(&u, &grid).unwrap();
        for p in 0..h * w {
            for ch in 0..c {
                let want: f64 = (0..h * w).map(|q| wm[p][q] * u.data()[q * c + ch]).sum();
                gather_err = gather_err.max((g.data()[p * c + ch] - want).abs());
            }
        }

        let v = Tensor::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0));
        let s = scatter_forward(&v, &grid, h, w).unwrap();
        for q in 0..h * w {
            let sq: f64 = (0..h * w).map(|p| wm[p][q]).sum();
            scatter_err = scatter_err.max((s.s.data()[q] - sq).abs());
            for ch in 0..c {
                let num: f64 = (0..h * w).map(|p| wm[p][q] * v.data()[p * c + ch]).sum();
                let got = s.out.data()[q * c + ch];
                if sq > HOLE_EPS {
                    scatter_err = scatter_err.max((got - num / sq).abs());
                } else {
                    holes += 1;
                    scatter_err = scatter_err.max(got.abs());
                }
            }
        }
    }
    outcome(
        gather_err < 1e-10 && scatter_err < 1e-10,
        format!(
            "200 random 3x3 grids: gather vs W u {gather_err:.2e}, scatter vs W^T v / W^T 1 {scatter_err:.2e} (< 1e-10), {holes} hole entries"
        ),
    )
}

fn c5_identity() -> Outcome {
    let mut net_err: f64 = 0.0;
    for seed in 0..3 {
        let mut unet = Network::new(NetConfig::desk(ModelKind::Unet, 32, 32), seed).unwrap();
        let mut dtn = Network::new(NetConfig::desk(ModelKind::Dtn, 32, 32), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let img = Tensor::from_fn(&[32, 32, 1], |_| rng.random_range(0.0..1.0));
        let a = unet.forward(&img).unwrap();
        let b = dtn.forward(&img).unwrap();
        net_err = net_err.max(a.max_abs_diff(&b).unwrap());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f_out = regular_fiducials(16).unwrap();
    let t = build_transform(&f_out, &build_delta(&f_out).unwrap()).unwrap();
    let mut round_trip: f64 = 0.0;
    let mut exact_identity = true;
    for (h, w) in [(8, 8), (5, 11), (16, 12)] {
        let u = Tensor::from_fn(&[h, w, 3], |_| rng.random_range(-1.0..1.0));
        let grid = map_grid(&t, h, w, h, w).unwrap();
        let back = scatter_forward(&gather_forward(&u, &grid).unwrap(), &grid, h, w).unwrap();
        round_trip = round_trip.max(fill_holes(&back).max_abs_diff(&u).unwrap());

        let id = MappedGrid::identity(h, w);
        let back = scatter_forward(&gather_forward(&u, &id).unwrap(), &id, h, w).unwrap();
        exact_identity &= back.hole_count() == 0 && back.out == u;
    }
    outcome(
        net_err < 1e-6 && round_trip < 1e-12 && exact_identity,
        format!(
            "DTN vs U-Net max |diff| {net_err:.2e} (< 1e-6); scatter(gather) under identity T {round_trip:.2e}, bit-exact on the identity grid: {exact_identity}"
        ),
    )
}

fn c6_constant() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let delta = build_delta(&regular_fiducials(16).unwrap()).unwrap();
    let (mut worst, mut holes, mut cells) = (0.0f64, 0usize, 0usize);
    for _ in 0..50 {
        let f_in: Vec<Point> = delta
            .f_out()
            .iter()
            .map(|p| {
                let j =
                    |v: f64, r: &mut ChaCha8Rng| (v + r.random_range(-0.3..0.3)).clamp(-1.0, 1.0);
                Point::new(j(p.x, &mut rng), j(p.y, &mut rng))
            })
            .collect();
        let t = build_transform(&f_in, &delta).unwrap();
        let (h, w) = (rng.random_range(4..20), rng.random_range(4..20));
        let grid = map_grid(&t, h, w, h, w).unwrap();
        let k: f64 = rng.random_range(-5.0..5.0);
        let r = scatter_forward(&Tensor::full(&[h, w, 2], k), &grid, h, w).unwrap();
        for (i, &hole) in r.holes.iter().enumerate() {
            cells += 1;
            if hole {
                holes += 1;
                continue;
            }
            for ch in 0..2 {
                worst = worst.max((r.out.data()[i * 2 + ch] - k).abs());
            }
        }
    }
    outcome(
        worst < 1e-12,
        format!(
            "50 warped grids, {cells} cells ({holes} holes), max deviation {worst:.2e} (< 1e-12)"
        ),
    )
}

fn c7_training() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for kind in [ModelKind::Dtn, ModelKind::Unet] {
        let opts = TrainOptions::new(kind, 1, 500, 32);
        let a = train(&opts).unwrap();
        let b = train(&opts).unwrap();
        let (init, fin) = (a.initial_loss().unwrap(), a.final_loss().unwrap());
        let reduction = 1.0 - fin / init;
        let bits = |r: &dtn_core::commands::TrainReport| {
            r.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        let reproducible = bits(&a) == bits(&b) && a.checkpoint == b.checkpoint;
        ok &= reduction >= 0.5 && a.seconds < 300.0 && reproducible;
        lines.push(format!(
            "{kind}: {init:.4} -> {fin:.4} ({:.1}% drop, >= 50%), {:.1}s (< 300s), reproducible: {reproducible}",
            100.0 * reduction,
            a.seconds
        ));
    }
    outcome(
        ok,
        format!(
            "lr {DEFAULT_LR}, 500 steps, size 32, seed 1; {}",
            lines.join("; ")
        ),
    )
}

fn c8_comparative() -> Outcome {
    let seeds = [1u64, 2, 3, 4, 5];
    let mut miou = [0.0f64; 2];
    let mut auc = [0.0f64; 2];
    for &seed in &seeds {
        for (i, kind) in [ModelKind::Unet, ModelKind::Dtn].into_iter().enumerate() {
            let r = train(&TrainOptions::new(kind, seed, 500, 32)).unwrap();
            let mut net = r.checkpoint.to_network().unwrap();
            let e = evaluate(&mut net, 20, seed).unwrap();
            miou[i] += e.mean_iou / seeds.len() as f64;
            auc[i] += e.auc.unwrap_or(f64::NAN) / seeds.len() as f64;
        }
    }
    outcome(
        miou[1] >= miou[0] - 0.02,
        format!(
            "5 seeds, 20 held-out samples each: mean IoU unet {:.4}, dtn {:.4} (gain {:+.4}, need >= -0.02); AUC unet {:.4}, dtn {:.4}",
            miou[0],
            miou[1],
            miou[1] - miou[0],
            auc[0],
            auc[1]
        ),
    )
}

fn c9_overhead() -> Outcome {
    let r = bench(64, 100, 0).unwrap();
    let ratio = r.ratio();
    outcome(
        ratio > 0.0 && ratio < 2.0,
        format!(
            "size 64, 100 iters: unet {:.2} ms, dtn {:.2} ms, ratio {ratio:.3} (< 2.0)",
            r.unet.mean_ms, r.dtn.mean_ms
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient suite", c1_gradient_suite),
        ("TPS interpolation", c2_interpolation),
        ("affine reproduction", c3_affine),
        ("sampler oracle equivalence", c4_sampler_oracle),
        ("identity reduction", c5_identity),
        ("constant preservation", c6_constant),
        ("training smoke", c7_training),
        ("comparative non-inferiority", c8_comparative),
        ("overhead", c9_overhead),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || id == *f) {
            continue;
        }
        let o = run();
        if !o.passed {
            failures += 1;
        }
        println!(
            "{id} [{name}]: {} {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
