//! Central-difference gradient checks for every backward pass in the crate.
//!
//! Each check draws seeded random inputs, contracts the op's output with a
//! random cotangent `R` to get a scalar loss `L = Σ R ⊙ f(x)`, and compares
//! the analytic gradient against `(L(x + ε) - L(x - ε)) / 2ε`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{fiducials_from_outputs, ModelKind, NetConfig, Network};
use crate::nn::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, maxpool2_backward,
    maxpool2_forward, relu_backward, softmax_xent, upsample2_backward, upsample2_forward, Conv2d,
    Dense, Layer, MaxPool2, Relu, Sequential,
};
use crate::samplers::{gather_backward, gather_forward, scatter_backward, scatter_forward};
use crate::tensor::{LabelMap, Tensor};
use crate::tps::{
    build_delta, build_transform, regular_fiducials, transform_backward, LiftedGrid, MappedGrid,
    Point,
};

pub const FD_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-6;
/// Gradient entries smaller than this are compared on absolute error.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central-difference gradient of `f` at `x`, restricted to `indices`.
pub fn numeric_gradient(
    x: &[f64],
    indices: &[usize],
    mut f: impl FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + FD_EPS;
            let plus = f(&probe);
            probe[i] = orig - FD_EPS;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * FD_EPS)
        })
        .collect()
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64], tol: f64) -> CheckResult {
    let max_rel_error = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max);
    CheckResult {
        name: name.to_string(),
        max_rel_error,
        entries: analytic.len(),
        tol,
    }
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn with_data(like: &Tensor, data: &[f64]) -> Tensor {
    Tensor::new(like.shape(), data.to_vec()).expect("same length")
}

fn contract(r: &Tensor, y: &Tensor) -> f64 {
    r.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

/// Jittered points whose coordinates avoid the tent kinks by at least `margin`.
fn jittered_points(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, margin: f64) -> Vec<Point> {
    let mut draw = || loop {
        let v: f64 = rng.random_range(lo..hi);
        let f = v - v.floor();
        if f > margin && f < 1.0 - margin {
            return v;
        }
    };
    (0..n).map(|_| Point::new(draw(), draw())).collect()
}

fn flatten_points(p: &[Point]) -> Vec<f64> {
    p.iter().flat_map(|q| [q.x, q.y]).collect()
}

fn unflatten_points(v: &[f64]) -> Vec<Point> {
    v.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect()
}

pub fn check_conv3x3(seed: u64, tol: f64) -> Result<Vec<CheckResult>> {
    check_conv(seed, 3, "conv3x3", tol)
}

pub fn check_conv1x1(seed: u64, tol: f64) -> Result<Vec<CheckResult>> {
    check_conv(seed, 1, "conv1x1", tol)
}

fn check_conv(seed: u64, k: usize, name: &str, tol: f64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[4, 4, 2], -1.0, 1.0);
    let w = uniform(&mut rng, &[k, k, 2, 3], -1.0, 1.0);
    let b = uniform(&mut rng, &[3], -1.0, 1.0);
    let r = uniform(&mut rng, &[4, 4, 3], -1.0, 1.0);
    let (d_x, d_w, d_b) = conv2d_backward(&x, &w, &r)?;
    let loss = |x: &Tensor, w: &Tensor, b: &Tensor| {
        contract(&r, &conv2d_forward(x, w, b).expect("shapes"))
    };
    let nx = numeric_gradient(x.data(), &all(x.len()), |v| loss(&with_data(&x, v), &w, &b));
    let nw = numeric_gradient(w.data(), &all(w.len()), |v| loss(&x, &with_data(&w, v), &b));
    let nb = numeric_gradient(b.data(), &all(b.len()), |v| loss(&x, &w, &with_data(&b, v)));
    Ok(vec![
        compare(&format!("{name} d_input"), d_x.data(), &nx, tol),
        compare(&format!("{name} d_weight"), d_w.data(), &nw, tol),
        compare(&format!("{name} d_bias"), d_b.data(), &nb, tol),
    ])
}

pub fn check_maxpool2(seed: u64, tol: f64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // distinct values so no tie sits within ε of another
    let mut vals: Vec<f64> = (0..4 * 6 * 2).map(|i| i as f64 * 0.1).collect();
    for i in (1..vals.len()).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    let x = Tensor::new(&[4, 6, 2], vals)?;
    let r = uniform(&mut rng, &[2, 3, 2], -1.0, 1.0);
    let (_, arg) = maxpool2_forward(&x)?;
    let d_x = maxpool2_backward(x.shape(), &arg, &r)?;
    let nx = numeric_gradient(x.data(), &all(x.len()), |v| {
        contract(&r, &maxpool2_forward(&with_data(&x, v)).expect("even").0)
    });
    Ok(vec![compare("maxpool2 d_input", d_x.data(), &nx, tol)])
}

pub fn check_upsample2(seed: u64, tol: f64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[3, 2, 2], -1.0, 1.0);
    let r = uniform(&mut rng, &[6, 4, 2], -1.0, 1.0);
    let d_x = upsample2_backward(&r)?;
    let nx = numeric_gradient(x.data(), &all(x.len()), |v| {
        contract(&r, &upsample2_forward(&with_data(&x, v)).expect("rank 3"))
    });
    Ok(vec![compare("upsample2 d_input", d_x.data(), &nx, tol)])
}

pub fn check_relu(seed: u64, tol: f64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // keep clear of the kink at 0
    let x = Tensor::from_fn(&[3, 3, 2], |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let r = uniform(&mut rng, &[3, 3, 2], -1.0, 1.0);
    let d_x = relu_backward(&x.map(|v| v.max(0.0)), &r)?;
    let nx = numeric_gradient(x.data(), &all(x.len()), |v| {
        contract(&r, &with_data(&x, v).map(|v| v.max(0.0)))
    });
    Ok(vec![compare("relu d_input", d_x.data(), &nx, tol)])
}

pub fn check_dense(seed: u64, tanh: bool, tol: f64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[7], -1.0, 1.0);
    let w = uniform(&mut rng, &[7, 5], -0.5, 0.5);
    let b = uniform(&mut rng, &[5], -0.5, 0.5);
    let r = uniform(&mut rng, &[5], -1.0, 1.0);
    let y = dense_forward(&x, &w, &b, tanh)?;
    let (d_x, d_w, d_b) = dense_backward(&x, &w, &y, &r, tanh)?;
    let loss = |x: &Tensor, w: &Tensor, b: &Tensor| {
        contract(&r, &dense_forward(x, w, b, tanh).expect("shapes"))
    };
    let nx = numeric_gradient(x.data(), &all(x.len()), |v| loss(&with_data(&x, v), &w, &b));
    let nw = numeric_gradient(w.data(), &all(w.len()), |v| loss(&x, &with_data(&w, v), &b));
    let nb = numeric_gradient(b.data(), &all(b.len()), |v| loss(&x, &w, &with_data(&b, v)));
    let name = if tanh { "dense+tanh" } else { "dense" };
    Ok(vec![
        compare(&format!("{name} d_input"), d_x.data(), &nx, tol),
        compare(&format!("{name} d_weight"), d_w.data(), &nw, tol),
        compare(&format!("{name} d_bias"), d_b.data(), &nb, tol),
    ])
}

pub fn check_softmax_xent(seed: u64, tol: f64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = uniform(&mut rng, &[3, 3, 4], -2.0, 2.0);
    let labels = LabelMap::new(3, 3, (0..9).map(|_| rng.random_range(0..4)).collect())?;
    let (_, d_z) = softmax_xent(&z, &labels)?;
    let nz = numeric_gradient(z.data(), &all(z.len()), |v| {
        softmax_xent(&with_data(&z, v), &labels)
            .expect("labels in range")
            .0
    });
    Ok(vec![compare("softmax_xent d_logits", d_z.data(), &nz, tol)])
}

pub fn check_gather(seed: u64, tol: f64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = uniform(&mut rng, &[5, 5, 2], -1.0, 1.0);
    let pts = jittered_points(&mut rng, 7, -0.5, 4.5, 0.01);
    let grid = MappedGrid::new(1, 7, 5, 5, pts.clone())?;
    let r = uniform(&mut rng, &[1, 7, 2], -1.0, 1.0);
    let (d_u, d_p) = gather_backward(&u, &grid, &r)?;
    let nu = numeric_gradient(u.data(), &all(u.len()), |v| {
        contract(
            &r,
            &gather_forward(&with_data(&u, v), &grid).expect("extents"),
        )
    });
    let flat = flatten_points(&pts);
    let np = numeric_gradient(&flat, &all(flat.len()), |v| {
        let g = MappedGrid::new(1, 7, 5, 5, unflatten_points(v)).expect("7 points");
        contract(&r, &gather_forward(&u, &g).expect("extents"))
    });
    Ok(vec![
        compare("gather d_input", d_u.data(), &nu, tol),
        compare("gather d_coords", &flatten_points(&d_p), &np, tol),
    ])
}

pub fn check_scatter(seed: u64, tol: f64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = uniform(&mut rng, &[4, 4, 2], -1.0, 1.0);
    let pts = jittered_points(&mut rng, 16, 0.0, 3.0, 0.01);
    let grid = MappedGrid::new(4, 4, 4, 4, pts.clone())?;
    let r = uniform(&mut rng, &[4, 4, 2], -1.0, 1.0);
    let res = scatter_forward(&v, &grid, 4, 4)?;
    let (d_v, d_p) = scatter_backward(&v, &grid, &res, &r)?;
    let nv = numeric_gradient(v.data(), &all(v.len()), |x| {
        contract(
            &r,
            &scatter_forward(&with_data(&v, x), &grid, 4, 4)
                .expect("extents")
                .out,
        )
    });
    let flat = flatten_points(&pts);
    let np = numeric_gradient(&flat, &all(flat.len()), |x| {
        let g = MappedGrid::new(4, 4, 4, 4, unflatten_points(x)).expect("16 points");
        contract(&r, &scatter_forward(&v, &g, 4, 4).expect("extents").out)
    });
    Ok(vec![
        compare("scatter d_input", d_v.data(), &nv, tol),
        compare("scatter d_coords", &flatten_points(&d_p), &np, tol),
    ])
}

/// Fiducials -> T -> mapped grid -> gather, differentiated with respect to `F`.
pub fn check_tps_path(seed: u64, tol: f64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f_out = regular_fiducials(16)?;
    let delta = build_delta(&f_out)?;
    let (h, w) = (6, 7);
    let lifted = LiftedGrid::new(&f_out, h, w)?;
    let f_in: Vec<Point> = f_out
        .iter()
        .map(|p| {
            Point::new(
                (0.85 * p.x + rng.random_range(-0.1..0.1)).clamp(-1.0, 1.0),
                (0.85 * p.y + rng.random_range(-0.1..0.1)).clamp(-1.0, 1.0),
            )
        })
        .collect();
    let u = uniform(&mut rng, &[h, w, 2], -1.0, 1.0);
    let r = uniform(&mut rng, &[h, w, 2], -1.0, 1.0);
    let loss = |f: &[Point]| {
        let t = build_transform(f, &delta).expect("in range");
        let g = lifted.map(&t, h, w).expect("extents");
        contract(&r, &gather_forward(&u, &g).expect("extents"))
    };
    let t = build_transform(&f_in, &delta)?;
    let grid = lifted.map(&t, h, w)?;
    let (_, d_coords) = gather_backward(&u, &grid, &r)?;
    let d_t = lifted.backward(&d_coords, h, w)?;
    let d_f = transform_backward(&d_t, &delta)?;
    let flat = flatten_points(&f_in);
    let nf = numeric_gradient(&flat, &all(flat.len()), |v| loss(&unflatten_points(v)));
    Ok(vec![compare(
        "tps grid + gather d_fiducials",
        &flatten_points(&d_f),
        &nf,
        tol,
    )])
}

/// Loss `Σ F²` through a small localization stack.
pub fn check_localization(seed: u64, tol: f64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 4;
    let mut net = Sequential::new(vec![
        Layer::Conv(Conv2d::new(3, 2, 3, &mut rng)),
        Layer::Relu(Relu::default()),
        Layer::MaxPool(MaxPool2::default()),
        Layer::Dense(Dense::new(2 * 2 * 3, 6, false, &mut rng)),
        Layer::Relu(Relu::default()),
        Layer::Dense(Dense::new(6, 2 * k, true, &mut rng)),
    ]);
    let x = uniform(&mut rng, &[4, 4, 2], -1.0, 1.0);
    let fwd = |net: &mut Sequential| -> f64 {
        let raw = net.forward(&x).expect("shapes");
        fiducials_from_outputs(&raw, k)
            .expect("2K outputs")
            .iter()
            .map(|p| p.x * p.x + p.y * p.y)
            .sum()
    };
    let raw = net.forward(&x)?;
    net.backward(&raw.scale(2.0))?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let n_params = net.named_params_mut().len();
    for pi in 0..n_params {
        let (vals, grads) = {
            let params = net.named_params_mut();
            let p = &params[pi].1;
            (p.value.data().to_vec(), p.grad.data().to_vec())
        };
        analytic.extend(grads);
        numeric.extend(numeric_gradient(&vals, &all(vals.len()), |v| {
            net.named_params_mut()[pi]
                .1
                .value
                .data_mut()
                .copy_from_slice(v);
            fwd(&mut net)
        }));
        net.named_params_mut()[pi]
            .1
            .value
            .data_mut()
            .copy_from_slice(&vals);
    }
    Ok(vec![compare(
        "localization d_params",
        &analytic,
        &numeric,
        tol,
    )])
}

/// Network gradient on a random subset of `n_params` parameter entries.
/// For the DTN the localization head is first nudged off the identity so the
/// mapped grid sits away from the sampler kinks.
pub fn check_network(
    kind: ModelKind,
    seed: u64,
    n_params: usize,
    tol: f64,
) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let cfg = NetConfig::desk(kind, 16, 16);
    let mut net = Network::new(cfg, seed)?;
    for (name, p) in net.named_params_mut() {
        if name.starts_with("loc.8.") {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.05..0.05));
        }
        if name.ends_with("bias") && !name.starts_with("loc.") {
            // nonzero biases move pre-activations off the relu kink
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
    }
    let image = uniform(&mut rng, &[16, 16, 1], 0.0, 1.0);
    let labels = LabelMap::new(16, 16, (0..256).map(|_| rng.random_range(0..2)).collect())?;
    net.compute_gradients(&image, &labels)?;

    let sizes: Vec<(String, usize)> = net
        .named_params_mut()
        .iter()
        .map(|(n, p)| (n.clone(), p.value.len()))
        .collect();
    let total: usize = sizes.iter().map(|s| s.1).sum();
    // every tensor at least once, the rest uniformly at random
    let mut picks: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(ti, (_, len))| (ti, rng.random_range(0..*len)))
        .collect();
    while picks.len() < n_params.max(sizes.len()) {
        let mut flat = rng.random_range(0..total);
        let ti = sizes
            .iter()
            .position(|(_, len)| {
                if flat < *len {
                    true
                } else {
                    flat -= len;
                    false
                }
            })
            .expect("index below total");
        if !picks.contains(&(ti, flat)) {
            picks.push((ti, flat));
        }
    }

    let mut analytic = Vec::with_capacity(picks.len());
    let mut numeric = Vec::with_capacity(picks.len());
    let mut straddled = 0usize;
    for &(ti, idx) in &picks {
        let (orig, grad) = {
            let params = net.named_params_mut();
            (
                params[ti].1.value.data()[idx],
                params[ti].1.grad.data()[idx],
            )
        };
        let eval = |v: f64, net: &mut Network| {
            net.named_params_mut()[ti].1.value.data_mut()[idx] = v;
            let loss = net.loss(&image, &labels).expect("forward");
            (loss, net.activation_pattern())
        };
        let (plus, pat_plus) = eval(orig + FD_EPS, &mut net);
        let (minus, pat_minus) = eval(orig - FD_EPS, &mut net);
        eval(orig, &mut net);
        // a central difference across a relu/pool/sampler switch measures a
        // chord, not a derivative
        if pat_plus != pat_minus {
            straddled += 1;
            continue;
        }
        analytic.push(grad);
        numeric.push((plus - minus) / (2.0 * FD_EPS));
    }
    let mut result = compare(
        &format!("{kind} end-to-end d_params"),
        &analytic,
        &numeric,
        tol,
    );
    if straddled * 5 > picks.len() {
        // too few usable entries to mean anything
        result.max_rel_error = f64::INFINITY;
    }
    Ok(vec![result])
}

/// The full suite, in a fixed order.
pub fn run_suite(seed: u64, tol: f64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    out.extend(check_conv3x3(seed, tol)?);
    out.extend(check_conv1x1(seed + 1, tol)?);
    out.extend(check_maxpool2(seed + 2, tol)?);
    out.extend(check_upsample2(seed + 3, tol)?);
    out.extend(check_relu(seed + 4, tol)?);
    out.extend(check_dense(seed + 5, false, tol)?);
    out.extend(check_dense(seed + 6, true, tol)?);
    out.extend(check_softmax_xent(seed + 7, tol)?);
    out.extend(check_gather(seed + 8, tol)?);
    out.extend(check_scatter(seed + 9, tol)?);
    out.extend(check_tps_path(seed + 10, tol)?);
    out.extend(check_localization(seed + 11, tol)?);
    out.extend(check_network(ModelKind::Unet, seed + 12, 50, tol)?);
    out.extend(check_network(ModelKind::Dtn, seed + 13, 50, tol)?);
    Ok(out)
}
