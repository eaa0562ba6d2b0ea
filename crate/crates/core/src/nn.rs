//! Layers with hand-written forward and backward passes.
//!
//! Feature maps are `H x W x C`. Every layer caches what its backward pass
//! needs during `forward`; parameter gradients accumulate into [`Param::grad`]
//! until [`Param::zero_grad`] is called.

use std::hash::{Hash, Hasher};

use rand::Rng;

use crate::error::{DtnError, Result};
use crate::tensor::{LabelMap, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub seed: u64,
}

impl SgdConfig {
    pub fn new(learning_rate: f64, seed: u64) -> Result<Self> {
        // lr = 0 is accepted so a step can be a no-op (frozen evaluation runs)
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(DtnError::Config(format!(
                "learning rate must be finite and non-negative, got {learning_rate}"
            )));
        }
        Ok(Self {
            learning_rate,
            seed,
        })
    }
}

/// `p <- p - lr * g` for each pair.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], cfg: &SgdConfig) -> Result<()> {
    if params.len() != grads.len() {
        return Err(DtnError::dim(
            "sgd_step",
            format!("{} parameters but {} gradients", params.len(), grads.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(DtnError::dim(
                "sgd_step",
                format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= cfg.learning_rate * gv;
        }
    }
    Ok(())
}

pub fn sgd_update(param: &mut Param, cfg: &SgdConfig) {
    let lr = cfg.learning_rate;
    for (pv, gv) in param.value.data_mut().iter_mut().zip(param.grad.data()) {
        *pv -= lr * gv;
    }
}

/// Uniform in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-a..=a))
}

fn missing_cache(layer: &'static str) -> DtnError {
    DtnError::Config(format!("{layer}: backward called before forward"))
}

// ---------------------------------------------------------------------------
// convolution

/// Same-padded cross-correlation with an odd `k x k` kernel laid out as
/// `[k, k, c_in, c_out]`.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (h, w, cin) = input.dims3("conv2d")?;
    let (k, cout) = conv_dims(weight, bias, cin)?;
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(&[h, w, cout]);
    let x = input.data();
    let wt = weight.data();
    let o = out.data_mut();
    for n in 0..h {
        for m in 0..w {
            let acc = &mut o[(n * w + m) * cout..(n * w + m + 1) * cout];
            acc.copy_from_slice(bias.data());
            for ky in 0..k {
                let yy = n as isize + ky as isize - pad;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let xx = m as isize + kx as isize - pad;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let px = &x[(yy as usize * w + xx as usize) * cin..][..cin];
                    let wbase = (ky * k + kx) * cin * cout;
                    for (ci, &xv) in px.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &wt[wbase + ci * cout..][..cout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv_dims(weight: &Tensor, bias: &Tensor, cin: usize) -> Result<(usize, usize)> {
    match weight.shape()[..] {
        [k, k2, wc, cout] if k == k2 && k % 2 == 1 && wc == cin && bias.shape() == [cout] => {
            Ok((k, cout))
        }
        _ => Err(DtnError::dim(
            "conv2d",
            format!(
                "weights {:?} / bias {:?} do not fit a {cin}-channel input",
                weight.shape(),
                bias.shape()
            ),
        )),
    }
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (h, w, cin) = input.dims3("conv2d_backward")?;
    let k = weight.shape()[0];
    let cout = *weight.shape().last().unwrap_or(&0);
    conv_dims(weight, &Tensor::zeros(&[cout.max(1)]), cin)?;
    if d_out.shape() != [h, w, cout] {
        return Err(DtnError::dim(
            "conv2d_backward",
            format!(
                "output gradient {:?}, expected [{h}, {w}, {cout}]",
                d_out.shape()
            ),
        ));
    }
    let pad = (k / 2) as isize;
    let mut d_in = Tensor::zeros(input.shape());
    let mut d_w = Tensor::zeros(weight.shape());
    let mut d_b = Tensor::zeros(&[cout]);
    let x = input.data();
    let wt = weight.data();
    let g = d_out.data();
    {
        let db = d_b.data_mut();
        for px in g.chunks_exact(cout) {
            for (b, &v) in db.iter_mut().zip(px) {
                *b += v;
            }
        }
    }
    let di = d_in.data_mut();
    let dw = d_w.data_mut();
    for n in 0..h {
        for m in 0..w {
            let go = &g[(n * w + m) * cout..][..cout];
            for ky in 0..k {
                let yy = n as isize + ky as isize - pad;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let xx = m as isize + kx as isize - pad;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let ibase = (yy as usize * w + xx as usize) * cin;
                    let wbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = x[ibase + ci];
                        let wrow = &wt[wbase + ci * cout..][..cout];
                        let dwrow = &mut dw[wbase + ci * cout..][..cout];
                        let mut acc = 0.0;
                        for co in 0..cout {
                            acc += go[co] * wrow[co];
                            dwrow[co] += go[co] * xv;
                        }
                        di[ibase + ci] += acc;
                    }
                }
            }
        }
    }
    Ok((d_in, d_w, d_b))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(k: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let w = glorot_uniform(&[k, k, cin, cout], k * k * cin, k * k * cout, rng);
        Self::from_params(w, Tensor::zeros(&[cout]))
    }

    pub fn from_params(weight: Tensor, bias: Tensor) -> Self {
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.bias.value.len()
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d_forward(x, &self.weight.value, &self.bias.value)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, d_out: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or_else(|| missing_cache("conv2d"))?;
        let (d_in, d_w, d_b) = conv2d_backward(x, &self.weight.value, d_out)?;
        self.weight.grad.add_assign(&d_w)?;
        self.bias.grad.add_assign(&d_b)?;
        Ok(d_in)
    }
}

// ---------------------------------------------------------------------------
// pooling and upsampling

/// 2x2 stride-2 max pool. Also returns, per output element, the flat input
/// index that won (first in row-major scan order on ties).
pub fn maxpool2_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = input.dims3("maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(DtnError::dim(
            "maxpool2",
            format!("extents must be even, got {h}x{w}"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[ho, wo, c]);
    let mut arg = vec![0; ho * wo * c];
    let x = input.data();
    for n in 0..ho {
        for m in 0..wo {
            for ch in 0..c {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * n + dy) * w + 2 * m + dx) * c + ch;
                    if best == usize::MAX || x[idx] > best_v {
                        best = idx;
                        best_v = x[idx];
                    }
                }
                let o = (n * wo + m) * c + ch;
                out.data_mut()[o] = best_v;
                arg[o] = best;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward(
    input_shape: &[usize],
    argmax: &[usize],
    d_out: &Tensor,
) -> Result<Tensor> {
    if d_out.len() != argmax.len() {
        return Err(DtnError::dim(
            "maxpool2_backward",
            format!(
                "{} gradients for {} pooled outputs",
                d_out.len(),
                argmax.len()
            ),
        ));
    }
    let mut d_in = Tensor::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(d_out.data()) {
        d_in.data_mut()[idx] += g;
    }
    Ok(d_in)
}

#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2 {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, arg) = maxpool2_forward(x)?;
        self.cache = Some((x.shape().to_vec(), arg));
        Ok(y)
    }

    pub fn backward(&mut self, d_out: &Tensor) -> Result<Tensor> {
        let (shape, arg) = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_cache("maxpool2"))?;
        maxpool2_backward(shape, arg, d_out)
    }

    /// Hashes the argmax routing of the last forward pass.
    pub fn hash_pattern(&self, state: &mut impl Hasher) {
        if let Some((_, arg)) = &self.cache {
            arg.hash(state);
        }
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward(input: &Tensor) -> Result<Tensor> {
    let (h, w, c) = input.dims3("upsample2")?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[ho, wo, c]);
    for n in 0..ho {
        for m in 0..wo {
            let src = &input.data()[((n / 2) * w + m / 2) * c..][..c];
            out.data_mut()[(n * wo + m) * c..][..c].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Sums each 2x2 block of the gradient.
pub fn upsample2_backward(d_out: &Tensor) -> Result<Tensor> {
    let (ho, wo, c) = d_out.dims3("upsample2_backward")?;
    if ho % 2 != 0 || wo % 2 != 0 {
        return Err(DtnError::dim(
            "upsample2_backward",
            format!("gradient extents must be even, got {ho}x{wo}"),
        ));
    }
    let (h, w) = (ho / 2, wo / 2);
    let mut d_in = Tensor::zeros(&[h, w, c]);
    for n in 0..ho {
        for m in 0..wo {
            for ch in 0..c {
                d_in.data_mut()[((n / 2) * w + m / 2) * c + ch] += d_out.at3(n, m, ch);
            }
        }
    }
    Ok(d_in)
}

// ---------------------------------------------------------------------------
// activations

#[derive(Clone, Debug, Default)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = x.map(|v| v.max(0.0));
        self.cache = Some(y.clone());
        y
    }

    pub fn backward(&mut self, d_out: &Tensor) -> Result<Tensor> {
        let y = self.cache.as_ref().ok_or_else(|| missing_cache("relu"))?;
        relu_backward(y, d_out)
    }

    /// Hashes the on/off mask of the last forward pass.
    pub fn hash_pattern(&self, state: &mut impl Hasher) {
        if let Some(y) = &self.cache {
            for v in y.data() {
                (*v > 0.0).hash(state);
            }
        }
    }
}

pub fn relu_backward(output: &Tensor, d_out: &Tensor) -> Result<Tensor> {
    let mask = output.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    d_out.mul(&mask)
}

// ---------------------------------------------------------------------------
// fully connected

/// `y = x W + b` over the flattened input, optionally followed by `tanh`.
pub fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, tanh: bool) -> Result<Tensor> {
    let (d, m) = weight.dims2("dense")?;
    if input.len() != d || bias.shape() != [m] {
        return Err(DtnError::dim(
            "dense",
            format!(
                "input of {} values, weights {:?}, bias {:?}",
                input.len(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    let mut y = bias.data().to_vec();
    for (i, &xv) in input.data().iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, &wv) in y.iter_mut().zip(&weight.data()[i * m..(i + 1) * m]) {
            *o += xv * wv;
        }
    }
    if tanh {
        y.iter_mut().for_each(|v| *v = v.tanh());
    }
    Tensor::new(&[m], y)
}

/// Returns `(d_input, d_weight, d_bias)`; `output` is what [`dense_forward`] produced.
pub fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    output: &Tensor,
    d_out: &Tensor,
    tanh: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (d, m) = weight.dims2("dense_backward")?;
    if d_out.len() != m || output.len() != m || input.len() != d {
        return Err(DtnError::dim(
            "dense_backward",
            format!("gradient of {} values for a {d}x{m} layer", d_out.len()),
        ));
    }
    let d_pre: Vec<f64> = if tanh {
        d_out
            .data()
            .iter()
            .zip(output.data())
            .map(|(&g, &y)| g * (1.0 - y * y))
            .collect()
    } else {
        d_out.data().to_vec()
    };
    let mut d_w = Tensor::zeros(&[d, m]);
    let mut d_in = vec![0.0; d];
    for (i, &xv) in input.data().iter().enumerate() {
        let wrow = &weight.data()[i * m..(i + 1) * m];
        let dwrow = &mut d_w.data_mut()[i * m..(i + 1) * m];
        let mut acc = 0.0;
        for j in 0..m {
            dwrow[j] = xv * d_pre[j];
            acc += wrow[j] * d_pre[j];
        }
        d_in[i] = acc;
    }
    Ok((
        Tensor::new(input.shape(), d_in)?,
        d_w,
        Tensor::new(&[m], d_pre)?,
    ))
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
    pub tanh: bool,
    cache: Option<(Tensor, Tensor)>,
}

impl Dense {
    pub fn new(d: usize, m: usize, tanh: bool, rng: &mut impl Rng) -> Self {
        Self::from_params(
            glorot_uniform(&[d, m], d, m, rng),
            Tensor::zeros(&[m]),
            tanh,
        )
    }

    pub fn from_params(weight: Tensor, bias: Tensor, tanh: bool) -> Self {
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            tanh,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = dense_forward(x, &self.weight.value, &self.bias.value, self.tanh)?;
        self.cache = Some((x.clone(), y.clone()));
        Ok(y)
    }

    pub fn backward(&mut self, d_out: &Tensor) -> Result<Tensor> {
        let (x, y) = self.cache.as_ref().ok_or_else(|| missing_cache("dense"))?;
        let (d_in, d_w, d_b) = dense_backward(x, &self.weight.value, y, d_out, self.tanh)?;
        self.weight.grad.add_assign(&d_w)?;
        self.bias.grad.add_assign(&d_b)?;
        Ok(d_in)
    }
}

// ---------------------------------------------------------------------------
// layer enum and sequential stacks

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    MaxPool(MaxPool2),
    Upsample,
    Dense(Dense),
    Relu(Relu),
}

impl Layer {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::MaxPool(l) => l.forward(x),
            Layer::Upsample => upsample2_forward(x),
            Layer::Dense(l) => l.forward(x),
            Layer::Relu(l) => Ok(l.forward(x)),
        }
    }

    pub fn backward(&mut self, d_out: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.backward(d_out),
            Layer::MaxPool(l) => l.backward(d_out),
            Layer::Upsample => upsample2_backward(d_out),
            Layer::Dense(l) => l.backward(d_out),
            Layer::Relu(l) => l.backward(d_out),
        }
    }

    pub fn hash_pattern(&self, state: &mut impl Hasher) {
        match self {
            Layer::MaxPool(l) => l.hash_pattern(state),
            Layer::Relu(l) => l.hash_pattern(state),
            _ => {}
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        match self {
            Layer::Conv(Conv2d { weight, bias, .. }) | Layer::Dense(Dense { weight, bias, .. }) => {
                vec![("weight", weight), ("bias", bias)]
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for l in &mut self.layers {
            cur = l.forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn backward(&mut self, d_out: &Tensor) -> Result<Tensor> {
        let mut g = d_out.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    pub fn hash_pattern(&self, state: &mut impl Hasher) {
        self.layers.iter().for_each(|l| l.hash_pattern(state));
    }

    /// Parameters named `"{index}.{weight|bias}"`.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params_mut()
                    .into_iter()
                    .map(move |(name, p)| (format!("{i}.{name}"), p))
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// channel concatenation for skip connections

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (h, w, ca) = a.dims3("concat_channels")?;
    let (hb, wb, cb) = b.dims3("concat_channels")?;
    if (h, w) != (hb, wb) {
        return Err(DtnError::dim(
            "concat_channels",
            format!("{:?} and {:?} differ spatially", a.shape(), b.shape()),
        ));
    }
    let mut out = Vec::with_capacity(h * w * (ca + cb));
    for (pa, pb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        out.extend_from_slice(pa);
        out.extend_from_slice(pb);
    }
    Tensor::new(&[h, w, ca + cb], out)
}

/// Inverse of [`concat_channels`]: splits off the first `ca` channels.
pub fn split_channels(x: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    let (h, w, c) = x.dims3("split_channels")?;
    if ca == 0 || ca >= c {
        return Err(DtnError::dim(
            "split_channels",
            format!("cannot split {c} channels at {ca}"),
        ));
    }
    let mut a = Vec::with_capacity(h * w * ca);
    let mut b = Vec::with_capacity(h * w * (c - ca));
    for px in x.data().chunks_exact(c) {
        a.extend_from_slice(&px[..ca]);
        b.extend_from_slice(&px[ca..]);
    }
    Ok((
        Tensor::new(&[h, w, ca], a)?,
        Tensor::new(&[h, w, c - ca], b)?,
    ))
}

// ---------------------------------------------------------------------------
// loss

/// Mean per-pixel softmax cross-entropy and its gradient
/// `(softmax - onehot) / (H * W)`.
pub fn softmax_xent(logits: &Tensor, labels: &LabelMap) -> Result<(f64, Tensor)> {
    let (h, w, l) = logits.dims3("softmax_xent")?;
    if (labels.height(), labels.width()) != (h, w) {
        return Err(DtnError::dim(
            "softmax_xent",
            format!(
                "logits are {h}x{w} but labels are {}x{}",
                labels.height(),
                labels.width()
            ),
        ));
    }
    let count = (h * w) as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (i, (z, g)) in logits
        .data()
        .chunks_exact(l)
        .zip(grad.data_mut().chunks_exact_mut(l))
        .enumerate()
    {
        let y = labels.ids()[i];
        if y >= l {
            return Err(DtnError::Data(format!(
                "label {y} at pixel ({}, {}) is out of range for {l} classes",
                i / w,
                i % w
            )));
        }
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|&v| (v - zmax).exp()).sum();
        let log_sum = sum.ln() + zmax;
        loss += log_sum - z[y];
        for (j, (gv, &zv)) in g.iter_mut().zip(z).enumerate() {
            let p = (zv - log_sum).exp();
            *gv = (p - if j == y { 1.0 } else { 0.0 }) / count;
        }
    }
    Ok((loss / count, grad))
}

/// Per-pixel softmax probabilities.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, _, l) = logits.dims3("softmax")?;
    let mut out = logits.clone();
    for z in out.data_mut().chunks_exact_mut(l) {
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in z.iter_mut() {
            *v = (*v - zmax).exp();
            sum += *v;
        }
        z.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(out)
}

/// Per-pixel argmax class ids.
pub fn argmax_labels(logits: &Tensor) -> Result<LabelMap> {
    let (h, w, l) = logits.dims3("argmax_labels")?;
    let ids = logits
        .data()
        .chunks_exact(l)
        .map(|z| {
            z.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect();
    LabelMap::new(h, w, ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn(&[4, 5, 2], |i| (i as f64).sin());
        let mut w = Tensor::zeros(&[3, 3, 2, 2]);
        // center tap, channel c -> c
        for c in 0..2 {
            w.data_mut()[(4 * 2 + c) * 2 + c] = 1.0;
        }
        let y = conv2d_forward(&x, &w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_all_ones_counts_taps() {
        let x = Tensor::full(&[5, 5, 1], 1.0);
        let w = Tensor::full(&[3, 3, 1, 1], 1.0);
        let y = conv2d_forward(&x, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.shape(), &[5, 5, 1]);
        assert_eq!(y.at3(2, 2, 0), 9.0);
        assert_eq!(y.at3(0, 0, 0), 4.0);
        assert_eq!(y.at3(0, 2, 0), 6.0);
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[4, 4, 2]);
        let w = Tensor::zeros(&[3, 3, 3, 1]);
        assert!(matches!(
            conv2d_forward(&x, &w, &Tensor::zeros(&[1])),
            Err(DtnError::Dimension { .. })
        ));
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        let x = Tensor::full(&[4, 4, 1], 2.0);
        let mut pool = MaxPool2::default();
        pool.forward(&x).unwrap();
        let d = pool.backward(&Tensor::full(&[2, 2, 1], 1.0)).unwrap();
        let expected: Vec<f64> = (0..16)
            .map(|i| {
                if (i / 4) % 2 == 0 && (i % 4) % 2 == 0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        assert_eq!(d.data(), &expected[..]);

        assert!(maxpool2_forward(&Tensor::zeros(&[3, 4, 1])).is_err());
    }

    #[test]
    fn upsample_examples() {
        let x = Tensor::full(&[1, 1, 1], 5.0);
        assert_eq!(upsample2_forward(&x).unwrap().data(), &[5.0; 4]);
        assert_eq!(
            upsample2_backward(&Tensor::full(&[2, 2, 1], 1.0))
                .unwrap()
                .data(),
            &[4.0]
        );
    }

    #[test]
    fn dense_examples() {
        let x = Tensor::new(&[3], vec![0.3, -1.0, 2.0]).unwrap();
        let y = dense_forward(&x, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[2]), true).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        let y = dense_forward(&x, &Tensor::eye(3), &Tensor::zeros(&[3]), false).unwrap();
        assert_eq!(y, x);
        assert!(dense_forward(&x, &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2]), false).is_err());
    }

    #[test]
    fn tanh_dense_stays_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = Dense::new(10, 6, true, &mut rng);
        let x = Tensor::from_fn(&[10], |i| (i as f64 - 5.0) * 0.8);
        for v in d.forward(&x).unwrap().data() {
            assert!(v.abs() < 1.0);
        }
    }

    #[test]
    fn xent_examples() {
        let labels = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let (loss, _) = softmax_xent(&Tensor::zeros(&[2, 2, 2]), &labels).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-4);

        let logits = Tensor::from_fn(&[2, 2, 2], |i| {
            let (pix, c) = (i / 2, i % 2);
            if c == labels.ids()[pix] {
                1e3
            } else {
                0.0
            }
        });
        let (loss, _) = softmax_xent(&logits, &labels).unwrap();
        assert!(loss.abs() < 1e-12);

        let bad = LabelMap::new(2, 2, vec![0, 2, 1, 0]).unwrap();
        let err = softmax_xent(&Tensor::zeros(&[2, 2, 2]), &bad)
            .unwrap_err()
            .to_string();
        assert!(err.contains("(0, 1)"), "{err}");
    }

    #[test]
    fn sgd_examples() {
        let cfg = SgdConfig::new(0.0, 0).unwrap();
        let mut p = vec![Tensor::full(&[2], 1.0)];
        sgd_step(&mut p, &[Tensor::full(&[2], 5.0)], &cfg).unwrap();
        assert_eq!(p[0].data(), &[1.0, 1.0]);

        let cfg = SgdConfig::new(0.1, 0).unwrap();
        let mut p = vec![Tensor::full(&[1], 1.0)];
        sgd_step(&mut p, &[Tensor::full(&[1], 2.0)], &cfg).unwrap();
        assert!((p[0].data()[0] - 0.8).abs() < 1e-15);

        // minimise p², lr 0.5: 1 -> 0 -> 0
        let cfg = SgdConfig::new(0.5, 0).unwrap();
        let mut p = vec![Tensor::full(&[1], 1.0)];
        let mut seq = vec![p[0].data()[0]];
        for _ in 0..2 {
            let g = p[0].scale(2.0);
            sgd_step(&mut p, &[g], &cfg).unwrap();
            seq.push(p[0].data()[0]);
        }
        assert_eq!(seq, vec![1.0, 0.0, 0.0]);

        assert!(sgd_step(&mut p, &[Tensor::zeros(&[2])], &cfg).is_err());
        assert!(SgdConfig::new(-1.0, 0).is_err());
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = Conv2d::new(3, 1, 1, &mut rng);
        assert!(c.backward(&Tensor::zeros(&[2, 2, 1])).is_err());
        let mut r = Relu::default();
        assert!(r.backward(&Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn concat_split_inverse() {
        let a = Tensor::from_fn(&[2, 3, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 3, 3], |i| -(i as f64));
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape(), &[2, 3, 5]);
        let (a2, b2) = split_channels(&ab, 2).unwrap();
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn conv_preserves_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (h, w) in [(1, 1), (3, 7), (8, 8)] {
            let mut c = Conv2d::new(3, 2, 4, &mut rng);
            let y = c.forward(&Tensor::zeros(&[h, w, 2])).unwrap();
            assert_eq!(y.shape(), &[h, w, 4]);
        }
    }
}
