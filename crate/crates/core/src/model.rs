//! U-Net baseline and the dense transformer network built on top of it.
//!
//! The transformer pair lives at one encoder level. On the way down, the
//! level's input goes through the localization network, a TPS transform is
//! fitted, and the map is gather-sampled through the mapped grid. On the way
//! up, the matching decoder output is scatter-sampled back through the *same*
//! grid and its holes filled, so everything above that level is in the
//! original geometry again.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DtnError, Result};
use crate::nn::{
    concat_channels, sgd_update, softmax_xent, split_channels, upsample2_backward,
    upsample2_forward, Conv2d, Dense, Layer, MaxPool2, Param, Relu, Sequential, SgdConfig,
};
use crate::samplers::{
    fill_holes, gather_backward, gather_forward, scatter_backward, scatter_forward, ScatterResult,
};
use crate::tensor::{LabelMap, Tensor};
use crate::tps::{
    build_delta, build_transform, regular_fiducials, transform_backward, DeltaMatrix, FiducialSet,
    LiftedGrid, MappedGrid, Point, TpsTransform,
};

/// How close the initial localization outputs get to `±1`. `atanh(±1)` is
/// infinite, so boundary fiducials start at `±(1 - margin)`.
pub const LOC_SATURATION_MARGIN: f64 = 1e-9;

const LOC_STREAM: u64 = 0x6c6f_635f_6e65_7400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Unet,
    Dtn,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Unet => "unet",
            ModelKind::Dtn => "dtn",
        })
    }
}

impl FromStr for ModelKind {
    type Err = DtnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(ModelKind::Unet),
            "dtn" => Ok(ModelKind::Dtn),
            other => Err(DtnError::Config(format!(
                "unknown model kind {other:?} (expected unet or dtn)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub kind: ModelKind,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub levels: usize,
    pub channels: Vec<usize>,
    pub k_fiducials: usize,
    pub insert_level: usize,
    pub loc_channels: usize,
    pub loc_hidden: usize,
}

impl NetConfig {
    /// Three levels with `[8, 16, 32]` channels, 16 fiducials, transformer
    /// pair at the deepest level.
    pub fn desk(kind: ModelKind, height: usize, width: usize) -> Self {
        Self {
            kind,
            height,
            width,
            in_channels: 1,
            classes: 2,
            levels: 3,
            channels: vec![8, 16, 32],
            k_fiducials: 16,
            insert_level: 2,
            loc_channels: 8,
            loc_hidden: 32,
        }
    }

    pub fn level_extent(&self, level: usize) -> (usize, usize) {
        (self.height >> level, self.width >> level)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DtnError::Config(msg));
        if self.levels == 0 || self.channels.len() != self.levels {
            return fail(format!(
                "channels has {} entries for {} levels",
                self.channels.len(),
                self.levels
            ));
        }
        if self.channels.contains(&0) || self.in_channels == 0 || self.classes < 2 {
            return fail("channel and class counts must be positive (classes >= 2)".into());
        }
        let div = 1usize << (self.levels - 1);
        if !self.height.is_multiple_of(div)
            || !self.width.is_multiple_of(div)
            || self.height < div
            || self.width < div
        {
            return fail(format!(
                "input {}x{} is not divisible by 2^(levels-1) = {div}",
                self.height, self.width
            ));
        }
        if self.insert_level >= self.levels {
            return fail(format!(
                "insert_level {} must be below levels {}",
                self.insert_level, self.levels
            ));
        }
        regular_fiducials(self.k_fiducials)?;
        if self.kind == ModelKind::Dtn {
            let (h, w) = self.level_extent(self.insert_level);
            if h < 4 || w < 4 || h % 4 != 0 || w % 4 != 0 {
                return fail(format!(
                    "transformer level {} is {h}x{w}; the localization network needs extents divisible by 4",
                    self.insert_level
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    a: Conv2d,
    ra: Relu,
    b: Conv2d,
    rb: Relu,
}

impl ConvBlock {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: Conv2d::new(3, cin, cout, rng),
            ra: Relu::default(),
            b: Conv2d::new(3, cout, cout, rng),
            rb: Relu::default(),
        }
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.ra.forward(&self.a.forward(x)?);
        Ok(self.rb.forward(&self.b.forward(&y)?))
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let g = self.b.backward(&self.rb.backward(g)?)?;
        self.a.backward(&self.ra.backward(&g)?)
    }

    fn hash_pattern(&self, state: &mut impl Hasher) {
        self.ra.hash_pattern(state);
        self.rb.hash_pattern(state);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((format!("{prefix}.a.weight"), &mut self.a.weight));
        out.push((format!("{prefix}.a.bias"), &mut self.a.bias));
        out.push((format!("{prefix}.b.weight"), &mut self.b.weight));
        out.push((format!("{prefix}.b.bias"), &mut self.b.bias));
    }
}

/// Localization network plus the fixed TPS machinery and per-pass caches.
#[derive(Clone, Debug)]
struct TransformerPair {
    loc: Sequential,
    delta: DeltaMatrix,
    lifted: LiftedGrid,
    extent: (usize, usize),
    frozen: bool,
    enc_input: Option<Tensor>,
    transform: Option<TpsTransform>,
    grid: Option<MappedGrid>,
    dec_input: Option<(Tensor, ScatterResult)>,
    d_coords_dec: Option<Vec<Point>>,
}

impl TransformerPair {
    fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (h, w) = cfg.level_extent(cfg.insert_level);
        let c = cfg.channels[cfg.insert_level.saturating_sub(1)];
        let cin = if cfg.insert_level == 0 {
            cfg.in_channels
        } else {
            c
        };
        let lc = cfg.loc_channels;
        let k = cfg.k_fiducials;
        let f_out = regular_fiducials(k)?;
        let flat = (h / 4) * (w / 4) * lc;

        let mut head = Dense::new(cfg.loc_hidden, 2 * k, true, rng);
        head.weight.value = Tensor::zeros(&[cfg.loc_hidden, 2 * k]);
        head.bias.value = identity_bias(&f_out);

        let loc = Sequential::new(vec![
            Layer::Conv(Conv2d::new(3, cin, lc, rng)),
            Layer::Relu(Relu::default()),
            Layer::MaxPool(MaxPool2::default()),
            Layer::Conv(Conv2d::new(3, lc, lc, rng)),
            Layer::Relu(Relu::default()),
            Layer::MaxPool(MaxPool2::default()),
            Layer::Dense(Dense::new(flat, cfg.loc_hidden, false, rng)),
            Layer::Relu(Relu::default()),
            Layer::Dense(head),
        ]);
        Ok(Self {
            loc,
            delta: build_delta(&f_out)?,
            lifted: LiftedGrid::new(&f_out, h, w)?,
            extent: (h, w),
            frozen: false,
            enc_input: None,
            transform: None,
            grid: None,
            dec_input: None,
            d_coords_dec: None,
        })
    }

    fn localize(&mut self, x: &Tensor) -> Result<Vec<Point>> {
        let raw = self.loc.forward(x)?;
        fiducials_from_outputs(&raw, self.delta.k())
    }

    fn encode(&mut self, x: &Tensor) -> Result<Tensor> {
        let f_in = self.localize(x)?;
        let t = build_transform(&f_in, &self.delta)?;
        let (h, w) = self.extent;
        let grid = self.lifted.map(&t, h, w)?;
        let v = gather_forward(x, &grid)?;
        self.enc_input = Some(x.clone());
        self.transform = Some(t);
        self.grid = Some(grid);
        self.d_coords_dec = None;
        Ok(v)
    }

    fn decode(&mut self, x: &Tensor) -> Result<Tensor> {
        let grid = self.grid.as_ref().ok_or_else(|| stale("decoder sampler"))?;
        let (h, w) = self.extent;
        let r = scatter_forward(x, grid, h, w)?;
        let out = fill_holes(&r);
        self.dec_input = Some((x.clone(), r));
        Ok(out)
    }

    fn decode_backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let grid = self.grid.as_ref().ok_or_else(|| stale("decoder sampler"))?;
        let (v, r) = self
            .dec_input
            .as_ref()
            .ok_or_else(|| stale("decoder sampler"))?;
        let (d_v, d_coords) = scatter_backward(v, grid, r, g)?;
        self.d_coords_dec = Some(d_coords);
        Ok(d_v)
    }

    fn encode_backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let grid = self.grid.as_ref().ok_or_else(|| stale("encoder sampler"))?;
        let x = self
            .enc_input
            .as_ref()
            .ok_or_else(|| stale("encoder sampler"))?;
        let (mut d_x, mut d_coords) = gather_backward(x, grid, g)?;
        if let Some(dec) = &self.d_coords_dec {
            for (a, b) in d_coords.iter_mut().zip(dec) {
                a.x += b.x;
                a.y += b.y;
            }
        }
        let (h, w) = self.extent;
        let d_t = self.lifted.backward(&d_coords, h, w)?;
        let d_f = transform_backward(&d_t, &self.delta)?;
        let flat: Vec<f64> = d_f.iter().flat_map(|p| [p.x, p.y]).collect();
        let d_loc = self.loc.backward(&Tensor::new(&[flat.len()], flat)?)?;
        d_x.add_assign(&d_loc)?;
        Ok(d_x)
    }
}

fn stale(what: &str) -> DtnError {
    DtnError::Config(format!("{what}: backward called before forward"))
}

/// Bias that makes a zero-weight tanh layer output the regular lattice.
fn identity_bias(f_out: &[Point]) -> Tensor {
    let lim = 1.0 - LOC_SATURATION_MARGIN;
    let data = f_out
        .iter()
        .flat_map(|p| [p.x, p.y])
        .map(|v| v.clamp(-lim, lim).atanh())
        .collect();
    Tensor::new(&[2 * f_out.len()], data).expect("non-empty")
}

/// Pairs `2K` localization outputs into `K` points, `[x0, y0, x1, y1, ...]`.
pub fn fiducials_from_outputs(raw: &Tensor, k: usize) -> Result<Vec<Point>> {
    if raw.len() != 2 * k {
        return Err(DtnError::Config(format!(
            "localization network emits {} values, expected 2K = {}",
            raw.len(),
            2 * k
        )));
    }
    Ok(raw
        .data()
        .chunks_exact(2)
        .map(|c| Point::new(c[0], c[1]))
        .collect())
}

/// Runs a localization stack and packages its output with the fixed lattice.
pub fn localization_forward(u: &Tensor, loc_net: &mut Sequential, k: usize) -> Result<FiducialSet> {
    let raw = loc_net.forward(u)?;
    FiducialSet::new(regular_fiducials(k)?, fiducials_from_outputs(&raw, k)?)
}

/// Encoder-decoder segmentation network, optionally carrying the transformer pair.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetConfig,
    enc: Vec<ConvBlock>,
    pools: Vec<MaxPool2>,
    up: Vec<(Conv2d, Relu)>,
    dec: Vec<ConvBlock>,
    head: Conv2d,
    transformer: Option<TransformerPair>,
}

impl Network {
    /// Shared U-Net weights come from one seeded stream and the localization
    /// network from another, so a U-Net and a DTN built with the same seed
    /// have identical shared weights.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = &config.channels;
        let levels = config.levels;
        let enc = (0..levels)
            .map(|l| {
                let cin = if l == 0 {
                    config.in_channels
                } else {
                    ch[l - 1]
                };
                ConvBlock::new(cin, ch[l], &mut rng)
            })
            .collect();
        let pools = (1..levels).map(|_| MaxPool2::default()).collect();
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in 0..levels - 1 {
            up.push((Conv2d::new(3, ch[l + 1], ch[l], &mut rng), Relu::default()));
            dec.push(ConvBlock::new(2 * ch[l], ch[l], &mut rng));
        }
        let head = Conv2d::new(1, ch[0], config.classes, &mut rng);
        let transformer = match config.kind {
            ModelKind::Unet => None,
            ModelKind::Dtn => {
                let mut loc_rng = ChaCha8Rng::seed_from_u64(seed ^ LOC_STREAM);
                Some(TransformerPair::new(&config, &mut loc_rng)?)
            }
        };
        Ok(Self {
            config,
            enc,
            pools,
            up,
            dec,
            head,
            transformer,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Frozen localization parameters still receive gradients but are not updated.
    pub fn set_localization_frozen(&mut self, frozen: bool) {
        if let Some(t) = &mut self.transformer {
            t.frozen = frozen;
        }
    }

    /// Transform produced by the most recent forward pass (DTN only).
    pub fn shared_transform(&self) -> Option<&TpsTransform> {
        self.transformer.as_ref().and_then(|t| t.transform.as_ref())
    }

    pub fn shared_grid(&self) -> Option<&MappedGrid> {
        self.transformer.as_ref().and_then(|t| t.grid.as_ref())
    }

    /// Holes left by the decoder sampler in the most recent forward pass.
    pub fn last_hole_count(&self) -> Option<usize> {
        self.transformer
            .as_ref()
            .and_then(|t| t.dec_input.as_ref())
            .map(|(_, r)| r.hole_count())
    }

    pub fn delta(&self) -> Option<&DeltaMatrix> {
        self.transformer.as_ref().map(|t| &t.delta)
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (h, w, c) = image.dims3("Network::forward")?;
        if (h, w, c)
            != (
                self.config.height,
                self.config.width,
                self.config.in_channels,
            )
        {
            return Err(DtnError::Config(format!(
                "network was built for {}x{}x{} inputs, got {h}x{w}x{c}",
                self.config.height, self.config.width, self.config.in_channels
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, image: &Tensor) -> Result<Tensor> {
        self.check_image(image)?;
        let levels = self.config.levels;
        let insert = self.config.insert_level;
        let mut skips = Vec::with_capacity(levels);
        let mut x = image.clone();
        for l in 0..levels {
            if l > 0 {
                x = self.pools[l - 1].forward(&x)?;
            }
            if l == insert {
                if let Some(t) = &mut self.transformer {
                    x = t.encode(&x)?;
                }
            }
            x = self.enc[l].forward(&x)?;
            if l + 1 < levels {
                skips.push(x.clone());
            }
        }
        if insert == levels - 1 {
            if let Some(t) = &mut self.transformer {
                x = t.decode(&x)?;
            }
        }
        for l in (0..levels - 1).rev() {
            let (conv, relu) = &mut self.up[l];
            let u = relu.forward(&conv.forward(&upsample2_forward(&x)?)?);
            x = self.dec[l].forward(&concat_channels(&skips[l], &u)?)?;
            if l == insert {
                if let Some(t) = &mut self.transformer {
                    x = t.decode(&x)?;
                }
            }
        }
        self.head.forward(&x)
    }

    /// Backpropagates `d_logits`, accumulating parameter gradients. Returns
    /// the gradient with respect to the input image.
    #[allow(clippy::needless_range_loop)]
    pub fn backward(&mut self, d_logits: &Tensor) -> Result<Tensor> {
        let levels = self.config.levels;
        let insert = self.config.insert_level;
        let mut g = self.head.backward(d_logits)?;
        let mut skip_grads = vec![None; levels];
        for l in 0..levels - 1 {
            if l == insert {
                if let Some(t) = &mut self.transformer {
                    g = t.decode_backward(&g)?;
                }
            }
            g = self.dec[l].backward(&g)?;
            let (gs, gu) = split_channels(&g, self.config.channels[l])?;
            skip_grads[l] = Some(gs);
            let (conv, relu) = &mut self.up[l];
            g = upsample2_backward(&conv.backward(&relu.backward(&gu)?)?)?;
        }
        if insert == levels - 1 {
            if let Some(t) = &mut self.transformer {
                g = t.decode_backward(&g)?;
            }
        }
        for l in (0..levels).rev() {
            if let Some(gs) = skip_grads[l].take() {
                g.add_assign(&gs)?;
            }
            g = self.enc[l].backward(&g)?;
            if l == insert {
                if let Some(t) = &mut self.transformer {
                    g = t.encode_backward(&g)?;
                }
            }
            if l > 0 {
                g = self.pools[l - 1].backward(&g)?;
            }
        }
        Ok(g)
    }

    /// Hash of every piecewise-linear branch taken in the last forward pass:
    /// relu masks, max-pool winners, and the sampler cells each mapped point
    /// falls in. Two passes with equal patterns lie on the same smooth piece.
    pub fn activation_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for b in self.enc.iter().chain(&self.dec) {
            b.hash_pattern(&mut h);
        }
        for p in &self.pools {
            p.hash_pattern(&mut h);
        }
        for (_, r) in &self.up {
            r.hash_pattern(&mut h);
        }
        if let Some(t) = &self.transformer {
            t.loc.hash_pattern(&mut h);
            if let Some(g) = &t.grid {
                for p in &g.coords {
                    (p.x.floor() as i64, p.y.floor() as i64).hash(&mut h);
                }
            }
            if let Some((_, r)) = &t.dec_input {
                r.holes.hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn loss(&mut self, image: &Tensor, labels: &LabelMap) -> Result<f64> {
        let logits = self.forward(image)?;
        Ok(softmax_xent(&logits, labels)?.0)
    }

    /// Forward + backward without updating parameters; gradients are reset first.
    pub fn compute_gradients(&mut self, image: &Tensor, labels: &LabelMap) -> Result<f64> {
        self.zero_grad();
        let logits = self.forward(image)?;
        let (loss, d_logits) = softmax_xent(&logits, labels)?;
        self.backward(&d_logits)?;
        Ok(loss)
    }

    /// One SGD step; returns the loss before the update.
    pub fn train_step(
        &mut self,
        image: &Tensor,
        labels: &LabelMap,
        cfg: &SgdConfig,
    ) -> Result<f64> {
        let loss = self.compute_gradients(image, labels)?;
        let frozen = self.transformer.as_ref().is_some_and(|t| t.frozen);
        for (name, p) in self.named_params_mut() {
            if frozen && name.starts_with("loc.") {
                continue;
            }
            sgd_update(p, cfg);
        }
        Ok(loss)
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    /// All parameters in a fixed order with stable names.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (l, b) in self.enc.iter_mut().enumerate() {
            b.params_mut(&format!("enc.{l}"), &mut out);
        }
        for (l, ((conv, _), b)) in self.up.iter_mut().zip(self.dec.iter_mut()).enumerate() {
            out.push((format!("up.{l}.weight"), &mut conv.weight));
            out.push((format!("up.{l}.bias"), &mut conv.bias));
            b.params_mut(&format!("dec.{l}"), &mut out);
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        if let Some(t) = &mut self.transformer {
            for (name, p) in t.loc.named_params_mut() {
                out.push((format!("loc.{name}"), p));
            }
        }
        out
    }

    pub fn named_tensors(&mut self) -> Vec<(String, Tensor)> {
        self.named_params_mut()
            .into_iter()
            .map(|(n, p)| (n, p.value.clone()))
            .collect()
    }

    pub fn param_count(&mut self) -> usize {
        self.named_params_mut()
            .iter()
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Replaces parameter values by name; every parameter must be supplied
    /// with a matching shape.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let mut params = self.named_params_mut();
        if params.len() != tensors.len() {
            return Err(DtnError::Checkpoint(format!(
                "network has {} parameter tensors, checkpoint has {}",
                params.len(),
                tensors.len()
            )));
        }
        for ((name, p), (tname, t)) in params.iter_mut().zip(tensors) {
            if name != tname {
                return Err(DtnError::Checkpoint(format!(
                    "expected parameter {name}, found {tname}"
                )));
            }
            if p.value.shape() != t.shape() {
                return Err(DtnError::Checkpoint(format!(
                    "parameter {name}: shape {:?} in checkpoint, {:?} in network",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    /// Fiducials predicted for `image` (DTN only): runs the encoder up to the
    /// transformer level.
    pub fn predict_fiducials(&mut self, image: &Tensor) -> Result<Option<FiducialSet>> {
        self.check_image(image)?;
        let insert = self.config.insert_level;
        let Some(_) = self.transformer else {
            return Ok(None);
        };
        let mut x = image.clone();
        for l in 0..insert {
            x = self.enc[l].forward(&x)?;
            x = self.pools[l].forward(&x)?;
        }
        let t = self.transformer.as_mut().expect("checked above");
        let f_in = t.localize(&x)?;
        Ok(Some(FiducialSet::new(t.delta.f_out().to_vec(), f_in)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        Tensor::from_fn(&[h, w, 1], |i| ((i as f64 + seed as f64) * 0.618).fract())
    }

    fn labels(h: usize, w: usize) -> LabelMap {
        LabelMap::new(
            h,
            w,
            (0..h * w)
                .map(|i| usize::from((i / w + i % w).is_multiple_of(5)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = NetConfig::desk(ModelKind::Dtn, 32, 32);
        assert!(c.validate().is_ok());
        c.height = 30;
        assert!(c.validate().is_err());
        let mut c = NetConfig::desk(ModelKind::Dtn, 8, 8);
        assert!(c.validate().is_err(), "2x2 transformer level is too small");
        c.kind = ModelKind::Unet;
        assert!(c.validate().is_ok());
        let mut c = NetConfig::desk(ModelKind::Dtn, 32, 32);
        c.insert_level = 3;
        assert!(c.validate().is_err());
        c.insert_level = 1;
        c.k_fiducials = 10;
        assert!(c.validate().is_err());
    }

    #[test]
    fn logits_shape() {
        let mut net = Network::new(NetConfig::desk(ModelKind::Dtn, 32, 32), 1).unwrap();
        let y = net.forward(&image(32, 32, 0)).unwrap();
        assert_eq!(y.shape(), &[32, 32, 2]);
        assert!(net.forward(&image(16, 16, 0)).is_err());
    }

    #[test]
    fn identity_initialization() {
        let mut net = Network::new(NetConfig::desk(ModelKind::Dtn, 16, 16), 4).unwrap();
        let f = net.predict_fiducials(&image(16, 16, 2)).unwrap().unwrap();
        for (a, b) in f.f_in.iter().zip(&f.f_out) {
            assert!(a.x.abs() < 1.0 && a.y.abs() < 1.0);
            assert!((a.x - b.x).abs() <= 2e-9 && (a.y - b.y).abs() <= 2e-9);
        }
    }

    #[test]
    fn dtn_reduces_to_unet_at_identity() {
        for insert in 0..3 {
            let mut cu = NetConfig::desk(ModelKind::Unet, 16, 16);
            cu.insert_level = insert;
            let mut cd = cu.clone();
            cd.kind = ModelKind::Dtn;
            if cd.validate().is_err() {
                continue;
            }
            let mut unet = Network::new(cu, 11).unwrap();
            let mut dtn = Network::new(cd, 11).unwrap();
            let x = image(16, 16, 5);
            let a = unet.forward(&x).unwrap();
            let b = dtn.forward(&x).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-6, "insert level {insert}");
        }
    }

    #[test]
    fn loc_net_receives_gradient() {
        let mut net = Network::new(NetConfig::desk(ModelKind::Dtn, 16, 16), 2).unwrap();
        net.compute_gradients(&image(16, 16, 1), &labels(16, 16))
            .unwrap();
        let norm: f64 = net
            .named_params_mut()
            .into_iter()
            .filter(|(n, _)| n.starts_with("loc.8."))
            .map(|(_, p)| p.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum();
        assert!(norm > 0.0);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut net = Network::new(NetConfig::desk(ModelKind::Dtn, 16, 16), 3).unwrap();
        let before = net.named_tensors();
        let cfg = SgdConfig::new(0.0, 0).unwrap();
        let loss = net
            .train_step(&image(16, 16, 0), &labels(16, 16), &cfg)
            .unwrap();
        assert!(loss.is_finite());
        assert_eq!(net.named_tensors(), before);
    }

    #[test]
    fn load_tensors_checks_names_and_shapes() {
        let mut a = Network::new(NetConfig::desk(ModelKind::Unet, 16, 16), 1).unwrap();
        let mut b = Network::new(NetConfig::desk(ModelKind::Unet, 16, 16), 2).unwrap();
        let ta = a.named_tensors();
        b.load_tensors(&ta).unwrap();
        assert_eq!(b.named_tensors(), ta);
        let mut bad = ta.clone();
        bad[0].1 = Tensor::zeros(&[1]);
        assert!(b.load_tensors(&bad).is_err());
    }

    #[test]
    fn localization_forward_pairs_outputs() {
        let f_out = regular_fiducials(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = Dense::new(3, 8, true, &mut rng);
        head.weight.value = Tensor::zeros(&[3, 8]);
        head.bias.value = identity_bias(&f_out);
        let mut net = Sequential::new(vec![Layer::Dense(head)]);
        let f = localization_forward(&Tensor::full(&[3], 0.7), &mut net, 4).unwrap();
        for (a, b) in f.f_in.iter().zip(&f_out) {
            assert!((a.x - b.x).abs() < 2e-9 && (a.y - b.y).abs() < 2e-9);
        }
        assert!(localization_forward(&Tensor::full(&[3], 0.7), &mut net, 9).is_err());
    }
}
