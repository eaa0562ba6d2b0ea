//! Training, evaluation, benchmarking and warp visualization on synthetic data.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{config_mismatch, Checkpoint};
use crate::data::{gen_blobs, save_labels_png, save_png, Sample};
use crate::error::{DtnError, Result};
use crate::metrics::{mean_iou, pixel_accuracy, roc_auc, MetricsRow, MetricsWriter};
use crate::model::{ModelKind, NetConfig, Network};
use crate::nn::{argmax_labels, softmax, softmax_xent, SgdConfig};
use crate::samplers::gather_forward;
use crate::tensor::{LabelMap, Tensor};
use crate::tps::{build_transform, denormalize, map_grid, Point};

const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0000;
const EVAL_STREAM: u64 = 0x6576_616c_0000_0000;

pub const DEFAULT_LR: f64 = 0.3;
pub const LOG_EVERY: usize = 10;
const PREVIEWS: usize = 4;

/// Seeded stream of synthetic samples with 1 to 3 shapes each.
pub struct SampleStream {
    rng: ChaCha8Rng,
    size: usize,
}

impl SampleStream {
    /// Training samples for `seed`.
    pub fn train(seed: u64, size: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ TRAIN_STREAM),
            size,
        }
    }

    /// Held-out samples; never overlaps the training stream of any seed in practice.
    pub fn eval(seed: u64, size: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ EVAL_STREAM),
            size,
        }
    }

    pub fn next_sample(&mut self) -> Result<Sample> {
        let seed: u64 = self.rng.random();
        let shapes = self.rng.random_range(1..=3);
        gen_blobs(seed, self.size, self.size, shapes)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub kind: ModelKind,
    pub seed: u64,
    pub steps: usize,
    pub size: usize,
    pub learning_rate: f64,
    pub out: Option<PathBuf>,
}

impl TrainOptions {
    pub fn new(kind: ModelKind, seed: u64, steps: usize, size: usize) -> Self {
        Self {
            kind,
            seed,
            steps,
            size,
            learning_rate: DEFAULT_LR,
            out: None,
        }
    }

    pub fn run_id(&self) -> String {
        format!("{}-s{}", self.kind, self.seed)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Pre-update loss of every step.
    pub losses: Vec<f64>,
    pub rows: Vec<MetricsRow>,
    pub checkpoint: Checkpoint,
    pub seconds: f64,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    /// Mean loss over the last logging window.
    pub fn final_loss(&self) -> Option<f64> {
        let n = self.losses.len().min(LOG_EVERY);
        (n > 0).then(|| self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64)
    }
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

fn sample_metrics(
    logits: &Tensor,
    labels: &LabelMap,
    classes: usize,
) -> Result<(f64, f64, f64, Option<f64>)> {
    let (loss, _) = softmax_xent(logits, labels)?;
    let pred = argmax_labels(logits)?;
    let acc = pixel_accuracy(&pred, labels)?;
    let miou = mean_iou(&pred, labels, classes)?;
    let auc = if classes == 2 {
        let probs = softmax(logits)?;
        let scores: Vec<f64> = probs.data().chunks_exact(2).map(|p| p[1]).collect();
        let truth: Vec<bool> = labels.ids().iter().map(|&t| t == 1).collect();
        roc_auc(&scores, &truth).ok().map(|c| c.auc)
    } else {
        None
    };
    Ok((loss, acc, miou, auc))
}

/// Trains on the seeded sample stream. With `out` set, writes the metrics
/// CSV (a row every [`LOG_EVERY`] steps), the final checkpoint and a few
/// prediction previews.
pub fn train(opts: &TrainOptions) -> Result<TrainReport> {
    let start = Instant::now();
    let config = NetConfig::desk(opts.kind, opts.size, opts.size);
    let mut net = Network::new(config, opts.seed)?;
    let sgd = SgdConfig::new(opts.learning_rate, opts.seed)?;
    let classes = net.config().classes;

    let mut writer = match &opts.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| DtnError::io(dir, e))?;
            Some(MetricsWriter::create(dir.join(METRICS_FILE))?)
        }
        None => None,
    };

    let mut stream = SampleStream::train(opts.seed, opts.size);
    let mut losses = Vec::with_capacity(opts.steps);
    let mut rows = Vec::new();
    for step in 1..=opts.steps {
        let s = stream.next_sample()?;
        let logged = step % LOG_EVERY == 0;
        let snapshot = if logged {
            let logits = net.forward(&s.image)?;
            Some(sample_metrics(&logits, &s.labels, classes)?)
        } else {
            None
        };
        let loss = net.train_step(&s.image, &s.labels, &sgd)?;
        if !loss.is_finite() {
            return Err(DtnError::Data(format!("loss became {loss} at step {step}")));
        }
        losses.push(loss);
        if let Some((_, accuracy, mean_iou, auc)) = snapshot {
            let window = &losses[losses.len() - LOG_EVERY..];
            let row = MetricsRow {
                run_id: opts.run_id(),
                step,
                loss: window.iter().sum::<f64>() / LOG_EVERY as f64,
                accuracy,
                mean_iou,
                auc,
            };
            if let Some(w) = &mut writer {
                w.write(&row)?;
            }
            rows.push(row);
        }
    }

    let checkpoint = Checkpoint::from_network(&mut net, opts.steps);
    if let Some(dir) = &opts.out {
        checkpoint.save(dir.join(CHECKPOINT_FILE))?;
        write_previews(&mut net, opts.seed, opts.size, dir)?;
    }
    Ok(TrainReport {
        losses,
        rows,
        checkpoint,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn write_previews(net: &mut Network, seed: u64, size: usize, dir: &Path) -> Result<()> {
    let classes = net.config().classes;
    let mut stream = SampleStream::eval(seed, size);
    for i in 0..PREVIEWS {
        let s = stream.next_sample()?;
        let logits = net.forward(&s.image)?;
        save_png(&s.image, dir.join(format!("pred_{i}_image.png")))?;
        save_labels_png(&s.labels, classes, dir.join(format!("pred_{i}_truth.png")))?;
        save_labels_png(
            &argmax_labels(&logits)?,
            classes,
            dir.join(format!("pred_{i}_label.png")),
        )?;
        let probs = softmax(&logits)?;
        let (h, w, c) = probs.dims3("previews")?;
        let p1 = Tensor::from_fn(&[h, w, 1], |j| probs.data()[j * c + 1]);
        save_png(&p1, dir.join(format!("pred_{i}_prob.png")))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub loss: f64,
    /// Pooled over all pixels.
    pub accuracy: f64,
    /// Mean of per-sample mean IoU.
    pub mean_iou: f64,
    /// Pooled over all pixels; `None` if the pooled truth has one class.
    pub auc: Option<f64>,
    /// Fraction of pixels in the most frequent true class.
    pub majority_rate: f64,
}

/// Evaluates `net` on `n` held-out samples drawn from `seed`.
pub fn evaluate(net: &mut Network, n: usize, seed: u64) -> Result<EvalReport> {
    if n == 0 {
        return Err(DtnError::Config(
            "evaluation needs at least one sample".into(),
        ));
    }
    let cfg = net.config().clone();
    if cfg.height != cfg.width {
        return Err(DtnError::Config(format!(
            "synthetic evaluation needs square inputs, network is {}x{}",
            cfg.height, cfg.width
        )));
    }
    let mut stream = SampleStream::eval(seed, cfg.height);
    let (mut loss, mut hits, mut miou, mut pixels) = (0.0, 0usize, 0.0, 0usize);
    let mut counts = vec![0usize; cfg.classes];
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for _ in 0..n {
        let s = stream.next_sample()?;
        let logits = net.forward(&s.image)?;
        loss += softmax_xent(&logits, &s.labels)?.0;
        let pred = argmax_labels(&logits)?;
        hits += pred
            .ids()
            .iter()
            .zip(s.labels.ids())
            .filter(|(a, b)| a == b)
            .count();
        miou += mean_iou(&pred, &s.labels, cfg.classes)?;
        pixels += s.labels.ids().len();
        for &t in s.labels.ids() {
            counts[t] += 1;
        }
        if cfg.classes == 2 {
            let probs = softmax(&logits)?;
            scores.extend(probs.data().chunks_exact(2).map(|p| p[1]));
            truth.extend(s.labels.ids().iter().map(|&t| t == 1));
        }
    }
    let auc = if cfg.classes == 2 {
        roc_auc(&scores, &truth).ok().map(|c| c.auc)
    } else {
        None
    };
    Ok(EvalReport {
        samples: n,
        loss: loss / n as f64,
        accuracy: hits as f64 / pixels as f64,
        mean_iou: miou / n as f64,
        auc,
        majority_rate: *counts.iter().max().expect("classes >= 2") as f64 / pixels as f64,
    })
}

/// Loads a checkpoint, optionally checking it against an expected config.
pub fn load_network(path: impl AsRef<Path>, expected: Option<&NetConfig>) -> Result<Network> {
    let ck = Checkpoint::load(path)?;
    if let Some(field) = expected.and_then(|e| config_mismatch(e, &ck.config)) {
        return Err(DtnError::Config(format!(
            "checkpoint config mismatch in {field}"
        )));
    }
    ck.to_network()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kind: ModelKind,
    pub params: usize,
    pub mean_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub size: usize,
    pub iters: usize,
    pub unet: BenchRow,
    pub dtn: BenchRow,
}

impl BenchReport {
    pub fn ratio(&self) -> f64 {
        self.dtn.mean_ms / self.unet.mean_ms
    }

    pub fn table(&self) -> String {
        let mut s = format!("size {}  iters {}\n", self.size, self.iters);
        s += &format!("{:<6} {:>10} {:>16}\n", "model", "params", "ms/step (f+b)");
        for r in [&self.unet, &self.dtn] {
            s += &format!(
                "{:<6} {:>10} {:>16.3}\n",
                r.kind.to_string(),
                r.params,
                r.mean_ms
            );
        }
        s += &format!("ratio dtn/unet {:.3}\n", self.ratio());
        s
    }
}

/// Mean forward+backward time per step for both models at equal config.
/// The models alternate each iteration so drift affects both equally.
pub fn bench(size: usize, iters: usize, seed: u64) -> Result<BenchReport> {
    if iters == 0 {
        return Err(DtnError::Config(
            "bench needs at least one iteration".into(),
        ));
    }
    let mut unet = Network::new(NetConfig::desk(ModelKind::Unet, size, size), seed)?;
    let mut dtn = Network::new(NetConfig::desk(ModelKind::Dtn, size, size), seed)?;
    let s = SampleStream::train(seed, size).next_sample()?;
    // warm-up
    unet.compute_gradients(&s.image, &s.labels)?;
    dtn.compute_gradients(&s.image, &s.labels)?;
    let (mut tu, mut td) = (0.0, 0.0);
    for _ in 0..iters {
        let t = Instant::now();
        unet.compute_gradients(&s.image, &s.labels)?;
        tu += t.elapsed().as_secs_f64();
        let t = Instant::now();
        dtn.compute_gradients(&s.image, &s.labels)?;
        td += t.elapsed().as_secs_f64();
    }
    let ms = |t: f64| 1e3 * t / iters as f64;
    Ok(BenchReport {
        size,
        iters,
        unet: BenchRow {
            kind: ModelKind::Unet,
            params: unet.param_count(),
            mean_ms: ms(tu),
        },
        dtn: BenchRow {
            kind: ModelKind::Dtn,
            params: dtn.param_count(),
            mean_ms: ms(td),
        },
    })
}

#[derive(Clone, Debug)]
pub struct WarpReport {
    pub fiducials: Vec<Point>,
    pub regular: Vec<Point>,
    /// L∞ distance between predicted and regular fiducials (normalized units).
    pub max_fiducial_shift: f64,
    /// L∞ distance between the mapped lattice and the regular lattice, in pixels.
    pub max_grid_shift: f64,
    pub overlay: Tensor,
    pub warped: Tensor,
}

const GRID_LINES: usize = 8;

fn paint(img: &mut Tensor, p: Point, rgb: [f64; 3]) {
    let (h, w, _) = img.dims3("paint").expect("rank 3");
    let (m, n) = (p.x.round(), p.y.round());
    if m < 0.0 || n < 0.0 || m >= w as f64 || n >= h as f64 {
        return;
    }
    let base = (n as usize * w + m as usize) * 3;
    img.data_mut()[base..base + 3].copy_from_slice(&rgb);
}

fn to_pixels(p: Point, h: usize, w: usize) -> Point {
    Point::new(denormalize(p.x, w), denormalize(p.y, h))
}

/// Maps the input through the network's learned transform. The overlay shows
/// the input in gray, the deformed lattice in red, the regular fiducials in
/// blue and the predicted fiducials in green.
pub fn warp_demo(net: &mut Network, image: &Tensor) -> Result<WarpReport> {
    let (h, w, c) = image.dims3("warp_demo")?;
    let Some(fid) = net.predict_fiducials(image)? else {
        return Err(DtnError::Config("warp-demo needs a dtn checkpoint".into()));
    };
    let delta = net.delta().expect("dtn has a delta matrix");
    let t = build_transform(&fid.f_in, delta)?;
    let grid = map_grid(&t, h, w, h, w)?;
    let warped = gather_forward(image, &grid)?;

    let gray = |n: usize, m: usize| {
        image.data()[(n * w + m) * c..(n * w + m + 1) * c]
            .iter()
            .sum::<f64>()
            / c as f64
    };
    let mut overlay = Tensor::from_fn(&[h, w, 3], |i| gray(i / 3 / w, (i / 3) % w) * 0.7);

    let mut max_grid_shift: f64 = 0.0;
    let steps = 4 * h.max(w);
    for line in 0..=GRID_LINES {
        let a = -1.0 + 2.0 * line as f64 / GRID_LINES as f64;
        for s in 0..=steps {
            let b = -1.0 + 2.0 * s as f64 / steps as f64;
            for p in [Point::new(a, b), Point::new(b, a)] {
                let q = to_pixels(t.apply(p), h, w);
                let r = to_pixels(p, h, w);
                max_grid_shift = max_grid_shift.max((q.x - r.x).abs()).max((q.y - r.y).abs());
                paint(&mut overlay, q, [1.0, 0.2, 0.2]);
            }
        }
    }
    for p in &fid.f_out {
        paint(&mut overlay, to_pixels(*p, h, w), [0.2, 0.4, 1.0]);
    }
    for p in &fid.f_in {
        paint(&mut overlay, to_pixels(*p, h, w), [0.2, 1.0, 0.2]);
    }
    let max_fiducial_shift = fid
        .f_in
        .iter()
        .zip(&fid.f_out)
        .map(|(a, b)| (a.x - b.x).abs().max((a.y - b.y).abs()))
        .fold(0.0, f64::max);
    Ok(WarpReport {
        fiducials: fid.f_in,
        regular: fid.f_out,
        max_fiducial_shift,
        max_grid_shift,
        overlay,
        warped,
    })
}

/// Writes `overlay.png` and `warped.png` into `out`.
pub fn write_warp_demo(report: &WarpReport, out: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| DtnError::io(out, e))?;
    let (a, b) = (out.join("overlay.png"), out.join("warped.png"));
    save_png(&report.overlay, &a)?;
    let warped = if matches!(report.warped.dims3("warp")?.2, 1 | 3) {
        report.warped.clone()
    } else {
        let (h, w, c) = report.warped.dims3("warp")?;
        Tensor::from_fn(&[h, w, 1], |i| report.warped.data()[i * c])
    };
    save_png(&warped, &b)?;
    Ok((a, b))
}
