//! Seeded synthetic boundary-segmentation samples and PNG I/O.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DtnError, Result};
use crate::tensor::{LabelMap, Tensor};

pub const NOISE_SIGMA: f64 = 0.05;

/// A grayscale image with per-pixel class ids (1 = shape boundary).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub labels: LabelMap,
    pub seed: u64,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
    level: f64,
    tilt: (f64, f64),
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let short = h.min(w) as f64;
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        Self {
            cx: rng.random_range(0.2..0.8) * w as f64,
            cy: rng.random_range(0.2..0.8) * h as f64,
            rx: rng.random_range(0.12..0.3) * short,
            ry: rng.random_range(0.12..0.3) * short,
            cos: theta.cos(),
            sin: theta.sin(),
            level: rng.random_range(0.55..0.9),
            tilt: (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08)),
        }
    }

    fn local(&self, n: usize, m: usize) -> (f64, f64) {
        let (dx, dy) = (m as f64 - self.cx, n as f64 - self.cy);
        (
            (dx * self.cos + dy * self.sin) / self.rx,
            (-dx * self.sin + dy * self.cos) / self.ry,
        )
    }

    fn contains(&self, n: usize, m: usize) -> bool {
        let (u, v) = self.local(n, m);
        u * u + v * v <= 1.0
    }

    fn shade(&self, n: usize, m: usize) -> f64 {
        let (u, v) = self.local(n, m);
        self.level + self.tilt.0 * u + self.tilt.1 * v
    }
}

/// Renders `n_shapes` random ellipses over a smooth background and labels
/// the visible shape boundaries. A pixel is boundary when one of its
/// 4-neighbours belongs to a different region, which gives a contour two
/// pixels thick.
pub fn gen_blobs(seed: u64, h: usize, w: usize, n_shapes: usize) -> Result<Sample> {
    if h < 16 || w < 16 {
        return Err(DtnError::Config(format!(
            "synthetic samples need h, w >= 16, got {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: f64 = rng.random_range(0.1..0.3);
    let grad: (f64, f64) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let shapes: Vec<Ellipse> = (0..n_shapes)
        .map(|_| Ellipse::random(&mut rng, h, w))
        .collect();

    let mut owner = vec![usize::MAX; h * w];
    let mut img = vec![0.0; h * w];
    for n in 0..h {
        for m in 0..w {
            let i = n * w + m;
            img[i] =
                base + grad.0 * (m as f64 / w as f64 - 0.5) + grad.1 * (n as f64 / h as f64 - 0.5);
            // later shapes paint over earlier ones
            for (s, e) in shapes.iter().enumerate() {
                if e.contains(n, m) {
                    owner[i] = s;
                    img[i] = e.shade(n, m);
                }
            }
        }
    }

    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    for v in img.iter_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }

    let mut ids = vec![0usize; h * w];
    for n in 0..h {
        for m in 0..w {
            let o = owner[n * w + m];
            let differs = |nn: usize, mm: usize| owner[nn * w + mm] != o;
            let edge = (n > 0 && differs(n - 1, m))
                || (n + 1 < h && differs(n + 1, m))
                || (m > 0 && differs(n, m - 1))
                || (m + 1 < w && differs(n, m + 1));
            ids[n * w + m] = usize::from(edge);
        }
    }

    Ok(Sample {
        image: Tensor::new(&[h, w, 1], img)?,
        labels: LabelMap::new(h, w, ids)?,
        seed,
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an `H x W x 1` (grayscale) or `H x W x 3` (RGB) map with values in
/// `[0, 1]` as an 8-bit PNG. Values are clamped.
pub fn save_png(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = t.dims3("save_png")?;
    let (wu, hu) = (w as u32, h as u32);
    let res = match c {
        1 => GrayImage::from_fn(wu, hu, |x, y| {
            Luma([quantize(t.at3(y as usize, x as usize, 0))])
        })
        .save(path),
        3 => RgbImage::from_fn(wu, hu, |x, y| {
            let px = |ch| quantize(t.at3(y as usize, x as usize, ch));
            Rgb([px(0), px(1), px(2)])
        })
        .save(path),
        _ => {
            return Err(DtnError::dim(
                "save_png",
                format!("PNG output needs 1 or 3 channels, got {c}"),
            ))
        }
    };
    res.map_err(|e| DtnError::io(path, e))
}

/// Reads an 8-bit grayscale or RGB PNG into `[0, 1]`. Grayscale files give
/// one channel, colour files three (alpha is dropped).
pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| DtnError::io(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        Tensor::new(
            &[h, w, 3],
            rgb.into_raw()
                .into_iter()
                .map(|v| v as f64 / 255.0)
                .collect(),
        )
    } else {
        let g = img.to_luma8();
        Tensor::new(
            &[h, w, 1],
            g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        )
    }
}

/// Writes class ids spread over the gray range (`id * 255 / (classes - 1)`).
pub fn save_labels_png(labels: &LabelMap, classes: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let scale = 255 / (classes.max(2) - 1);
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        GrayImage::from_fn(labels.width() as u32, labels.height() as u32, |x, y| {
            Luma([(labels.get(y as usize, x as usize) * scale).min(255) as u8])
        });
    img.save(path).map_err(|e| DtnError::io(path, e))
}

pub fn load_labels_png(path: impl AsRef<Path>, classes: usize) -> Result<LabelMap> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| DtnError::io(path, e))?
        .to_luma8();
    let scale = (255 / (classes.max(2) - 1)) as f64;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let ids = img
        .into_raw()
        .into_iter()
        .map(|v| (v as f64 / scale).round() as usize)
        .collect();
    LabelMap::new(h, w, ids)
}

fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("{i:04}_image.png"))
}

fn label_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("{i:04}_label.png"))
}

/// Writes samples as numbered pairs `NNNN_image.png` / `NNNN_label.png`.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample], classes: usize) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| DtnError::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        save_png(&s.image, image_path(dir, i))?;
        save_labels_png(&s.labels, classes, label_path(dir, i))?;
    }
    Ok(())
}

/// Reads consecutive numbered pairs starting at 0 until one is missing.
pub fn read_dataset(dir: impl AsRef<Path>, classes: usize) -> Result<Vec<(Tensor, LabelMap)>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(DtnError::io(dir, "not a directory"));
    }
    let mut out = Vec::new();
    for i in 0.. {
        let (ip, lp) = (image_path(dir, i), label_path(dir, i));
        if !ip.exists() {
            break;
        }
        out.push((load_png(&ip)?, load_labels_png(&lp, classes)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boundary_fraction(s: &Sample) -> f64 {
        s.labels.ids().iter().filter(|&&v| v == 1).count() as f64 / s.labels.ids().len() as f64
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(
            gen_blobs(42, 32, 24, 3).unwrap(),
            gen_blobs(42, 32, 24, 3).unwrap()
        );
        assert_ne!(
            gen_blobs(42, 32, 32, 3).unwrap(),
            gen_blobs(43, 32, 32, 3).unwrap()
        );
    }

    #[test]
    fn empty_scene_has_no_boundary() {
        let s = gen_blobs(1, 16, 16, 0).unwrap();
        assert!(s.labels.ids().iter().all(|&v| v == 0));
    }

    #[test]
    fn boundary_fraction_golden() {
        let s = gen_blobs(7, 32, 32, 2).unwrap();
        let f = boundary_fraction(&s);
        assert!((0.02..=0.4).contains(&f), "{f}");
        // recorded from the generator; changes here mean the stream changed
        assert_eq!(s.labels.ids().iter().filter(|&&v| v == 1).count(), 99);
    }

    #[test]
    fn extents_and_ranges() {
        for seed in 0..20 {
            let s = gen_blobs(seed, 20, 28, 1 + seed as usize % 3).unwrap();
            assert_eq!(s.image.shape(), &[20, 28, 1]);
            assert_eq!((s.labels.height(), s.labels.width()), (20, 28));
            assert!(s
                .image
                .data()
                .iter()
                .all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            assert!(s.labels.ids().iter().all(|&v| v < 2));
        }
        assert!(gen_blobs(0, 15, 32, 1).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.png");
        save_png(&Tensor::zeros(&[8, 8, 1]), &p).unwrap();
        assert_eq!(load_png(&p).unwrap(), Tensor::zeros(&[8, 8, 1]));

        let t = Tensor::from_fn(&[5, 7, 3], |i| ((i * 37) % 101) as f64 / 100.0);
        let p = dir.path().join("rgb.png");
        save_png(&t, &p).unwrap();
        let back = load_png(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.max_abs_diff(&t).unwrap() <= 1.0 / 255.0);

        assert!(matches!(
            load_png(dir.path().join("missing.png")),
            Err(DtnError::Io { .. })
        ));
        assert!(save_png(&Tensor::zeros(&[2, 2, 2]), dir.path().join("x.png")).is_err());
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<Sample> = (0..3).map(|s| gen_blobs(s, 16, 16, 2).unwrap()).collect();
        write_dataset(dir.path(), &samples, 2).unwrap();
        let back = read_dataset(dir.path(), 2).unwrap();
        assert_eq!(back.len(), 3);
        for ((img, lab), s) in back.iter().zip(&samples) {
            assert_eq!(lab, &s.labels);
            assert!(img.max_abs_diff(&s.image).unwrap() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
