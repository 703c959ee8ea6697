//! Dataset loading and partitioning.
//!
//! IDX container parsing for MNIST-family files, seeded private/public
//! splits with class exclusion, the per-epoch batch schedule shared by both
//! actors, synthetic toy generators for oracle experiments, and a deterministic
//! glyph corpus that stands in for MNIST/Fashion-MNIST when the real IDX
//! files are not on disk.

use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: wrong IDX magic {got} (expected {expected})")]
    WrongMagic {
        path: String,
        got: u32,
        expected: u32,
    },
    #[error("{path}: truncated IDX payload, needed {needed} bytes, got {got}")]
    Truncated {
        path: String,
        needed: usize,
        got: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("unknown toy dataset `{0}`")]
    UnknownToy(String),
    #[error("class exclusion {excluded:?} empties the public set")]
    EmptyPublicSet { excluded: Vec<u8> },
    #[error("private fraction must lie in (0,1), got {0}")]
    BadFraction(f64),
    #[error("dataset too small: {n} examples for batch size {batch}")]
    TooSmall { n: usize, batch: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const IMAGES_MAGIC: u32 = 2051;
const LABELS_MAGIC: u32 = 2049;

/// Images as [N, 1, H, W] in [0,1] plus one label byte per image.
#[derive(Debug, Clone)]
pub struct LabeledImages {
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gather rows into a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        Tensor::new(data, &shape).expect("batch")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

fn read_u32_be(path: &str, buf: &[u8], pos: usize) -> Result<u32, DataError> {
    if pos + 4 > buf.len() {
        return Err(DataError::Truncated {
            path: path.into(),
            needed: pos + 4,
            got: buf.len(),
        });
    }
    Ok(u32::from_be_bytes(buf[pos..pos + 4].try_into().unwrap()))
}

/// Parse a pair of IDX files (big-endian headers, magic 2051/2049); pixels
/// are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImages, DataError> {
    let ibuf = fs::read(images_path)?;
    let ipath = images_path.display().to_string();
    let magic = read_u32_be(&ipath, &ibuf, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::WrongMagic {
            path: ipath,
            got: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let n = read_u32_be(&ipath, &ibuf, 4)? as usize;
    let h = read_u32_be(&ipath, &ibuf, 8)? as usize;
    let w = read_u32_be(&ipath, &ibuf, 12)? as usize;
    let needed = 16 + n * h * w;
    if ibuf.len() < needed {
        return Err(DataError::Truncated {
            path: ipath,
            needed,
            got: ibuf.len(),
        });
    }
    let pixels: Vec<f64> = ibuf[16..needed].iter().map(|&b| b as f64 / 255.0).collect();

    let lbuf = fs::read(labels_path)?;
    let lpath = labels_path.display().to_string();
    let magic = read_u32_be(&lpath, &lbuf, 0)?;
    if magic != LABELS_MAGIC {
        return Err(DataError::WrongMagic {
            path: lpath,
            got: magic,
            expected: LABELS_MAGIC,
        });
    }
    let ln = read_u32_be(&lpath, &lbuf, 4)? as usize;
    if lbuf.len() < 8 + ln {
        return Err(DataError::Truncated {
            path: lpath,
            needed: 8 + ln,
            got: lbuf.len(),
        });
    }
    if ln != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: ln,
        });
    }
    Ok(LabeledImages {
        images: Tensor::new(pixels, &[n, 1, h, w]).expect("idx tensor"),
        labels: lbuf[8..8 + ln].to_vec(),
    })
}

/// Write images + labels back out as IDX files (inverse of [`load_idx`];
/// pixels are rounded to the nearest byte).
pub fn save_idx(
    data: &LabeledImages,
    images_path: &Path,
    labels_path: &Path,
) -> Result<(), DataError> {
    let shape = data.images.shape();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let mut ibuf = Vec::with_capacity(16 + n * h * w);
    ibuf.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    ibuf.extend_from_slice(&(n as u32).to_be_bytes());
    ibuf.extend_from_slice(&(h as u32).to_be_bytes());
    ibuf.extend_from_slice(&(w as u32).to_be_bytes());
    ibuf.extend(
        data.images
            .data()
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut f = fs::File::create(images_path)?;
    f.write_all(&ibuf)?;

    let mut lbuf = Vec::with_capacity(8 + n);
    lbuf.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lbuf.extend_from_slice(&(n as u32).to_be_bytes());
    lbuf.extend_from_slice(&data.labels);
    let mut f = fs::File::create(labels_path)?;
    f.write_all(&lbuf)?;
    Ok(())
}

/// The private/public partition of a training set.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub x_priv: LabeledImages,
    pub x_pub: LabeledImages,
    pub excluded_classes: Vec<u8>,
    /// Original training-set size (drives δ = 1/N defaults).
    pub n_total: usize,
}

/// Seeded disjoint partition; `excluded_classes` filters the public side
/// only — the private silo keeps all classes.
pub fn make_split(
    data: &LabeledImages,
    priv_fraction: f64,
    excluded_classes: &[u8],
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    if !(0.0..1.0).contains(&priv_fraction) || priv_fraction == 0.0 {
        return Err(DataError::BadFraction(priv_fraction));
    }
    let n = data.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5917_da7a);
    indices.shuffle(&mut rng);
    let n_priv = ((n as f64) * priv_fraction).round() as usize;
    let (priv_idx, pub_idx) = indices.split_at(n_priv.clamp(1, n - 1));
    let pub_idx: Vec<usize> = pub_idx
        .iter()
        .copied()
        .filter(|&i| !excluded_classes.contains(&data.labels[i]))
        .collect();
    if pub_idx.is_empty() {
        return Err(DataError::EmptyPublicSet {
            excluded: excluded_classes.to_vec(),
        });
    }
    Ok(DatasetSplit {
        x_priv: LabeledImages {
            images: data.batch(priv_idx),
            labels: data.batch_labels(priv_idx),
        },
        x_pub: LabeledImages {
            images: data.batch(&pub_idx),
            labels: data.batch_labels(&pub_idx),
        },
        excluded_classes: excluded_classes.to_vec(),
        n_total: n,
    })
}

/// Per-epoch seeded shuffle with sequential fixed-size batches. A pure
/// function of (n, batch, seed, iteration), so the client and any observer
/// reproduce the same batch membership independently.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    n: usize,
    batch: usize,
    seed: u64,
    cached_epoch: Option<(u64, Vec<u32>)>,
}

impl BatchSchedule {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<BatchSchedule, DataError> {
        if n < batch || batch == 0 {
            return Err(DataError::TooSmall { n, batch });
        }
        Ok(BatchSchedule {
            n,
            batch,
            seed,
            cached_epoch: None,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn batches_per_epoch(&self) -> u64 {
        (self.n / self.batch) as u64
    }

    pub fn batch_indices(&mut self, iteration: u64) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch();
        let epoch = iteration / per_epoch;
        let slot = (iteration % per_epoch) as usize;
        let perm = match &self.cached_epoch {
            Some((e, p)) if *e == epoch => p,
            _ => {
                let mut perm: Vec<u32> = (0..self.n as u32).collect();
                let mut rng = ChaCha20Rng::seed_from_u64(
                    self.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15),
                );
                perm.shuffle(&mut rng);
                self.cached_epoch = Some((epoch, perm));
                &self.cached_epoch.as_ref().unwrap().1
            }
        };
        perm[slot * self.batch..(slot + 1) * self.batch]
            .iter()
            .map(|&i| i as usize)
            .collect()
    }
}

// ── synthetic generators ────────────────────────────────────────────────

/// Closed-form toy point sets for oracle experiments. Points come back as a
/// [n, d] tensor.
pub fn toy_dataset(name: &str, n: usize, seed: u64) -> Result<Tensor, DataError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let data: Vec<f64> = match name {
        // y = 2x exactly, x ∈ [0.05, 0.45].
        "line2d" => (0..n)
            .flat_map(|_| {
                let x = rng.gen_range(0.05..0.45);
                [x, 2.0 * x]
            })
            .collect(),
        // Two axis-aligned Gaussian blobs inside the unit box.
        "gaussians2d" => {
            let centers = [(0.3, 0.3), (0.7, 0.7)];
            (0..n)
                .flat_map(|i| {
                    let (cx, cy) = centers[i % 2];
                    let dx: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.05;
                    let dy: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.05;
                    [cx + dx, cy + dy]
                })
                .collect()
        }
        // Unit-ish ring of radius 0.35 around the box center.
        "ring" => (0..n)
            .flat_map(|_| {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = 0.35 + rng.gen_range(-0.02..0.02);
                [0.5 + r * theta.cos(), 0.5 + r * theta.sin()]
            })
            .collect(),
        other => return Err(DataError::UnknownToy(other.to_string())),
    };
    Ok(Tensor::new(data, &[n, 2]).expect("toy tensor"))
}

/// Families of the glyph corpus: `digits` mimics handwritten-digit shape
/// variety; `fashion` mimics object classes where class 8 (the "bag") is
/// structurally unlike every other class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlyphStyle {
    Digits,
    Fashion,
}

/// Deterministic stand-in corpus: ten stroke/blob glyph classes rendered at
/// `side`×`side` with per-sample jitter. Used when real IDX files are absent;
/// written to disk as IDX and loaded back through the normal pipeline.
pub fn synth_glyphs(style: GlyphStyle, n: usize, side: usize, seed: u64) -> LabeledImages {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x517e_617f);
    let mut pixels = vec![0.0f64; n * side * side];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % 10) as u8;
        labels.push(class);
        let img = &mut pixels[i * side * side..(i + 1) * side * side];
        draw_glyph(img, side, class, style, &mut rng);
    }
    LabeledImages {
        images: Tensor::new(pixels, &[n, 1, side, side]).expect("glyphs"),
        labels,
    }
}

struct Pen<'a> {
    img: &'a mut [f64],
    side: usize,
    jx: f64,
    jy: f64,
    ink: f64,
    thickness: f64,
}

impl Pen<'_> {
    fn put(&mut self, x: f64, y: f64) {
        let s = self.side as f64;
        let xi = ((x + self.jx) * s).round() as isize;
        let yi = ((y + self.jy) * s).round() as isize;
        if xi >= 0 && yi >= 0 && (xi as usize) < self.side && (yi as usize) < self.side {
            let p = &mut self.img[yi as usize * self.side + xi as usize];
            *p = (*p + self.ink).min(1.0);
        }
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64) {
        let steps = self.side * 4;
        let (dx, dy) = (y1 - y0, -(x1 - x0));
        let norm = (dx * dx + dy * dy).sqrt().max(1e-9);
        for t in 0..=steps {
            let t = t as f64 / steps as f64;
            let x = x0 + (x1 - x0) * t;
            let y = y0 + (y1 - y0) * t;
            for w in [-1.0, 0.0, 1.0] {
                self.put(
                    x + w * self.thickness * dx / norm,
                    y + w * self.thickness * dy / norm,
                );
            }
        }
    }

    fn arc(&mut self, cx: f64, cy: f64, r: f64, a0: f64, a1: f64) {
        let steps = self.side * 4;
        for t in 0..=steps {
            let a = a0 + (a1 - a0) * t as f64 / steps as f64;
            for w in [-1.0, 0.0, 1.0] {
                let rr = r + w * self.thickness;
                self.put(cx + rr * a.cos(), cy + rr * a.sin());
            }
        }
    }
}

fn draw_glyph(img: &mut [f64], side: usize, class: u8, style: GlyphStyle, rng: &mut ChaCha20Rng) {
    use std::f64::consts::{PI, TAU};
    let mut pen = Pen {
        img,
        side,
        jx: rng.gen_range(-0.08..0.08),
        jy: rng.gen_range(-0.08..0.08),
        ink: rng.gen_range(0.75..1.0),
        thickness: rng.gen_range(0.055..0.085),
    };
    match (style, class) {
        // digit-like strokes
        (GlyphStyle::Digits, 0) => pen.arc(0.5, 0.5, 0.28, 0.0, TAU),
        (GlyphStyle::Digits, 1) => pen.line(0.5, 0.15, 0.5, 0.85),
        (GlyphStyle::Digits, 2) => {
            pen.arc(0.5, 0.35, 0.2, PI, TAU);
            pen.line(0.68, 0.4, 0.3, 0.82);
            pen.line(0.3, 0.82, 0.75, 0.82);
        }
        (GlyphStyle::Digits, 3) => {
            pen.arc(0.5, 0.33, 0.17, -PI / 2.0, PI / 2.0);
            pen.arc(0.5, 0.67, 0.17, -PI / 2.0, PI / 2.0);
        }
        (GlyphStyle::Digits, 4) => {
            pen.line(0.35, 0.15, 0.3, 0.55);
            pen.line(0.3, 0.55, 0.72, 0.55);
            pen.line(0.65, 0.15, 0.65, 0.85);
        }
        (GlyphStyle::Digits, 5) => {
            pen.line(0.7, 0.18, 0.35, 0.18);
            pen.line(0.35, 0.18, 0.33, 0.5);
            pen.arc(0.5, 0.65, 0.19, -PI / 2.0, PI / 2.0);
        }
        (GlyphStyle::Digits, 6) => {
            pen.arc(0.48, 0.62, 0.2, 0.0, TAU);
            pen.line(0.42, 0.14, 0.31, 0.55);
        }
        (GlyphStyle::Digits, 7) => {
            pen.line(0.3, 0.18, 0.72, 0.18);
            pen.line(0.72, 0.18, 0.45, 0.85);
        }
        (GlyphStyle::Digits, 8) => {
            pen.arc(0.5, 0.33, 0.16, 0.0, TAU);
            pen.arc(0.5, 0.67, 0.19, 0.0, TAU);
        }
        (GlyphStyle::Digits, _) => {
            pen.arc(0.52, 0.38, 0.2, 0.0, TAU);
            pen.line(0.69, 0.45, 0.58, 0.86);
        }
        // fashion-like silhouettes; class 8 is the one closed blob
        (GlyphStyle::Fashion, 0) => {
            pen.line(0.3, 0.25, 0.7, 0.25);
            pen.line(0.3, 0.25, 0.32, 0.8);
            pen.line(0.7, 0.25, 0.68, 0.8);
            pen.line(0.32, 0.8, 0.68, 0.8);
            pen.line(0.3, 0.25, 0.15, 0.45);
            pen.line(0.7, 0.25, 0.85, 0.45);
        }
        (GlyphStyle::Fashion, 1) => {
            pen.line(0.42, 0.15, 0.36, 0.85);
            pen.line(0.58, 0.15, 0.64, 0.85);
            pen.line(0.42, 0.15, 0.58, 0.15);
        }
        (GlyphStyle::Fashion, 2) => {
            pen.line(0.28, 0.3, 0.72, 0.3);
            pen.line(0.28, 0.3, 0.28, 0.78);
            pen.line(0.72, 0.3, 0.72, 0.78);
            pen.line(0.28, 0.78, 0.72, 0.78);
            pen.line(0.28, 0.55, 0.72, 0.55);
        }
        (GlyphStyle::Fashion, 3) => {
            pen.line(0.5, 0.15, 0.25, 0.85);
            pen.line(0.5, 0.15, 0.75, 0.85);
            pen.line(0.25, 0.85, 0.75, 0.85);
        }
        (GlyphStyle::Fashion, 4) => {
            pen.line(0.35, 0.2, 0.65, 0.2);
            pen.line(0.35, 0.2, 0.35, 0.85);
            pen.line(0.65, 0.2, 0.65, 0.85);
            pen.line(0.5, 0.2, 0.5, 0.6);
        }
        (GlyphStyle::Fashion, 5) => {
            pen.line(0.2, 0.7, 0.8, 0.7);
            pen.line(0.2, 0.7, 0.35, 0.55);
            pen.line(0.5, 0.7, 0.65, 0.55);
        }
        (GlyphStyle::Fashion, 6) => {
            pen.line(0.33, 0.28, 0.67, 0.28);
            pen.line(0.33, 0.28, 0.35, 0.8);
            pen.line(0.67, 0.28, 0.65, 0.8);
            pen.line(0.35, 0.8, 0.65, 0.8);
            pen.arc(0.5, 0.28, 0.06, 0.0, PI);
        }
        (GlyphStyle::Fashion, 7) => {
            pen.line(0.2, 0.65, 0.8, 0.65);
            pen.line(0.2, 0.65, 0.25, 0.45);
            pen.arc(0.7, 0.55, 0.12, -PI / 2.0, PI / 2.0);
        }
        (GlyphStyle::Fashion, 8) => {
            // bag: filled round blob with a handle; no other class is a
            // filled closed region
            for r in 0..8 {
                pen.arc(0.5, 0.6, 0.04 + r as f64 * 0.03, 0.0, TAU);
            }
            pen.arc(0.5, 0.35, 0.12, PI, TAU);
        }
        (GlyphStyle::Fashion, _) => {
            pen.line(0.25, 0.75, 0.78, 0.75);
            pen.line(0.35, 0.75, 0.35, 0.3);
            pen.line(0.35, 0.3, 0.52, 0.3);
            pen.line(0.52, 0.3, 0.55, 0.75);
        }
    }
    // Light pixel noise.
    for p in img.iter_mut() {
        let noise = rng.gen_range(0.0..0.04);
        *p = (*p + noise).min(1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_set() -> LabeledImages {
        // 2 images of 2×2, hand-built.
        LabeledImages {
            images: Tensor::new(
                vec![0.0, 1.0, 0.5, 0.25, 1.0, 0.75, 0.0, 0.5],
                &[2, 1, 2, 2],
            )
            .unwrap(),
            labels: vec![3, 7],
        }
    }

    #[test]
    fn hand_built_idx_bytes_parse() {
        // Bytes assembled by hand from the IDX layout.
        let dir = tempdir().unwrap();
        let ipath = dir.path().join("img.idx");
        let lpath = dir.path().join("lbl.idx");
        let mut ibytes = vec![];
        ibytes.extend_from_slice(&2051u32.to_be_bytes());
        ibytes.extend_from_slice(&2u32.to_be_bytes()); // 2 images
        ibytes.extend_from_slice(&2u32.to_be_bytes()); // 2 rows
        ibytes.extend_from_slice(&2u32.to_be_bytes()); // 2 cols
        ibytes.extend_from_slice(&[0, 255, 128, 64, 255, 191, 0, 128]);
        fs::write(&ipath, &ibytes).unwrap();
        let mut lbytes = vec![];
        lbytes.extend_from_slice(&2049u32.to_be_bytes());
        lbytes.extend_from_slice(&2u32.to_be_bytes());
        lbytes.extend_from_slice(&[3, 7]);
        fs::write(&lpath, &lbytes).unwrap();

        let data = load_idx(&ipath, &lpath).unwrap();
        assert_eq!(data.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(data.labels, vec![3, 7]);
        assert!((data.images.data()[1] - 1.0).abs() < 1e-12);
        assert!((data.images.data()[2] - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_magic_detected() {
        let dir = tempdir().unwrap();
        let ipath = dir.path().join("img.idx");
        let lpath = dir.path().join("lbl.idx");
        let mut bytes = vec![];
        bytes.extend_from_slice(&9999u32.to_be_bytes());
        bytes.extend_from_slice(&[0; 12]);
        fs::write(&ipath, &bytes).unwrap();
        fs::write(&lpath, &bytes).unwrap();
        assert!(matches!(
            load_idx(&ipath, &lpath),
            Err(DataError::WrongMagic { got: 9999, .. })
        ));
    }

    #[test]
    fn count_mismatch_detected() {
        let dir = tempdir().unwrap();
        let set = tiny_set();
        let ipath = dir.path().join("img.idx");
        let lpath = dir.path().join("lbl.idx");
        save_idx(&set, &ipath, &lpath).unwrap();
        // Rewrite labels claiming 3 entries.
        let mut lbytes = vec![];
        lbytes.extend_from_slice(&2049u32.to_be_bytes());
        lbytes.extend_from_slice(&3u32.to_be_bytes());
        lbytes.extend_from_slice(&[1, 2, 3]);
        fs::write(&lpath, &lbytes).unwrap();
        assert!(matches!(
            load_idx(&ipath, &lpath),
            Err(DataError::CountMismatch { images: 2, labels: 3 })
        ));
    }

    #[test]
    fn truncated_payload_detected() {
        let dir = tempdir().unwrap();
        let set = tiny_set();
        let ipath = dir.path().join("img.idx");
        let lpath = dir.path().join("lbl.idx");
        save_idx(&set, &ipath, &lpath).unwrap();
        let bytes = fs::read(&ipath).unwrap();
        fs::write(&ipath, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            load_idx(&ipath, &lpath),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn idx_round_trip_is_bit_exact() {
        // Quantized pixels (k/255) survive a save/load cycle exactly.
        let dir = tempdir().unwrap();
        let glyphs = synth_glyphs(GlyphStyle::Digits, 40, 8, 11);
        let quantized = LabeledImages {
            images: Tensor::new(
                glyphs
                    .images
                    .data()
                    .iter()
                    .map(|&p| (p * 255.0).round() / 255.0)
                    .collect(),
                glyphs.images.shape(),
            )
            .unwrap(),
            labels: glyphs.labels.clone(),
        };
        let ipath = dir.path().join("img.idx");
        let lpath = dir.path().join("lbl.idx");
        save_idx(&quantized, &ipath, &lpath).unwrap();
        let loaded = load_idx(&ipath, &lpath).unwrap();
        assert_eq!(loaded.labels, quantized.labels);
        assert!(loaded
            .images
            .data()
            .iter()
            .zip(quantized.images.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn split_is_disjoint_and_exclusion_applies_to_public_only() {
        let data = synth_glyphs(GlyphStyle::Fashion, 200, 8, 5);
        let split = make_split(&data, 0.5, &[0], 9).unwrap();
        assert!(split.x_pub.labels.iter().all(|&l| l != 0));
        assert!(split.x_priv.labels.iter().any(|&l| l == 0));
        assert_eq!(split.n_total, 200);
        assert_eq!(split.x_priv.len(), 100);
        // Disjointness: priv + pub ≤ total and pub lost only excluded items.
        let excluded_in_pub_half = 200 - 100 - split.x_pub.len();
        assert!(excluded_in_pub_half > 0);
    }

    #[test]
    fn split_even_fraction_splits_in_half() {
        let data = synth_glyphs(GlyphStyle::Digits, 600, 8, 5);
        let split = make_split(&data, 0.5, &[], 1).unwrap();
        assert_eq!(split.x_priv.len(), 300);
        assert_eq!(split.x_pub.len(), 300);
    }

    #[test]
    fn split_same_seed_identical() {
        let data = synth_glyphs(GlyphStyle::Digits, 100, 8, 5);
        let a = make_split(&data, 0.5, &[2], 77).unwrap();
        let b = make_split(&data, 0.5, &[2], 77).unwrap();
        assert_eq!(a.x_priv.labels, b.x_priv.labels);
        assert!(a
            .x_priv
            .images
            .data()
            .iter()
            .zip(b.x_priv.images.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn split_exclusion_emptying_public_fails() {
        let data = synth_glyphs(GlyphStyle::Digits, 50, 8, 5);
        let all: Vec<u8> = (0..10).collect();
        assert!(matches!(
            make_split(&data, 0.5, &all, 1),
            Err(DataError::EmptyPublicSet { .. })
        ));
    }

    #[test]
    fn toy_line2d_satisfies_y_eq_2x() {
        let pts = toy_dataset("line2d", 50, 3).unwrap();
        for i in 0..50 {
            let (x, y) = (pts.data()[2 * i], pts.data()[2 * i + 1]);
            assert!((y - 2.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn toy_gaussians_center_within_tolerance() {
        let n = 4000;
        let pts = toy_dataset("gaussians2d", n, 3).unwrap();
        // Even-indexed points come from center (0.3, 0.3).
        let (mut sx, mut sy, mut c) = (0.0, 0.0, 0);
        for i in (0..n).step_by(2) {
            sx += pts.data()[2 * i];
            sy += pts.data()[2 * i + 1];
            c += 1;
        }
        let tol = 5.0 * 0.05 / (c as f64).sqrt();
        assert!((sx / c as f64 - 0.3).abs() < tol);
        assert!((sy / c as f64 - 0.3).abs() < tol);
    }

    #[test]
    fn toy_deterministic_and_unknown_name() {
        let a = toy_dataset("ring", 20, 9).unwrap();
        let b = toy_dataset("ring", 20, 9).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(matches!(
            toy_dataset("spiral", 5, 0),
            Err(DataError::UnknownToy(_))
        ));
    }

    #[test]
    fn schedule_is_deterministic_and_partitions_epochs() {
        let mut s1 = BatchSchedule::new(100, 10, 4).unwrap();
        let mut s2 = BatchSchedule::new(100, 10, 4).unwrap();
        for it in 0..25 {
            assert_eq!(s1.batch_indices(it), s2.batch_indices(it));
        }
        // Within one epoch every example appears exactly once.
        let mut seen = vec![false; 100];
        for slot in 0..10 {
            for i in s1.batch_indices(slot) {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn glyph_classes_look_distinct() {
        let set = synth_glyphs(GlyphStyle::Fashion, 100, 14, 2);
        // Mean intensity of the filled-blob class 8 is well above the line
        // classes.
        let per = 14 * 14;
        let mean_of = |class: u8| {
            let mut acc = 0.0;
            let mut cnt = 0;
            for i in 0..100 {
                if set.labels[i] == class {
                    acc += set.images.data()[i * per..(i + 1) * per]
                        .iter()
                        .sum::<f64>();
                    cnt += 1;
                }
            }
            acc / (cnt as f64 * per as f64)
        };
        assert!(mean_of(8) > 1.5 * mean_of(1), "bag class should be densest");
    }
}
