//! Labeled image sets and a synthetic 10-class generator.

use std::f64::consts::PI;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io;
use crate::seed;
use crate::tensor::Tensor3;

pub const IMAGES_FILE: &str = "images.pcnt";
pub const LABELS_FILE: &str = "labels.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor3<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Vec<Tensor3<f32>>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            if let Some(i) = images.iter().position(|t| t.dims() != first.dims()) {
                return Err(Error::shape(format!(
                    "image {i} is {:?}, image 0 is {:?}",
                    images[i].dims(),
                    first.dims()
                )));
            }
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// A seeded random subset of at most `n` samples, in index order.
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seed::rng(seed));
        idx.truncate(n);
        idx.sort_unstable();
        self.select(&idx)
    }

    /// First `n` samples and the rest.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        (
            self.head(n),
            Dataset {
                images: self.images[n..].to_vec(),
                labels: self.labels[n..].to_vec(),
            },
        )
    }

    /// Writes `images.pcnt` and `labels.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        io::save_tensors(&dir.join(IMAGES_FILE), &self.images)?;
        let mut buf = Vec::new();
        io::write_labels(&mut buf, &self.labels)?;
        fs::write(dir.join(LABELS_FILE), buf)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let images = io::load_tensors(&dir.join(IMAGES_FILE))?;
        let labels = io::read_labels(BufReader::new(fs::File::open(dir.join(LABELS_FILE))?))?;
        Dataset::new(images, labels)
    }
}

/// Per-class pattern: an oriented sinusoid with class-specific frequency,
/// orientation and channel mix.
#[derive(Clone, Copy, Debug)]
struct ClassPattern {
    freq: f64,
    theta: f64,
    color: [f64; 3],
}

fn class_pattern(c: usize) -> ClassPattern {
    const COLORS: [[f64; 3]; 5] = [
        [1.0, 0.2, -0.6],
        [-0.4, 1.0, 0.3],
        [0.3, -0.5, 1.0],
        [0.8, 0.8, -0.2],
        [-0.7, 0.1, 0.9],
    ];
    ClassPattern {
        freq: 1.0 + 0.75 * (c % 5) as f64,
        theta: (c / 5) as f64 * PI / 2.0 + (c % 5) as f64 * PI / 10.0,
        color: COLORS[(c * 3) % 5],
    }
}

/// `n` synthetic `x × y × s` images with labels uniform over `classes`.
///
/// Each image is its class pattern with random phase, amplitude and
/// additive Gaussian noise, so the class is recoverable from local
/// structure anywhere in the image.
pub fn synthetic(n: usize, x: usize, y: usize, s: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || x == 0 || y == 0 || s == 0 {
        return Err(Error::invalid("synthetic data needs positive shape and class count"));
    }
    let mut rng = seed::component_rng(seed, "synthetic");
    let gauss = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..classes);
        let p = class_pattern(c);
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = rng.random_range(0.7..1.3);
        let (ct, st) = (p.theta.cos(), p.theta.sin());
        let scale = 2.0 * PI * p.freq / x.max(y) as f64;
        let img = Tensor3::from_fn(x, y, s, |i, j, ch| {
            let wave = (scale * (i as f64 * ct + j as f64 * st) + phase).sin();
            let v = amp * p.color[ch % 3] * wave + gauss.sample(&mut rng);
            v as f32
        });
        images.push(img);
        labels.push(c);
    }
    Dataset::new(images, labels)
}
