//! Seeded toy model and synthetic distractor streams.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::archive::TensorArchive;
use crate::encoder::{encode, BlockWeights, EncoderConfig, EncoderWeights, LayerNormParams};
use crate::error::{Result, TcaError};
use crate::kernels::{norm, Matrix};
use crate::num::Scalar;
use crate::pipeline::{write_dataset, Model, Sample};

/// L=4, H=4, D_v=64, D=32, side 32, patch 8 (16 patches).
pub fn toy_config() -> EncoderConfig {
    EncoderConfig {
        image_side: 32,
        patch_side: 8,
        layers: 4,
        heads: 4,
        width: 64,
        mlp_ratio: 4.0,
        embed_dim: 32,
        condense_blocks: vec![2, 3],
    }
}

fn normal_vec<T: Scalar>(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<T> {
    (0..len)
        .map(|_| T::of(scale * rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

fn normal_matrix<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<T> {
    Matrix::from_vec(rows, cols, normal_vec(rng, rows * cols, scale)).expect("shape")
}

/// Normal weights scaled by `1/sqrt(width)`; layernorms are identity and
/// biases zero.
pub fn toy_weights<T: Scalar>(cfg: &EncoderConfig, seed: u64) -> EncoderWeights<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.width;
    let s = 1.0 / (d as f64).sqrt();
    let hidden = cfg.mlp_hidden();
    let patch_embed = normal_matrix(&mut rng, d, cfg.patch_dim(), s);
    let pos_embed = normal_matrix(&mut rng, cfg.num_patches() + 1, d, s);
    let cls_init = normal_vec(&mut rng, d, s);
    let blocks = (0..cfg.layers)
        .map(|_| BlockWeights {
            ln1: LayerNormParams::identity(d),
            wq: normal_matrix(&mut rng, d, d, s),
            wk: normal_matrix(&mut rng, d, d, s),
            wv: normal_matrix(&mut rng, d, d, s),
            wo: normal_matrix(&mut rng, d, d, s),
            bq: vec![T::zero(); d],
            bk: vec![T::zero(); d],
            bv: vec![T::zero(); d],
            bo: vec![T::zero(); d],
            ln2: LayerNormParams::identity(d),
            mlp_in_w: normal_matrix(&mut rng, hidden, d, s),
            mlp_in_b: vec![T::zero(); hidden],
            mlp_out_w: normal_matrix(&mut rng, d, hidden, s),
            mlp_out_b: vec![T::zero(); d],
        })
        .collect();
    EncoderWeights {
        patch_embed,
        pos_embed,
        cls_init,
        blocks,
        ln_post: LayerNormParams::identity(d),
        proj: normal_matrix(&mut rng, cfg.embed_dim, d, s),
    }
}

/// Stream construction parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamSpec {
    pub classes: usize,
    /// Relative class frequencies; the first entry is the majority class.
    pub proportions: Vec<f64>,
    pub samples: usize,
    /// Patch slots carrying the class pattern; all other slots show a
    /// background shared by every class.
    pub class_patches: usize,
    /// Per-pixel Gaussian noise added to the class prototype.
    pub noise: f64,
    /// Upper bound on patches overwritten by the distractor pattern; each
    /// sample draws its count uniformly from `0..=distractors`.
    pub distractors: usize,
    /// Amplitude of the distractor pattern relative to unit-variance pixels.
    pub distractor_gain: f64,
    /// Weight of the common direction added to every unit prototype
    /// embedding before renormalizing. Class embeddings then sit close
    /// together, as prompt embeddings do, and zero-shot scores soften.
    pub text_gap: f64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            proportions: vec![0.5, 0.3, 0.2],
            samples: 300,
            class_patches: 16,
            noise: 0.3,
            distractors: 8,
            distractor_gain: 3.0,
            text_gap: 2.0,
        }
    }
}

/// Toy model whose class embeddings are the unit encodings of clean class
/// prototypes, plus a fixed off-class distractor patch.
#[derive(Clone, Debug)]
pub struct SyntheticTask<T> {
    pub model: Model<T>,
    pub prototypes: Vec<Vec<T>>,
    /// Slots holding the class pattern.
    pub class_slots: Vec<usize>,
    /// One patch worth of pixels, channel-major `3 × p × p`.
    pub distractor: Vec<T>,
    pub spec: StreamSpec,
}

impl<T: Scalar> SyntheticTask<T> {
    pub fn new(spec: StreamSpec, seed: u64) -> Result<Self> {
        let cfg = toy_config();
        if spec.classes < 2 || spec.proportions.len() != spec.classes {
            return Err(TcaError::Config(format!(
                "{} classes with {} proportions",
                spec.classes,
                spec.proportions.len()
            )));
        }
        if spec.class_patches > cfg.num_patches() || spec.distractors > cfg.num_patches() {
            return Err(TcaError::Config(format!("only {} patch slots", cfg.num_patches())));
        }
        let weights = toy_weights::<T>(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed0fc1a55);
        let pixels = 3 * cfg.image_side * cfg.image_side;
        let background: Vec<T> = normal_vec(&mut rng, pixels, 1.0);
        let mut class_slots: Vec<usize> = (0..cfg.num_patches()).collect();
        class_slots.shuffle(&mut rng);
        class_slots.truncate(spec.class_patches);
        class_slots.sort_unstable();
        let distractor = normal_vec(&mut rng, cfg.patch_dim(), spec.distractor_gain);
        let mut task = Self {
            model: Model::new(
                cfg.clone(),
                weights,
                Matrix::from_vec(1, cfg.embed_dim, vec![T::one(); cfg.embed_dim])?,
                Vec::new(),
            )?,
            prototypes: Vec::new(),
            class_slots,
            distractor,
            spec,
        };
        for _ in 0..task.spec.classes {
            let mut proto = background.clone();
            for &slot in &task.class_slots {
                let pattern: Vec<T> = normal_vec(&mut rng, cfg.patch_dim(), 1.0);
                task.paste(&mut proto, slot, &pattern);
            }
            task.prototypes.push(proto);
        }
        let mut plain = cfg.clone();
        plain.condense_blocks.clear();
        let units = task
            .prototypes
            .iter()
            .map(|proto| {
                let z = encode(proto, &plain, &task.model.weights, None)?.z;
                let n = norm(&z);
                Ok(z.iter().map(|v| v.wide() / n).collect::<Vec<f64>>())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut common = vec![0.0; cfg.embed_dim];
        for u in &units {
            for (m, v) in common.iter_mut().zip(u) {
                *m += v;
            }
        }
        let cn = norm(&common);
        let mut text = Matrix::zeros(task.spec.classes, cfg.embed_dim);
        for (c, u) in units.iter().enumerate() {
            let row: Vec<f64> = u
                .iter()
                .zip(&common)
                .map(|(v, m)| v + task.spec.text_gap * m / cn)
                .collect();
            let rn = norm(&row);
            for (dst, v) in text.row_mut(c).iter_mut().zip(&row) {
                *dst = T::of(v / rn);
            }
        }
        task.model.text = text;
        task.model.classnames = (0..task.spec.classes).map(|c| format!("class{c}")).collect();
        Ok(task)
    }

    /// Writes `patch` pixels into patch slot `idx` of an image.
    fn paste(&self, image: &mut [T], idx: usize, patch: &[T]) {
        let cfg = &self.model.encoder;
        let (p, side, grid) = (cfg.patch_side, cfg.image_side, cfg.grid());
        let (gy, gx) = (idx / grid, idx % grid);
        for c in 0..3 {
            for py in 0..p {
                for px in 0..p {
                    let dst = c * side * side + (gy * p + py) * side + gx * p + px;
                    image[dst] = patch[c * p * p + py * p + px];
                }
            }
        }
    }

    /// One noisy sample of `class` with distractor patches pasted in.
    pub fn sample(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
        let mut image: Vec<T> = self.prototypes[class]
            .iter()
            .map(|&v| T::of(v.wide() + self.spec.noise * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let mut slots: Vec<usize> = (0..self.model.encoder.num_patches()).collect();
        slots.shuffle(rng);
        let count = rng.random_range(0..=self.spec.distractors);
        for &idx in slots.iter().take(count) {
            self.paste(&mut image, idx, &self.distractor);
        }
        image
    }

    /// Class-imbalanced, shuffled labelled stream.
    pub fn stream(&self, seed: u64) -> Vec<Sample<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: f64 = self.spec.proportions.iter().sum();
        let mut labels = Vec::with_capacity(self.spec.samples);
        for (c, w) in self.spec.proportions.iter().enumerate() {
            let k = (w / total * self.spec.samples as f64).round() as usize;
            labels.extend(std::iter::repeat_n(c, k));
        }
        labels.truncate(self.spec.samples);
        while labels.len() < self.spec.samples {
            labels.push(0);
        }
        labels.shuffle(&mut rng);
        labels
            .into_iter()
            .map(|c| Sample {
                pixels: self.sample(c, &mut rng),
                label: Some(c),
            })
            .collect()
    }

    /// Model, class embeddings and `samples` in one archive.
    pub fn to_archive(&self, samples: &[Sample<T>]) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        self.model.weights.write_to(&self.model.encoder, &mut a)?;
        a.insert_matrix("text/embeddings", &self.model.text)?;
        a.insert_strings("text/classnames", self.model.classnames.clone())?;
        write_dataset(&mut a, self.model.encoder.image_side, samples)?;
        Ok(a)
    }
}
