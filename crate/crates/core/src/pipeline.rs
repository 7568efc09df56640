//! Sequential online adaptation loop.
//!
//! Each sample is encoded once (with condensation wired to the reservoir),
//! classified zero-shot, corrected with the token-level classifier and then
//! offered to the reservoir under its base prediction. Samples are processed
//! strictly in stream order; the reservoir makes the loop order-dependent.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::condensation::{CondensationPlan, Condenser, Scoring, StageReport};
use crate::correction::{correct, layer_weights, token_level_probs, CorrectionConfig, Direction, LayerWeights};
use crate::encoder::{embed, encode, encode_tokens, zero_shot_probs, EncoderConfig, EncoderWeights};
use crate::error::{Result, TcaError};
use crate::flops::{flops_estimate, flops_for_loads, vanilla_flops, BlockLoad};
use crate::kernels::{argmax, cosine, norm, Matrix};
use crate::num::Scalar;
use crate::reservoir::{class_entropy, Admission, Reservoir, Strategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Reservoir-guided condensation plus logits correction.
    #[default]
    Tca,
    /// Pure pruning by head-averaged cls attention; no reservoir.
    BaselineEvit,
    /// Plain zero-shot inference.
    Vanilla,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Tca => "tca",
            Mode::BaselineEvit => "baseline-evit",
            Mode::Vanilla => "vanilla",
        })
    }
}

impl FromStr for Mode {
    type Err = TcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tca" => Ok(Mode::Tca),
            "baseline-evit" | "evit" => Ok(Mode::BaselineEvit),
            "vanilla" => Ok(Mode::Vanilla),
            other => Err(TcaError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub keep_rate: f64,
    pub merge_prune_ratio: f64,
    pub centers: usize,
    pub lambda: f64,
    pub beta: f64,
    pub direction: Direction,
    pub reservoir_size: usize,
    pub strategy: Strategy,
    pub condense_blocks: Vec<usize>,
    pub tau: f64,
    pub mode: Mode,
    pub seed: u64,
    /// Wall-clock latency per sample; off by default so reports are
    /// reproducible byte for byte.
    #[serde(default)]
    pub record_latency: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            keep_rate: 0.9,
            merge_prune_ratio: 2.0,
            centers: 2,
            lambda: 2.0,
            beta: 0.05,
            direction: Direction::Shallow,
            reservoir_size: 3,
            strategy: Strategy::Diversity,
            condense_blocks: vec![4, 7, 10],
            tau: 0.01,
            mode: Mode::Tca,
            seed: 0,
            record_latency: false,
        }
    }
}

impl RunConfig {
    pub fn correction(&self) -> CorrectionConfig {
        CorrectionConfig {
            lambda: self.lambda,
            beta: self.beta,
            direction: self.direction,
        }
    }

    /// Plan applied at condensation blocks in this mode.
    pub fn plan(&self) -> Result<CondensationPlan> {
        match self.mode {
            Mode::BaselineEvit => CondensationPlan::pruning_only(self.keep_rate),
            _ => CondensationPlan::new(self.keep_rate, self.merge_prune_ratio, self.centers),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan()?;
        self.correction().validate()?;
        if self.reservoir_size == 0 {
            return Err(TcaError::Config("reservoir size must be at least 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(TcaError::Config(format!("tau {} must be positive", self.tau)));
        }
        if self.mode == Mode::Tca && self.centers == 0 && self.merge_prune_ratio > 0.0 {
            return Err(TcaError::Config("merging needs at least one center".into()));
        }
        Ok(())
    }
}

/// Visual tower plus class text embeddings.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub encoder: EncoderConfig,
    pub weights: EncoderWeights<T>,
    /// `classes × embed_dim`.
    pub text: Matrix<T>,
    pub classnames: Vec<String>,
}

impl<T: Scalar> Model<T> {
    pub fn new(
        encoder: EncoderConfig,
        weights: EncoderWeights<T>,
        text: Matrix<T>,
        classnames: Vec<String>,
    ) -> Result<Self> {
        weights.validate(&encoder)?;
        if text.rows() == 0 {
            return Err(TcaError::Input("no class embeddings".into()));
        }
        if text.cols() != encoder.embed_dim {
            return Err(TcaError::Shape(format!(
                "class embeddings have dim {}, encoder projects to {}",
                text.cols(),
                encoder.embed_dim
            )));
        }
        if let Some(c) = text.iter_rows().position(|r| norm(r) == 0.0) {
            return Err(TcaError::DegenerateVector(format!("class embedding {c} is zero")));
        }
        if !classnames.is_empty() && classnames.len() != text.rows() {
            return Err(TcaError::Input(format!(
                "{} class names for {} embeddings",
                classnames.len(),
                text.rows()
            )));
        }
        Ok(Self {
            encoder,
            weights,
            text,
            classnames,
        })
    }

    pub fn from_archives(model: &TensorArchive, text: &TensorArchive, heads: Option<usize>) -> Result<Self> {
        let (encoder, weights) = EncoderWeights::from_archive(model, heads, Vec::new())?;
        let embeddings = text.matrix("text/embeddings")?;
        let classnames = if text.contains("text/classnames") {
            text.strings("text/classnames")?.to_vec()
        } else {
            Vec::new()
        };
        Self::new(encoder, weights, embeddings, classnames)
    }

    pub fn classes(&self) -> usize {
        self.text.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    /// Channel-major `3 × side × side`, already normalized.
    pub pixels: Vec<T>,
    pub label: Option<usize>,
}

/// Samples stored as `sample/{i}/pixels` and `sample/{i}/label`.
pub struct Dataset<'a> {
    archive: &'a TensorArchive,
    count: usize,
    image_side: usize,
}

impl<'a> Dataset<'a> {
    pub fn new(archive: &'a TensorArchive) -> Result<Self> {
        let count = archive.scalar_i64("meta/count")?;
        let image_side = archive.scalar_i64("meta/image_side")?;
        if count < 0 || image_side <= 0 {
            return Err(TcaError::Input(format!(
                "invalid dataset header: count {count}, image side {image_side}"
            )));
        }
        Ok(Self {
            archive,
            count: count as usize,
            image_side: image_side as usize,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn image_side(&self) -> usize {
        self.image_side
    }

    pub fn get<T: Scalar>(&self, i: usize) -> Result<Sample<T>> {
        let (shape, px) = self.archive.f32(&format!("sample/{i}/pixels"))?;
        let side = self.image_side;
        if px.len() != 3 * side * side {
            return Err(TcaError::Input(format!(
                "sample {i} has pixel shape {shape:?}, expected [3, {side}, {side}]"
            )));
        }
        let label = match self.archive.get(&format!("sample/{i}/label")) {
            None => None,
            Some(_) => {
                let l = self.archive.scalar_i64(&format!("sample/{i}/label"))?;
                (l >= 0).then_some(l as usize)
            }
        };
        Ok(Sample {
            pixels: px.iter().map(|&v| T::from_f32_lossy(v)).collect(),
            label,
        })
    }

    pub fn iter<T: Scalar>(&self) -> impl Iterator<Item = Result<Sample<T>>> + '_ {
        (0..self.count).map(move |i| self.get(i))
    }
}

/// Writes a dataset shard.
pub fn write_dataset<T: Scalar>(archive: &mut TensorArchive, image_side: usize, samples: &[Sample<T>]) -> Result<()> {
    archive.insert_scalar_i64("meta/count", samples.len() as i64)?;
    archive.insert_scalar_i64("meta/image_side", image_side as i64)?;
    for (i, s) in samples.iter().enumerate() {
        archive.insert_f32(
            format!("sample/{i}/pixels"),
            vec![3, image_side, image_side],
            s.pixels.iter().map(|v| v.to_f32_lossy()).collect(),
        )?;
        archive.insert_scalar_i64(format!("sample/{i}/label"), s.label.map_or(-1, |l| l as i64))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub index: usize,
    /// `argmax` of the corrected scores.
    pub predicted: Option<usize>,
    /// `argmax` of the zero-shot probabilities.
    pub base_prediction: Option<usize>,
    pub label: Option<usize>,
    pub entropy_key: Option<f64>,
    pub admission: Option<Admission>,
    /// Live patch count entering each block, then the final count.
    pub patch_counts: Vec<usize>,
    pub stages: Vec<StageReport>,
    pub flops: u64,
    pub latency_us: Option<u64>,
    /// Per-class anchor-to-text cosine after this sample's admission.
    pub alignment: Option<Vec<Option<f64>>>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub samples: usize,
    pub labeled: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
    pub errors: usize,
    pub flops_total: u64,
    pub flops_mean: f64,
    pub vanilla_flops: u64,
    pub flops_ratio: f64,
    pub admissions: Vec<u64>,
    /// Least-squares slope of each class's alignment trace over steps.
    pub alignment_slopes: Vec<Option<f64>>,
    pub config: RunConfig,
}

/// Ordinary least-squares slope of `y` against `x`; `None` below two points
/// or for a constant `x`.
pub fn least_squares_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

/// Owns all mutable state of one run.
pub struct Pipeline<'m, T> {
    model: &'m Model<T>,
    encoder: EncoderConfig,
    config: RunConfig,
    plan: CondensationPlan,
    reservoir: Reservoir<T>,
    layer_weights: LayerWeights,
    vanilla_flops: u64,
    admissions: Vec<u64>,
    alignment: Vec<Vec<(f64, f64)>>,
    step: usize,
}

impl<'m, T: Scalar> Pipeline<'m, T> {
    pub fn new(model: &'m Model<T>, config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut encoder = model.encoder.clone();
        encoder.condense_blocks = config.condense_blocks.clone();
        encoder.validate()?;
        let classes = model.classes();
        Ok(Self {
            model,
            plan: config.plan()?,
            reservoir: Reservoir::new(classes, config.reservoir_size, config.strategy)?,
            layer_weights: layer_weights(config.beta, encoder.layers, config.direction),
            vanilla_flops: vanilla_flops(&encoder),
            admissions: vec![0; classes],
            alignment: vec![Vec::new(); classes],
            step: 0,
            encoder,
            config,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder
    }

    pub fn reservoir(&self) -> &Reservoir<T> {
        &self.reservoir
    }

    /// Replaces the reservoir contents with a snapshot (warm restart).
    pub fn load_reservoir(&mut self, archive: &TensorArchive) -> Result<()> {
        let mut r = Reservoir::new(self.model.classes(), self.config.reservoir_size, self.config.strategy)?;
        r.load_from(archive)?;
        self.reservoir = r;
        Ok(())
    }

    /// Processes one sample; failures are recorded in the result.
    pub fn process_sample(&mut self, pixels: &[T], label: Option<usize>) -> SampleResult {
        let index = self.step;
        self.step += 1;
        let started = self.config.record_latency.then(Instant::now);
        let mut result = match self.try_process(index, pixels, label) {
            Ok(r) => r,
            Err(e) => SampleResult {
                index,
                predicted: None,
                base_prediction: None,
                label,
                entropy_key: None,
                admission: None,
                patch_counts: Vec::new(),
                stages: Vec::new(),
                flops: 0,
                latency_us: None,
                alignment: None,
                error: Some(e.to_string()),
            },
        };
        result.latency_us = started.map(|t| t.elapsed().as_micros() as u64);
        result
    }

    fn try_process(&mut self, index: usize, pixels: &[T], label: Option<usize>) -> Result<SampleResult> {
        let model = self.model;
        let n = self.encoder.num_patches();
        let (encoded, stages) = match self.config.mode {
            Mode::Vanilla => (encode(pixels, &self.encoder, &model.weights, None)?, Vec::new()),
            Mode::BaselineEvit => {
                let mut hook = Condenser::new(self.plan, Scoring::ClsAttention, None, n);
                let e = encode(pixels, &self.encoder, &model.weights, Some(&mut hook))?;
                (e, hook.into_stages())
            }
            Mode::Tca => {
                let mut hook = Condenser::new(self.plan, Scoring::DomainAware, Some(&self.reservoir), n);
                let e = encode(pixels, &self.encoder, &model.weights, Some(&mut hook))?;
                (e, hook.into_stages())
            }
        };

        let p = zero_shot_probs(&encoded.z, &model.text, self.config.tau)?;
        let base = argmax(&p).ok_or_else(|| TcaError::Input("no classes".into()))?;
        let entropy_key = class_entropy(p[base])?;

        let (predicted, admission, alignment) = if self.config.mode == Mode::Tca {
            let p_token = token_level_probs(&encoded.anchor_stack, &self.reservoir, &self.layer_weights);
            let corrected = correct(&p, &p_token, self.config.lambda);
            let predicted = argmax(&corrected);
            let record = self.reservoir.record(base, &p, encoded.anchor_stack.clone())?;
            let admission = self.reservoir.try_admit(base, &p, record);
            if admission.is_admitted() {
                self.admissions[base] += 1;
            }
            let alignment = self.reservoir.anchor_alignment(&model.text, &model.weights)?;
            for (c, a) in alignment.iter().enumerate() {
                if let Some(a) = a {
                    self.alignment[c].push((index as f64, *a));
                }
            }
            (predicted, Some(admission), Some(alignment))
        } else {
            (Some(base), None, None)
        };

        let loads: Vec<BlockLoad> = (0..self.encoder.layers)
            .map(|b| {
                let scored_keys = stages
                    .iter()
                    .find(|s| s.block == b + 1 && s.anchor_class.is_some())
                    .map_or(0, |s| s.counts.n_in);
                BlockLoad {
                    attn_tokens: encoded.patch_counts[b] + 1,
                    mlp_tokens: encoded.patch_counts[b + 1] + 1,
                    scored_keys,
                }
            })
            .collect();

        Ok(SampleResult {
            index,
            predicted,
            base_prediction: Some(base),
            label,
            entropy_key: Some(entropy_key),
            admission,
            patch_counts: encoded.patch_counts,
            stages,
            flops: flops_for_loads(&self.encoder, &loads),
            latency_us: None,
            alignment,
            error: None,
        })
    }

    /// Processes `samples` in order, handing each result to `sink`.
    pub fn run_stream<I, F>(&mut self, samples: I, mut sink: F) -> Result<RunSummary>
    where
        I: IntoIterator<Item = Result<Sample<T>>>,
        F: FnMut(&SampleResult) -> Result<()>,
    {
        let mut count = 0;
        let mut labeled = 0;
        let mut correct = 0;
        let mut errors = 0;
        let mut flops_total = 0u64;
        for sample in samples {
            let sample = sample?;
            let r = self.process_sample(&sample.pixels, sample.label);
            count += 1;
            if r.error.is_some() {
                errors += 1;
            }
            if let Some(l) = r.label {
                labeled += 1;
                if r.predicted == Some(l) {
                    correct += 1;
                }
            }
            flops_total += r.flops;
            sink(&r)?;
        }
        let flops_mean = if count > 0 {
            flops_total as f64 / count as f64
        } else {
            0.0
        };
        let flops_ratio = if count > 0 {
            flops_mean / self.vanilla_flops as f64
        } else {
            flops_estimate(&self.encoder, &self.plan) as f64 / self.vanilla_flops as f64
        };
        Ok(RunSummary {
            mode: self.config.mode,
            samples: count,
            labeled,
            correct,
            accuracy: (labeled > 0).then(|| correct as f64 / labeled as f64),
            errors,
            flops_total,
            flops_mean,
            vanilla_flops: self.vanilla_flops,
            flops_ratio,
            admissions: self.admissions.clone(),
            alignment_slopes: self.alignment.iter().map(|a| least_squares_slope(a)).collect(),
            config: self.config.clone(),
        })
    }
}

/// Change in `cos(z, t_class)` when each patch is dropped before the first
/// block and kept out of every block. `class` defaults to the zero-shot
/// prediction.
pub fn leave_one_out_influence<T: Scalar>(
    model: &Model<T>,
    pixels: &[T],
    class: Option<usize>,
    tau: f64,
) -> Result<Vec<f64>> {
    let mut cfg = model.encoder.clone();
    cfg.condense_blocks.clear();
    let tokens = embed(pixels, &cfg, &model.weights)?;
    let full = encode_tokens(tokens.clone(), &cfg, &model.weights, None)?;
    let class = match class {
        Some(c) => c,
        None => argmax(&zero_shot_probs(&full.z, &model.text, tau)?).unwrap_or(0),
    };
    let t = model.text.row(class);
    let base = cosine(&full.z, t)?;
    (0..tokens.n_patches())
        .map(|i| {
            let mut reduced = tokens.clone();
            reduced.remove_patch(i);
            let z = encode_tokens(reduced, &cfg, &model.weights, None)?.z;
            Ok(cosine(&z, t)? - base)
        })
        .collect()
}
