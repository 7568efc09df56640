//! Domain-aware token reservoir: per-class bounded buffers of anchor-token
//! stacks from confidently predicted past samples.
//!
//! Each buffer holds at most `capacity` records keyed by the per-class
//! entropy term `-p·ln p` of the prediction that admitted them. What happens
//! when a buffer is full is decided by the [`Strategy`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::encoder::EncoderWeights;
use crate::error::{Result, TcaError};
use crate::kernels::{argmax, cosine, cosine_or_zero, Matrix};
use crate::num::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Evict the oldest record.
    Fifo,
    /// Keep the lowest-entropy records.
    Uncertainty,
    /// Lowest entropy, and the candidate must agree with the buffer at least
    /// as much as the buffer agrees with itself.
    Similarity,
    /// Break up the most redundant pair, dropping its less confident member.
    #[default]
    Diversity,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Fifo,
        Strategy::Uncertainty,
        Strategy::Similarity,
        Strategy::Diversity,
    ];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Fifo => "fifo",
            Strategy::Uncertainty => "uncertainty",
            Strategy::Similarity => "similarity",
            Strategy::Diversity => "diversity",
        })
    }
}

impl FromStr for Strategy {
    type Err = TcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fifo" => Ok(Strategy::Fifo),
            "uncertainty" => Ok(Strategy::Uncertainty),
            "similarity" => Ok(Strategy::Similarity),
            "diversity" => Ok(Strategy::Diversity),
            other => Err(TcaError::Config(format!("unknown reservoir strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorRecord<T> {
    pub entropy_key: f64,
    /// `layers × width` anchor-position outputs.
    pub anchor_stack: Matrix<T>,
    pub sample_seq: u64,
}

impl<T: Scalar> AnchorRecord<T> {
    pub fn final_anchor(&self) -> &[T] {
        self.anchor_stack.row(self.anchor_stack.rows() - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Admission {
    Admitted { evicted: Option<u64> },
    RejectedPredMismatch,
    RejectedByStrategy,
}

impl Admission {
    pub fn is_admitted(&self) -> bool {
        matches!(self, Admission::Admitted { .. })
    }
}

/// `-p ln p` with `0 ln 0 = 0`.
pub fn class_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(TcaError::Domain(format!("probability {p} outside [0, 1]")));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    Ok((-p * p.ln()).max(0.0))
}

enum Decision {
    Append,
    Replace(usize),
    Reject,
}

/// Position of the highest key; among equal keys the newest record loses.
fn max_key_index<T>(buf: &[AnchorRecord<T>]) -> usize {
    let mut worst = 0;
    for (i, r) in buf.iter().enumerate().skip(1) {
        let w = &buf[worst];
        if r.entropy_key > w.entropy_key || (r.entropy_key == w.entropy_key && r.sample_seq > w.sample_seq) {
            worst = i;
        }
    }
    worst
}

/// True when `a` should be dropped in favour of `b`: higher entropy, or the
/// newer of two equal keys.
fn less_reliable<T>(a: &AnchorRecord<T>, b: &AnchorRecord<T>) -> bool {
    a.entropy_key > b.entropy_key || (a.entropy_key == b.entropy_key && a.sample_seq > b.sample_seq)
}

fn decide<T: Scalar>(strategy: Strategy, capacity: usize, buf: &[AnchorRecord<T>], cand: &AnchorRecord<T>) -> Decision {
    if buf.len() < capacity {
        return Decision::Append;
    }
    match strategy {
        Strategy::Fifo => {
            let oldest = buf
                .iter()
                .enumerate()
                .min_by_key(|(_, r)| r.sample_seq)
                .map_or(0, |(i, _)| i);
            Decision::Replace(oldest)
        }
        Strategy::Uncertainty => {
            let worst = max_key_index(buf);
            if less_reliable(&buf[worst], cand) {
                Decision::Replace(worst)
            } else {
                Decision::Reject
            }
        }
        Strategy::Similarity => {
            let worst = max_key_index(buf);
            if !less_reliable(&buf[worst], cand) {
                return Decision::Reject;
            }
            let c = cand.final_anchor();
            let to_cand = buf.iter().map(|r| cosine_or_zero(c, r.final_anchor())).sum::<f64>() / buf.len() as f64;
            let mut pair_sum = 0.0;
            let mut pairs = 0usize;
            for i in 0..buf.len() {
                for j in i + 1..buf.len() {
                    pair_sum += cosine_or_zero(buf[i].final_anchor(), buf[j].final_anchor());
                    pairs += 1;
                }
            }
            if pairs == 0 || to_cand >= pair_sum / pairs as f64 {
                Decision::Replace(worst)
            } else {
                Decision::Reject
            }
        }
        Strategy::Diversity => {
            let pool: Vec<&AnchorRecord<T>> = buf.iter().chain(std::iter::once(cand)).collect();
            let mut closest = (0, 1);
            let mut best = f64::NEG_INFINITY;
            for i in 0..pool.len() {
                for j in i + 1..pool.len() {
                    let s = cosine_or_zero(pool[i].final_anchor(), pool[j].final_anchor());
                    if s > best {
                        best = s;
                        closest = (i, j);
                    }
                }
            }
            let (i, j) = closest;
            let drop = if less_reliable(pool[j], pool[i]) { j } else { i };
            if drop == buf.len() {
                Decision::Reject
            } else {
                Decision::Replace(drop)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reservoir<T> {
    capacity: usize,
    strategy: Strategy,
    buffers: Vec<Vec<AnchorRecord<T>>>,
    means: Vec<Option<Matrix<T>>>,
    next_seq: u64,
}

impl<T: Scalar> Reservoir<T> {
    pub fn new(classes: usize, capacity: usize, strategy: Strategy) -> Result<Self> {
        if capacity == 0 {
            return Err(TcaError::Config("reservoir capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            strategy,
            buffers: vec![Vec::new(); classes],
            means: vec![None; classes],
            next_seq: 0,
        })
    }

    pub fn classes(&self) -> usize {
        self.buffers.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn buffer(&self, class: usize) -> &[AnchorRecord<T>] {
        &self.buffers[class]
    }

    pub fn total(&self) -> usize {
        self.buffers.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// Per-layer mean anchor of a class, `None` while the buffer is empty.
    pub fn class_mean(&self, class: usize) -> Option<&Matrix<T>> {
        self.means[class].as_ref()
    }

    /// Next unused sequence number; strictly increasing across calls.
    pub fn issue_seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    /// Builds a record for `class` keyed by its entropy term under `probs`.
    pub fn record(&mut self, class: usize, probs: &[f64], anchor_stack: Matrix<T>) -> Result<AnchorRecord<T>> {
        let p = *probs
            .get(class)
            .ok_or_else(|| TcaError::Input(format!("class {class} out of range")))?;
        Ok(AnchorRecord {
            entropy_key: class_entropy(p)?,
            anchor_stack,
            sample_seq: self.issue_seq(),
        })
    }

    pub fn try_admit(&mut self, class: usize, probs: &[f64], record: AnchorRecord<T>) -> Admission {
        if argmax(probs) != Some(class) || class >= self.buffers.len() {
            return Admission::RejectedPredMismatch;
        }
        self.next_seq = self.next_seq.max(record.sample_seq + 1);
        let buf = &mut self.buffers[class];
        let outcome = match decide(self.strategy, self.capacity, buf, &record) {
            Decision::Append => {
                buf.push(record);
                Admission::Admitted { evicted: None }
            }
            Decision::Replace(i) => {
                let old = buf.remove(i);
                buf.push(record);
                Admission::Admitted {
                    evicted: Some(old.sample_seq),
                }
            }
            Decision::Reject => Admission::RejectedByStrategy,
        };
        if outcome.is_admitted() {
            self.refresh_mean(class);
        }
        outcome
    }

    fn refresh_mean(&mut self, class: usize) {
        let buf = &self.buffers[class];
        self.means[class] = buf.first().map(|first| {
            let (rows, cols) = first.anchor_stack.shape();
            let mut acc = vec![0.0f64; rows * cols];
            for r in buf {
                for (a, v) in acc.iter_mut().zip(r.anchor_stack.as_slice()) {
                    *a += v.wide();
                }
            }
            let n = buf.len() as f64;
            Matrix::from_vec(rows, cols, acc.into_iter().map(|a| T::of(a / n)).collect()).expect("stack shape is fixed")
        });
    }

    /// Class whose mean anchor from the layer before `block` (1-indexed) is
    /// most cosine-similar to `v_cls`, together with that mean anchor.
    /// `None` on a cold reservoir or for the first block.
    pub fn select_anchor_class(&self, v_cls: &[T], block: usize) -> Option<(usize, &[T])> {
        if block < 2 {
            return None;
        }
        let layer = block - 2;
        let mut best: Option<(usize, f64)> = None;
        for (c, mean) in self.means.iter().enumerate() {
            let Some(mean) = mean else { continue };
            if layer >= mean.rows() {
                continue;
            }
            let Ok(s) = cosine(v_cls, mean.row(layer)) else {
                continue;
            };
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((c, s));
            }
        }
        best.map(|(c, _)| (c, self.means[c].as_ref().unwrap().row(layer)))
    }

    /// Cosine between each class's projected mean final-layer anchor and its
    /// text embedding; `None` for empty buffers.
    pub fn anchor_alignment(&self, text: &Matrix<T>, weights: &EncoderWeights<T>) -> Result<Vec<Option<f64>>> {
        self.means
            .iter()
            .enumerate()
            .map(|(c, mean)| match mean {
                None => Ok(None),
                Some(m) => {
                    let z = weights.project(m.row(m.rows() - 1))?;
                    Ok(Some(cosine_or_zero(&z, text.row(c))))
                }
            })
            .collect()
    }

    /// Writes `reservoir/{c}/{i}/stack` and `reservoir/{c}/{i}/key`.
    pub fn write_to(&self, archive: &mut TensorArchive) -> Result<()> {
        for (c, buf) in self.buffers.iter().enumerate() {
            for (i, r) in buf.iter().enumerate() {
                archive.insert_matrix(format!("reservoir/{c}/{i}/stack"), &r.anchor_stack)?;
                archive.insert_f32(format!("reservoir/{c}/{i}/key"), vec![1], vec![r.entropy_key as f32])?;
            }
        }
        Ok(())
    }

    /// Restores a snapshot into an empty reservoir. Entries beyond the
    /// capacity are rejected rather than silently dropped.
    pub fn load_from(&mut self, archive: &TensorArchive) -> Result<()> {
        for c in 0..self.classes() {
            let mut i = 0;
            while archive.contains(&format!("reservoir/{c}/{i}/stack")) {
                if i >= self.capacity {
                    return Err(TcaError::Input(format!(
                        "snapshot holds more than {} records for class {c}",
                        self.capacity
                    )));
                }
                let stack = archive.matrix(&format!("reservoir/{c}/{i}/stack"))?;
                let (_, key) = archive.f32(&format!("reservoir/{c}/{i}/key"))?;
                let key = *key
                    .first()
                    .ok_or_else(|| TcaError::Archive(format!("reservoir/{c}/{i}/key is empty")))?;
                let seq = self.issue_seq();
                self.buffers[c].push(AnchorRecord {
                    entropy_key: key as f64,
                    anchor_stack: stack,
                    sample_seq: seq,
                });
                i += 1;
            }
            self.refresh_mean(c);
        }
        Ok(())
    }
}
