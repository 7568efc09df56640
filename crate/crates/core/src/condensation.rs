//! Cross-head token scoring, pruning, merge-band extraction and K-center
//! coreset merging, plus the plain cls-attention baseline scorer.
//!
//! Patch indices in this module are 0-based positions among the live patch
//! tokens of a stage (token row `i + 1`).

use serde::{Deserialize, Serialize};

use crate::encoder::{BlockTrace, BlockWeights, CondensationHook, Condensed, StageContext, TokenMatrix};
use crate::error::{Result, TcaError};
use crate::kernels::{dot, layernorm_rows, matmul_nt, norm, softmax_wide, Matrix};
use crate::num::{round_half_up, Scalar};
use crate::reservoir::Reservoir;

/// Keep-rate configuration applied at every condensation stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondensationPlan {
    pub keep_rate: f64,
    /// Merged-away to pruned tokens among those removed.
    pub merge_prune_ratio: f64,
    pub centers: usize,
}

/// Token bookkeeping of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub n_in: usize,
    pub n_final: usize,
    pub n_pruned: usize,
    pub n_after_prune: usize,
    pub n_untouched: usize,
    pub band: usize,
    pub centers: usize,
}

impl StageCounts {
    pub fn is_identity(&self) -> bool {
        self.n_final == self.n_in
    }
}

impl CondensationPlan {
    pub fn new(keep_rate: f64, merge_prune_ratio: f64, centers: usize) -> Result<Self> {
        if !(keep_rate > 0.0 && keep_rate <= 1.0) {
            return Err(TcaError::Config(format!("keep rate {keep_rate} outside (0, 1]")));
        }
        if !(merge_prune_ratio >= 0.0) || !merge_prune_ratio.is_finite() {
            return Err(TcaError::Config(format!(
                "merge:prune ratio {merge_prune_ratio} must be a nonnegative number"
            )));
        }
        Ok(Self {
            keep_rate,
            merge_prune_ratio,
            centers,
        })
    }

    /// Pure pruning at the given keep rate.
    pub fn pruning_only(keep_rate: f64) -> Result<Self> {
        Self::new(keep_rate, 0.0, 0)
    }

    pub fn stage(&self, n_in: usize) -> StageCounts {
        let n_final = round_half_up(self.keep_rate * n_in as f64).clamp(1.min(n_in), n_in);
        let removed = n_in - n_final;
        let n_pruned = if self.centers == 0 {
            removed
        } else {
            round_half_up(removed as f64 / (1.0 + self.merge_prune_ratio)).min(removed)
        };
        let n_after_prune = n_in - n_pruned;
        if n_after_prune == n_final {
            // nothing left to merge
            return StageCounts {
                n_in,
                n_final,
                n_pruned,
                n_after_prune,
                n_untouched: n_final,
                band: 0,
                centers: 0,
            };
        }
        let centers = self.centers.min(n_final);
        let n_untouched = n_final - centers;
        StageCounts {
            n_in,
            n_final,
            n_pruned,
            n_after_prune,
            n_untouched,
            band: n_after_prune - n_untouched,
            centers,
        }
    }
}

/// Mean per-head rank of each patch token; rank 1 is the most attended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossHeadScore(pub Vec<f64>);

/// Ranks of `values` by descending value, ties by ascending position.
fn descending_ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut rank = vec![0; values.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r + 1;
    }
    rank
}

/// Averages per-head ranks of an `H × n` logit matrix.
pub fn cross_head_rank<T: Scalar>(scores: &Matrix<T>) -> CrossHeadScore {
    let (heads, n) = scores.shape();
    let mut sum = vec![0.0f64; n];
    for h in 0..heads {
        let row: Vec<f64> = scores.row(h).iter().map(|v| v.wide()).collect();
        for (s, r) in sum.iter_mut().zip(descending_ranks(&row)) {
            *s += r as f64;
        }
    }
    CrossHeadScore(sum.into_iter().map(|s| s / heads.max(1) as f64).collect())
}

/// Head-averaged attention probability of the anchor-position query to each
/// patch, from already normalized rows.
pub fn baseline_scores_from_probs<T: Scalar>(probs: &Matrix<T>) -> Vec<f64> {
    let (heads, n) = probs.shape();
    let mut s = vec![0.0f64; n];
    for h in 0..heads {
        for (a, p) in s.iter_mut().zip(probs.row(h)) {
            *a += p.wide();
        }
    }
    s.into_iter().map(|v| v / heads as f64).collect()
}

/// Head-averaged softmaxed cls-to-patch attention.
pub fn baseline_scores<T: Scalar>(trace: &BlockTrace<T>) -> Vec<f64> {
    let (heads, n) = trace.cls_logits.shape();
    let mut s = vec![0.0f64; n];
    for h in 0..heads {
        for (a, p) in s.iter_mut().zip(softmax_wide(trace.cls_logits.row(h), 1.0)) {
            *a += p;
        }
    }
    s.into_iter().map(|v| v / heads as f64).collect()
}

/// Converts higher-is-better scores into the rank form used by [`partition`].
pub fn rank_scores(scores: &[f64]) -> CrossHeadScore {
    CrossHeadScore(descending_ranks(scores).into_iter().map(|r| r as f64).collect())
}

/// Per-head patch scores with the domain anchor as an extra query row.
///
/// `keys` has one row per token (row 0 is the anchor position). Each patch
/// score is the mean of the cls-query and anchor-query logits; without an
/// anchor the cls-query logit is returned unchanged.
pub fn augmented_scores<T: Scalar>(
    keys: &Matrix<T>,
    cls_query: &[T],
    anchor_query: Option<&[T]>,
    heads: usize,
) -> Matrix<T> {
    let (m, d) = keys.shape();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Matrix::zeros(heads, m.saturating_sub(1));
    for h in 0..heads {
        let r = h * hd..(h + 1) * hd;
        for j in 1..m {
            let k = &keys.row(j)[r.clone()];
            let cls = dot(&cls_query[r.clone()], k) * scale;
            let v = match anchor_query {
                Some(a) => 0.5 * (cls + dot(&a[r.clone()], k) * scale),
                None => cls,
            };
            out.set(h, j - 1, T::of(v));
        }
    }
    out
}

/// [`augmented_scores`] computed from a block-input token set and the block's
/// weights.
pub fn augmented_scores_for_block<T: Scalar>(
    block_input: &TokenMatrix<T>,
    anchor: Option<&[T]>,
    w: &BlockWeights<T>,
    heads: usize,
) -> Result<Matrix<T>> {
    let normed = layernorm_rows(&block_input.tokens, &w.ln1.gain, &w.ln1.bias)?;
    let mut keys = matmul_nt(&normed, &w.wk)?;
    crate::kernels::add_bias(&mut keys, &w.bk)?;
    let cls_query = w.query(block_input.cls())?;
    let anchor_query = anchor.map(|a| w.query(a)).transpose()?;
    Ok(augmented_scores(&keys, &cls_query, anchor_query.as_deref(), heads))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    /// Best-ranked patches, kept as they are.
    pub untouched: Vec<usize>,
    /// Merge band, in rank order (best first).
    pub band: Vec<usize>,
    pub pruned: Vec<usize>,
}

/// Splits patches by ascending score (ties by position).
pub fn partition(scores: &CrossHeadScore, counts: &StageCounts) -> Partition {
    let s = &scores.0;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
    let band_end = counts.n_untouched + counts.band;
    Partition {
        untouched: order[..counts.n_untouched].to_vec(),
        band: order[counts.n_untouched..band_end].to_vec(),
        pruned: order[band_end..].to_vec(),
    }
}

/// Distance between the unit directions of `a` and `b`, `sqrt(2 (1 - cos))`.
/// Orders pairs exactly as `1 - cos` does but satisfies the triangle
/// inequality.
/// A zero vector sits at distance `sqrt(2)` from everything, matching a
/// cosine of zero.
fn cosine_distance<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return std::f64::consts::SQRT_2;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.wide() / na - y.wide() / nb).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Farthest-first K-center selection under [`cosine_distance`], starting from
/// `seed`. Ties go to the lower index. Returns every index when
/// `k >= points.len()`.
pub fn kcenter_greedy<T: Scalar>(points: &[&[T]], k: usize, seed: usize) -> Vec<usize> {
    let n = points.len();
    if k >= n {
        return (0..n).collect();
    }
    if k == 0 {
        return Vec::new();
    }
    let mut centers = vec![seed];
    let mut chosen = vec![false; n];
    chosen[seed] = true;
    let mut nearest: Vec<f64> = points.iter().map(|p| cosine_distance(p, points[seed])).collect();
    while centers.len() < k {
        let mut far: Option<usize> = None;
        for i in (0..n).filter(|&i| !chosen[i]) {
            if far.is_none_or(|f| nearest[i] > nearest[f]) {
                far = Some(i);
            }
        }
        let f = far.expect("k < n leaves an unchosen point");
        chosen[f] = true;
        centers.push(f);
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(cosine_distance(p, points[f]));
        }
    }
    centers
}

/// Largest distance from any point to its nearest center.
pub fn kcenter_radius<T: Scalar>(points: &[&[T]], centers: &[usize]) -> f64 {
    points
        .iter()
        .map(|p| {
            centers
                .iter()
                .map(|&c| cosine_distance(p, points[c]))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Assigns each point to its nearest center (ties to the earlier center;
/// centers always own themselves) and averages every cluster.
pub fn merge_clusters<T: Scalar>(points: &[&[T]], centers: &[usize]) -> (Matrix<T>, Vec<usize>) {
    let dim = points.first().map_or(0, |p| p.len());
    let assignment: Vec<usize> = (0..points.len())
        .map(|i| {
            if let Some(k) = centers.iter().position(|&c| c == i) {
                return k;
            }
            let mut best = (0, f64::INFINITY);
            for (k, &c) in centers.iter().enumerate() {
                let d = cosine_distance(points[i], points[c]);
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect();
    let mut sums = vec![vec![0.0f64; dim]; centers.len()];
    let mut counts = vec![0usize; centers.len()];
    for (p, &k) in points.iter().zip(&assignment) {
        counts[k] += 1;
        for (s, v) in sums[k].iter_mut().zip(p.iter()) {
            *s += v.wide();
        }
    }
    let mut merged = Matrix::zeros(centers.len(), dim);
    for (k, s) in sums.iter().enumerate() {
        let n = counts[k].max(1) as f64;
        for (o, v) in merged.row_mut(k).iter_mut().zip(s) {
            *o = T::of(v / n);
        }
    }
    (merged, assignment)
}

/// What one stage did to its live patches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageOutcome {
    pub partition: Partition,
    /// Band positions chosen as centers, in selection order.
    pub centers: Vec<usize>,
    /// `(band position, cluster)` for every band member.
    pub assignment: Vec<(usize, usize)>,
}

/// Prune, then merge the band into `counts.centers` coreset tokens.
///
/// Output rows: anchor position, untouched patches in their original order,
/// then one merged token per center.
pub fn condense<T: Scalar>(
    t: TokenMatrix<T>,
    scores: &CrossHeadScore,
    counts: &StageCounts,
) -> Result<(TokenMatrix<T>, StageOutcome)> {
    if scores.0.len() != t.n_patches() || counts.n_in != t.n_patches() {
        return Err(TcaError::Shape(format!(
            "{} scores and a plan for {} patches over {} live patches",
            scores.0.len(),
            counts.n_in,
            t.n_patches()
        )));
    }
    if counts.is_identity() {
        let partition = Partition {
            untouched: (0..t.n_patches()).collect(),
            ..Default::default()
        };
        return Ok((
            t,
            StageOutcome {
                partition,
                ..Default::default()
            },
        ));
    }
    let part = partition(scores, counts);

    let mut untouched = part.untouched.clone();
    untouched.sort_unstable();
    let mut band = part.band.clone();
    band.sort_unstable();
    let band_points: Vec<&[T]> = band.iter().map(|&i| t.patch(i)).collect();
    let seed = part
        .band
        .first()
        .map_or(0, |best| band.iter().position(|b| b == best).unwrap());
    let center_local = kcenter_greedy(&band_points, counts.centers, seed);
    let (merged, assign) = merge_clusters(&band_points, &center_local);

    let mut rows: Vec<usize> = Vec::with_capacity(1 + counts.n_final);
    rows.push(0);
    rows.extend(untouched.iter().map(|&i| i + 1));
    let mut tokens = t.tokens.select_rows(&rows);
    let mut patch_ids: Vec<Vec<usize>> = untouched.iter().map(|&i| t.patch_ids[i].clone()).collect();
    for k in 0..center_local.len() {
        tokens.push_row(merged.row(k))?;
        let mut ids: Vec<usize> = band
            .iter()
            .zip(&assign)
            .filter(|(_, &a)| a == k)
            .flat_map(|(&b, _)| t.patch_ids[b].iter().copied())
            .collect();
        ids.sort_unstable();
        patch_ids.push(ids);
    }
    let outcome = StageOutcome {
        centers: center_local.iter().map(|&c| band[c]).collect(),
        assignment: band.iter().copied().zip(assign).collect(),
        partition: part,
    };
    Ok((TokenMatrix { tokens, patch_ids }, outcome))
}

/// Per-original-patch code of one stage: `-2` already removed earlier, `-1`
/// pruned, `0` kept, `k + 1` merged into cluster `k`.
pub type StageMask = Vec<i32>;

pub const MASK_ABSENT: i32 = -2;
pub const MASK_PRUNED: i32 = -1;
pub const MASK_KEPT: i32 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub block: usize,
    pub counts: StageCounts,
    /// Class whose stored anchor guided scoring, if any.
    pub anchor_class: Option<usize>,
    pub mask: StageMask,
}

fn stage_mask<T>(t: &TokenMatrix<T>, outcome: &StageOutcome, n_original: usize) -> StageMask {
    let mut mask = vec![MASK_ABSENT; n_original];
    let mut mark = |pos: usize, code: i32| {
        for &id in &t.patch_ids[pos] {
            mask[id] = code;
        }
    };
    for &i in &outcome.partition.untouched {
        mark(i, MASK_KEPT);
    }
    for &i in &outcome.partition.pruned {
        mark(i, MASK_PRUNED);
    }
    for &(i, k) in &outcome.assignment {
        mark(i, k as i32 + 1);
    }
    mask
}

/// How patches are ranked at each stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scoring {
    /// Anchor-augmented cross-head ranks.
    DomainAware,
    /// Head-averaged cls attention probabilities.
    ClsAttention,
}

/// Encoder hook applying a [`CondensationPlan`] at every condensation block.
pub struct Condenser<'r, T> {
    plan: CondensationPlan,
    scoring: Scoring,
    reservoir: Option<&'r Reservoir<T>>,
    n_original: usize,
    stages: Vec<StageReport>,
}

impl<'r, T: Scalar> Condenser<'r, T> {
    pub fn new(
        plan: CondensationPlan,
        scoring: Scoring,
        reservoir: Option<&'r Reservoir<T>>,
        n_original: usize,
    ) -> Self {
        Self {
            plan,
            scoring,
            reservoir,
            n_original,
            stages: Vec::new(),
        }
    }

    pub fn into_stages(self) -> Vec<StageReport> {
        self.stages
    }
}

impl<T: Scalar> CondensationHook<T> for Condenser<'_, T> {
    fn target_patches(&self, _block: usize, n_in: usize) -> usize {
        self.plan.stage(n_in).n_final
    }

    fn condense(&mut self, ctx: &StageContext<'_, T>, tokens: TokenMatrix<T>) -> Result<Condensed<T>> {
        let counts = self.plan.stage(tokens.n_patches());
        if counts.is_identity() {
            let outcome = StageOutcome {
                partition: Partition {
                    untouched: (0..tokens.n_patches()).collect(),
                    ..Default::default()
                },
                ..Default::default()
            };
            self.stages.push(StageReport {
                block: ctx.block,
                counts,
                anchor_class: None,
                mask: stage_mask(&tokens, &outcome, self.n_original),
            });
            return Ok(Condensed {
                tokens,
                anchor_logits: None,
            });
        }
        let (scores, anchor_class, anchor_logits) = match self.scoring {
            Scoring::ClsAttention => {
                let mut s = vec![0.0f64; tokens.n_patches()];
                for h in 0..ctx.heads {
                    for (a, p) in s.iter_mut().zip(softmax_wide(ctx.cls_logits.row(h), 1.0)) {
                        *a += p;
                    }
                }
                (rank_scores(&s), None, None)
            }
            Scoring::DomainAware => {
                let anchor = self
                    .reservoir
                    .and_then(|r| r.select_anchor_class(ctx.block_input_cls, ctx.block));
                match anchor {
                    Some((class, a)) => {
                        let q = ctx.weights.query(a)?;
                        let logits = augmented_scores(ctx.keys, ctx.cls_query, Some(&q), ctx.heads);
                        (cross_head_rank(&logits), Some(class), Some(logits))
                    }
                    None => (cross_head_rank(ctx.cls_logits), None, None),
                }
            }
        };
        let mask_source = tokens.clone();
        let (out, outcome) = condense(tokens, &scores, &counts)?;
        self.stages.push(StageReport {
            block: ctx.block,
            counts,
            anchor_class,
            mask: stage_mask(&mask_source, &outcome, self.n_original),
        });
        Ok(Condensed {
            tokens: out,
            anchor_logits,
        })
    }
}
