//! Pre-norm ViT visual tower with an anchor-position (`<cls>`) token.
//!
//! Block layout: `LN -> MHSA -> residual -> [condense] -> LN -> MLP -> residual`.
//! Blocks listed in [`EncoderConfig::condense_blocks`] hand their
//! post-attention token set to a [`CondensationHook`] before the MLP runs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::error::{Result, TcaError};
use crate::kernels::{
    add_bias, cosine, dot, gelu_in_place, layernorm, layernorm_rows, matmul_nt, matvec, softmax_wide, Matrix,
    LAYERNORM_EPS,
};
use crate::num::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_ratio: f64,
    pub embed_dim: usize,
    /// 1-indexed block ids, strictly increasing.
    pub condense_blocks: Vec<usize>,
}

impl EncoderConfig {
    /// CLIP ViT-B/16 visual tower geometry.
    pub fn vit_b16() -> Self {
        Self {
            image_side: 224,
            patch_side: 16,
            layers: 12,
            heads: 12,
            width: 768,
            mlp_ratio: 4.0,
            embed_dim: 512,
            condense_blocks: vec![4, 7, 10],
        }
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_side * self.patch_side
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.width as f64 * self.mlp_ratio).round() as usize
    }

    pub fn is_condense_block(&self, block: usize) -> bool {
        self.condense_blocks.binary_search(&block).is_ok()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TcaError::Config(m));
        if self.patch_side == 0 || self.image_side == 0 || self.image_side % self.patch_side != 0 {
            return bad(format!(
                "image side {} is not a positive multiple of patch side {}",
                self.image_side, self.patch_side
            ));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if self.layers == 0 || self.embed_dim == 0 || self.mlp_ratio <= 0.0 {
            return bad("layers, embed_dim and mlp_ratio must be positive".into());
        }
        if self.condense_blocks.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "condense blocks {:?} are not strictly increasing",
                self.condense_blocks
            ));
        }
        if let Some(&b) = self.condense_blocks.iter().find(|&&b| b == 0 || b > self.layers) {
            return bad(format!("condense block {b} outside [1, {}]", self.layers));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            gain: vec![T::one(); dim],
            bias: vec![T::zero(); dim],
        }
    }

    pub fn apply(&self, v: &[T]) -> Result<Vec<T>> {
        layernorm(v, &self.gain, &self.bias, LAYERNORM_EPS)
    }

    pub fn apply_rows(&self, m: &Matrix<T>) -> Result<Matrix<T>> {
        layernorm_rows(m, &self.gain, &self.bias)
    }
}

/// Weights of one transformer block. Projection matrices are stored
/// `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<T> {
    pub ln1: LayerNormParams<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub bq: Vec<T>,
    pub bk: Vec<T>,
    pub bv: Vec<T>,
    pub bo: Vec<T>,
    pub ln2: LayerNormParams<T>,
    pub mlp_in_w: Matrix<T>,
    pub mlp_in_b: Vec<T>,
    pub mlp_out_w: Matrix<T>,
    pub mlp_out_b: Vec<T>,
}

impl<T: Scalar> BlockWeights<T> {
    /// Query projection of a single residual-stream vector.
    pub fn query(&self, x: &[T]) -> Result<Vec<T>> {
        let normed = self.ln1.apply(x)?;
        let mut q = matvec(&self.wq, &normed)?;
        for (v, b) in q.iter_mut().zip(&self.bq) {
            *v += *b;
        }
        Ok(q)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T> {
    /// `width × 3·patch²`, applied to channel-major flattened patches.
    pub patch_embed: Matrix<T>,
    /// `(N + 1) × width`; row 0 belongs to the anchor-position token.
    pub pos_embed: Matrix<T>,
    pub cls_init: Vec<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub ln_post: LayerNormParams<T>,
    /// `embed_dim × width`.
    pub proj: Matrix<T>,
}

fn expect_shape<T: Scalar>(name: &str, m: &Matrix<T>, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(TcaError::Shape(format!(
            "{name} is {:?}, expected ({rows}, {cols})",
            m.shape()
        )));
    }
    Ok(())
}

fn expect_len<T>(name: &str, v: &[T], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(TcaError::Shape(format!(
            "{name} has {} entries, expected {len}",
            v.len()
        )));
    }
    Ok(())
}

impl<T: Scalar> EncoderWeights<T> {
    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        cfg.validate()?;
        let d = cfg.width;
        let hidden = cfg.mlp_hidden();
        expect_shape("patch_embed", &self.patch_embed, d, cfg.patch_dim())?;
        expect_shape("pos_embed", &self.pos_embed, cfg.num_patches() + 1, d)?;
        expect_len("cls", &self.cls_init, d)?;
        if self.blocks.len() != cfg.layers {
            return Err(TcaError::Shape(format!(
                "{} blocks for {} layers",
                self.blocks.len(),
                cfg.layers
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks/{i}/{s}");
            expect_len(&p("ln1.g"), &b.ln1.gain, d)?;
            expect_len(&p("ln1.b"), &b.ln1.bias, d)?;
            for (n, m) in [("wq", &b.wq), ("wk", &b.wk), ("wv", &b.wv), ("wo", &b.wo)] {
                expect_shape(&p(n), m, d, d)?;
            }
            for (n, v) in [("bq", &b.bq), ("bk", &b.bk), ("bv", &b.bv), ("bo", &b.bo)] {
                expect_len(&p(n), v, d)?;
            }
            expect_len(&p("ln2.g"), &b.ln2.gain, d)?;
            expect_len(&p("ln2.b"), &b.ln2.bias, d)?;
            expect_shape(&p("mlp_in.w"), &b.mlp_in_w, hidden, d)?;
            expect_len(&p("mlp_in.b"), &b.mlp_in_b, hidden)?;
            expect_shape(&p("mlp_out.w"), &b.mlp_out_w, d, hidden)?;
            expect_len(&p("mlp_out.b"), &b.mlp_out_b, d)?;
        }
        expect_len("ln_post.g", &self.ln_post.gain, d)?;
        expect_len("ln_post.b", &self.ln_post.bias, d)?;
        expect_shape("proj", &self.proj, cfg.embed_dim, d)?;
        let finite = |v: &[T]| v.iter().all(|x| x.is_finite());
        let all_finite = self.patch_embed.is_finite()
            && self.pos_embed.is_finite()
            && finite(&self.cls_init)
            && self.proj.is_finite()
            && self.blocks.iter().all(|b| {
                b.wq.is_finite()
                    && b.wk.is_finite()
                    && b.wv.is_finite()
                    && b.wo.is_finite()
                    && b.mlp_in_w.is_finite()
                    && b.mlp_out_w.is_finite()
            });
        if !all_finite {
            return Err(TcaError::Input("weights contain non-finite values".into()));
        }
        Ok(())
    }

    /// Loads `visual/*` entries. The head count comes from `heads` when
    /// given, else from the optional `visual/heads` entry, else `width / 64`.
    /// An empty `condense_blocks` falls back to the optional
    /// `visual/condense_blocks` entry.
    pub fn from_archive(
        archive: &TensorArchive,
        heads: Option<usize>,
        condense_blocks: Vec<usize>,
    ) -> Result<(EncoderConfig, Self)> {
        let patch_embed: Matrix<T> = archive.matrix("visual/patch_embed")?;
        let pos_embed: Matrix<T> = archive.matrix("visual/pos_embed")?;
        let width = patch_embed.rows();
        let patch_side = ((patch_embed.cols() / 3) as f64).sqrt().round() as usize;
        let grid = ((pos_embed.rows().saturating_sub(1)) as f64).sqrt().round() as usize;
        let mut layers = 0;
        while archive.contains(&format!("visual/blocks/{layers}/wq")) {
            layers += 1;
        }
        let heads = match heads {
            Some(h) => h,
            None if archive.contains("visual/heads") => archive.scalar_i64("visual/heads")? as usize,
            None if width % 64 == 0 => width / 64,
            None => {
                return Err(TcaError::Config(
                    "head count unknown: no visual/heads entry and width not a multiple of 64".into(),
                ))
            }
        };
        let mut blocks = Vec::with_capacity(layers);
        for i in 0..layers {
            let n = |s: &str| format!("visual/blocks/{i}/{s}");
            let bias = |s: &str| -> Result<Vec<T>> {
                if archive.contains(&n(s)) {
                    archive.vector(&n(s))
                } else {
                    Ok(vec![T::zero(); width])
                }
            };
            blocks.push(BlockWeights {
                ln1: LayerNormParams {
                    gain: archive.vector(&n("ln1.g"))?,
                    bias: archive.vector(&n("ln1.b"))?,
                },
                wq: archive.matrix(&n("wq"))?,
                wk: archive.matrix(&n("wk"))?,
                wv: archive.matrix(&n("wv"))?,
                wo: archive.matrix(&n("wo"))?,
                bq: bias("bq")?,
                bk: bias("bk")?,
                bv: bias("bv")?,
                bo: bias("bo")?,
                ln2: LayerNormParams {
                    gain: archive.vector(&n("ln2.g"))?,
                    bias: archive.vector(&n("ln2.b"))?,
                },
                mlp_in_w: archive.matrix(&n("mlp_in.w"))?,
                mlp_in_b: archive.vector(&n("mlp_in.b"))?,
                mlp_out_w: archive.matrix(&n("mlp_out.w"))?,
                mlp_out_b: archive.vector(&n("mlp_out.b"))?,
            });
        }
        let proj: Matrix<T> = archive.matrix("visual/proj")?;
        let mlp_ratio = blocks.first().map_or(4.0, |b| b.mlp_in_w.rows() as f64 / width as f64);
        let condense_blocks = if condense_blocks.is_empty() && archive.contains("visual/condense_blocks") {
            let (_, ids) = archive.i64("visual/condense_blocks")?;
            ids.iter()
                .map(|&b| usize::try_from(b).map_err(|_| TcaError::Archive(format!("negative condense block {b}"))))
                .collect::<Result<Vec<_>>>()?
        } else {
            condense_blocks
        };
        let cfg = EncoderConfig {
            image_side: grid * patch_side,
            patch_side,
            layers,
            heads,
            width,
            mlp_ratio,
            embed_dim: proj.rows(),
            condense_blocks,
        };
        let weights = Self {
            patch_embed,
            pos_embed,
            cls_init: archive.vector("visual/cls")?,
            blocks,
            ln_post: LayerNormParams {
                gain: archive.vector("visual/ln_post.g")?,
                bias: archive.vector("visual/ln_post.b")?,
            },
            proj,
        };
        weights.validate(&cfg)?;
        Ok((cfg, weights))
    }

    pub fn write_to(&self, cfg: &EncoderConfig, archive: &mut TensorArchive) -> Result<()> {
        archive.insert_matrix("visual/patch_embed", &self.patch_embed)?;
        archive.insert_matrix("visual/pos_embed", &self.pos_embed)?;
        archive.insert_vector("visual/cls", &self.cls_init)?;
        archive.insert_scalar_i64("visual/heads", cfg.heads as i64)?;
        if !cfg.condense_blocks.is_empty() {
            let ids = cfg.condense_blocks.iter().map(|&b| b as i64).collect();
            archive.insert_i64("visual/condense_blocks", vec![cfg.condense_blocks.len()], ids)?;
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let n = |s: &str| format!("visual/blocks/{i}/{s}");
            archive.insert_vector(n("ln1.g"), &b.ln1.gain)?;
            archive.insert_vector(n("ln1.b"), &b.ln1.bias)?;
            archive.insert_matrix(n("wq"), &b.wq)?;
            archive.insert_matrix(n("wk"), &b.wk)?;
            archive.insert_matrix(n("wv"), &b.wv)?;
            archive.insert_matrix(n("wo"), &b.wo)?;
            for (name, v) in [("bq", &b.bq), ("bk", &b.bk), ("bv", &b.bv), ("bo", &b.bo)] {
                if v.iter().any(|x| !x.is_zero()) {
                    archive.insert_vector(n(name), v)?;
                }
            }
            archive.insert_vector(n("ln2.g"), &b.ln2.gain)?;
            archive.insert_vector(n("ln2.b"), &b.ln2.bias)?;
            archive.insert_matrix(n("mlp_in.w"), &b.mlp_in_w)?;
            archive.insert_vector(n("mlp_in.b"), &b.mlp_in_b)?;
            archive.insert_matrix(n("mlp_out.w"), &b.mlp_out_w)?;
            archive.insert_vector(n("mlp_out.b"), &b.mlp_out_b)?;
        }
        archive.insert_vector("visual/ln_post.g", &self.ln_post.gain)?;
        archive.insert_vector("visual/ln_post.b", &self.ln_post.bias)?;
        archive.insert_matrix("visual/proj", &self.proj)?;
        Ok(())
    }

    /// `proj · ln_post(x)`: maps a residual-stream anchor token into the
    /// joint embedding space.
    pub fn project(&self, x: &[T]) -> Result<Vec<T>> {
        matvec(&self.proj, &self.ln_post.apply(x)?)
    }
}

/// Live token set: row 0 is the anchor-position token, rows `1..` are patch
/// tokens. `patch_ids[i]` lists the original patch indices folded into row
/// `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix<T> {
    pub tokens: Matrix<T>,
    pub patch_ids: Vec<Vec<usize>>,
}

impl<T: Scalar> TokenMatrix<T> {
    pub fn n_patches(&self) -> usize {
        self.patch_ids.len()
    }

    pub fn cls(&self) -> &[T] {
        self.tokens.row(0)
    }

    pub fn patch(&self, i: usize) -> &[T] {
        self.tokens.row(i + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.rows() != self.patch_ids.len() + 1 {
            return Err(TcaError::Shape(format!(
                "{} token rows for {} patch id lists",
                self.tokens.rows(),
                self.patch_ids.len()
            )));
        }
        if self.patch_ids.is_empty() {
            return Err(TcaError::Shape("token set has no patch tokens".into()));
        }
        if self.patch_ids.iter().any(Vec::is_empty) {
            return Err(TcaError::Shape("patch token without an id".into()));
        }
        Ok(())
    }

    /// Drops patch token `i` (0-based among patches).
    pub fn remove_patch(&mut self, i: usize) {
        self.tokens.remove_row(i + 1);
        self.patch_ids.remove(i);
    }
}

/// Per-block attention record.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTrace<T> {
    /// 1-indexed block id.
    pub block: usize,
    /// Pre-softmax logits of the anchor-position query against each live
    /// patch key, `heads × n`.
    pub cls_logits: Matrix<T>,
    /// Anchor-augmented rows, when the hook scored with a domain anchor.
    pub anchor_logits: Option<Matrix<T>>,
    /// Anchor-position token after the block's MLP residual.
    pub cls_out: Vec<T>,
}

/// Projected attention inputs of one block, shared with the hook so scoring
/// does not recompute them.
#[derive(Clone, Debug)]
pub struct StageContext<'a, T> {
    pub block: usize,
    pub heads: usize,
    /// Anchor-position token at the block input (residual stream).
    pub block_input_cls: &'a [T],
    /// `keys[j]` is the key of token row `j` (row 0 = anchor position).
    pub keys: &'a Matrix<T>,
    pub cls_query: &'a [T],
    pub cls_logits: &'a Matrix<T>,
    pub weights: &'a BlockWeights<T>,
}

pub struct Condensed<T> {
    pub tokens: TokenMatrix<T>,
    pub anchor_logits: Option<Matrix<T>>,
}

/// Reduces the post-attention token set of a condensation block.
pub trait CondensationHook<T: Scalar> {
    /// Patch count the hook promises to return for `n_in` incoming patches.
    fn target_patches(&self, block: usize, n_in: usize) -> usize;

    fn condense(&mut self, ctx: &StageContext<'_, T>, tokens: TokenMatrix<T>) -> Result<Condensed<T>>;
}

/// Returns its input untouched.
pub struct IdentityHook;

impl<T: Scalar> CondensationHook<T> for IdentityHook {
    fn target_patches(&self, _block: usize, n_in: usize) -> usize {
        n_in
    }

    fn condense(&mut self, _ctx: &StageContext<'_, T>, tokens: TokenMatrix<T>) -> Result<Condensed<T>> {
        Ok(Condensed {
            tokens,
            anchor_logits: None,
        })
    }
}

/// Patchify, embed, add positions and prepend the anchor-position token.
///
/// `pixels` is channel-major `3 × side × side`; each patch is flattened as
/// `(channel, row, col)` to match a convolution kernel reshaped to a matrix.
pub fn embed<T: Scalar>(pixels: &[T], cfg: &EncoderConfig, w: &EncoderWeights<T>) -> Result<TokenMatrix<T>> {
    let side = cfg.image_side;
    if pixels.len() != 3 * side * side {
        return Err(TcaError::Input(format!(
            "image has {} values, expected 3x{side}x{side}",
            pixels.len()
        )));
    }
    let (p, grid) = (cfg.patch_side, cfg.grid());
    let n = cfg.num_patches();
    let mut patches = Matrix::zeros(n, cfg.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            let row = patches.row_mut(gy * grid + gx);
            let mut k = 0;
            for c in 0..3 {
                for py in 0..p {
                    let base = c * side * side + (gy * p + py) * side + gx * p;
                    row[k..k + p].copy_from_slice(&pixels[base..base + p]);
                    k += p;
                }
            }
        }
    }
    let emb = matmul_nt(&patches, &w.patch_embed)?;
    let mut tokens = Matrix::zeros(n + 1, cfg.width);
    for (j, v) in tokens.row_mut(0).iter_mut().enumerate() {
        *v = w.cls_init[j] + w.pos_embed.get(0, j);
    }
    for i in 0..n {
        let pos = w.pos_embed.row(i + 1);
        for ((o, e), q) in tokens.row_mut(i + 1).iter_mut().zip(emb.row(i)).zip(pos) {
            *o = *e + *q;
        }
    }
    Ok(TokenMatrix {
        tokens,
        patch_ids: (0..n).map(|i| vec![i]).collect(),
    })
}

fn project_rows<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: &[T]) -> Result<Matrix<T>> {
    let mut out = matmul_nt(x, w)?;
    add_bias(&mut out, b)?;
    Ok(out)
}

struct AttentionOutput<T> {
    out: Matrix<T>,
    keys: Matrix<T>,
    cls_query: Vec<T>,
    cls_logits: Matrix<T>,
}

fn attention<T: Scalar>(x: &Matrix<T>, w: &BlockWeights<T>, heads: usize) -> Result<AttentionOutput<T>> {
    let normed = w.ln1.apply_rows(x)?;
    let q = project_rows(&normed, &w.wq, &w.bq)?;
    let k = project_rows(&normed, &w.wk, &w.bk)?;
    let v = project_rows(&normed, &w.wv, &w.bv)?;
    let (m, d) = x.shape();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let head_logits = |i: usize, h: usize| -> Vec<f64> {
        let r = h * hd..(h + 1) * hd;
        let qi = &q.row(i)[r.clone()];
        (0..m).map(|j| dot(qi, &k.row(j)[r.clone()]) * scale).collect()
    };
    let mix_row = |(i, out): (usize, &mut [T])| {
        for h in 0..heads {
            let probs = softmax_wide(&head_logits(i, h), 1.0);
            for c in 0..hd {
                let mut acc = 0.0f64;
                for (j, pj) in probs.iter().enumerate() {
                    acc += pj * v.get(j, h * hd + c).wide();
                }
                out[h * hd + c] = T::of(acc);
            }
        }
    };
    let mut mixed = vec![T::zero(); m * d];
    if m * m * d >= 1 << 16 {
        mixed.par_chunks_mut(d).enumerate().for_each(mix_row);
    } else {
        mixed.chunks_mut(d).enumerate().for_each(mix_row);
    }
    let mixed = Matrix::from_vec(m, d, mixed)?;

    let mut cls_logits = Matrix::zeros(heads, m - 1);
    for h in 0..heads {
        for (j, l) in head_logits(0, h).into_iter().skip(1).enumerate() {
            cls_logits.set(h, j, T::of(l));
        }
    }
    let out = project_rows(&mixed, &w.wo, &w.bo)?;
    let cls_query = q.row(0).to_vec();
    Ok(AttentionOutput {
        out,
        keys: k,
        cls_query,
        cls_logits,
    })
}

/// Runs one block. `block` is 1-indexed; the hook is only consulted when the
/// block is a condensation block.
pub fn forward_block<T: Scalar>(
    t: TokenMatrix<T>,
    block: usize,
    cfg: &EncoderConfig,
    w: &EncoderWeights<T>,
    hook: Option<&mut dyn CondensationHook<T>>,
) -> Result<(TokenMatrix<T>, BlockTrace<T>)> {
    t.validate()?;
    if t.tokens.cols() != cfg.width {
        return Err(TcaError::Shape(format!(
            "tokens have width {}, encoder width is {}",
            t.tokens.cols(),
            cfg.width
        )));
    }
    let bw = &w.blocks[block - 1];
    let att = attention(&t.tokens, bw, cfg.heads)?;

    let input_cls = t.cls().to_vec();
    let mut residual = t.tokens;
    for (r, a) in residual.as_mut_rows().zip(att.out.iter_rows()) {
        for (x, y) in r.iter_mut().zip(a) {
            *x += *y;
        }
    }
    let mut tokens = TokenMatrix {
        tokens: residual,
        patch_ids: t.patch_ids,
    };

    let mut anchor_logits = None;
    if let Some(hook) = hook.filter(|_| cfg.is_condense_block(block)) {
        let n_in = tokens.n_patches();
        let target = hook.target_patches(block, n_in);
        let ctx = StageContext {
            block,
            heads: cfg.heads,
            block_input_cls: &input_cls,
            keys: &att.keys,
            cls_query: &att.cls_query,
            cls_logits: &att.cls_logits,
            weights: bw,
        };
        let out = hook.condense(&ctx, tokens)?;
        let got = out.tokens.n_patches();
        if got != target || out.tokens.validate().is_err() || out.tokens.tokens.cols() != cfg.width {
            return Err(TcaError::Contract {
                block,
                detail: format!("expected {target} patch tokens from {n_in}, hook returned {got}"),
            });
        }
        tokens = out.tokens;
        anchor_logits = out.anchor_logits;
    }

    let h = bw.ln2.apply_rows(&tokens.tokens)?;
    let mut h = project_rows(&h, &bw.mlp_in_w, &bw.mlp_in_b)?;
    gelu_in_place(&mut h);
    let h = project_rows(&h, &bw.mlp_out_w, &bw.mlp_out_b)?;
    for (r, a) in tokens.tokens.as_mut_rows().zip(h.iter_rows()) {
        for (x, y) in r.iter_mut().zip(a) {
            *x += *y;
        }
    }
    let trace = BlockTrace {
        block,
        cls_logits: att.cls_logits,
        anchor_logits,
        cls_out: tokens.cls().to_vec(),
    };
    Ok((tokens, trace))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoded<T> {
    /// Image embedding in the joint space.
    pub z: Vec<T>,
    /// `layers × width`; row `l` is the anchor-position output of block `l+1`.
    pub anchor_stack: Matrix<T>,
    pub traces: Vec<BlockTrace<T>>,
    /// Live patch count entering each block, followed by the final count.
    pub patch_counts: Vec<usize>,
}

pub fn encode<T: Scalar>(
    pixels: &[T],
    cfg: &EncoderConfig,
    w: &EncoderWeights<T>,
    hook: Option<&mut dyn CondensationHook<T>>,
) -> Result<Encoded<T>> {
    let tokens = embed(pixels, cfg, w)?;
    encode_tokens(tokens, cfg, w, hook)
}

/// Encoder pass starting from an already embedded token set.
pub fn encode_tokens<T: Scalar>(
    mut tokens: TokenMatrix<T>,
    cfg: &EncoderConfig,
    w: &EncoderWeights<T>,
    mut hook: Option<&mut dyn CondensationHook<T>>,
) -> Result<Encoded<T>> {
    let mut anchor_stack = Matrix::zeros(cfg.layers, cfg.width);
    let mut traces = Vec::with_capacity(cfg.layers);
    let mut patch_counts = Vec::with_capacity(cfg.layers + 1);
    for block in 1..=cfg.layers {
        patch_counts.push(tokens.n_patches());
        let h = hook.as_mut().map(|h| &mut **h as &mut dyn CondensationHook<T>);
        let (next, trace) = forward_block(tokens, block, cfg, w, h)?;
        anchor_stack.row_mut(block - 1).copy_from_slice(next.cls());
        traces.push(trace);
        tokens = next;
    }
    patch_counts.push(tokens.n_patches());
    let z = w.project(tokens.cls())?;
    Ok(Encoded {
        z,
        anchor_stack,
        traces,
        patch_counts,
    })
}

/// Class probabilities `softmax_c(cos(z, t_c) / tau)`.
pub fn zero_shot_probs<T: Scalar>(z: &[T], text: &Matrix<T>, tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(TcaError::Domain(format!("temperature {tau} must be positive")));
    }
    let cos = text.iter_rows().map(|t| cosine(z, t)).collect::<Result<Vec<f64>>>()?;
    Ok(softmax_wide(&cos, 1.0 / tau))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            image_side: 4,
            patch_side: 2,
            layers: 1,
            heads: 2,
            width: 4,
            mlp_ratio: 2.0,
            embed_dim: 3,
            condense_blocks: vec![1],
        }
    }

    fn zero_weights(cfg: &EncoderConfig) -> EncoderWeights<f64> {
        let d = cfg.width;
        let block = BlockWeights {
            ln1: LayerNormParams::identity(d),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            bq: vec![0.0; d],
            bk: vec![0.0; d],
            bv: vec![0.0; d],
            bo: vec![0.0; d],
            ln2: LayerNormParams::identity(d),
            mlp_in_w: Matrix::zeros(cfg.mlp_hidden(), d),
            mlp_in_b: vec![0.0; cfg.mlp_hidden()],
            mlp_out_w: Matrix::zeros(d, cfg.mlp_hidden()),
            mlp_out_b: vec![0.0; d],
        };
        EncoderWeights {
            patch_embed: Matrix::from_vec(
                d,
                cfg.patch_dim(),
                (0..d * cfg.patch_dim()).map(|i| (i % 5) as f64 - 2.0).collect(),
            )
            .unwrap(),
            pos_embed: Matrix::zeros(cfg.num_patches() + 1, d),
            cls_init: vec![0.5, -0.5, 1.0, 0.0],
            blocks: vec![block; cfg.layers],
            ln_post: LayerNormParams::identity(d),
            proj: Matrix::from_vec(
                cfg.embed_dim,
                d,
                (0..cfg.embed_dim * d).map(|i| i as f64 * 0.1).collect(),
            )
            .unwrap(),
        }
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::vit_b16().validate().is_ok());
        assert_eq!(EncoderConfig::vit_b16().num_patches(), 196);
        let mut c = tiny_cfg();
        c.image_side = 5;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.condense_blocks = vec![2];
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_image_embeds_to_cls_only() {
        let cfg = tiny_cfg();
        let w = zero_weights(&cfg);
        let t = embed(&vec![0.0; 48], &cfg, &w).unwrap();
        assert_eq!(t.n_patches(), 4);
        assert_eq!(t.cls(), &w.cls_init[..]);
        for i in 0..4 {
            assert!(t.patch(i).iter().all(|&v| v == 0.0));
        }
        assert_eq!(t.patch_ids, vec![vec![0], vec![1], vec![2], vec![3]]);
    }

    #[test]
    fn swapping_identical_patches_preserves_token_multiset() {
        let cfg = tiny_cfg();
        let w = zero_weights(&cfg);
        // patch 0 (top-left) and patch 3 (bottom-right) share content.
        let mut img = vec![0.0; 48];
        for c in 0..3 {
            for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                img[c * 16 + y * 4 + x] = (c + y + x) as f64;
                img[c * 16 + (y + 2) * 4 + x + 2] = (c + y + x) as f64;
            }
            img[c * 16 + 2] = 9.0; // patch 1 differs
        }
        let t = embed(&img, &cfg, &w).unwrap();
        assert_eq!(t.patch(0), t.patch(3));
        assert_ne!(t.patch(0), t.patch(1));
    }

    #[test]
    fn embed_rejects_wrong_size() {
        let cfg = tiny_cfg();
        let w = zero_weights(&cfg);
        assert!(matches!(embed(&vec![0.0; 47], &cfg, &w), Err(TcaError::Input(_))));
    }

    #[test]
    fn zero_shot_cases() {
        let z = [1.0f64, 0.0, 0.0];
        let text = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let p = zero_shot_probs(&z, &text, 0.01).unwrap();
        assert!(p[0] > 1.0 - 1e-9);

        let same = Matrix::from_rows(&[[1.0, 2.0, 3.0]; 4]).unwrap();
        for q in zero_shot_probs(&z, &same, 0.01).unwrap() {
            assert!((q - 0.25).abs() < 1e-12);
        }

        // cosines 0.6 and 0.4 against z = e0
        let text = Matrix::from_rows(&[[0.6, 0.8, 0.0], [0.4, 0.0, 0.916_515_138_991_168]]).unwrap();
        let p = zero_shot_probs(&z, &text, 0.01).unwrap();
        let e = (-20.0f64).exp();
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((p[0] - 0.999_999_998).abs() < 1e-8);
        assert!((p[1] - 2.06e-9).abs() < 1e-8);

        let bad = Matrix::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            zero_shot_probs(&z, &bad, 0.01),
            Err(TcaError::DegenerateVector(_))
        ));
    }

    struct Dropper;
    impl CondensationHook<f64> for Dropper {
        fn target_patches(&self, _b: usize, n: usize) -> usize {
            n - 1
        }
        fn condense(&mut self, _c: &StageContext<'_, f64>, t: TokenMatrix<f64>) -> Result<Condensed<f64>> {
            Ok(Condensed {
                tokens: t,
                anchor_logits: None,
            })
        }
    }

    #[test]
    fn hook_breaking_its_count_is_a_contract_error() {
        let cfg = tiny_cfg();
        let w = zero_weights(&cfg);
        let err = encode(&vec![0.1; 48], &cfg, &w, Some(&mut Dropper)).unwrap_err();
        assert!(matches!(err, TcaError::Contract { block: 1, .. }));
    }
}
