//! Analytic compute model. One multiply-accumulate counts as one FLOP;
//! layernorm, softmax and GELU are ignored.

use crate::condensation::CondensationPlan;
use crate::encoder::EncoderConfig;

/// Token counts seen by one block. Counts include the anchor-position token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockLoad {
    pub attn_tokens: usize,
    pub mlp_tokens: usize,
    /// Patch keys scored against a domain anchor query at this block.
    pub scored_keys: usize,
}

pub fn block_flops(cfg: &EncoderConfig, load: BlockLoad) -> u64 {
    let d = cfg.width as u64;
    let (m, k) = (load.attn_tokens as u64, load.mlp_tokens as u64);
    let attention = 4 * m * d * d + 2 * m * m * d;
    let mlp = 2 * k * d * cfg.mlp_hidden() as u64;
    attention + mlp + 2 * d * load.scored_keys as u64
}

pub fn patch_embed_flops(cfg: &EncoderConfig) -> u64 {
    (cfg.num_patches() * cfg.width * cfg.patch_dim()) as u64
}

pub fn flops_for_loads(cfg: &EncoderConfig, loads: &[BlockLoad]) -> u64 {
    patch_embed_flops(cfg) + loads.iter().map(|&l| block_flops(cfg, l)).sum::<u64>()
}

/// Per-block loads implied by applying `plan` at `cfg.condense_blocks`,
/// assuming every condensing stage scores against an anchor.
pub fn planned_loads(cfg: &EncoderConfig, plan: &CondensationPlan) -> Vec<BlockLoad> {
    let mut patches = cfg.num_patches();
    (1..=cfg.layers)
        .map(|b| {
            let attn_tokens = patches + 1;
            let mut scored_keys = 0;
            if cfg.is_condense_block(b) {
                let stage = plan.stage(patches);
                if !stage.is_identity() {
                    scored_keys = patches;
                }
                patches = stage.n_final;
            }
            BlockLoad {
                attn_tokens,
                mlp_tokens: patches + 1,
                scored_keys,
            }
        })
        .collect()
}

pub fn flops_estimate(cfg: &EncoderConfig, plan: &CondensationPlan) -> u64 {
    flops_for_loads(cfg, &planned_loads(cfg, plan))
}

pub fn vanilla_flops(cfg: &EncoderConfig) -> u64 {
    let n = cfg.num_patches() + 1;
    let load = BlockLoad {
        attn_tokens: n,
        mlp_tokens: n,
        scored_keys: 0,
    };
    flops_for_loads(cfg, &vec![load; cfg.layers])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(r: f64) -> CondensationPlan {
        CondensationPlan::new(r, 2.0, 2).unwrap()
    }

    #[test]
    fn vanilla_vit_b16_matches_hand_count() {
        let cfg = EncoderConfig::vit_b16();
        // 12 · (4·197·768² + 2·197²·768 + 8·197·768²) + 196·768·768
        let per_block = 4 * 197 * 768u64 * 768 + 2 * 197 * 197 * 768 + 8 * 197 * 768 * 768;
        assert_eq!(vanilla_flops(&cfg), 12 * per_block + 196 * 768 * 768);
        assert_eq!(flops_estimate(&cfg, &plan(1.0)), vanilla_flops(&cfg));
    }

    #[test]
    fn planned_counts_follow_rounding() {
        let cfg = EncoderConfig::vit_b16();
        let loads = planned_loads(&cfg, &plan(0.9));
        let mlp: Vec<usize> = loads.iter().map(|l| l.mlp_tokens).collect();
        assert_eq!(mlp, vec![197, 197, 197, 177, 177, 177, 159, 159, 159, 143, 143, 143]);
        assert_eq!(loads[3].attn_tokens, 197);
        assert_eq!(loads[4].attn_tokens, 177);
    }

    #[test]
    fn estimate_decreases_with_rate() {
        let cfg = EncoderConfig::vit_b16();
        let mut prev = u64::MAX;
        for r in [1.0, 0.95, 0.9, 0.8, 0.7, 0.6, 0.5] {
            let f = flops_estimate(&cfg, &plan(r));
            assert!(f < prev);
            prev = f;
        }
    }
}
