//! Mask decoder predicting target-encoder latents at masked positions.

use rand::Rng;

use super::init::{trunc_normal, zeros};
use super::vit::Block;
use super::{ModelConfig, ModelError};
use crate::autograd::{Bound, Graph, NodeId, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    width: usize,
    embed_w: ParamId,
    embed_b: ParamId,
    mask_token: ParamId,
    pos: ParamId,
    block: Block,
    norm_g: ParamId,
    norm_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl MaskDecoder {
    pub fn register<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.student.embed_dim;
        let dt = cfg.target.embed_dim;
        let n = cfg.student.num_patches();
        let std = cfg.init_std;
        Self {
            width: dt,
            embed_w: store.insert("decoder.embed.w", trunc_normal(d, dt, std, rng)),
            embed_b: store.insert("decoder.embed.b", zeros(1, dt)),
            mask_token: store.insert("decoder.mask_token", trunc_normal(1, dt, std, rng)),
            pos: store.insert("decoder.pos_embed", trunc_normal(n, dt, std, rng)),
            block: Block::register(store, "decoder.block", dt, cfg.decoder_heads, cfg.student.mlp_ratio, std, rng),
            norm_g: store.insert("decoder.norm.g", super::init::ones(1, dt)),
            norm_b: store.insert("decoder.norm.b", zeros(1, dt)),
            out_w: store.insert("decoder.out.w", trunc_normal(dt, dt, std, rng)),
            out_b: store.insert("decoder.out.b", zeros(1, dt)),
        }
    }

    pub fn out_weight(&self) -> ParamId {
        self.out_w
    }

    pub fn out_bias(&self) -> ParamId {
        self.out_b
    }

    /// Predicts one `D_target` row per entry of `masked`, in the given order.
    pub fn forward(&self, g: &mut Graph, b: &Bound, student_tokens: NodeId, masked: &[usize]) -> Result<NodeId, ModelError> {
        let n = g.value(student_tokens).rows;
        if masked.iter().any(|&i| i >= n) {
            return Err(ModelError::MaskIndex);
        }
        let z = g.linear(student_tokens, b.get(self.embed_w), b.get(self.embed_b));
        let z = if masked.is_empty() {
            z
        } else {
            g.replace_rows(z, masked, b.get(self.mask_token))
        };
        let z = g.add(z, b.get(self.pos));
        let z = self.block.forward(g, b, z);
        let z = g.layer_norm(z, b.get(self.norm_g), b.get(self.norm_b));
        let out = g.linear(z, b.get(self.out_w), b.get(self.out_b));
        debug_assert_eq!(g.value(out).cols, self.width);
        Ok(g.gather_rows(out, masked))
    }
}
