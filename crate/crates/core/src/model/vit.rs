//! Pre-norm Vision Transformer over patch tokens (no class token).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::{ones, trunc_normal, zeros};
use super::ModelError;
use crate::autograd::{Bound, Graph, NodeId, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            input_height: 64,
            input_width: 64,
        }
    }
}

impl VitConfig {
    /// 16x16 inputs, 4x4 patches, width 16, two blocks.
    pub fn tiny() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2,
            input_height: 16,
            input_width: 16,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.input_height / self.patch_size,
            self.input_width / self.patch_size,
        )
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.patch_size == 0 || self.embed_dim == 0 || self.num_heads == 0 || self.mlp_ratio == 0 {
            return bad("vit sizes must be positive".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.input_height == 0
            || self.input_width == 0
            || self.input_height % self.patch_size != 0
            || self.input_width % self.patch_size != 0
        {
            return bad(format!(
                "input {}x{} not divisible by patch size {}",
                self.input_width, self.input_height, self.patch_size
            ));
        }
        Ok(())
    }
}

/// Parameters of one transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    dim: usize,
    heads: usize,
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

impl Block {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let hidden = dim * mlp_ratio;
        let mut p = |name: &str, t| store.insert(format!("{prefix}.{name}"), t);
        Self {
            dim,
            heads,
            ln1_g: p("ln1.g", ones(1, dim)),
            ln1_b: p("ln1.b", zeros(1, dim)),
            qkv_w: p("attn.qkv.w", trunc_normal(dim, 3 * dim, std, rng)),
            qkv_b: p("attn.qkv.b", zeros(1, 3 * dim)),
            proj_w: p("attn.proj.w", trunc_normal(dim, dim, std, rng)),
            proj_b: p("attn.proj.b", zeros(1, dim)),
            ln2_g: p("ln2.g", ones(1, dim)),
            ln2_b: p("ln2.b", zeros(1, dim)),
            fc1_w: p("mlp.fc1.w", trunc_normal(dim, hidden, std, rng)),
            fc1_b: p("mlp.fc1.b", zeros(1, hidden)),
            fc2_w: p("mlp.fc2.w", trunc_normal(hidden, dim, std, rng)),
            fc2_b: p("mlp.fc2.b", zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: NodeId) -> NodeId {
        let h = g.layer_norm(x, b.get(self.ln1_g), b.get(self.ln1_b));
        let qkv = g.linear(h, b.get(self.qkv_w), b.get(self.qkv_b));
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = g.slice_cols(qkv, head * dh, dh);
            let k = g.slice_cols(qkv, self.dim + head * dh, dh);
            let v = g.slice_cols(qkv, 2 * self.dim + head * dh, dh);
            let scores = g.matmul_bt(q, k);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, v));
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let attn_out = g.linear(merged, b.get(self.proj_w), b.get(self.proj_b));
        let x = g.add(x, attn_out);

        let h = g.layer_norm(x, b.get(self.ln2_g), b.get(self.ln2_b));
        let h = g.linear(h, b.get(self.fc1_w), b.get(self.fc1_b));
        let h = g.gelu(h);
        let h = g.linear(h, b.get(self.fc2_w), b.get(self.fc2_b));
        g.add(x, h)
    }
}

/// Patch embedding, learned positions, a mask token and a stack of blocks.
#[derive(Clone, Debug)]
pub struct VitEncoder {
    pub cfg: VitConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    mask_token: ParamId,
    blocks: Vec<Block>,
    norm_g: ParamId,
    norm_b: ParamId,
}

impl VitEncoder {
    pub fn register<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &VitConfig, std: f64, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let patch_w = store.insert(format!("{prefix}.patch_embed.w"), trunc_normal(cfg.patch_dim(), d, std, rng));
        let patch_b = store.insert(format!("{prefix}.patch_embed.b"), zeros(1, d));
        let pos = store.insert(format!("{prefix}.pos_embed"), trunc_normal(cfg.num_patches(), d, std, rng));
        let mask_token = store.insert(format!("{prefix}.mask_token"), trunc_normal(1, d, std, rng));
        let blocks = (0..cfg.depth)
            .map(|i| Block::register(store, &format!("{prefix}.blocks.{i}"), d, cfg.num_heads, cfg.mlp_ratio, std, rng))
            .collect();
        let norm_g = store.insert(format!("{prefix}.norm.g"), ones(1, d));
        let norm_b = store.insert(format!("{prefix}.norm.b"), zeros(1, d));
        Self {
            cfg: cfg.clone(),
            patch_w,
            patch_b,
            pos,
            mask_token,
            blocks,
            norm_g,
            norm_b,
        }
    }

    /// Encodes `N x patch_dim` patches into `N x D` tokens. Masked rows have
    /// their patch embedding replaced by the mask token before positions are
    /// added, so masked pixels never reach the blocks.
    pub fn forward(&self, g: &mut Graph, b: &Bound, patches: NodeId, mask: Option<&[usize]>) -> Result<NodeId, ModelError> {
        let shape = g.value(patches).shape();
        let want = (self.cfg.num_patches(), self.cfg.patch_dim());
        if shape != want {
            return Err(ModelError::Dimension {
                expected: format!("{}x{}", want.0, want.1),
                got: format!("{}x{}", shape.0, shape.1),
            });
        }
        let mut x = g.linear(patches, b.get(self.patch_w), b.get(self.patch_b));
        if let Some(rows) = mask.filter(|m| !m.is_empty()) {
            if rows.iter().any(|&r| r >= want.0) {
                return Err(ModelError::MaskIndex);
            }
            x = g.replace_rows(x, rows, b.get(self.mask_token));
        }
        x = g.add(x, b.get(self.pos));
        for block in &self.blocks {
            x = block.forward(g, b, x);
        }
        Ok(g.layer_norm(x, b.get(self.norm_g), b.get(self.norm_b)))
    }
}
