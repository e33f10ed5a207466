//! Patch embedding and the transformer encoder producing [`MemoryFeatures`].

use crate::attention::{MemoryFeatures, SelfAttention};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, LayerNorm, Linear, Mlp};
use crate::tensor::{Graph, Tensor, Var};

/// Cuts a `[rows, cols]` image into non-overlapping `patch × patch` tiles,
/// one flattened tile per output row, tiles in row-major grid order.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (rows, cols) = match *image.shape() {
        [r, c] => (r, c),
        ref s => return Err(Error::Invalid(format!("image must be rank 2, got {s:?}"))),
    };
    if patch == 0 || rows % patch != 0 || cols % patch != 0 {
        return Err(Error::Invalid(format!(
            "image {rows}x{cols} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (rows / patch, cols / patch);
    let mut out = Vec::with_capacity(rows * cols);
    for gi in 0..gh {
        for gj in 0..gw {
            for r in 0..patch {
                let start = (gi * patch + r) * cols + gj * patch;
                out.extend_from_slice(&image.data()[start..start + patch]);
            }
        }
    }
    Tensor::new(vec![gh * gw, patch * patch], out)
}

/// Linear projection of flattened patches to the model width.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub patch: usize,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new(init: &mut Init<'_>, patch: usize, width: usize) -> Self {
        Self {
            patch,
            proj: init.linear("patch_embed", patch * patch, width, true),
        }
    }

    /// Returns the `[h * w, d]` embeddings and the grid extents `(h, w)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: &Tensor) -> Result<(Var, usize, usize)> {
        let patches = patchify(image, self.patch)?;
        let (gh, gw) = (image.shape()[0] / self.patch, image.shape()[1] / self.patch);
        let x = g.constant(patches);
        Ok((self.proj.forward(g, p, x)?, gh, gw))
    }
}

/// Post-norm encoder layer: self-attention then FFN, each wrapped in
/// residual + layer norm.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: SelfAttention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attention: SelfAttention::new(init, &format!("{name}.self_attn"), width, heads)?,
            norm1: init.layer_norm(&format!("{name}.norm1"), width),
            ffn: init.mlp(&format!("{name}.ffn"), &[width, 4 * width, width]),
            norm2: init.layer_norm(&format!("{name}.norm2"), width),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, pos: Var) -> Result<Var> {
        let a = self.attention.forward(g, p, x, pos)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, x)?;
        let x = g.add(x, f)?;
        self.norm2.forward(g, p, x)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new(init: &mut Init<'_>, layers: usize, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            layers: (0..layers)
                .map(|i| EncoderLayer::new(init, &format!("encoder.{i}"), width, heads))
                .collect::<Result<_>>()?,
        })
    }

    /// `positions` must be a constant node holding the grid embeddings.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        embeddings: Var,
        positions: Var,
        height: usize,
        width: usize,
    ) -> Result<MemoryFeatures> {
        if g.shape(embeddings) != g.shape(positions) {
            return Err(Error::Shape {
                op: "encoder",
                detail: format!("{:?} vs {:?}", g.shape(embeddings), g.shape(positions)),
            });
        }
        let mut x = embeddings;
        for layer in &self.layers {
            x = layer.forward(g, p, x, positions)?;
        }
        Ok(MemoryFeatures {
            content: x,
            positions,
            height,
            width,
        })
    }
}
