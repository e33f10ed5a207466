//! Multi-head self-attention and the two decoder cross-attention variants.
//!
//! * Additive: query `c_q + o_q`, key `c_k + p_k`, one projection per role.
//!   The logit of each head is the projected `(c_q + o_q)ᵀ(c_k + p_k)`.
//! * Conditional: content and spatial streams are projected separately per
//!   head and the logit is `c̃_qᵀc̃_k + p̃_qᵀp̃_k`, i.e. the dot product of the
//!   concatenated `[c̃; p̃]` vectors, scaled by `1/sqrt(2 d/M)`.
//!
//! Values always come from content embeddings only.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Bound, Init, Linear};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Additive,
    Conditional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub width: usize,
    pub heads: usize,
    pub variant: AttentionVariant,
}

impl AttentionConfig {
    pub fn new(width: usize, heads: usize, variant: AttentionVariant) -> Result<Self> {
        if heads == 0 || width == 0 || width % heads != 0 {
            return Err(Error::Invalid(format!(
                "width {width} is not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            width,
            heads,
            variant,
        })
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    /// Divisor applied to every logit component.
    pub fn scale(&self) -> f64 {
        let dh = self.head_width() as f64;
        match self.variant {
            AttentionVariant::Additive => dh.sqrt(),
            AttentionVariant::Conditional => (2.0 * dh).sqrt(),
        }
    }
}

/// Encoder output: content keys/values `c_k` and fixed positional keys `p_k`.
#[derive(Clone, Copy, Debug)]
pub struct MemoryFeatures {
    pub content: Var,
    pub positions: Var,
    pub height: usize,
    pub width: usize,
}

impl MemoryFeatures {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which of the three normalizations of a head's logits to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Spatial,
    Content,
    Combined,
}

impl MapKind {
    pub const ALL: [MapKind; 3] = [MapKind::Spatial, MapKind::Content, MapKind::Combined];

    pub fn label(self) -> &'static str {
        match self {
            MapKind::Spatial => "spatial",
            MapKind::Content => "content",
            MapKind::Combined => "combined",
        }
    }
}

/// Logits and softmax weights of one head, each `[queries, keys]`.
#[derive(Clone, Debug)]
pub struct HeadMaps {
    pub spatial_logits: Tensor,
    pub content_logits: Tensor,
    pub combined_logits: Tensor,
    pub spatial: Tensor,
    pub content: Tensor,
    pub combined: Tensor,
}

impl HeadMaps {
    pub fn weights(&self, kind: MapKind) -> &Tensor {
        match kind {
            MapKind::Spatial => &self.spatial,
            MapKind::Content => &self.content,
            MapKind::Combined => &self.combined,
        }
    }

    pub fn logits(&self, kind: MapKind) -> &Tensor {
        match kind {
            MapKind::Spatial => &self.spatial_logits,
            MapKind::Content => &self.content_logits,
            MapKind::Combined => &self.combined_logits,
        }
    }
}

/// Recorded cross-attention maps of one layer.
#[derive(Clone, Debug)]
pub struct AttentionMaps {
    pub heads: Vec<HeadMaps>,
    pub grid_height: usize,
    pub grid_width: usize,
}

impl AttentionMaps {
    /// One query's map reshaped to `[grid_height, grid_width]`.
    pub fn map(&self, head: usize, kind: MapKind, query: usize) -> Result<Tensor> {
        let h = self
            .heads
            .get(head)
            .ok_or_else(|| Error::Invalid(format!("head {head} out of range")))?;
        let w = h.weights(kind);
        if query >= w.rows() {
            return Err(Error::Invalid(format!("query {query} out of range")));
        }
        Tensor::new(vec![self.grid_height, self.grid_width], w.row(query).to_vec())
    }
}

fn row_softmax(logits: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(logits.clone());
    let s = g.softmax(v, 1).expect("finite logits");
    g.value(s).clone()
}

/// `a_h @ b_hᵀ / scale` for head `h` of two `[*, d]` tensors.
fn head_logits(g: &mut Graph, a: Var, b: Var, head: usize, dh: usize, scale: f64) -> Result<Var> {
    let ah = g.slice(a, 1, head * dh, (head + 1) * dh)?;
    let bh = g.slice(b, 1, head * dh, (head + 1) * dh)?;
    let bt = g.transpose(bh)?;
    let l = g.matmul(ah, bt)?;
    g.scale(l, 1.0 / scale)
}

fn check_width(g: &Graph, op: &'static str, v: Var, width: usize) -> Result<()> {
    match *g.shape(v) {
        [n, d] if d == width && n > 0 => Ok(()),
        ref s => Err(shape_err(op, format!("expected [*, {width}], got {s:?}"))),
    }
}

/// Standard scaled dot-product multi-head self-attention where the
/// positional term is added to queries and keys but not to values.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub config: AttentionConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl SelfAttention {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize, heads: usize) -> Result<Self> {
        let config = AttentionConfig::new(width, heads, AttentionVariant::Additive)?;
        Ok(Self {
            config,
            query: init.linear(&format!("{name}.query"), width, width, true),
            key: init.linear(&format!("{name}.key"), width, width, true),
            value: init.linear(&format!("{name}.value"), width, width, true),
            output: init.linear(&format!("{name}.output"), width, width, true),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, pos: Var) -> Result<Var> {
        let d = self.config.width;
        check_width(g, "self_attention", x, d)?;
        check_width(g, "self_attention", pos, d)?;
        let qk_in = g.add(x, pos)?;
        let q = self.query.forward(g, p, qk_in)?;
        let k = self.key.forward(g, p, qk_in)?;
        let v = self.value.forward(g, p, x)?;
        let dh = self.config.head_width();
        let mut outs = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let logits = head_logits(g, q, k, h, dh, self.config.scale())?;
            let w = g.softmax(logits, 1)?;
            let vh = g.slice(v, 1, h * dh, (h + 1) * dh)?;
            outs.push(g.matmul(w, vh)?);
        }
        let cat = g.concat(&outs, 1)?;
        self.output.forward(g, p, cat)
    }
}

/// Result of a cross-attention call.
pub struct CrossOutput {
    pub output: Var,
    pub maps: Option<AttentionMaps>,
}

/// Decoder cross-attention in either variant.
///
/// The additive variant uses `query_content`/`key_content` for the summed
/// inputs; the spatial projections exist only in the conditional variant and
/// carry no bias.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub config: AttentionConfig,
    pub query_content: Linear,
    pub key_content: Linear,
    pub query_spatial: Option<Linear>,
    pub key_spatial: Option<Linear>,
    pub value: Linear,
    pub output: Linear,
}

/// Inputs of one cross-attention call. `key_content` defaults to the memory
/// content; it differs only when a layer augments the content key.
pub struct CrossInputs {
    pub content_query: Var,
    pub spatial_query: Var,
    pub key_content: Option<Var>,
}

impl CrossAttention {
    pub fn new(init: &mut Init<'_>, name: &str, config: AttentionConfig) -> Self {
        let d = config.width;
        let conditional = config.variant == AttentionVariant::Conditional;
        Self {
            config,
            query_content: init.linear(&format!("{name}.query_content"), d, d, true),
            key_content: init.linear(&format!("{name}.key_content"), d, d, true),
            query_spatial: conditional.then(|| init.linear(&format!("{name}.query_spatial"), d, d, false)),
            key_spatial: conditional.then(|| init.linear(&format!("{name}.key_spatial"), d, d, false)),
            value: init.linear(&format!("{name}.value"), d, d, true),
            output: init.linear(&format!("{name}.output"), d, d, true),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        inputs: &CrossInputs,
        memory: &MemoryFeatures,
        record: bool,
    ) -> Result<CrossOutput> {
        let d = self.config.width;
        for v in [inputs.content_query, inputs.spatial_query, memory.content, memory.positions] {
            check_width(g, "cross_attention", v, d)?;
        }
        if g.shape(memory.content)[0] != memory.len() || g.shape(memory.positions)[0] != memory.len() {
            return Err(shape_err("cross_attention", "memory length differs from grid size"));
        }
        let key_content = inputs.key_content.unwrap_or(memory.content);
        match self.config.variant {
            AttentionVariant::Additive => self.additive(g, p, inputs, key_content, memory, record),
            AttentionVariant::Conditional => self.conditional(g, p, inputs, key_content, memory, record),
        }
    }

    fn aggregate(&self, g: &mut Graph, p: &Bound, weights: &[Var], memory: &MemoryFeatures) -> Result<Var> {
        let v = self.value.forward(g, p, memory.content)?;
        let dh = self.config.head_width();
        let mut outs = Vec::with_capacity(weights.len());
        for (h, &w) in weights.iter().enumerate() {
            let vh = g.slice(v, 1, h * dh, (h + 1) * dh)?;
            outs.push(g.matmul(w, vh)?);
        }
        let cat = g.concat(&outs, 1)?;
        self.output.forward(g, p, cat)
    }

    fn additive(
        &self,
        g: &mut Graph,
        p: &Bound,
        inputs: &CrossInputs,
        key_content: Var,
        memory: &MemoryFeatures,
        record: bool,
    ) -> Result<CrossOutput> {
        let q_in = g.add(inputs.content_query, inputs.spatial_query)?;
        let k_in = g.add(key_content, memory.positions)?;
        let q = self.query_content.forward(g, p, q_in)?;
        let k = self.key_content.forward(g, p, k_in)?;
        let (dh, scale) = (self.config.head_width(), self.config.scale());
        let mut weights = Vec::new();
        let mut logits = Vec::new();
        for h in 0..self.config.heads {
            let l = head_logits(g, q, k, h, dh, scale)?;
            weights.push(g.softmax(l, 1)?);
            logits.push(l);
        }
        let maps = if record {
            // Split the key side: content key W c_k + b, spatial key W p_k.
            let kc = self.key_content.forward(g, p, key_content)?;
            let kp = g.matmul(memory.positions, p[self.key_content.weight])?;
            let mut heads = Vec::new();
            for (h, (&l, &w)) in logits.iter().zip(&weights).enumerate() {
                let c = head_logits(g, q, kc, h, dh, scale)?;
                let s = head_logits(g, q, kp, h, dh, scale)?;
                let (c, s) = (g.value(c).clone(), g.value(s).clone());
                heads.push(HeadMaps {
                    spatial: row_softmax(&s),
                    content: row_softmax(&c),
                    combined: g.value(w).clone(),
                    spatial_logits: s,
                    content_logits: c,
                    combined_logits: g.value(l).clone(),
                });
            }
            Some(AttentionMaps {
                heads,
                grid_height: memory.height,
                grid_width: memory.width,
            })
        } else {
            None
        };
        let output = self.aggregate(g, p, &weights, memory)?;
        Ok(CrossOutput { output, maps })
    }

    fn conditional(
        &self,
        g: &mut Graph,
        p: &Bound,
        inputs: &CrossInputs,
        key_content: Var,
        memory: &MemoryFeatures,
        record: bool,
    ) -> Result<CrossOutput> {
        let (qs_proj, ks_proj) = match (&self.query_spatial, &self.key_spatial) {
            (Some(q), Some(k)) => (q, k),
            _ => return Err(Error::Invalid("conditional attention without spatial projections".into())),
        };
        let qc = self.query_content.forward(g, p, inputs.content_query)?;
        let kc = self.key_content.forward(g, p, key_content)?;
        let qs = qs_proj.forward(g, p, inputs.spatial_query)?;
        let ks = ks_proj.forward(g, p, memory.positions)?;
        let (dh, scale) = (self.config.head_width(), self.config.scale());
        let mut weights = Vec::new();
        let mut heads = Vec::new();
        for h in 0..self.config.heads {
            let content = head_logits(g, qc, kc, h, dh, scale)?;
            let spatial = head_logits(g, qs, ks, h, dh, scale)?;
            let combined = g.add(content, spatial)?;
            let w = g.softmax(combined, 1)?;
            if record {
                let (c, s) = (g.value(content).clone(), g.value(spatial).clone());
                heads.push(HeadMaps {
                    spatial: row_softmax(&s),
                    content: row_softmax(&c),
                    combined: g.value(w).clone(),
                    spatial_logits: s,
                    content_logits: c,
                    combined_logits: g.value(combined).clone(),
                });
            }
            weights.push(w);
        }
        let maps = record.then(|| AttentionMaps {
            heads,
            grid_height: memory.height,
            grid_width: memory.width,
        });
        let output = self.aggregate(g, p, &weights, memory)?;
        Ok(CrossOutput { output, maps })
    }
}
