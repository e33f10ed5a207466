//! Decoder stack with conditional spatial query prediction, reference
//! points and the shared box/class prediction heads.
//!
//! For every layer the spatial query fed to cross-attention is built from
//! the reference point `s` and a transformation predicted from the previous
//! layer's embedding: `p_s = sinusoidal(sigmoid(s))`, `p_q = T(f) p_s`.
//! The first layer has no previous embedding and uses `p_q = p_s`.

use serde::{Deserialize, Serialize};

use crate::attention::{
    AttentionConfig, AttentionMaps, AttentionVariant, CrossAttention, CrossInputs, MemoryFeatures,
    SelfAttention,
};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, LayerNorm, Linear, Mlp, ParamGroup, ParamId};
use crate::positional::embed_points;
use crate::tensor::{Graph, Tensor, Var};

/// How each query's reference point `s` is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// `s = (0, 0)` for every query.
    FixedOrigin,
    /// One free 2D parameter per query.
    Learned,
    /// `s = FFN(o_q)`.
    Predicted,
}

impl ReferenceMode {
    pub const ALL: [ReferenceMode; 3] = [Self::FixedOrigin, Self::Learned, Self::Predicted];
}

/// Ways of forming the conditional spatial query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsqVariant {
    /// `T(f_prev) p_s`
    Csq,
    /// `p_s`
    CsqP,
    /// `T(f_prev) 1`
    CsqT,
    /// `f_prev`
    CsqC,
    /// `T(c_q) p_s` with `c_q` the current self-attention output
    CsqI,
}

impl CsqVariant {
    pub const ALL: [CsqVariant; 5] = [Self::Csq, Self::CsqP, Self::CsqT, Self::CsqC, Self::CsqI];

    fn uses_transform(self) -> bool {
        matches!(self, Self::Csq | Self::CsqT | Self::CsqI)
    }
}

/// Structure of the linear map `T` applied to `p_s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionForm {
    Identity,
    SingleScalar,
    BlockDiagonal,
    FullMatrix,
    Diagonal,
}

impl Default for ProjectionForm {
    fn default() -> Self {
        Self::Diagonal
    }
}

impl ProjectionForm {
    pub const ALL: [ProjectionForm; 5] = [
        Self::Identity,
        Self::SingleScalar,
        Self::BlockDiagonal,
        Self::FullMatrix,
        Self::Diagonal,
    ];

    /// Number of values the transformation FFN emits per query.
    pub fn output_width(self, width: usize, heads: usize) -> usize {
        let dh = width / heads;
        match self {
            Self::Identity => 0,
            Self::SingleScalar => 1,
            Self::BlockDiagonal => heads * dh * dh,
            Self::FullMatrix => width * width,
            Self::Diagonal => width,
        }
    }
}

/// Spatial query of the first decoder layer, which has no previous embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstLayerRule {
    /// `T = I`, so `p_q = p_s`.
    UnitTransform,
    /// As `UnitTransform`, and the content query/key of the first layer
    /// additionally carry `o_q` / `p_k` added in.
    AddPositional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub queries: usize,
    pub classes: usize,
    pub variant: AttentionVariant,
    pub csq: CsqVariant,
    pub projection: ProjectionForm,
    pub reference: ReferenceMode,
    pub offset_regression: bool,
    pub first_layer: FirstLayerRule,
    pub temperature: f64,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        AttentionConfig::new(self.width, self.heads, self.variant)?;
        if self.width % 4 != 0 {
            return Err(Error::Invalid(format!("width {} must be a multiple of 4", self.width)));
        }
        if self.layers == 0 || self.queries == 0 || self.classes == 0 {
            return Err(Error::Invalid("decoder needs at least one layer, query and class".into()));
        }
        Ok(())
    }
}

/// The transformation `T` predicted for a batch of queries.
#[derive(Clone, Copy, Debug)]
pub enum Transform {
    Identity,
    /// `[n, 1]`
    Scalar(Var),
    /// `[n, d]`
    Diagonal(Var),
    /// `[n * M, d/M, d/M]`
    Block(Var),
    /// `[n, d, d]`
    Full(Var),
}

impl Transform {
    /// `T x` for `x: [n, d]`.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
        match *self {
            Transform::Identity => Ok(x),
            Transform::Scalar(c) => {
                let ones = g.constant(Tensor::ones(&[1, d]));
                let wide = g.matmul(c, ones)?;
                g.mul(wide, x)
            }
            Transform::Diagonal(l) => g.mul(l, x),
            Transform::Block(m) => {
                let blocks = g.shape(m)[0];
                let xr = g.reshape(x, &[blocks, d * n / blocks])?;
                let y = g.batched_matvec(m, xr)?;
                g.reshape(y, &[n, d])
            }
            Transform::Full(m) => g.batched_matvec(m, x),
        }
    }
}

#[derive(Clone, Debug)]
pub enum ReferenceSource {
    FixedOrigin,
    Learned(ParamId),
    Predicted(Mlp),
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attention: SelfAttention,
    pub norm1: LayerNorm,
    pub cross_attention: CrossAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub norm3: LayerNorm,
}

/// Everything one decoder layer produced.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub embedding: Var,
    pub spatial_query: Var,
    pub transform: Option<Transform>,
    pub logits: Var,
    pub boxes: Var,
    pub maps: Option<AttentionMaps>,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub reference: Var,
    pub layers: Vec<LayerOutput>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub object_queries: ParamId,
    pub reference: ReferenceSource,
    pub transform: Option<Mlp>,
    pub layers: Vec<DecoderLayer>,
    pub box_head: Mlp,
    pub class_head: Linear,
}

impl Decoder {
    pub fn new(init: &mut Init<'_>, config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let DecoderConfig {
            width: d,
            heads,
            queries,
            ..
        } = config;
        let object_queries = init.xavier("decoder.object_queries", queries, d);
        let reference = match config.reference {
            ReferenceMode::FixedOrigin => ReferenceSource::FixedOrigin,
            ReferenceMode::Learned => {
                let prev = std::mem::replace(&mut init.group, ParamGroup::Backbone);
                let id = init.uniform("decoder.reference_points", &[queries, 2], -1.5, 1.5);
                init.group = prev;
                ReferenceSource::Learned(id)
            }
            ReferenceMode::Predicted => {
                ReferenceSource::Predicted(init.mlp("decoder.reference_ffn", &[d, d, 2]))
            }
        };
        let wants_transform = config.variant == AttentionVariant::Conditional
            && config.csq.uses_transform()
            && config.projection != ProjectionForm::Identity;
        let transform = wants_transform.then(|| {
            init.mlp(
                "decoder.transform_ffn",
                &[d, d, config.projection.output_width(d, heads)],
            )
        });
        let attn = AttentionConfig::new(d, heads, config.variant)?;
        let layers = (0..config.layers)
            .map(|i| {
                let name = format!("decoder.{i}");
                Ok(DecoderLayer {
                    self_attention: SelfAttention::new(init, &format!("{name}.self_attn"), d, heads)?,
                    norm1: init.layer_norm(&format!("{name}.norm1"), d),
                    cross_attention: CrossAttention::new(init, &format!("{name}.cross_attn"), attn),
                    norm2: init.layer_norm(&format!("{name}.norm2"), d),
                    ffn: init.mlp(&format!("{name}.ffn"), &[d, 4 * d, d]),
                    norm3: init.layer_norm(&format!("{name}.norm3"), d),
                })
            })
            .collect::<Result<_>>()?;
        let box_head = init.mlp("head.box", &[d, d, d, 4]);
        let class_head = init.linear("head.class", d, config.classes, true);
        Ok(Self {
            config,
            object_queries,
            reference,
            transform,
            layers,
            box_head,
            class_head,
        })
    }

    /// Unnormalized reference points `s`, `[N, 2]`.
    pub fn reference_points(&self, g: &mut Graph, p: &Bound) -> Result<Var> {
        match &self.reference {
            ReferenceSource::FixedOrigin => Ok(g.constant(Tensor::zeros(&[self.config.queries, 2]))),
            ReferenceSource::Learned(id) => Ok(p[*id]),
            ReferenceSource::Predicted(ffn) => ffn.forward(g, p, p[self.object_queries]),
        }
    }

    /// Predicts `T` from an embedding. `None` when the form has no parameters.
    pub fn predict_transformation(&self, g: &mut Graph, p: &Bound, f: Var) -> Result<Transform> {
        let Some(ffn) = &self.transform else {
            return Ok(Transform::Identity);
        };
        let raw = ffn.forward(g, p, f)?;
        let n = g.shape(f)[0];
        let (d, m) = (self.config.width, self.config.heads);
        let dh = d / m;
        Ok(match self.config.projection {
            ProjectionForm::Identity => Transform::Identity,
            ProjectionForm::SingleScalar => Transform::Scalar(raw),
            ProjectionForm::Diagonal => Transform::Diagonal(raw),
            ProjectionForm::BlockDiagonal => Transform::Block(g.reshape(raw, &[n * m, dh, dh])?),
            ProjectionForm::FullMatrix => Transform::Full(g.reshape(raw, &[n, d, d])?),
        })
    }

    /// Spatial query for a layer after the first.
    ///
    /// `previous` is the previous layer's output embedding and `content_query`
    /// the current layer's self-attention output.
    pub fn conditional_spatial_query(
        &self,
        g: &mut Graph,
        p: &Bound,
        positional: Var,
        previous: Var,
        content_query: Var,
    ) -> Result<(Var, Option<Transform>)> {
        match self.config.csq {
            CsqVariant::Csq => {
                let t = self.predict_transformation(g, p, previous)?;
                Ok((t.apply(g, positional)?, Some(t)))
            }
            CsqVariant::CsqP => Ok((positional, None)),
            CsqVariant::CsqT => {
                let t = self.predict_transformation(g, p, previous)?;
                let ones = g.constant(Tensor::ones(g.shape(positional)));
                Ok((t.apply(g, ones)?, Some(t)))
            }
            CsqVariant::CsqC => Ok((previous, None)),
            CsqVariant::CsqI => {
                let t = self.predict_transformation(g, p, content_query)?;
                Ok((t.apply(g, positional)?, Some(t)))
            }
        }
    }

    /// `b = sigmoid(FFN(f) + [s, 0, 0])`; the offset is dropped when offset
    /// regression is disabled.
    pub fn box_head(&self, g: &mut Graph, p: &Bound, f: Var, reference: Var) -> Result<Var> {
        let raw = self.box_head.forward(g, p, f)?;
        let raw = if self.config.offset_regression {
            let n = g.shape(f)[0];
            let zeros = g.constant(Tensor::zeros(&[n, 2]));
            let offset = g.concat(&[reference, zeros], 1)?;
            g.add(raw, offset)?
        } else {
            raw
        };
        g.sigmoid(raw)
    }

    pub fn class_head(&self, g: &mut Graph, p: &Bound, f: Var) -> Result<Var> {
        self.class_head.forward(g, p, f)
    }

    /// Runs one layer. `layer` is zero-based.
    #[allow(clippy::too_many_arguments)]
    pub fn layer_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        layer: usize,
        previous: Var,
        reference: Var,
        positional: Var,
        memory: &MemoryFeatures,
        record: bool,
    ) -> Result<LayerOutput> {
        let l = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Invalid(format!("decoder layer {layer} out of range")))?;
        let queries = p[self.object_queries];

        let sa = l.self_attention.forward(g, p, previous, queries)?;
        let x = g.add(previous, sa)?;
        let content_query = l.norm1.forward(g, p, x)?;

        let (spatial_query, transform, inputs) = match self.config.variant {
            AttentionVariant::Additive => (
                queries,
                None,
                CrossInputs {
                    content_query,
                    spatial_query: queries,
                    key_content: None,
                },
            ),
            AttentionVariant::Conditional => {
                let (pq, t) = if layer == 0 {
                    (positional, None)
                } else {
                    self.conditional_spatial_query(g, p, positional, previous, content_query)?
                };
                let inputs = if layer == 0 && self.config.first_layer == FirstLayerRule::AddPositional {
                    CrossInputs {
                        content_query: g.add(content_query, queries)?,
                        spatial_query: pq,
                        key_content: Some(g.add(memory.content, memory.positions)?),
                    }
                } else {
                    CrossInputs {
                        content_query,
                        spatial_query: pq,
                        key_content: None,
                    }
                };
                (pq, t, inputs)
            }
        };

        let cross = l.cross_attention.forward(g, p, &inputs, memory, record)?;
        let x = g.add(content_query, cross.output)?;
        let x = l.norm2.forward(g, p, x)?;
        let ff = l.ffn.forward(g, p, x)?;
        let x = g.add(x, ff)?;
        let embedding = l.norm3.forward(g, p, x)?;

        let logits = self.class_head(g, p, embedding)?;
        let boxes = self.box_head(g, p, embedding, reference)?;
        Ok(LayerOutput {
            embedding,
            spatial_query,
            transform,
            logits,
            boxes,
            maps: cross.maps,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, memory: &MemoryFeatures, record: bool) -> Result<DecoderOutput> {
        let reference = self.reference_points(g, p)?;
        let normalized = g.sigmoid(reference)?;
        let positional = embed_points(g, normalized, self.config.width, self.config.temperature)?;
        let mut previous = g.constant(Tensor::zeros(&[self.config.queries, self.config.width]));
        let mut layers = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let out = self.layer_forward(g, p, i, previous, reference, positional, memory, record)?;
            previous = out.embedding;
            layers.push(out);
        }
        Ok(DecoderOutput { reference, layers })
    }
}
