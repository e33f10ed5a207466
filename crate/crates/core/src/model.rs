//! The full detector: patch embedding, encoder over the key grid, decoder
//! with set-prediction heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::MemoryFeatures;
use crate::config::TrainConfig;
use crate::decoder::{Decoder, DecoderOutput};
use crate::encoder::{Encoder, PatchEmbed};
use crate::error::{Error, Result};
use crate::loss::{set_loss, SetLoss};
use crate::nn::{Bound, Init, ParamGroup, ParamStore};
use crate::positional::grid_embeddings;
use crate::scene::Scene;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: TrainConfig,
    pub patch_embed: PatchEmbed,
    pub encoder: Encoder,
    pub decoder: Decoder,
    grid: usize,
    positions: Tensor,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub memory: MemoryFeatures,
    pub decoder: DecoderOutput,
}

/// Batch-averaged loss and its components.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub value: f64,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

/// Final-layer predictions for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[N, C]` class logits.
    pub logits: Tensor,
    /// `[N, 4]` normalized cxcywh boxes.
    pub boxes: Tensor,
}

impl Detector {
    /// Builds the architecture and a freshly initialized parameter store.
    /// The same config always yields the same parameters.
    pub fn new(config: &TrainConfig) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
            group: ParamGroup::Backbone,
        };
        let patch_embed = PatchEmbed::new(&mut init, config.scene.patch, config.width);
        init.group = ParamGroup::Transformer;
        let encoder = Encoder::new(&mut init, config.encoder_layers, config.width, config.heads)?;
        let decoder = Decoder::new(&mut init, config.decoder())?;
        let grid = config.scene.grid_side();
        let positions = grid_embeddings(grid, grid, config.width, config.temperature)?;
        Ok((
            Self {
                config: config.clone(),
                patch_embed,
                encoder,
                decoder,
                grid,
                positions,
            },
            store,
        ))
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, image: &Tensor, record: bool) -> Result<Forward> {
        let side = self.config.scene.image_size;
        if image.shape() != [side, side] {
            return Err(Error::Shape {
                op: "detector",
                detail: format!("image {:?}, expected [{side}, {side}]", image.shape()),
            });
        }
        let (emb, gh, gw) = self.patch_embed.forward(g, p, image)?;
        let pos = g.constant(self.positions.clone());
        let memory = self.encoder.forward(g, p, emb, pos, gh, gw)?;
        let decoder = self.decoder.forward(g, p, &memory, record)?;
        Ok(Forward { memory, decoder })
    }

    /// Set loss of one scene, summed over decoder layers.
    pub fn scene_loss(&self, g: &mut Graph, p: &Bound, scene: &Scene) -> Result<SetLoss> {
        let out = self.forward(g, p, &scene.image, false)?;
        let preds: Vec<(Var, Var)> = out.decoder.layers.iter().map(|l| (l.logits, l.boxes)).collect();
        set_loss(
            g,
            &preds,
            &scene.truth,
            &self.config.loss,
            self.config.class_loss(),
        )
    }

    /// Mean set loss over a batch.
    pub fn batch_loss(&self, g: &mut Graph, p: &Bound, scenes: &[Scene]) -> Result<BatchLoss> {
        if scenes.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let inv = 1.0 / scenes.len() as f64;
        let mut total: Option<Var> = None;
        let (mut class, mut l1, mut giou) = (0.0, 0.0, 0.0);
        for s in scenes {
            let l = self.scene_loss(g, p, s)?;
            class += l.class * inv;
            l1 += l.l1 * inv;
            giou += l.giou * inv;
            total = Some(match total {
                None => l.total,
                Some(t) => g.add(t, l.total)?,
            });
        }
        let total = g.scale(total.expect("non-empty batch"), inv)?;
        Ok(BatchLoss {
            total,
            value: g.value(total).item(),
            class,
            l1,
            giou,
        })
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, params: &ParamStore, image: &Tensor) -> Result<Prediction> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let out = self.forward(&mut g, &p, image, false)?;
        let last = out.decoder.layers.last().expect("at least one decoder layer");
        Ok(Prediction {
            logits: g.value(last.logits).clone(),
            boxes: g.value(last.boxes).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_scene;

    #[test]
    fn init_is_deterministic() {
        let c = TrainConfig::desk();
        let (_, a) = Detector::new(&c).unwrap();
        let (_, b) = Detector::new(&c).unwrap();
        assert_eq!(a.tensors(), b.tensors());
        let mut c2 = c.clone();
        c2.seed = 1;
        let (_, d) = Detector::new(&c2).unwrap();
        assert_ne!(a.tensors(), d.tensors());
    }

    #[test]
    fn prediction_shapes() {
        let c = TrainConfig::desk();
        let (m, p) = Detector::new(&c).unwrap();
        let s = generate_scene(&c.scene, 0).unwrap();
        let pred = m.predict(&p, &s.image).unwrap();
        assert_eq!(pred.logits.shape(), [c.queries, c.scene.classes]);
        assert_eq!(pred.boxes.shape(), [c.queries, 4]);
        assert!(pred.boxes.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn wrong_image_size() {
        let c = TrainConfig::desk();
        let (m, p) = Detector::new(&c).unwrap();
        assert!(m.predict(&p, &Tensor::zeros(&[16, 16])).is_err());
    }
}
