#![allow(dead_code)]

use cdetr::attention::{AttentionVariant, MapKind, MemoryFeatures};
use cdetr::decoder::{CsqVariant, Decoder, DecoderConfig, FirstLayerRule, ProjectionForm, ReferenceMode};
use cdetr::positional::{grid_centers, grid_embeddings, DEFAULT_TEMPERATURE};
use cdetr::Graph;
use cdetr::nn::{Init, ParamGroup, ParamStore};
use cdetr::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn init<'a>(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Init<'a> {
    Init {
        store,
        rng,
        group: ParamGroup::Transformer,
    }
}

/// Row-major `a · b` for plain slices, `a: [n, k]`, `b: [k, m]`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * m + j];
            }
            out[i * m + j] = s;
        }
    }
    out
}

pub fn identity(d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[d, d]);
    for i in 0..d {
        t.data_mut()[i * d + i] = 1.0;
    }
    t
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn decoder_config(variant: AttentionVariant) -> DecoderConfig {
    DecoderConfig {
        width: 16,
        heads: 2,
        layers: 2,
        queries: 5,
        classes: 3,
        variant,
        csq: CsqVariant::Csq,
        projection: ProjectionForm::Diagonal,
        reference: ReferenceMode::Learned,
        offset_regression: true,
        first_layer: FirstLayerRule::UnitTransform,
        temperature: DEFAULT_TEMPERATURE,
    }
}

pub fn build_decoder(cfg: DecoderConfig, seed: u64) -> (Decoder, ParamStore) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let dec = Decoder::new(&mut init(&mut store, &mut r), cfg).unwrap();
    (dec, store)
}

/// Largest deviation, over `seeds` random decoders, between the first
/// layer's recorded additive logits and an independent four-term expansion
/// `c_qᵀc_k + c_qᵀp_k + o_qᵀc_k + o_qᵀp_k` of the projected query and key.
/// Checks combined, content (`c_k` terms) and spatial (`p_k` terms) logits.
pub fn additive_expansion_error(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut cfg = decoder_config(AttentionVariant::Additive);
        cfg.offset_regression = false;
        let (dec, mut store) = build_decoder(cfg.clone(), seed);
        let mut r = rng(seed + 7000);
        for t in store.tensors_mut() {
            let shape = t.shape().to_vec();
            *t = uniform(&mut r, &shape, -1.0, 1.0);
        }
        let (gh, gw) = (3, 3);
        let ck = uniform(&mut r, &[gh * gw, cfg.width], -1.0, 1.0);
        let pk = grid_embeddings(gh, gw, cfg.width, cfg.temperature).unwrap();

        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let memory = MemoryFeatures {
            content: g.constant(ck.clone()),
            positions: g.constant(pk.clone()),
            height: gh,
            width: gw,
        };
        let out = dec.forward(&mut g, &p, &memory, true).unwrap();
        // The first layer's content query, rebuilt from its parts.
        let l0 = &dec.layers[0];
        let zeros = g.constant(Tensor::zeros(&[cfg.queries, cfg.width]));
        let oq_var = p[dec.object_queries];
        let sa = l0.self_attention.forward(&mut g, &p, zeros, oq_var).unwrap();
        let cq_var = l0.norm1.forward(&mut g, &p, sa).unwrap();
        let cq = g.value(cq_var).clone();
        let oq = store.get(dec.object_queries).clone();

        let ca = &l0.cross_attention;
        let (n, k, d) = (cfg.queries, gh * gw, cfg.width);
        let wq = store.get(ca.query_content.weight).data();
        let bq = store.get(ca.query_content.bias.unwrap()).data();
        let wk = store.get(ca.key_content.weight).data();
        let bk = store.get(ca.key_content.bias.unwrap()).data();
        let mut qc = matmul(cq.data(), wq, n, d, d);
        let qo = matmul(oq.data(), wq, n, d, d);
        let mut kc = matmul(ck.data(), wk, k, d, d);
        let kp = matmul(pk.data(), wk, k, d, d);
        for i in 0..n {
            for j in 0..d {
                qc[i * d + j] += bq[j];
            }
        }
        for i in 0..k {
            for j in 0..d {
                kc[i * d + j] += bk[j];
            }
        }
        let maps = out.layers[0].maps.as_ref().unwrap();
        let dh = d / cfg.heads;
        let scale = ca.config.scale();
        for (h, hm) in maps.heads.iter().enumerate() {
            for i in 0..n {
                for j in 0..k {
                    let dot = |a: &[f64], b: &[f64]| -> f64 { (h * dh..(h + 1) * dh).map(|t| a[i * d + t] * b[j * d + t]).sum() };
                    let (t1, t2, t3, t4) = (dot(&qc, &kc), dot(&qc, &kp), dot(&qo, &kc), dot(&qo, &kp));
                    for (got, want) in [
                        (hm.logits(MapKind::Combined).at2(i, j), t1 + t2 + t3 + t4),
                        (hm.logits(MapKind::Content).at2(i, j), t1 + t3),
                        (hm.logits(MapKind::Spatial).at2(i, j), t2 + t4),
                    ] {
                        worst = worst.max((got * scale - want).abs());
                    }
                }
            }
        }
    }
    worst
}

/// Number of queries, out of one per cell of a `side × side` grid, whose
/// first-layer spatial-map argmax (identity transformation, identity
/// spatial projections, one head) is not the cell their reference point
/// sits on.
pub fn localization_misses(side: usize, width: usize) -> usize {
    let cells = side * side;
    let cfg = DecoderConfig {
        width,
        heads: 1,
        layers: 1,
        queries: cells,
        classes: 3,
        variant: AttentionVariant::Conditional,
        csq: CsqVariant::Csq,
        projection: ProjectionForm::Identity,
        reference: ReferenceMode::Learned,
        offset_regression: true,
        first_layer: FirstLayerRule::UnitTransform,
        temperature: DEFAULT_TEMPERATURE,
    };
    let (dec, mut store) = build_decoder(cfg, 11);
    let ca = &dec.layers[0].cross_attention;
    for l in [ca.query_spatial.as_ref().unwrap(), ca.key_spatial.as_ref().unwrap()] {
        *store.get_mut(l.weight) = identity(width);
    }
    // s = logit(center) so that sigmoid(s) is the cell center.
    let s: Vec<f64> = grid_centers(side, side)
        .iter()
        .flat_map(|c| c.map(|u| (u / (1.0 - u)).ln()))
        .collect();
    let id = store.find("decoder.reference_points").unwrap();
    *store.get_mut(id) = Tensor::new(vec![cells, 2], s).unwrap();

    let mut r = rng(12);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let memory = MemoryFeatures {
        content: g.constant(uniform(&mut r, &[cells, width], -1.0, 1.0)),
        positions: g.constant(grid_embeddings(side, side, width, DEFAULT_TEMPERATURE).unwrap()),
        height: side,
        width: side,
    };
    let out = dec.forward(&mut g, &p, &memory, true).unwrap();
    let spatial = &out.layers[0].maps.as_ref().unwrap().heads[0].spatial;
    (0..cells)
        .filter(|&q| {
            let row = spatial.row(q);
            let best = (0..cells).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            best != q
        })
        .count()
}

/// A few-second training setup: 32px scenes, narrow model, short budget.
pub fn tiny_config(iterations: usize) -> cdetr::TrainConfig {
    let mut c = cdetr::TrainConfig::desk();
    c.width = 16;
    c.heads = 2;
    c.encoder_layers = 1;
    c.decoder_layers = 2;
    c.queries = 6;
    c.iterations = iterations;
    c.lr_drop = iterations * 3 / 4;
    c.log_every = 5;
    c
}
