//! Procedural scenes: non-overlapping filled rectangles whose fill pattern
//! encodes the class (solid, horizontal stripes, checkerboard, ...).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::SceneConfig;
use crate::error::{Error, Result};
use crate::loss::GroundTruthSet;
use crate::tensor::Tensor;

/// Attempts per object before the layout is abandoned.
const PLACEMENT_ATTEMPTS: usize = 200;

/// Fresh layouts tried before the scene is declared impossible. Early
/// rectangles can leave no room for later ones even when the count fits.
const LAYOUT_RESTARTS: usize = 50;

/// Normalized widths/heights are capped at `1 - FULL_EXTENT_EPS`.
pub const FULL_EXTENT_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[image_size, image_size]` intensities in `[0, 1]`.
    pub image: Tensor,
    pub truth: GroundTruthSet,
}

/// Pixel rectangle `(x0, y0, w, h)`.
type Rect = (usize, usize, usize, usize);

fn overlaps(a: Rect, b: Rect) -> bool {
    a.0 < b.0 + b.2 && b.0 < a.0 + a.2 && a.1 < b.1 + b.3 && b.1 < a.1 + a.3
}

/// Fill value of class `class` at absolute pixel `(x, y)`.
pub fn texture(class: usize, x: usize, y: usize) -> f64 {
    let level = 1.0 - 0.25 * (class / 3) as f64;
    let on = match class % 3 {
        0 => true,
        1 => y % 2 == 0,
        _ => (x + y) % 2 == 0,
    };
    if on {
        level.max(0.1)
    } else {
        0.0
    }
}

/// SplitMix64 finalizer, used to derive independent scene seeds.
pub fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One attempt at placing `count` disjoint rectangles with classes.
fn layout(rng: &mut ChaCha8Rng, config: &SceneConfig, count: usize, lo: usize, hi: usize) -> Option<Vec<(Rect, usize)>> {
    let side = config.image_size;
    let mut rects: Vec<(Rect, usize)> = Vec::with_capacity(count);
    for _ in 0..count {
        let r = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let w = rng.gen_range(lo..=hi);
            let h = rng.gen_range(lo..=hi);
            let r = (rng.gen_range(0..=side - w), rng.gen_range(0..=side - h), w, h);
            rects.iter().all(|(o, _)| !overlaps(*o, r)).then_some(r)
        })?;
        rects.push((r, rng.gen_range(0..config.classes)));
    }
    Some(rects)
}

pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = config.image_size;
    let count = rng.gen_range(config.min_objects..=config.max_objects);
    let lo = ((config.min_size * side as f64).round() as usize).clamp(1, side);
    let hi = ((config.max_size * side as f64).round() as usize).clamp(lo, side);

    let rects = (0..LAYOUT_RESTARTS)
        .find_map(|_| layout(&mut rng, config, count, lo, hi))
        .ok_or(Error::Placement {
            count,
            attempts: PLACEMENT_ATTEMPTS * LAYOUT_RESTARTS,
        })?;

    let mut image = Tensor::zeros(&[side, side]);
    let s = side as f64;
    let cap = 1.0 - FULL_EXTENT_EPS;
    let mut truth = GroundTruthSet {
        boxes: Vec::with_capacity(count),
        classes: Vec::with_capacity(count),
    };
    for &((x0, y0, w, h), class) in &rects {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                image.data_mut()[y * side + x] = texture(class, x, y);
            }
        }
        truth.boxes.push([
            (x0 as f64 + 0.5 * w as f64) / s,
            (y0 as f64 + 0.5 * h as f64) / s,
            (w as f64 / s).min(cap),
            (h as f64 / s).min(cap),
        ]);
        truth.classes.push(class);
    }
    Ok(Scene { image, truth })
}
