//! Two-dimensional sinusoidal positional embeddings.
//!
//! A width-`d` embedding of a normalized point `(x, y)` is the concatenation
//! of a `d/2` embedding of `x` and a `d/2` embedding of `y`. Each half holds
//! `d/4` frequencies laid out as `[sin a0, cos a0, sin a1, cos a1, ...]` with
//! `a_i = u * 2π / T^(2i / (d/2))`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_TEMPERATURE: f64 = 10_000.0;

fn check_width(d: usize) -> Result<()> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Invalid(format!(
            "embedding width must be a positive multiple of 4, got {d}"
        )));
    }
    Ok(())
}

/// Angular frequencies `2π / T^(2i / (d/2))` for `i in 0..d/4`.
pub fn frequencies(d: usize, temperature: f64) -> Vec<f64> {
    let half = (d / 2) as f64;
    (0..d / 4)
        .map(|i| 2.0 * PI / temperature.powf(2.0 * i as f64 / half))
        .collect()
}

/// Embeds a point of the unit square.
pub fn sinusoidal_embed(u: [f64; 2], d: usize, temperature: f64) -> Result<Vec<f64>> {
    check_width(d)?;
    if !(temperature > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {temperature}")));
    }
    if u.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::Invalid(format!("coordinate {u:?} outside [0, 1]^2")));
    }
    let freqs = frequencies(d, temperature);
    let mut out = Vec::with_capacity(d);
    for coord in u {
        for &f in &freqs {
            out.extend(crate::tensor::sin_cos(coord * f));
        }
    }
    Ok(out)
}

/// Normalized cell centers of an `h × w` grid in row-major order, as `(x, y)`.
pub fn grid_centers(h: usize, w: usize) -> Vec<[f64; 2]> {
    (0..h)
        .flat_map(|i| {
            (0..w).map(move |j| [(j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64])
        })
        .collect()
}

/// `[h * w, d]` embeddings of the cell centers of an `h × w` grid.
pub fn grid_embeddings(h: usize, w: usize, d: usize, temperature: f64) -> Result<Tensor> {
    if h == 0 || w == 0 {
        return Err(Error::Invalid(format!("empty grid {h}x{w}")));
    }
    let mut data = Vec::with_capacity(h * w * d);
    for c in grid_centers(h, w) {
        data.extend(sinusoidal_embed(c, d, temperature)?);
    }
    Tensor::new(vec![h * w, d], data)
}

/// Differentiable embedding of `[n, 2]` normalized points into `[n, d]`.
///
/// Produces the same bits as [`sinusoidal_embed`] for each row.
pub fn embed_points(g: &mut Graph, points: Var, d: usize, temperature: f64) -> Result<Var> {
    check_width(d)?;
    let freqs = frequencies(d, temperature);
    let q = d / 4;
    let mut proj = vec![0.0; 2 * 2 * q];
    for (i, &f) in freqs.iter().enumerate() {
        proj[i] = f;
        proj[2 * q + q + i] = f;
    }
    let proj = g.constant(Tensor::new(vec![2, 2 * q], proj)?);
    let angles = g.matmul(points, proj)?;
    g.sin_cos(angles)
}
