//! Export of recorded cross-attention maps as PGM images and CSV grids.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attention::MapKind;
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::nn::ParamStore;
use crate::tensor::{Graph, Tensor};

/// Binary 8-bit PGM, scaled so the map maximum becomes 255.
pub fn pgm_bytes(map: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = map.shape() else {
        return Err(Error::Invalid(format!("PGM needs a 2-D map, got {:?}", map.shape())));
    };
    let max = map.data().iter().copied().fold(0.0, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| {
        if max > 0.0 {
            (255.0 * v.max(0.0) / max).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// One CSV line per grid row.
pub fn map_csv(map: &Tensor) -> Result<String> {
    let [h, w] = map.shape() else {
        return Err(Error::Invalid(format!("CSV needs a 2-D map, got {:?}", map.shape())));
    };
    let mut s = String::new();
    for r in 0..*h {
        let row: Vec<String> = map.data()[r * w..(r + 1) * w].iter().map(|v| v.to_string()).collect();
        writeln!(s, "{}", row.join(",")).expect("write to string");
    }
    Ok(s)
}

/// Runs one image with recording on and writes
/// `layer{l}_head{m}_{kind}.{pgm,csv}` for `query` into `out`.
pub fn dump_attention(
    model: &Detector,
    params: &ParamStore,
    image: &Tensor,
    query: usize,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    if query >= model.config.queries {
        return Err(Error::Invalid(format!(
            "query {query} out of range for {} object queries",
            model.config.queries
        )));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let fwd = model.forward(&mut g, &p, image, true)?;
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for (l, layer) in fwd.decoder.layers.iter().enumerate() {
        let maps = layer.maps.as_ref().ok_or(Error::RecordingDisabled)?;
        for m in 0..maps.heads.len() {
            for kind in MapKind::ALL {
                let map = maps.map(m, kind, query)?;
                let stem = format!("layer{l}_head{m}_{}", kind.label());
                let pgm = out.join(format!("{stem}.pgm"));
                let csv = out.join(format!("{stem}.csv"));
                std::fs::write(&pgm, pgm_bytes(&map)?)?;
                std::fs::write(&csv, map_csv(&map)?)?;
                written.push(pgm);
                written.push(csv);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_scaling() {
        let t = Tensor::new(vec![2, 3], vec![0.0, 0.1, 0.2, 0.05, 0.4, 0.25]).unwrap();
        let b = pgm_bytes(&t).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(&b[header.len()..], &[0, 64, 128, 32, 255, 159]);
    }

    #[test]
    fn csv_layout() {
        let t = Tensor::new(vec![2, 2], vec![0.25, 0.5, 0.125, 0.125]).unwrap();
        assert_eq!(map_csv(&t).unwrap(), "0.25,0.5\n0.125,0.125\n");
    }
}
