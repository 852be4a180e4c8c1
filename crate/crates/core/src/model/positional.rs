use crate::error::{Error, Result};
use crate::schedule::PositionIndex;

/// Sinusoidal encoding at a (possibly negative) index: component `2i` is
/// `sin(p / 10000^(2i/d))` and component `2i + 1` the matching cosine.
pub fn sinusoid(index: i64, d: usize) -> Vec<f32> {
    let mut out = vec![0.0; d];
    sinusoid_into(index, &mut out);
    out
}

pub(crate) fn sinusoid_into(index: i64, out: &mut [f32]) {
    let d = out.len();
    let p = index as f64;
    for i in 0..d.div_ceil(2) {
        let angle = p * 10000f64.powf(-((2 * i) as f64) / d as f64);
        out[2 * i] = angle.sin() as f32;
        if 2 * i + 1 < d {
            out[2 * i + 1] = angle.cos() as f32;
        }
    }
}

/// Encoding for a schedule position. Step/direction pairs use the step only;
/// the direction goes through the direction embedding table.
pub fn sinusoidal_encoding(position: PositionIndex, d: usize, max_abs_position: usize) -> Result<Vec<f32>> {
    let index = position.encoding_index();
    if index.unsigned_abs() as usize > max_abs_position {
        return Err(Error::PositionOverflow { position: index, max: max_abs_position });
    }
    Ok(sinusoid(index, d))
}
