//! Binary PPM (P6) classification maps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fileio::write_bytes;

/// Colors for trees, roads and buildings; anything else is unlabeled.
pub const CLASS_COLORS: [[u8; 3]; 3] = [[0, 0, 255], [255, 165, 0], [0, 128, 0]];
pub const UNLABELED_COLOR: [u8; 3] = [0, 0, 0];

/// Encode a row-major `[h, w]` map of class ids (`-1` for unlabeled) as P6.
pub fn encode_classification_map(preds: &[i32], h: usize, w: usize) -> Result<Vec<u8>> {
    if preds.len() != h * w {
        return Err(Error::shape("classification map", &[preds.len()], &[h, w]));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for &p in preds {
        let color = match p {
            -1 => UNLABELED_COLOR,
            0..=2 => CLASS_COLORS[p as usize],
            other => return Err(Error::InvalidArg(format!("class id {other} has no map color"))),
        };
        out.extend_from_slice(&color);
    }
    Ok(out)
}

pub fn write_classification_map(path: &Path, preds: &[i32], h: usize, w: usize) -> Result<()> {
    write_bytes(path, &encode_classification_map(preds, h, w)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel() {
        let b = encode_classification_map(&[0], 1, 1).unwrap();
        assert_eq!(b, b"P6\n1 1\n255\n\x00\x00\xff");
    }

    #[test]
    fn unlabeled_is_black_and_bad_ids_error() {
        let b = encode_classification_map(&[-1, 1], 1, 2).unwrap();
        assert_eq!(&b[b.len() - 6..], &[0, 0, 0, 255, 165, 0]);
        assert!(encode_classification_map(&[3], 1, 1).is_err());
        assert!(encode_classification_map(&[0, 0], 1, 1).is_err());
    }
}
