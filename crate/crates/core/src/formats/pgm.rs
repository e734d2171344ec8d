//! 8-bit binary PGM (P5) export of 2-D maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Min-max normalizes `map` (`H × W`) into 0..=255. A constant map is all zeros.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    if map.rank() != 2 {
        return Err(Error::DimensionMismatch {
            what: "heatmap rank".into(),
            expected: 2,
            actual: map.rank(),
        });
    }
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", map.cols(), map.rows()).into_bytes();
    out.extend(map.data().iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn save_pgm(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_pgm(map)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_to_full_range() {
        let t = Tensor::from_rows(&[[-1.0, 0.0], [0.5, 1.0]]).unwrap();
        let b = encode_pgm(&t).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(&b[header.len()..], &[0, 128, 191, 255]);
    }

    #[test]
    fn constant_map_is_black() {
        let b = encode_pgm(&Tensor::full(&[1, 3], 0.7)).unwrap();
        assert_eq!(&b[b.len() - 3..], &[0, 0, 0]);
    }
}
