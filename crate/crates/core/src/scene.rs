//! Labeled two-modality scenes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fileio::{put_f32s, put_u32, read_bytes, write_bytes, ByteReader};
use crate::tensor::Tensor;

const SCENE_MAGIC: &[u8; 8] = b"RSMG1\0\0\0";
pub const SCENE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// A co-registered hyperspectral-like cube and elevation-like raster with a label map.
///
/// `labels` is row-major `[H,W]`; `-1` marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneCube {
    pub hs: Tensor,
    pub lidar: Tensor,
    pub labels: Vec<i32>,
    pub classes: usize,
    pub domain: Domain,
}

impl SceneCube {
    pub fn new(hs: Tensor, lidar: Tensor, labels: Vec<i32>, classes: usize, domain: Domain) -> Result<Self> {
        if hs.rank() != 3 || lidar.rank() != 3 {
            return Err(Error::Data("scene modalities must be [C,H,W]".into()));
        }
        if hs.shape()[1..] != lidar.shape()[1..] {
            return Err(Error::GridMismatch {
                expected: (hs.shape()[1], hs.shape()[2]),
                found: (lidar.shape()[1], lidar.shape()[2]),
            });
        }
        let (h, w) = (hs.shape()[1], hs.shape()[2]);
        if labels.len() != h * w {
            return Err(Error::Data(format!(
                "label raster has {} entries for a {h}x{w} grid",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l < -1 || l >= classes as i32) {
            return Err(Error::Data(format!("label {bad} outside -1..{classes}")));
        }
        Ok(SceneCube {
            hs,
            lidar,
            labels,
            classes,
            domain,
        })
    }

    pub fn height(&self) -> usize {
        self.hs.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.hs.shape()[2]
    }

    pub fn label(&self, row: usize, col: usize) -> i32 {
        self.labels[row * self.width() + col]
    }

    /// Labeled pixel coordinates in row-major order.
    pub fn labeled_pixels(&self) -> Vec<(usize, usize)> {
        let w = self.width();
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l >= 0)
            .map(|(i, _)| (i / w, i % w))
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in self.labels.iter().filter(|&&l| l >= 0) {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Serialize in the RSMG1 layout. The domain tag is not stored.
pub fn encode_scene(scene: &SceneCube) -> Vec<u8> {
    let (h, w) = (scene.height(), scene.width());
    let mut buf = Vec::with_capacity(32 + 4 * (scene.hs.numel() + scene.lidar.numel() + h * w));
    buf.extend_from_slice(SCENE_MAGIC);
    for v in [
        SCENE_VERSION as usize,
        h,
        w,
        scene.hs.shape()[0],
        scene.lidar.shape()[0],
        scene.classes,
    ] {
        put_u32(&mut buf, v as u32);
    }
    put_f32s(&mut buf, scene.hs.data());
    put_f32s(&mut buf, scene.lidar.data());
    for &l in &scene.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    buf
}

pub fn decode_scene(bytes: &[u8], domain: Domain, what: &str) -> Result<SceneCube> {
    let mut r = ByteReader::new(bytes, what);
    if r.take(8)? != SCENE_MAGIC {
        return Err(Error::BadMagic(what.to_string()));
    }
    let version = r.u32()?;
    if version != SCENE_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: SCENE_VERSION,
        });
    }
    let dims: Vec<usize> = (0..5).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let [h, w, c_hs, c_li, k] = dims[..] else {
        unreachable!()
    };
    if h == 0 || w == 0 || c_hs == 0 || c_li == 0 || k == 0 {
        return Err(Error::Data(format!("{what}: zero extent in header {dims:?}")));
    }
    let hs = Tensor::new(&[c_hs, h, w], r.f32s(c_hs * h * w)?)?;
    let lidar = Tensor::new(&[c_li, h, w], r.f32s(c_li * h * w)?)?;
    let labels = r.i32s(h * w)?;
    if r.remaining() != 0 {
        return Err(Error::Data(format!("{what}: {} trailing bytes", r.remaining())));
    }
    SceneCube::new(hs, lidar, labels, k, domain)
}

pub fn write_scene(path: &Path, scene: &SceneCube) -> Result<()> {
    write_bytes(path, &encode_scene(scene))
}

pub fn read_scene(path: &Path, domain: Domain) -> Result<SceneCube> {
    decode_scene(&read_bytes(path)?, domain, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn scene() -> SceneCube {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hs = Tensor::randn(&[3, 4, 5], &mut rng);
        let lidar = Tensor::randn(&[1, 4, 5], &mut rng);
        let labels = (0..20).map(|i| (i % 4) - 1).collect();
        SceneCube::new(hs, lidar, labels, 3, Domain::Source).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = scene();
        let back = decode_scene(&encode_scene(&s), Domain::Source, "mem").unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn corrupt_headers() {
        let bytes = encode_scene(&scene());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_scene(&bad, Domain::Source, "m"),
            Err(Error::BadMagic(_))
        ));
        assert!(matches!(
            decode_scene(&bytes[..bytes.len() - 3], Domain::Source, "m"),
            Err(Error::TruncatedFile(_))
        ));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(
            decode_scene(&v2, Domain::Source, "m"),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn counts_and_pixels() {
        let s = scene();
        assert_eq!(s.class_counts(), vec![5, 5, 5]);
        assert_eq!(s.labeled_pixels().len(), 15);
        assert_eq!(s.labeled_pixels()[0], (0, 1));
    }
}
