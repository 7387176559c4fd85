//! Binary feature files: magic `QACF`, u32-le rank, u32-le dims, then
//! row-major f32-le payload.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array3, ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"QACF";
const MAX_RANK: u32 = 8;

pub const FRAMES: usize = 4;
pub const REGIONS: usize = 49;
pub const VISUAL_DIM: usize = 512;
pub const AUDIO_DIM: usize = 256;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("io error on feature file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: bad magic bytes")]
    BadMagic { path: String },
    #[error("{path}: rank {rank} exceeds maximum {MAX_RANK}")]
    BadRank { path: String, rank: u32 },
    #[error("{path}: dims overflow")]
    DimsOverflow { path: String },
    #[error("{path}: payload size mismatch (expected {expected} elements)")]
    SizeMismatch { path: String, expected: usize },
    #[error("feature tensor has shape {found:?}, expected {expected}")]
    BadShape { found: Vec<usize>, expected: String },
    #[error("feature tensor contains non-finite values")]
    NonFinite,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> FeatureError + '_ {
    move |source| FeatureError::Io { path: path.display().to_string(), source }
}

pub fn write_feature_file(path: &Path, array: &ArrayD<f32>) -> Result<(), FeatureError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    f.write_all(MAGIC).map_err(io_err(path))?;
    f.write_u32::<LittleEndian>(array.ndim() as u32).map_err(io_err(path))?;
    for &d in array.shape() {
        f.write_u32::<LittleEndian>(d as u32).map_err(io_err(path))?;
    }
    // row-major traversal
    for &x in array.iter() {
        f.write_f32::<LittleEndian>(x).map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<ArrayD<f32>, FeatureError> {
    let p = path.display().to_string();
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err(path))?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MAGIC {
        return Err(FeatureError::BadMagic { path: p });
    }
    let rank = f.read_u32::<LittleEndian>().map_err(io_err(path))?;
    if rank > MAX_RANK {
        return Err(FeatureError::BadRank { path: p, rank });
    }
    let mut dims = Vec::with_capacity(rank as usize);
    let mut total: usize = 1;
    for _ in 0..rank {
        let d = f.read_u32::<LittleEndian>().map_err(io_err(path))? as usize;
        total = total
            .checked_mul(d)
            .ok_or_else(|| FeatureError::DimsOverflow { path: p.clone() })?;
        dims.push(d);
    }
    let mut data = vec![0.0f32; total];
    for x in data.iter_mut() {
        *x = f
            .read_f32::<LittleEndian>()
            .map_err(|_| FeatureError::SizeMismatch { path: p.clone(), expected: total })?;
    }
    // trailing bytes also count as a size mismatch
    let mut extra = [0u8; 1];
    if f.read(&mut extra).map_err(io_err(path))? != 0 {
        return Err(FeatureError::SizeMismatch { path: p, expected: total });
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&dims), data).expect("dims consistent"))
}

/// Precomputed features for one video: `[4, 49, 512]` visual regions and a
/// `[256]` audio vector. Frame 0 is the start frame, frame 3 the end frame.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub visual: Array3<f32>,
    pub audio: Array1<f32>,
}

impl FeatureSet {
    pub fn new(visual: Array3<f32>, audio: Array1<f32>) -> Result<Self, FeatureError> {
        if visual.dim() != (FRAMES, REGIONS, VISUAL_DIM) {
            return Err(FeatureError::BadShape {
                found: visual.shape().to_vec(),
                expected: format!("[{FRAMES}, {REGIONS}, {VISUAL_DIM}]"),
            });
        }
        if audio.len() != AUDIO_DIM {
            return Err(FeatureError::BadShape {
                found: audio.shape().to_vec(),
                expected: format!("[{AUDIO_DIM}]"),
            });
        }
        if visual.iter().any(|x| !x.is_finite()) || audio.iter().any(|x| !x.is_finite()) {
            return Err(FeatureError::NonFinite);
        }
        Ok(FeatureSet { visual, audio })
    }

    pub fn from_arrays(visual: ArrayD<f32>, audio: ArrayD<f32>) -> Result<Self, FeatureError> {
        let vis = visual
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|_| FeatureError::BadShape {
                found: vec![],
                expected: format!("[{FRAMES}, {REGIONS}, {VISUAL_DIM}]"),
            })?;
        let aud = audio
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|_| FeatureError::BadShape { found: vec![], expected: format!("[{AUDIO_DIM}]") })?;
        FeatureSet::new(vis, aud)
    }

    pub fn visual_dyn(&self) -> ArrayD<f32> {
        self.visual.clone().into_dyn()
    }

    pub fn audio_dyn(&self) -> ArrayD<f32> {
        self.audio.clone().into_dyn()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn visual_shape_roundtrip_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vis.qacf");
        let arr = ArrayD::from_shape_fn(IxDyn(&[4, 49, 512]), |ix| {
            (ix[0] * 1000 + ix[1] * 10 + ix[2]) as f32 * 0.001
        });
        write_feature_file(&path, &arr).unwrap();
        let size = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(size, 4 + 4 + 3 * 4 + 4 * 49 * 512 * 4);
        let back = read_feature_file(&path).unwrap();
        assert_eq!(arr, back);
    }

    #[test]
    fn truncated_payload_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.qacf");
        let arr = ArrayD::from_shape_fn(IxDyn(&[256]), |ix| ix[0] as f32);
        write_feature_file(&path, &arr).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_feature_file(&path).unwrap_err();
        assert!(matches!(err, FeatureError::SizeMismatch { .. }), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.qacf");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x02\x00\x00\x00").unwrap();
        assert!(matches!(read_feature_file(&path).unwrap_err(), FeatureError::BadMagic { .. }));
    }

    proptest! {
        #[test]
        fn roundtrip_bit_exact_any_rank(
            dims in proptest::collection::vec(1usize..6, 0..=4),
            seed in any::<u32>(),
        ) {
            let total: usize = dims.iter().product();
            let data: Vec<f32> = (0..total)
                .map(|i| f32::from_bits((seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503)) | 0x3f000000) % 1e6)
                .map(|x| if x.is_finite() { x } else { 0.0 })
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.qacf");
            write_feature_file(&path, &arr).unwrap();
            let back = read_feature_file(&path).unwrap();
            prop_assert_eq!(arr.shape(), back.shape());
            prop_assert!(arr.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
