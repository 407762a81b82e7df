//! Binary `.kpm` and `.sil` sequence files.
//!
//! Both start with a 4-byte magic and three little-endian `u32` dimensions.
//! `.kpm` continues with `T·12·3` little-endian `f32` values, `.sil` with
//! `T·64·64` bytes in `{0, 1}`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::NUM_JOINTS;
use crate::silhouette::FRAME_SIZE;

use super::{KeypointsMatrix, SilhouetteSequence, KP_CHANNELS};

pub const KPM_MAGIC: &[u8; 4] = b"KPM1";
pub const SIL_MAGIC: &[u8; 4] = b"SIL1";
const HEADER: usize = 16;

fn header(magic: &[u8; 4], dims: [usize; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER);
    out.extend_from_slice(magic);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

fn parse_header(bytes: &[u8], magic: &[u8; 4], what: &str) -> Result<[usize; 3]> {
    if bytes.len() < HEADER || &bytes[..4] != magic {
        return Err(Error::Format(format!("not a {what} file")));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 4 + 4 * i;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    }
    Ok(dims)
}

pub fn encode_kpm(kp: &KeypointsMatrix) -> Vec<u8> {
    let mut out = header(KPM_MAGIC, [kp.frames(), NUM_JOINTS, KP_CHANNELS]);
    out.reserve(kp.data().len() * 4);
    for v in kp.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_kpm(bytes: &[u8]) -> Result<KeypointsMatrix> {
    let [t, j, c] = parse_header(bytes, KPM_MAGIC, "keypoints")?;
    if j != NUM_JOINTS || c != KP_CHANNELS {
        return Err(Error::Format(format!("keypoints file has {j} joints x {c} channels")));
    }
    let body = &bytes[HEADER..];
    if body.len() != t * j * c * 4 {
        return Err(Error::Format(format!("keypoints file holds {} bytes for {t} frames", body.len())));
    }
    let data = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    KeypointsMatrix::new(t, data)
}

pub fn encode_sil(sil: &SilhouetteSequence) -> Vec<u8> {
    let mut out = header(SIL_MAGIC, [sil.frames(), FRAME_SIZE, FRAME_SIZE]);
    out.extend_from_slice(sil.data());
    out
}

pub fn decode_sil(bytes: &[u8]) -> Result<SilhouetteSequence> {
    let [t, h, w] = parse_header(bytes, SIL_MAGIC, "silhouette")?;
    if h != FRAME_SIZE || w != FRAME_SIZE {
        return Err(Error::Format(format!("silhouette frames are {h}x{w}, expected 64x64")));
    }
    let body = &bytes[HEADER..];
    if body.len() != t * h * w {
        return Err(Error::Format(format!("silhouette file holds {} bytes for {t} frames", body.len())));
    }
    SilhouetteSequence::new(t, body.to_vec())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn write_kpm(path: &Path, kp: &KeypointsMatrix) -> Result<()> {
    write_file(path, &encode_kpm(kp))
}

pub fn read_kpm(path: &Path) -> Result<KeypointsMatrix> {
    decode_kpm(&fs::read(path)?)
}

pub fn write_sil(path: &Path, sil: &SilhouetteSequence) -> Result<()> {
    write_file(path, &encode_sil(sil))
}

pub fn read_sil(path: &Path) -> Result<SilhouetteSequence> {
    decode_sil(&fs::read(path)?)
}
