//! `VOL3` single-volume binary format.
//!
//! ```text
//! "VOL3" | version u16 | dtype u8 (0 = f32, 1 = u8 labels) | reserved u8
//!        | W, H, D u32 | sx, sy, sz f32 | payload, x fastest
//! ```
//!
//! All multi-byte fields are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volgrid::{Dims, LabelMap, Volume};

pub const MAGIC: &[u8; 4] = b"VOL3";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 12 + 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    U8 = 1,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

fn header(dtype: DType, dims: Dims, spacing: [f32; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + dims.voxel_count() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.push(0);
    for d in dims.to_array() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = header(DType::F32, v.dims(), v.spacing());
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_mask(m: &LabelMap, spacing: [f32; 3]) -> Vec<u8> {
    let mut out = header(DType::U8, m.dims(), spacing);
    out.extend_from_slice(m.data());
    out
}

struct Parsed<'a> {
    dtype: DType,
    dims: Dims,
    spacing: [f32; 3],
    payload: &'a [u8],
}

fn parse(bytes: &[u8]) -> Result<Parsed<'_>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN - bytes.len(),
            found: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected VOL3", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported VOL3 version {version}")));
    }
    let dtype = match bytes[6] {
        0 => DType::F32,
        1 => DType::U8,
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    let word = |o: usize| <[u8; 4]>::try_from(&bytes[o..o + 4]).expect("4 bytes");
    let dims = Dims::new(
        u32::from_le_bytes(word(8)) as usize,
        u32::from_le_bytes(word(12)) as usize,
        u32::from_le_bytes(word(16)) as usize,
    );
    if !dims.is_positive() {
        return Err(Error::Format(format!("non-positive dims {:?}", dims.to_array())));
    }
    let spacing = [
        f32::from_le_bytes(word(20)),
        f32::from_le_bytes(word(24)),
        f32::from_le_bytes(word(28)),
    ];
    let need = dims.voxel_count() * dtype.width();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < need {
        return Err(Error::Truncated {
            expected: need - payload.len(),
            found: bytes.len(),
        });
    }
    if payload.len() > need {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            payload.len() - need
        )));
    }
    Ok(Parsed {
        dtype,
        dims,
        spacing,
        payload,
    })
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let p = parse(bytes)?;
    if p.dtype != DType::F32 {
        return Err(Error::Format("expected f32 intensities, found u8 labels".into()));
    }
    let data = p
        .payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Volume::new(p.dims, p.spacing, data)
}

/// Decoded mask and the spacing stored with it.
pub fn decode_mask(bytes: &[u8]) -> Result<(LabelMap, [f32; 3])> {
    let p = parse(bytes)?;
    if p.dtype != DType::U8 {
        return Err(Error::Format("expected u8 labels, found f32 intensities".into()));
    }
    Ok((LabelMap::new(p.dims, p.payload.to_vec())?, p.spacing))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    fs::write(path, encode_volume(v))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

pub fn write_mask(path: &Path, m: &LabelMap, spacing: [f32; 3]) -> Result<()> {
    fs::write(path, encode_mask(m, spacing))?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<LabelMap> {
    Ok(decode_mask(&fs::read(path)?)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let v = Volume::new(Dims::new(2, 1, 1), [0.5, 1.0, 2.5], vec![1.0, -2.0]).unwrap();
        let b = encode_volume(&v);
        let mut expect = b"VOL3".to_vec();
        expect.extend_from_slice(&[1, 0, 0, 0]);
        expect.extend_from_slice(&[2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        expect.extend_from_slice(&0.5f32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&2.5f32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, expect);

        let m = LabelMap::new(Dims::new(3, 1, 1), vec![0, 1, 1]).unwrap();
        let b = encode_mask(&m, [1.0; 3]);
        assert_eq!(b[6], 1);
        assert_eq!(&b[HEADER_LEN..], &[0, 1, 1]);
    }

    #[test]
    fn truncated_reports_missing_bytes() {
        let v = Volume::filled(Dims::cube(2), 0.25);
        let b = encode_volume(&v);
        let err = decode_volume(&b[..b.len() - 5]).unwrap_err();
        assert!(matches!(err, Error::Truncated { expected: 5, .. }));
        assert!(err.to_string().contains("5 more bytes"));
        assert!(matches!(decode_volume(&b[..10]), Err(Error::Truncated { expected: 22, .. })));
    }

    #[test]
    fn wrong_magic_or_dtype() {
        let mut b = encode_volume(&Volume::filled(Dims::cube(1), 0.0));
        assert!(decode_mask(&b).is_err());
        b[3] = b'4';
        assert!(matches!(decode_volume(&b), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn volume_round_trip_is_bit_exact(
            (w, h, d) in (1usize..6, 1usize..6, 1usize..6),
            seed in any::<u64>(),
            spacing in prop::array::uniform3(0.1f32..5.0),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dims = Dims::new(w, h, d);
            let data: Vec<f32> = (0..dims.voxel_count()).map(|_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff)).collect();
            let v = Volume::new(dims, spacing, data).unwrap();
            let back = decode_volume(&encode_volume(&v)).unwrap();
            prop_assert_eq!(encode_volume(&back), encode_volume(&v));
            let m = LabelMap::from_fn(dims, |_, _, _| rng.gen_bool(0.5));
            prop_assert_eq!(decode_mask(&encode_mask(&m, spacing)).unwrap(), (m, spacing));
        }
    }
}
