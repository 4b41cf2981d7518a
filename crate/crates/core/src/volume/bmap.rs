//! BMAP1 raw volume files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BMAP1\n"  u32 nx  u32 ny  u32 nz  u8 kind
//! kind 0: nx*ny*nz f32, C order
//! kind 1: u32 name_len, name (utf-8, companion mask file name), u32 p, p f32
//! kind 2: nx*ny*nz u8 (0/1), C order -- masks
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{BrainMask, VolumeGrid};

pub const MAGIC: &[u8; 6] = b"BMAP1\n";

const KIND_VOLUME: u8 = 0;
const KIND_MASKED: u8 = 1;
const KIND_MASK: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Volume(Vec<f32>),
    Masked { mask_name: String, values: Vec<f32> },
    Mask(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bmap {
    pub dims: [u32; 3],
    pub payload: Payload,
}

impl Bmap {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32);
        out.extend_from_slice(MAGIC);
        for d in self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.payload {
            Payload::Volume(values) => {
                out.push(KIND_VOLUME);
                out.reserve(values.len() * 4);
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::Masked { mask_name, values } => {
                out.push(KIND_MASKED);
                out.extend_from_slice(&(mask_name.len() as u32).to_le_bytes());
                out.extend_from_slice(mask_name.as_bytes());
                out.extend_from_slice(&(values.len() as u32).to_le_bytes());
                out.reserve(values.len() * 4);
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::Mask(cells) => {
                out.push(KIND_MASK);
                out.extend_from_slice(cells);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(6)? != MAGIC {
            return Err(Error::format("BMAP1 file", "bad magic"));
        }
        let dims = [r.u32()?, r.u32()?, r.u32()?];
        let n_cells = dims.iter().map(|&d| d as usize).product::<usize>();
        let payload = match r.u8()? {
            KIND_VOLUME => Payload::Volume(r.f32s(n_cells)?),
            KIND_MASKED => {
                let len = r.u32()? as usize;
                let name = std::str::from_utf8(r.take(len)?)
                    .map_err(|_| Error::format("BMAP1 file", "mask name is not utf-8"))?
                    .to_owned();
                let p = r.u32()? as usize;
                Payload::Masked {
                    mask_name: name,
                    values: r.f32s(p)?,
                }
            }
            KIND_MASK => {
                let cells = r.take(n_cells)?.to_vec();
                if cells.iter().any(|&c| c > 1) {
                    return Err(Error::format("BMAP1 mask", "cell values must be 0 or 1"));
                }
                Payload::Mask(cells)
            }
            k => return Err(Error::format("BMAP1 file", format!("unknown payload kind {k}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format("BMAP1 file", "trailing bytes"));
        }
        Ok(Self { dims, payload })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format { what, detail } => Error::Format {
                what,
                detail: format!("{}: {detail}", path.display()),
            },
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn from_mask(mask: &BrainMask) -> Self {
        Self {
            dims: dims_u32(mask.grid()),
            payload: Payload::Mask(mask.in_mask().iter().map(|&b| u8::from(b)).collect()),
        }
    }

    pub fn from_masked(mask: &BrainMask, mask_name: &str, values: &[f64]) -> Self {
        Self {
            dims: dims_u32(mask.grid()),
            payload: Payload::Masked {
                mask_name: mask_name.to_owned(),
                values: values.iter().map(|&v| v as f32).collect(),
            },
        }
    }

    pub fn from_volume(grid: &VolumeGrid, values: &[f64]) -> Self {
        Self {
            dims: dims_u32(grid),
            payload: Payload::Volume(values.iter().map(|&v| v as f32).collect()),
        }
    }

    /// Interpret as a mask on a grid with the given voxel size.
    pub fn into_mask(self, voxel_size: [f64; 3]) -> Result<BrainMask> {
        let grid = VolumeGrid::new(self.dims.map(|d| d as usize), voxel_size)?;
        match self.payload {
            Payload::Mask(cells) => BrainMask::new(grid, cells.into_iter().map(|c| c == 1).collect()),
            _ => Err(Error::format("BMAP1 mask", "payload is not a mask")),
        }
    }
}

fn dims_u32(grid: &VolumeGrid) -> [u32; 3] {
    grid.dims().map(|d| d as u32)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("BMAP1 file", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format("BMAP1 file", "size overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let b = Bmap {
            dims: [2, 1, 1],
            payload: Payload::Volume(vec![1.0, -2.5]),
        };
        let bytes = b.encode();
        assert_eq!(&bytes[..6], b"BMAP1\n");
        assert_eq!(&bytes[6..18], &[2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(bytes[18], 0);
        assert_eq!(&bytes[19..23], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 27);
    }

    #[test]
    fn mask_roundtrip_and_rejections() {
        let grid = VolumeGrid::new([3, 2, 2], [2.0; 3]).unwrap();
        let mask = BrainMask::ellipsoid(grid, [1.4, 1.0, 1.0]).unwrap();
        let enc = Bmap::from_mask(&mask).encode();
        let back = Bmap::decode(&enc).unwrap().into_mask([2.0; 3]).unwrap();
        assert_eq!(back, mask);

        let mut bad = enc.clone();
        bad[0] = b'X';
        assert!(Bmap::decode(&bad).is_err());
        assert!(Bmap::decode(&enc[..enc.len() - 1]).is_err());
        let mut extra = enc;
        extra.push(0);
        assert!(Bmap::decode(&extra).is_err());
    }

    proptest! {
        #[test]
        fn masked_payload_roundtrip(values in proptest::collection::vec(any::<f32>(), 0..64), name in "[a-z_.]{0,12}") {
            let b = Bmap { dims: [4, 4, 4], payload: Payload::Masked { mask_name: name, values } };
            let back = Bmap::decode(&b.encode()).unwrap();
            prop_assert_eq!(back.encode(), b.encode());
        }
    }
}
