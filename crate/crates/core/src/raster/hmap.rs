//! The `HMAP` raster container.
//!
//! Layout (little-endian):
//!
//! | bytes | field                                  |
//! |-------|----------------------------------------|
//! | 4     | magic `HMAP`                           |
//! | 4     | u32 width                              |
//! | 4     | u32 height                             |
//! | 4     | u32 channels                           |
//! | 4     | f32 gsd in meters                      |
//! | 1     | u8 dtype: 0 = f32, 1 = u16 labels      |
//! | ...   | row-major, channel-interleaved payload |

use std::fs;
use std::path::Path;

use super::{LabelGrid, RasterGrid};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HMAP";
pub const HEADER_LEN: usize = 21;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U16: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmapHeader {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub gsd_m: f32,
    pub dtype: u8,
}

/// Raw label payload; the class count is not part of the container.
#[derive(Debug, Clone, PartialEq)]
pub struct RawLabels {
    pub height: usize,
    pub width: usize,
    pub gsd_m: f32,
    pub labels: Vec<u16>,
}

impl RawLabels {
    pub fn into_label_grid(self, num_classes: usize) -> Result<LabelGrid> {
        LabelGrid::new(self.height, self.width, num_classes, self.labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Hmap {
    Raster(RasterGrid),
    Labels(RawLabels),
}

fn header_bytes(h: &HmapHeader) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&h.width.to_le_bytes());
    out.extend_from_slice(&h.height.to_le_bytes());
    out.extend_from_slice(&h.channels.to_le_bytes());
    out.extend_from_slice(&h.gsd_m.to_le_bytes());
    out.push(h.dtype);
    out
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))
}

pub fn encode_raster(grid: &RasterGrid) -> Result<Vec<u8>> {
    let mut out = header_bytes(&HmapHeader {
        width: dim_u32(grid.width(), "width")?,
        height: dim_u32(grid.height(), "height")?,
        channels: dim_u32(grid.channels(), "channels")?,
        gsd_m: grid.gsd_m(),
        dtype: DTYPE_F32,
    });
    out.reserve(grid.data().len() * 4);
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_labels(labels: &LabelGrid, gsd_m: f32) -> Result<Vec<u8>> {
    let mut out = header_bytes(&HmapHeader {
        width: dim_u32(labels.width(), "width")?,
        height: dim_u32(labels.height(), "height")?,
        channels: 1,
        gsd_m,
        dtype: DTYPE_U16,
    });
    out.reserve(labels.labels().len() * 2);
    for v in labels.labels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_header(bytes: &[u8]) -> Result<HmapHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "HMAP header needs {HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("missing HMAP magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    Ok(HmapHeader {
        width: u32_at(4),
        height: u32_at(8),
        channels: u32_at(12),
        gsd_m: f32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")),
        dtype: bytes[20],
    })
}

pub fn decode(bytes: &[u8]) -> Result<Hmap> {
    let h = decode_header(bytes)?;
    let count = h.width as usize * h.height as usize * h.channels as usize;
    let payload = &bytes[HEADER_LEN..];
    match h.dtype {
        DTYPE_F32 => {
            if payload.len() != count * 4 {
                return Err(Error::Format(format!(
                    "f32 payload is {} bytes, expected {}",
                    payload.len(),
                    count * 4
                )));
            }
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            Ok(Hmap::Raster(RasterGrid::new(
                h.height as usize,
                h.width as usize,
                h.channels as usize,
                h.gsd_m,
                data,
            )?))
        }
        DTYPE_U16 => {
            if h.channels != 1 {
                return Err(Error::Format("label HMAP must have one channel".into()));
            }
            if payload.len() != count * 2 {
                return Err(Error::Format(format!(
                    "u16 payload is {} bytes, expected {}",
                    payload.len(),
                    count * 2
                )));
            }
            let labels = payload
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]))
                .collect();
            Ok(Hmap::Labels(RawLabels {
                height: h.height as usize,
                width: h.width as usize,
                gsd_m: h.gsd_m,
                labels,
            }))
        }
        t => Err(Error::Format(format!("unknown HMAP dtype tag {t}"))),
    }
}

pub fn read(path: impl AsRef<Path>) -> Result<Hmap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<RasterGrid> {
    match read(path.as_ref())? {
        Hmap::Raster(g) => Ok(g),
        Hmap::Labels(_) => Err(Error::Format(format!(
            "{}: expected f32 raster, found labels",
            path.as_ref().display()
        ))),
    }
}

pub fn read_labels(path: impl AsRef<Path>, num_classes: usize) -> Result<LabelGrid> {
    match read(path.as_ref())? {
        Hmap::Labels(l) => l.into_label_grid(num_classes),
        Hmap::Raster(_) => Err(Error::Format(format!(
            "{}: expected u16 labels, found f32 raster",
            path.as_ref().display()
        ))),
    }
}

pub fn write_raster(path: impl AsRef<Path>, grid: &RasterGrid) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_raster(grid)?).map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelGrid, gsd_m: f32) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_labels(labels, gsd_m)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_bit_exact() {
        let g = RasterGrid::new(2, 3, 1, 0.5, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode_raster(&g).unwrap();
        assert_eq!(&bytes[0..4], b"HMAP");
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &0.5f32.to_le_bytes());
        assert_eq!(bytes[20], 0);
        assert_eq!(&bytes[21..25], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 21 + 6 * 4);
    }

    #[test]
    fn labels_use_u16_tag() {
        let l = LabelGrid::new(1, 3, 6, vec![0, 5, 2]).unwrap();
        let bytes = encode_labels(&l, 1.0).unwrap();
        assert_eq!(bytes[20], 1);
        assert_eq!(&bytes[21..23], &0u16.to_le_bytes());
        assert_eq!(&bytes[23..25], &5u16.to_le_bytes());
        match decode(&bytes).unwrap() {
            Hmap::Labels(raw) => assert_eq!(raw.into_label_grid(6).unwrap(), l),
            _ => panic!("expected labels"),
        }
    }

    #[test]
    fn corrupt_inputs_rejected() {
        assert!(decode(b"HMA").is_err());
        let g = RasterGrid::zeros(2, 2, 1, 1.0).unwrap();
        let mut bytes = encode_raster(&g).unwrap();
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
        let mut bytes = encode_raster(&g).unwrap();
        bytes.pop();
        assert!(decode(&bytes).is_err());
        let mut bytes = encode_raster(&g).unwrap();
        bytes[20] = 9;
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = read("/nonexistent/dir/tile.hmap").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/tile.hmap"));
    }

    proptest! {
        #[test]
        fn raster_roundtrip(
            h in 1usize..6, w in 1usize..6, c in 1usize..4,
            gsd in 0.01f32..10.0,
            seed in any::<u64>(),
        ) {
            let data: Vec<f32> = (0..h * w * c)
                .map(|i| ((seed.wrapping_mul(i as u64 + 1) % 10007) as f32) * 0.37 - 100.0)
                .collect();
            let g = RasterGrid::new(h, w, c, gsd, data).unwrap();
            match decode(&encode_raster(&g).unwrap()).unwrap() {
                Hmap::Raster(back) => prop_assert_eq!(back, g),
                _ => prop_assert!(false),
            }
        }
    }
}
