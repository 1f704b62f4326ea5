//! Binary mask files.
//!
//! Layout, little-endian:
//!
//! | offset | field            | type        |
//! |--------|------------------|-------------|
//! | 0      | magic `DYNM`     | 4 bytes     |
//! | 4      | version          | u16         |
//! | 6      | order n          | u8          |
//! | 7      | vocab size       | u32         |
//! | 11     | entry count      | u64         |
//! | 19     | smoothing floor  | f64         |
//! | 27     | default value    | f64         |
//! | 35     | records          | n × u32 ids, f64 ratio |
//! | end-4  | CRC32 of all preceding bytes | u32 |

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::mask::CooccurrenceMask;
use super::{Gram, MaskError, MAX_ORDER};

pub const MAGIC: &[u8; 4] = b"DYNM";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 35;
const FOOTER_LEN: usize = 4;

/// Exact file size for a mask of `order` with `entries` records.
pub fn encoded_len(order: usize, entries: usize) -> usize {
    HEADER_LEN + entries * (4 * order + 8) + FOOTER_LEN
}

impl CooccurrenceMask {
    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.sorted_entries();
        let mut buf = Vec::with_capacity(encoded_len(self.order, entries.len()));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(self.order as u8);
        buf.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        buf.extend_from_slice(&self.smoothing_floor.to_le_bytes());
        buf.extend_from_slice(&self.default_value.to_le_bytes());
        for (g, r) in entries {
            for &id in g.ids() {
                buf.extend_from_slice(&id.to_le_bytes());
            }
            buf.extend_from_slice(&r.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MaskError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(MaskError::BadMagic { offset: 0 });
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(MaskError::UnsupportedVersion { version, offset: 4 });
        }
        let order_off = r.pos;
        let order = r.take(1)?[0] as usize;
        if !(2..=MAX_ORDER).contains(&order) {
            return Err(MaskError::InvalidField {
                field: "order",
                offset: order_off,
            });
        }
        let vocab_off = r.pos;
        let vocab_size = u32::from_le_bytes(r.array()?) as usize;
        if vocab_size < 2 {
            return Err(MaskError::InvalidField {
                field: "vocab size",
                offset: vocab_off,
            });
        }
        let count_off = r.pos;
        let count = u64::from_le_bytes(r.array()?);
        let floor_off = r.pos;
        let smoothing_floor = f64::from_le_bytes(r.array()?);
        if !(smoothing_floor.is_finite() && smoothing_floor >= 0.0) {
            return Err(MaskError::InvalidField {
                field: "smoothing floor",
                offset: floor_off,
            });
        }
        let default_off = r.pos;
        let default_value = f64::from_le_bytes(r.array()?);
        if !(default_value.is_finite() && default_value > 0.0) {
            return Err(MaskError::InvalidField {
                field: "default value",
                offset: default_off,
            });
        }

        let record = 4 * order + 8;
        let expected = (count as usize)
            .checked_mul(record)
            .and_then(|b| b.checked_add(HEADER_LEN + FOOTER_LEN));
        match expected {
            Some(total) if total <= bytes.len() => {}
            _ => {
                return Err(MaskError::Truncated {
                    offset: HEADER_LEN,
                    needed: (count as usize).saturating_mul(record).saturating_add(FOOTER_LEN),
                    len: bytes.len(),
                })
            }
        }
        if let Some(total) = expected {
            if total != bytes.len() {
                return Err(MaskError::InvalidField {
                    field: "entry count",
                    offset: count_off,
                });
            }
        }

        let mut ratios = HashMap::with_capacity(count as usize);
        let mut ids = [0u32; MAX_ORDER];
        for _ in 0..count {
            let rec_off = r.pos;
            for slot in ids.iter_mut().take(order) {
                *slot = u32::from_le_bytes(r.array()?);
                if *slot as usize >= vocab_size {
                    return Err(MaskError::InvalidField {
                        field: "token id",
                        offset: rec_off,
                    });
                }
            }
            let ratio_off = r.pos;
            let ratio = f64::from_le_bytes(r.array()?);
            if !(ratio.is_finite() && ratio > 0.0) {
                return Err(MaskError::InvalidField {
                    field: "ratio",
                    offset: ratio_off,
                });
            }
            if ratios.insert(Gram::new(&ids[..order]), ratio).is_some() {
                return Err(MaskError::InvalidField {
                    field: "duplicate record",
                    offset: rec_off,
                });
            }
        }
        let crc_off = r.pos;
        let stored = u32::from_le_bytes(r.array()?);
        let computed = crc32fast::hash(&bytes[..crc_off]);
        if stored != computed {
            return Err(MaskError::Checksum {
                offset: crc_off,
                stored,
                computed,
            });
        }

        Ok(CooccurrenceMask {
            order,
            vocab_size,
            smoothing_floor,
            default_value,
            ratios,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MaskError> {
        let path = path.as_ref();
        let wrap = |cause| MaskError::File {
            path: path.display().to_string(),
            cause,
        };
        let mut f = fs::File::create(path).map_err(wrap)?;
        f.write_all(&self.to_bytes()).map_err(wrap)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MaskError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|cause| MaskError::File {
            path: path.display().to_string(),
            cause,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MaskError> {
        if self.pos + n > self.bytes.len() {
            return Err(MaskError::Truncated {
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], MaskError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }
}
