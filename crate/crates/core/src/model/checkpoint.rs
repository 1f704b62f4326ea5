//! Versioned binary checkpoints.
//!
//! Layout, little-endian: magic `MHLM`, `u16` version, `u32` length and the
//! `key=value` configuration text, a vocabulary block (`u8` present flag,
//! then `u8` mode, `u32` count and the `u32` symbols), `u32` tensor count,
//! then per tensor `u16` name length, name, `u8` rank, `u32` dims and `f32`
//! values. A CRC32 of everything before it closes the file.

use std::collections::HashMap;
use std::path::Path;

use super::{ModelConfig, MultiHeadModel, Params};
use crate::lm::ModelError;
use crate::vocab::{TokenMode, Vocab};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MHLM";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: MultiHeadModel,
    pub vocab: Option<Vocab>,
}

fn config_text(c: &ModelConfig) -> String {
    format!(
        "vocab_size={}\nd_model={}\nstem_layers={}\nn_heads={}\ncontext_len={}\nattn_heads={}\n",
        c.vocab_size, c.d_model, c.stem_layers, c.n_heads, c.context_len, c.attn_heads
    )
}

pub fn checkpoint_bytes(model: &MultiHeadModel, vocab: Option<&Vocab>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = config_text(model.config());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    match vocab {
        None => out.push(0),
        Some(v) => {
            out.push(1);
            out.push(match v.mode() {
                TokenMode::Byte => 0,
                TokenMode::Char => 1,
            });
            out.extend_from_slice(&(v.size() as u32).to_le_bytes());
            for &s in v.symbols() {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
    }
    let tensors = model.params().collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> ModelError {
        ModelError::Checkpoint {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated, need {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn text(&mut self, n: usize) -> Result<&'a str, ModelError> {
        let at = self.pos;
        std::str::from_utf8(self.take(n)?).map_err(|_| ModelError::Checkpoint {
            offset: at,
            reason: "invalid utf-8".into(),
        })
    }
}

fn parse_config(text: &str, offset: usize) -> Result<ModelConfig, ModelError> {
    let bad = |reason: String| ModelError::Checkpoint { offset, reason };
    let mut map = HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad config line {line:?}")))?;
        let v: usize = v.trim().parse().map_err(|_| bad(format!("bad value for {k}")))?;
        map.insert(k.trim().to_string(), v);
    }
    let get = |k: &str| map.get(k).copied().ok_or_else(|| bad(format!("missing config key {k}")));
    Ok(ModelConfig {
        vocab_size: get("vocab_size")?,
        d_model: get("d_model")?,
        stem_layers: get("stem_layers")?,
        n_heads: get("n_heads")?,
        context_len: get("context_len")?,
        attn_heads: get("attn_heads")?,
    })
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<Checkpoint, ModelError> {
    if buf.len() < 4 + 2 + 4 {
        return Err(ModelError::Checkpoint {
            offset: buf.len(),
            reason: "truncated header".into(),
        });
    }
    let body_len = buf.len() - 4;
    let mut r = Reader {
        buf: &buf[..body_len],
        pos: 0,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let stored = u32::from_le_bytes(buf[body_len..].try_into().expect("4 bytes"));
    if crc32fast::hash(&buf[..body_len]) != stored {
        return Err(ModelError::Checkpoint {
            offset: body_len,
            reason: "checksum mismatch".into(),
        });
    }
    let n = r.u32()? as usize;
    let at = r.pos;
    let config = parse_config(r.text(n)?, at)?;
    config.validate()?;

    let vocab = match r.u8()? {
        0 => None,
        1 => {
            let at = r.pos;
            let mode = match r.u8()? {
                0 => TokenMode::Byte,
                1 => TokenMode::Char,
                m => return Err(r.err(format!("unknown vocabulary mode {m}"))),
            };
            let count = r.u32()? as usize;
            let symbols = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let v = Vocab::from_symbols(mode, symbols).map_err(|e| ModelError::Checkpoint {
                offset: at,
                reason: e.to_string(),
            })?;
            if v.size() != config.vocab_size {
                return Err(ModelError::Checkpoint {
                    offset: at,
                    reason: format!("vocabulary has {} symbols, model expects {}", v.size(), config.vocab_size),
                });
            }
            Some(v)
        }
        f => return Err(r.err(format!("bad vocabulary flag {f}"))),
    };

    let mut model = MultiHeadModel::new(config.clone(), 0)?;
    let count = r.u32()? as usize;
    let mut loaded: HashMap<String, Vec<f64>> = HashMap::new();
    let mut shapes: HashMap<String, Vec<usize>> = HashMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = r.text(len)?.to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let size: usize = shape.iter().product();
        let raw = r.take(size * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        shapes.insert(name.clone(), shape);
        loaded.insert(name, data);
    }
    if r.pos != body_len {
        return Err(r.err("trailing bytes"));
    }
    let params: &mut Params = model.params_mut();
    for slot in params.collect_mut() {
        let data = loaded.remove(&slot.name).ok_or_else(|| ModelError::Checkpoint {
            offset: body_len,
            reason: format!("missing tensor {}", slot.name),
        })?;
        if shapes[&slot.name] != slot.shape {
            return Err(ModelError::Checkpoint {
                offset: body_len,
                reason: format!("tensor {} has shape {:?}, expected {:?}", slot.name, shapes[&slot.name], slot.shape),
            });
        }
        slot.data.copy_from_slice(&data);
    }
    if let Some(name) = loaded.keys().next() {
        return Err(ModelError::Checkpoint {
            offset: body_len,
            reason: format!("unexpected tensor {name}"),
        });
    }
    Ok(Checkpoint { model, vocab })
}

pub fn save_checkpoint(path: &Path, model: &MultiHeadModel, vocab: Option<&Vocab>) -> Result<(), ModelError> {
    std::fs::write(path, checkpoint_bytes(model, vocab)).map_err(|cause| ModelError::File {
        path: path.display().to_string(),
        cause,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let buf = std::fs::read(path).map_err(|cause| ModelError::File {
        path: path.display().to_string(),
        cause,
    })?;
    checkpoint_from_bytes(&buf)
}
