//! PNLM checkpoint container.
//!
//! ```text
//! "PNLM"                      4 bytes
//! version                     u32 = 1
//! config                      u32 length + UTF-8 TOML of the ModelConfig
//! config hash                 u32 length + hex SHA-256 of that TOML
//! param count                 u32
//! per param, in declaration order:
//!   name                      u32 length + UTF-8
//!   rows, cols                u32, u32
//!   trainable                 u8
//!   values                    rows * cols f64
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use crate::codec::{put_f64, put_string, put_u32, Reader};
use crate::config::{config_hash, ModelConfig};
use crate::error::{Error, FormatError, Result};
use crate::model::PneumoModel;
use crate::numeric::Matrix;

const MAGIC: &[u8; 4] = b"PNLM";
const VERSION: u32 = 1;

pub fn encode_checkpoint(model: &PneumoModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let config = toml::to_string(&model.config).expect("config serializes");
    put_string(&mut out, &config);
    put_string(&mut out, &config_hash(&model.config));
    put_u32(&mut out, model.store.len() as u32);
    for (_, name, p) in model.store.iter() {
        put_string(&mut out, name);
        put_u32(&mut out, p.value.rows() as u32);
        put_u32(&mut out, p.value.cols() as u32);
        out.push(p.trainable as u8);
        for &v in p.value.as_slice() {
            put_f64(&mut out, v);
        }
    }
    out
}

/// Rebuilds a model from checkpoint bytes. When `expected` is given, the
/// stored config must hash identically.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<PneumoModel> {
    let mut r = Reader::new(bytes);
    if r.bytes(4, "magic")? != MAGIC {
        return Err(FormatError::BadMagic { expected: "PNLM" }.into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::Version {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let text = r.string("config")?;
    let stored_hash = r.string("config hash")?;
    let config: ModelConfig =
        toml::from_str(&text).map_err(|e| FormatError::Corrupt(format!("config block: {e}")))?;
    let actual = config_hash(&config);
    if actual != stored_hash {
        return Err(FormatError::ConfigHash {
            found: stored_hash,
            expected: actual,
        }
        .into());
    }
    if let Some(exp) = expected {
        let want = config_hash(exp);
        if want != stored_hash {
            return Err(FormatError::ConfigHash {
                found: stored_hash,
                expected: want,
            }
            .into());
        }
    }

    let mut model = PneumoModel::new(&config)?;
    let count = r.u32("param count")? as usize;
    if count != model.store.len() {
        return Err(FormatError::Corrupt(format!(
            "checkpoint has {count} params, config builds {}",
            model.store.len()
        ))
        .into());
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = r.string("param name")?;
        let rows = r.u32("param rows")? as usize;
        let cols = r.u32("param cols")? as usize;
        let trainable = r.u8("param flag")? != 0;
        let p = model.store.get(id);
        if name != model.store.name(id) || (rows, cols) != p.value.shape() || trainable != p.trainable {
            return Err(FormatError::Corrupt(format!(
                "param {name} ({rows}x{cols}) does not match {} {:?}",
                model.store.name(id),
                p.value.shape()
            ))
            .into());
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f64("param values")?);
        }
        model.store.set_value(id, Matrix::from_vec(rows, cols, data)?)?;
    }
    if !r.is_at_end() {
        return Err(FormatError::Corrupt("trailing bytes after params".into()).into());
    }
    Ok(model)
}

pub fn save_checkpoint(model: &PneumoModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<PneumoModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}
