//! Versioned checkpoint format: magic + JSON header + raw little-endian
//! parameter payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};

use super::{ModelConfig, ParamEntry, Transformer, Vocab};

const MAGIC: &[u8; 4] = b"LCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub val_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    precision: Precision,
    model: ModelConfig,
    charset: String,
    step: usize,
    val_loss: f64,
    params: Vec<ParamHeader>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &Transformer<T>,
    vocab: &Vocab,
    meta: &CheckpointMeta,
) -> Result<()> {
    let header = Header {
        version: VERSION,
        precision: T::PRECISION,
        model: model.config().clone(),
        charset: vocab.charset(),
        step: meta.step,
        val_loss: meta.val_loss,
        params: model
            .params()
            .iter()
            .map(|p| ParamHeader {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    let mut payload = Vec::new();
    for p in model.params() {
        for &v in p.data.iter() {
            v.write_le(&mut payload);
        }
    }
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<Header> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    r.read_exact(&mut word)?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    Ok(serde_json::from_slice(&header_bytes)?)
}

/// Reads only the precision tag, so callers can dispatch to the right
/// element type before loading.
pub fn peek_precision(path: &Path) -> Result<Precision> {
    let mut r = BufReader::new(File::open(path)?);
    Ok(read_header(&mut r)?.precision)
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Transformer<T>, Vocab, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    if header.precision != T::PRECISION {
        return Err(Error::Checkpoint(format!(
            "precision mismatch: file is {}, requested {}",
            header.precision.tag(),
            T::PRECISION.tag()
        )));
    }
    let vocab = Vocab::from_charset(&header.charset)?;
    if vocab.size() != header.model.vocab_size {
        return Err(Error::Checkpoint(format!(
            "charset size {} does not match vocab_size {}",
            vocab.size(),
            header.model.vocab_size
        )));
    }

    let mut params = Vec::with_capacity(header.params.len());
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut off = 0;
    for ph in &header.params {
        let numel: usize = ph.shape.iter().product();
        let end = off + numel * T::BYTES;
        if end > buf.len() {
            return Err(Error::Checkpoint("truncated payload".into()));
        }
        let data: Vec<T> = buf[off..end]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        off = end;
        params.push(ParamEntry {
            name: ph.name.clone(),
            shape: ph.shape.clone(),
            data: Arc::new(data),
        });
    }
    if off != buf.len() {
        return Err(Error::Checkpoint("trailing bytes in payload".into()));
    }
    let model = Transformer::from_parts(header.model, params)?;
    Ok((
        model,
        vocab,
        CheckpointMeta {
            step: header.step,
            val_loss: header.val_loss,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let vocab = Vocab::ascii();
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            ff_mult: 2,
            max_seq_len: 10,
            vocab_size: vocab.size(),
            dropout_rate: 0.0,
            seed: 5,
        };
        let model = Transformer::<f32>::new(cfg.clone()).unwrap();
        let meta = CheckpointMeta {
            step: 7,
            val_loss: 1.25,
        };
        save(&path, &model, &vocab, &meta).unwrap();

        assert_eq!(peek_precision(&path).unwrap(), Precision::Single);
        let (loaded, loaded_vocab, loaded_meta) = load::<f32>(&path).unwrap();
        assert_eq!(loaded.config(), &cfg);
        assert_eq!(loaded_vocab, vocab);
        assert_eq!(loaded_meta.step, 7);
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.data.as_ref(), b.data.as_ref());
        }

        // wrong precision is rejected
        assert!(matches!(
            load::<f64>(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
