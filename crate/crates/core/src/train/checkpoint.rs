//! Single-file model checkpoint: an 8-byte magic, a length-prefixed UTF-8
//! JSON manifest (dims, the full vocabulary plus its hash, tensor directory),
//! then every tensor's data as raw little-endian f64 in manifest order.
//! Writing the same parameters twice produces byte-identical files. The
//! embedded vocabulary makes a checkpoint self-contained: decoding and
//! pretraining need no separate vocabulary file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::vocab::Vocabulary;

const CKPT_MAGIC: &[u8; 8] = b"NARWCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the f64 payload.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    vocab: Vec<String>,
    /// Hash of `vocab`; redundancy that catches a tampered token list.
    vocab_sha256: String,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(params: &ModelParams, vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    params.visit(&mut |name, tensor| {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset: payload.len() as u64,
            len: tensor.numel() as u64,
        });
        payload.extend_from_slice(tensor.data());
    });
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: params.config.clone(),
        vocab: (0..vocab.size()).map(|i| vocab.token(crate::vocab::TokenId(i)).to_string()).collect(),
        vocab_sha256: vocab.sha256_hex(),
        tensors: entries,
    };
    let header = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CKPT_MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for &x in &payload {
        out.write_all(&x.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Loads parameters plus the vocabulary they were saved against.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Vocabulary)> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("checkpoint magic mismatch".into()));
    }
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8).map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    let header_len = u64::from_le_bytes(len8) as usize;
    if header_len > 64 << 20 {
        return Err(Error::Format(format!("implausible manifest size {header_len}")));
    }
    let mut header = vec![0u8; header_len];
    f.read_exact(&mut header).map_err(|e| Error::Format(format!("truncated manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_slice(&header)
        .map_err(|e| Error::Format(format!("manifest parse: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format_version {}",
            manifest.format_version
        )));
    }
    manifest.config.validate()?;
    let vocab = Vocabulary::from_tokens(manifest.vocab.clone())?;
    if vocab.sha256_hex() != manifest.vocab_sha256 {
        return Err(Error::Format("embedded vocabulary disagrees with its stored hash".into()));
    }
    if vocab.size() != manifest.config.vocab_size {
        return Err(Error::Format(format!(
            "embedded vocabulary has {} tokens but the model was built for {}",
            vocab.size(),
            manifest.config.vocab_size
        )));
    }

    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(Error::Format("payload is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();

    // Instantiate at the manifest's dimensions, then overwrite every tensor.
    let mut params = init_params(&manifest.config, 0)?;
    let mut remaining: std::collections::BTreeMap<&str, &TensorEntry> =
        manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut failure: Option<Error> = None;
    params.visit_mut(&mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = remaining.remove(name) else {
            failure = Some(Error::Format(format!("checkpoint lacks tensor \"{name}\"")));
            return;
        };
        if entry.shape != tensor.shape() {
            failure = Some(Error::Format(format!(
                "tensor \"{name}\" has shape {:?}, model expects {:?}",
                entry.shape,
                tensor.shape()
            )));
            return;
        }
        let start = entry.offset as usize;
        let end = start.saturating_add(entry.len as usize);
        if entry.len as usize != tensor.numel() || end > values.len() {
            failure = Some(Error::Format(format!(
                "tensor \"{name}\" length {} disagrees with its {}-element shape",
                entry.len,
                tensor.numel()
            )));
            return;
        }
        tensor.data_mut().copy_from_slice(&values[start..end]);
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(name) = remaining.keys().next() {
        return Err(Error::Format(format!("checkpoint names unknown tensor \"{name}\"")));
    }
    Ok((params, vocab))
}

/// Loads and refuses a checkpoint trained against a different vocabulary.
pub fn load_checkpoint_for_vocab(path: &Path, vocab: &Vocabulary) -> Result<ModelParams> {
    let (params, embedded) = load_checkpoint(path)?;
    if embedded.sha256_hex() != vocab.sha256_hex() {
        return Err(Error::Format(format!(
            "checkpoint was trained against vocabulary {}, caller has {}",
            embedded.sha256_hex(),
            vocab.sha256_hex()
        )));
    }
    Ok(params)
}
