//! On-disk corpus layout.
//!
//! A split named `dev` is two files in the dataset directory:
//!   - `dev.txt` — one transcript per line, space-separated token strings;
//!   - `dev.feat` — binary features: an 8-byte magic, u64 utterance count,
//!     u32 feature dim, a table of u64 absolute record offsets, then per
//!     utterance a u32 frame count followed by `frames x dim` little-endian
//!     f64 values. Record i belongs to transcript line i.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::{TokenId, Vocabulary};

const FEAT_MAGIC: &[u8; 8] = b"NARWFEAT";

/// One utterance: frame features and the reference transcript.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub features: Tensor,
    pub transcript: Vec<String>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    /// Transcript as vocabulary ids, unknown strings collapsing to unk.
    pub fn target_ids(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        self.transcript.iter().map(|t| vocab.id_or_unk(t)).collect()
    }
}

fn transcript_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.txt"))
}

fn features_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.feat"))
}

pub fn write_split(dir: &Path, split: &str, utterances: &[Utterance]) -> Result<()> {
    let mut txt = BufWriter::new(File::create(transcript_path(dir, split))?);
    for u in utterances {
        writeln!(txt, "{}", u.transcript.join(" "))?;
    }
    txt.flush()?;

    let dim = utterances.first().map_or(0, |u| u.features.cols());
    for (i, u) in utterances.iter().enumerate() {
        if u.features.cols() != dim {
            return Err(Error::Argument(format!(
                "utterance {i} has feature dim {}, split uses {dim}",
                u.features.cols()
            )));
        }
    }
    let mut out = BufWriter::new(File::create(features_path(dir, split))?);
    out.write_all(FEAT_MAGIC)?;
    out.write_all(&(utterances.len() as u64).to_le_bytes())?;
    out.write_all(&(dim as u32).to_le_bytes())?;
    // Offset table, then records.
    let table_start = FEAT_MAGIC.len() as u64 + 8 + 4;
    let mut offset = table_start + 8 * utterances.len() as u64;
    for u in utterances {
        out.write_all(&offset.to_le_bytes())?;
        offset += 4 + 8 * (u.frames() * dim) as u64;
    }
    for u in utterances {
        out.write_all(&(u.frames() as u32).to_le_bytes())?;
        for &x in u.features.data() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated feature file: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated feature file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_split(dir: &Path, split: &str) -> Result<Vec<Utterance>> {
    let txt = std::fs::read_to_string(transcript_path(dir, split))?;
    let transcripts: Vec<Vec<String>> = txt
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect();

    let mut f = BufReader::new(File::open(features_path(dir, split))?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
    if &magic != FEAT_MAGIC {
        return Err(Error::Format("feature file magic mismatch".into()));
    }
    let count = read_u64(&mut f)? as usize;
    if count != transcripts.len() {
        return Err(Error::Format(format!(
            "feature file holds {count} records but transcript has {} lines",
            transcripts.len()
        )));
    }
    let dim = read_u32(&mut f)? as usize;
    let mut offsets = Vec::with_capacity(count);
    for _ in 0..count {
        offsets.push(read_u64(&mut f)?);
    }

    let mut utterances = Vec::with_capacity(count);
    for (i, transcript) in transcripts.into_iter().enumerate() {
        f.seek(SeekFrom::Start(offsets[i]))?;
        let frames = read_u32(&mut f)? as usize;
        let mut data = vec![0f64; frames * dim];
        let mut buf = [0u8; 8];
        for x in data.iter_mut() {
            f.read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("record {i} shorter than its frame count")))?;
            *x = f64::from_le_bytes(buf);
        }
        let features = Tensor::matrix(frames, dim, data)?;
        utterances.push(Utterance { features, transcript });
    }
    Ok(utterances)
}

/// Writes `<split>.ref`-style transcript lines for scoring (one utterance per
/// line, space-separated tokens).
pub fn write_transcripts(path: &Path, lines: &[Vec<String>]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for l in lines {
        writeln!(out, "{}", l.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads transcript lines written by [`write_transcripts`].
pub fn read_transcripts(path: &Path) -> Result<Vec<Vec<String>>> {
    let txt = std::fs::read_to_string(path)?;
    Ok(txt.lines().map(|l| l.split_whitespace().map(str::to_string).collect()).collect())
}
