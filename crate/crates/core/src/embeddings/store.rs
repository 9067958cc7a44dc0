//! Embedding store: a little-endian binary body plus a UTF-8 word index.
//!
//! Body layout: magic `EMB1`, `u32` count, `u32` dim, then `count * dim`
//! `f32` values. The sidecar index holds one `ordinal<TAB>word` line per
//! record.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::Embedding;
use crate::error::{Error, Result};
use crate::io::{read_f32, read_u32, Reader};

const MAGIC: &[u8; 4] = b"EMB1";

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub word: String,
    pub embedding: Embedding,
}

pub fn write_embedding_store(body: &Path, index: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.embedding.dim());
    if records.iter().any(|r| r.embedding.dim() != dim) {
        return Err(Error::Shape(
            "embedding store records differ in dimension".into(),
        ));
    }
    let mut buf = Vec::with_capacity(12 + records.len() * dim * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in records {
        for &v in r.embedding.as_slice() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(body, buf)?;

    let mut idx = String::new();
    for (i, r) in records.iter().enumerate() {
        if r.word.contains(['\t', '\n']) {
            return Err(Error::Format(format!(
                "word {:?} cannot be indexed",
                r.word
            )));
        }
        let _ = writeln!(idx, "{i}\t{}", r.word);
    }
    fs::write(index, idx)?;
    Ok(())
}

pub fn read_embedding_store(body: &Path, index: &Path) -> Result<Vec<EmbeddingRecord>> {
    let bytes = fs::read(body)?;
    let mut rd = Reader::new(&bytes);
    if rd.take(4)? != MAGIC {
        return Err(Error::Format("embedding store: bad magic".into()));
    }
    let count = read_u32(&mut rd)? as usize;
    let dim = read_u32(&mut rd)? as usize;
    let mut vectors = Vec::with_capacity(count);
    for _ in 0..count {
        let v = (0..dim)
            .map(|_| read_f32(&mut rd).map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        vectors.push(Embedding::new(v)?);
    }
    rd.finish()?;

    let text = fs::read_to_string(index)?;
    let mut words = vec![None; count];
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (ord, word) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("embedding index: bad line {line:?}")))?;
        let ord: usize = ord
            .parse()
            .map_err(|_| Error::Format(format!("embedding index: bad ordinal {ord:?}")))?;
        let slot = words
            .get_mut(ord)
            .ok_or_else(|| Error::Format(format!("embedding index: ordinal {ord} out of range")))?;
        *slot = Some(word.to_string());
    }
    vectors
        .into_iter()
        .zip(words)
        .enumerate()
        .map(|(i, (embedding, word))| {
            let word =
                word.ok_or_else(|| Error::Format(format!("embedding index: ordinal {i} missing")))?;
            Ok(EmbeddingRecord { word, embedding })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let body = dir.path().join("t.emb");
        let idx = dir.path().join("t.idx");
        let recs = vec![
            EmbeddingRecord {
                word: "boat".into(),
                embedding: Embedding::new(vec![0.5, -0.25, 1.0]).unwrap(),
            },
            EmbeddingRecord {
                word: "sea vessel".into(),
                embedding: Embedding::new(vec![0.1, 0.2, 0.3]).unwrap(),
            },
        ];
        write_embedding_store(&body, &idx, &recs).unwrap();
        let bytes = std::fs::read(&body).unwrap();
        assert_eq!(&bytes[..4], b"EMB1");
        assert_eq!(bytes.len(), 12 + 2 * 3 * 4);
        let back = read_embedding_store(&body, &idx).unwrap();
        assert_eq!(back[0], recs[0]);
        assert_eq!(back[1].word, "sea vessel");
        for (a, b) in back[1]
            .embedding
            .as_slice()
            .iter()
            .zip(recs[1].embedding.as_slice())
        {
            assert_eq!(*a, f64::from(*b as f32));
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let body = dir.path().join("t.emb");
        let idx = dir.path().join("t.idx");
        std::fs::write(&idx, "").unwrap();
        std::fs::write(&body, b"EMB2\0\0\0\0\0\0\0\0").unwrap();
        assert!(read_embedding_store(&body, &idx).is_err());
        std::fs::write(&body, b"EMB1\x01\0\0\0\x02\0\0\0\0\0").unwrap();
        assert!(read_embedding_store(&body, &idx).is_err());
    }
}
