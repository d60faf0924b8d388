//! Little-endian corpus archive.
//!
//! ```text
//! header : "SSPK" | version u32 | F u32 | P u32 | record count u64
//! record : id_len u32 | id bytes | label flag u8 | [label u32]
//!          | T u32 | clean f32[T·F] | augmented f32[T·F] | phones u16[T]
//! ```

use std::fs;
use std::path::Path;

use super::{Corpus, CorpusError, Utterance};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"SSPK";
pub const ARCHIVE_VERSION: u32 = 1;

pub fn encode_archive(corpus: &Corpus) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + corpus.total_frames() * (corpus.feat_dim() * 8 + 2));
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(corpus.feat_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(corpus.phone_count() as u32).to_le_bytes());
    out.extend_from_slice(&(corpus.len() as u64).to_le_bytes());
    for u in corpus.utterances() {
        out.extend_from_slice(&(u.id().len() as u32).to_le_bytes());
        out.extend_from_slice(u.id().as_bytes());
        match u.speaker() {
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.to_le_bytes());
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(u.frames() as u32).to_le_bytes());
        for v in u.clean().iter().chain(u.augmented()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in u.phones() {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    out
}

pub fn write_archive(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    fs::write(path, encode_archive(corpus))?;
    Ok(())
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    decode_archive(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    record: Option<usize>,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> CorpusError {
        CorpusError::Archive { offset: self.pos, record: self.record, detail: detail.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CorpusError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!(
                "truncated while reading {what}: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8, CorpusError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, CorpusError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CorpusError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, CorpusError> {
        let len = n.checked_mul(4).ok_or_else(|| self.err(format!("{what} length overflows")))?;
        let raw = self.take(len, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn u16s(&mut self, n: usize, what: &str) -> Result<Vec<u16>, CorpusError> {
        let len = n.checked_mul(2).ok_or_else(|| self.err(format!("{what} length overflows")))?;
        let raw = self.take(len, what)?;
        Ok(raw.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_archive(bytes: &[u8]) -> Result<Corpus, CorpusError> {
    let mut r = Reader { bytes, pos: 0, record: None };
    let magic = r.take(4, "magic")?;
    if magic != ARCHIVE_MAGIC {
        r.pos = 0;
        return Err(r.err(format!("bad magic {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != ARCHIVE_VERSION {
        r.pos -= 4;
        return Err(r.err(format!("unsupported version {version}")));
    }
    let feat_dim = r.u32("feature dimension")? as usize;
    let phone_count = r.u32("phone count")? as usize;
    let count = r.u64("record count")? as usize;
    let mut utterances = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        r.record = Some(i);
        let start = r.pos;
        let id_len = r.u32("id length")? as usize;
        let id = std::str::from_utf8(r.take(id_len, "id")?)
            .map_err(|_| r.err("id is not UTF-8"))?
            .to_owned();
        let speaker = match r.u8("label flag")? {
            0 => None,
            1 => Some(r.u32("label")?),
            other => return Err(r.err(format!("invalid label flag {other}"))),
        };
        let t = r.u32("frame count")? as usize;
        let clean = r.f32s(t * feat_dim, "clean frames")?;
        let aug = r.f32s(t * feat_dim, "augmented frames")?;
        let phones = r.u16s(t, "phone labels")?;
        let u = Utterance::new(id, speaker, feat_dim, clean, aug, phones).map_err(|e| CorpusError::Archive {
            offset: start,
            record: Some(i),
            detail: e.to_string(),
        })?;
        utterances.push(u);
    }
    r.record = None;
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Corpus::new(feat_dim, phone_count, utterances)
}
