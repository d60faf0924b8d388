//! Text tables for embeddings, trials and scores; binary backend parameters.
//!
//! ```text
//! embeddings : id v1 … vD
//! trials     : enrol_id test_id [target|nontarget|unknown]
//! scores     : enrol_id test_id score
//! backend    : "SSBK" | version u32 | in u32 | out u32 | mean f64[in]
//!              | projection f64[out·in] | eigenvalues f64[out]
//!              | plda mean f64[out] | between f64[out²] | within f64[out²]
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{Backend, BackendError, Lda, Plda};

pub const BACKEND_MAGIC: &[u8; 4] = b"SSBK";
pub const BACKEND_VERSION: u32 = 1;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> BackendError + '_ {
    move |source| BackendError::Io { path: path.display().to_string(), source }
}

fn parse_err(path: &Path, line: usize, detail: impl Into<String>) -> BackendError {
    BackendError::Parse { path: path.display().to_string(), line, detail: detail.into() }
}

/// Utterance embeddings in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    pub rows: Vec<(String, Vec<f32>)>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> Option<usize> {
        self.rows.first().map(|r| r.1.len())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.rows.iter().find(|r| r.0 == id).map(|r| r.1.as_slice())
    }

    pub fn index(&self) -> std::collections::HashMap<&str, usize> {
        self.rows.iter().enumerate().map(|(i, r)| (r.0.as_str(), i)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, v) in &self.rows {
            out.push_str(id);
            for x in v {
                write!(out, " {x}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

pub fn write_embeddings(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<(), BackendError> {
    let path = path.as_ref();
    fs::write(path, table.to_text()).map_err(io(path))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable, BackendError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io(path))?;
    let mut table = EmbeddingTable::default();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        let Some(id) = it.next() else { continue };
        let v = it
            .map(|t| t.parse::<f32>().map_err(|_| parse_err(path, i + 1, format!("bad value {t:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if v.is_empty() {
            return Err(parse_err(path, i + 1, "embedding has no values"));
        }
        if let Some(d) = table.dim() {
            if v.len() != d {
                return Err(parse_err(path, i + 1, format!("{} values, expected {d}", v.len())));
            }
        }
        if !seen.insert(id.to_owned()) {
            return Err(parse_err(path, i + 1, format!("duplicate id {id}")));
        }
        table.rows.push((id.to_owned(), v));
    }
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrialKey {
    Target,
    Nontarget,
    Unknown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub enrol: String,
    pub test: String,
    pub key: TrialKey,
    /// 1-based line in the source file.
    pub line: usize,
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>, BackendError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io(path))?;
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let key = match fields.as_slice() {
            [] => continue,
            [_, _] => TrialKey::Unknown,
            [_, _, "target"] => TrialKey::Target,
            [_, _, "nontarget"] => TrialKey::Nontarget,
            [_, _, "unknown"] => TrialKey::Unknown,
            [_, _, k] => return Err(parse_err(path, i + 1, format!("unknown trial key {k:?}"))),
            _ => return Err(parse_err(path, i + 1, "expected: enrol_id test_id [target|nontarget]")),
        };
        trials.push(Trial { enrol: fields[0].to_owned(), test: fields[1].to_owned(), key, line: i + 1 });
    }
    Ok(trials)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTrial {
    pub enrol: String,
    pub test: String,
    pub score: f64,
}

pub fn write_scores(scores: &[ScoredTrial], path: impl AsRef<Path>) -> Result<(), BackendError> {
    let path = path.as_ref();
    let mut out = String::new();
    for s in scores {
        writeln!(out, "{} {} {}", s.enrol, s.test, s.score).unwrap();
    }
    fs::write(path, out).map_err(io(path))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoredTrial>, BackendError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io(path))?;
    let mut scores = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => continue,
            [e, t, s] => {
                let score = s.parse::<f64>().map_err(|_| parse_err(path, i + 1, format!("bad score {s:?}")))?;
                scores.push(ScoredTrial { enrol: (*e).to_owned(), test: (*t).to_owned(), score });
            }
            _ => return Err(parse_err(path, i + 1, "expected: enrol_id test_id score")),
        }
    }
    Ok(scores)
}

fn put_f64s(out: &mut Vec<u8>, v: impl IntoIterator<Item = f64>) {
    v.into_iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
}

pub fn encode_backend(b: &Backend) -> Vec<u8> {
    let (din, dout) = (b.lda.in_dim(), b.lda.out_dim());
    let mut out = Vec::new();
    out.extend_from_slice(BACKEND_MAGIC);
    out.extend_from_slice(&BACKEND_VERSION.to_le_bytes());
    out.extend_from_slice(&(din as u32).to_le_bytes());
    out.extend_from_slice(&(dout as u32).to_le_bytes());
    put_f64s(&mut out, b.mean.iter().copied());
    put_f64s(&mut out, b.lda.projection.transpose().iter().copied());
    put_f64s(&mut out, b.lda.eigenvalues.iter().copied());
    put_f64s(&mut out, b.plda.mean.iter().copied());
    put_f64s(&mut out, b.plda.between.iter().copied());
    put_f64s(&mut out, b.plda.within.iter().copied());
    out
}

pub fn decode_backend(bytes: &[u8]) -> Result<Backend, BackendError> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], BackendError> {
        if bytes.len() - pos < n {
            return Err(BackendError::Format { offset: pos, detail: "truncated".into() });
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if take(4)? != BACKEND_MAGIC {
        return Err(BackendError::Format { offset: 0, detail: "bad magic".into() });
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != BACKEND_VERSION {
        return Err(BackendError::Format { offset: 4, detail: format!("unsupported version {version}") });
    }
    let din = u32_at(take(4)?) as usize;
    let dout = u32_at(take(4)?) as usize;
    if din == 0 || dout == 0 || dout > din || din > 1 << 16 {
        return Err(BackendError::Format { offset: 8, detail: format!("implausible dimensions {din}→{dout}") });
    }
    let mut f64s = |n: usize| -> Result<Vec<f64>, BackendError> {
        Ok(take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let mean = DVector::from_vec(f64s(din)?);
    let projection = DMatrix::from_row_slice(dout, din, &f64s(dout * din)?);
    let eigenvalues = f64s(dout)?;
    let plda_mean = DVector::from_vec(f64s(dout)?);
    let between = DMatrix::from_vec(dout, dout, f64s(dout * dout)?);
    let within = DMatrix::from_vec(dout, dout, f64s(dout * dout)?);
    if pos != bytes.len() {
        return Err(BackendError::Format { offset: pos, detail: "trailing bytes".into() });
    }
    Ok(Backend { mean, lda: Lda { projection, eigenvalues }, plda: Plda::new(plda_mean, between, within)? })
}

pub fn write_backend(b: &Backend, path: impl AsRef<Path>) -> Result<(), BackendError> {
    let path = path.as_ref();
    fs::write(path, encode_backend(b)).map_err(io(path))
}

pub fn read_backend(path: impl AsRef<Path>) -> Result<Backend, BackendError> {
    let path = path.as_ref();
    decode_backend(&fs::read(path).map_err(io(path))?)
}
