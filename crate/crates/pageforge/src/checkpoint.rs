//! Binary checkpoint files.
//!
//! Layout: the magic `PGFCKPT\0`, a little-endian `u64` header length, the
//! header as JSON, the parameter values as little-endian `f32` in header
//! order, the optional training-state blobs, and finally the SHA-256 of
//! everything before it.

use std::fs;
use std::path::Path;

use pageforge_core::ner::TagSet;
use pageforge_core::param::OptimizerState;
use pageforge_core::pipeline::{
    Checkpoint, NamedTensor, PipelineConfig, SetupKind, TrainReport, TrainState,
};
use pageforge_core::recog::Alphabet;
use pageforge_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PGFCKPT\0";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    setup: SetupKind,
    config: PipelineConfig,
    alphabet: Alphabet,
    tags: TagSet,
    params: Vec<NamedTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state: Option<StateHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateHeader {
    report: TrainReport,
    since_best: usize,
    teacher_forcing: bool,
    finished: bool,
    optimizer_step: u64,
    has_best: bool,
}

fn put(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes a checkpoint and, if given, the state needed to resume
/// training. A state that has not finished an epoch is not stored.
pub fn encode(ck: &Checkpoint, state: Option<&TrainState<f32>>) -> Vec<u8> {
    let state = state.filter(|s| s.report.epochs > 0);
    let header = Header {
        version: ck.version,
        setup: ck.setup,
        config: ck.config.clone(),
        alphabet: ck.alphabet.clone(),
        tags: ck.tags.clone(),
        params: ck.params.clone(),
        state: state.map(|s| StateHeader {
            report: s.report.clone(),
            since_best: s.since_best,
            teacher_forcing: s.teacher_forcing,
            finished: s.finished,
            optimizer_step: s.optimizer.step,
            has_best: s.best.is_some(),
        }),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &ck.params {
        put(&mut out, &p.data);
    }
    if let Some(s) = state {
        for v in s.optimizer.first.iter().chain(&s.optimizer.second) {
            put(&mut out, v);
        }
        for t in s.best.iter().flatten() {
            put(&mut out, t.data());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, "checkpoint is truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }
}

/// Parses and verifies a checkpoint; `path` is only used in messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Checkpoint, Option<TrainState<f32>>)> {
    if bytes.len() < MAGIC.len() + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a pageforge checkpoint"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::format(path, "checksum mismatch"));
    }
    let mut r = Reader {
        buf: body,
        pos: 8,
        path,
    };
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::format(path, format!("header: {e}")))?;
    let mut params = header.params;
    for p in &mut params {
        let n: usize = p.shape.iter().product();
        p.data = r.floats(n)?;
    }
    let state = match header.state {
        None => None,
        Some(h) => {
            let mut first = Vec::new();
            let mut second = Vec::new();
            for p in &params {
                first.push(r.floats(p.data.len())?);
            }
            for p in &params {
                second.push(r.floats(p.data.len())?);
            }
            let best = if h.has_best {
                let mut v = Vec::new();
                for p in &params {
                    let data = r.floats(p.data.len())?;
                    v.push(Tensor::new(p.shape.clone(), data)?);
                }
                Some(v)
            } else {
                None
            };
            Some(TrainState {
                report: h.report,
                since_best: h.since_best,
                teacher_forcing: h.teacher_forcing,
                finished: h.finished,
                optimizer: OptimizerState {
                    step: h.optimizer_step,
                    first,
                    second,
                },
                best,
            })
        }
    };
    if r.pos != body.len() {
        return Err(Error::format(
            path,
            "trailing bytes after the parameter data",
        ));
    }
    let ck = Checkpoint {
        version: header.version,
        setup: header.setup,
        config: header.config,
        alphabet: header.alphabet,
        tags: header.tags,
        params,
    };
    Ok((ck, state))
}

pub fn save(path: &Path, ck: &Checkpoint, state: Option<&TrainState<f32>>) -> Result<()> {
    fs::write(path, encode(ck, state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Checkpoint, Option<TrainState<f32>>)> {
    if !path.is_file() {
        return Err(Error::Usage(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
