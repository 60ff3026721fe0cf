//! Binary checkpoints.
//!
//! ```text
//! file    = magic "IMPRCKPT" | version u32 | section_count u32 | section*
//! section = tag [u8; 4] | payload_len u64 | crc32(payload) u32 | payload
//! ```
//!
//! Integers and `f64` bit patterns are little-endian. Sections appear in the
//! order `META`, `EMBD`, `HEAD`, then an optional `OPTM`. `META` holds sorted
//! `key=value` lines. Encoding is canonical, so re-saving a loaded file
//! reproduces it byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use crate::embedder::{EmbedderConfig, EmbeddingNet, Nonlinearity};
use crate::error::{Error, Result};
use crate::head::CosineHead;
use crate::math::Matrix;
use crate::model::Model;
use crate::optim::{OptimState, Slot};
use crate::params::{ParamGroup, ParamSet};

pub const MAGIC: [u8; 8] = *b"IMPRCKPT";
pub const VERSION: u32 = 1;

const META: [u8; 4] = *b"META";
const EMBD: [u8; 4] = *b"EMBD";
const HEAD: [u8; 4] = *b"HEAD";
const OPTM: [u8; 4] = *b"OPTM";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optim: Option<OptimState>,
    /// Provenance: seed, epoch, command line, resolved config and so on.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            optim: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        encode_parts(&self.model, self.optim.as_ref(), &self.meta)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::BadVersion(version));
        }
        let count = r.u32()? as usize;
        let mut sections = Vec::with_capacity(count.min(4));
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let len = usize::try_from(r.u64()?).map_err(|_| corrupt("section length overflows"))?;
            let crc = r.u32()?;
            let payload = r.take(len)?;
            if crc32fast::hash(payload) != crc {
                return Err(corrupt(format!("checksum mismatch in {}", String::from_utf8_lossy(&tag))));
            }
            sections.push((tag, payload));
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        let tags: Vec<[u8; 4]> = sections.iter().map(|s| s.0).collect();
        if tags != [META, EMBD, HEAD] && tags != [META, EMBD, HEAD, OPTM] {
            return Err(corrupt("unexpected section layout"));
        }
        let meta = decode_meta(sections[0].1)?;
        let embedder = decode_embedder(sections[1].1)?;
        let head = decode_head(sections[2].1)?;
        let model = Model::new(embedder, head).map_err(|e| corrupt(e.to_string()))?;
        let optim = match sections.get(3) {
            Some((_, p)) => {
                let state = decode_optim(p)?;
                if !optim_matches(&state, &model) {
                    return Err(corrupt("optimizer state does not match the model"));
                }
                Some(state)
            }
            None => None,
        };
        Ok(Checkpoint { model, optim, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode_parts(model, None, &BTreeMap::new())?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    Ok(Checkpoint::load(path)?.model)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptPayload(msg.into())
}

fn optim_matches(state: &OptimState, model: &Model) -> bool {
    let same = |slots: &[Slot], ps: &ParamSet| {
        slots.len() == ps.len()
            && slots
                .iter()
                .zip(ps.iter())
                .all(|(s, p)| s.acc.len() == p.value.as_slice().len() && s.mom.len() == s.acc.len())
    };
    same(&state.embedder, model.embedder.params()) && same(&state.head, model.head.params())
}

fn encode_parts(model: &Model, optim: Option<&OptimState>, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    if let Some(state) = optim {
        if !optim_matches(state, model) {
            return Err(Error::InvalidShape("optimizer state does not match the model".into()));
        }
    }
    let mut sections = vec![
        (META, encode_meta(meta)?),
        (EMBD, encode_embedder(&model.embedder)),
        (HEAD, encode_head(&model.head)),
    ];
    if let Some(state) = optim {
        sections.push((OPTM, encode_optim(state)));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, sections.len() as u32);
    for (tag, payload) in sections {
        out.extend_from_slice(&tag);
        put_u64(&mut out, payload.len() as u64);
        put_u32(&mut out, crc32fast::hash(&payload));
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            corrupt(format!(
                "truncated: needed {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("size overflows"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| corrupt("size overflows"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }

    fn finish(&self, what: &str) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(corrupt(format!("trailing bytes in {what} section")))
        }
    }
}

fn encode_meta(meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut out = String::new();
    for (k, v) in meta {
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::InvalidConfig(format!("metadata entry `{k}` cannot be stored")));
        }
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    Ok(out.into_bytes())
}

fn decode_meta(payload: &[u8]) -> Result<BTreeMap<String, String>> {
    let text = std::str::from_utf8(payload).map_err(|_| corrupt("metadata is not UTF-8"))?;
    let mut meta = BTreeMap::new();
    let mut prev: Option<&str> = None;
    for line in text.split_terminator('\n') {
        let (k, v) = line.split_once('=').ok_or_else(|| corrupt("metadata line without `=`"))?;
        if prev.is_some_and(|p| p >= k) {
            return Err(corrupt("metadata keys out of order"));
        }
        prev = Some(k);
        meta.insert(k.to_string(), v.to_string());
    }
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(corrupt("metadata not newline terminated"));
    }
    Ok(meta)
}

fn encode_params(out: &mut Vec<u8>, params: &ParamSet) {
    put_u32(out, params.len() as u32);
    for p in params.iter() {
        put_u32(out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        out.push(match p.group {
            ParamGroup::Pretrained => 0,
            ParamGroup::Fresh => 1,
        });
        put_u64(out, p.value.rows() as u64);
        put_u64(out, p.value.cols() as u64);
        put_f64s(out, p.value.as_slice());
    }
}

fn decode_params(r: &mut Reader<'_>) -> Result<ParamSet> {
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("parameter name is not UTF-8"))?;
        let group = match r.u8()? {
            0 => ParamGroup::Pretrained,
            1 => ParamGroup::Fresh,
            g => return Err(corrupt(format!("unknown parameter group {g}"))),
        };
        let rows = r.usize()?;
        let cols = r.usize()?;
        let n = rows.checked_mul(cols).ok_or_else(|| corrupt("size overflows"))?;
        let value = Matrix::from_vec(rows, cols, r.f64s(n)?).map_err(|e| corrupt(e.to_string()))?;
        params.push(name, group, value).map_err(|e| corrupt(e.to_string()))?;
    }
    Ok(params)
}

fn encode_embedder(net: &EmbeddingNet) -> Vec<u8> {
    let cfg = net.config();
    let mut out = Vec::new();
    put_u64(&mut out, cfg.input_dim as u64);
    put_u64(&mut out, cfg.hidden_dims.len() as u64);
    for &h in &cfg.hidden_dims {
        put_u64(&mut out, h as u64);
    }
    put_u64(&mut out, cfg.embedding_dim as u64);
    out.push(match cfg.nonlinearity {
        Nonlinearity::Relu => 0,
        Nonlinearity::Tanh => 1,
    });
    put_u64(&mut out, cfg.seed);
    encode_params(&mut out, net.params());
    out
}

fn decode_embedder(payload: &[u8]) -> Result<EmbeddingNet> {
    let mut r = Reader { bytes: payload, pos: 0 };
    let input_dim = r.usize()?;
    let hidden = r.usize()?;
    if hidden > payload.len() / 8 {
        return Err(corrupt("hidden layer count exceeds payload"));
    }
    let hidden_dims = (0..hidden).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let embedding_dim = r.usize()?;
    let nonlinearity = match r.u8()? {
        0 => Nonlinearity::Relu,
        1 => Nonlinearity::Tanh,
        n => return Err(corrupt(format!("unknown nonlinearity {n}"))),
    };
    let seed = r.u64()?;
    let params = decode_params(&mut r)?;
    r.finish("EMBD")?;
    let config = EmbedderConfig {
        input_dim,
        hidden_dims,
        embedding_dim,
        nonlinearity,
        seed,
    };
    EmbeddingNet::from_parts(config, params).map_err(|e| corrupt(e.to_string()))
}

fn encode_head(head: &CosineHead) -> Vec<u8> {
    let mut out = Vec::new();
    put_u64(&mut out, head.num_classes() as u64);
    for &id in head.class_ids() {
        put_u32(&mut out, id);
    }
    for &c in head.imprint_counts() {
        put_u32(&mut out, c);
    }
    encode_params(&mut out, head.params());
    out
}

fn decode_head(payload: &[u8]) -> Result<CosineHead> {
    let mut r = Reader { bytes: payload, pos: 0 };
    let classes = r.usize()?;
    if classes > payload.len() / 8 {
        return Err(corrupt("class count exceeds payload"));
    }
    let ids = (0..classes).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let counts = (0..classes).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let params = decode_params(&mut r)?;
    r.finish("HEAD")?;
    CosineHead::from_parts(params, ids, counts).map_err(|e| corrupt(e.to_string()))
}

fn encode_slots(out: &mut Vec<u8>, slots: &[Slot]) {
    put_u32(out, slots.len() as u32);
    for s in slots {
        put_u64(out, s.acc.len() as u64);
        put_f64s(out, &s.acc);
        put_f64s(out, &s.mom);
    }
}

fn decode_slots(r: &mut Reader<'_>) -> Result<Vec<Slot>> {
    let count = r.u32()?;
    let mut slots = Vec::new();
    for _ in 0..count {
        let len = r.usize()?;
        slots.push(Slot {
            acc: r.f64s(len)?,
            mom: r.f64s(len)?,
        });
    }
    Ok(slots)
}

fn encode_optim(state: &OptimState) -> Vec<u8> {
    let mut out = Vec::new();
    put_u64(&mut out, state.epoch as u64);
    put_u64(&mut out, state.step);
    encode_slots(&mut out, &state.embedder);
    encode_slots(&mut out, &state.head);
    out
}

fn decode_optim(payload: &[u8]) -> Result<OptimState> {
    let mut r = Reader { bytes: payload, pos: 0 };
    let epoch = r.usize()?;
    let step = r.u64()?;
    let embedder = decode_slots(&mut r)?;
    let head = decode_slots(&mut r)?;
    r.finish("OPTM")?;
    Ok(OptimState {
        embedder,
        head,
        epoch,
        step,
    })
}
