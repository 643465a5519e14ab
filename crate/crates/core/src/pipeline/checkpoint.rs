//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"HPCK"
//! u32     format version
//! u32     section count n
//! n × { [u8; 4] tag, u64 offset, u64 length }   offsets from file start
//! section payloads
//! ```
//!
//! Sections: `SPCE` (JSON: model kind and space), `WGHT` (tensors), `LGTS`
//! (architecture logits, supernets only), `OPTM` (optimizer moments), `RNGS`
//! (data-order stream), `LINE` (JSON stage history). Floats are stored as
//! raw bits, so a load/save round trip is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Adam, ParamSet};
use crate::search::{ArchLogits, RngState};
use crate::supernet::{ArchSpace, ConformerModel, DerivedArch};
use crate::tensor::Tensor;

use super::recipe::StageConfig;
use super::train::EpochStats;

pub const MAGIC: &[u8; 4] = b"HPCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Supernet,
    Derived,
}

/// One completed stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub config: StageConfig,
    /// Effective seed the stage ran with.
    pub seed: u64,
    pub epochs_run: usize,
    pub stats: Vec<EpochStats>,
    /// Architecture extracted or trained by this stage.
    pub arch: Option<DerivedArch>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub weights: Option<Adam>,
    pub logits: Option<Adam>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub space: ArchSpace,
    pub params: ParamSet,
    pub logits: Option<ArchLogits>,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    pub lineage: Vec<LineageEntry>,
}

#[derive(Serialize, Deserialize)]
struct SpaceSection {
    kind: ModelKind,
    space: ArchSpace,
}

impl Checkpoint {
    pub fn model(&self) -> Result<ConformerModel> {
        ConformerModel::from_params(self.space.clone(), self.params.clone())
    }

    /// Architecture of a derived checkpoint.
    pub fn arch(&self) -> Result<DerivedArch> {
        if self.kind != ModelKind::Derived {
            return Err(Error::Lineage(
                "supernet checkpoints have no single architecture".into(),
            ));
        }
        self.space.arch_from_indices(&vec![0; self.space.groups().len()])
    }

    /// The derived architecture, or a supernet's current extraction.
    pub fn current_arch(&self) -> Result<DerivedArch> {
        match (&self.kind, &self.logits) {
            (ModelKind::Supernet, Some(l)) => l.extract(&self.space),
            (ModelKind::Supernet, None) => Err(Error::IncompatibleCheckpoint(
                "supernet checkpoint without logits".into(),
            )),
            (ModelKind::Derived, _) => self.arch(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<([u8; 4], Vec<u8>)> = Vec::new();
        sections.push((
            *b"SPCE",
            to_json(&SpaceSection {
                kind: self.kind,
                space: self.space.clone(),
            })?,
        ));
        sections.push((*b"WGHT", encode_params(&self.params)));
        if let Some(l) = &self.logits {
            sections.push((*b"LGTS", encode_logits(l)));
        }
        sections.push((*b"OPTM", encode_optimizer(&self.optimizer)));
        let mut rng = Vec::new();
        put_rng(&mut rng, &self.rng);
        sections.push((*b"RNGS", rng));
        sections.push((*b"LINE", to_json(&self.lineage)?));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, sections.len() as u32);
        let mut offset = (12 + sections.len() * 20) as u64;
        for (tag, body) in &sections {
            out.extend_from_slice(tag);
            put_u64(&mut out, offset);
            put_u64(&mut out, body.len() as u64);
            offset += body.len() as u64;
        }
        for (_, body) in sections {
            out.extend_from_slice(&body);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let n = r.u32()? as usize;
        let mut table = Vec::with_capacity(n);
        for _ in 0..n {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let off = r.u64()? as usize;
            let len = r.u64()? as usize;
            let body = bytes
                .get(off..off.checked_add(len).ok_or_else(|| fmt_err("section overflow"))?)
                .ok_or_else(|| fmt_err("section extends past end of file"))?;
            table.push((tag, body));
        }
        let find = |tag: &[u8; 4]| table.iter().find(|(t, _)| t == tag).map(|(_, b)| *b);
        let need = |tag: &[u8; 4]| {
            find(tag).ok_or_else(|| fmt_err(&format!("missing section {}", String::from_utf8_lossy(tag))))
        };

        let sp: SpaceSection = from_json(need(b"SPCE")?)?;
        let params = decode_params(need(b"WGHT")?)?;
        let logits = find(b"LGTS").map(decode_logits).transpose()?;
        let optimizer = find(b"OPTM").map(decode_optimizer).transpose()?.unwrap_or_default();
        let rng = get_rng(&mut Reader::new(need(b"RNGS")?))?;
        let lineage: Vec<LineageEntry> = from_json(need(b"LINE")?)?;
        sp.space.validate()?;
        Ok(Self {
            kind: sp.kind,
            space: sp.space,
            params,
            logits,
            optimizer,
            rng,
            lineage,
        })
    }

    /// Writes to a temporary sibling file, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()
        };
        write().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    serde_json::to_vec(v).map_err(|e| Error::Format(e.to_string()))
}

fn from_json<T: serde::de::DeserializeOwned>(b: &[u8]) -> Result<T> {
    serde_json::from_slice(b).map_err(|e| Error::Format(e.to_string()))
}

fn fmt_err(m: &str) -> Error {
    Error::Format(m.to_string())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    put_u64(out, v.len() as u64);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_rng(out: &mut Vec<u8>, s: &RngState) {
    out.extend_from_slice(&s.seed);
    put_u64(out, s.stream);
    out.extend_from_slice(&s.word_pos.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| fmt_err("truncated data"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > (self.bytes.len() - self.pos) / 8 {
            return Err(fmt_err("array length exceeds section"));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn done(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(fmt_err("trailing bytes in section"))
        }
    }
}

fn get_rng(r: &mut Reader<'_>) -> Result<RngState> {
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    Ok(RngState { seed, stream, word_pos })
}

/// `u32` count, then per tensor: `u32` name length, UTF-8 name, `u32`
/// rank, `u64` extents, `f64` data.
fn encode_params(p: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, p.len() as u32);
    for (name, t) in p.iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn decode_params(b: &[u8]) -> Result<ParamSet> {
    let mut r = Reader::new(b);
    let n = r.u32()?;
    let mut p = ParamSet::new();
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| fmt_err("parameter name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| fmt_err("tensor size overflow"))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| fmt_err("tensor size overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| fmt_err(&format!("tensor `{name}`: {e}")))?;
        p.push(name, t);
    }
    r.done()?;
    Ok(p)
}

fn encode_logits(l: &ArchLogits) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&l.temperature.to_le_bytes());
    out.extend_from_slice(&l.eta.to_le_bytes());
    put_u32(&mut out, l.logits.len() as u32);
    for g in &l.logits {
        put_f64s(&mut out, g);
    }
    put_rng(&mut out, &l.rng_state());
    out
}

fn decode_logits(b: &[u8]) -> Result<ArchLogits> {
    let mut r = Reader::new(b);
    let temperature = r.f64()?;
    let eta = r.f64()?;
    let n = r.u32()?;
    let logits = (0..n).map(|_| r.f64s()).collect::<Result<Vec<_>>>()?;
    let rng = get_rng(&mut r)?;
    r.done()?;
    Ok(ArchLogits::from_parts(logits, temperature, eta, rng))
}

fn encode_adam(out: &mut Vec<u8>, a: &Adam) {
    for v in [a.lr, a.beta1, a.beta2, a.eps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_u64(out, a.step);
    put_u32(out, a.m.len() as u32);
    for (m, v) in a.m.iter().zip(&a.v) {
        put_f64s(out, m);
        put_f64s(out, v);
    }
}

fn decode_adam(r: &mut Reader<'_>) -> Result<Adam> {
    let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let step = r.u64()?;
    let n = r.u32()?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for _ in 0..n {
        m.push(r.f64s()?);
        v.push(r.f64s()?);
    }
    Ok(Adam {
        lr,
        beta1,
        beta2,
        eps,
        step,
        m,
        v,
    })
}

/// Two optional optimizers, each preceded by a presence byte.
fn encode_optimizer(o: &OptimizerState) -> Vec<u8> {
    let mut out = Vec::new();
    for a in [&o.weights, &o.logits] {
        match a {
            Some(a) => {
                out.push(1);
                encode_adam(&mut out, a);
            }
            None => out.push(0),
        }
    }
    out
}

fn decode_optimizer(b: &[u8]) -> Result<OptimizerState> {
    let mut r = Reader::new(b);
    let get = |r: &mut Reader<'_>| -> Result<Option<Adam>> {
        match r.take(1)?[0] {
            0 => Ok(None),
            1 => decode_adam(r).map(Some),
            _ => Err(fmt_err("bad optimizer presence flag")),
        }
    };
    let weights = get(&mut r)?;
    let logits = get(&mut r)?;
    r.done()?;
    Ok(OptimizerState { weights, logits })
}
