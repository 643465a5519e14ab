//! Search space, architecture-choice groups and derived architectures.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CTC blank id.
pub const BLANK: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Encoder,
    Decoder,
}

/// The searchable hyper-parameters of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    /// Feed-forward width (both macaron FFNs of an encoder block).
    Fd,
    /// Attention head count.
    Ah,
    /// Per-head attention dimension.
    Adim,
    /// Depthwise convolution kernel width (encoder only).
    Ck,
    /// Cross-attention head count when not shared with self-attention.
    CrossAh,
    /// Cross-attention head dimension when not shared with self-attention.
    CrossAdim,
}

impl GroupKind {
    pub fn label(self) -> &'static str {
        match self {
            GroupKind::Fd => "FD",
            GroupKind::Ah => "AH",
            GroupKind::Adim => "ADIM",
            GroupKind::Ck => "CK",
            GroupKind::CrossAh => "XAH",
            GroupKind::CrossAdim => "XADIM",
        }
    }
}

/// One choice group: a (side, block, kind) triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupId {
    pub side: Side,
    pub block: usize,
    pub kind: GroupKind,
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = match self.side {
            Side::Encoder => "enc",
            Side::Decoder => "dec",
        };
        write!(f, "{side}.{}.{}", self.block, self.kind.label())
    }
}

/// Candidate lists of one block. `ck` is empty for decoder blocks; the
/// cross lists are non-empty only for decoder blocks whose cross-attention
/// is searched separately.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpace {
    pub fd: Vec<usize>,
    pub ah: Vec<usize>,
    pub adim: Vec<usize>,
    #[serde(default)]
    pub ck: Vec<usize>,
    #[serde(default)]
    pub cross_ah: Vec<usize>,
    #[serde(default)]
    pub cross_adim: Vec<usize>,
}

impl BlockSpace {
    pub fn choices(&self, kind: GroupKind) -> &[usize] {
        match kind {
            GroupKind::Fd => &self.fd,
            GroupKind::Ah => &self.ah,
            GroupKind::Adim => &self.adim,
            GroupKind::Ck => &self.ck,
            GroupKind::CrossAh => &self.cross_ah,
            GroupKind::CrossAdim => &self.cross_adim,
        }
    }

    fn kinds(&self, side: Side) -> Vec<GroupKind> {
        let mut kinds = vec![GroupKind::Fd, GroupKind::Ah, GroupKind::Adim];
        match side {
            Side::Encoder => kinds.push(GroupKind::Ck),
            Side::Decoder if !self.cross_ah.is_empty() => kinds.extend([GroupKind::CrossAh, GroupKind::CrossAdim]),
            Side::Decoder => {}
        }
        kinds
    }

    pub fn max(&self, kind: GroupKind) -> usize {
        *self.choices(kind).last().unwrap()
    }

    /// Cross-attention lists, falling back to the shared self-attention ones.
    pub fn cross_lists(&self) -> (&[usize], &[usize]) {
        if self.cross_ah.is_empty() {
            (&self.ah, &self.adim)
        } else {
            (&self.cross_ah, &self.cross_adim)
        }
    }
}

/// Full search space: fixed dimensions plus per-block candidate lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpace {
    pub d_model: usize,
    pub feat_dim: usize,
    /// Output vocabulary including blank (id 0) and the start/end sentinel
    /// (last id).
    pub vocab: usize,
    pub encoder: Vec<BlockSpace>,
    pub decoder: Vec<BlockSpace>,
}

/// Declarative description of a space with identical lists in every block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceConfig {
    pub d_model: usize,
    pub feat_dim: usize,
    pub vocab: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub fd: Vec<usize>,
    pub ah: Vec<usize>,
    pub adim: Vec<usize>,
    pub ck: Vec<usize>,
    /// Search decoder cross-attention heads separately from self-attention.
    pub separate_cross_attention: bool,
}

impl Default for SpaceConfig {
    /// Full-size search space: 12 encoder and 6 decoder blocks of width 256.
    fn default() -> Self {
        Self {
            d_model: 256,
            feat_dim: 83,
            vocab: 5002,
            encoder_blocks: 12,
            decoder_blocks: 6,
            fd: vec![512, 1024, 2048, 3072],
            ah: vec![2, 4, 8],
            adim: vec![16, 32, 64, 96],
            ck: vec![3, 5, 7],
            separate_cross_attention: false,
        }
    }
}

impl SpaceConfig {
    /// Reduced space for CPU experiments: 2 encoder blocks, 1 decoder block,
    /// model width 32.
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            feat_dim: 16,
            vocab: 10,
            encoder_blocks: 2,
            decoder_blocks: 1,
            fd: vec![32, 64, 128],
            ah: vec![1, 2, 4],
            adim: vec![4, 8, 16],
            ck: vec![3, 5, 7],
            separate_cross_attention: false,
        }
    }

    pub fn build(&self) -> Result<ArchSpace> {
        let block = |with_ck: bool, cross: bool| BlockSpace {
            fd: self.fd.clone(),
            ah: self.ah.clone(),
            adim: self.adim.clone(),
            ck: if with_ck { self.ck.clone() } else { Vec::new() },
            cross_ah: if cross { self.ah.clone() } else { Vec::new() },
            cross_adim: if cross { self.adim.clone() } else { Vec::new() },
        };
        let space = ArchSpace {
            d_model: self.d_model,
            feat_dim: self.feat_dim,
            vocab: self.vocab,
            encoder: (0..self.encoder_blocks).map(|_| block(true, false)).collect(),
            decoder: (0..self.decoder_blocks)
                .map(|_| block(false, self.separate_cross_attention))
                .collect(),
        };
        space.validate()?;
        Ok(space)
    }
}

impl ArchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.feat_dim == 0 {
            return Err(Error::config("space", "model and feature widths must be positive"));
        }
        if self.vocab < 3 {
            return Err(Error::config(
                "space.vocab",
                "vocabulary needs blank, sentinel and at least one token",
            ));
        }
        if self.encoder.is_empty() || self.decoder.is_empty() {
            return Err(Error::config(
                "space",
                "need at least one encoder and one decoder block",
            ));
        }
        for g in self.groups() {
            let list = self.choices(&g);
            let field = format!("space.{g}");
            if list.is_empty() {
                return Err(Error::config(field, "empty choice list"));
            }
            if list.contains(&0) {
                return Err(Error::config(field, "choices must be positive"));
            }
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config(field, "choices must be strictly increasing"));
            }
            if g.kind == GroupKind::Ck && list.iter().any(|k| k % 2 == 0) {
                return Err(Error::config(field, "kernel widths must be odd"));
            }
        }
        for (i, b) in self.decoder.iter().enumerate() {
            if b.cross_ah.is_empty() != b.cross_adim.is_empty() {
                return Err(Error::config(
                    format!("space.dec.{i}"),
                    "cross-attention lists must both be present or both absent",
                ));
            }
        }
        Ok(())
    }

    pub fn sentinel(&self) -> usize {
        self.vocab - 1
    }

    pub fn block(&self, side: Side, block: usize) -> &BlockSpace {
        match side {
            Side::Encoder => &self.encoder[block],
            Side::Decoder => &self.decoder[block],
        }
    }

    /// All choice groups in canonical order: encoder blocks first, then
    /// decoder blocks; within a block FD, AH, ADIM, then CK or the cross
    /// groups.
    pub fn groups(&self) -> Vec<GroupId> {
        let mut out = Vec::new();
        for (side, blocks) in [(Side::Encoder, &self.encoder), (Side::Decoder, &self.decoder)] {
            for (block, b) in blocks.iter().enumerate() {
                for kind in b.kinds(side) {
                    out.push(GroupId { side, block, kind });
                }
            }
        }
        out
    }

    pub fn choices(&self, g: &GroupId) -> &[usize] {
        self.block(g.side, g.block).choices(g.kind)
    }

    /// Candidate lists aligned with [`ArchSpace::groups`].
    pub fn group_choices(&self) -> Vec<Vec<usize>> {
        self.groups().iter().map(|g| self.choices(g).to_vec()).collect()
    }

    /// Builds a derived architecture from per-group choice indices.
    pub fn arch_from_indices(&self, indices: &[usize]) -> Result<DerivedArch> {
        let groups = self.groups();
        if indices.len() != groups.len() {
            return Err(Error::invalid(format!(
                "expected {} choice indices, got {}",
                groups.len(),
                indices.len()
            )));
        }
        let mut arch = DerivedArch {
            encoder: vec![BlockArch::default(); self.encoder.len()],
            decoder: vec![BlockArch::default(); self.decoder.len()],
        };
        for (g, &i) in groups.iter().zip(indices) {
            let list = self.choices(g);
            let v = *list
                .get(i)
                .ok_or_else(|| Error::invalid(format!("choice index {i} out of range for group {g}")))?;
            arch.set(g, v);
        }
        Ok(arch)
    }

    /// Per-group indices of `arch`'s choices; fails if any choice is not a
    /// member of the corresponding list.
    pub fn indices_of(&self, arch: &DerivedArch) -> Result<Vec<usize>> {
        if arch.encoder.len() != self.encoder.len() || arch.decoder.len() != self.decoder.len() {
            return Err(Error::invalid("architecture block counts do not match the space"));
        }
        self.groups()
            .iter()
            .map(|g| {
                let v = arch
                    .value(g)
                    .ok_or_else(|| Error::invalid(format!("architecture has no choice for group {g}")))?;
                self.choices(g)
                    .iter()
                    .position(|&c| c == v)
                    .ok_or_else(|| Error::invalid(format!("choice {v} for group {g} is not in {:?}", self.choices(g))))
            })
            .collect()
    }

    /// The space containing exactly one architecture.
    pub fn singleton(&self, arch: &DerivedArch) -> Result<ArchSpace> {
        self.indices_of(arch)?;
        let one = |v: Option<usize>| v.map(|v| vec![v]).unwrap_or_default();
        let block = |b: &BlockArch| BlockSpace {
            fd: vec![b.fd],
            ah: vec![b.ah],
            adim: vec![b.adim],
            ck: one(b.ck),
            cross_ah: one(b.cross_ah),
            cross_adim: one(b.cross_adim),
        };
        Ok(ArchSpace {
            d_model: self.d_model,
            feat_dim: self.feat_dim,
            vocab: self.vocab,
            encoder: arch.encoder.iter().map(block).collect(),
            decoder: arch.decoder.iter().map(block).collect(),
        })
    }

    /// True when every group has exactly one candidate.
    pub fn is_singleton(&self) -> bool {
        self.groups().iter().all(|g| self.choices(g).len() == 1)
    }

    pub fn max_arch(&self) -> DerivedArch {
        let idx: Vec<usize> = self.groups().iter().map(|g| self.choices(g).len() - 1).collect();
        self.arch_from_indices(&idx).expect("max indices valid")
    }

    pub fn min_arch(&self) -> DerivedArch {
        self.arch_from_indices(&vec![0; self.groups().len()])
            .expect("min indices valid")
    }
}

/// Concrete choices for one block.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockArch {
    pub fd: usize,
    pub ah: usize,
    pub adim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ck: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_ah: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_adim: Option<usize>,
}

/// One concrete choice per group, produced by extraction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedArch {
    pub encoder: Vec<BlockArch>,
    pub decoder: Vec<BlockArch>,
}

impl DerivedArch {
    fn block_mut(&mut self, side: Side, block: usize) -> &mut BlockArch {
        match side {
            Side::Encoder => &mut self.encoder[block],
            Side::Decoder => &mut self.decoder[block],
        }
    }

    fn set(&mut self, g: &GroupId, v: usize) {
        let b = self.block_mut(g.side, g.block);
        match g.kind {
            GroupKind::Fd => b.fd = v,
            GroupKind::Ah => b.ah = v,
            GroupKind::Adim => b.adim = v,
            GroupKind::Ck => b.ck = Some(v),
            GroupKind::CrossAh => b.cross_ah = Some(v),
            GroupKind::CrossAdim => b.cross_adim = Some(v),
        }
    }

    pub fn value(&self, g: &GroupId) -> Option<usize> {
        let blocks = match g.side {
            Side::Encoder => &self.encoder,
            Side::Decoder => &self.decoder,
        };
        let b = blocks.get(g.block)?;
        match g.kind {
            GroupKind::Fd => Some(b.fd),
            GroupKind::Ah => Some(b.ah),
            GroupKind::Adim => Some(b.adim),
            GroupKind::Ck => b.ck,
            GroupKind::CrossAh => b.cross_ah,
            GroupKind::CrossAdim => b.cross_adim,
        }
    }
}
