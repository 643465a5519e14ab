//! Weight-sharing Conformer supernet and its search space.

pub mod count;
pub mod model;
pub mod space;

pub use count::{space_cost_model, CostModel, CostTerm};
pub use model::{positional_encoding, ConformerModel, Encoded, MaterializeInit, ModelInput, Pick};
pub use space::{ArchSpace, BlockArch, BlockSpace, DerivedArch, GroupId, GroupKind, Side, SpaceConfig, BLANK};
