//! Attention blocks mapping `[N, C, L, H, W]` to the same shape.
//!
//! - [`DepMhsa`]: convolutional Q/K/V maps, per-frame multi-head attention,
//!   learned per-axis position embeddings added to the keys and optionally
//!   to the output. The pointwise, score-only configuration is the plain
//!   3D MHSA block.
//! - [`FactoredMhsa`]: spatial attention followed by temporal attention.
//! - [`ChannelGate`] and [`FactoredGate`]: sigmoid gating without attention.

mod dep_mhsa;
mod factored;
pub mod fused;
mod posenc;
mod vanilla;

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

pub use dep_mhsa::{DepMhsa, DepMhsaConfig, PositionMode, QkvRecipe, Variant};
pub use factored::{FactoredMhsa, Projections};
pub use fused::{attend, attention_weights, TokenAxis};
pub use posenc::{rel_pos_sum, to_head_layout, RelPosEmbeddings};
pub use vanilla::{ChannelGate, FactoredGate, GateBranch};

use crate::error::{Error, Result};
use crate::nn::{Module, StateKind};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    DepMhsa,
    Mhsa3d,
    Mhsa2p1d,
    VanillaChannel,
    Vanilla2p1d,
    None,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 6] = [
        AttentionKind::DepMhsa,
        AttentionKind::Mhsa3d,
        AttentionKind::Mhsa2p1d,
        AttentionKind::VanillaChannel,
        AttentionKind::Vanilla2p1d,
        AttentionKind::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::DepMhsa => "dep_mhsa",
            AttentionKind::Mhsa3d => "mhsa3d",
            AttentionKind::Mhsa2p1d => "mhsa2p1d",
            AttentionKind::VanillaChannel => "vanilla_channel",
            AttentionKind::Vanilla2p1d => "vanilla_2p1d",
            AttentionKind::None => "none",
        }
    }

    /// Position handling used when none is requested explicitly.
    pub fn default_position(self) -> PositionMode {
        match self {
            AttentionKind::DepMhsa => PositionMode::Dual,
            AttentionKind::Mhsa3d => PositionMode::Score,
            _ => PositionMode::Off,
        }
    }

    pub fn takes_position(self) -> bool {
        matches!(self, AttentionKind::DepMhsa | AttentionKind::Mhsa3d)
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown attention kind {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    pub variant: Variant,
    pub heads: usize,
    pub position: PositionMode,
}

impl AttentionConfig {
    pub fn new(kind: AttentionKind) -> Self {
        Self { kind, variant: Variant::A, heads: 4, position: kind.default_position() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::Config("attention needs at least one head".into()));
        }
        if self.position != PositionMode::Off && !self.kind.takes_position() {
            return Err(Error::Config(format!("{} has no position embedding", self.kind)));
        }
        Ok(())
    }
}

/// One configured attention block.
#[derive(Clone, Debug)]
pub enum Attention<T: Scalar = f32> {
    Mhsa(DepMhsa<T>),
    Factored(FactoredMhsa<T>),
    Channel(ChannelGate<T>),
    Gate(FactoredGate<T>),
}

impl<T: Scalar> Attention<T> {
    /// `None` for [`AttentionKind::None`].
    pub fn build(cfg: &AttentionConfig, channels: usize, extent: [usize; 3], rng: &mut ChaCha8Rng) -> Result<Option<Self>> {
        cfg.validate()?;
        let recipe = match cfg.kind {
            AttentionKind::DepMhsa => cfg.variant.recipe(),
            _ => QkvRecipe::pointwise(),
        };
        Ok(Some(match cfg.kind {
            AttentionKind::DepMhsa | AttentionKind::Mhsa3d => {
                Attention::Mhsa(DepMhsa::new(DepMhsaConfig::new(channels, extent, cfg.heads, recipe, cfg.position), rng)?)
            }
            AttentionKind::Mhsa2p1d => Attention::Factored(FactoredMhsa::new(channels, cfg.heads, rng)?),
            AttentionKind::VanillaChannel => Attention::Channel(ChannelGate::new(channels, rng)?),
            AttentionKind::Vanilla2p1d => Attention::Gate(FactoredGate::new(channels, rng)?),
            AttentionKind::None => return Ok(None),
        }))
    }

    pub fn forward(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        match self {
            Attention::Mhsa(m) => m.forward(g, x),
            Attention::Factored(m) => m.forward(g, x),
            Attention::Channel(m) => m.forward(g, x),
            Attention::Gate(m) => m.forward(g, x),
        }
    }

    fn inner(&self) -> &dyn Module<T> {
        match self {
            Attention::Mhsa(m) => m,
            Attention::Factored(m) => m,
            Attention::Channel(m) => m,
            Attention::Gate(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Module<T> {
        match self {
            Attention::Mhsa(m) => m,
            Attention::Factored(m) => m,
            Attention::Channel(m) => m,
            Attention::Gate(m) => m,
        }
    }
}

impl<T: Scalar> Module<T> for Attention<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &Tensor<T>)) {
        self.inner().for_each(prefix, f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut Tensor<T>)) {
        self.inner_mut().for_each_mut(prefix, f);
    }
}
