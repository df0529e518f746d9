use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use super::fused::{attend, TokenAxis};
use super::posenc::RelPosEmbeddings;
use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Conv3d, ConvGeometry, Module, StateKind};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Which convolution kernels produce the query, key and value maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    A,
    B,
    C,
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];

    pub fn recipe(self) -> QkvRecipe {
        const S: [usize; 3] = [1, 3, 3];
        const T: [usize; 3] = [3, 1, 1];
        let (q, k, v) = match self {
            Variant::A => (S, T, [T, S]),
            Variant::B => (T, S, [S, T]),
            Variant::C => (S, T, [S, T]),
            Variant::D => (T, S, [T, S]),
        };
        QkvRecipe { q, k, v: v.to_vec() }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            "D" => Ok(Variant::D),
            _ => Err(Error::Config(format!("unknown variant {s:?}; expected A, B, C or D"))),
        }
    }
}

/// Kernel extents `(k_t, k_h, k_w)` for the query, key and the value chain.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QkvRecipe {
    pub q: [usize; 3],
    pub k: [usize; 3],
    pub v: Vec<[usize; 3]>,
}

impl QkvRecipe {
    /// Single 1×1×1 projections.
    pub fn pointwise() -> Self {
        Self { q: [1, 1, 1], k: [1, 1, 1], v: vec![[1, 1, 1]] }
    }
}

/// Where the learned position embedding `E` enters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PositionMode {
    /// No position parameters.
    Off,
    /// Added to the keys, so it shifts the attention scores only.
    Score,
    /// Added to the keys and again to the block output.
    Dual,
}

impl fmt::Display for PositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositionMode::Off => "off",
            PositionMode::Score => "score",
            PositionMode::Dual => "dual",
        })
    }
}

impl FromStr for PositionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "off" | "none" => Ok(PositionMode::Off),
            "score" => Ok(PositionMode::Score),
            "dual" => Ok(PositionMode::Dual),
            _ => Err(Error::Config(format!("unknown position mode {s:?}; expected off, score or dual"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepMhsaConfig {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    pub recipe: QkvRecipe,
    pub position: PositionMode,
}

impl DepMhsaConfig {
    pub fn new(channels: usize, extent: [usize; 3], heads: usize, recipe: QkvRecipe, position: PositionMode) -> Self {
        Self { channels, frames: extent[0], height: extent[1], width: extent[2], heads, recipe, position }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} channels are not divisible by {} heads", self.channels, self.heads)));
        }
        if self.recipe.v.is_empty() {
            return Err(Error::Config("value path needs at least one convolution".into()));
        }
        Ok(())
    }
}

/// Multi-head self-attention over the spatial tokens of each frame, with
/// convolutional query/key/value maps and optional position embeddings in
/// the scores and on the output.
#[derive(Clone, Debug)]
pub struct DepMhsa<T: Scalar = f32> {
    pub config: DepMhsaConfig,
    pub q: Conv3d<T>,
    pub k: Conv3d<T>,
    pub v: Vec<Conv3d<T>>,
    pub pos: Option<RelPosEmbeddings<T>>,
}

impl<T: Scalar> DepMhsa<T> {
    pub fn new(config: DepMhsaConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let conv = |k: [usize; 3], bias: bool, rng: &mut ChaCha8Rng| Conv3d::new(c, c, ConvGeometry::same(k), bias, rng);
        // A key bias shifts every score of a query by the same amount, which
        // the softmax cancels; it would never receive a gradient.
        let q = conv(config.recipe.q, true, rng)?;
        let k = conv(config.recipe.k, false, rng)?;
        let v = config.recipe.v.iter().map(|&kv| conv(kv, true, rng)).collect::<Result<Vec<_>>>()?;
        let pos = match config.position {
            PositionMode::Off => None,
            _ => Some(RelPosEmbeddings::new(c, config.frames, config.height, config.width, rng)?),
        };
        Ok(Self { config, q, k, v, pos })
    }

    /// Pointwise projections with the embedding in the scores only.
    pub fn mhsa3d(channels: usize, extent: [usize; 3], heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::new(DepMhsaConfig::new(channels, extent, heads, QkvRecipe::pointwise(), PositionMode::Score), rng)
    }

    pub fn variant(channels: usize, extent: [usize; 3], heads: usize, v: Variant, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::new(DepMhsaConfig::new(channels, extent, heads, v.recipe(), PositionMode::Dual), rng)
    }

    fn check_input(&self, x: &Var<T>) -> Result<()> {
        let c = &self.config;
        let want = [c.channels, c.frames, c.height, c.width];
        if x.dims().len() != 5 || x.dims()[1..] != want {
            return Err(shape_err!("attention block built for [N, {:?}] got {:?}", want, x.dims()));
        }
        Ok(())
    }

    /// Query, key (position-shifted) and value maps.
    pub fn project(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<(Var<T>, Var<T>, Var<T>, Option<Var<T>>)> {
        self.check_input(x)?;
        let q = self.q.forward(g, x)?;
        let mut k = self.k.forward(g, x)?;
        let mut v = x.clone();
        for conv in &self.v {
            v = conv.forward(g, &v)?;
        }
        let e = match &self.pos {
            Some(p) => Some(p.sum(g)?),
            None => None,
        };
        if let Some(e) = &e {
            k = g.add(&k, e)?;
        }
        Ok((q, k, v, e))
    }

    pub fn forward(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (q, k, v, e) = self.project(g, x)?;
        let y = attend(g, &q, &k, &v, self.config.heads, TokenAxis::Spatial)?;
        match (&e, self.config.position) {
            (Some(e), PositionMode::Dual) => g.add(&y, e),
            _ => Ok(y),
        }
    }

    /// Per-frame attention weights `[N, heads, L, H·W, H·W]`.
    pub fn attention_weights(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::inference();
        let (q, k, _, _) = self.project(&g, &g.constant(x.clone()))?;
        super::fused::attention_weights(q.value(), k.value(), self.config.heads, TokenAxis::Spatial)
    }
}

impl<T: Scalar> Module<T> for DepMhsa<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &Tensor<T>)) {
        self.q.for_each(&join(prefix, "q"), f);
        self.k.for_each(&join(prefix, "k"), f);
        for (i, v) in self.v.iter().enumerate() {
            v.for_each(&join(prefix, &format!("v.{i}")), f);
        }
        if let Some(p) = &self.pos {
            p.for_each(&join(prefix, "pos"), f);
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut Tensor<T>)) {
        self.q.for_each_mut(&join(prefix, "q"), f);
        self.k.for_each_mut(&join(prefix, "k"), f);
        for (i, v) in self.v.iter_mut().enumerate() {
            v.for_each_mut(&join(prefix, &format!("v.{i}")), f);
        }
        if let Some(p) = &mut self.pos {
            p.for_each_mut(&join(prefix, "pos"), f);
        }
    }
}
