use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::attention::{AttentionConfig, AttentionKind, PositionMode, Variant};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Backbone {
    /// Factored spatial-then-temporal convolutions.
    R2plus1d,
    /// Full 3×3×3 convolutions with a 3×7×7 stem.
    R3d,
}

impl Backbone {
    pub fn name(self) -> &'static str {
        match self {
            Backbone::R2plus1d => "r2p1d",
            Backbone::R3d => "r3d",
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "r2p1d" | "r2plus1d" => Ok(Backbone::R2plus1d),
            "r3d" => Ok(Backbone::R3d),
            other => Err(Error::Config(format!("unknown backbone {other:?}; expected r2p1d or r3d"))),
        }
    }
}

/// Full description of a network; everything needed to rebuild it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub backbone: Backbone,
    /// Stem width followed by the four layer widths.
    pub widths: [usize; 5],
    pub blocks_per_layer: usize,
    pub attention: AttentionConfig,
    /// Layers (3 and/or 4) whose blocks carry the attention module.
    pub attention_layers: Vec<usize>,
    /// Input extents `(L, H, W)`; position embeddings are sized from it.
    pub input: [usize; 3],
    pub num_classes: usize,
}

pub const RESNET18_WIDTHS: [usize; 5] = [64, 64, 128, 256, 512];
pub const DEFAULT_INPUT: [usize; 3] = [12, 128, 128];

impl ModelSpec {
    /// Plain backbone without attention.
    pub fn baseline(backbone: Backbone) -> Self {
        Self {
            backbone,
            widths: RESNET18_WIDTHS,
            blocks_per_layer: 2,
            attention: AttentionConfig::new(AttentionKind::None),
            attention_layers: Vec::new(),
            input: DEFAULT_INPUT,
            num_classes: 1,
        }
    }

    /// (2+1)D backbone with DEP-MHSA in layers 3 and 4.
    pub fn mtsnet(variant: Variant) -> Self {
        let mut attention = AttentionConfig::new(AttentionKind::DepMhsa);
        attention.variant = variant;
        Self::baseline(Backbone::R2plus1d).with_attention(attention)
    }

    /// Sets the attention module; a kind other than `none` goes into
    /// layers 3 and 4.
    pub fn with_attention(mut self, attention: AttentionConfig) -> Self {
        self.attention_layers = if attention.kind == AttentionKind::None { Vec::new() } else { vec![3, 4] };
        self.attention = attention;
        self
    }

    /// Divides every width by `d`.
    pub fn narrowed(mut self, d: usize) -> Self {
        self.widths = self.widths.map(|w| (w / d.max(1)).max(1));
        self
    }

    pub fn with_input(mut self, input: [usize; 3]) -> Self {
        self.input = input;
        self
    }

    pub fn has_attention(&self, layer: usize) -> bool {
        self.attention.kind != AttentionKind::None && self.attention_layers.contains(&layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::Config("widths must be positive".into()));
        }
        if self.blocks_per_layer == 0 {
            return Err(Error::Config("each layer needs at least one block".into()));
        }
        if self.num_classes != 1 {
            return Err(Error::Config("only a single binary logit is supported".into()));
        }
        if self.input.contains(&0) {
            return Err(Error::Config("input extents must be positive".into()));
        }
        if let Some(&l) = self.attention_layers.iter().find(|&&l| l != 3 && l != 4) {
            return Err(Error::Config(format!("attention may only be placed in layers 3 and 4, not {l}")));
        }
        if self.attention.kind == AttentionKind::None && !self.attention_layers.is_empty() {
            return Err(Error::Config("attention layers given without an attention kind".into()));
        }
        self.attention.validate()?;
        for &l in &self.attention_layers {
            let c = self.widths[l];
            let uses_heads = matches!(self.attention.kind, AttentionKind::DepMhsa | AttentionKind::Mhsa3d | AttentionKind::Mhsa2p1d);
            if uses_heads && !c.is_multiple_of(self.attention.heads) {
                return Err(Error::Config(format!("layer {l} width {c} is not divisible by {} heads", self.attention.heads)));
            }
        }
        Ok(())
    }

    /// `key = value` lines, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("backbone".into(), self.backbone.to_string()),
            ("widths".into(), join(&self.widths)),
            ("blocks_per_layer".into(), self.blocks_per_layer.to_string()),
            ("input".into(), join(&self.input)),
            ("num_classes".into(), self.num_classes.to_string()),
            ("attention.kind".into(), self.attention.kind.to_string()),
            ("attention.variant".into(), self.attention.variant.to_string()),
            ("attention.n_head".into(), self.attention.heads.to_string()),
            ("attention.position".into(), self.attention.position.to_string()),
            ("attention.layers".into(), join(&self.attention_layers)),
        ]
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| pairs.get(k).ok_or_else(|| Error::Config(format!("missing key {k}")));
        let list = |k: &str| -> Result<Vec<usize>> {
            let v = get(k)?;
            if v.trim().is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad number in {k}: {s:?}")))).collect()
        };
        let num = |k: &str| -> Result<usize> { get(k)?.trim().parse().map_err(|_| Error::Config(format!("bad number for {k}"))) };
        let widths: [usize; 5] =
            list("widths")?.try_into().map_err(|_| Error::Config("widths needs five entries".into()))?;
        let input: [usize; 3] = list("input")?.try_into().map_err(|_| Error::Config("input needs three entries".into()))?;
        let kind: AttentionKind = get("attention.kind")?.parse()?;
        let attention = AttentionConfig {
            kind,
            variant: get("attention.variant")?.parse()?,
            heads: num("attention.n_head")?,
            position: get("attention.position")?.parse::<PositionMode>()?,
        };
        let spec = Self {
            backbone: get("backbone")?.parse()?,
            widths,
            blocks_per_layer: num("blocks_per_layer")?,
            attention,
            attention_layers: list("attention.layers")?,
            input,
            num_classes: num("num_classes")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-stage `(L, H, W)` extents for a given input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapePlan {
    pub input: [usize; 3],
    /// Stem, then layers 1–4.
    pub stages: [[usize; 3]; 5],
}

/// Stride of the first block of each layer.
pub const LAYER_STRIDES: [[usize; 3]; 4] = [[1, 1, 1], [1, 2, 2], [2, 2, 2], [2, 2, 2]];

impl ShapePlan {
    pub fn new(input: [usize; 3]) -> Self {
        let mut stages = [input; 5];
        for (i, s) in LAYER_STRIDES.iter().enumerate() {
            let prev = stages[i];
            // k = 3, p = 1: floor((n − 1) / s) + 1
            stages[i + 1] = [0, 1, 2].map(|a| (prev[a] - 1) / s[a] + 1);
        }
        Self { input, stages }
    }

    pub fn layer(&self, layer: usize) -> [usize; 3] {
        self.stages[layer]
    }
}
