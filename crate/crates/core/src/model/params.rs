use std::collections::BTreeMap;
use std::fmt;

use super::Model;
use crate::nn::{Module, StateKind};
use crate::tensor::Scalar;

/// Learnable scalar counts grouped by top-level submodule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    /// `(stem | layer1..layer4 | head, count)` in network order.
    pub groups: Vec<(String, usize)>,
    /// Everything under an attention module, position embeddings included.
    pub attention: usize,
    pub position_embeddings: usize,
    pub total: usize,
}

pub fn count_parameters<T: Scalar>(model: &Model<T>) -> ParamReport {
    let mut groups: BTreeMap<usize, (String, usize)> = BTreeMap::new();
    let (mut attention, mut position_embeddings, mut total) = (0, 0, 0);
    model.for_each("", &mut |name, kind, t| {
        if kind != StateKind::Param {
            return;
        }
        let n = t.numel();
        total += n;
        let top = name.split('.').next().unwrap_or(name);
        let order = match top {
            "stem" => 0,
            "head" => 5,
            l => l.strip_prefix("layer").and_then(|i| i.parse().ok()).unwrap_or(6),
        };
        groups.entry(order).or_insert_with(|| (top.to_string(), 0)).1 += n;
        let parts: Vec<&str> = name.split('.').collect();
        if parts.get(2) == Some(&"attn") {
            attention += n;
            if parts.get(3) == Some(&"pos") {
                position_embeddings += n;
            }
        }
    });
    ParamReport { groups: groups.into_values().collect(), attention, position_embeddings, total }
}

fn millions(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22}{:>12}{:>10}", "module", "params", "")?;
        for (name, n) in &self.groups {
            writeln!(f, "{name:<22}{n:>12}{:>10}", millions(*n))?;
        }
        writeln!(f, "{:<22}{:>12}{:>10}", "  (attention)", self.attention, millions(self.attention))?;
        writeln!(f, "{:<22}{:>12}{:>10}", "  (position emb.)", self.position_embeddings, millions(self.position_embeddings))?;
        write!(f, "{:<22}{:>12}{:>10}", "total", self.total, millions(self.total))
    }
}
