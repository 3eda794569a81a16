//! Runtime multiply-accumulate counter attached to a tape.
//!
//! Only matmul-like work is charged; softmax, normalization, activations
//! and additions are free under the MAC convention.

use std::collections::BTreeMap;

/// Per-layer cost buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    Qkv,
    AttnLogits,
    AttnValue,
    Proj,
    Ffn,
}

impl Component {
    fn slot(self) -> usize {
        match self {
            Component::Qkv => 0,
            Component::AttnLogits => 1,
            Component::AttnValue => 2,
            Component::Proj => 3,
            Component::Ffn => 4,
        }
    }
}

/// Where the next charged operation is booked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scope {
    #[default]
    Unscoped,
    Embed,
    Head,
    /// 1-based layer index and component.
    Layer(usize, Component),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub embed: u64,
    pub head: u64,
    pub unscoped: u64,
    /// layer -> [qkv, logits, value, proj, ffn]
    pub layers: BTreeMap<usize, [u64; 5]>,
}

impl MacCounter {
    pub fn charge(&mut self, scope: Scope, macs: u64) {
        match scope {
            Scope::Unscoped => self.unscoped += macs,
            Scope::Embed => self.embed += macs,
            Scope::Head => self.head += macs,
            Scope::Layer(l, c) => self.layers.entry(l).or_insert([0; 5])[c.slot()] += macs,
        }
    }

    pub fn layer(&self, layer: usize) -> [u64; 5] {
        self.layers.get(&layer).copied().unwrap_or([0; 5])
    }

    pub fn total(&self) -> u64 {
        self.embed
            + self.head
            + self.unscoped
            + self.layers.values().flat_map(|v| v.iter()).sum::<u64>()
    }
}
