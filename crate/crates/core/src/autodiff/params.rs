use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradient-gating class of a parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gate {
    FirstPass,
    EncoderStack,
    EncoderAttention,
    HypothesisEncoder,
    HypothesisAttention,
    FixedContextE,
    FixedContextB,
    SecondPassDecoder,
}

impl Gate {
    pub const ALL: [Gate; 8] = [
        Gate::FirstPass,
        Gate::EncoderStack,
        Gate::EncoderAttention,
        Gate::HypothesisEncoder,
        Gate::HypothesisAttention,
        Gate::FixedContextE,
        Gate::FixedContextB,
        Gate::SecondPassDecoder,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Gate> {
        Gate::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::UnknownGate(format!("code {code}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Gate::FirstPass => "first-pass",
            Gate::EncoderStack => "encoder-stack",
            Gate::EncoderAttention => "encoder-attention",
            Gate::HypothesisEncoder => "hypothesis-encoder",
            Gate::HypothesisAttention => "hypothesis-attention",
            Gate::FixedContextE => "fixed-context-e",
            Gate::FixedContextB => "fixed-context-b",
            Gate::SecondPassDecoder => "second-pass-decoder",
        }
    }
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Gate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Gate> {
        Gate::ALL
            .iter()
            .copied()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::UnknownGate(s.to_string()))
    }
}

/// Whether an utterance carries real audio with a human transcript, or
/// synthesized audio generated from text-only data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExampleKind {
    Paired,
    Unpaired,
}

/// Set of gates whose parameters must not move for one kind of example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GradMask {
    pub example_kind: ExampleKind,
    pub frozen: BTreeSet<Gate>,
}

impl GradMask {
    /// Joint-training gating: real audio never moves the fixed context
    /// vectors, synthesized audio never moves the encoder or its attention.
    pub fn joint(kind: ExampleKind) -> Self {
        let frozen = match kind {
            ExampleKind::Paired => [Gate::FixedContextE, Gate::FixedContextB].into(),
            ExampleKind::Unpaired => [Gate::EncoderStack, Gate::EncoderAttention].into(),
        };
        GradMask {
            example_kind: kind,
            frozen,
        }
    }

    /// No gating beyond what is added with [`GradMask::freeze`].
    pub fn open(kind: ExampleKind) -> Self {
        GradMask {
            example_kind: kind,
            frozen: BTreeSet::new(),
        }
    }

    pub fn freeze(mut self, gate: Gate) -> Self {
        self.frozen.insert(gate);
        self
    }

    /// Parses gate names, failing on any name that is not a gate.
    pub fn from_names<'a>(
        kind: ExampleKind,
        names: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let frozen = names
            .into_iter()
            .map(Gate::from_str)
            .collect::<Result<BTreeSet<_>>>()?;
        Ok(GradMask {
            example_kind: kind,
            frozen,
        })
    }

    pub fn is_frozen(&self, gate: Gate) -> bool {
        self.frozen.contains(&gate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub group: usize,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub name: String,
    pub gate: Gate,
    pub names: Vec<String>,
    pub params: Vec<Arc<Tensor>>,
}

/// All trainable tensors of a model, each owned by exactly one group.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add_group(&mut self, name: &str, gate: Gate) -> usize {
        self.groups.push(ParamGroup {
            name: name.to_string(),
            gate,
            names: Vec::new(),
            params: Vec::new(),
        });
        self.groups.len() - 1
    }

    pub fn add(&mut self, group: usize, name: &str, value: Tensor) -> ParamId {
        let g = &mut self.groups[group];
        g.names.push(name.to_string());
        g.params.push(Arc::new(value));
        ParamId {
            group,
            index: g.params.len() - 1,
        }
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, gate: Gate) -> impl Iterator<Item = &ParamGroup> {
        self.groups.iter().filter(move |g| g.gate == gate)
    }

    pub fn get(&self, id: ParamId) -> &Arc<Tensor> {
        &self.groups[id.group].params[id.index]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.groups[id.group].params[id.index])
    }

    pub fn gate_of(&self, id: ParamId) -> Gate {
        self.groups[id.group].gate
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.groups.iter().enumerate().flat_map(|(g, group)| {
            (0..group.params.len()).map(move |index| ParamId { group: g, index })
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.ids().map(|id| self.get(id).len()).sum()
    }

    /// Copies of every tensor of the groups with the given gate.
    pub fn snapshot(&self, gate: Gate) -> Vec<Tensor> {
        self.group(gate)
            .flat_map(|g| g.params.iter().map(|p| (**p).clone()))
            .collect()
    }

    pub fn replace_groups(&mut self, groups: Vec<ParamGroup>) -> Result<()> {
        if groups.len() != self.groups.len() {
            return Err(Error::Format(format!(
                "expected {} parameter groups, found {}",
                self.groups.len(),
                groups.len()
            )));
        }
        for (mine, theirs) in self.groups.iter().zip(&groups) {
            check_layout(mine, theirs)?;
        }
        for (mine, theirs) in self.groups.iter_mut().zip(groups) {
            mine.params = theirs.params;
        }
        Ok(())
    }

    /// Replaces only the groups present in `groups`, matched by name.
    pub fn replace_named(&mut self, groups: Vec<ParamGroup>) -> Result<()> {
        let mut slots = Vec::with_capacity(groups.len());
        for theirs in &groups {
            let i = self
                .groups
                .iter()
                .position(|g| g.name == theirs.name)
                .ok_or_else(|| Error::Format(format!("no parameter group named {}", theirs.name)))?;
            check_layout(&self.groups[i], theirs)?;
            slots.push(i);
        }
        for (i, theirs) in slots.into_iter().zip(groups) {
            self.groups[i].params = theirs.params;
        }
        Ok(())
    }
}

fn check_layout(mine: &ParamGroup, theirs: &ParamGroup) -> Result<()> {
    if mine.name != theirs.name || mine.gate != theirs.gate {
        return Err(Error::Format(format!(
            "group mismatch: expected {} ({}), found {} ({})",
            mine.name, mine.gate, theirs.name, theirs.gate
        )));
    }
    if mine.params.len() != theirs.params.len() {
        return Err(Error::Format(format!(
            "group {} holds {} tensors, checkpoint has {}",
            mine.name,
            mine.params.len(),
            theirs.params.len()
        )));
    }
    for (a, b) in mine.params.iter().zip(&theirs.params) {
        if a.shape() != b.shape() {
            return Err(Error::shape("checkpoint", a.shape(), b.shape()));
        }
    }
    Ok(())
}

/// Gradients aligned with a [`ParamStore`]; parameters never reached by
/// backward hold zeros.
#[derive(Clone, Debug)]
pub struct GradStore {
    grads: Vec<Vec<Tensor>>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradStore {
            grads: store
                .groups()
                .iter()
                .map(|g| g.params.iter().map(|p| Tensor::zeros(p.shape())).collect())
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.group][id.index]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.group][id.index]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        let dst = self.grads[id.group][id.index].data_mut();
        for (d, s) in dst.iter_mut().zip(g) {
            *d += s;
        }
    }

    pub fn add_assign(&mut self, other: &GradStore) {
        for (ga, gb) in self.grads.iter_mut().zip(&other.grads) {
            for (a, b) in ga.iter_mut().zip(gb) {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn num_groups(&self) -> usize {
        self.grads.len()
    }

    pub fn group_len(&self, group: usize) -> usize {
        self.grads[group].len()
    }

    pub fn is_zero(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}
