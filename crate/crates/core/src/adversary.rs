//! Byzantine strategies: what an activated Byzantine process publishes.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{min_neighbor_height, Configuration, ProcessState};
use crate::topology::{ProcessId, Topology};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryKind {
    Silent,
    FakeRoot,
    Oscillator,
    RandomWriter,
    MinUnderCutter,
}

impl AdversaryKind {
    pub const ALL: [AdversaryKind; 5] = [
        AdversaryKind::Silent,
        AdversaryKind::FakeRoot,
        AdversaryKind::Oscillator,
        AdversaryKind::RandomWriter,
        AdversaryKind::MinUnderCutter,
    ];
}

impl fmt::Display for AdversaryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdversaryKind::Silent => "silent",
            AdversaryKind::FakeRoot => "fake_root",
            AdversaryKind::Oscillator => "oscillator",
            AdversaryKind::RandomWriter => "random_writer",
            AdversaryKind::MinUnderCutter => "min_under_cutter",
        })
    }
}

impl std::str::FromStr for AdversaryKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AdversaryKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| format!("unknown adversary `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AdversaryStrategy {
    pub kind: AdversaryKind,
    pub seed: u64,
    /// Upper bound on every published height.
    pub height_cap: u32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("process {0} is not Byzantine")]
pub struct NotByzantine(pub ProcessId);

impl AdversaryStrategy {
    pub fn new(kind: AdversaryKind, seed: u64, height_cap: u32) -> Self {
        AdversaryStrategy {
            kind,
            seed,
            height_cap,
        }
    }

    /// Default cap of `4n`.
    pub fn with_default_cap(kind: AdversaryKind, seed: u64, n: usize) -> Self {
        Self::new(kind, seed, 4 * n as u32)
    }

    /// Silent Byzantines never write, so they are never worth activating.
    pub fn is_silent(&self) -> bool {
        self.kind == AdversaryKind::Silent
    }

    /// State published by `b` when activated at `step_index`; `None` means no write.
    /// A pure function of its arguments, including for the randomized strategy.
    pub fn byz_write(
        &self,
        topo: &Topology,
        config: &Configuration,
        b: ProcessId,
        step_index: u64,
    ) -> Result<Option<ProcessState>, NotByzantine> {
        if b.0 >= topo.n() || !topo.is_byzantine(b) {
            return Err(NotByzantine(b));
        }
        let cap = self.height_cap;
        let write = match self.kind {
            AdversaryKind::Silent => None,
            AdversaryKind::FakeRoot => Some(ProcessState::ROOT),
            AdversaryKind::Oscillator => Some(ProcessState {
                parent: None,
                height: if step_index.is_multiple_of(2) { 0 } else { cap },
            }),
            AdversaryKind::RandomWriter => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(step_index);
                rng.set_word_pos(16 * b.0 as u128);
                let nbrs = topo.neighbors(b);
                let slot = rng.gen_range(0..=nbrs.len());
                Some(ProcessState {
                    parent: nbrs.get(slot).copied(),
                    height: rng.gen_range(0..=cap),
                })
            }
            AdversaryKind::MinUnderCutter => {
                let min = min_neighbor_height(topo, config, b).unwrap_or(0);
                Some(ProcessState {
                    parent: None,
                    height: min.saturating_sub(1).min(cap),
                })
            }
        };
        Ok(write)
    }
}
