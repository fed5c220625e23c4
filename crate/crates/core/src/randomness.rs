//! Addressable i.i.d. randomness.
//!
//! A [`RandomField`] maps an address `(vertex, time, stage, counter)` to a
//! uniform variate through a keyed mixing function. Nothing is stateful, so
//! the same address can be re-read any number of times in any order.

use serde::{Deserialize, Serialize};

use crate::lattice::{Vertex, MAX_DIM};

/// Stage tag reserved for the activity variates `A_{v,n}`.
pub const STAGE_ACTIVE: u32 = 0;
/// First stage tag available to couplings.
pub const STAGE_COUPLING: u32 = 16;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn absorb(h: u64, word: u64) -> u64 {
    mix64(h ^ word.wrapping_add(GOLDEN).wrapping_mul(0xd6e8_feb8_6659_fd93))
}

/// A location in the random field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Address {
    pub vertex: Vertex,
    pub time: u64,
    pub stage: u32,
    pub counter: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomField {
    seed: u64,
    shift: [i32; MAX_DIM],
}

impl RandomField {
    pub fn new(seed: u64) -> Self {
        RandomField {
            seed,
            shift: [0; MAX_DIM],
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for replica `id`.
    pub fn substream(&self, id: u64) -> RandomField {
        RandomField {
            seed: mix64(mix64(self.seed ^ GOLDEN) ^ mix64(id.wrapping_add(0x632b_e59b_d9b4_e019))),
            shift: self.shift,
        }
    }

    /// The field read at `v + by` when queried at `v`.
    pub fn shifted(&self, by: &Vertex) -> RandomField {
        let mut shift = self.shift;
        for (i, s) in shift.iter_mut().enumerate().take(by.dim()) {
            *s = s.wrapping_add(by.coord(i));
        }
        RandomField { seed: self.seed, shift }
    }

    #[inline]
    pub fn bits(&self, vertex: &Vertex, time: u64, stage: u32, counter: u32) -> u64 {
        let mut h = mix64(self.seed ^ (vertex.dim() as u64) << 56);
        for i in 0..vertex.dim() {
            let c = vertex.coord(i).wrapping_add(self.shift[i]);
            h = absorb(h, c as u32 as u64);
        }
        h = absorb(h, time);
        h = absorb(h, (stage as u64) << 32 | counter as u64);
        h
    }

    /// Uniform variate in [0, 1) with 53 random bits.
    #[inline]
    pub fn uniform(&self, vertex: &Vertex, time: u64, stage: u32, counter: u32) -> f64 {
        (self.bits(vertex, time, stage, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_at(&self, a: &Address) -> f64 {
        self.uniform(&a.vertex, a.time, a.stage, a.counter)
    }

    #[inline]
    pub fn bernoulli(&self, vertex: &Vertex, time: u64, stage: u32, counter: u32, p: f64) -> bool {
        self.uniform(vertex, time, stage, counter) < p
    }
}
