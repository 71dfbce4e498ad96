//! Thresholded sparse deltas and the communication cost ledger.
//!
//! Wire format of a [`SparseDelta`], little-endian:
//!
//! ```text
//! dense_len: u64 | count: u64 | count x (index: u64, value: f64)
//! ```
//!
//! A set top bit on an index marks a replacement entry: the value is the
//! local number itself rather than a difference. Only zero-threshold deltas
//! use it, for entries where no f64 difference added to the reference lands
//! exactly on the local value.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::ParamVector;

/// Default element-wise drop threshold.
pub const DEFAULT_THRESHOLD: f64 = 2e-5;

const REPLACE_FLAG: u64 = 1 << 63;

#[derive(Clone, Debug, PartialEq)]
pub struct SparseDelta {
    indices: Vec<u64>,
    values: Vec<f64>,
    replaced: Vec<bool>,
    dense_len: u64,
    threshold: f64,
}

impl SparseDelta {
    pub fn empty(dense_len: usize) -> Self {
        Self {
            indices: Vec::new(),
            values: Vec::new(),
            replaced: Vec::new(),
            dense_len: dense_len as u64,
            threshold: 0.0,
        }
    }

    pub fn indices(&self) -> &[u64] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Whether entry `k` replaces the reference value instead of adding to it.
    pub fn is_replacement(&self, k: usize) -> bool {
        self.replaced[k]
    }

    pub fn dense_len(&self) -> usize {
        self.dense_len as usize
    }

    /// Threshold used to build the delta; 0 for decoded deltas.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Number of transmitted (index, value) entries.
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 16 * self.indices.len());
        out.extend_from_slice(&self.dense_len.to_le_bytes());
        out.extend_from_slice(&(self.indices.len() as u64).to_le_bytes());
        for ((i, v), r) in self.indices.iter().zip(&self.values).zip(&self.replaced) {
            let word = if *r { i | REPLACE_FLAG } else { *i };
            out.extend_from_slice(&word.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::CorruptedDelta(msg.to_string());
        let word = |at: usize| -> Result<[u8; 8]> {
            bytes
                .get(at..at + 8)
                .map(|s| s.try_into().expect("slice of eight"))
                .ok_or_else(|| corrupt("truncated record"))
        };
        let dense_len = u64::from_le_bytes(word(0)?);
        let count = u64::from_le_bytes(word(8)?);
        let expected = count
            .checked_mul(16)
            .and_then(|b| b.checked_add(16))
            .ok_or_else(|| corrupt("entry count overflows"))?;
        if bytes.len() as u64 != expected {
            return Err(corrupt("record length does not match entry count"));
        }
        let mut indices = Vec::with_capacity(count as usize);
        let mut values = Vec::with_capacity(count as usize);
        let mut replaced = Vec::with_capacity(count as usize);
        for k in 0..count as usize {
            let at = 16 + 16 * k;
            let raw = u64::from_le_bytes(word(at)?);
            let index = raw & !REPLACE_FLAG;
            let value = f64::from_le_bytes(word(at + 8)?);
            if index >= dense_len {
                return Err(corrupt("index beyond dense length"));
            }
            if indices.last().is_some_and(|&prev| prev >= index) {
                return Err(corrupt("indices not strictly increasing"));
            }
            if !value.is_finite() {
                return Err(corrupt("non-finite value"));
            }
            indices.push(index);
            values.push(value);
            replaced.push(raw & REPLACE_FLAG != 0);
        }
        Ok(Self {
            indices,
            values,
            replaced,
            dense_len,
            threshold: 0.0,
        })
    }
}

/// The difference `value` to send so that `reference + value` lands on
/// `local`. Starts from the rounded difference and walks a few ulps when
/// the addition would not reproduce `local`; `None` if no such value exists
/// nearby.
fn transmit_value(local: f64, reference: f64) -> Option<f64> {
    let d = local - reference;
    if reference + d == local {
        return Some(d);
    }
    let mut up = d;
    let mut down = d;
    for _ in 0..4 {
        up = up.next_up();
        if reference + up == local {
            return Some(up);
        }
        down = down.next_down();
        if reference + down == local {
            return Some(down);
        }
    }
    None
}

/// Entries where `|local - reference| >= threshold` (and non-zero).
pub fn diff(local: &ParamVector, reference: &ParamVector, threshold: f64) -> Result<SparseDelta> {
    if local.len() != reference.len() {
        return Err(invalid(format!(
            "local has {} entries, reference {}",
            local.len(),
            reference.len()
        )));
    }
    diff_slices(local.values(), reference.values(), threshold)
}

pub fn diff_slices(local: &[f64], reference: &[f64], threshold: f64) -> Result<SparseDelta> {
    if local.len() != reference.len() {
        return Err(invalid("delta operands differ in length"));
    }
    if !(threshold >= 0.0 && threshold.is_finite()) {
        return Err(invalid("threshold must be a non-negative number"));
    }
    let mut indices = Vec::new();
    let mut values = Vec::new();
    let mut replaced = Vec::new();
    for (i, (&l, &r)) in local.iter().zip(reference).enumerate() {
        if l == r {
            continue;
        }
        if (l - r).abs() >= threshold {
            indices.push(i as u64);
            match transmit_value(l, r) {
                Some(d) => {
                    values.push(d);
                    replaced.push(false);
                }
                None if threshold == 0.0 => {
                    values.push(l);
                    replaced.push(true);
                }
                None => {
                    values.push(l - r);
                    replaced.push(false);
                }
            }
        }
    }
    Ok(SparseDelta {
        indices,
        values,
        replaced,
        dense_len: local.len() as u64,
        threshold,
    })
}

/// `reference` with the delta added at its indices.
pub fn apply(reference: &ParamVector, delta: &SparseDelta) -> Result<ParamVector> {
    let values = apply_slice(reference.values(), delta)?;
    Ok(ParamVector::from_raw(reference.arch().clone(), values))
}

pub fn apply_slice(reference: &[f64], delta: &SparseDelta) -> Result<Vec<f64>> {
    if delta.dense_len() != reference.len() {
        return Err(Error::CorruptedDelta(format!(
            "delta is for {} entries, reference has {}",
            delta.dense_len(),
            reference.len()
        )));
    }
    let mut out = reference.to_vec();
    for ((&i, &v), &r) in delta.indices.iter().zip(&delta.values).zip(&delta.replaced) {
        let slot = out
            .get_mut(i as usize)
            .ok_or_else(|| Error::CorruptedDelta(format!("index {i} out of range")))?;
        if r {
            *slot = v;
        } else {
            *slot += v;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    S2C,
    C2S,
}

/// Entry counts for one round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundCost {
    pub round: usize,
    /// Server-to-client entries, helper payloads included.
    pub s2c_entries: usize,
    pub c2s_entries: usize,
    pub s2c_dense: usize,
    pub c2s_dense: usize,
    pub helper_entries: usize,
}

impl RoundCost {
    fn pct(sent: usize, dense: usize) -> f64 {
        if dense == 0 {
            0.0
        } else {
            100.0 * sent as f64 / dense as f64
        }
    }

    pub fn s2c_pct(&self) -> f64 {
        Self::pct(self.s2c_entries, self.s2c_dense)
    }

    pub fn c2s_pct(&self) -> f64 {
        Self::pct(self.c2s_entries, self.c2s_dense)
    }
}

/// Per-round transmitted entries against the dense baseline, where every
/// delta stands for one dense transfer of `dense_len` values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    rounds: Vec<RoundCost>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn entry(&mut self, round: usize) -> &mut RoundCost {
        if self.rounds.last().is_none_or(|r| r.round != round) {
            self.rounds.push(RoundCost {
                round,
                ..RoundCost::default()
            });
        }
        self.rounds.last_mut().unwrap()
    }

    /// Adds one batch of transfers. Helper payloads count as sent entries in
    /// the S2C direction but add nothing to the dense baseline.
    pub fn record_round(
        &mut self,
        round: usize,
        direction: Direction,
        deltas: &[SparseDelta],
        helper_deltas: Option<&[SparseDelta]>,
    ) {
        let sent: usize = deltas.iter().map(SparseDelta::nnz).sum();
        let dense: usize = deltas.iter().map(SparseDelta::dense_len).sum();
        let helpers: usize = helper_deltas
            .unwrap_or_default()
            .iter()
            .map(SparseDelta::nnz)
            .sum();
        let cost = self.entry(round);
        match direction {
            Direction::S2C => {
                cost.s2c_entries += sent + helpers;
                cost.s2c_dense += dense;
                cost.helper_entries += helpers;
            }
            Direction::C2S => {
                cost.c2s_entries += sent;
                cost.c2s_dense += dense;
            }
        }
    }

    /// Records a full dense transfer of `entries` values.
    pub fn record_dense(&mut self, round: usize, direction: Direction, entries: usize) {
        let cost = self.entry(round);
        match direction {
            Direction::S2C => {
                cost.s2c_entries += entries;
                cost.s2c_dense += entries;
            }
            Direction::C2S => {
                cost.c2s_entries += entries;
                cost.c2s_dense += entries;
            }
        }
    }

    /// Makes sure `round` has a record even when nothing was sent.
    pub fn touch(&mut self, round: usize) {
        self.entry(round);
    }

    pub fn rounds(&self) -> &[RoundCost] {
        &self.rounds
    }

    pub fn get(&self, round: usize) -> Option<&RoundCost> {
        self.rounds.iter().find(|r| r.round == round)
    }
}
