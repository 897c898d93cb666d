//! Saved-for-backward byte accounting.
//!
//! Entries sharing a key describe one physical buffer referenced by several
//! nodes. Each key is charged once: to the entry flagged as owner, or to the
//! first entry with that key when none is.

mod analytic;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::fmt::to_json_string;

pub use analytic::{analytic_block, AnalyticBlock, Arch, BlockSpec, Gating, OperatorUsage, Scheme};

/// What a saved buffer holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferRole {
    Input,
    Output,
    Codes,
    Sigma,
    LowRank,
    LossState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub node_id: usize,
    pub node_kind: String,
    pub role: BufferRole,
    pub bits_per_element: u32,
    pub num_elements: u64,
    pub shared_key: Option<u64>,
    /// Charged for its shared key.
    pub owner: bool,
}

impl LedgerEntry {
    pub fn new(node_id: usize, node_kind: &str, role: BufferRole, bits_per_element: u32, num_elements: u64) -> Self {
        Self { node_id, node_kind: node_kind.to_string(), role, bits_per_element, num_elements, shared_key: None, owner: true }
    }

    /// Marks this entry as a reference to (`owner = false`) or the holder of a shared buffer.
    pub fn shared(mut self, key: u64, owner: bool) -> Self {
        self.shared_key = Some(key);
        self.owner = owner;
        self
    }

    pub fn bytes(&self) -> u64 {
        (u64::from(self.bits_per_element) * self.num_elements).div_ceil(8)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ledger {
    entries: Vec<LedgerEntry>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Indices of the entries that are actually charged.
    fn charged(&self) -> Vec<bool> {
        let owned: HashSet<u64> =
            self.entries.iter().filter(|e| e.owner).filter_map(|e| e.shared_key).collect();
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .map(|e| match e.shared_key {
                None => true,
                Some(k) if owned.contains(&k) => e.owner && seen.insert(k),
                Some(k) => seen.insert(k),
            })
            .collect()
    }

    /// Deduplicated bytes of every entry of node `node_id`.
    pub fn node_bytes(&self, node_id: usize) -> u64 {
        self.entries
            .iter()
            .zip(self.charged())
            .filter(|(e, c)| *c && e.node_id == node_id)
            .map(|(e, _)| e.bytes())
            .sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().zip(self.charged()).filter(|(_, c)| *c).map(|(e, _)| e.bytes()).sum()
    }

    pub fn report(&self) -> MemoryReport {
        let charged = self.charged();
        let mut per_kind = BTreeMap::new();
        let mut shared_savings = 0;
        for (e, c) in self.entries.iter().zip(charged) {
            let slot = per_kind.entry(e.node_kind.clone()).or_insert(0);
            if c {
                *slot += e.bytes();
            } else {
                shared_savings += e.bytes();
            }
        }
        MemoryReport::from_parts(per_kind, shared_savings)
    }
}

/// Per-kind byte totals with percentages of the overall total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub per_kind: BTreeMap<String, u64>,
    pub shared_savings: u64,
    pub total: u64,
    pub percent: BTreeMap<String, f64>,
}

impl MemoryReport {
    pub fn from_parts(per_kind: BTreeMap<String, u64>, shared_savings: u64) -> Self {
        let total: u64 = per_kind.values().sum();
        let percent = if total == 0 {
            BTreeMap::new()
        } else {
            per_kind.iter().map(|(k, &v)| (k.clone(), 100.0 * v as f64 / total as f64)).collect()
        };
        Self { per_kind, shared_savings, total, percent }
    }

    pub fn bytes_of(&self, kind: &str) -> u64 {
        self.per_kind.get(kind).copied().unwrap_or(0)
    }

    pub fn percent_of(&self, kind: &str) -> f64 {
        self.percent.get(kind).copied().unwrap_or(0.0)
    }

    pub fn to_json(&self) -> String {
        to_json_string(self).expect("report is always serializable")
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let width = self.per_kind.keys().map(String::len).chain(["shared savings".len()]).max().unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>14}  {:>8}", "kind", "bytes", "percent");
        for (k, v) in &self.per_kind {
            let _ = writeln!(out, "{k:<width$}  {v:>14}  {:>8.2}", self.percent_of(k));
        }
        let total_pct = if self.total == 0 { 0.0 } else { 100.0 };
        let _ = writeln!(out, "{:<width$}  {:>14}  {total_pct:>8.2}", "total", self.total);
        let _ = writeln!(out, "{:<width$}  {:>14}", "shared savings", self.shared_savings);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_ledger() {
        let l = Ledger::new();
        assert_eq!(l.total_bytes(), 0);
        let r = l.report();
        assert_eq!((r.total, r.shared_savings), (0, 0));
        assert!(r.percent.is_empty());
    }

    #[test]
    fn bytes_round_up() {
        assert_eq!(LedgerEntry::new(0, "regelu2", BufferRole::Codes, 2, 5).bytes(), 2);
        assert_eq!(LedgerEntry::new(0, "gelu", BufferRole::Input, 16, 5).bytes(), 10);
    }

    #[test]
    fn shared_key_is_charged_to_owner_once() {
        let mut l = Ledger::new();
        l.record(LedgerEntry::new(0, "ms_layernorm", BufferRole::Output, 16, 100).shared(7, false));
        l.record(LedgerEntry::new(0, "ms_layernorm", BufferRole::Sigma, 32, 10));
        l.record(LedgerEntry::new(1, "linear", BufferRole::Input, 16, 100).shared(7, true));
        assert_eq!(l.total_bytes(), 200 + 40);
        assert_eq!((l.node_bytes(0), l.node_bytes(1)), (40, 200));
        let r = l.report();
        assert_eq!(r.shared_savings, 200);
        assert_eq!(r.bytes_of("linear"), 200);
        assert_eq!(r.bytes_of("ms_layernorm"), 40);
        let sum: f64 = r.percent.values().sum();
        assert!((sum - 100.0).abs() < 1e-9);
        assert!(r.to_table().contains("shared savings"));
        assert!(r.to_json().starts_with("{\n  \"per_kind\""));
    }

    #[test]
    fn ownerless_key_is_charged_to_first_reference() {
        let mut l = Ledger::new();
        l.record(LedgerEntry::new(0, "a", BufferRole::Output, 16, 8).shared(1, false));
        l.record(LedgerEntry::new(1, "b", BufferRole::Input, 16, 8).shared(1, false));
        assert_eq!((l.node_bytes(0), l.node_bytes(1), l.total_bytes()), (16, 0, 16));
    }

    proptest! {
        #[test]
        fn totals_are_monotone_and_keys_counted_once(
            entries in prop::collection::vec((0u32..4, 1u64..1000, prop::option::of(0u64..5), any::<bool>()), 0..30)
        ) {
            let mut l = Ledger::new();
            let mut prev = 0;
            for (i, (bits, n, key, owner)) in entries.into_iter().enumerate() {
                let bits = [2, 16, 32, 64][bits as usize];
                let mut e = LedgerEntry::new(i, "x", BufferRole::Input, bits, n);
                if let Some(k) = key {
                    // One physical buffer per key: same size for every reference.
                    e = LedgerEntry::new(i, "x", BufferRole::Input, 16, 100 * (k + 1)).shared(k, owner);
                }
                l.record(e);
                let total = l.total_bytes();
                prop_assert!(total >= prev);
                prev = total;
                let charged = l.charged();
                for k in 0..5 {
                    let hits = l.entries().iter().zip(&charged).filter(|(e, c)| **c && e.shared_key == Some(k)).count();
                    let present = l.entries().iter().any(|e| e.shared_key == Some(k));
                    prop_assert_eq!(hits, usize::from(present));
                }
                let r = l.report();
                prop_assert_eq!(r.total, l.total_bytes());
            }
        }
    }
}
