//! Maps per-slot bit budgets to transmission decisions.
//!
//! Progressive policies stream ordered units (packets or residual stages),
//! carrying partial bits across slots and flagging a decode event whenever a
//! unit completes. The non-progressive baseline is all-or-nothing: each slot
//! it either fits one whole quality level into that slot's budget or stalls.

use serde::{Deserialize, Serialize};

use crate::channel::SlotBudget;

/// Transmission policy kinds. Sizes live with the payload; these carry the
/// knobs that shape it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    /// Channel packets of `group_size` channels, up to `n_max` channels total.
    ProgressiveMasking { group_size: usize, n_max: usize },
    /// Residual-stage tokens, up to `m_max` stages.
    ProgressiveRvq { bpi: u8, m_max: usize },
    /// Ordered quality levels; exactly one is delivered, whole, in one slot.
    NonProgressive { quality_keeps: Vec<usize> },
}

impl Policy {
    pub fn is_progressive(&self) -> bool {
        !matches!(self, Policy::NonProgressive { .. })
    }
}

/// What happened in one slot of a plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotAction {
    pub slot: usize,
    pub bits_used: u64,
    /// Units whose final bit landed in this slot.
    pub units_completed: usize,
    /// True when a decode event fires at this slot.
    pub decodable: bool,
}

/// Outcome of planning one image against a budget stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionPlan {
    pub actions: Vec<SlotAction>,
    pub units_total: usize,
    pub units_delivered: usize,
    pub bits_sent: u64,
    /// Index of the delivered quality level (non-progressive only).
    pub level_delivered: Option<usize>,
}

impl TransmissionPlan {
    /// Slot of the first decode event, None if nothing ever decoded.
    pub fn first_decode_slot(&self) -> Option<usize> {
        self.actions.iter().find(|a| a.decodable).map(|a| a.slot)
    }

    /// Slot of the final unit delivery; None marks an incomplete plan.
    pub fn completion_slot(&self) -> Option<usize> {
        if self.units_delivered < self.units_total {
            return None;
        }
        self.actions.iter().rev().find(|a| a.decodable).map(|a| a.slot)
    }

    pub fn is_complete(&self) -> bool {
        self.units_delivered == self.units_total
    }

    /// Cumulative units delivered at each decode event, in slot order.
    pub fn decode_events(&self) -> Vec<(usize, usize)> {
        let mut acc = 0;
        self.actions
            .iter()
            .filter(|a| a.decodable)
            .map(|a| {
                acc += a.units_completed;
                (a.slot, acc)
            })
            .collect()
    }
}

/// Plans one image. `unit_bits` holds the ordered unit sizes: packet/stage
/// sizes for progressive policies, quality-level sizes (strictly increasing)
/// for the baseline. The budget stream bounds the horizon; running out of
/// budgets leaves the plan incomplete, which is a legal outcome.
pub fn plan_image(policy: &Policy, unit_bits: &[u64], budgets: &[SlotBudget]) -> TransmissionPlan {
    assert!(!unit_bits.is_empty(), "payload must be non-empty");
    match policy {
        Policy::ProgressiveMasking { .. } | Policy::ProgressiveRvq { .. } => {
            plan_progressive(unit_bits, budgets)
        }
        Policy::NonProgressive { .. } => plan_all_or_nothing(unit_bits, budgets),
    }
}

fn plan_progressive(unit_bits: &[u64], budgets: &[SlotBudget]) -> TransmissionPlan {
    let mut actions = Vec::new();
    let mut unit = 0usize;
    let mut sent_in_unit = 0u64;
    let mut bits_sent = 0u64;
    for (slot, budget) in budgets.iter().enumerate() {
        if unit >= unit_bits.len() {
            break;
        }
        let mut available = budget.n_bits;
        let mut used = 0u64;
        let mut completed = 0usize;
        while available > 0 && unit < unit_bits.len() {
            let need = unit_bits[unit] - sent_in_unit;
            let take = need.min(available);
            sent_in_unit += take;
            available -= take;
            used += take;
            if sent_in_unit == unit_bits[unit] {
                unit += 1;
                sent_in_unit = 0;
                completed += 1;
            }
        }
        bits_sent += used;
        if used > 0 || completed > 0 {
            actions.push(SlotAction {
                slot,
                bits_used: used,
                units_completed: completed,
                decodable: completed > 0,
            });
        }
    }
    TransmissionPlan {
        actions,
        units_total: unit_bits.len(),
        units_delivered: unit,
        bits_sent,
        level_delivered: None,
    }
}

fn plan_all_or_nothing(level_bits: &[u64], budgets: &[SlotBudget]) -> TransmissionPlan {
    debug_assert!(
        level_bits.windows(2).all(|w| w[0] < w[1]),
        "quality levels must strictly increase in size"
    );
    for (slot, budget) in budgets.iter().enumerate() {
        // Largest level that fits this slot whole; otherwise stall.
        let fit = level_bits
            .iter()
            .rposition(|&bits| bits <= budget.n_bits);
        if let Some(level) = fit {
            return TransmissionPlan {
                actions: vec![SlotAction {
                    slot,
                    bits_used: level_bits[level],
                    units_completed: 1,
                    decodable: true,
                }],
                units_total: 1,
                units_delivered: 1,
                bits_sent: level_bits[level],
                level_delivered: Some(level),
            };
        }
    }
    TransmissionPlan {
        actions: Vec::new(),
        units_total: 1,
        units_delivered: 0,
        bits_sent: 0,
        level_delivered: None,
    }
}

/// Plan export: JSON lines, one record per slot.
pub fn plan_to_jsonl(plan: &TransmissionPlan) -> String {
    let mut out = String::new();
    for a in &plan.actions {
        out.push_str(&serde_json::to_string(a).expect("slot action serializes"));
        out.push('\n');
    }
    out
}
