//! Synchronous round-based message bus with exact byte metering.
//!
//! Robots enqueue messages during a round; the bus delivers them at the
//! start of the next round to every receiver still within communication
//! range (closed ball on Euclidean distance), and drops the rest. Every
//! attempt is logged with its byte cost so a run's bandwidth usage can be
//! reconstructed exactly; totals count delivered traffic only.
//!
//! Byte costs are priced per item from a fixed tariff rather than from
//! serialized payload sizes, so the accounting is independent of in-memory
//! representation. One kilobyte is 1024 bytes and per-message costs round
//! to the nearest byte.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Bus parameters. `round_length` maps synchronous rounds onto trajectory
/// time for schedulers that interleave motion and messaging; the bus itself
/// only needs the range.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub comm_range: f64,
    pub round_length: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            comm_range: 30.0,
            round_length: 1.0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.comm_range > 0.0) {
            return Err(Error::InvalidConfig {
                message: format!("comm_range must be positive, got {}", self.comm_range),
            });
        }
        if !(self.round_length > 0.0) {
            return Err(Error::InvalidConfig {
                message: format!("round_length must be positive, got {}", self.round_length),
            });
        }
        Ok(())
    }
}

/// Robot pairs (low id first) within communication range of each other:
/// closed ball, so the boundary counts as connected.
pub fn connectivity(
    positions: &BTreeMap<u8, Vector3<f64>>,
    comm_range: f64,
) -> BTreeSet<(u8, u8)> {
    let mut pairs = BTreeSet::new();
    for (&a, pa) in positions {
        for (&b, pb) in positions.range((
            std::ops::Bound::Excluded(a),
            std::ops::Bound::Unbounded,
        )) {
            if (pa - pb).norm() <= comm_range {
                pairs.insert((a, b));
            }
        }
    }
    pairs
}

/// Payload categories with distinct per-item prices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CostClass {
    /// Compact place descriptor.
    Descriptor,
    /// Keypoint geometry (3D points plus camera metadata) for one
    /// verification exchange.
    KeypointInfo,
    /// Local feature descriptors for one verification exchange.
    KeypointDescriptors,
    /// One pose estimate (rotation blocks and separator poses during
    /// optimization are priced at this rate too).
    PoseEstimate,
    /// One relative-pose loop-closure measurement.
    LoopClosureMeasurement,
}

impl CostClass {
    pub fn label(self) -> &'static str {
        match self {
            CostClass::Descriptor => "descriptor",
            CostClass::KeypointInfo => "keypoint_info",
            CostClass::KeypointDescriptors => "keypoint_descriptors",
            CostClass::PoseEstimate => "pose_estimate",
            CostClass::LoopClosureMeasurement => "loop_closure",
        }
    }
}

/// Per-item prices in kilobytes (1 kB = 1024 B).
#[derive(Debug, Clone, PartialEq)]
pub struct MessageCosts {
    pub descriptor_kb: f64,
    pub keypoint_info_kb: f64,
    pub keypoint_descriptors_kb: f64,
    pub pose_estimate_kb: f64,
    pub loop_closure_kb: f64,
}

impl Default for MessageCosts {
    fn default() -> Self {
        Self {
            descriptor_kb: 1.00,
            keypoint_info_kb: 34.51,
            keypoint_descriptors_kb: 25.00,
            pose_estimate_kb: 0.34,
            loop_closure_kb: 0.34,
        }
    }
}

impl MessageCosts {
    pub fn kb_per_item(&self, class: CostClass) -> f64 {
        match class {
            CostClass::Descriptor => self.descriptor_kb,
            CostClass::KeypointInfo => self.keypoint_info_kb,
            CostClass::KeypointDescriptors => self.keypoint_descriptors_kb,
            CostClass::PoseEstimate => self.pose_estimate_kb,
            CostClass::LoopClosureMeasurement => self.loop_closure_kb,
        }
    }

    /// Byte cost of `item_count` items of one class, rounded to the
    /// nearest byte.
    pub fn bytes(&self, class: CostClass, item_count: u64) -> u64 {
        (item_count as f64 * self.kb_per_item(class) * 1024.0).round() as u64
    }
}

/// One message in flight or delivered.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope<P> {
    pub sender: u8,
    pub receiver: u8,
    pub class: CostClass,
    pub item_count: u64,
    pub payload: P,
    seq: u64,
}

/// Audit entry for one transmission attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionRecord {
    pub round_sent: u64,
    pub round_delivered: u64,
    pub sender: u8,
    pub receiver: u8,
    pub class: CostClass,
    pub item_count: u64,
    pub bytes: u64,
    pub delivered: bool,
}

#[derive(Debug, Clone)]
pub struct Bus<P> {
    round: u64,
    comm_range: f64,
    costs: MessageCosts,
    pending: Vec<Envelope<P>>,
    log: Vec<TransmissionRecord>,
    next_seq: u64,
}

impl<P> Bus<P> {
    pub fn new(comm_range: f64, costs: MessageCosts) -> Self {
        Self {
            round: 0,
            comm_range,
            costs,
            pending: Vec::new(),
            log: Vec::new(),
            next_seq: 0,
        }
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn costs(&self) -> &MessageCosts {
        &self.costs
    }

    /// Enqueues a message in the current round for delivery at the next.
    pub fn send(&mut self, sender: u8, receiver: u8, class: CostClass, item_count: u64, payload: P) {
        debug_assert_ne!(sender, receiver, "robot messaging itself");
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.push(Envelope {
            sender,
            receiver,
            class,
            item_count,
            payload,
            seq,
        });
    }

    /// Advances to the next round and resolves every pending message
    /// against `positions` (robot locations at delivery time). Returns the
    /// delivered envelopes ordered by (sender, receiver, send sequence).
    pub fn advance(&mut self, positions: &BTreeMap<u8, Vector3<f64>>) -> Result<Vec<Envelope<P>>> {
        self.round += 1;
        let mut drained = std::mem::take(&mut self.pending);
        drained.sort_by_key(|e| (e.sender, e.receiver, e.seq));

        let mut delivered = Vec::with_capacity(drained.len());
        for envelope in drained {
            let locate = |robot: u8| {
                positions.get(&robot).copied().ok_or(Error::KeyMismatch {
                    message: format!("no position for robot {robot} at round {}", self.round),
                })
            };
            let gap = locate(envelope.sender)? - locate(envelope.receiver)?;
            let in_range = gap.norm() <= self.comm_range;
            self.log.push(TransmissionRecord {
                round_sent: self.round - 1,
                round_delivered: self.round,
                sender: envelope.sender,
                receiver: envelope.receiver,
                class: envelope.class,
                item_count: envelope.item_count,
                bytes: self.costs.bytes(envelope.class, envelope.item_count),
                delivered: in_range,
            });
            if in_range {
                delivered.push(envelope);
            }
        }
        Ok(delivered)
    }

    pub fn log(&self) -> &[TransmissionRecord] {
        &self.log
    }

    /// Total bytes actually delivered so far.
    pub fn delivered_bytes(&self) -> u64 {
        self.log.iter().filter(|r| r.delivered).map(|r| r.bytes).sum()
    }

    /// Delivered bytes restricted to one cost class.
    pub fn delivered_bytes_of(&self, class: CostClass) -> u64 {
        self.log
            .iter()
            .filter(|r| r.delivered && r.class == class)
            .map(|r| r.bytes)
            .sum()
    }

    /// Bytes of messages that were dropped for being out of range.
    pub fn dropped_bytes(&self) -> u64 {
        self.log.iter().filter(|r| !r.delivered).map(|r| r.bytes).sum()
    }
}
