//! Time-ordered event queue with deterministic tie-breaking.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::Serialize;

/// Event categories. At equal timestamps lower-ranked kinds run first, so
/// work that frees resources is processed before new arrivals claim them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum EventKind {
    BatchEnd,
    TransferEnd,
    DecodeStep,
    RoleSwitchPhase,
    Arrival,
    Monitor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Payload {
    Arrival { request: usize },
    BatchEnd { instance: usize },
    TransferEnd { transfer: usize },
    DecodeStep { instance: usize },
    SwitchPhase { switch: usize },
    Monitor,
}

impl Payload {
    pub(crate) fn kind(&self) -> EventKind {
        match self {
            Payload::Arrival { .. } => EventKind::Arrival,
            Payload::BatchEnd { .. } => EventKind::BatchEnd,
            Payload::TransferEnd { .. } => EventKind::TransferEnd,
            Payload::DecodeStep { .. } => EventKind::DecodeStep,
            Payload::SwitchPhase { .. } => EventKind::RoleSwitchPhase,
            Payload::Monitor => EventKind::Monitor,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Scheduled {
    pub time: f64,
    pub seq: u64,
    pub payload: Payload,
}

impl Scheduled {
    fn key(&self) -> (f64, EventKind, u64) {
        (self.time, self.payload.kind(), self.seq)
    }
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// BinaryHeap is a max-heap; reverse so the earliest event pops first.
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        let (t0, k0, s0) = self.key();
        let (t1, k1, s1) = other.key();
        t0.total_cmp(&t1)
            .then(k0.cmp(&k1))
            .then(s0.cmp(&s1))
            .reverse()
    }
}

#[derive(Debug, Default)]
pub(crate) struct EventQueue {
    heap: BinaryHeap<Scheduled>,
    next_seq: u64,
    last_popped: f64,
}

impl EventQueue {
    pub fn push(&mut self, time: f64, payload: Payload) {
        debug_assert!(time.is_finite(), "event time must be finite");
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled { time, seq, payload });
    }

    pub fn pop(&mut self) -> Option<Scheduled> {
        let ev = self.heap.pop()?;
        assert!(
            ev.time >= self.last_popped,
            "event at {} popped after {}",
            ev.time,
            self.last_popped
        );
        self.last_popped = ev.time;
        Some(ev)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pops_in_time_then_kind_then_seq_order() {
        let mut q = EventQueue::default();
        q.push(2.0, Payload::Arrival { request: 0 });
        q.push(1.0, Payload::Arrival { request: 1 });
        q.push(1.0, Payload::BatchEnd { instance: 0 });
        q.push(1.0, Payload::Arrival { request: 2 });
        let order: Vec<Payload> = std::iter::from_fn(|| q.pop().map(|e| e.payload)).collect();
        assert_eq!(
            order,
            vec![
                Payload::BatchEnd { instance: 0 },
                Payload::Arrival { request: 1 },
                Payload::Arrival { request: 2 },
                Payload::Arrival { request: 0 },
            ]
        );
    }

    #[test]
    #[should_panic]
    fn popping_into_the_past_panics() {
        let mut q = EventQueue::default();
        q.push(5.0, Payload::Monitor);
        q.pop();
        q.push(1.0, Payload::Monitor);
        q.pop();
    }
}
