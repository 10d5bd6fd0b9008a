//! Fixed-capacity FIFO memory of compressed target states, plus the
//! dynamic-template update policy.
//!
//! The bank always holds exactly its capacity of units: it is seeded
//! with copies of the first frame's aggregation token, and every push
//! evicts the oldest unit. The payload is generic — training keeps live
//! graph handles in the bank so gradients flow across frames, while
//! inference stores detached tensors.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::Tensor;

/// One stored target state.
#[derive(Clone, Debug)]
pub struct MemoryUnit<T> {
    /// Compressed state (a `[1, dim]` row).
    pub payload: T,
    /// Frame the state was captured at.
    pub frame_index: usize,
}

/// FIFO bank of the most recent target states, always full.
#[derive(Clone, Debug)]
pub struct MemoryBank<T> {
    units: VecDeque<MemoryUnit<T>>,
    cap: usize,
}

impl<T: Clone> MemoryBank<T> {
    /// A bank of `cap` copies of the initial state (frame 0).
    pub fn init(initial: T, cap: usize) -> Result<Self> {
        if cap == 0 {
            return Err(Error::Contract("memory bank capacity must be at least 1".into()));
        }
        let units = (0..cap)
            .map(|_| MemoryUnit { payload: initial.clone(), frame_index: 0 })
            .collect();
        Ok(MemoryBank { units, cap })
    }

    /// Inserts the newest state, evicting the oldest.
    pub fn push(&mut self, payload: T, frame_index: usize) {
        self.units.pop_front();
        self.units.push_back(MemoryUnit { payload, frame_index });
        debug_assert_eq!(self.units.len(), self.cap);
    }

    /// Capacity (== current length, the bank is always full).
    pub fn capacity(&self) -> usize {
        self.cap
    }

    /// Units from oldest to newest.
    pub fn units(&self) -> impl Iterator<Item = &MemoryUnit<T>> {
        self.units.iter()
    }

    /// The most recently pushed unit.
    pub fn newest(&self) -> &MemoryUnit<T> {
        self.units.back().expect("bank is never empty")
    }
}

impl MemoryBank<Tensor> {
    /// Stacks the units into a `[cap, dim]` matrix, oldest first. This
    /// is the detached snapshot used at inference; training uses
    /// [`stack_units`] on live graph handles instead.
    pub fn snapshot(&self) -> Result<Tensor> {
        let dim = self.units[0].payload.numel();
        let mut data = Vec::with_capacity(self.cap * dim);
        for u in &self.units {
            if u.payload.numel() != dim {
                return Err(Error::Contract("memory units disagree on width".into()));
            }
            data.extend_from_slice(u.payload.data());
        }
        Tensor::new(vec![self.cap, dim], data)
    }

    /// Serializes the bank as checkpoint records under `prefix`:
    /// one `{prefix}/unit{i}` per payload (oldest first) plus a
    /// `{prefix}/frames` column of frame indices.
    pub fn to_records(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .units
            .iter()
            .enumerate()
            .map(|(i, u)| (format!("{prefix}/unit{i}"), u.payload.clone()))
            .collect();
        let frames: Vec<f64> = self.units.iter().map(|u| u.frame_index as f64).collect();
        let n = frames.len();
        out.push((format!("{prefix}/frames"), Tensor::new(vec![n, 1], frames).expect("n >= 1")));
        out
    }

    /// Rebuilds a bank from records written by [`MemoryBank::to_records`].
    pub fn from_records(records: &[(String, Tensor)], prefix: &str) -> Result<Self> {
        let frames_name = format!("{prefix}/frames");
        let frames = records
            .iter()
            .find(|(n, _)| *n == frames_name)
            .ok_or_else(|| Error::Format(format!("memory bank record {frames_name:?} missing")))?
            .1
            .data()
            .to_vec();
        let cap = frames.len();
        if cap == 0 {
            return Err(Error::Format("memory bank records describe an empty bank".into()));
        }
        let mut units = VecDeque::with_capacity(cap);
        for (i, &fidx) in frames.iter().enumerate() {
            let unit_name = format!("{prefix}/unit{i}");
            let payload = records
                .iter()
                .find(|(n, _)| *n == unit_name)
                .ok_or_else(|| {
                    Error::Format(format!("memory bank record {unit_name:?} missing"))
                })?
                .1
                .clone();
            units.push_back(MemoryUnit { payload, frame_index: fidx as usize });
        }
        Ok(MemoryBank { units, cap })
    }
}

/// Concatenates live bank payloads into a `[cap, dim]` graph value,
/// oldest first.
pub fn stack_units(g: &mut Graph, bank: &MemoryBank<Var>) -> Result<Var> {
    let rows: Vec<Var> = bank.units().map(|u| u.payload).collect();
    g.concat_rows(&rows)
}

/// When the dynamic template is refreshed during tracking: on frames
/// whose index is a multiple of `interval`, and only if the tracker's
/// confidence clears `threshold`.
#[derive(Clone, Copy, Debug)]
pub struct TemplatePolicy {
    /// Frame-index stride between refresh opportunities.
    pub interval: usize,
    /// Minimum confidence required to take the opportunity.
    pub threshold: f64,
}

impl Default for TemplatePolicy {
    fn default() -> Self {
        TemplatePolicy { interval: 25, threshold: 0.8 }
    }
}

impl TemplatePolicy {
    /// True iff this frame should replace the dynamic template.
    pub fn due(&self, frame_index: usize, confidence: f64) -> bool {
        frame_index % self.interval == 0 && confidence >= self.threshold
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: f64) -> Tensor {
        Tensor::matrix(1, 3, vec![v, v + 0.5, v - 0.5]).unwrap()
    }

    #[test]
    fn init_fills_to_capacity_with_frame_zero() {
        let bank = MemoryBank::init(row(1.0), 4).unwrap();
        assert_eq!(bank.capacity(), 4);
        assert_eq!(bank.units().count(), 4);
        assert!(bank.units().all(|u| u.frame_index == 0));
        assert!(bank.units().all(|u| u.payload == row(1.0)));
    }

    #[test]
    fn zero_capacity_is_rejected() {
        assert!(MemoryBank::init(row(0.0), 0).is_err());
    }

    #[test]
    fn push_evicts_oldest_and_keeps_length() {
        let mut bank = MemoryBank::init(row(0.0), 3).unwrap();
        for t in 1..=5 {
            bank.push(row(t as f64), t);
            assert_eq!(bank.units().count(), 3);
        }
        let frames: Vec<usize> = bank.units().map(|u| u.frame_index).collect();
        assert_eq!(frames, vec![3, 4, 5]);
        assert_eq!(bank.newest().frame_index, 5);
        assert_eq!(bank.newest().payload, row(5.0));
    }

    #[test]
    fn matches_reference_queue_across_random_ops() {
        use rand::Rng;
        use rand::SeedableRng;
        for seed in 0..50u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cap = rng.gen_range(1..6);
            let mut bank = MemoryBank::init(row(-1.0), cap).unwrap();
            // Reference: a plain vector holding the last `cap` items.
            let mut reference: Vec<(f64, usize)> = vec![(-1.0, 0); cap];
            for t in 1..rng.gen_range(2..40) {
                let v = rng.gen_range(-10.0..10.0);
                bank.push(row(v), t);
                reference.remove(0);
                reference.push((v, t));
                let got: Vec<(f64, usize)> =
                    bank.units().map(|u| (u.payload.data()[0], u.frame_index)).collect();
                assert_eq!(got, reference, "divergence at seed {seed} step {t}");
            }
        }
    }

    #[test]
    fn snapshot_stacks_oldest_first() {
        let mut bank = MemoryBank::init(row(0.0), 2).unwrap();
        bank.push(row(9.0), 7);
        let snap = bank.snapshot().unwrap();
        assert_eq!(snap.shape(), &[2, 3]);
        assert_eq!(snap.get2(0, 0), 0.0);
        assert_eq!(snap.get2(1, 0), 9.0);
    }

    #[test]
    fn records_round_trip() {
        let mut bank = MemoryBank::init(row(1.0), 3).unwrap();
        bank.push(row(2.0), 4);
        bank.push(row(3.0), 9);
        let records = bank.to_records("state/bank");
        let rebuilt = MemoryBank::from_records(&records, "state/bank").unwrap();
        let a: Vec<_> = bank.units().map(|u| (u.payload.clone(), u.frame_index)).collect();
        let b: Vec<_> = rebuilt.units().map(|u| (u.payload.clone(), u.frame_index)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn template_policy_truth_table() {
        let p = TemplatePolicy::default();
        assert!(p.due(25, 0.9));
        assert!(p.due(50, 0.8)); // threshold is inclusive
        assert!(!p.due(26, 0.99)); // off-interval
        assert!(!p.due(50, 0.79)); // under-confident
        assert!(!p.due(13, 0.95));
        let fast = TemplatePolicy { interval: 13, threshold: 0.5 };
        assert!(fast.due(13, 0.5));
        assert!(fast.due(26, 0.51));
        assert!(!fast.due(27, 0.99));
    }

    #[test]
    fn stack_units_concatenates_live_handles() {
        let mut g = Graph::new();
        let a = g.constant(row(1.0));
        let b = g.constant(row(2.0));
        let mut bank = MemoryBank::init(a, 2).unwrap();
        bank.push(b, 1);
        let stacked = stack_units(&mut g, &bank).unwrap();
        assert_eq!(g.shape(stacked), &[2, 3]);
        assert_eq!(g.value(stacked)[0], 1.0);
        assert_eq!(g.value(stacked)[3], 2.0);
    }
}
