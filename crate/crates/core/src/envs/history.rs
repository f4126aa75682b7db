use std::collections::VecDeque;

use crate::backbone::ObsWindow;
use crate::error::{Result, TitError};

/// FIFO of the last `K` observations of one episode.
#[derive(Clone, Debug)]
pub struct ObservationHistory {
    capacity: usize,
    obs_len: usize,
    frames: VecDeque<Vec<f32>>,
}

impl ObservationHistory {
    pub fn new(capacity: usize, obs_len: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(TitError::config(
                "context_len",
                "history capacity must be at least 1",
            ));
        }
        Ok(Self {
            capacity,
            obs_len,
            frames: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Forgets everything, e.g. at an episode boundary.
    pub fn clear(&mut self) {
        self.frames.clear();
    }

    /// Appends the newest observation, evicting the oldest at capacity.
    pub fn push(&mut self, obs: &[f32]) -> Result<()> {
        if obs.len() != self.obs_len {
            return Err(TitError::Shape {
                op: "history_push",
                lhs: vec![obs.len()],
                rhs: vec![self.obs_len],
            });
        }
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(obs.to_vec());
        Ok(())
    }

    /// Oldest-first window of `K` slots; missing leading slots are zeros.
    pub fn window(&self) -> ObsWindow {
        let missing = self.capacity - self.frames.len();
        let mut frames = vec![0.0; missing * self.obs_len];
        for f in &self.frames {
            frames.extend_from_slice(f);
        }
        let valid = (0..self.capacity).map(|i| i >= missing).collect();
        ObsWindow { frames, valid }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_push_fills_the_last_slot() {
        let mut h = ObservationHistory::new(4, 1).unwrap();
        h.push(&[1.0]).unwrap();
        let w = h.window();
        assert_eq!(w.valid, vec![false, false, false, true]);
        assert_eq!(w.frames, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn keeps_the_newest_k() {
        let mut h = ObservationHistory::new(4, 1).unwrap();
        for i in 1..=5 {
            h.push(&[i as f32]).unwrap();
        }
        assert_eq!(h.window().frames, vec![2.0, 3.0, 4.0, 5.0]);
        assert_eq!(h.window(), h.window());
    }

    #[test]
    fn rejects_wrong_dims() {
        let mut h = ObservationHistory::new(2, 3).unwrap();
        assert!(h.push(&[1.0]).is_err());
        assert!(ObservationHistory::new(0, 3).is_err());
    }

    proptest! {
        #[test]
        fn exact_fifo(k in 1usize..8, items in proptest::collection::vec(-10.0f32..10.0, 0..20)) {
            let mut h = ObservationHistory::new(k, 1).unwrap();
            for &x in &items {
                h.push(&[x]).unwrap();
            }
            let w = h.window();
            prop_assert_eq!(w.valid.len(), k);
            prop_assert_eq!(w.valid.iter().filter(|&&v| !v).count(), k.saturating_sub(items.len()));
            let kept = &items[items.len().saturating_sub(k)..];
            let tail = &w.frames[k - kept.len()..];
            prop_assert_eq!(tail, kept);
            if !items.is_empty() {
                prop_assert!(w.valid[k - 1]);
            }
        }
    }
}
