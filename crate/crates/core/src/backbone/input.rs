use crate::error::{Result, TitError};

/// The last `K` observations of one environment, oldest first. Slots before
/// the episode start are zero-filled and marked invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsWindow {
    /// `K · obs_len` values.
    pub frames: Vec<f32>,
    pub valid: Vec<bool>,
}

impl ObsWindow {
    /// A `K = 1` window holding just `obs`.
    pub fn single(obs: &[f32]) -> Self {
        Self {
            frames: obs.to_vec(),
            valid: vec![true],
        }
    }

    pub fn context_len(&self) -> usize {
        self.valid.len()
    }

    /// Frame `k` (0 = oldest).
    pub fn frame(&self, k: usize) -> &[f32] {
        let len = self.frames.len() / self.valid.len();
        &self.frames[k * len..(k + 1) * len]
    }
}

/// `B` windows packed into contiguous buffers for a batched forward.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub(crate) obs: Vec<f32>,
    pub(crate) valid: Vec<bool>,
    pub(crate) batch: usize,
    pub(crate) context: usize,
    pub(crate) obs_len: usize,
}

impl WindowBatch {
    /// `obs` holds `batch · context · obs_len` values, `valid` one flag per
    /// frame. The newest frame of every window must be valid.
    pub fn new(
        obs: Vec<f32>,
        valid: Vec<bool>,
        batch: usize,
        context: usize,
        obs_len: usize,
    ) -> Result<Self> {
        if batch == 0 || context == 0 {
            return Err(TitError::EmptyContext { op: "window_batch" });
        }
        if valid.len() != batch * context || obs.len() != batch * context * obs_len {
            return Err(TitError::Shape {
                op: "window_batch",
                lhs: vec![obs.len(), valid.len()],
                rhs: vec![batch, context, obs_len],
            });
        }
        if let Some(b) = (0..batch).find(|b| !valid[b * context + context - 1]) {
            return Err(TitError::InvalidTensor(format!(
                "window {b}: the current observation slot is invalid"
            )));
        }
        Ok(Self {
            obs,
            valid,
            batch,
            context,
            obs_len,
        })
    }

    pub fn from_windows<'a>(
        windows: impl IntoIterator<Item = &'a ObsWindow>,
        context: usize,
        obs_len: usize,
    ) -> Result<Self> {
        let mut obs = Vec::new();
        let mut valid = Vec::new();
        let mut batch = 0;
        for w in windows {
            if w.valid.len() != context || w.frames.len() != context * obs_len {
                return Err(TitError::Shape {
                    op: "window_batch",
                    lhs: vec![w.frames.len(), w.valid.len()],
                    rhs: vec![context, obs_len],
                });
            }
            obs.extend_from_slice(&w.frames);
            valid.extend_from_slice(&w.valid);
            batch += 1;
        }
        Self::new(obs, valid, batch, context, obs_len)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn obs_len(&self) -> usize {
        self.obs_len
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    /// Frame `k` of window `b`.
    pub fn frame(&self, b: usize, k: usize) -> &[f32] {
        let start = (b * self.context + k) * self.obs_len;
        &self.obs[start..start + self.obs_len]
    }
}
