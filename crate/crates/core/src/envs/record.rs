//! Episode record files.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic     4 bytes  "TITE"
//! version   u8       1
//! env_len   u16, env id (UTF-8)
//! ndim      u8, dims u32 × ndim       observation shape
//! actions   u32                       size of the discrete action set
//! seed      u64
//! record*   len u32 (bytes that follow), episode u32, step u32,
//!           action u32, reward f32, flags u8 (bit 0 terminated,
//!           bit 1 truncated), obs f32 × product(dims)
//! ```
//!
//! The observation stored with a record is the one the action was chosen
//! from.

use std::io::{ErrorKind, Read, Write};

use crate::backbone::ObsShape;
use crate::error::{Result, TitError};

pub const MAGIC: &[u8; 4] = b"TITE";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeHeader {
    pub env_id: String,
    pub obs_shape: ObsShape,
    pub action_count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f32>,
    pub action: usize,
    pub reward: f32,
    pub terminated: bool,
    pub truncated: bool,
}

/// One episode, in step order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f32> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn total_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward as f64).sum()
    }
}

pub struct EpisodeWriter<W: Write> {
    inner: W,
    obs_len: usize,
}

impl<W: Write> EpisodeWriter<W> {
    pub fn new(mut inner: W, header: &EpisodeHeader) -> Result<Self> {
        inner.write_all(MAGIC)?;
        inner.write_all(&[VERSION])?;
        let id = header.env_id.as_bytes();
        let id_len =
            u16::try_from(id.len()).map_err(|_| TitError::Format("env id too long".into()))?;
        inner.write_all(&id_len.to_le_bytes())?;
        inner.write_all(id)?;
        let dims = header.obs_shape.dims();
        inner.write_all(&[dims.len() as u8])?;
        for d in dims {
            inner.write_all(&(d as u32).to_le_bytes())?;
        }
        inner.write_all(&(header.action_count as u32).to_le_bytes())?;
        inner.write_all(&header.seed.to_le_bytes())?;
        Ok(Self {
            inner,
            obs_len: header.obs_shape.len(),
        })
    }

    pub fn write(&mut self, episode: u32, step: u32, t: &Transition) -> Result<()> {
        if t.obs.len() != self.obs_len {
            return Err(TitError::Shape {
                op: "episode_record",
                lhs: vec![t.obs.len()],
                rhs: vec![self.obs_len],
            });
        }
        let mut buf = Vec::with_capacity(17 + 4 * t.obs.len());
        buf.extend_from_slice(&episode.to_le_bytes());
        buf.extend_from_slice(&step.to_le_bytes());
        buf.extend_from_slice(&(t.action as u32).to_le_bytes());
        buf.extend_from_slice(&t.reward.to_le_bytes());
        buf.push(u8::from(t.terminated) | (u8::from(t.truncated) << 1));
        for v in &t.obs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.inner.write_all(&(buf.len() as u32).to_le_bytes())?;
        self.inner.write_all(&buf)?;
        Ok(())
    }

    pub fn write_trajectory(&mut self, episode: u32, traj: &Trajectory) -> Result<()> {
        for (i, t) in traj.steps.iter().enumerate() {
            self.write(episode, i as u32, t)?;
        }
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

fn take<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Reads a whole record file, grouping records into episodes by their
/// episode number (in file order).
pub fn read_episodes<R: Read>(r: &mut R) -> Result<(EpisodeHeader, Vec<Trajectory>)> {
    if &take::<_, 4>(r)? != MAGIC {
        return Err(TitError::Format("not an episode file (bad magic)".into()));
    }
    let [version] = take::<_, 1>(r)?;
    if version != VERSION {
        return Err(TitError::Format(format!(
            "unsupported episode file version {version}"
        )));
    }
    let id_len = u16::from_le_bytes(take(r)?) as usize;
    let mut id = vec![0u8; id_len];
    r.read_exact(&mut id)?;
    let env_id =
        String::from_utf8(id).map_err(|_| TitError::Format("env id is not UTF-8".into()))?;
    let [ndim] = take::<_, 1>(r)?;
    let mut dims = Vec::new();
    for _ in 0..ndim {
        dims.push(u32::from_le_bytes(take(r)?) as usize);
    }
    let obs_shape = match dims[..] {
        [dim] => ObsShape::Array { dim },
        [height, width, channels] => ObsShape::Image {
            height,
            width,
            channels,
        },
        _ => {
            return Err(TitError::Format(format!(
                "unsupported observation rank {ndim}"
            )))
        }
    };
    let action_count = u32::from_le_bytes(take(r)?) as usize;
    let seed = u64::from_le_bytes(take(r)?);
    let header = EpisodeHeader {
        env_id,
        obs_shape,
        action_count,
        seed,
    };

    let obs_len = obs_shape.len();
    let mut episodes: Vec<(u32, Trajectory)> = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_le_bytes(len) as usize;
        if len != 17 + 4 * obs_len {
            return Err(TitError::Format(format!(
                "record of {len} bytes, expected {}",
                17 + 4 * obs_len
            )));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().expect("4 bytes"));
        let episode = u32_at(0);
        let action = u32_at(8) as usize;
        let reward = f32::from_le_bytes(buf[12..16].try_into().expect("4 bytes"));
        let flags = buf[16];
        let obs = buf[17..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if action >= action_count {
            return Err(TitError::Format(format!(
                "action {action} outside the action set"
            )));
        }
        let t = Transition {
            obs,
            action,
            reward,
            terminated: flags & 1 != 0,
            truncated: flags & 2 != 0,
        };
        match episodes.last_mut() {
            Some((e, traj)) if *e == episode => traj.steps.push(t),
            _ => episodes.push((episode, Trajectory { steps: vec![t] })),
        }
    }
    Ok((header, episodes.into_iter().map(|(_, t)| t).collect()))
}
