use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Batch;
use crate::env::Transition;
use crate::error::{MoanError, Result};
use crate::rng::SeededRng;

/// Whether a buffer holds real environment data (raw rewards) or model
/// rollouts (shaped rewards).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferRole {
    Env,
    Model,
}

/// Fixed-capacity ring of transitions; the oldest record is overwritten first.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    pub role: BufferRole,
    capacity: usize,
    records: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(role: BufferRole, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(MoanError::Config("replay buffer capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            role,
            capacity,
            records: Vec::with_capacity(capacity.min(1 << 20)),
            next: 0,
        })
    }

    /// Env-role buffer holding exactly `records`.
    pub fn from_records(records: Vec<Transition>) -> Result<Self> {
        let mut buf = ReplayBuffer::new(BufferRole::Env, records.len().max(1))?;
        buf.records = records;
        Ok(buf)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Transition] {
        &self.records
    }

    pub fn push(&mut self, t: Transition) {
        if self.records.len() < self.capacity {
            self.records.push(t);
        } else {
            self.records[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn extend(&mut self, items: impl IntoIterator<Item = Transition>) {
        for t in items {
            self.push(t);
        }
    }

    pub fn sample_indices(&self, n: usize, rng: &mut SeededRng) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.records.len())).collect()
    }
}

fn fill(batch: &mut Batch, row: usize, t: &Transition) {
    for (k, v) in t.s.iter().enumerate() {
        batch.states[[row, k]] = f64::from(*v);
    }
    for (k, v) in t.a.iter().enumerate() {
        batch.actions[[row, k]] = f64::from(*v);
    }
    for (k, v) in t.s_next.iter().enumerate() {
        batch.next_states[[row, k]] = f64::from(*v);
    }
    batch.rewards[row] = f64::from(t.r);
    batch.dones[row] = if t.terminal { 1.0 } else { 0.0 };
}

/// Number of env rows in a mixed batch: `⌈f · batch_size⌉`.
pub fn real_rows(batch_size: usize, real_fraction: f64) -> usize {
    // the small offset keeps exact products such as 0.1 · 30 from rounding up
    (((real_fraction * batch_size as f64) - 1e-9).ceil().max(0.0) as usize).min(batch_size)
}

/// `⌈f · B⌉` uniform draws (with replacement) from the env buffer followed by
/// the rest from the model buffer.
pub fn mixed_batch(
    env_buf: &ReplayBuffer,
    model_buf: &ReplayBuffer,
    batch_size: usize,
    real_fraction: f64,
    rng: &mut SeededRng,
) -> Result<Batch> {
    if batch_size == 0 {
        return Err(MoanError::Domain("batch_size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&real_fraction) {
        return Err(MoanError::Domain(format!("real fraction {real_fraction} outside [0, 1]")));
    }
    let n_real = real_rows(batch_size, real_fraction);
    let n_model = batch_size - n_real;
    if n_real > 0 && env_buf.is_empty() {
        return Err(MoanError::Domain("env buffer is empty".into()));
    }
    if n_model > 0 && model_buf.is_empty() {
        return Err(MoanError::Domain("model buffer is empty".into()));
    }
    let template = env_buf
        .records
        .first()
        .or_else(|| model_buf.records.first())
        .expect("one buffer is non-empty");
    let (d_s, d_a) = (template.s.len(), template.a.len());
    let mut batch = Batch {
        states: Array2::zeros((batch_size, d_s)),
        actions: Array2::zeros((batch_size, d_a)),
        rewards: Array1::zeros(batch_size),
        next_states: Array2::zeros((batch_size, d_s)),
        dones: Array1::zeros(batch_size),
    };
    for (row, i) in env_buf.sample_indices(n_real, rng).into_iter().enumerate() {
        fill(&mut batch, row, &env_buf.records[i]);
    }
    for (row, i) in model_buf.sample_indices(n_model, rng).into_iter().enumerate() {
        fill(&mut batch, n_real + row, &model_buf.records[i]);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn t(tag: f32) -> Transition {
        Transition {
            s: vec![tag],
            a: vec![0.0],
            s_next: vec![tag],
            r: tag,
            done: false,
            terminal: false,
        }
    }

    fn filled(role: BufferRole, tag: f32, n: usize) -> ReplayBuffer {
        let mut b = ReplayBuffer::new(role, n).unwrap();
        b.extend((0..n).map(|_| t(tag)));
        b
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(BufferRole::Model, 3).unwrap();
        b.extend((0..5).map(|i| t(i as f32)));
        assert_eq!(b.len(), 3);
        let rs: Vec<f32> = b.records().iter().map(|x| x.r).collect();
        assert_eq!(rs, vec![3.0, 4.0, 2.0]);
        assert!(ReplayBuffer::new(BufferRole::Env, 0).is_err());
    }

    #[test]
    fn mixing_counts() {
        let env = filled(BufferRole::Env, 1.0, 10);
        let model = filled(BufferRole::Model, -1.0, 10);
        let mut rng = seeded(0);
        let count_real = |b: &Batch| b.rewards.iter().filter(|&&r| r == 1.0).count();
        let b = mixed_batch(&env, &model, 256, 0.05, &mut rng).unwrap();
        assert_eq!(count_real(&b), 13);
        assert_eq!(b.len(), 256);
        let b = mixed_batch(&env, &model, 64, 1.0, &mut rng).unwrap();
        assert_eq!(count_real(&b), 64);
        let b = mixed_batch(&env, &model, 64, 0.0, &mut rng).unwrap();
        assert_eq!(count_real(&b), 0);
        assert_eq!(real_rows(30, 0.1), 3);
    }

    #[test]
    fn empty_required_buffer_is_an_error() {
        let env = filled(BufferRole::Env, 1.0, 4);
        let empty = ReplayBuffer::new(BufferRole::Model, 4).unwrap();
        let mut rng = seeded(1);
        assert!(mixed_batch(&env, &empty, 8, 0.5, &mut rng).is_err());
        assert!(mixed_batch(&env, &empty, 8, 1.0, &mut rng).is_ok());
        assert!(mixed_batch(&empty, &env, 8, 0.0, &mut rng).is_ok());
        assert!(mixed_batch(&empty, &env, 8, 0.2, &mut rng).is_err());
    }
}
