//! Capacity-bounded replay memory filled by reservoir sampling.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, Sample, IMAGE_LEN};
use crate::error::{Error, Result};
use crate::nn::{read_exact, read_f64, read_u32, read_u64};

pub const BUFFER_MAGIC: &[u8; 8] = b"PDGCLBUF";
const BUFFER_VERSION: u32 = 1;

/// Reservoir memory. After `n` insertions every inserted sample is held with
/// probability `min(1, capacity / n)`.
///
/// Insertion and batch draws share the buffer's own generator, so the
/// buffer's random stream is independent of everything else in a run.
#[derive(Debug, Clone)]
pub struct ReservoirBuffer {
    capacity: usize,
    items: Vec<Sample>,
    seen_count: u64,
    rng: ChaCha8Rng,
}

impl ReservoirBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ReservoirBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            seen_count: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn seen_count(&self) -> u64 {
        self.seen_count
    }

    pub fn items(&self) -> &[Sample] {
        &self.items
    }

    pub fn insert(&mut self, sample: Sample) {
        if self.items.len() < self.capacity {
            self.items.push(sample);
        } else if self.capacity > 0 {
            let j = self.rng.random_range(0..=self.seen_count);
            if (j as usize) < self.capacity {
                self.items[j as usize] = sample;
            }
        }
        self.seen_count += 1;
    }

    pub fn insert_batch(&mut self, batch: &Batch) {
        for s in batch.samples() {
            self.insert(s);
        }
    }

    /// `k` samples drawn uniformly with replacement.
    pub fn sample_batch(&mut self, k: usize) -> Result<Batch> {
        if self.items.is_empty() {
            return Err(Error::MemoryEmpty);
        }
        let n = self.items.len();
        let picks: Vec<usize> = (0..k).map(|_| self.rng.random_range(0..n)).collect();
        Ok(Batch::from_samples(picks.iter().map(|&i| &self.items[i])))
    }

    /// Everything currently stored, in slot order.
    pub fn full_contents(&self) -> Batch {
        if self.items.is_empty() {
            return Batch::empty(IMAGE_LEN);
        }
        Batch::from_samples(&self.items)
    }

    /// Serialize the buffer, generator position included, so a resumed run
    /// continues the exact same random stream.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BUFFER_MAGIC)?;
        w.write_all(&BUFFER_VERSION.to_le_bytes())?;
        w.write_all(&(self.capacity as u64).to_le_bytes())?;
        w.write_all(&self.seen_count.to_le_bytes())?;
        w.write_all(&self.rng.get_seed())?;
        w.write_all(&self.rng.get_stream().to_le_bytes())?;
        w.write_all(&self.rng.get_word_pos().to_le_bytes())?;
        w.write_all(&(self.items.len() as u64).to_le_bytes())?;
        let width = self.items.first().map_or(0, |s| s.pixels.len());
        w.write_all(&(width as u32).to_le_bytes())?;
        for s in &self.items {
            w.write_all(&(s.label as u32).to_le_bytes())?;
            w.write_all(&s.env_id.to_le_bytes())?;
            for p in &s.pixels {
                w.write_all(&p.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "buffer magic")?;
        if &magic != BUFFER_MAGIC {
            return Err(Error::Checkpoint("bad buffer magic".into()));
        }
        if read_u32(&mut r)? != BUFFER_VERSION {
            return Err(Error::Checkpoint("unsupported buffer version".into()));
        }
        let capacity = read_u64(&mut r)? as usize;
        let seen_count = read_u64(&mut r)?;
        let mut seed = [0u8; 32];
        read_exact(&mut r, &mut seed, "rng seed")?;
        let stream = read_u64(&mut r)?;
        let mut pos = [0u8; 16];
        read_exact(&mut r, &mut pos, "rng position")?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(u128::from_le_bytes(pos));
        let len = read_u64(&mut r)? as usize;
        let width = read_u32(&mut r)? as usize;
        if len > capacity || len as u64 != seen_count.min(capacity as u64) {
            return Err(Error::Checkpoint(format!(
                "inconsistent buffer: {len} items, capacity {capacity}, seen {seen_count}"
            )));
        }
        let mut items = Vec::with_capacity(len);
        for _ in 0..len {
            let label = read_u32(&mut r)? as usize;
            let mut env = [0u8; 4];
            read_exact(&mut r, &mut env, "env id")?;
            let pixels = (0..width).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            items.push(Sample {
                pixels,
                label,
                env_id: i32::from_le_bytes(env),
            });
        }
        Ok(ReservoirBuffer {
            capacity,
            items,
            seen_count,
            rng,
        })
    }
}
