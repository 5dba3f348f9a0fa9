//! Pseudo-counting of state–action pairs.
//!
//! A [`Quantizer`] turns a pair into a [`LabelSequence`]; the sequence is
//! serialized to bytes and tracked in a [`CountingBloomFilter`]. Every
//! insert bumps `e` counters addressed by independent hashes, and a query
//! returns the minimum of those counters, so the filter can over-count on
//! collisions but never under-counts.

use std::io::{Read, Write};

use ndarray::ArrayView2;

use crate::error::{check_dim, Error, Result};
use crate::hash::{hash_bytes, mix64};
use crate::nn::{read_u32, read_u64};

const FILTER_MAGIC: &[u8; 4] = b"VQCB";
const FILTER_VERSION: u32 = 1;

/// Default filter sizing: 2²⁰ counters addressed by 4 hashes.
pub const DEFAULT_FILTER_COUNTERS: usize = 1 << 20;
pub const DEFAULT_FILTER_HASHES: usize = 4;
pub const DEFAULT_FILTER_SEED: u64 = 0x5EED_CBF0_u64;

/// The discrete identity of a state–action pair: one label per codebook.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSequence {
    labels: Vec<u16>,
}

impl LabelSequence {
    /// Validates every label against `codebook_size`, which may not exceed
    /// 2¹⁶ so labels serialize as fixed 16-bit words.
    pub fn new(labels: &[usize], codebook_size: usize) -> Result<Self> {
        if codebook_size == 0 || codebook_size > 1 << 16 {
            return Err(Error::Config(format!(
                "codebook size {codebook_size} does not fit 16-bit labels"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= codebook_size) {
            return Err(Error::Config(format!(
                "label {bad} out of range for codebook size {codebook_size}"
            )));
        }
        Ok(Self {
            labels: labels.iter().map(|&l| l as u16).collect(),
        })
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().map(|&l| usize::from(l))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fixed-width encoding: 16-bit little-endian per label.
    pub fn serialize(&self) -> Vec<u8> {
        self.labels.iter().flat_map(|l| l.to_le_bytes()).collect()
    }
}

/// Maps a state–action pair to its label sequence.
pub trait Quantizer {
    fn labels(&self, state: &[f64], action: &[f64]) -> Result<LabelSequence>;

    /// Labels for each row of a batch.
    fn labels_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<LabelSequence>> {
        check_dim("label batch rows", states.nrows(), actions.nrows())?;
        states
            .rows()
            .into_iter()
            .zip(actions.rows())
            .map(|(s, a)| self.labels(&s.to_vec(), &a.to_vec()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountingBloomFilter {
    counters: Vec<u32>,
    seeds: Vec<u64>,
}

impl CountingBloomFilter {
    pub fn new(num_counters: usize, num_hashes: usize, seed: u64) -> Result<Self> {
        if num_counters == 0 || num_hashes == 0 {
            return Err(Error::Config("filter needs at least one counter and one hash".into()));
        }
        let seeds = (0..num_hashes as u64)
            .map(|i| mix64(seed ^ mix64(i.wrapping_add(1))))
            .collect();
        Ok(Self {
            counters: vec![0; num_counters],
            seeds,
        })
    }

    pub fn with_defaults() -> Self {
        Self::new(DEFAULT_FILTER_COUNTERS, DEFAULT_FILTER_HASHES, DEFAULT_FILTER_SEED)
            .expect("default sizing is valid")
    }

    pub fn num_counters(&self) -> usize {
        self.counters.len()
    }

    pub fn num_hashes(&self) -> usize {
        self.seeds.len()
    }

    pub fn counters(&self) -> &[u32] {
        &self.counters
    }

    /// Counter index addressed by each hash, in seed order.
    pub fn indices(&self, key: &[u8]) -> impl Iterator<Item = usize> + '_ {
        let n = self.counters.len() as u128;
        let key = key.to_vec();
        self.seeds
            .iter()
            .map(move |&seed| ((u128::from(hash_bytes(seed, &key)) * n) >> 64) as usize)
    }

    pub fn insert(&mut self, key: &[u8]) {
        let idx: Vec<usize> = self.indices(key).collect();
        for i in idx {
            self.counters[i] = self.counters[i].saturating_add(1);
        }
    }

    pub fn query(&self, key: &[u8]) -> u32 {
        self.indices(key)
            .map(|i| self.counters[i])
            .min()
            .expect("at least one hash")
    }

    pub fn insert_labels(&mut self, labels: &LabelSequence) {
        self.insert(&labels.serialize());
    }

    pub fn query_labels(&self, labels: &LabelSequence) -> u32 {
        self.query(&labels.serialize())
    }

    /// Snapshot: magic, version, counter count, hash count, seeds, then the
    /// raw counters, all little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(FILTER_MAGIC)?;
        w.write_all(&FILTER_VERSION.to_le_bytes())?;
        w.write_all(&(self.counters.len() as u64).to_le_bytes())?;
        w.write_all(&(self.seeds.len() as u32).to_le_bytes())?;
        for s in &self.seeds {
            w.write_all(&s.to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(self.counters.len() * 4);
        for c in &self.counters {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FILTER_MAGIC {
            return Err(Error::Format("bad filter magic".into()));
        }
        let version = read_u32(r)?;
        if version != FILTER_VERSION {
            return Err(Error::Format(format!("unsupported filter version {version}")));
        }
        let n = read_u64(r)? as usize;
        let e = read_u32(r)? as usize;
        if n == 0 || e == 0 || n > 1 << 32 || e > 64 {
            return Err(Error::Format(format!("implausible filter sizing {n} × {e}")));
        }
        let seeds = (0..e).map(|_| read_u64(r)).collect::<Result<Vec<_>>>()?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let counters = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { counters, seeds })
    }
}

/// Pseudo-count `n(s, a)`; when `insert` is set the pair is counted first.
pub fn pseudo_count<Q: Quantizer + ?Sized>(
    quantizer: &Q,
    filter: &mut CountingBloomFilter,
    state: &[f64],
    action: &[f64],
    insert: bool,
) -> Result<u32> {
    let labels = quantizer.labels(state, action)?;
    if insert {
        filter.insert_labels(&labels);
    }
    Ok(filter.query_labels(&labels))
}

/// Read-only pseudo-count against a frozen filter.
pub fn query_count<Q: Quantizer + ?Sized>(
    quantizer: &Q,
    filter: &CountingBloomFilter,
    state: &[f64],
    action: &[f64],
) -> Result<u32> {
    Ok(filter.query_labels(&quantizer.labels(state, action)?))
}

/// A quantizer paired with a filter: the dataset is inserted once and
/// minibatches are then queried against it.
#[derive(Debug, Clone)]
pub struct PseudoCounter<Q> {
    quantizer: Q,
    filter: CountingBloomFilter,
}

impl<Q: Quantizer> PseudoCounter<Q> {
    pub fn new(quantizer: Q, filter: CountingBloomFilter) -> Self {
        Self { quantizer, filter }
    }

    pub fn quantizer(&self) -> &Q {
        &self.quantizer
    }

    pub fn filter(&self) -> &CountingBloomFilter {
        &self.filter
    }

    pub fn insert_batch(&mut self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<()> {
        for labels in self.quantizer.labels_batch(states, actions)? {
            self.filter.insert_labels(&labels);
        }
        Ok(())
    }

    pub fn counts(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self
            .quantizer
            .labels_batch(states, actions)?
            .iter()
            .map(|l| f64::from(self.filter.query_labels(l)))
            .collect())
    }
}
