//! Class-balanced key memory.
//!
//! [`MultiQueue`] keeps one fixed-capacity FIFO per weather class, so once
//! every class has seen `L` keys the memory holds exactly `L` keys of each
//! class no matter how imbalanced the data stream is. The same type in
//! single-queue mode (one FIFO shared by all classes) and [`MemoryBank`]
//! (one slot per image, overwritten in place) exist for comparison.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ProjVector;

/// How keys are stored between steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryKind {
    MultiQueue,
    SingleQueue,
    MemoryBank,
}

/// Read/write interface shared by every key store.
pub trait KeyMemory {
    /// Inserts a key; stored keys are plain values and carry no gradient.
    fn push(&mut self, key: ProjVector) -> Result<()>;

    /// Every stored key (the contrastive denominator set), in a fixed order.
    fn all(&self) -> Vec<&ProjVector>;

    /// Stored keys that came from image `image_index`.
    fn positives(&self, image_index: u64) -> Vec<&ProjVector> {
        self.all().into_iter().filter(|k| k.image_index == image_index).collect()
    }

    /// Stored keys of weather class `class`.
    fn class(&self, class: usize) -> Result<Vec<&ProjVector>>;

    fn num_classes(&self) -> usize;

    fn dim(&self) -> usize;

    fn len(&self) -> usize {
        self.all().len()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiQueue {
    queues: Vec<VecDeque<ProjVector>>,
    capacity: usize,
    dim: usize,
    num_classes: usize,
}

impl MultiQueue {
    /// `num_classes` sub-queues of `capacity` keys each.
    pub fn new(num_classes: usize, capacity: usize, dim: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "a multi-queue needs at least 2 classes, got {num_classes}"
            )));
        }
        check_dims(capacity, dim)?;
        Ok(Self {
            queues: (0..num_classes).map(|_| VecDeque::with_capacity(capacity)).collect(),
            capacity,
            dim,
            num_classes,
        })
    }

    /// One FIFO of `capacity` keys shared by all `num_classes` classes.
    pub fn single(num_classes: usize, capacity: usize, dim: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        check_dims(capacity, dim)?;
        Ok(Self { queues: vec![VecDeque::with_capacity(capacity)], capacity, dim, num_classes })
    }

    pub fn is_single(&self) -> bool {
        self.queues.len() == 1
    }

    /// Capacity of each sub-queue.
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total_capacity(&self) -> usize {
        self.capacity * self.queues.len()
    }

    pub fn num_queues(&self) -> usize {
        self.queues.len()
    }

    pub fn fill_counts(&self) -> Vec<usize> {
        self.queues.iter().map(VecDeque::len).collect()
    }

    /// Keys of sub-queue `q`, oldest first.
    pub fn queue(&self, q: usize) -> impl Iterator<Item = &ProjVector> {
        self.queues[q].iter()
    }

    /// Rebuilds a queue from stored state; `keys` are in [`KeyMemory::all`]
    /// order and `fill_counts` says how many belong to each sub-queue.
    pub fn from_parts(
        num_classes: usize,
        capacity: usize,
        dim: usize,
        single: bool,
        fill_counts: &[usize],
        keys: Vec<ProjVector>,
    ) -> Result<Self> {
        let mut mq = if single {
            Self::single(num_classes, capacity, dim)?
        } else {
            Self::new(num_classes, capacity, dim)?
        };
        if fill_counts.len() != mq.queues.len() || fill_counts.iter().sum::<usize>() != keys.len() {
            return Err(Error::Checkpoint("queue fill counts do not match stored keys".into()));
        }
        let mut keys = keys.into_iter();
        for (q, &n) in fill_counts.iter().enumerate() {
            if n > capacity {
                return Err(Error::Checkpoint(format!("sub-queue {q} holds {n} > {capacity} keys")));
            }
            for key in keys.by_ref().take(n) {
                mq.check_key(&key)?;
                if !single && key.weather != q {
                    return Err(Error::Checkpoint(format!("class-{} key stored in sub-queue {q}", key.weather)));
                }
                mq.queues[q].push_back(key);
            }
        }
        Ok(mq)
    }

    fn check_key(&self, key: &ProjVector) -> Result<()> {
        if key.weather >= self.num_classes {
            return Err(Error::UnknownWeather { class: key.weather, num_classes: self.num_classes });
        }
        if key.vector.len() != self.dim {
            return Err(Error::Shape(format!("key has {} dims, queue stores {}", key.vector.len(), self.dim)));
        }
        Ok(())
    }
}

fn check_dims(capacity: usize, dim: usize) -> Result<()> {
    if capacity == 0 || dim == 0 {
        return Err(Error::Config(format!("queue length {capacity} and key dim {dim} must be positive")));
    }
    Ok(())
}

impl KeyMemory for MultiQueue {
    fn push(&mut self, key: ProjVector) -> Result<()> {
        self.check_key(&key)?;
        let q = if self.is_single() { 0 } else { key.weather };
        let queue = &mut self.queues[q];
        if queue.len() == self.capacity {
            queue.pop_front();
        }
        queue.push_back(key);
        Ok(())
    }

    fn all(&self) -> Vec<&ProjVector> {
        self.queues.iter().flatten().collect()
    }

    fn class(&self, class: usize) -> Result<Vec<&ProjVector>> {
        if class >= self.num_classes {
            return Err(Error::UnknownWeather { class, num_classes: self.num_classes });
        }
        Ok(if self.is_single() {
            self.queues[0].iter().filter(|k| k.weather == class).collect()
        } else {
            self.queues[class].iter().collect()
        })
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }
}

/// One slot per image, overwritten whenever that image produces a new key.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    slots: BTreeMap<u64, ProjVector>,
    dim: usize,
    num_classes: usize,
}

impl MemoryBank {
    pub fn new(num_classes: usize, dim: usize) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::Config("memory bank needs positive class count and key dim".into()));
        }
        Ok(Self { slots: BTreeMap::new(), dim, num_classes })
    }
}

impl KeyMemory for MemoryBank {
    fn push(&mut self, key: ProjVector) -> Result<()> {
        if key.weather >= self.num_classes {
            return Err(Error::UnknownWeather { class: key.weather, num_classes: self.num_classes });
        }
        if key.vector.len() != self.dim {
            return Err(Error::Shape(format!("key has {} dims, bank stores {}", key.vector.len(), self.dim)));
        }
        self.slots.insert(key.image_index, key);
        Ok(())
    }

    fn all(&self) -> Vec<&ProjVector> {
        self.slots.values().collect()
    }

    fn positives(&self, image_index: u64) -> Vec<&ProjVector> {
        self.slots.get(&image_index).into_iter().collect()
    }

    fn class(&self, class: usize) -> Result<Vec<&ProjVector>> {
        if class >= self.num_classes {
            return Err(Error::UnknownWeather { class, num_classes: self.num_classes });
        }
        Ok(self.slots.values().filter(|k| k.weather == class).collect())
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.slots.len()
    }
}

/// A key store chosen at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum KeyStore {
    Queue(MultiQueue),
    Bank(MemoryBank),
}

impl KeyStore {
    /// `capacity` is the per-class queue length. The single queue gets
    /// `num_classes * capacity` slots so all strategies hold the same number
    /// of keys once full.
    pub fn new(kind: MemoryKind, num_classes: usize, capacity: usize, dim: usize) -> Result<Self> {
        Ok(match kind {
            MemoryKind::MultiQueue => Self::Queue(MultiQueue::new(num_classes, capacity, dim)?),
            MemoryKind::SingleQueue => Self::Queue(MultiQueue::single(num_classes, num_classes * capacity, dim)?),
            MemoryKind::MemoryBank => Self::Bank(MemoryBank::new(num_classes, dim)?),
        })
    }

    pub fn kind(&self) -> MemoryKind {
        match self {
            Self::Queue(q) if q.is_single() => MemoryKind::SingleQueue,
            Self::Queue(_) => MemoryKind::MultiQueue,
            Self::Bank(_) => MemoryKind::MemoryBank,
        }
    }

    fn inner(&self) -> &dyn KeyMemory {
        match self {
            Self::Queue(q) => q,
            Self::Bank(b) => b,
        }
    }
}

impl KeyMemory for KeyStore {
    fn push(&mut self, key: ProjVector) -> Result<()> {
        match self {
            Self::Queue(q) => q.push(key),
            Self::Bank(b) => b.push(key),
        }
    }

    fn all(&self) -> Vec<&ProjVector> {
        self.inner().all()
    }

    fn positives(&self, image_index: u64) -> Vec<&ProjVector> {
        self.inner().positives(image_index)
    }

    fn class(&self, class: usize) -> Result<Vec<&ProjVector>> {
        self.inner().class(class)
    }

    fn num_classes(&self) -> usize {
        self.inner().num_classes()
    }

    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn len(&self) -> usize {
        self.inner().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(image_index: u64, weather: usize) -> ProjVector {
        ProjVector::new(vec![1.0, 0.0], image_index, weather)
    }

    fn indices(keys: &[&ProjVector]) -> Vec<u64> {
        keys.iter().map(|k| k.image_index).collect()
    }

    #[test]
    fn construction() {
        let mq = MultiQueue::new(4, 1024, 128).unwrap();
        assert_eq!(mq.total_capacity(), 4096);
        assert!(mq.is_empty());
        assert_eq!(mq.fill_counts(), vec![0; 4]);
        assert!(MultiQueue::new(2, 1, 8).is_ok());
        assert!(matches!(MultiQueue::new(1, 8, 8), Err(Error::Config(_))));
        assert!(MultiQueue::new(2, 0, 8).is_err());
        assert!(MultiQueue::new(2, 8, 0).is_err());
    }

    #[test]
    fn fifo_eviction_within_class() {
        let mut mq = MultiQueue::new(2, 2, 2).unwrap();
        for i in 0..3 {
            mq.push(key(i, 0)).unwrap();
        }
        assert_eq!(indices(&mq.class(0).unwrap()), vec![1, 2]);
        mq.push(key(9, 1)).unwrap();
        assert_eq!(mq.fill_counts(), vec![2, 1]);
    }

    #[test]
    fn capacity_clamp() {
        let mut mq = MultiQueue::new(4, 1024, 2).unwrap();
        for i in 0..5000 {
            mq.push(key(i, 0)).unwrap();
        }
        assert_eq!(mq.fill_counts()[0], 1024);
    }

    #[test]
    fn out_of_range_class() {
        let mut mq = MultiQueue::new(2, 2, 2).unwrap();
        assert!(matches!(mq.push(key(0, 2)), Err(Error::UnknownWeather { .. })));
        assert!(mq.class(2).is_err());
        assert!(mq.push(ProjVector::new(vec![1.0], 0, 0)).is_err());
    }

    #[test]
    fn all_and_positive_lookup() {
        let mut mq = MultiQueue::new(2, 2, 2).unwrap();
        assert!(mq.all().is_empty());
        mq.push(key(5, 0)).unwrap();
        mq.push(key(5, 1)).unwrap();
        mq.push(key(9, 1)).unwrap();
        assert_eq!(mq.all().len(), 3);
        assert_eq!(mq.positives(5).len(), 2);
        assert!(mq.positives(4).is_empty());
        // Evicts the class-1 key of image 5.
        mq.push(key(10, 1)).unwrap();
        assert_eq!(mq.positives(5).len(), 1);
        assert_eq!(mq.all().len(), 3);
    }

    #[test]
    fn class_view() {
        let mut mq = MultiQueue::new(3, 4, 2).unwrap();
        for i in 0..3 {
            mq.push(key(i, 0)).unwrap();
        }
        assert_eq!(mq.class(0).unwrap().len(), 3);
        assert!(mq.class(2).unwrap().is_empty());
        assert!(mq.class(0).unwrap().iter().all(|k| k.weather == 0));
    }

    #[test]
    fn single_queue_mixes_classes() {
        let mut sq = KeyStore::new(MemoryKind::SingleQueue, 3, 1, 2).unwrap();
        for (i, c) in [(0, 0), (1, 0), (2, 0), (3, 2)].into_iter() {
            sq.push(key(i, c)).unwrap();
        }
        assert_eq!(sq.kind(), MemoryKind::SingleQueue);
        assert_eq!(indices(&sq.all()), vec![1, 2, 3]);
        assert_eq!(indices(&sq.class(2).unwrap()), vec![3]);
    }

    #[test]
    fn memory_bank_overwrites_per_image() {
        let mut bank = MemoryBank::new(2, 2).unwrap();
        bank.push(key(3, 0)).unwrap();
        bank.push(ProjVector::new(vec![0.0, 1.0], 3, 0)).unwrap();
        bank.push(key(1, 1)).unwrap();
        assert_eq!(bank.len(), 2);
        assert_eq!(bank.positives(3)[0].vector, vec![0.0, 1.0]);
        assert_eq!(indices(&bank.all()), vec![1, 3]);
    }

    #[test]
    fn from_parts_round_trip() {
        let mut mq = MultiQueue::new(3, 2, 2).unwrap();
        for (i, c) in [(0, 0), (1, 2), (2, 0), (3, 0), (4, 1)].into_iter() {
            mq.push(key(i, c)).unwrap();
        }
        let keys: Vec<ProjVector> = mq.all().into_iter().cloned().collect();
        let back = MultiQueue::from_parts(3, 2, 2, false, &mq.fill_counts(), keys.clone()).unwrap();
        assert_eq!(back, mq);
        assert!(MultiQueue::from_parts(3, 2, 2, false, &[1, 1, 3], keys).is_err());
    }
}
