mod common;

use common::*;
use mqcl::model::ProjVector;
use mqcl::multiqueue::{KeyMemory, KeyStore, MemoryKind, MultiQueue};
use proptest::prelude::*;

#[test]
fn matches_list_reference_on_random_sequences() {
    for seed in 0..300 {
        queue_sequence_check(seed).unwrap();
    }
}

#[test]
fn single_queue_is_one_fifo_over_all_classes() {
    let mut q = MultiQueue::single(3, 4, 2).unwrap();
    for serial in 0..6u64 {
        q.push(ProjVector::new(serial_vector(serial), serial, (serial % 3) as usize)).unwrap();
    }
    let images: Vec<u64> = q.all().iter().map(|k| k.image_index).collect();
    assert_eq!(images, [2, 3, 4, 5]);
    let class1: Vec<u64> = q.class(1).unwrap().iter().map(|k| k.image_index).collect();
    assert_eq!(class1, [4]);
}

#[test]
fn imbalanced_stream_starves_minority_in_single_queue_only() {
    let mut multi = KeyStore::new(MemoryKind::MultiQueue, 2, 4, 2).unwrap();
    let mut single = KeyStore::new(MemoryKind::SingleQueue, 2, 4, 2).unwrap();
    for serial in 0..40u64 {
        let class = usize::from(serial % 20 == 0);
        let key = ProjVector::new(serial_vector(serial), serial, class);
        multi.push(key.clone()).unwrap();
        single.push(key).unwrap();
    }
    assert_eq!(multi.class(1).unwrap().len(), 2);
    assert_eq!(single.class(1).unwrap().len(), 0);
    assert_eq!(multi.len(), single.len() - 2);
}

#[test]
fn memory_bank_overwrites_per_image() {
    let mut bank = KeyStore::new(MemoryKind::MemoryBank, 2, 4, 2).unwrap();
    for serial in 0..10u64 {
        bank.push(ProjVector::new(serial_vector(serial), serial % 3, 0)).unwrap();
    }
    assert_eq!(bank.len(), 3);
    let latest = bank.positives(1);
    assert_eq!(latest.len(), 1);
    assert_eq!(latest[0].vector, serial_vector(7));
}

proptest! {
    #[test]
    fn fill_never_exceeds_capacity(classes in 2usize..5, cap in 1usize..6, pushes in proptest::collection::vec((0usize..5, 0u64..10), 0..80)) {
        let mut q = MultiQueue::new(classes, cap, 2).unwrap();
        for (serial, (c, img)) in pushes.into_iter().enumerate() {
            let res = q.push(ProjVector::new(serial_vector(serial as u64), img, c));
            prop_assert_eq!(res.is_ok(), c < classes);
            prop_assert!(q.fill_counts().iter().all(|&f| f <= cap));
        }
        prop_assert_eq!(q.len(), q.fill_counts().iter().sum::<usize>());
    }

    #[test]
    fn rebuild_from_parts_is_identity(cap in 1usize..6, pushes in proptest::collection::vec((0usize..3, 0u64..10), 0..40)) {
        let mut q = MultiQueue::new(3, cap, 2).unwrap();
        for (serial, (c, img)) in pushes.into_iter().enumerate() {
            q.push(ProjVector::new(serial_vector(serial as u64), img, c)).unwrap();
        }
        let keys: Vec<ProjVector> = q.all().into_iter().cloned().collect();
        let rebuilt = MultiQueue::from_parts(3, cap, 2, false, &q.fill_counts(), keys).unwrap();
        prop_assert_eq!(rebuilt, q);
    }
}
