//! Filter counts against exact counting on generated grid data, plus
//! dataset and filter checkpoint round trips.

use std::io::Cursor;

use vqcount::counting::{CountingBloomFilter, PseudoCounter};
use vqcount::env::dataset::OfflineDataset;
use vqcount::env::grid::{exact_count_oracle, generate_grid_dataset, GridAction, GridMap, GridQuantizer};
use vqcount::env::pointmass::{generate_pointmass_dataset, BehaviorPolicy, PointMass};
use vqcount::rng::SeedStream;

const STEPS: usize = 10_000;

fn grid_data(map: GridMap, seed: u64) -> OfflineDataset {
    let mut rng = SeedStream::new(seed).rng("dataset");
    generate_grid_dataset(map, STEPS, &mut rng, seed).0
}

#[test]
fn filter_counts_match_exact_counts_on_every_map() {
    for map in GridMap::ALL {
        let data = grid_data(map, 11);
        let exact = exact_count_oracle(&data).unwrap();
        let mut counter = PseudoCounter::new(GridQuantizer::new(map.size()), CountingBloomFilter::with_defaults());
        let arrays = data.arrays();
        counter.insert_batch(arrays.states.view(), arrays.actions.view()).unwrap();

        let (mut visited, mut exact_pairs, mut total) = (0usize, 0usize, 0u64);
        for y in 0..map.size() {
            for x in 0..map.size() {
                for a in GridAction::ALL {
                    let truth = exact.get(x, y, a);
                    let s = [x as f64, y as f64];
                    let est = counter.counts(ndarray::aview2(&[s]), ndarray::aview2(&[[a.index() as f64]])).unwrap()[0] as u64;
                    assert!(est >= truth, "{}: ({x},{y},{}) under-counted", map.id(), a.name());
                    total += est.min(truth);
                    if truth > 0 {
                        visited += 1;
                        exact_pairs += usize::from(est == truth);
                    }
                }
            }
        }
        assert_eq!(exact.total(), STEPS as u64, "{}", map.id());
        assert_eq!(total, STEPS as u64);
        let rate = exact_pairs as f64 / visited as f64;
        assert!(rate >= 0.999, "{}: exact on {rate}", map.id());
    }
}

#[test]
fn generation_counts_agree_with_recount() {
    for map in GridMap::ALL {
        let mut rng = SeedStream::new(5).rng("dataset");
        let (data, counts) = generate_grid_dataset(map, STEPS, &mut rng, 5);
        assert_eq!(counts, exact_count_oracle(&data).unwrap(), "{}", map.id());
    }
}

#[test]
fn uniform_walk_picks_actions_evenly() {
    let data = grid_data(GridMap::Open8, 3);
    let mut freq = [0usize; 4];
    for t in &data.transitions {
        freq[t.action[0] as usize] += 1;
    }
    for (a, &f) in freq.iter().enumerate() {
        let p = f as f64 / STEPS as f64;
        assert!((p - 0.25).abs() <= 0.02, "action {a} frequency {p}");
    }
}

#[test]
fn datasets_round_trip_through_binary_format() {
    let grid = grid_data(GridMap::Obstacles16, 2);
    let mut rng = SeedStream::new(2).rng("dataset");
    let pm = generate_pointmass_dataset(&PointMass::default(), BehaviorPolicy::Medium, 20, &mut rng, 2)
        .unwrap()
        .dataset;
    for data in [grid, pm] {
        let mut buf = Vec::new();
        data.write_to(&mut buf).unwrap();
        let back = OfflineDataset::read_from(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(back, data);
    }
}

#[test]
fn truncated_dataset_is_rejected() {
    let data = grid_data(GridMap::Open8, 2);
    let mut buf = Vec::new();
    data.write_to(&mut buf).unwrap();
    buf.truncate(buf.len() / 2);
    assert!(OfflineDataset::read_from(&mut Cursor::new(&buf)).is_err());
}

#[test]
fn filter_round_trips_and_keeps_answers() {
    let data = grid_data(GridMap::Obstacles8, 9);
    let mut counter = PseudoCounter::new(GridQuantizer::new(8), CountingBloomFilter::with_defaults());
    let arrays = data.arrays();
    counter.insert_batch(arrays.states.view(), arrays.actions.view()).unwrap();
    let mut buf = Vec::new();
    counter.filter().write_to(&mut buf).unwrap();
    let back = CountingBloomFilter::read_from(&mut Cursor::new(&buf)).unwrap();
    assert_eq!(&back, counter.filter());
    let restored = PseudoCounter::new(GridQuantizer::new(8), back);
    assert_eq!(
        restored.counts(arrays.states.view(), arrays.actions.view()).unwrap(),
        counter.counts(arrays.states.view(), arrays.actions.view()).unwrap()
    );
}
