mod common;

use lipadapt::adapters::{count_trainable, AdapterLayout, AdapterSet, LoraConfig, LoraTarget};
use lipadapt::eval::{ablation_grid, ExperimentConfig};
use proptest::prelude::*;

#[test]
fn reported_counts_equal_enumeration() {
    for (case, reported, enumerated) in common::count_checks() {
        assert_eq!(reported, enumerated, "{case}");
    }
}

#[test]
fn ablation_counts_are_linear_in_rank() {
    let cfg = ExperimentConfig::desk().model;
    let grid = ablation_grid();
    assert_eq!(grid.len(), 8);
    let count = |l: &LoraConfig| {
        count_trainable(&AdapterSet::init(&cfg, AdapterLayout::vision(Some(l.clone()), false), 0).unwrap()).total()
    };
    let all: Vec<_> = grid.iter().filter(|l| l.targets.len() == 4).collect();
    let per_rank = count(all[0]) / all[0].rank;
    for l in &all {
        assert_eq!(count(l), per_rank * l.rank);
    }
}

proptest! {
    #[test]
    fn lora_count_is_rank_times_site_widths(rank in 1usize..12, mask in 1u8..16) {
        let cfg = ExperimentConfig::desk().model;
        let targets: Vec<LoraTarget> =
            LoraTarget::ALL.into_iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, t)| t).collect();
        let lora = LoraConfig::new(rank, 16.0, targets);
        let set = AdapterSet::init(&cfg, AdapterLayout::vision(Some(lora.clone()), false), 0).unwrap();
        let widths: usize = lipadapt::adapters::lora_sites(&cfg, &lora, false)
            .unwrap()
            .iter()
            .map(|(_, o, i)| o + i)
            .sum();
        prop_assert_eq!(count_trainable(&set).total(), rank * widths);
        prop_assert_eq!(count_trainable(&set).total(), common::enumerate_trainable(&cfg, &set));
    }
}
