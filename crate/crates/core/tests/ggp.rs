mod common;

use neurocam::ggp::{
    conforms_to_ranges, derive_architecture, evolve, EvolutionConfig, FitnessEvaluator, Genome, GgpError, Grammar,
};
use neurocam::nn::LayerSpec;
use neurocam::optim::{split_dataset, Splits};
use neurocam::phantom::generate_phantom;
use proptest::prelude::*;

fn splits() -> Splits {
    let (ds, _) = generate_phantom(&common::tiny_phantom(6, 5)).unwrap();
    split_dataset(&ds, [0.6, 0.2, 0.2], 1).unwrap()
}

fn quick(population_size: usize, generations: usize) -> EvolutionConfig {
    EvolutionConfig {
        population_size,
        generations,
        fitness_epochs: 1,
        genome_length: 16,
        seed: 11,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn derived_networks_stay_in_tuning_ranges(codons in proptest::collection::vec(0u32..256, 16..40), wraps in 0usize..3) {
        let grammar = Grammar::builtin();
        let genome = Genome { codons, wraps };
        match derive_architecture(&genome, &grammar, &[60, 73, 60]) {
            Ok(d) => {
                prop_assert!(conforms_to_ranges(&d.spec));
                prop_assert!([1.0, 0.1, 0.01, 0.001, 1e-4, 1e-5].contains(&d.learning_rate));
                prop_assert!([10, 50, 100].contains(&d.epochs));
                prop_assert!([32, 64, 128, 256, 512].contains(&d.fc_units));
                prop_assert!(matches!(d.dropout, None | Some(0.1) | Some(0.5)));
                let blocks = d.spec.layers.iter().filter(|l| l.is_conv()).count();
                prop_assert!((1..=4).contains(&blocks));
                let two_way_head = matches!(d.spec.layers.last(), Some(LayerSpec::Dense { units: 2, .. }));
                prop_assert!(two_way_head);
            }
            Err(GgpError::DerivationOverrun { .. }) | Err(GgpError::Nn(_)) => {}
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }
}

#[test]
fn short_genomes_overrun_without_wrapping() {
    let grammar = Grammar::builtin();
    let err = derive_architecture(&Genome { codons: vec![3, 4], wraps: 0 }, &grammar, &[14, 18, 16]).unwrap_err();
    assert!(matches!(err, GgpError::DerivationOverrun { wraps: 0 }));
}

#[test]
fn invalid_genomes_score_zero_and_are_logged() {
    let s = splits();
    let grammar = Grammar::builtin();
    let mut eval = FitnessEvaluator::new(&grammar, &s.train, &s.val, 1, 0);
    assert_eq!(eval.fitness(&Genome { codons: vec![3; 2], wraps: 0 }), 0.0);
    // Four blocks of 5x5 stride-3 convolutions cannot fit a 16x18 slice.
    let mut codons = vec![3];
    for _ in 0..4 {
        codons.extend([4, 2, 0]);
    }
    codons.extend([0; 8]);
    assert_eq!(eval.fitness(&Genome { codons, wraps: 0 }), 0.0);
    assert_eq!(eval.failures.len(), 2);
    assert_eq!(eval.trainings, 0);
}

#[test]
fn fitness_is_memoized_by_codons() {
    let s = splits();
    let grammar = Grammar::builtin();
    let mut eval = FitnessEvaluator::new(&grammar, &s.train, &s.val, 1, 0);
    let g = Genome { codons: vec![0; 16], wraps: 2 };
    let f1 = eval.fitness(&g);
    let f2 = eval.fitness(&g);
    assert_eq!(f1, f2);
    assert!((0.0..=1.0).contains(&f1));
    assert_eq!(eval.trainings, 1);
}

#[test]
fn no_variation_and_full_elitism_is_a_fixed_point() {
    let s = splits();
    let grammar = Grammar::builtin();
    let mut eval = FitnessEvaluator::new(&grammar, &s.train, &s.val, 1, 0);
    let cfg = EvolutionConfig {
        crossover_rate: 0.0,
        mutation_rate: 0.0,
        elitism_count: 4,
        ..quick(4, 3)
    };
    let initial = evolve(&mut eval, &EvolutionConfig { generations: 0, ..cfg.clone() }).unwrap();
    let after = evolve(&mut eval, &cfg).unwrap();
    let mut a: Vec<_> = initial.population.iter().map(|i| i.genome.codons.clone()).collect();
    let mut b: Vec<_> = after.population.iter().map(|i| i.genome.codons.clone()).collect();
    a.sort();
    b.sort();
    assert_eq!(a, b);
    assert_eq!(after.log.len(), 4);
}

#[test]
fn best_fitness_never_decreases_and_runs_repeat() {
    let s = splits();
    let grammar = Grammar::builtin();
    let run = || {
        let mut eval = FitnessEvaluator::new(&grammar, &s.train, &s.val, 1, 0);
        evolve(&mut eval, &quick(6, 4)).unwrap()
    };
    let a = run();
    assert_eq!(a.log.len(), 5);
    assert!(a.log.windows(2).all(|w| w[1].best >= w[0].best));
    assert!(a.log.iter().all(|g| g.best >= g.median && g.median >= 0.0 && g.mean <= g.best));
    assert_eq!(a.best.fitness, a.log.last().unwrap().best);
    let b = run();
    assert_eq!(a.log, b.log);
    assert_eq!(a.best.genome, b.best.genome);
}

#[test]
fn invalid_settings_are_rejected_before_training() {
    let s = splits();
    let grammar = Grammar::builtin();
    let mut eval = FitnessEvaluator::new(&grammar, &s.train, &s.val, 1, 0);
    let cfg = EvolutionConfig { genome_length: 8, ..quick(4, 1) };
    assert!(matches!(evolve(&mut eval, &cfg), Err(GgpError::InvalidConfig(_))));
    assert_eq!(eval.trainings, 0);
}
