mod common;

use proptest::prelude::*;

use common::*;
use sparsecrl::discovery::{apply_meek_rules, cpdag_of_dag, pc_algorithm};
use sparsecrl::masking::{mask_value, MaskValue};
use sparsecrl::nn::Matrix;
use sparsecrl::scm::{sample_er_dag, Dag, LatentMoments};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hungarian_matches_enumeration(rows in 1usize..=6, extra in 0usize..=2, seed in any::<u64>()) {
        let cols = (rows + extra).min(6);
        prop_assert_eq!(hungarian_case(rows, cols, seed), Ok(()));
    }

    #[test]
    fn mcc_of_scaled_permutation_is_one(n in 1usize..=6, seed in any::<u64>()) {
        prop_assert_eq!(scaled_permutation_case(n, seed), Ok(()));
    }

    #[test]
    fn mask_value_arithmetic(n in 1usize..6, delta in 0.0f64..20.0, seed in any::<u64>()) {
        prop_assert_eq!(mask_value_case(n, delta, seed), Ok(()));
    }

    #[test]
    fn shd_is_a_metric(seed in any::<u64>()) {
        prop_assert_eq!(shd_axioms_case(seed), Ok(()));
    }

    #[test]
    fn cpdag_is_closed_under_meek_rules(n in 2usize..6, k in 0usize..3, seed in any::<u64>()) {
        let dag = sample_er_dag(n, k, &mut rng(seed)).unwrap();
        let g = cpdag_of_dag(&dag);
        prop_assert_eq!(apply_meek_rules(&g), g.clone());
        // Same skeleton as the DAG.
        prop_assert_eq!(g.edge_count(), dag.edges().len());
    }
}

#[test]
fn markov_equivalent_dags_share_a_cpdag() {
    let a = Dag::new(3, vec![(0, 1), (1, 2)]).unwrap();
    let b = Dag::new(3, vec![(2, 1), (1, 0)]).unwrap();
    let c = Dag::new(3, vec![(1, 0), (1, 2)]).unwrap();
    let collider = Dag::new(3, vec![(0, 1), (2, 1)]).unwrap();
    assert_eq!(cpdag_of_dag(&a), cpdag_of_dag(&b));
    assert_eq!(cpdag_of_dag(&a), cpdag_of_dag(&c));
    assert_ne!(cpdag_of_dag(&a), cpdag_of_dag(&collider));
}

#[test]
fn variability_checker_agrees_with_set_definition() {
    let satisfied = variability_sets(100, 11).unwrap();
    // Both outcomes occur in the sample.
    assert!(satisfied > 0 && satisfied < 100);
}

#[test]
fn linear_gaussian_covariance_matches_monte_carlo() {
    for seed in 0..3 {
        scm_covariance_case(seed).unwrap();
    }
}

#[test]
fn pc_recovers_chain_and_collider() {
    let [chain, collider] = pc_recoveries();
    assert!(chain >= 9 && collider >= 9, "chain {chain}/10, collider {collider}/10");
}

#[test]
fn pc_on_independent_data_is_usually_empty() {
    let mut empty = 0;
    for seed in 0..10 {
        let data = Matrix::randn(10_000, 5, &mut rng(300 + seed));
        empty += (pc_algorithm(&data, 0.01).unwrap().cpdag.edge_count() == 0) as usize;
    }
    assert!(empty >= 9, "{empty}/10");
}

#[test]
fn zero_mask_value_is_the_theory_setting() {
    assert_eq!(mask_value(&LatentMoments::standard(3), 0.0).unwrap(), MaskValue::zero(3));
}
