use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use graphrl_core::graph::{evaluate_outputs, load, max_rel_diff, random_inputs, save};
use graphrl_core::rewrite::fixtures::rule_fixture;
use graphrl_core::rewrite::{generate_candidates, registry};
use graphrl_core::CompGraph;

fn fixtures() -> Vec<CompGraph> {
    registry().iter().filter_map(|r| rule_fixture(r.rule_id)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Any chain of rewrites from a fixture computes the same function and
    /// survives serialisation.
    #[test]
    fn rewrite_walks_preserve_outputs(fixture in any::<prop::sample::Index>(), picks in prop::collection::vec(any::<prop::sample::Index>(), 1..5), seed in any::<u64>()) {
        let all = fixtures();
        let start = all[fixture.index(all.len())].clone();
        let mut g = start.clone();
        for pick in picks {
            let cands = generate_candidates(&g, registry(), 4096).unwrap();
            if cands.is_empty() {
                break;
            }
            g = cands[pick.index(cands.len())].graph.clone();
        }
        prop_assert_eq!(&load(&save(&g)).unwrap(), &g);
        let inputs = random_inputs::<f64, _>(&start, &mut ChaCha8Rng::seed_from_u64(seed));
        let before = evaluate_outputs(&start, &inputs).unwrap();
        let after = evaluate_outputs(&g, &inputs).unwrap();
        prop_assert_eq!(before.len(), after.len());
        for (a, b) in before.iter().zip(&after) {
            let d = max_rel_diff(a, b);
            prop_assert!(d.is_some_and(|d| d < 1e-9), "diff {:?}", d);
        }
    }
}
