use graphrl_core::graph::GraphBuilder;
use graphrl_core::rewrite::registry;
use graphrl_core::search::{
    exhaustive_optimise, greedy_optimise, random_optimise, ExhaustiveOptions, SearchError,
};
use graphrl_core::{Benchmark, CompGraph, CostFn, CostModel, OpKind};
use graphrl_core::env::EnvConfig;

fn model() -> CostModel {
    CostModel::default()
}

fn exhaustive(g: &CompGraph, depth: usize) -> f64 {
    exhaustive_optimise(g, registry(), CostFn::EndToEnd, &model(), ExhaustiveOptions::new(depth))
        .unwrap()
        .cost
}

#[test]
fn greedy_applies_single_improvement_then_stops() {
    let mut b = GraphBuilder::new();
    let x = b.input(&[2, 3]);
    let i = b.op(OpKind::Identity, &[x]);
    let r = b.op(OpKind::Relu, &[i]);
    let g = b.build(&[r]).unwrap();
    // Identity costs nothing, so removing it does not improve either measure.
    let res = greedy_optimise(&g, registry(), CostFn::EndToEnd, &model()).unwrap();
    assert!(res.trace.is_empty());

    let mut b = GraphBuilder::new();
    let x = b.input(&[1, 3, 6, 6]);
    let w = b.weight(&[4, 3, 3, 3]);
    let c = b.op(OpKind::Conv2d, &[x, w]);
    let r = b.op(OpKind::Relu, &[c]);
    let g = b.build(&[r]).unwrap();
    let res = greedy_optimise(&g, registry(), CostFn::CostModel, &model()).unwrap();
    assert_eq!(res.trace.len(), 1);
    assert_eq!(res.trace[0].rule_id.as_deref(), Some("fuse_conv_relu"));
}

#[test]
fn greedy_on_optimal_graph_takes_no_steps() {
    let g = Benchmark::Trap.graph();
    let m = model();
    let opt = exhaustive_optimise(&g, registry(), CostFn::EndToEnd, &m, ExhaustiveOptions::new(6))
        .unwrap()
        .graph;
    let res = greedy_optimise(&opt, registry(), CostFn::EndToEnd, &m).unwrap();
    assert!(res.trace.is_empty());
    assert_eq!(res.summary.speedup, 1.0);
}

#[test]
fn greedy_cost_is_strictly_decreasing() {
    let m = model();
    for b in Benchmark::ALL {
        for f in [CostFn::CostModel, CostFn::EndToEnd] {
            let res = greedy_optimise(&b.graph(), registry(), f, &m).unwrap();
            let mut prev = m.latency(&b.graph(), f);
            for s in &res.trace {
                let cur = match f {
                    CostFn::CostModel => s.cost_model_latency,
                    CostFn::EndToEnd => s.e2e_latency,
                };
                assert!(cur < prev, "{b} {f:?}");
                prev = cur;
            }
        }
    }
}

#[test]
fn exhaustive_depth_zero_returns_input() {
    let g = Benchmark::Trap.graph();
    let res = exhaustive_optimise(&g, registry(), CostFn::EndToEnd, &model(), ExhaustiveOptions::new(0)).unwrap();
    assert_eq!(res.graph, g);
    assert!(res.trace.is_empty());
}

#[test]
fn exhaustive_is_monotone_in_depth() {
    for b in Benchmark::ALL {
        let g = b.graph();
        let costs: Vec<f64> = (0..=5).map(|d| exhaustive(&g, d)).collect();
        assert!(costs.windows(2).all(|w| w[1] <= w[0]), "{b}: {costs:?}");
    }
}

#[test]
fn memoised_and_plain_exhaustive_agree() {
    let m = model();
    for b in Benchmark::ALL {
        let g = b.graph();
        for d in 0..=3 {
            let memo = ExhaustiveOptions::new(d);
            let plain = ExhaustiveOptions {
                memoise: false,
                ..memo
            };
            for f in [CostFn::CostModel, CostFn::EndToEnd] {
                let a = exhaustive_optimise(&g, registry(), f, &m, memo).unwrap().cost;
                let c = exhaustive_optimise(&g, registry(), f, &m, plain).unwrap().cost;
                assert_eq!(a, c, "{b} d={d} {f:?}");
            }
        }
    }
}

#[test]
fn exhaustive_sequence_replays_to_reported_cost() {
    let m = model();
    let g = Benchmark::MiniAttention.graph();
    let res = exhaustive_optimise(&g, registry(), CostFn::EndToEnd, &m, ExhaustiveOptions::new(4)).unwrap();
    assert_eq!(res.trace.last().unwrap().e2e_latency, res.cost);
    assert_eq!(m.simulated_e2e_latency(&res.graph), res.cost);
}

#[test]
fn budget_is_reported() {
    let g = Benchmark::MiniAttention.graph();
    let opts = ExhaustiveOptions {
        max_expansions: 3,
        ..ExhaustiveOptions::new(6)
    };
    let err = exhaustive_optimise(&g, registry(), CostFn::EndToEnd, &model(), opts).unwrap_err();
    assert_eq!(err, SearchError::BudgetExceeded { budget: 3 });
}

#[test]
fn trap_defeats_greedy_under_both_cost_functions() {
    let m = model();
    let g = Benchmark::Trap.graph();
    let best = exhaustive(&g, 6);
    for f in [CostFn::CostModel, CostFn::EndToEnd] {
        let res = greedy_optimise(&g, registry(), f, &m).unwrap();
        assert!(res.summary.final_e2e > 1.05 * best, "{f:?}");
        assert!(res.summary.rule_counts.keys().all(|r| !r.starts_with("matmul_assoc")));
    }
}

#[test]
fn trap_property_holds_at_other_shapes() {
    let m = model();
    for scale in [0.5, 2.0] {
        let g = Benchmark::Trap.scaled(scale).unwrap();
        let best = exhaustive(&g, 6);
        let greedy = greedy_optimise(&g, registry(), CostFn::EndToEnd, &m).unwrap();
        assert!(greedy.summary.final_e2e > 1.05 * best, "scale {scale}");
    }
}

#[test]
fn random_search_is_reproducible_and_bounded_by_oracle() {
    let m = model();
    let g = Benchmark::Trap.graph();
    let cfg = EnvConfig::default();
    let a = random_optimise(&g, registry(), &m, cfg, 9, 100).unwrap();
    let b = random_optimise(&g, registry(), &m, cfg, 9, 100).unwrap();
    assert_eq!(a.episodes, b.episodes);
    assert_eq!(a.best_trace, b.best_trace);
    assert!(a.best.final_e2e >= exhaustive(&g, 6) - 1e-9);
}

#[test]
fn random_search_on_fixed_point_graph() {
    let mut b = GraphBuilder::new();
    let x = b.input(&[2, 3]);
    let r = b.op(OpKind::Relu, &[x]);
    let g = b.build(&[r]).unwrap();
    let res = random_optimise(&g, registry(), &model(), EnvConfig::default(), 0, 1).unwrap();
    assert_eq!(res.best.speedup, 1.0);
}
