use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use graphrl_learn::substrate::{
    finite_difference_error, AdamConfig, ParamStore, SubstrateError, Tape, Tensor2D, Var,
};

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

/// Input domain for a randomised check.
#[derive(Clone, Copy)]
enum Domain {
    /// Uniform in (-1, 1) but at least 0.05 away from zero.
    AwayFromZero,
    Positive,
}

fn sample(rng: &mut ChaCha8Rng, n: usize, d: Domain) -> Vec<f64> {
    (0..n)
        .map(|_| match d {
            Domain::AwayFromZero => {
                let x: f64 = rng.random_range(0.05..1.0);
                if rng.random_bool(0.5) { x } else { -x }
            }
            Domain::Positive => rng.random_range(0.2..2.0),
        })
        .collect()
}

/// Finite-difference error of `sum(build(inputs) * R)` for a fixed random `R`.
fn op_error(
    rng: &mut ChaCha8Rng,
    shapes: &[(usize, usize)],
    domain: Domain,
    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let sizes: Vec<usize> = shapes.iter().map(|(r, c)| r * c).collect();
    let x0 = sample(rng, sizes.iter().sum(), domain);
    let mut probe_tape = Tape::new();
    let vars = leaves(&mut probe_tape, shapes, &x0);
    let probe_out = build(&mut probe_tape, &vars);
    let out_shape = probe_tape.value(probe_out).shape();
    let weights = Tensor2D::from_vec(
        out_shape.0,
        out_shape.1,
        (0..out_shape.0 * out_shape.1).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    finite_difference_error(&x0, H, |x| {
        let mut tape = Tape::new();
        let vars = leaves(&mut tape, shapes, x);
        let out = build(&mut tape, &vars);
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        let g: Vec<f64> = vars
            .iter()
            .zip(shapes)
            .flat_map(|(v, &(r, c))| match grads.wrt(*v) {
                Some(t) => t.data().to_vec(),
                None => vec![0.0; r * c],
            })
            .collect();
        (tape.value(loss).item(), g)
    })
}

fn leaves(tape: &mut Tape<f64>, shapes: &[(usize, usize)], x: &[f64]) -> Vec<Var> {
    let mut off = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let t = Tensor2D::from_vec(r, c, x[off..off + r * c].to_vec()).unwrap();
            off += r * c;
            tape.constant(t)
        })
        .collect()
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

/// Runs `make` on five random shape draws and asserts every check passes.
fn check(name: &str, domain: Domain, make: impl Fn(&mut ChaCha8Rng) -> (Vec<(usize, usize)>, Build)) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for trial in 0..5 {
        let (shapes, build) = make(&mut rng);
        let err = op_error(&mut rng, &shapes, domain, &*build);
        assert!(err < TOL, "{name} trial {trial}: rel err {err:e} on {shapes:?}");
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..6), rng.random_range(1..6))
}

#[test]
fn binary_elementwise_ops() {
    check("add", Domain::AwayFromZero, |rng| {
        let s = dims(rng);
        (vec![s, s], Box::new(|t, v| t.add(v[0], v[1]).unwrap()))
    });
    check("sub", Domain::AwayFromZero, |rng| {
        let s = dims(rng);
        (vec![s, s], Box::new(|t, v| t.sub(v[0], v[1]).unwrap()))
    });
    check("mul", Domain::AwayFromZero, |rng| {
        let s = dims(rng);
        (vec![s, s], Box::new(|t, v| t.mul(v[0], v[1]).unwrap()))
    });
    check("minimum", Domain::AwayFromZero, |rng| {
        let s = dims(rng);
        // Offsetting one operand keeps the pair away from ties.
        (
            vec![s, s],
            Box::new(|t, v| {
                let shifted = t.add_scalar(v[1], 0.03);
                t.minimum(v[0], shifted).unwrap()
            }),
        )
    });
}

#[test]
fn matmul_and_broadcasts() {
    check("matmul", Domain::AwayFromZero, |rng| {
        let (m, k) = dims(rng);
        let n = rng.random_range(1..6);
        (vec![(m, k), (k, n)], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()))
    });
    check("add_row", Domain::AwayFromZero, |rng| {
        let (r, c) = dims(rng);
        (vec![(r, c), (1, c)], Box::new(|t, v| t.add_row(v[0], v[1]).unwrap()))
    });
    check("mul_col", Domain::AwayFromZero, |rng| {
        let (r, c) = dims(rng);
        (vec![(r, c), (r, 1)], Box::new(|t, v| t.mul_col(v[0], v[1]).unwrap()))
    });
}

#[test]
fn scalar_ops() {
    check("scale", Domain::AwayFromZero, |rng| {
        (vec![dims(rng)], Box::new(|t, v| t.scale(v[0], -2.5)))
    });
    check("add_scalar", Domain::AwayFromZero, |rng| {
        (vec![dims(rng)], Box::new(|t, v| t.add_scalar(v[0], 0.7)))
    });
    check("sum", Domain::AwayFromZero, |rng| (vec![dims(rng)], Box::new(|t, v| t.sum(v[0]))));
    check("mean", Domain::AwayFromZero, |rng| (vec![dims(rng)], Box::new(|t, v| t.mean(v[0]))));
}

#[test]
fn unary_ops() {
    check("relu", Domain::AwayFromZero, |rng| (vec![dims(rng)], Box::new(|t, v| t.relu(v[0]))));
    check("leaky_relu", Domain::AwayFromZero, |rng| {
        (vec![dims(rng)], Box::new(|t, v| t.leaky_relu(v[0], 0.2)))
    });
    check("sigmoid", Domain::AwayFromZero, |rng| {
        (vec![dims(rng)], Box::new(|t, v| t.sigmoid(v[0])))
    });
    check("exp", Domain::AwayFromZero, |rng| (vec![dims(rng)], Box::new(|t, v| t.exp(v[0]))));
    check("log", Domain::Positive, |rng| (vec![dims(rng)], Box::new(|t, v| t.log(v[0]))));
    check("square", Domain::AwayFromZero, |rng| {
        (vec![dims(rng)], Box::new(|t, v| t.square(v[0])))
    });
    check("clamp", Domain::AwayFromZero, |rng| {
        (vec![dims(rng)], Box::new(|t, v| t.clamp(v[0], -0.52, 0.47)))
    });
    check("log_softmax_rows", Domain::AwayFromZero, |rng| {
        (vec![dims(rng)], Box::new(|t, v| t.log_softmax_rows(v[0])))
    });
}

#[test]
fn structural_ops() {
    check("concat_cols", Domain::AwayFromZero, |rng| {
        let (r, c) = dims(rng);
        let c2 = rng.random_range(1..6);
        (vec![(r, c), (r, c2)], Box::new(|t, v| t.concat_cols(v[0], v[1]).unwrap()))
    });
    check("concat_rows", Domain::AwayFromZero, |rng| {
        let (r, c) = dims(rng);
        let r2 = rng.random_range(1..6);
        (
            vec![(r, c), (r2, c), (1, c)],
            Box::new(|t, v| t.concat_rows(v).unwrap()),
        )
    });
    check("gather_rows", Domain::AwayFromZero, |rng| {
        let (r, c) = dims(rng);
        let idx: Vec<usize> = (0..rng.random_range(1..8)).map(|_| rng.random_range(0..r)).collect();
        (vec![(r, c)], Box::new(move |t, v| t.gather_rows(v[0], &idx).unwrap()))
    });
    check("pick_cols", Domain::AwayFromZero, |rng| {
        let (r, c) = dims(rng);
        let cols: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
        (vec![(r, c)], Box::new(move |t, v| t.pick_cols(v[0], &cols).unwrap()))
    });
    check("scatter", Domain::AwayFromZero, |rng| {
        let n = rng.random_range(1..5);
        let pos: Vec<(usize, usize)> = (0..n).map(|k| (k % 2, k)).collect();
        (vec![(n, 1)], Box::new(move |t, v| t.scatter(v[0], &pos, 2, n + 1, -3.0).unwrap()))
    });
}

fn random_segments(rng: &mut ChaCha8Rng, n: usize) -> (Vec<usize>, usize) {
    let k = rng.random_range(1..=n);
    let mut segs: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
    segs.sort_unstable();
    (segs, k)
}

#[test]
fn segment_ops() {
    check("segment_sum", Domain::AwayFromZero, |rng| {
        let (r, c) = dims(rng);
        let (segs, k) = random_segments(rng, r);
        (vec![(r, c)], Box::new(move |t, v| t.segment_sum(v[0], &segs, k).unwrap()))
    });
    check("segment_softmax", Domain::AwayFromZero, |rng| {
        let r = rng.random_range(1..8);
        let (segs, k) = random_segments(rng, r);
        (vec![(r, 1)], Box::new(move |t, v| t.segment_softmax(v[0], &segs, k).unwrap()))
    });
}

#[test]
fn segment_sum_example() {
    let mut t = Tape::new();
    let x = t.constant(Tensor2D::column(vec![1.0, 2.0, 3.0]));
    let s = t.segment_sum(x, &[0, 0, 1], 2).unwrap();
    assert_eq!(t.value(s).data(), &[3.0, 3.0]);
}

#[test]
fn singleton_softmax_is_one() {
    let mut t = Tape::new();
    let x = t.constant(Tensor2D::column(vec![-4.2]));
    let s = t.segment_softmax(x, &[0], 1).unwrap();
    assert_eq!(t.value(s).data(), &[1.0]);
}

#[test]
fn relu_of_negative_is_zero() {
    let mut t = Tape::new();
    let x = t.constant(Tensor2D::column(vec![-0.5, -3.0]));
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 0.0]);
}

#[test]
fn shape_errors_are_reported() {
    let mut t: Tape<f64> = Tape::new();
    let a = t.constant(Tensor2D::zeros(2, 3));
    let b = t.constant(Tensor2D::zeros(2, 3));
    assert!(matches!(t.matmul(a, b), Err(SubstrateError::ShapeMismatch(_))));
    assert!(matches!(t.backward(a), Err(SubstrateError::NotScalarLoss { rows: 2, cols: 3 })));
}

fn linear_store() -> (ParamStore<f64>, [graphrl_learn::substrate::ParamId; 2]) {
    let mut s = ParamStore::new(4);
    let w = s.add_xavier("w", 3, 2);
    let unused = s.add_xavier("unused", 2, 2);
    (s, [w, unused])
}

fn accumulate_sum_wx(store: &mut ParamStore<f64>, w: graphrl_learn::substrate::ParamId) {
    let mut t = Tape::new();
    let x = t.constant(Tensor2D::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap());
    let wv = t.param(store, w);
    let y = t.matmul(x, wv).unwrap();
    let loss = t.sum(y);
    let g = t.backward(loss).unwrap();
    store.accumulate(&t, &g);
}

#[test]
fn sum_wx_gradient_is_outer_product() {
    let (mut s, [w, unused]) = linear_store();
    accumulate_sum_wx(&mut s, w);
    assert_eq!(s.grad(w).data(), &[0.5, 0.5, -1.0, -1.0, 2.0, 2.0]);
    assert!(s.grad(unused).data().iter().all(|&g| g == 0.0));
}

#[test]
fn gradients_accumulate_until_zeroed() {
    let (mut s, [w, _]) = linear_store();
    accumulate_sum_wx(&mut s, w);
    let once = s.grad(w).clone();
    accumulate_sum_wx(&mut s, w);
    assert_eq!(s.grad(w), &once.map(|g| 2.0 * g));
    s.zero_grad();
    assert!(s.grad(w).data().iter().all(|&g| g == 0.0));
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let (mut s, [w, _]) = linear_store();
    let before = s.value(w).clone();
    s.adam_step(&AdamConfig::default());
    assert_eq!(s.value(w), &before);
}

#[test]
fn adam_first_step_matches_hand_computation() {
    let mut s = ParamStore::new(0);
    let p = s.add_value("p", Tensor2D::scalar(1.0));
    let mut t = Tape::new();
    let v = t.param(&s, p);
    let loss = t.sum(v);
    let g = t.backward(loss).unwrap();
    s.accumulate(&t, &g);
    s.adam_step(&AdamConfig::default());
    // m = 0.1, v = 0.001; bias-corrected both are 1, so the step is lr / (1 + eps).
    let expected: f64 = 1.0 - 5e-4 / (1.0 + 1e-8);
    assert!((s.value(p).item() - expected).abs() < 1e-15);
}

#[test]
fn identical_stores_update_identically() {
    let (mut a, [w, _]) = linear_store();
    let (mut b, _) = linear_store();
    assert_eq!(a, b);
    for s in [&mut a, &mut b] {
        accumulate_sum_wx(s, w);
        s.adam_step(&AdamConfig::default());
    }
    assert_eq!(a, b);
}

#[test]
fn xavier_bounds_and_seeding() {
    let mut s: ParamStore<f64> = ParamStore::new(1);
    let w = s.add_xavier("w", 10, 20);
    let b = s.add_zeros("b", 1, 20);
    let a = (6.0f64 / 30.0).sqrt();
    assert!(s.value(w).data().iter().all(|x| x.abs() <= a));
    assert!(s.value(b).data().iter().all(|&x| x == 0.0));
    let mut other: ParamStore<f64> = ParamStore::new(1);
    other.add_xavier("w", 10, 20);
    assert_eq!(other.value(w), s.value(w));
}

#[test]
fn checkpoint_round_trip_and_version() {
    let (mut s, [w, _]) = linear_store();
    accumulate_sum_wx(&mut s, w);
    s.adam_step(&AdamConfig::default());
    s.zero_grad();
    let doc = s.to_checkpoint();
    let back = ParamStore::<f64>::from_checkpoint(&doc).unwrap();
    assert_eq!(back, s);
    let bumped = doc.replacen("\"version\":1", "\"version\":99", 1);
    assert!(matches!(
        ParamStore::<f64>::from_checkpoint(&bumped),
        Err(SubstrateError::CheckpointVersionMismatch { found: 99, .. })
    ));
}

#[test]
fn single_precision_substrate_runs() {
    let mut t: Tape<f32> = Tape::new();
    let x = t.constant(Tensor2D::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = t.matmul(x, x).unwrap();
    let l = t.sum(y);
    let g = t.backward(l).unwrap();
    assert_eq!(t.value(l).item(), 54.0);
    assert_eq!(g.wrt(x).unwrap().shape(), (2, 2));
}
