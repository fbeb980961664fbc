use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rcfuse_core::decoder::{min_pairwise_distance, DecoderStack, Mode, QueryInit, QueryState, Tokens};
use rcfuse_core::geometry::{DepthBins, WorldRange};
use rcfuse_core::nn::{Graph, ParamStore};
use rcfuse_core::pos_embed::PeEncoders;
use rcfuse_core::Tensor;

const D: usize = 16;

struct Fixture {
    store: ParamStore,
    enc: PeEncoders,
    stack: DecoderStack,
    radar: Tensor,
    image: Tensor,
}

fn random(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn fixture(seed: u64, layers: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc = PeEncoders::new(
        &mut store,
        &mut rng,
        D,
        4,
        DepthBins::linear(4, 1.0, 40.0).unwrap(),
        WorldRange::default(),
    );
    let stack = DecoderStack::new(&mut store, &mut rng, layers, layers, D, 2, 32).unwrap();
    Fixture {
        store,
        enc,
        stack,
        radar: random(&mut rng, &[20, D], -1.0, 1.0),
        image: random(&mut rng, &[12, D], -1.0, 1.0),
    }
}

fn run(f: &Fixture, features: &Tensor, refs: &Tensor, mode: Mode) -> Vec<(Tensor, Tensor)> {
    let mut g = Graph::new(&f.store, false);
    let tokens = Tokens {
        radar: g.constant(f.radar.clone()),
        image: g.constant(f.image.clone()),
    };
    let init = QueryState {
        features: g.constant(features.clone()),
        refs: g.constant(refs.clone()),
        layer_index: 0,
    };
    f.stack
        .run(&mut g, init, tokens, &f.enc, mode)
        .unwrap()
        .into_iter()
        .map(|s| (g.value(s.features).clone(), g.value(s.refs).clone()))
        .collect()
}

#[test]
fn zero_output_projections_make_the_stack_an_identity() {
    let mut f = fixture(1, 4);
    for l in &f.stack.layers {
        l.zero_outputs(&mut f.store);
        l.offset.zero(&mut f.store);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let refs = random(&mut rng, &[6, 3], 0.0, 1.0);
    let zeros = Tensor::zeros(&[6, D]);
    for (k, (feat, r)) in run(&f, &zeros, &refs, Mode::Train).into_iter().enumerate() {
        assert_eq!(feat, zeros, "layer {k}");
        assert_eq!(r, refs, "layer {k}");
    }
}

#[test]
fn reference_updates_are_clamped() {
    let mut f = fixture(2, 1);
    let off = &f.stack.layers[0].offset;
    f.store.get_mut(off.w).data_mut().fill(0.0);
    f.store.get_mut(off.b.unwrap()).data_mut().copy_from_slice(&[0.05, -0.05, 0.02]);
    let refs = Tensor::new(vec![2, 3], vec![0.99, 0.01, 0.5, 0.5, 0.5, 0.5]).unwrap();
    let out = run(&f, &Tensor::zeros(&[2, D]), &refs, Mode::Train);
    let r = &out[0].1;
    assert_eq!(r.row(0), &[1.0, 0.0, 0.52]);
    assert!((r.row(1)[0] - 0.55).abs() < 1e-15);
}

#[test]
fn references_stay_in_the_unit_cube() {
    for seed in 0..5 {
        let mut f = fixture(seed, 6);
        // large steps force the clamp to act
        for l in &f.stack.layers {
            f.store.get_mut(l.offset.w).data_mut().iter_mut().for_each(|w| *w *= 50.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let refs = random(&mut rng, &[8, 3], 0.0, 1.0);
        let feats = random(&mut rng, &[8, D], -1.0, 1.0);
        for (_, r) in run(&f, &feats, &refs, Mode::Train) {
            assert!(r.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn permuting_queries_permutes_outputs() {
    let f = fixture(3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 7;
    let refs = random(&mut rng, &[n, 3], 0.0, 1.0);
    let feats = random(&mut rng, &[n, D], -1.0, 1.0);
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let permute = |t: &Tensor| {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
        Tensor::from_rows(&rows)
    };
    let a = run(&f, &feats, &refs, Mode::Train);
    let b = run(&f, &permute(&feats), &permute(&refs), Mode::Train);
    for ((fa, ra), (fb, rb)) in a.iter().zip(&b) {
        for (x, y) in permute(fa).data().iter().zip(fb.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in permute(ra).data().iter().zip(rb.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn full_depth_inference_equals_the_last_training_state() {
    let f = fixture(5, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let refs = random(&mut rng, &[5, 3], 0.0, 1.0);
    let feats = Tensor::zeros(&[5, D]);
    let train = run(&f, &feats, &refs, Mode::Train);
    let infer = run(&f, &feats, &refs, Mode::Infer);
    assert_eq!(train.len(), 4);
    assert_eq!(infer.len(), 1);
    assert_eq!(train.last(), infer.last());
}

#[test]
fn query_init_starts_from_zero_features_inside_the_cube() {
    let mut store = ParamStore::new();
    let q = QueryInit::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), 24, D).unwrap();
    let mut g = Graph::new(&store, false);
    let s = q.state(&mut g);
    assert!(g.value(s.features).data().iter().all(|&v| v == 0.0));
    assert!(g.value(s.refs).data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(QueryInit::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), 0, D).is_err());
}

#[test]
fn width_mismatch_is_a_config_error() {
    let f = fixture(6, 1);
    let mut g = Graph::new(&f.store, false);
    let tokens = Tokens {
        radar: g.constant(Tensor::zeros(&[4, D + 1])),
        image: g.constant(f.image.clone()),
    };
    let init = QueryState {
        features: g.constant(Tensor::zeros(&[2, D])),
        refs: g.constant(Tensor::full(&[2, 3], 0.5)),
        layer_index: 0,
    };
    assert!(matches!(
        f.stack.run(&mut g, init, tokens, &f.enc, Mode::Train),
        Err(rcfuse_core::Error::Config(_))
    ));
}

#[test]
fn collapse_diagnostic_reports_the_closest_pair() {
    assert_eq!(min_pairwise_distance(&[[0.0, 0.0]]), None);
    assert_eq!(min_pairwise_distance(&[[0.0, 0.0], [3.0, 4.0], [0.0, 1.0]]), Some(1.0));
}
