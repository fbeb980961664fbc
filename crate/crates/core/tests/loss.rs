use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rcfuse_core::geometry::WorldRange;
use rcfuse_core::head::{decode, match_cost, scene_loss, Heads, LossConfig, Prediction, BOX_DIMS};
use rcfuse_core::nn::{Graph, ParamStore};
use rcfuse_core::tensor::focal_term;
use rcfuse_core::{GtBox, Tensor};

fn gt(x: f64, y: f64, class: usize) -> GtBox {
    GtBox {
        center: [x, y, 0.5],
        size: [1.9, 4.5, 1.6],
        yaw: 0.3,
        velocity: [2.0, -1.0],
        class,
        track_id: 0,
    }
}

fn bce(x: f64, y: f64) -> f64 {
    let p = 1.0 / (1.0 + (-x).exp());
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// One layer with the given logits and decoded boxes as tape leaves.
fn layer(g: &mut Graph<'_>, logits: Tensor, decoded: Tensor) -> Prediction {
    let logits = g.tape.leaf(logits, true);
    let decoded = g.tape.leaf(decoded, true);
    Prediction {
        logits,
        boxes: decoded,
        decoded,
    }
}

#[test]
fn focal_term_at_even_odds() {
    let (loss, _) = focal_term(0.0, true, 0.25, 2.0);
    let want = -0.25 * 0.25 * 0.5f64.ln();
    assert!((loss - want).abs() < 1e-15);
    assert!((loss - 0.04332).abs() < 1e-5);
}

#[test]
fn focal_degenerates_to_cross_entropy() {
    // with γ = 0 the positive term carries α and the negative term 1 − α,
    // so α = 1 recovers BCE on positives and α = 0 on negatives
    for x in [-6.0, -1.3, -0.2, 0.0, 0.4, 2.5, 9.0] {
        assert!((focal_term(x, true, 1.0, 0.0).0 - bce(x, 1.0)).abs() < 1e-12);
        assert!((focal_term(x, false, 0.0, 0.0).0 - bce(x, 0.0)).abs() < 1e-12);
    }
}

#[test]
fn focal_term_vanishes_when_confidently_correct() {
    assert!(focal_term(40.0, true, 0.25, 2.0).0 < 1e-30);
    assert!(focal_term(-40.0, false, 0.25, 2.0).0 < 1e-30);
}

#[test]
fn focal_derivative_matches_finite_differences() {
    for pos in [true, false] {
        for x in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let num = (focal_term(x + h, pos, 0.25, 2.0).0 - focal_term(x - h, pos, 0.25, 2.0).0) / (2.0 * h);
            let ana = focal_term(x, pos, 0.25, 2.0).1;
            assert!((num - ana).abs() < 1e-8, "{pos} {x}: {num} vs {ana}");
        }
    }
}

#[test]
fn box_error_is_a_weighted_mean_over_dimensions() {
    let store = ParamStore::new();
    let cfg = LossConfig::default();
    let b = gt(3.0, -2.0, 0);
    let mut target = b.encode().to_vec();
    let mut g = Graph::new(&store, true);
    let p = layer(&mut g, Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap(), Tensor::new(vec![1, BOX_DIMS], target.clone()).unwrap());
    let (_, parts) = scene_loss(&mut g, &[p], std::slice::from_ref(&b), 3, &cfg).unwrap();
    assert_eq!(parts.reg, vec![0.0]);

    target[4] += 2.0;
    let mut g = Graph::new(&store, true);
    let p = layer(&mut g, Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap(), Tensor::new(vec![1, BOX_DIMS], target).unwrap());
    let (loss, parts) = scene_loss(&mut g, &[p], &[b], 3, &cfg).unwrap();
    assert!((parts.reg[0] - 0.2).abs() < 1e-15);
    let grads = g.tape.backward(loss).unwrap();
    let gd = grads.get(p.decoded).unwrap();
    assert!((gd.data()[4] - cfg.reg_weight / 10.0).abs() < 1e-15);
}

#[test]
fn box_error_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let store = ParamStore::new();
    let mut cfg = LossConfig::default();
    for w in &mut cfg.box_weights {
        *w = rng.random_range(0.5..2.0);
    }
    let objs = [gt(3.0, -2.0, 0), gt(-8.0, 5.0, 2)];
    let logits = Tensor::new(vec![3, 3], (0..9).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let decoded = Tensor::new(vec![3, BOX_DIMS], (0..30).map(|_| rng.random_range(-9.0..9.0)).collect()).unwrap();
    let eval = |d: &Tensor| {
        let mut g = Graph::new(&store, false);
        let p = layer(&mut g, logits.clone(), d.clone());
        let (l, _) = scene_loss(&mut g, &[p], &objs, 3, &cfg).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new(&store, true);
    let p = layer(&mut g, logits.clone(), decoded.clone());
    let (l, _) = scene_loss(&mut g, &[p], &objs, 3, &cfg).unwrap();
    let grads = g.tape.backward(l).unwrap();
    let ana = grads.get(p.decoded).unwrap();
    let h = 1e-5;
    for k in 0..decoded.numel() {
        let mut up = decoded.clone();
        up.data_mut()[k] += h;
        let mut down = decoded.clone();
        down.data_mut()[k] -= h;
        let num = (eval(&up) - eval(&down)) / (2.0 * h);
        assert!((num - ana.data()[k]).abs() < 1e-6, "entry {k}: {num} vs {}", ana.data()[k]);
    }
}

#[test]
fn regression_weight_scales_only_the_regression_part() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let store = ParamStore::new();
    let objs = [gt(1.0, 1.0, 1)];
    let logits = Tensor::new(vec![1, 3], (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let decoded = Tensor::new(vec![1, BOX_DIMS], (0..10).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
    let run = |cfg: &LossConfig| {
        let mut g = Graph::new(&store, false);
        let p = layer(&mut g, logits.clone(), decoded.clone());
        let (l, parts) = scene_loss(&mut g, &[p, p], &objs, 3, cfg).unwrap();
        (g.value(l).item(), parts)
    };
    let base = LossConfig::default();
    let doubled = LossConfig {
        reg_weight: 2.0 * base.reg_weight,
        ..base.clone()
    };
    let (l1, p1) = run(&base);
    let (l2, p2) = run(&doubled);
    assert_eq!(p1, p2);
    let reg: f64 = p1.reg.iter().sum();
    let cls: f64 = p1.cls.iter().sum();
    assert_eq!(p1.cls.len(), 2);
    assert!((l1 - (base.cls_weight * cls + base.reg_weight * reg)).abs() < 1e-12);
    assert!(((l2 - l1) - base.reg_weight * reg).abs() < 1e-12);
}

#[test]
fn empty_ground_truth_leaves_only_background_focal() {
    let store = ParamStore::new();
    let cfg = LossConfig::default();
    let logits = Tensor::new(vec![2, 3], vec![-1.0, 0.5, 2.0, 0.0, -3.0, 1.0]).unwrap();
    let mut g = Graph::new(&store, false);
    let p = layer(&mut g, logits.clone(), Tensor::zeros(&[2, BOX_DIMS]));
    let (l, parts) = scene_loss(&mut g, &[p], &[], 3, &cfg).unwrap();
    let want: f64 = logits.data().iter().map(|&x| focal_term(x, false, cfg.focal_alpha, cfg.focal_gamma).0).sum();
    assert_eq!(parts.reg, vec![0.0]);
    assert!((parts.cls[0] - want).abs() < 1e-12);
    assert!((g.value(l).item() - cfg.cls_weight * want).abs() < 1e-12);
    assert!(g.value(l).item() >= 0.0);
}

#[test]
fn match_cost_shape_and_diagonal() {
    let cfg = LossConfig::default();
    let objs = [gt(0.0, 0.0, 0), gt(10.0, 4.0, 1), gt(-7.0, 2.0, 2)];
    let mut logits = vec![-20.0; 9];
    let mut decoded = Vec::new();
    for (i, b) in objs.iter().enumerate() {
        logits[i * 3 + b.class] = 20.0;
        decoded.extend(b.encode());
    }
    let c = match_cost(
        &Tensor::new(vec![3, 3], logits).unwrap(),
        &Tensor::new(vec![3, BOX_DIMS], decoded).unwrap(),
        &objs,
        &cfg,
    );
    assert_eq!(c.len(), 9);
    for i in 0..3 {
        assert!(c[i * 3 + i] < 1e-9);
        for j in (0..3).filter(|&j| j != i) {
            assert!(c[i * 3 + j] > 1.0);
        }
    }
}

#[test]
fn zero_heads_decode_to_the_reference_point() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let range = WorldRange::default();
    let heads = Heads::new(&mut store, &mut rng, 8, 3, range);
    heads.zero(&mut store);
    let mut g = Graph::new(&store, false);
    let f = g.constant(Tensor::new(vec![2, 8], (0..16).map(|k| k as f64 * 0.1).collect()).unwrap());
    let refs = g.constant(Tensor::new(vec![2, 3], vec![0.5, 0.5, 0.5, 0.25, 0.75, 0.0]).unwrap());
    let p = heads.predict(&mut g, f, refs).unwrap();
    assert!(g.value(p.logits).data().iter().all(|&x| x == 0.0));
    let dets = decode(g.value(p.logits), g.value(p.decoded));
    assert_eq!(dets[0].center, range.denormalize([0.5, 0.5, 0.5]));
    assert_eq!(dets[1].center, range.denormalize([0.25, 0.75, 0.0]));
    assert_eq!(dets[0].size, [1.0; 3]);
    assert_eq!(dets[0].score, 0.5);
}
