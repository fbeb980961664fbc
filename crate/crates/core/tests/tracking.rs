use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rcfuse_core::head::Detection;
use rcfuse_core::sim::{sequence, RadarNoiseModel, SimConfig};
use rcfuse_core::tracker::{track_sequence, tracking_metrics, Labeled, Tracker, TrackerConfig};

fn det(x: f64, y: f64, vx: f64, vy: f64) -> Detection {
    Detection {
        center: [x, y, 0.0],
        size: [1.0; 3],
        yaw: 0.0,
        velocity: [vx, vy],
        class: 0,
        score: 0.9,
    }
}

fn lab(id: u64, x: f64, y: f64) -> Labeled {
    Labeled { id, xy: [x, y] }
}

#[test]
fn crossing_targets_follow_the_cheapest_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = TrackerConfig {
        match_radius: 3.0,
        ..TrackerConfig::default()
    };
    let mut checked = 0;
    for _ in 0..500 {
        // two targets converging then crossing in y
        let gap = rng.random_range(0.5..3.0);
        let vy = rng.random_range(0.5..2.0);
        let vx = rng.random_range(1.0..4.0);
        let noise = 0.05;
        let mut t = Tracker::new(cfg.clone());
        let mut pos = [[0.0, 0.0], [0.0, gap]];
        let vel = [[vx, vy], [vx, -vy]];
        let ids = t.step(&[det(0.0, 0.0, vx, vy), det(0.0, gap, vx, -vy)], 1.0).unwrap();
        let (id_a, id_b) = (ids[0].1, ids[1].1);
        for _ in 0..4 {
            for k in 0..2 {
                pos[k][0] += vel[k][0];
                pos[k][1] += vel[k][1];
            }
            let dets: Vec<Detection> = (0..2)
                .map(|k| {
                    let (nx, ny) = (rng.random_range(-noise..noise), rng.random_range(-noise..noise));
                    det(pos[k][0] + nx, pos[k][1] + ny, vel[k][0], vel[k][1])
                })
                .collect();
            // oracle: cheaper of the two pairings of predicted tracks to detections
            let pred: Vec<[f64; 2]> = t
                .tracks
                .iter()
                .map(|tr| [tr.center[0] + tr.velocity[0], tr.center[1] + tr.velocity[1]])
                .collect();
            let ids_before: Vec<u64> = t.tracks.iter().map(|tr| tr.id).collect();
            let d = |i: usize, j: usize| (pred[i][0] - dets[j].center[0]).hypot(pred[i][1] - dets[j].center[1]);
            let straight = d(0, 0) + d(1, 1);
            let swapped = d(0, 1) + d(1, 0);
            let want = if straight <= swapped {
                [ids_before[0], ids_before[1]]
            } else {
                [ids_before[1], ids_before[0]]
            };
            let got = t.step(&dets, 1.0).unwrap();
            // near the crossing point both pairings cost about the same
            let separation = (pos[0][0] - pos[1][0]).hypot(pos[0][1] - pos[1][1]);
            if separation > 0.5 {
                assert_eq!([got[0].1, got[1].1], want);
                checked += 1;
            }
        }
        let last: Vec<u64> = t.tracks.iter().map(|tr| tr.id).collect();
        assert_eq!(last, vec![id_a, id_b]);
    }
    assert!(checked > 1500, "{checked}");
}

#[test]
fn equal_distances_break_ties_by_detection_then_track() {
    let mut t = Tracker::new(TrackerConfig::default());
    t.step(&[det(0.0, 1.0, 0.0, 0.0), det(0.0, -1.0, 0.0, 0.0)], 1.0).unwrap();
    let ids = t.step(&[det(0.0, 0.0, 0.0, 0.0), det(0.0, 0.0, 0.0, 0.0)], 1.0).unwrap();
    // every pair is 1 m apart: detection 0 takes the lower track id
    assert_eq!(ids, vec![(0, 0), (1, 1)]);
}

#[test]
fn track_count_never_exceeds_detections_seen() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = Tracker::new(TrackerConfig::default());
    let mut seen = 0;
    for _ in 0..50 {
        let n = rng.random_range(0..6);
        let dets: Vec<Detection> = (0..n)
            .map(|_| det(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), 0.0, 0.0))
            .collect();
        seen += n;
        t.step(&dets, 0.5).unwrap();
        assert!(t.tracks.len() <= seen);
        let mut ids: Vec<u64> = t.tracks.iter().map(|tr| tr.id).collect();
        ids.dedup();
        assert_eq!(ids.len(), t.tracks.len());
    }
}

#[test]
fn oracle_detections_on_noiseless_sequences_track_perfectly() {
    let cfg = SimConfig {
        radar: RadarNoiseModel::noiseless(1),
        ..SimConfig::default()
    };
    for seed in 0..5 {
        let scenes = sequence(seed, 20, &cfg).unwrap();
        let frames: Vec<Vec<Detection>> = scenes
            .iter()
            .map(|s| s.objects.iter().map(|o| Detection::from_gt(o, 1.0)).collect())
            .collect();
        for radius in [0.1, 2.0] {
            let tcfg = TrackerConfig {
                match_radius: radius,
                ..TrackerConfig::default()
            };
            let recs = track_sequence(&frames, cfg.frame_interval, &tcfg).unwrap();
            let gt: Vec<Vec<Labeled>> = scenes
                .iter()
                .map(|s| s.objects.iter().map(|o| lab(o.track_id, o.center[0], o.center[1])).collect())
                .collect();
            let mut pred = vec![Vec::new(); scenes.len()];
            for r in &recs {
                pred[r.frame].push(lab(r.id, r.x, r.y));
            }
            let m = tracking_metrics(&gt, &pred, 2.0).unwrap();
            assert_eq!(m.ids, 0);
            assert_eq!(m.accuracy, 1.0);
        }
    }
}

#[test]
fn identical_predictions_score_perfectly() {
    let gt = vec![vec![lab(0, 0.0, 0.0), lab(1, 5.0, 0.0)]; 3];
    let m = tracking_metrics(&gt, &gt, 2.0).unwrap();
    assert_eq!((m.fp, m.fn_, m.ids, m.accuracy), (0, 0, 0, 1.0));
}

#[test]
fn missing_predictions_are_all_false_negatives() {
    let gt = vec![vec![lab(0, 0.0, 0.0), lab(1, 5.0, 0.0)]; 3];
    let m = tracking_metrics(&gt, &vec![vec![]; 3], 2.0).unwrap();
    assert_eq!(m.fn_, 6);
    assert!(m.accuracy <= 0.0);
}

#[test]
fn one_swap_counts_two_identity_switches() {
    let gt: Vec<Vec<Labeled>> = (0..4)
        .map(|f| vec![lab(0, f as f64, 0.0), lab(1, f as f64, 5.0)])
        .collect();
    let pred: Vec<Vec<Labeled>> = (0..4)
        .map(|f| {
            let (a, b) = if f < 2 { (10, 11) } else { (11, 10) };
            vec![lab(a, f as f64, 0.0), lab(b, f as f64, 5.0)]
        })
        .collect();
    let m = tracking_metrics(&gt, &pred, 2.0).unwrap();
    assert_eq!(m.ids, 2);
    assert_eq!((m.fp, m.fn_), (0, 0));
    assert!((m.accuracy - 0.75).abs() < 1e-15);
}

#[test]
fn misaligned_frames_are_rejected() {
    assert!(tracking_metrics(&[vec![]], &[], 2.0).is_err());
}
