use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rcfuse_core::geometry::{DepthBins, WorldRange};
use rcfuse_core::nn::{Graph, ParamStore};
use rcfuse_core::pos_embed::{PeEncoders, SinCos};
use rcfuse_core::radar::BevGeometry;
use rcfuse_core::sim::CameraRig;
use rcfuse_core::Tensor;

/// Smallest pairwise L2 distance among rows, or stops early once a pair
/// closer than `floor` is found.
fn min_row_distance(t: &Tensor, floor: f64) -> f64 {
    let n = t.shape()[0];
    let floor2 = floor * floor;
    let mut best = f64::INFINITY;
    for i in 0..n {
        let a = t.row(i);
        for j in i + 1..n {
            let b = t.row(j);
            let mut d2 = 0.0;
            for (x, y) in a.iter().zip(b) {
                d2 += (x - y) * (x - y);
                if d2 >= best {
                    break;
                }
            }
            if d2 < best {
                best = d2;
                if best < floor2 {
                    return best.sqrt();
                }
            }
        }
    }
    best.sqrt()
}

fn encoders(dim: usize, seed: u64) -> (ParamStore, PeEncoders) {
    let mut store = ParamStore::new();
    let enc = PeEncoders::new(
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(seed),
        dim,
        16,
        DepthBins::linear(16, 1.0, 40.0).unwrap(),
        WorldRange::default(),
    );
    (store, enc)
}

#[test]
fn grid_codes_are_pairwise_distinct() {
    let geom = BevGeometry::new(&WorldRange::default(), 128, 128).unwrap();
    let centers = geom.normalized_centers();
    let s = SinCos::new(16);
    let rows: Vec<Vec<f64>> = (0..centers.shape()[0]).map(|i| s.encode(centers.row(i))).collect();
    let codes = Tensor::from_rows(&rows);
    let d = min_row_distance(&codes, 1e-6);
    assert!(d > 1e-6, "closest pair at {d:e}");
}

#[test]
fn radar_token_embeddings_are_pairwise_distinct() {
    let geom = BevGeometry::new(&WorldRange::default(), 128, 128).unwrap();
    let (store, enc) = encoders(32, 1);
    let mut g = Graph::new(&store, false);
    let pe = enc.radar_token_pe(&mut g, &geom.normalized_centers()).unwrap();
    let d = min_row_distance(g.value(pe), 1e-6);
    assert!(d > 1e-6, "closest pair at {d:e}");
}

#[test]
fn repeated_inputs_give_identical_codes() {
    let s = SinCos::new(8);
    assert_eq!(s.encode(&[0.3, 0.9]), s.encode(&[0.3, 0.9]));
    assert_eq!(s.dim(2), 32);
    let mid = s.encode(&[0.5, 0.5]);
    assert_eq!(&mid[..16], &mid[16..]);
}

#[test]
fn identical_cameras_give_identical_token_embeddings() {
    let (store, enc) = encoders(16, 2);
    assert_eq!(enc.image_input_dim(), 48);
    let rig = CameraRig {
        yaws: vec![0.3, 0.3],
        ..CameraRig::default()
    };
    let calibs = rig.calibrations().unwrap();
    let mut g = Graph::new(&store, false);
    let a = enc.image_token_pe(&mut g, &calibs[0]).unwrap();
    let b = enc.image_token_pe(&mut g, &calibs[1]).unwrap();
    assert_eq!(g.value(a), g.value(b));
    let (h, w) = calibs[0].feature_size();
    assert_eq!(g.value(a).shape(), &[h * w, 16]);
}

#[test]
fn image_query_embedding_sees_the_tiled_reference() {
    let (store, enc) = encoders(16, 3);
    let refs = [0.2, 0.7, 0.4, 0.9, 0.1, 0.55];
    let mut g = Graph::new(&store, false);
    let r = g.constant(Tensor::new(vec![2, 3], refs.to_vec()).unwrap());
    let (_, pe_3d) = enc.query_pe(&mut g, r).unwrap();
    let tiled: Vec<Vec<f64>> = refs.chunks(3).map(|p| p.repeat(16)).collect();
    assert_eq!(tiled[0].len(), 48);
    let t = g.constant(Tensor::from_rows(&tiled));
    let direct = enc.phi_im.forward(&mut g, t).unwrap();
    assert_eq!(g.value(pe_3d), g.value(direct));
}
