use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attention::{AttentionKind, Neighborhood, SelfPolicy};
use crate::diffcore::{grad_check, Activation, Checkpoint, Graph, Linear, Mlp, ParamStore, Tensor};
use crate::geometry::{QuerySampler, Shape};
use crate::spatial::Point3;

fn random_points(n: usize, seed: u64) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            [
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
            ]
        })
        .collect()
}

fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        [rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn tiny_config(kind: AttentionKind) -> NetworkConfig {
    NetworkConfig {
        block_dims: vec![8, 8, 8],
        k: 4,
        downsample_to: 12,
        transfer_k: 4,
        indicator_k: 4,
        indicator_dim: 8,
        head_dims: vec![4, 1],
        attention: kind,
        offset_scale: DEFAULT_OFFSET_SCALE,
    }
}

fn small_train(iterations: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        points: 200,
        fine_res: 16,
        coarse_res: 4,
        query_batch: 128,
        seed,
        ..TrainConfig::default()
    }
}

fn small_net() -> NetworkConfig {
    NetworkConfig {
        block_dims: vec![8, 8, 8],
        k: 8,
        downsample_to: 64,
        indicator_dim: 16,
        head_dims: vec![8, 1],
        ..NetworkConfig::default()
    }
}

fn single_layer_indicator(w: Tensor, b: Tensor) -> (ParamStore, IndicatorLayer) {
    let mut store = ParamStore::new();
    let (in_dim, out_dim) = (w.shape()[0], w.shape()[1]);
    let layer = Linear {
        weight: store.add("w", w),
        bias: store.add("b", b),
        in_dim,
        out_dim,
    };
    let omega = Mlp::from_layers(vec![layer], Activation::None).unwrap();
    (
        store,
        IndicatorLayer {
            omega,
            offset_scale: 1.0,
        },
    )
}

fn run_indicator(store: &ParamStore, layer: &IndicatorLayer, features: Tensor, nbr: &Neighborhood) -> Tensor {
    let mut g = Graph::new();
    let b = store.bind_frozen(&mut g);
    let f = g.constant(features);
    let out = layer.forward(&mut g, &b, f, nbr).unwrap();
    g.value(out).clone()
}

#[test]
fn indicator_with_unit_omega_copies_single_neighbour() {
    let (store, layer) = single_layer_indicator(Tensor::zeros([3, 4]), Tensor::filled([4], 1.0));
    let features = random_tensor(3, 4, 0);
    let nbr = Neighborhood::new(2, 1, vec![2, 0], vec![[0.3, 0.1, 0.0], [-0.2, 0.0, 0.5]]).unwrap();
    let out = run_indicator(&store, &layer, features.clone(), &nbr);
    assert_eq!(out.row(0), features.row(2));
    assert_eq!(out.row(1), features.row(0));
}

#[test]
fn indicator_with_zero_omega_is_zero() {
    let (store, layer) = single_layer_indicator(Tensor::zeros([3, 4]), Tensor::zeros([4]));
    let nbr = Neighborhood::new(
        1,
        3,
        vec![0, 1, 2],
        vec![[0.1, 0.0, 0.0], [0.0, 0.2, 0.0], [0.0, 0.0, 0.3]],
    )
    .unwrap();
    let out = run_indicator(&store, &layer, random_tensor(3, 4, 1), &nbr);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn indicator_hand_example() {
    let (store, layer) = single_layer_indicator(Tensor::identity(3), Tensor::zeros([3]));
    let features = Tensor::matrix(&[[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]]);
    // Stored offsets are p - q; Ω sees q - p = (1,0,0) and (0,1,0).
    let nbr = Neighborhood::new(1, 2, vec![0, 1], vec![[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]).unwrap();
    let out = run_indicator(&store, &layer, features, &nbr);
    assert_eq!(out.data(), &[1.0, 2.0, 0.0]);
}

#[test]
fn indicator_rejects_wrong_width() {
    let (store, layer) = single_layer_indicator(Tensor::zeros([3, 4]), Tensor::zeros([4]));
    let nbr = Neighborhood::new(1, 1, vec![0], vec![[0.0; 3]]).unwrap();
    let mut g = Graph::new();
    let b = store.bind_frozen(&mut g);
    let f = g.constant(random_tensor(2, 3, 0));
    assert!(layer.forward(&mut g, &b, f, &nbr).is_err());
}

#[test]
fn block_is_identity_when_output_layer_is_zero() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let block = TensorformerBlock::new(&mut store, "b", AttentionKind::NormalizedMatrix, 6, 6, &mut rng).unwrap();
    block.lin_out.zero(&mut store);
    let pts = random_points(20, 5);
    let nbr = Neighborhood::knn(&pts, 5, SelfPolicy::Include).unwrap();
    let x = random_tensor(20, 6, 6);
    let mut g = Graph::new();
    let b = store.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let y = block.forward(&mut g, &b, xv, &nbr).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn widening_block_has_no_residual_and_right_shape() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let block = TensorformerBlock::new(&mut store, "b", AttentionKind::Vector, 3, 5, &mut rng).unwrap();
    assert!(!block.residual());
    let pts = random_points(10, 1);
    let nbr = Neighborhood::knn(&pts, 4, SelfPolicy::Include).unwrap();
    let mut g = Graph::new();
    let b = store.bind_frozen(&mut g);
    let xv = g.constant(random_tensor(10, 3, 2));
    let y = block.forward(&mut g, &b, xv, &nbr).unwrap();
    assert_eq!(g.shape(y), &[10, 5]);
}

#[test]
fn block_gradients_match_finite_differences() {
    for kind in AttentionKind::ALL {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let block = TensorformerBlock::new(&mut store, "b", kind, 3, 4, &mut rng).unwrap();
        let pts = random_points(8, 3);
        let nbr = Neighborhood::knn(&pts, 3, SelfPolicy::Include).unwrap();
        let x = random_tensor(8, 3, 9);
        let report = grad_check(&store, 1e-4, |g, b| {
            let xv = g.constant(x.clone());
            let y = block.forward(g, b, xv, &nbr)?;
            let y = g.sigmoid(y);
            let w = g.constant(random_tensor(8, 4, 10));
            let h = g.hadamard(y, w)?;
            Ok(g.sum(h))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{kind}: {report:?}");
    }
}

#[test]
fn zeroed_head_outputs_one_half() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let head = occupancy_head(&mut store, "h", 4, 8, &[3, 1], &mut rng).unwrap();
    head.zero(&mut store);
    let mut g = Graph::new();
    let b = store.bind_frozen(&mut g);
    let x = g.constant(random_tensor(5, 4, 1));
    let o = head.forward(&mut g, &b, x).unwrap();
    assert!(g.value(o).data().iter().all(|&v| v == 0.5));
    assert!(occupancy_head(&mut store, "bad", 4, 8, &[3, 2], &mut rng).is_err());
}

#[test]
fn head_is_monotone_in_final_bias() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let head = occupancy_head(&mut store, "h", 4, 8, &[3, 1], &mut rng).unwrap();
    let x = random_tensor(30, 4, 3);
    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let o = head.forward(&mut g, &b, xv).unwrap();
        g.value(o).data().to_vec()
    };
    let before = eval(&store);
    let bias = head.layers().last().unwrap().bias;
    store.get_mut(bias).data_mut()[0] += 0.5;
    let after = eval(&store);
    assert!(before.iter().zip(&after).all(|(a, b)| b > a && *b < 1.0 && *a > 0.0));
}

#[test]
fn full_network_gradients_match_finite_differences() {
    for seed in 0..3 {
        let model = Model::new(tiny_config(AttentionKind::NormalizedMatrix), seed).unwrap();
        let cloud = random_points(32, seed + 100);
        let queries = random_points(16, seed + 200);
        let labels: Vec<f64> = queries
            .iter()
            .map(|q| f64::from(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] < 0.09))
            .collect();
        let report = grad_check(&model.params, 1e-4, |g, b| {
            let enc = model.net.encode(g, b, &model.config, &cloud, 0)?;
            let o = model.net.decode(g, b, &model.config, &enc, enc.features, &queries)?;
            g.bce(o, &labels)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
        assert!(report.skipped * 100 < report.checked, "{report:?}");
    }
}

#[test]
fn backbone_is_permutation_equivariant() {
    let model = Model::new(tiny_config(AttentionKind::NormalizedMatrix), 1).unwrap();
    let pts = random_points(40, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut perm: Vec<usize> = (0..pts.len()).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let permuted: Vec<Point3> = perm.iter().map(|&i| pts[i]).collect();
    let run = |p: &[Point3]| {
        let mut g = Graph::new();
        let b = model.params.bind_frozen(&mut g);
        let f = model.net.backbone(&mut g, &b, p, 6).unwrap();
        g.value(f).clone()
    };
    let a = run(&pts);
    let b = run(&permuted);
    for (row, &src) in perm.iter().enumerate() {
        assert_eq!(b.row(row), a.row(src));
    }
}

#[test]
fn encode_needs_more_points_than_downsample_target() {
    let model = Model::new(tiny_config(AttentionKind::Vector), 0).unwrap();
    let mut g = Graph::new();
    let b = model.params.bind_frozen(&mut g);
    assert!(model
        .net
        .encode(&mut g, &b, &model.config, &random_points(12, 0), 0)
        .is_err());
}

#[test]
fn untrained_zero_head_gives_uniform_half_field() {
    let mut model = Model::new(tiny_config(AttentionKind::NormalizedMatrix), 0).unwrap();
    model.net.head.zero(&mut model.params);
    let field = model.predict_field(&random_points(50, 1), 8).unwrap();
    assert_eq!(field.grid.values().len(), 8 * 8 * 8);
    assert_eq!(field.grid.spec.res, [8, 8, 8]);
    assert!(field.grid.values().iter().all(|&v| v == 0.5));
    assert!(model.predict_field(&random_points(50, 1), 7).is_err());
    assert!(model.predict_field(&[], 8).is_err());

    let world = field.world_grid().unwrap();
    assert_eq!(world.values(), field.grid.values());
    for (a, b) in world.spec.points().iter().zip(field.world_points()) {
        assert!((0..3).all(|i| (a[i] - b[i]).abs() < 1e-12));
    }
}

#[test]
fn prediction_does_not_depend_on_batching() {
    let model = Model::new(tiny_config(AttentionKind::NormalizedMatrix), 2).unwrap();
    let cloud = random_points(60, 4);
    let queries = random_points(5000, 5);
    let all = model.predict(&cloud, &queries).unwrap();
    let one = model.predict(&cloud, &queries[4100..4101]).unwrap();
    assert_eq!(one[0], all[4100]);
    assert!(all.iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let model = Model::new(tiny_config(AttentionKind::PointConv), 6).unwrap();
    let text = model.to_checkpoint().to_text();
    let back = Model::from_checkpoint(&Checkpoint::from_text(&text, "mem").unwrap()).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.params, model.params);
    let cloud = random_points(40, 1);
    let q = random_points(30, 2);
    assert_eq!(back.predict(&cloud, &q).unwrap(), model.predict(&cloud, &q).unwrap());

    let other = Model::new(small_net(), 0).unwrap();
    let mut ckpt = other.to_checkpoint();
    ckpt.meta = model.config.to_meta();
    assert!(Model::from_checkpoint(&ckpt).is_err());
}

#[test]
fn augmented_labels_match_the_mirrored_shape() {
    // Off-centre and asymmetric, so a label computed in the wrong frame shows.
    let shape = Shape::union(
        Shape::sphere(0.25),
        Shape::Box {
            center: [0.3, 0.1, -0.05],
            half: [0.1, 0.15, 0.1],
        },
    );
    let sampler = QuerySampler::new(shape.clone(), 16, 4).unwrap();
    let cfg = small_train(1, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut seen = [false; 3];
    for _ in 0..12 {
        let ex = make_example(&sampler, &cfg, 0, &mut rng).unwrap();
        let axis = ex.flip.expect("flip augmentation is on");
        seen[axis] = true;
        for (q, &y) in ex.queries.iter().zip(&ex.labels) {
            let mut w = ex.norm.invert(q);
            w[axis] = -w[axis];
            assert_eq!(shape.occupancy(&w), y);
        }
    }
    assert_eq!(seen, [true; 3]);
}

#[test]
fn example_cloud_fits_the_normalized_extent() {
    let sampler = QuerySampler::new(Shape::sphere(0.3), 16, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ex = make_example(&sampler, &small_train(1, 0), 100, &mut rng).unwrap();
    assert_eq!(ex.queries.len(), 100);
    assert_eq!(ex.cloud.len(), 200);
    let side = (0..3)
        .map(|a| {
            let (lo, hi) = ex
                .cloud
                .iter()
                .fold((f64::MAX, f64::MIN), |(l, h), p| (l.min(p[a]), h.max(p[a])));
            hi - lo
        })
        .fold(0.0, f64::max);
    assert!((side - NORMALIZED_EXTENT).abs() < 1e-12);
}

#[test]
fn training_is_deterministic() {
    let shapes = [Shape::sphere(0.4)];
    let run = || {
        let mut model = Model::new(small_net(), 0).unwrap();
        let log = train(&mut model, &shapes, &small_train(4, 9), |_| {}).unwrap();
        (log, model.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(pa, pb);
    assert_eq!(a.records.len(), 4);
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let mut model = Model::new(small_net(), 0).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        resample: false,
        ..small_train(5, 2)
    };
    let before = model.params.clone();
    let log = train(&mut model, &[Shape::sphere(0.4)], &cfg, |_| {}).unwrap();
    let l = log.losses();
    assert!(l.iter().all(|&v| v == l[0]), "{l:?}");
    assert_eq!(model.params, before);
}

#[test]
fn loss_decreases_on_the_sphere() {
    let shapes = [Shape::sphere(0.4)];
    let mut first = Vec::new();
    let mut last = Vec::new();
    for seed in 0..5 {
        let net = NetworkConfig {
            downsample_to: 128,
            ..small_net()
        };
        let cfg = TrainConfig {
            points: 500,
            fine_res: 32,
            coarse_res: 8,
            query_batch: 256,
            learning_rate: 1e-2,
            ..small_train(300, seed)
        };
        let mut model = Model::new(net, seed).unwrap();
        let log = train(&mut model, &shapes, &cfg, |_| {}).unwrap();
        let l = log.losses();
        first.push(l[..5].iter().sum::<f64>() / 5.0);
        last.push(l[l.len() - 10..].iter().sum::<f64>() / 10.0);
    }
    first.sort_by(f64::total_cmp);
    last.sort_by(f64::total_cmp);
    assert!(last[2] < 0.5 * first[2], "initial {first:?} final {last:?}");
}

#[test]
fn training_rejects_bad_input() {
    let mut model = Model::new(small_net(), 0).unwrap();
    assert!(train(&mut model, &[], &small_train(1, 0), |_| {}).is_err());
    let too_few = TrainConfig {
        points: 64,
        ..small_train(1, 0)
    };
    assert!(train(&mut model, &[Shape::sphere(0.4)], &too_few, |_| {}).is_err());
}

#[test]
fn train_log_csv() {
    let log = TrainLog {
        records: vec![TrainRecord {
            iteration: 0,
            loss: 0.5,
            lr: 1e-3,
        }],
    };
    assert_eq!(log.to_csv(), "iteration,loss,lr\n0,5e-1,1e-3\n");
}
