//! Training on analytic shapes.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::TrainConfig;
use super::model::{Model, Normalization, NORMALIZED_EXTENT};
use crate::diffcore::{Adam, Bound, CosineSchedule, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{sample_surface, QuerySampler, Shape};
use crate::spatial::Point3;

/// One shape's training example in the normalized frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub cloud: Vec<Point3>,
    pub queries: Vec<Point3>,
    pub labels: Vec<f64>,
    /// First farthest-point pick.
    pub start: usize,
    /// Mirrored axis, if any.
    pub flip: Option<usize>,
    /// Map from the (mirrored) shape frame to the example frame.
    pub norm: Normalization,
}

/// Mirrors coordinate `axis` about the origin.
pub fn flip_axis(points: &mut [Point3], axis: usize) {
    points.iter_mut().for_each(|p| p[axis] = -p[axis]);
}

/// Noisy surface cloud plus labelled queries, optionally mirrored along one
/// random axis, then normalized. Labels come from the oracle before the
/// mirror is applied to both cloud and queries, so they stay consistent.
pub fn make_example<R: Rng>(
    sampler: &QuerySampler,
    cfg: &TrainConfig,
    query_batch: usize,
    rng: &mut R,
) -> Result<Example> {
    let shape = sampler.shape();
    let clean = sample_surface(shape, cfg.points, 0.0, rng)?;
    let max_side = NORMALIZED_EXTENT / Normalization::fit(&clean)?.scale;
    let std = cfg.noise_std_fraction * max_side;
    let mut cloud = if std > 0.0 {
        let noise = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        clean
            .iter()
            .map(|p| {
                [
                    p[0] + noise.sample(rng),
                    p[1] + noise.sample(rng),
                    p[2] + noise.sample(rng),
                ]
            })
            .collect()
    } else {
        clean
    };
    let (mut queries, mut labels) = sampler.sample(rng);
    if query_batch > 0 && query_batch < queries.len() {
        let keep = sample(rng, queries.len(), query_batch).into_vec();
        queries = keep.iter().map(|&i| queries[i]).collect();
        labels = keep.iter().map(|&i| labels[i]).collect();
    }
    let flip = cfg.flip_augment.then(|| rng.gen_range(0..3));
    if let Some(axis) = flip {
        flip_axis(&mut cloud, axis);
        flip_axis(&mut queries, axis);
    }
    let norm = Normalization::fit(&cloud)?;
    let start = rng.gen_range(0..cloud.len());
    Ok(Example {
        cloud: norm.apply_all(&cloud),
        queries: norm.apply_all(&queries),
        labels,
        start,
        flip,
        norm,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "iteration,loss,lr";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            writeln!(out, "{},{:e},{:e}", r.iteration, r.loss, r.lr).expect("write to string");
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Mean BCE over `examples`, built on `graph`.
pub fn batch_loss(model: &Model, graph: &mut Graph, bound: &Bound, examples: &[Example]) -> Result<Var> {
    let mut total = None;
    for ex in examples {
        let enc = model.net.encode(graph, bound, &model.config, &ex.cloud, ex.start)?;
        let o = model
            .net
            .decode(graph, bound, &model.config, &enc, enc.features, &ex.queries)?;
        let l = graph.bce(o, &ex.labels)?;
        total = Some(match total {
            None => l,
            Some(t) => graph.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("empty batch"))?;
    Ok(graph.scale(total, 1.0 / examples.len() as f64))
}

/// Adam with cosine decay over `cfg.iterations` steps. Every step draws
/// `batch_size` shapes uniformly from `shapes`. `progress` sees each record
/// as it is produced.
pub fn train(
    model: &mut Model,
    shapes: &[Shape],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&TrainRecord),
) -> Result<TrainLog> {
    if shapes.is_empty() {
        return Err(Error::invalid("training needs at least one shape"));
    }
    cfg.validate(&model.config)?;
    let samplers = shapes
        .iter()
        .map(|s| QuerySampler::new(s.clone(), cfg.fine_res, cfg.coarse_res))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fixed: Option<Vec<Example>> = if cfg.resample {
        None
    } else {
        Some(
            samplers
                .iter()
                .map(|s| make_example(s, cfg, cfg.query_batch, &mut rng))
                .collect::<Result<_>>()?,
        )
    };
    let schedule = CosineSchedule {
        initial: cfg.learning_rate,
        total: cfg.iterations,
    };
    let mut adam = Adam::new(&model.params);
    let mut log = TrainLog::default();
    for it in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let s = rng.gen_range(0..shapes.len());
            batch.push(match &fixed {
                Some(ex) => ex[s].clone(),
                None => make_example(&samplers[s], cfg, cfg.query_batch, &mut rng)?,
            });
        }
        let mut graph = Graph::new();
        let bound = model.params.bind(&mut graph);
        let loss_var = batch_loss(model, &mut graph, &bound, &batch)?;
        let loss = graph.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: it });
        }
        let grads = graph.backward(loss_var)?;
        let grads = bound.gradients(&graph, &grads);
        let lr = schedule.lr(it);
        adam.step(&mut model.params, &grads, lr);
        let rec = TrainRecord {
            iteration: it,
            loss,
            lr,
        };
        progress(&rec);
        log.records.push(rec);
    }
    Ok(log)
}
