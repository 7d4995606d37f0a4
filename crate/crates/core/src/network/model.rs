//! The full reconstruction network and inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::NetworkConfig;
use super::fps::farthest_point_sample;
use super::layers::{occupancy_head, IndicatorLayer, TensorformerBlock};
use crate::attention::{Neighborhood, SelfPolicy};
use crate::diffcore::{Bound, Checkpoint, Graph, Linear, Mlp, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{laplacian_smooth, marching_cubes, GridSpec, TriangleMesh, VoxelGrid};
use crate::spatial::{KdTree, Point3};

/// Largest bounding-box side after normalization. Leaves a margin inside the
/// unit cube so surfaces never touch the prediction grid's boundary.
pub const NORMALIZED_EXTENT: f64 = 0.8;

/// Maps a cloud's bounding box to a cube of side [`NORMALIZED_EXTENT`]
/// centred at the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub center: Point3,
    pub scale: f64,
}

impl Normalization {
    pub fn fit(points: &[Point3]) -> Result<Self> {
        let first = *points
            .first()
            .ok_or_else(|| Error::invalid("cannot normalize an empty cloud"))?;
        let (lo, hi) = points.iter().fold((first, first), |(lo, hi), p| {
            (
                [lo[0].min(p[0]), lo[1].min(p[1]), lo[2].min(p[2])],
                [hi[0].max(p[0]), hi[1].max(p[1]), hi[2].max(p[2])],
            )
        });
        let side = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        if !(side > 0.0 && side.is_finite()) {
            return Err(Error::invalid("cloud has a degenerate bounding box"));
        }
        Ok(Self {
            center: [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])],
            scale: NORMALIZED_EXTENT / side,
        })
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        [
            (p[0] - self.center[0]) * self.scale,
            (p[1] - self.center[1]) * self.scale,
            (p[2] - self.center[2]) * self.scale,
        ]
    }

    pub fn invert(&self, p: &Point3) -> Point3 {
        [
            p[0] / self.scale + self.center[0],
            p[1] / self.scale + self.center[1],
            p[2] / self.scale + self.center[2],
        ]
    }

    pub fn apply_all(&self, points: &[Point3]) -> Vec<Point3> {
        points.iter().map(|p| self.apply(p)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub embed: Linear,
    pub down: IndicatorLayer,
    pub blocks: Vec<TensorformerBlock>,
    pub up: IndicatorLayer,
    pub indicator: IndicatorLayer,
    pub head: Mlp,
}

/// Per-point features of a cloud, ready for occupancy queries.
pub struct Encoded {
    pub tree: KdTree,
    pub features: Var,
}

impl Network {
    pub fn new(store: &mut ParamStore, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let dims = &cfg.block_dims;
        let d0 = dims[0];
        let d = cfg.out_dim();
        let embed = Linear::new(store, "embed", 3, d0, rng);
        let down = IndicatorLayer::new(store, "down", d0, cfg.offset_scale, rng)?;
        let blocks = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| TensorformerBlock::new(store, &format!("block{i}"), cfg.attention, w[0], w[1], rng))
            .collect::<Result<_>>()?;
        let up = IndicatorLayer::new(store, "up", d, cfg.offset_scale, rng)?;
        let indicator = IndicatorLayer::new(store, "indicator", d, cfg.offset_scale, rng)?;
        let head = occupancy_head(store, "head", d, cfg.indicator_dim, &cfg.head_dims, rng)?;
        Ok(Self {
            embed,
            down,
            blocks,
            up,
            indicator,
            head,
        })
    }

    /// Embedding and blocks applied to `points` with their own k-neighbourhood.
    pub fn backbone(&self, graph: &mut Graph, params: &Bound, points: &[Point3], k: usize) -> Result<Var> {
        let x = graph.constant(points_tensor(points)?);
        let e = self.embed.forward(graph, params, x)?;
        let f = graph.relu(e);
        let nbr = Neighborhood::knn(points, k, SelfPolicy::Include)?;
        self.run_blocks(graph, params, f, &nbr)
    }

    fn run_blocks(&self, graph: &mut Graph, params: &Bound, mut f: Var, nbr: &Neighborhood) -> Result<Var> {
        for b in &self.blocks {
            f = b.forward(graph, params, f, nbr)?;
        }
        Ok(f)
    }

    /// Embeds the cloud, moves features to `downsample_to` farthest points
    /// (first pick `start`), runs the blocks there and moves them back.
    pub fn encode(
        &self,
        graph: &mut Graph,
        params: &Bound,
        cfg: &NetworkConfig,
        cloud: &[Point3],
        start: usize,
    ) -> Result<Encoded> {
        if cloud.len() <= cfg.downsample_to {
            return Err(Error::invalid(format!(
                "cloud of {} points must exceed downsample_to = {}",
                cloud.len(),
                cfg.downsample_to
            )));
        }
        let tree = KdTree::build(cloud);
        let x = graph.constant(points_tensor(cloud)?);
        let e = self.embed.forward(graph, params, x)?;
        let e = graph.relu(e);

        let picks = farthest_point_sample(cloud, cfg.downsample_to, start)?;
        let coarse: Vec<Point3> = picks.iter().map(|&i| cloud[i]).collect();
        let down = Neighborhood::query(&tree, &coarse, cfg.transfer_k.min(cloud.len()))?;
        let f = self.down.forward(graph, params, e, &down)?;

        let nbr = Neighborhood::knn(&coarse, cfg.k, SelfPolicy::Include)?;
        let f = self.run_blocks(graph, params, f, &nbr)?;

        let coarse_tree = KdTree::build(&coarse);
        let up = Neighborhood::query(&coarse_tree, cloud, cfg.transfer_k.min(coarse.len()))?;
        let features = self.up.forward(graph, params, f, &up)?;
        Ok(Encoded { tree, features })
    }

    /// Occupancy probabilities `[Q]` of `queries`.
    pub fn decode(
        &self,
        graph: &mut Graph,
        params: &Bound,
        cfg: &NetworkConfig,
        enc: &Encoded,
        features: Var,
        queries: &[Point3],
    ) -> Result<Var> {
        if queries.is_empty() {
            return Err(Error::invalid("no query points"));
        }
        let nbr = Neighborhood::query(&enc.tree, queries, cfg.indicator_k.min(enc.tree.len()))?;
        let g = self.indicator.forward(graph, params, features, &nbr)?;
        let o = self.head.forward(graph, params, g)?;
        graph.reshape(o, &[queries.len()])
    }
}

pub(crate) fn points_tensor(points: &[Point3]) -> Result<Tensor> {
    Tensor::new([points.len(), 3], points.iter().flatten().copied().collect())
}

/// Network, its parameters and the configuration that built them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: ParamStore,
    pub net: Network,
}

/// Queries evaluated per graph during inference.
const PREDICT_BATCH: usize = 4096;

impl Model {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(&mut params, &config, &mut rng)?;
        Ok(Self { config, params, net })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.params.clone());
        c.meta = self.config.to_meta();
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = NetworkConfig::from_meta(&ckpt.meta)?;
        let mut model = Self::new(config, 0)?;
        if ckpt.params.len() != model.params.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} parameters, network needs {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let src = ckpt
                .params
                .by_name(&name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter `{name}`")))?;
            model.params.assign(id, ckpt.params.get(src).clone())?;
        }
        Ok(model)
    }

    /// Occupancy of `queries` given a normalized cloud, evaluated in
    /// fixed-size batches against one shared encoding. Each query's value
    /// depends only on the query, so batching does not change results.
    pub fn predict(&self, cloud: &[Point3], queries: &[Point3]) -> Result<Vec<f64>> {
        let mut graph = Graph::new();
        let bound = self.params.bind_frozen(&mut graph);
        let enc = self.net.encode(&mut graph, &bound, &self.config, cloud, 0)?;
        let features = graph.value(enc.features).clone();
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(PREDICT_BATCH) {
            let mut g = Graph::new();
            let b = self.params.bind_frozen(&mut g);
            let f = g.constant(features.clone());
            let o = self.net.decode(&mut g, &b, &self.config, &enc, f, chunk)?;
            out.extend_from_slice(g.value(o).data());
        }
        Ok(out)
    }

    /// Occupancy at the `res^3` voxel centres of the unit cube in the cloud's
    /// normalized frame.
    pub fn predict_field(&self, cloud: &[Point3], res: usize) -> Result<PredictedField> {
        if res < 8 {
            return Err(Error::invalid(format!("prediction resolution must be >= 8, got {res}")));
        }
        let norm = Normalization::fit(cloud)?;
        let local = norm.apply_all(cloud);
        let spec = GridSpec::unit(res)?;
        let values = self.predict(&local, &spec.points())?;
        Ok(PredictedField {
            grid: VoxelGrid::new(spec, values)?,
            norm,
        })
    }
}

/// Surface extraction settings applied to a predicted field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshSettings {
    pub resolution: usize,
    pub iso: f64,
    pub smooth_iterations: usize,
    pub smooth_lambda: f64,
}

impl Default for MeshSettings {
    fn default() -> Self {
        Self {
            resolution: 64,
            iso: 0.5,
            smooth_iterations: 3,
            smooth_lambda: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub field: PredictedField,
    /// In the input cloud's frame; may be empty.
    pub mesh: TriangleMesh,
}

impl Model {
    /// Field, marching cubes, smoothing, then back to the cloud's frame.
    pub fn reconstruct(&self, cloud: &[Point3], settings: &MeshSettings) -> Result<Reconstruction> {
        let field = self.predict_field(cloud, settings.resolution)?;
        let mesh = marching_cubes(&field.grid, settings.iso)?;
        let mut mesh = laplacian_smooth(&mesh, settings.smooth_iterations, settings.smooth_lambda)?;
        for v in &mut mesh.vertices {
            *v = field.norm.invert(v);
        }
        Ok(Reconstruction { field, mesh })
    }
}

/// Occupancy grid in normalized coordinates plus the map back to the input frame.
#[derive(Clone, Debug)]
pub struct PredictedField {
    pub grid: VoxelGrid,
    pub norm: Normalization,
}

impl PredictedField {
    /// Grid sample positions in the input frame.
    pub fn world_points(&self) -> Vec<Point3> {
        self.grid.spec.points().iter().map(|p| self.norm.invert(p)).collect()
    }

    /// The same values on the grid mapped into the input frame.
    pub fn world_grid(&self) -> Result<VoxelGrid> {
        let s = &self.grid.spec;
        let spec = GridSpec::new(s.res, self.norm.invert(&s.origin), s.h / self.norm.scale)?;
        VoxelGrid::new(spec, self.grid.values().to_vec())
    }
}
