//! Run configuration: a flat TOML file with one table per command.
//!
//! Every field is optional in the file; `resolve` fills defaults and the
//! resolved form, with every field present, is written next to the outputs.
//! Relative paths are taken relative to the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tensorformer::attention::AttentionKind;
use tensorformer::checks::{GradScope, SpreadConfig};
use tensorformer::geometry::Shape;
use tensorformer::metrics::Norm;
use tensorformer::network::{MeshSettings, NetworkConfig, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub net: Option<NetSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconstruct: Option<ReconstructSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradcheckSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchSection>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))
    }

    /// Reads `path`, or returns an empty config when there is none.
    /// Relative paths inside are rebased onto the file's directory.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        if let Some(r) = &mut self.reconstruct {
            fix(&mut r.checkpoint);
            fix(&mut r.cloud);
        }
        if let Some(e) = &mut self.eval {
            fix(&mut e.mesh);
            fix(&mut e.reference);
            fix(&mut e.pred_grid);
            fix(&mut e.truth_grid);
        }
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn bad(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("`{key}`: {msg}"))
}

fn parse_shape(key: &str, s: &str) -> CliResult<Shape> {
    s.parse().map_err(|e| bad(key, e))
}

/// Absolute form of a path for the resolved config.
fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    /// `desk` (default) or `paper`.
    pub preset: Option<String>,
    pub attention: Option<String>,
    pub block_dims: Option<Vec<usize>>,
    pub k: Option<usize>,
    pub downsample_to: Option<usize>,
    pub transfer_k: Option<usize>,
    pub indicator_k: Option<usize>,
    pub indicator_dim: Option<usize>,
    pub head_dims: Option<Vec<usize>>,
    pub offset_scale: Option<f64>,
}

impl NetSection {
    pub fn resolve(&self) -> CliResult<NetworkConfig> {
        let mut c = match self.preset.as_deref().unwrap_or("desk") {
            "desk" => NetworkConfig::desk(),
            "paper" => NetworkConfig::default(),
            other => return Err(bad("net.preset", format!("expected desk or paper, got `{other}`"))),
        };
        if let Some(a) = &self.attention {
            c.attention = a.parse::<AttentionKind>().map_err(|e| bad("net.attention", e))?;
        }
        set(&mut c.block_dims, &self.block_dims);
        set(&mut c.k, &self.k);
        set(&mut c.downsample_to, &self.downsample_to);
        set(&mut c.transfer_k, &self.transfer_k);
        set(&mut c.indicator_k, &self.indicator_k);
        set(&mut c.indicator_dim, &self.indicator_dim);
        set(&mut c.head_dims, &self.head_dims);
        set(&mut c.offset_scale, &self.offset_scale);
        c.validate().map_err(|e| bad("net", e))?;
        Ok(c)
    }

    pub fn resolved(&self, c: &NetworkConfig) -> Self {
        Self {
            preset: Some(self.preset.clone().unwrap_or_else(|| "desk".into())),
            attention: Some(c.attention.to_string()),
            block_dims: Some(c.block_dims.clone()),
            k: Some(c.k),
            downsample_to: Some(c.downsample_to),
            transfer_k: Some(c.transfer_k),
            indicator_k: Some(c.indicator_k),
            indicator_dim: Some(c.indicator_dim),
            head_dims: Some(c.head_dims.clone()),
            offset_scale: Some(c.offset_scale),
        }
    }
}

fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
    if let Some(v) = src {
        *dst = v.clone();
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Shape spec, e.g. `sphere:0.4`. Required.
    pub shape: Option<String>,
    /// `desk` (default) or `paper` schedule.
    pub preset: Option<String>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub iterations: Option<usize>,
    pub points: Option<usize>,
    pub noise_std_fraction: Option<f64>,
    pub flip_augment: Option<bool>,
    pub fine_res: Option<usize>,
    pub coarse_res: Option<usize>,
    pub query_batch: Option<usize>,
    pub resample: Option<bool>,
    pub seed: Option<u64>,
    /// Progress line every this many iterations.
    pub log_every: Option<usize>,
}

pub struct TrainSettings {
    pub shape: Shape,
    pub train: TrainConfig,
    pub log_every: usize,
}

impl TrainSection {
    pub fn resolve(&self, seed: Option<u64>) -> CliResult<TrainSettings> {
        let shape = self
            .shape
            .as_deref()
            .ok_or_else(|| bad("train.shape", "missing required key `shape`"))?;
        let shape = parse_shape("train.shape", shape)?;
        let mut t = match self.preset.as_deref().unwrap_or("desk") {
            "desk" => TrainConfig::default(),
            "paper" => TrainConfig::paper(),
            other => return Err(bad("train.preset", format!("expected desk or paper, got `{other}`"))),
        };
        set(&mut t.learning_rate, &self.learning_rate);
        set(&mut t.batch_size, &self.batch_size);
        set(&mut t.iterations, &self.iterations);
        set(&mut t.points, &self.points);
        set(&mut t.noise_std_fraction, &self.noise_std_fraction);
        set(&mut t.flip_augment, &self.flip_augment);
        set(&mut t.fine_res, &self.fine_res);
        set(&mut t.coarse_res, &self.coarse_res);
        set(&mut t.query_batch, &self.query_batch);
        set(&mut t.resample, &self.resample);
        set(&mut t.seed, &self.seed);
        set(&mut t.seed, &seed);
        let log_every = self.log_every.unwrap_or(100);
        if log_every == 0 {
            return Err(bad("train.log_every", "must be >= 1"));
        }
        Ok(TrainSettings {
            shape,
            train: t,
            log_every,
        })
    }

    pub fn resolved(&self, s: &TrainSettings) -> Self {
        let t = &s.train;
        Self {
            shape: Some(s.shape.to_string()),
            preset: Some(self.preset.clone().unwrap_or_else(|| "desk".into())),
            learning_rate: Some(t.learning_rate),
            batch_size: Some(t.batch_size),
            iterations: Some(t.iterations),
            points: Some(t.points),
            noise_std_fraction: Some(t.noise_std_fraction),
            flip_augment: Some(t.flip_augment),
            fine_res: Some(t.fine_res),
            coarse_res: Some(t.coarse_res),
            query_batch: Some(t.query_batch),
            resample: Some(t.resample),
            seed: Some(t.seed),
            log_every: Some(s.log_every),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructSection {
    pub checkpoint: Option<PathBuf>,
    /// Point file, one `x y z` per line.
    pub cloud: Option<PathBuf>,
    /// Alternative to `cloud`: sample a noisy cloud from this shape.
    pub shape: Option<String>,
    pub points: Option<usize>,
    pub noise_std_fraction: Option<f64>,
    pub seed: Option<u64>,
    pub resolution: Option<usize>,
    pub iso: Option<f64>,
    pub smooth_iterations: Option<usize>,
    pub smooth_lambda: Option<f64>,
}

pub enum CloudSource {
    File(PathBuf),
    Shape {
        shape: Shape,
        points: usize,
        noise_std_fraction: f64,
    },
}

pub struct ReconstructSettings {
    pub checkpoint: PathBuf,
    pub source: CloudSource,
    pub seed: u64,
    pub mesh: MeshSettings,
}

impl ReconstructSection {
    pub fn resolve(&self, seed: Option<u64>) -> CliResult<ReconstructSettings> {
        let checkpoint = self
            .checkpoint
            .clone()
            .ok_or_else(|| bad("reconstruct.checkpoint", "missing required key `checkpoint`"))?;
        let source = match (&self.cloud, &self.shape) {
            (Some(_), Some(_)) => return Err(bad("reconstruct.cloud", "give either `cloud` or `shape`, not both")),
            (None, None) => return Err(bad("reconstruct.cloud", "missing `cloud` (or `shape`)")),
            (Some(p), None) => CloudSource::File(p.clone()),
            (None, Some(s)) => CloudSource::Shape {
                shape: parse_shape("reconstruct.shape", s)?,
                points: self.points.unwrap_or(3000),
                noise_std_fraction: self.noise_std_fraction.unwrap_or(0.005),
            },
        };
        let d = MeshSettings::default();
        let mesh = MeshSettings {
            resolution: self.resolution.unwrap_or(d.resolution),
            iso: self.iso.unwrap_or(d.iso),
            smooth_iterations: self.smooth_iterations.unwrap_or(d.smooth_iterations),
            smooth_lambda: self.smooth_lambda.unwrap_or(d.smooth_lambda),
        };
        if mesh.resolution < 8 {
            return Err(bad(
                "reconstruct.resolution",
                format!("must be >= 8, got {}", mesh.resolution),
            ));
        }
        Ok(ReconstructSettings {
            checkpoint,
            source,
            seed: seed.or(self.seed).unwrap_or(0),
            mesh,
        })
    }

    pub fn resolved(&self, s: &ReconstructSettings) -> Self {
        let mut out = Self {
            checkpoint: Some(absolute(&s.checkpoint)),
            seed: Some(s.seed),
            resolution: Some(s.mesh.resolution),
            iso: Some(s.mesh.iso),
            smooth_iterations: Some(s.mesh.smooth_iterations),
            smooth_lambda: Some(s.mesh.smooth_lambda),
            ..Self::default()
        };
        match &s.source {
            CloudSource::File(p) => out.cloud = Some(absolute(p)),
            CloudSource::Shape {
                shape,
                points,
                noise_std_fraction,
            } => {
                out.shape = Some(shape.to_string());
                out.points = Some(*points);
                out.noise_std_fraction = Some(*noise_std_fraction);
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Predicted mesh (OBJ).
    pub mesh: Option<PathBuf>,
    /// Reference mesh (OBJ).
    pub reference: Option<PathBuf>,
    /// Alternative to `reference`: an analytic shape.
    pub shape: Option<String>,
    pub grid_res: Option<usize>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    /// `l1` (default) or `l2` point distance for chamfer.
    pub norm: Option<String>,
    /// Margin around the meshes' bounds, as a fraction of their extent.
    pub pad: Option<f64>,
    /// Predicted occupancy grid (e.g. a reconstruction's `field.grid`). When
    /// given, IoU is taken at its sample points instead of re-voxelizing.
    pub pred_grid: Option<PathBuf>,
    /// Reference occupancy on the same grid; defaults to the reference
    /// shape or mesh sampled at `pred_grid`'s points.
    pub truth_grid: Option<PathBuf>,
}

pub enum Reference {
    Mesh(PathBuf),
    Shape(Shape),
}

pub struct EvalSettings {
    pub mesh: PathBuf,
    pub reference: Reference,
    pub grid_res: usize,
    pub samples: usize,
    pub seed: u64,
    pub norm: Norm,
    pub pad: f64,
    pub pred_grid: Option<PathBuf>,
    pub truth_grid: Option<PathBuf>,
}

impl EvalSection {
    pub fn resolve(&self, seed: Option<u64>) -> CliResult<EvalSettings> {
        let mesh = self
            .mesh
            .clone()
            .ok_or_else(|| bad("eval.mesh", "missing required key `mesh`"))?;
        let reference = match (&self.reference, &self.shape) {
            (Some(_), Some(_)) => return Err(bad("eval.reference", "give either `reference` or `shape`, not both")),
            (None, None) => return Err(bad("eval.reference", "missing `reference` (or `shape`)")),
            (Some(p), None) => Reference::Mesh(p.clone()),
            (None, Some(s)) => Reference::Shape(parse_shape("eval.shape", s)?),
        };
        let norm = match self.norm.as_deref().unwrap_or("l1") {
            "l1" => Norm::L1,
            "l2" => Norm::L2,
            other => return Err(bad("eval.norm", format!("expected l1 or l2, got `{other}`"))),
        };
        if self.truth_grid.is_some() && self.pred_grid.is_none() {
            return Err(bad("eval.truth_grid", "`truth_grid` needs `pred_grid`"));
        }
        let s = EvalSettings {
            mesh,
            reference,
            grid_res: self.grid_res.unwrap_or(64),
            samples: self.samples.unwrap_or(100_000),
            seed: seed.or(self.seed).unwrap_or(0),
            norm,
            pad: self.pad.unwrap_or(0.05),
            pred_grid: self.pred_grid.clone(),
            truth_grid: self.truth_grid.clone(),
        };
        if s.grid_res < 2 {
            return Err(bad("eval.grid_res", "must be >= 2"));
        }
        if s.samples == 0 {
            return Err(bad("eval.samples", "must be >= 1"));
        }
        if !(s.pad >= 0.0 && s.pad.is_finite()) {
            return Err(bad("eval.pad", "must be finite and >= 0"));
        }
        Ok(s)
    }

    pub fn resolved(&self, s: &EvalSettings) -> Self {
        let mut out = Self {
            mesh: Some(absolute(&s.mesh)),
            grid_res: Some(s.grid_res),
            samples: Some(s.samples),
            seed: Some(s.seed),
            norm: Some(
                match s.norm {
                    Norm::L1 => "l1",
                    Norm::L2 => "l2",
                }
                .into(),
            ),
            pad: Some(s.pad),
            ..Self::default()
        };
        match &s.reference {
            Reference::Mesh(p) => out.reference = Some(absolute(p)),
            Reference::Shape(shape) => out.shape = Some(shape.to_string()),
        }
        out.pred_grid = s.pred_grid.as_deref().map(absolute);
        out.truth_grid = s.truth_grid.as_deref().map(absolute);
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    /// `ops`, `attention`, `block` or `full`.
    pub scope: Option<String>,
    pub seed: Option<u64>,
    pub spread_seeds: Option<u64>,
    pub spread_len: Option<usize>,
    pub spread_sigma: Option<f64>,
    pub spread_threshold: Option<f64>,
}

pub struct GradcheckSettings {
    pub scope: GradScope,
    pub seed: u64,
    pub spread: SpreadConfig,
}

impl GradcheckSection {
    pub fn resolve(&self, scope: Option<&str>, seed: Option<u64>) -> CliResult<GradcheckSettings> {
        let scope = scope
            .or(self.scope.as_deref())
            .unwrap_or("full")
            .parse()
            .map_err(|e| bad("gradcheck.scope", e))?;
        let d = SpreadConfig::default();
        Ok(GradcheckSettings {
            scope,
            seed: seed.or(self.seed).unwrap_or(0),
            spread: SpreadConfig {
                seeds: self.spread_seeds.unwrap_or(d.seeds),
                len: self.spread_len.unwrap_or(d.len),
                sigma: self.spread_sigma.unwrap_or(d.sigma),
                threshold: self.spread_threshold.unwrap_or(d.threshold),
            },
        })
    }

    pub fn resolved(s: &GradcheckSettings) -> Self {
        Self {
            scope: Some(s.scope.to_string()),
            seed: Some(s.seed),
            spread_seeds: Some(s.spread.seeds),
            spread_len: Some(s.spread.len),
            spread_sigma: Some(s.spread.sigma),
            spread_threshold: Some(s.spread.threshold),
        }
    }
}

/// Kinds benchmarked by default: every distinct kernel.
pub const BENCH_KINDS: [AttentionKind; 6] = [
    AttentionKind::ScalarDot,
    AttentionKind::Vector,
    AttentionKind::MatrixSoftmax,
    AttentionKind::MatrixUnnormalized,
    AttentionKind::NormalizedMatrix,
    AttentionKind::PointConv,
];

#[derive(Clone, Debug, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub kinds: Option<Vec<String>>,
    pub ks: Option<Vec<usize>>,
    pub ds: Option<Vec<usize>>,
    pub anchors: Option<usize>,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
}

pub struct BenchSettings {
    pub kinds: Vec<AttentionKind>,
    pub ks: Vec<usize>,
    pub ds: Vec<usize>,
    pub anchors: usize,
    pub reps: usize,
    pub seed: u64,
}

impl BenchSection {
    pub fn resolve(&self, seed: Option<u64>) -> CliResult<BenchSettings> {
        let kinds = match &self.kinds {
            None => BENCH_KINDS.to_vec(),
            Some(v) => v
                .iter()
                .map(|s| s.parse().map_err(|e| bad("bench.kinds", e)))
                .collect::<CliResult<_>>()?,
        };
        let s = BenchSettings {
            kinds,
            ks: self.ks.clone().unwrap_or_else(|| vec![12, 24]),
            ds: self.ds.clone().unwrap_or_else(|| vec![16, 32, 64]),
            anchors: self.anchors.unwrap_or(64),
            reps: self.reps.unwrap_or(5),
            seed: seed.or(self.seed).unwrap_or(0),
        };
        if s.kinds.is_empty() || s.ks.is_empty() || s.ds.is_empty() {
            return Err(bad("bench", "kinds, ks and ds must be nonempty"));
        }
        if s.ks.contains(&0) || s.ds.contains(&0) {
            return Err(bad("bench", "ks and ds must be >= 1"));
        }
        if s.reps == 0 || s.anchors == 0 {
            return Err(bad("bench", "reps and anchors must be >= 1"));
        }
        Ok(s)
    }

    pub fn resolved(s: &BenchSettings) -> Self {
        Self {
            kinds: Some(s.kinds.iter().map(|k| k.to_string()).collect()),
            ks: Some(s.ks.clone()),
            ds: Some(s.ds.clone()),
            anchors: Some(s.anchors),
            reps: Some(s.reps),
            seed: Some(s.seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named() {
        let e = ConfigFile::parse("[train]\nshape = \"sphere:0.4\"\nitterations = 3\n").unwrap_err();
        assert!(e.to_string().contains("itterations"), "{e}");
        let e = ConfigFile::parse("[trian]\n").unwrap_err();
        assert!(e.to_string().contains("trian"), "{e}");
    }

    #[test]
    fn missing_shape_is_named() {
        let cfg = ConfigFile::parse("[train]\niterations = 3\n").unwrap();
        let e = cfg.train.unwrap().resolve(None).err().unwrap();
        assert!(matches!(e, CliError::Config(_)));
        assert!(e.to_string().contains("shape"), "{e}");
    }

    #[test]
    fn resolved_train_config_round_trips() {
        let cfg = ConfigFile::parse("[net]\nattention = \"vector\"\n[train]\nshape = \"sphere:0.4\"\niterations = 7\n")
            .unwrap();
        let net = cfg.net.clone().unwrap();
        let train = cfg.train.clone().unwrap();
        let n = net.resolve().unwrap();
        let t = train.resolve(Some(9)).unwrap();
        assert_eq!(t.train.seed, 9);
        let out = ConfigFile {
            net: Some(net.resolved(&n)),
            train: Some(train.resolved(&t)),
            ..ConfigFile::default()
        };
        let back = ConfigFile::parse(&out.to_text()).unwrap();
        assert_eq!(back, out);
        assert_eq!(back.net.unwrap().resolve().unwrap(), n);
        assert_eq!(back.train.unwrap().resolve(None).unwrap().train, t.train);
    }

    #[test]
    fn seed_flag_overrides_file() {
        let s = GradcheckSection {
            seed: Some(3),
            ..Default::default()
        };
        assert_eq!(s.resolve(None, None).unwrap().seed, 3);
        assert_eq!(s.resolve(None, Some(5)).unwrap().seed, 5);
        assert_eq!(s.resolve(Some("ops"), None).unwrap().scope, GradScope::Ops);
        assert!(s.resolve(Some("everything"), None).is_err());
    }

    #[test]
    fn paper_presets() {
        let cfg = ConfigFile::parse(
            "[net]\npreset = \"paper\"\n[train]\npreset = \"paper\"\nshape = \"sphere:0.4\"\niterations = 4000000\nbatch_size = 2\nlearning_rate = 1e-4\n",
        )
        .unwrap();
        let n = cfg.net.unwrap().resolve().unwrap();
        assert_eq!(n, NetworkConfig::default());
        let t = cfg.train.unwrap().resolve(None).unwrap().train;
        assert_eq!(t, TrainConfig::paper());
        t.validate(&n).unwrap();
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[eval]\nmesh = \"a.obj\"\nreference = \"/abs/b.obj\"\n").unwrap();
        let cfg = ConfigFile::load(Some(&path)).unwrap();
        let e = cfg.eval.unwrap();
        assert_eq!(e.mesh.unwrap(), dir.path().join("a.obj"));
        assert_eq!(e.reference.unwrap(), PathBuf::from("/abs/b.obj"));
    }
}
