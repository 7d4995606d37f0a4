//! Gradient verification suites and the softmax/linear gradient-spread
//! comparison, shared by the command line and the acceptance tests.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{AttentionKind, AttentionLayer, Neighborhood, SelfPolicy};
use crate::diffcore::{grad_check, Bound, DenomPolicy, GradCheckReport, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig, TensorformerBlock};
use crate::spatial::Point3;

/// Finite-difference step used by every suite.
pub const GRADCHECK_EPS: f64 = 1e-4;
/// Largest accepted relative error.
pub const GRADCHECK_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    Ops,
    Attention,
    Block,
    Full,
}

impl GradScope {
    pub const ALL: [GradScope; 4] = [GradScope::Ops, GradScope::Attention, GradScope::Block, GradScope::Full];

    pub fn name(self) -> &'static str {
        match self {
            GradScope::Ops => "ops",
            GradScope::Attention => "attention",
            GradScope::Block => "block",
            GradScope::Full => "full",
        }
    }
}

impl fmt::Display for GradScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s.trim())
            .ok_or_else(|| Error::invalid(format!("unknown gradcheck scope `{s}`")))
    }
}

/// One checked unit.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub unit: String,
    pub report: GradCheckReport,
}

impl CheckRow {
    pub fn passes(&self) -> bool {
        self.report.max_rel_error < GRADCHECK_TOL
    }
}

pub const CHECK_CSV_HEADER: &str = "unit,max_rel_error,checked,skipped,pass";

pub fn checks_csv(rows: &[CheckRow]) -> String {
    let mut out = format!("{CHECK_CSV_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{:e},{},{},{}",
            r.unit,
            r.report.max_rel_error,
            r.report.checked,
            r.report.skipped,
            r.passes()
        )
        .expect("write to string");
    }
    out
}

/// Runs every unit of `scope`.
pub fn run_gradcheck(scope: GradScope, seed: u64) -> Result<Vec<CheckRow>> {
    match scope {
        GradScope::Ops => op_checks(seed),
        GradScope::Attention => AttentionKind::ALL
            .into_iter()
            .map(|kind| attention_check(kind, seed))
            .collect(),
        GradScope::Block => AttentionKind::ALL
            .into_iter()
            .flat_map(|kind| [(kind, 3, 4), (kind, 4, 4)])
            .map(|(kind, i, o)| block_check(kind, i, o, seed))
            .collect(),
        GradScope::Full => Ok(vec![full_check(seed)?]),
    }
}

/// Uniform in [-1, 1] but at least `10 * eps` from zero, so relu and abs
/// kinks are never straddled by a finite-difference step.
fn away_from_kinks(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if v.abs() > 10.0 * GRADCHECK_EPS {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized to shape")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized to shape")
}

/// Contracts `y` with a fixed random probe so every output entry matters.
fn probe_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.shape(y).to_vec();
    let p = g.constant(uniform(&mut rng, &shape));
    let h = g.hadamard(y, p)?;
    Ok(g.sum(h))
}

type OpBuilder = fn(&mut Graph, &[Var]) -> Result<Var>;

fn op_checks(seed: u64) -> Result<Vec<CheckRow>> {
    let cases: Vec<(&str, Vec<Vec<usize>>, OpBuilder)> = vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |g, v| g.sub(v[0], v[1])),
        ("hadamard", vec![vec![3, 4], vec![3, 4]], |g, v| g.hadamard(v[0], v[1])),
        ("scale", vec![vec![3, 4]], |g, v| Ok(g.scale(v[0], -1.7))),
        ("add_bias", vec![vec![3, 4], vec![4]], |g, v| g.add_bias(v[0], v[1])),
        ("scale_rows", vec![vec![3, 4], vec![3, 1]], |g, v| {
            g.scale_rows(v[0], v[1])
        }),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("relu", vec![vec![3, 4]], |g, v| Ok(g.relu(v[0]))),
        ("sigmoid", vec![vec![3, 4]], |g, v| Ok(g.sigmoid(v[0]))),
        ("sum", vec![vec![3, 4]], |g, v| {
            let s = g.sum(v[0]);
            g.hadamard(s, s)
        }),
        ("mean", vec![vec![3, 4]], |g, v| {
            let s = g.mean(v[0]);
            g.hadamard(s, s)
        }),
        ("sum_axis", vec![vec![2, 3, 4]], |g, v| g.sum_axis(v[0], 1)),
        ("reshape", vec![vec![3, 4]], |g, v| g.reshape(v[0], &[2, 6])),
        ("softmax", vec![vec![3, 4]], |g, v| g.softmax(v[0], 1)),
        ("l1_normalize", vec![vec![3, 4]], |g, v| {
            g.l1_normalize(v[0], 1, DenomPolicy::default())
        }),
        ("gather", vec![vec![4, 3]], |g, v| g.gather(v[0], &[2, 0, 2, 3])),
        ("bmv", vec![vec![3, 2, 4], vec![3, 4]], |g, v| g.bmv(v[0], v[1])),
        ("l1_bmv", vec![vec![3, 2, 4], vec![3, 4]], |g, v| {
            g.l1_bmv(v[0], v[1], DenomPolicy::default())
        }),
        ("diag_embed", vec![vec![3, 4]], |g, v| g.diag_embed(v[0])),
        ("bce", vec![vec![5]], |g, v| {
            let p = g.sigmoid(v[0]);
            g.bce(p, &[1.0, 0.0, 0.0, 1.0, 1.0])
        }),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, shapes, build))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut store = ParamStore::new();
            let ids: Vec<_> = shapes
                .iter()
                .enumerate()
                .map(|(j, s)| store.add(format!("{name}.{j}"), away_from_kinks(&mut rng, s)))
                .collect();
            let report = grad_check(&store, GRADCHECK_EPS, |g, b| {
                let vars: Vec<Var> = ids.iter().map(|&id| b.var(id)).collect();
                let y = build(g, &vars)?;
                if g.value(y).numel() == 1 {
                    Ok(y)
                } else {
                    probe_sum(g, y, seed)
                }
            })?;
            Ok(CheckRow {
                unit: format!("op:{name}"),
                report,
            })
        })
        .collect()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
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

fn attention_check(kind: AttentionKind, seed: u64) -> Result<CheckRow> {
    let (n, d, k) = (6, 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = random_points(&mut rng, n);
    let nbr = Neighborhood::knn(&pts, k, SelfPolicy::Include)?;
    let mut store = ParamStore::new();
    let layer = AttentionLayer::new(&mut store, "attn", kind, d, &mut rng)?;
    let feats = store.add("features", uniform(&mut rng, &[n, d]));
    let report = grad_check(&store, GRADCHECK_EPS, |g, b| {
        let y = layer.forward(g, b, b.var(feats), &nbr)?;
        probe_sum(g, y, seed)
    })?;
    Ok(CheckRow {
        unit: format!("attention:{kind}"),
        report,
    })
}

fn block_check(kind: AttentionKind, in_dim: usize, out_dim: usize, seed: u64) -> Result<CheckRow> {
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = random_points(&mut rng, n);
    let nbr = Neighborhood::knn(&pts, 3, SelfPolicy::Include)?;
    let mut store = ParamStore::new();
    let block = TensorformerBlock::new(&mut store, "block", kind, in_dim, out_dim, &mut rng)?;
    let x = uniform(&mut rng, &[n, in_dim]);
    let report = grad_check(&store, GRADCHECK_EPS, |g, b| {
        let xv = g.constant(x.clone());
        let y = block.forward(g, b, xv, &nbr)?;
        let y = g.sigmoid(y);
        probe_sum(g, y, seed)
    })?;
    Ok(CheckRow {
        unit: format!("block:{kind}:{in_dim}->{out_dim}"),
        report,
    })
}

/// Smallest network that still runs every stage: 32 points, width 8,
/// 16 labelled queries.
pub fn tiny_network_config() -> NetworkConfig {
    NetworkConfig {
        block_dims: vec![8, 8, 8],
        k: 4,
        downsample_to: 12,
        transfer_k: 4,
        indicator_k: 4,
        indicator_dim: 8,
        head_dims: vec![4, 1],
        ..NetworkConfig::default()
    }
}

fn full_check(seed: u64) -> Result<CheckRow> {
    let model = Model::new(tiny_network_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc10d);
    let cloud = random_points(&mut rng, 32);
    let queries = random_points(&mut rng, 16);
    let labels: Vec<f64> = queries
        .iter()
        .map(|q| f64::from(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] < 0.09))
        .collect();
    let report = grad_check(&model.params, GRADCHECK_EPS, |g: &mut Graph, b: &Bound| {
        let enc = model.net.encode(g, b, &model.config, &cloud, 0)?;
        let o = model.net.decode(g, b, &model.config, &enc, enc.features, &queries)?;
        g.bce(o, &labels)
    })?;
    Ok(CheckRow {
        unit: "full:tiny_network".into(),
        report,
    })
}

/// Fractions of inputs whose gradient exceeds `threshold` times the largest
/// gradient, through softmax and through L1 normalization of the same vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpreadRow {
    pub seed: u64,
    pub softmax: f64,
    pub linear: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpreadConfig {
    pub seeds: u64,
    pub len: usize,
    pub sigma: f64,
    pub threshold: f64,
}

impl Default for SpreadConfig {
    fn default() -> Self {
        Self {
            seeds: 50,
            len: 64,
            sigma: 5.0,
            threshold: 1e-4,
        }
    }
}

fn live_fraction(values: &[f64], upstream: &[f64], softmax: bool, threshold: f64) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(values));
    let y = if softmax {
        g.softmax(x, 0)?
    } else {
        g.l1_normalize(x, 0, DenomPolicy::default())?
    };
    let u = g.constant(Tensor::vector(upstream));
    let z = g.hadamard(y, u)?;
    let l = g.sum(z);
    let grads = g.backward(l)?;
    let gx = grads
        .get(x)
        .ok_or_else(|| Error::invalid("input received no gradient"))?;
    let max = gx.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(gx.iter().filter(|v| v.abs() > threshold * max).count() as f64 / gx.len() as f64)
}

/// Inputs `N(0, sigma^2)` of length `len`, upstream gradient uniform in
/// [-1, 1], one row per seed.
pub fn gradient_spread(cfg: &SpreadConfig) -> Result<Vec<SpreadRow>> {
    if cfg.len == 0 || cfg.seeds == 0 {
        return Err(Error::invalid("gradient spread needs a length and seeds"));
    }
    let normal = Normal::new(0.0, cfg.sigma).map_err(|e| Error::invalid(e.to_string()))?;
    (0..cfg.seeds)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..cfg.len).map(|_| normal.sample(&mut rng)).collect();
            let u: Vec<f64> = (0..cfg.len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Ok(SpreadRow {
                seed,
                softmax: live_fraction(&x, &u, true, cfg.threshold)?,
                linear: live_fraction(&x, &u, false, cfg.threshold)?,
            })
        })
        .collect()
}

pub const SPREAD_CSV_HEADER: &str = "seed,softmax,linear";

pub fn spread_csv(rows: &[SpreadRow]) -> String {
    let mut out = format!("{SPREAD_CSV_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.seed, r.softmax, r.linear).expect("write to string");
    }
    out
}

/// Medians of the softmax and linear columns.
pub fn spread_medians(rows: &[SpreadRow]) -> (f64, f64) {
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    (
        median(rows.iter().map(|r| r.softmax).collect()),
        median(rows.iter().map(|r| r.linear).collect()),
    )
}
