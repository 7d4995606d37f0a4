use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensorformer::attention::{complexity_probe, ProbeConfig, ProbeRow, ProbeSummary};
use tensorformer::checks::{checks_csv, gradient_spread, run_gradcheck, spread_csv, spread_medians};
use tensorformer::diffcore::Checkpoint;
use tensorformer::geometry::{load_points, sample_surface, save_points, GridSpec, TriangleMesh, VoxelGrid};
use tensorformer::metrics::MetricsReport;
use tensorformer::network::{train, Model, TrainRecord};
use tensorformer::spatial::Point3;

use crate::config::{BenchSection, CloudSource, ConfigFile, EvalSection, GradcheckSection, Reference};
use crate::error::{CliError, CliResult};
use crate::Globals;

pub const RESOLVED_CONFIG: &str = "resolved.toml";

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn out_dir(g: &Globals) -> CliResult<PathBuf> {
    fs::create_dir_all(&g.out).map_err(|e| CliError::Io(format!("{}: {e}", g.out.display())))?;
    Ok(g.out.clone())
}

/// Any failure reading an input file is an I/O error, including contents
/// that parse but do not describe a valid object.
fn input<T>(r: tensorformer::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Io(e.to_string()))
}

pub fn cmd_train(cfg: &ConfigFile, g: &Globals) -> CliResult<()> {
    let net_sec = cfg.net.clone().unwrap_or_default();
    let train_sec = cfg.train.clone().unwrap_or_default();
    let net = net_sec.resolve()?;
    let s = train_sec.resolve(g.seed)?;
    s.train.validate(&net)?;
    let out = out_dir(g)?;
    let resolved = ConfigFile {
        net: Some(net_sec.resolved(&net)),
        train: Some(train_sec.resolved(&s)),
        ..ConfigFile::default()
    };
    write(&out.join(RESOLVED_CONFIG), &resolved.to_text())?;

    let mut model = Model::new(net, s.train.seed)?;
    let last = s.train.iterations.saturating_sub(1);
    let log = train(
        &mut model,
        std::slice::from_ref(&s.shape),
        &s.train,
        |r: &TrainRecord| {
            if r.iteration.is_multiple_of(s.log_every) || r.iteration == last {
                eprintln!("iteration {:>7}  loss {:.6}  lr {:.3e}", r.iteration, r.loss, r.lr);
            }
        },
    )?;
    let ckpt = out.join("model.ckpt");
    model.to_checkpoint().save(&ckpt)?;
    write(&out.join("loss.csv"), &log.to_csv())?;
    let final_loss = log.records.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained {} iterations on {}, final loss {final_loss:.6}; checkpoint {}",
        log.records.len(),
        s.shape,
        ckpt.display()
    );
    Ok(())
}

pub fn cmd_reconstruct(cfg: &ConfigFile, g: &Globals) -> CliResult<()> {
    let sec = cfg.reconstruct.clone().unwrap_or_default();
    let s = sec.resolve(g.seed)?;
    let model = input(Checkpoint::load(&s.checkpoint).and_then(|c| Model::from_checkpoint(&c)))?;
    let cloud: Vec<Point3> = match &s.source {
        CloudSource::File(p) => input(load_points(p))?,
        CloudSource::Shape {
            shape,
            points,
            noise_std_fraction,
        } => {
            let (lo, hi) = shape
                .bounding_box()
                .ok_or_else(|| CliError::Config("`reconstruct.shape`: shape is empty".into()))?;
            let side = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            sample_surface(shape, *points, noise_std_fraction * side, &mut rng)?
        }
    };
    let out = out_dir(g)?;
    write(
        &out.join(RESOLVED_CONFIG),
        &ConfigFile {
            reconstruct: Some(sec.resolved(&s)),
            ..ConfigFile::default()
        }
        .to_text(),
    )?;
    if matches!(s.source, CloudSource::Shape { .. }) {
        save_points(&out.join("cloud.xyz"), &cloud)?;
    }
    let rec = model.reconstruct(&cloud, &s.mesh)?;
    rec.field.world_grid()?.save(&out.join("field.grid"))?;
    let mesh_path = out.join("mesh.obj");
    rec.mesh.save_obj(&mesh_path)?;
    println!(
        "vertices {}  triangles {}  closed {}  euler {}",
        rec.mesh.vertices.len(),
        rec.mesh.triangles.len(),
        rec.mesh.is_closed(),
        rec.mesh.euler_characteristic()
    );
    if rec.mesh.is_empty() {
        return Err(CliError::Empty(format!(
            "no surface at iso {} in the predicted field",
            s.mesh.iso
        )));
    }
    Ok(())
}

fn union_box(a: (Point3, Point3), b: (Point3, Point3)) -> (Point3, Point3) {
    (
        [0, 1, 2].map(|i| a.0[i].min(b.0[i])),
        [0, 1, 2].map(|i| a.1[i].max(b.1[i])),
    )
}

pub fn cmd_eval(cfg: &ConfigFile, g: &Globals) -> CliResult<()> {
    let sec: EvalSection = cfg.eval.clone().unwrap_or_default();
    let s = sec.resolve(g.seed)?;
    let pred = input(TriangleMesh::load_obj(&s.mesh))?;
    if pred.is_empty() {
        return Err(CliError::Empty(format!("{} has no triangles", s.mesh.display())));
    }
    let pred_box = pred.bounding_box().expect("nonempty mesh");
    let (truth, truth_box) = match &s.reference {
        Reference::Mesh(p) => {
            let m = input(TriangleMesh::load_obj(p))?;
            let b = m
                .bounding_box()
                .ok_or_else(|| CliError::Empty(format!("{} has no triangles", p.display())))?;
            (m, b)
        }
        Reference::Shape(shape) => {
            let (lo, hi) = shape
                .bounding_box()
                .ok_or_else(|| CliError::Config("`eval.shape`: shape is empty".into()))?;
            let spec = GridSpec::enclosing(lo, hi, s.grid_res, s.pad)?;
            (shape.mesh(spec)?, (lo, hi))
        }
    };
    let (pred_occ, truth_occ) = match &s.pred_grid {
        Some(p) => {
            let pred_grid = input(VoxelGrid::load(p))?;
            let truth_grid = match (&s.truth_grid, &s.reference) {
                (Some(t), _) => input(VoxelGrid::load(t))?,
                (None, Reference::Shape(shape)) => shape.occupancy_grid(pred_grid.spec),
                (None, Reference::Mesh(_)) => truth.voxelize(&pred_grid.spec),
            };
            if pred_grid.spec != truth_grid.spec {
                return Err(CliError::Config(format!(
                    "`eval.truth_grid`: grid {:?} does not match the predicted grid {:?}",
                    truth_grid.spec.res, pred_grid.spec.res
                )));
            }
            (pred_grid.threshold(0.5), truth_grid.threshold(0.5))
        }
        None => {
            let (lo, hi) = union_box(pred_box, truth_box);
            let spec = GridSpec::enclosing(lo, hi, s.grid_res, s.pad)?;
            let truth_occ = match &s.reference {
                Reference::Mesh(_) => truth.voxelize(&spec),
                Reference::Shape(shape) => shape.occupancy_grid(spec),
            };
            (pred.voxelize(&spec), truth_occ)
        }
    };
    let report = MetricsReport::evaluate(&pred, &truth, &pred_occ, &truth_occ, s.samples, s.seed, s.norm)?;
    let out = out_dir(g)?;
    write(
        &out.join(RESOLVED_CONFIG),
        &ConfigFile {
            eval: Some(sec.resolved(&s)),
            ..ConfigFile::default()
        }
        .to_text(),
    )?;
    write(
        &out.join("metrics.csv"),
        &format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_line()),
    )?;
    println!("{report}");
    Ok(())
}

pub fn cmd_gradcheck(cfg: &ConfigFile, g: &Globals, scope: Option<&str>) -> CliResult<()> {
    let sec = cfg.gradcheck.clone().unwrap_or_default();
    let s = sec.resolve(scope, g.seed)?;
    let out = out_dir(g)?;
    write(
        &out.join(RESOLVED_CONFIG),
        &ConfigFile {
            gradcheck: Some(GradcheckSection::resolved(&s)),
            ..ConfigFile::default()
        }
        .to_text(),
    )?;
    let rows = run_gradcheck(s.scope, s.seed)?;
    write(&out.join("gradcheck.csv"), &checks_csv(&rows))?;
    let width = rows.iter().map(|r| r.unit.len()).max().unwrap_or(4).max(4);
    println!(
        "{:width$}  {:>13}  {:>7}  {:>7}  result",
        "unit", "max_rel_error", "checked", "skipped"
    );
    for r in &rows {
        println!(
            "{:width$}  {:>13.3e}  {:>7}  {:>7}  {}",
            r.unit,
            r.report.max_rel_error,
            r.report.checked,
            r.report.skipped,
            if r.passes() { "PASS" } else { "FAIL" }
        );
    }
    let spread = gradient_spread(&s.spread)?;
    write(&out.join("spread.csv"), &spread_csv(&spread))?;
    let (soft, lin) = spread_medians(&spread);
    println!(
        "gradient spread over {} seeds (median fraction above {:e} of max): softmax {soft:.4}, linear {lin:.4}",
        s.spread.seeds, s.spread.threshold
    );
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passes()).map(|r| r.unit.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::Check(format!("gradient mismatch in {}", failed.join(", "))));
    }
    if lin <= soft {
        return Err(CliError::Check(format!(
            "linear normalization spread {lin} does not exceed softmax {soft}"
        )));
    }
    Ok(())
}

pub const BENCH_CSV_HEADER: &str = "kind,k,d,time_ns,peak_bytes";
pub const SLOPES_CSV_HEADER: &str = "kind,axis,fixed,slope";

pub fn bench_csv(rows: &[ProbeRow]) -> String {
    let mut out = format!("{BENCH_CSV_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.kind, r.k, r.d, r.time_ns, r.peak_bytes).expect("write to string");
    }
    out
}

/// `axis` is the varied quantity; `fixed` the value of the other one.
pub fn slopes_csv(summaries: &[ProbeSummary]) -> String {
    let mut out = format!("{SLOPES_CSV_HEADER}\n");
    for s in summaries {
        for (k, slope) in &s.d_slopes {
            writeln!(out, "{},d,{k},{slope:.4}", s.kind).expect("write to string");
        }
        for (d, slope) in &s.k_slopes {
            writeln!(out, "{},k,{d},{slope:.4}", s.kind).expect("write to string");
        }
    }
    out
}

pub fn cmd_bench(cfg: &ConfigFile, g: &Globals) -> CliResult<()> {
    let sec = cfg.bench.clone().unwrap_or_default();
    let s = sec.resolve(g.seed)?;
    let out = out_dir(g)?;
    write(
        &out.join(RESOLVED_CONFIG),
        &ConfigFile {
            bench: Some(BenchSection::resolved(&s)),
            ..ConfigFile::default()
        }
        .to_text(),
    )?;
    let probe = ProbeConfig {
        anchors: s.anchors,
        reps: s.reps,
        seed: s.seed,
    };
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &kind in &s.kinds {
        let r = complexity_probe(kind, &s.ks, &s.ds, &probe)?;
        let sum = ProbeSummary::from_rows(kind, &r);
        let d_slopes: Vec<String> = sum.d_slopes.iter().map(|(k, v)| format!("k={k}: {v:.2}")).collect();
        println!("{:<20} d-slope {}", kind.to_string(), d_slopes.join(", "));
        rows.extend(r);
        summaries.push(sum);
    }
    write(&out.join("bench.csv"), &bench_csv(&rows))?;
    write(&out.join("slopes.csv"), &slopes_csv(&summaries))?;
    Ok(())
}
