//! Analytic shapes with exact in/out tests.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::grid::{GridSpec, VoxelGrid};
use super::marching_cubes::marching_cubes;
use super::mesh::TriangleMesh;
use crate::error::{Error, Result};
use crate::spatial::Point3;

/// Solid defined by a signed distance (negative inside).
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Empty,
    Sphere {
        center: Point3,
        radius: f64,
    },
    /// Axis-aligned box given by half extents.
    Box {
        center: Point3,
        half: [f64; 3],
    },
    /// Torus around the z axis.
    Torus {
        center: Point3,
        major: f64,
        minor: f64,
    },
    Union(Box<Shape>, Box<Shape>),
    Difference(Box<Shape>, Box<Shape>),
}

impl Shape {
    pub fn sphere(radius: f64) -> Self {
        Shape::Sphere {
            center: [0.0; 3],
            radius,
        }
    }

    pub fn cube(half: f64) -> Self {
        Shape::Box {
            center: [0.0; 3],
            half: [half; 3],
        }
    }

    pub fn torus(major: f64, minor: f64) -> Self {
        Shape::Torus {
            center: [0.0; 3],
            major,
            minor,
        }
    }

    pub fn union(a: Shape, b: Shape) -> Self {
        Shape::Union(Box::new(a), Box::new(b))
    }

    pub fn difference(a: Shape, b: Shape) -> Self {
        Shape::Difference(Box::new(a), Box::new(b))
    }

    /// Signed distance, exact for the primitives. Composites combine with
    /// min/max, which is exact in sign and a lower bound in magnitude.
    pub fn signed_distance(&self, q: &Point3) -> f64 {
        match self {
            Shape::Empty => f64::INFINITY,
            Shape::Sphere { center, radius } => norm(&sub(q, center)) - radius,
            Shape::Box { center, half } => {
                let d: Vec<f64> = (0..3).map(|i| (q[i] - center[i]).abs() - half[i]).collect();
                let outside = d.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                let inside = d[0].max(d[1]).max(d[2]).min(0.0);
                outside + inside
            }
            Shape::Torus { center, major, minor } => {
                let p = sub(q, center);
                let ring = (p[0] * p[0] + p[1] * p[1]).sqrt() - major;
                (ring * ring + p[2] * p[2]).sqrt() - minor
            }
            Shape::Union(a, b) => a.signed_distance(q).min(b.signed_distance(q)),
            Shape::Difference(a, b) => a.signed_distance(q).max(-b.signed_distance(q)),
        }
    }

    /// Strict interior test; the boundary counts as outside.
    pub fn contains(&self, q: &Point3) -> bool {
        self.signed_distance(q) < 0.0
    }

    /// 1.0 inside, 0.0 outside.
    pub fn occupancy(&self, q: &Point3) -> f64 {
        if self.contains(q) {
            1.0
        } else {
            0.0
        }
    }

    pub fn labels(&self, queries: &[Point3]) -> Vec<f64> {
        queries.iter().map(|q| self.occupancy(q)).collect()
    }

    /// Axis-aligned bounds of the solid; `None` when empty.
    pub fn bounding_box(&self) -> Option<(Point3, Point3)> {
        let around = |c: &Point3, h: [f64; 3]| Some(([0, 1, 2].map(|a| c[a] - h[a]), [0, 1, 2].map(|a| c[a] + h[a])));
        match self {
            Shape::Empty => None,
            Shape::Sphere { center, radius } => around(center, [*radius; 3]),
            Shape::Box { center, half } => around(center, *half),
            Shape::Torus { center, major, minor } => around(center, [major + minor, major + minor, *minor]),
            Shape::Union(a, b) => match (a.bounding_box(), b.bounding_box()) {
                (Some((la, ha)), Some((lb, hb))) => {
                    Some(([0, 1, 2].map(|i| la[i].min(lb[i])), [0, 1, 2].map(|i| ha[i].max(hb[i]))))
                }
                (x, None) | (None, x) => x,
            },
            Shape::Difference(a, _) => a.bounding_box(),
        }
    }

    /// Binary occupancy at the grid's sample points.
    pub fn occupancy_grid(&self, spec: GridSpec) -> VoxelGrid {
        VoxelGrid::from_fn(spec, |p| self.occupancy(p))
    }

    /// Occupancy ramped linearly across two cells around the surface, so
    /// the 0.5 level sits on the surface to sub-cell accuracy.
    pub fn soft_field(&self, spec: GridSpec) -> VoxelGrid {
        let w = 2.0 * spec.h;
        VoxelGrid::from_fn(spec, |p| (0.5 - self.signed_distance(p) / w).clamp(0.0, 1.0))
    }

    /// Reference surface: marching cubes of [`Shape::soft_field`] at iso 0.5.
    pub fn mesh(&self, spec: GridSpec) -> Result<TriangleMesh> {
        marching_cubes(&self.soft_field(spec), 0.5)
    }

    /// Surface area of a primitive; `None` for composites and the empty shape.
    pub fn area(&self) -> Option<f64> {
        use std::f64::consts::PI;
        match self {
            Shape::Sphere { radius, .. } => Some(4.0 * PI * radius * radius),
            Shape::Box { half, .. } => {
                let [a, b, c] = half.map(|h| 2.0 * h);
                Some(2.0 * (a * b + b * c + a * c))
            }
            Shape::Torus { major, minor, .. } => Some(4.0 * PI * PI * major * minor),
            _ => None,
        }
    }

    fn leaves(&self) -> Vec<&Shape> {
        match self {
            Shape::Empty => Vec::new(),
            Shape::Union(a, b) | Shape::Difference(a, b) => {
                let mut v = a.leaves();
                v.extend(b.leaves());
                v
            }
            leaf => vec![leaf],
        }
    }

    /// One point uniformly distributed on the surface.
    ///
    /// Composites pick a primitive in proportion to its area and reject
    /// points that are not on the composite boundary, which keeps the
    /// distribution uniform.
    pub fn sample_surface_point<R: Rng>(&self, rng: &mut R) -> Result<Point3> {
        let leaves = self.leaves();
        if leaves.is_empty() {
            return Err(Error::invalid(format!("shape `{self}` has no surface to sample")));
        }
        if leaves.len() == 1 && std::ptr::eq(leaves[0], self) {
            return Ok(sample_primitive(self, rng));
        }
        let areas: Vec<f64> = leaves.iter().map(|l| l.area().unwrap_or(0.0)).collect();
        let total: f64 = areas.iter().sum();
        for _ in 0..100_000 {
            let mut pick = rng.gen::<f64>() * total;
            let mut leaf = leaves[leaves.len() - 1];
            for (l, a) in leaves.iter().zip(&areas) {
                if pick < *a {
                    leaf = l;
                    break;
                }
                pick -= a;
            }
            let p = sample_primitive(leaf, rng);
            if self.signed_distance(&p).abs() <= 1e-9 {
                return Ok(p);
            }
        }
        Err(Error::invalid(format!("shape `{self}` has no sampleable surface")))
    }
}

fn sample_primitive<R: Rng>(shape: &Shape, rng: &mut R) -> Point3 {
    use std::f64::consts::TAU;
    match shape {
        Shape::Sphere { center, radius } => {
            // Uniform direction via z = cos(theta) uniform.
            let z: f64 = rng.gen_range(-1.0..=1.0);
            let phi = rng.gen::<f64>() * TAU;
            let s = (1.0 - z * z).max(0.0).sqrt();
            [
                center[0] + radius * s * phi.cos(),
                center[1] + radius * s * phi.sin(),
                center[2] + radius * z,
            ]
        }
        Shape::Box { center, half } => {
            let face_area = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
            let total: f64 = face_area.iter().sum();
            let mut pick = rng.gen::<f64>() * total;
            let mut axis = 2;
            for (i, a) in face_area.iter().enumerate() {
                if pick < *a {
                    axis = i;
                    break;
                }
                pick -= a;
            }
            let mut p = [0.0; 3];
            for i in 0..3 {
                p[i] = if i == axis {
                    if rng.gen::<bool>() {
                        half[i]
                    } else {
                        -half[i]
                    }
                } else {
                    rng.gen_range(-half[i]..=half[i])
                };
                p[i] += center[i];
            }
            p
        }
        Shape::Torus { center, major, minor } => {
            // Area element is proportional to major + minor cos(v).
            let v = loop {
                let v = rng.gen::<f64>() * TAU;
                if rng.gen::<f64>() * (major + minor) <= major + minor * v.cos() {
                    break v;
                }
            };
            let u = rng.gen::<f64>() * TAU;
            let ring = major + minor * v.cos();
            [
                center[0] + ring * u.cos(),
                center[1] + ring * u.sin(),
                center[2] + minor * v.sin(),
            ]
        }
        _ => unreachable!("composites are not primitives"),
    }
}

fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: &Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn fmt_center(f: &mut fmt::Formatter<'_>, c: &Point3) -> fmt::Result {
    if *c != [0.0; 3] {
        write!(f, "@{},{},{}", c[0], c[1], c[2])?;
    }
    Ok(())
}

/// Grammar: `empty`, `sphere:r`, `box:h` or `box:hx,hy,hz`, `torus:R,r`, each
/// optionally followed by `@x,y,z`; `union(A;B)` and `difference(A;B)`.
impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Empty => f.write_str("empty"),
            Shape::Sphere { center, radius } => {
                write!(f, "sphere:{radius}")?;
                fmt_center(f, center)
            }
            Shape::Box { center, half } => {
                write!(f, "box:{},{},{}", half[0], half[1], half[2])?;
                fmt_center(f, center)
            }
            Shape::Torus { center, major, minor } => {
                write!(f, "torus:{major},{minor}")?;
                fmt_center(f, center)
            }
            Shape::Union(a, b) => write!(f, "union({a};{b})"),
            Shape::Difference(a, b) => write!(f, "difference({a};{b})"),
        }
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = |msg: &str| Error::invalid(format!("shape `{s}`: {msg}"));
        for (name, ctor) in [
            ("union", Shape::union as fn(Shape, Shape) -> Shape),
            ("difference", Shape::difference),
        ] {
            if let Some(rest) = s.strip_prefix(name) {
                let inner = rest
                    .trim()
                    .strip_prefix('(')
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| bad("expected parenthesised operands"))?;
                let (a, b) = split_top_level(inner).ok_or_else(|| bad("expected two operands separated by `;`"))?;
                return Ok(ctor(a.parse()?, b.parse()?));
            }
        }
        if s == "empty" {
            return Ok(Shape::Empty);
        }
        let (body, center) = match s.split_once('@') {
            Some((b, c)) => {
                let c = numbers(c).map_err(|e| bad(&e))?;
                if c.len() != 3 {
                    return Err(bad("center needs three coordinates"));
                }
                (b, [c[0], c[1], c[2]])
            }
            None => (s, [0.0; 3]),
        };
        let (kind, args) = body.split_once(':').ok_or_else(|| bad("expected `kind:parameters`"))?;
        let args = numbers(args).map_err(|e| bad(&e))?;
        if args.iter().any(|&a| a <= 0.0) {
            return Err(bad("sizes must be positive"));
        }
        match (kind.trim(), args.as_slice()) {
            ("sphere", [r]) => Ok(Shape::Sphere { center, radius: *r }),
            ("box", [h]) => Ok(Shape::Box { center, half: [*h; 3] }),
            ("box", [x, y, z]) => Ok(Shape::Box {
                center,
                half: [*x, *y, *z],
            }),
            ("torus", [major, minor]) if minor < major => Ok(Shape::Torus {
                center,
                major: *major,
                minor: *minor,
            }),
            ("torus", [_, _]) => Err(bad("torus needs minor < major radius")),
            _ => Err(bad("unknown kind or wrong parameter count")),
        }
    }
}

fn numbers(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("`{}` is not a number", t.trim()))
        })
        .collect()
}

fn split_top_level(s: &str) -> Option<(&str, &str)> {
    let mut depth = 0i32;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ';' if depth == 0 => return Some((&s[..i], &s[i + 1..])),
            _ => {}
        }
    }
    None
}
