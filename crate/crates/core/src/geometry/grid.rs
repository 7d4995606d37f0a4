//! Regular 3-D sample grids and binary morphology.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::spatial::Point3;

/// Lattice geometry: sample `(i, j, k)` sits at `origin + h * (i, j, k)`.
/// Each sample is the centre of a cubic voxel of side `h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub res: [usize; 3],
    pub origin: Point3,
    pub h: f64,
}

impl GridSpec {
    pub fn new(res: [usize; 3], origin: Point3, h: f64) -> Result<Self> {
        if res.iter().any(|&r| r < 2) || !(h > 0.0 && h.is_finite()) || origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid(format!(
                "grid needs res >= 2 and h > 0, got {res:?}, h = {h}"
            )));
        }
        Ok(Self { res, origin, h })
    }

    /// `res^3` voxel centres of the cube `[lo, hi]^3`.
    pub fn cube(res: usize, lo: f64, hi: f64) -> Result<Self> {
        let h = (hi - lo) / res as f64;
        Self::new([res; 3], [lo + 0.5 * h; 3], h)
    }

    /// `res^3` voxel centres of a cube around the box `[lo, hi]`, its side
    /// the box's largest extent grown by `pad` on each end.
    pub fn enclosing(lo: Point3, hi: Point3, res: usize, pad: f64) -> Result<Self> {
        let side = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max) * (1.0 + 2.0 * pad);
        if !(side > 0.0 && side.is_finite()) {
            return Err(Error::invalid("cannot enclose an empty or unbounded box"));
        }
        let h = side / res as f64;
        let origin = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]) - 0.5 * side + 0.5 * h);
        Self::new([res; 3], origin, h)
    }

    /// Voxel centres of the unit cube centred at the origin.
    pub fn unit(res: usize) -> Result<Self> {
        Self::cube(res, -0.5, 0.5)
    }

    pub fn len(&self) -> usize {
        self.res.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major index with `k` fastest.
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.res[1] + j) * self.res[2] + k
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let k = index % self.res[2];
        let j = (index / self.res[2]) % self.res[1];
        let i = index / (self.res[1] * self.res[2]);
        [i, j, k]
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Point3 {
        [
            self.origin[0] + self.h * i as f64,
            self.origin[1] + self.h * j as f64,
            self.origin[2] + self.h * k as f64,
        ]
    }

    pub fn points(&self) -> Vec<Point3> {
        (0..self.len())
            .map(|n| {
                let [i, j, k] = self.coords(n);
                self.point(i, j, k)
            })
            .collect()
    }

    /// Length of a voxel diagonal.
    pub fn diagonal(&self) -> f64 {
        self.h * 3f64.sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    values: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::invalid(format!(
                "grid {:?} needs {} values, got {}",
                spec.res,
                spec.len(),
                values.len()
            )));
        }
        Ok(Self { spec, values })
    }

    pub fn filled(spec: GridSpec, value: f64) -> Self {
        Self {
            spec,
            values: vec![value; spec.len()],
        }
    }

    pub fn from_fn(spec: GridSpec, f: impl Fn(&Point3) -> f64) -> Self {
        let values = spec.points().iter().map(f).collect();
        Self { spec, values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.spec.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let n = self.spec.index(i, j, k);
        self.values[n] = v;
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// 1 where the value is at least `iso`.
    pub fn threshold(&self, iso: f64) -> Self {
        Self {
            spec: self.spec,
            values: self.values.iter().map(|&v| if v >= iso { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    fn require_binary(&self, op: &str) -> Result<()> {
        if self.is_binary() {
            Ok(())
        } else {
            Err(Error::invalid(format!("{op} needs a binary grid")))
        }
    }

    pub fn complement(&self) -> Result<Self> {
        self.require_binary("complement")?;
        Ok(Self {
            spec: self.spec,
            values: self.values.iter().map(|v| 1.0 - v).collect(),
        })
    }

    /// 6-connected dilation; cells outside the grid count as empty.
    pub fn dilate(&self) -> Result<Self> {
        self.require_binary("dilate")?;
        Ok(self.morph(|cell, nbrs| cell || nbrs.contains(&Some(true))))
    }

    /// 6-connected erosion; cells outside the grid count as empty.
    pub fn erode(&self) -> Result<Self> {
        self.require_binary("erode")?;
        Ok(self.morph(|cell, nbrs| cell && nbrs.iter().all(|&n| n == Some(true))))
    }

    fn morph(&self, rule: impl Fn(bool, [Option<bool>; 6]) -> bool) -> Self {
        let [nx, ny, nz] = self.spec.res;
        let at = |i: isize, j: isize, k: isize| -> Option<bool> {
            if i < 0 || j < 0 || k < 0 || i >= nx as isize || j >= ny as isize || k >= nz as isize {
                None
            } else {
                Some(self.get(i as usize, j as usize, k as usize) != 0.0)
            }
        };
        let mut out = vec![0.0; self.values.len()];
        for i in 0..nx as isize {
            for j in 0..ny as isize {
                for k in 0..nz as isize {
                    let nbrs = [
                        at(i - 1, j, k),
                        at(i + 1, j, k),
                        at(i, j - 1, k),
                        at(i, j + 1, k),
                        at(i, j, k - 1),
                        at(i, j, k + 1),
                    ];
                    let cell = at(i, j, k) == Some(true);
                    if rule(cell, nbrs) {
                        out[self.spec.index(i as usize, j as usize, k as usize)] = 1.0;
                    }
                }
            }
        }
        Self {
            spec: self.spec,
            values: out,
        }
    }

    /// Header `nx ny nz ox oy oz h`, then one value per line in row-major order.
    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = format!(
            "{} {} {} {:e} {:e} {:e} {:e}\n",
            s.res[0], s.res[1], s.res[2], s.origin[0], s.origin[1], s.origin[2], s.h
        );
        for v in &self.values {
            writeln!(out, "{v:e}").expect("write to string");
        }
        out
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(source, 1, "missing grid header"))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 7 {
            return Err(Error::parse(source, 1, "header needs `nx ny nz ox oy oz h`"));
        }
        let count = |t: &str| {
            t.parse::<usize>()
                .map_err(|_| Error::parse(source, 1, format!("bad extent `{t}`")))
        };
        let real = |t: &str| {
            t.parse::<f64>()
                .map_err(|_| Error::parse(source, 1, format!("bad number `{t}`")))
        };
        let spec = GridSpec::new(
            [count(h[0])?, count(h[1])?, count(h[2])?],
            [real(h[3])?, real(h[4])?, real(h[5])?],
            real(h[6])?,
        )
        .map_err(|e| Error::parse(source, 1, e.to_string()))?;
        let mut values = Vec::with_capacity(spec.len());
        for (n, line) in lines {
            for t in line.split_whitespace() {
                let v: f64 = t
                    .parse()
                    .map_err(|_| Error::parse(source, n + 1, format!("bad value `{t}`")))?;
                values.push(v);
            }
        }
        if values.len() != spec.len() {
            return Err(Error::parse(
                source,
                text.lines().count(),
                format!("expected {} values, found {}", spec.len(), values.len()),
            ));
        }
        Self::new(spec, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}
