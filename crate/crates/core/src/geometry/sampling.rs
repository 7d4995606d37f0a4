//! Surface point clouds and labelled query points for training.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::grid::{GridSpec, VoxelGrid};
use super::shape::Shape;
use crate::error::{Error, Result};
use crate::spatial::Point3;

/// `n` points uniform on the surface of `shape`, each displaced by isotropic
/// Gaussian noise of standard deviation `noise_std`.
pub fn sample_surface<R: Rng>(shape: &Shape, n: usize, noise_std: f64, rng: &mut R) -> Result<Vec<Point3>> {
    if n == 0 {
        return Err(Error::invalid("surface sampling needs n >= 1"));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid(format!(
            "noise std must be finite and >= 0, got {noise_std}"
        )));
    }
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    (0..n)
        .map(|_| {
            let p = shape.sample_surface_point(rng)?;
            if noise_std == 0.0 {
                Ok(p)
            } else {
                Ok([
                    p[0] + noise.sample(rng),
                    p[1] + noise.sample(rng),
                    p[2] + noise.sample(rng),
                ])
            }
        })
        .collect()
}

/// Draws training queries over the unit cube: one point in each cell of the
/// fine grid's surface band (dilation minus erosion of the occupancy) plus
/// one point in every coarse cell. The band depends only on the shape, so it
/// is computed once.
#[derive(Clone, Debug)]
pub struct QuerySampler {
    shape: Shape,
    fine: GridSpec,
    coarse: GridSpec,
    band: Vec<usize>,
}

impl QuerySampler {
    pub fn new(shape: Shape, fine_res: usize, coarse_res: usize) -> Result<Self> {
        if fine_res <= coarse_res {
            return Err(Error::invalid(format!(
                "fine resolution {fine_res} must exceed coarse resolution {coarse_res}"
            )));
        }
        let fine = GridSpec::unit(fine_res)?;
        let coarse = GridSpec::unit(coarse_res)?;
        let occ = VoxelGrid::from_fn(fine, |p| shape.occupancy(p));
        let outer = occ.dilate()?;
        let inner = occ.erode()?;
        let band = (0..fine.len())
            .filter(|&n| outer.values()[n] != 0.0 && inner.values()[n] == 0.0)
            .collect();
        Ok(Self {
            shape,
            fine,
            coarse,
            band,
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    /// Fine-grid cell indices in the surface band.
    pub fn band_cells(&self) -> &[usize] {
        &self.band
    }

    pub fn fine(&self) -> &GridSpec {
        &self.fine
    }

    pub fn len(&self) -> usize {
        self.band.len() + self.coarse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Band points first, then coarse points, with their exact labels.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (Vec<Point3>, Vec<f64>) {
        let mut pts = Vec::with_capacity(self.len());
        for &n in &self.band {
            pts.push(jitter(&self.fine, n, rng));
        }
        for n in 0..self.coarse.len() {
            pts.push(jitter(&self.coarse, n, rng));
        }
        let labels = self.shape.labels(&pts);
        (pts, labels)
    }
}

/// Uniform point inside the cell centred on sample `n`.
fn jitter<R: Rng>(spec: &GridSpec, n: usize, rng: &mut R) -> Point3 {
    let [i, j, k] = spec.coords(n);
    let c = spec.point(i, j, k);
    let h = spec.h;
    [
        c[0] + h * (rng.gen::<f64>() - 0.5),
        c[1] + h * (rng.gen::<f64>() - 0.5),
        c[2] + h * (rng.gen::<f64>() - 0.5),
    ]
}
