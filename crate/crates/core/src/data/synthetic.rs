//! Synthetic class x domain grids with parameterized domain shift.
//!
//! Class `c` has a center `mu_c`; an item of cell `(m, c)` is
//! `T_m(mu_c + eta) + nu`, with `eta ~ N(0, class_spread^2 I)`, `nu ~ N(0,
//! noise^2 I)` and `T_m(x) = R_m diag(s_m) x + t_m`. Every random draw comes
//! from its own ChaCha stream of the dataset seed, so centers, domain
//! transforms and cells can each be regenerated independently.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::grid::GridDataset;
use crate::error::{Error, Result};

const CENTER_STREAM: u64 = 0;
const DOMAIN_STREAM_BASE: u64 = 1 << 20;
const CELL_STREAM_BASE: u64 = 1 << 40;
const CENTER_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftGenerator {
    pub d_in: usize,
    pub class_count: usize,
    pub domain_count: usize,
    /// Within-class standard deviation.
    pub class_spread: f64,
    /// Class centers are drawn from `N(0, center_scale^2 I)`...
    pub center_scale: f64,
    /// ...and redrawn until every pair is at least this far apart.
    pub min_center_distance: f64,
    /// Norm of each domain's translation; its direction is random.
    pub translation: f64,
    /// Per-axis log-scale factors are uniform in `[-scaling, scaling]`.
    pub scaling: f64,
    /// Givens angles on consecutive axis pairs, uniform in `[-rotation, rotation]`.
    pub rotation: f64,
    /// Additive noise after the domain transform.
    pub noise: f64,
}

impl Default for ShiftGenerator {
    /// 20 classes x 8 domains in 8 dimensions, translation-only shift of ten
    /// class spreads.
    fn default() -> Self {
        Self {
            d_in: 8,
            class_count: 20,
            domain_count: 8,
            class_spread: 1.0,
            center_scale: 4.0,
            min_center_distance: 8.0,
            translation: 10.0,
            scaling: 0.0,
            rotation: 0.0,
            noise: 0.0,
        }
    }
}

/// Affine map of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainTransform {
    pub translation: Array1<f64>,
    pub scale: Array1<f64>,
    /// Angle for axes `(2p, 2p + 1)`.
    pub angles: Vec<f64>,
}

impl DomainTransform {
    pub fn apply(&self, x: &mut Array1<f64>) {
        *x *= &self.scale;
        for (p, &theta) in self.angles.iter().enumerate() {
            let (a, b) = (x[2 * p], x[2 * p + 1]);
            let (sin, cos) = theta.sin_cos();
            x[2 * p] = cos * a - sin * b;
            x[2 * p + 1] = sin * a + cos * b;
        }
        *x += &self.translation;
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal))
}

impl ShiftGenerator {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.class_count == 0 || self.domain_count == 0 {
            return Err(Error::Config("generator needs d_in, classes and domains >= 1".into()));
        }
        let nonneg = [
            ("class_spread", self.class_spread),
            ("center_scale", self.center_scale),
            ("translation", self.translation),
            ("scaling", self.scaling),
            ("rotation", self.rotation),
            ("noise", self.noise),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("generator {name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.min_center_distance > 0.0) || !self.min_center_distance.is_finite() {
            return Err(Error::Config(format!(
                "class margin must be > 0, got {}",
                self.min_center_distance
            )));
        }
        if self.class_count > 1 && !(self.center_scale > 0.0) {
            return Err(Error::Config("center_scale must be > 0 with several classes".into()));
        }
        Ok(())
    }

    /// Rejection-sampled class centers, pairwise at least the margin apart.
    pub fn class_centers(&self, seed: u64) -> Result<Array2<f64>> {
        let mut rng = stream(seed, CENTER_STREAM);
        let mut centers: Vec<Array1<f64>> = Vec::with_capacity(self.class_count);
        let mut attempts = 0;
        while centers.len() < self.class_count {
            attempts += 1;
            if attempts > CENTER_ATTEMPTS * self.class_count {
                return Err(Error::Config(format!(
                    "cannot place {} centers {} apart at scale {} in {} dimensions",
                    self.class_count, self.min_center_distance, self.center_scale, self.d_in
                )));
            }
            let c = normal_vec(&mut rng, self.d_in) * self.center_scale;
            let far = centers.iter().all(|o| {
                let diff = &c - o;
                diff.dot(&diff).sqrt() >= self.min_center_distance
            });
            if far {
                centers.push(c);
            }
        }
        let mut out = Array2::zeros((self.class_count, self.d_in));
        for (mut row, c) in out.rows_mut().into_iter().zip(&centers) {
            row.assign(c);
        }
        Ok(out)
    }

    pub fn domain_transform(&self, domain: usize, seed: u64) -> DomainTransform {
        let mut rng = stream(seed, DOMAIN_STREAM_BASE + domain as u64);
        let dir = normal_vec(&mut rng, self.d_in);
        let norm = dir.dot(&dir).sqrt();
        let translation = if norm > 0.0 {
            dir * (self.translation / norm)
        } else {
            Array1::zeros(self.d_in)
        };
        let scale = Array1::from_shape_fn(self.d_in, |_| {
            (rng.random_range(-1.0..=1.0) * self.scaling).exp()
        });
        let angles = (0..self.d_in / 2)
            .map(|_| rng.random_range(-1.0..=1.0) * self.rotation)
            .collect();
        DomainTransform {
            translation,
            scale,
            angles,
        }
    }
}

/// Generate the full grid. Fully determined by `(generator, items_per_cell, seed)`.
pub fn generate_synthetic(generator: &ShiftGenerator, items_per_cell: usize, seed: u64) -> Result<GridDataset> {
    generator.validate()?;
    if items_per_cell == 0 {
        return Err(Error::Config("items_per_cell must be >= 1".into()));
    }
    let centers = generator.class_centers(seed)?;
    let d = generator.d_in;
    let mut cells = Vec::with_capacity(generator.class_count * generator.domain_count);
    for m in 0..generator.domain_count {
        let transform = generator.domain_transform(m, seed);
        for c in 0..generator.class_count {
            let cell_id = (m * generator.class_count + c) as u64;
            let mut rng = stream(seed, CELL_STREAM_BASE + cell_id);
            let mut block = Array2::<f32>::zeros((items_per_cell, d));
            for mut row in block.rows_mut() {
                let mut x = &centers.row(c) + &(normal_vec(&mut rng, d) * generator.class_spread);
                transform.apply(&mut x);
                if generator.noise > 0.0 {
                    x += &(normal_vec(&mut rng, d) * generator.noise);
                }
                for (dst, v) in row.iter_mut().zip(x.iter()) {
                    *dst = *v as f32;
                }
            }
            cells.push(block);
        }
    }
    GridDataset::from_cells(
        "synthetic",
        generator.class_count,
        generator.domain_count,
        cells,
        Some(seed),
        Some(generator.clone()),
    )
}
