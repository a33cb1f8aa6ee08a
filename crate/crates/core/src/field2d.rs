//! The synthetic 2D world: scalar fields and probability masses on a
//! cell-centred Cartesian grid over a bounded rectangle.
//!
//! A grid with `nx * ny` cells partitions the domain; node `(ix, iy)` is the
//! centre of its cell and values are stored row-major with `iy` as the row,
//! i.e. at index `iy * nx + ix`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Geometry {
    /// Square `[-half, half]^2` domain with `n * n` cells.
    pub fn square(half: f64, n: usize) -> Self {
        Self {
            x_min: -half,
            x_max: half,
            y_min: -half,
            y_max: half,
            nx: n,
            ny: n,
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_max - self.y_min) / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    // Written so that centres of a symmetric domain are exactly antisymmetric.
    fn center(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
        let fi = i as f64 + 0.5;
        (lo * (n as f64 - fi) + hi * fi) / n as f64
    }

    pub fn x_center(&self, ix: usize) -> f64 {
        Self::center(self.x_min, self.x_max, self.nx, ix)
    }

    pub fn y_center(&self, iy: usize) -> f64 {
        Self::center(self.y_min, self.y_max, self.ny, iy)
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    /// Cell containing `p`; outside points are clamped into boundary cells.
    pub fn cell_of(&self, p: [f64; 2]) -> (usize, usize) {
        let fx = ((p[0] - self.x_min) / self.dx()).floor();
        let fy = ((p[1] - self.y_min) / self.dy()).floor();
        let ix = if fx.is_nan() {
            0.0
        } else {
            fx.clamp(0.0, (self.nx - 1) as f64)
        };
        let iy = if fy.is_nan() {
            0.0
        } else {
            fy.clamp(0.0, (self.ny - 1) as f64)
        };
        (ix as usize, iy as usize)
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    pub fn clamp_point(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0].clamp(self.x_min, self.x_max), p[1].clamp(self.y_min, self.y_max)]
    }

    /// Iterator over `(index, x, y)` of all cell centres.
    pub fn centers(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        (0..self.ny).flat_map(move |iy| {
            let y = self.y_center(iy);
            (0..self.nx).map(move |ix| (self.index(ix, iy), self.x_center(ix), y))
        })
    }

    fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::InvalidArgument("grid needs at least 2x2 cells".into()));
        }
        if !(self.x_max > self.x_min && self.y_max > self.y_min) {
            return Err(Error::InvalidArgument("empty domain".into()));
        }
        Ok(())
    }
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry::square(3.5, 256)
    }
}

/// A scalar field sampled at cell centres.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub geom: Geometry,
    pub values: Vec<f64>,
}

/// A normalized probability mass over grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPmf {
    pub geom: Geometry,
    pub mass: Vec<f64>,
}

impl GridField {
    pub fn new(geom: Geometry, values: Vec<f64>) -> Result<Self> {
        geom.validate()?;
        if values.len() != geom.len() {
            return Err(Error::DimensionMismatch {
                expected: geom.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite field value".into()));
        }
        Ok(Self { geom, values })
    }

    pub fn from_fn(geom: Geometry, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = geom.centers().map(|(_, x, y)| f(x, y)).collect();
        Self::new(geom, values)
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[self.geom.index(ix, iy)]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Population standard deviation over nodes.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.values.len() as f64).sqrt()
    }

    /// Rescales to zero mean and the given population standard deviation.
    pub fn standardize(&mut self, std: f64) {
        let m = self.mean();
        let s = self.std();
        let scale = if s > 0.0 { std / s } else { 0.0 };
        for v in &mut self.values {
            *v = (*v - m) * scale;
        }
    }

    fn patch(&self, p: [f64; 2]) -> Patch {
        let g = &self.geom;
        let ux = ((p[0] - g.x_min) / g.dx() - 0.5).clamp(0.0, (g.nx - 1) as f64);
        let uy = ((p[1] - g.y_min) / g.dy() - 0.5).clamp(0.0, (g.ny - 1) as f64);
        let ix = (ux.floor() as usize).min(g.nx - 2);
        let iy = (uy.floor() as usize).min(g.ny - 2);
        let fx = ux - ix as f64;
        let fy = uy - iy as f64;
        let raw_x = (p[0] - g.x_min) / g.dx() - 0.5;
        let raw_y = (p[1] - g.y_min) / g.dy() - 0.5;
        Patch {
            ix,
            iy,
            fx,
            fy,
            inside_x: raw_x > 0.0 && raw_x < (g.nx - 1) as f64,
            inside_y: raw_y > 0.0 && raw_y < (g.ny - 1) as f64,
        }
    }

    /// Bilinear interpolation with border padding.
    pub fn interp(&self, p: [f64; 2]) -> f64 {
        let c = self.patch(p);
        let v00 = self.at(c.ix, c.iy);
        let v10 = self.at(c.ix + 1, c.iy);
        let v01 = self.at(c.ix, c.iy + 1);
        let v11 = self.at(c.ix + 1, c.iy + 1);
        let lo = v00 + (v10 - v00) * c.fx;
        let hi = v01 + (v11 - v01) * c.fx;
        lo + (hi - lo) * c.fy
    }

    /// Gradient of the bilinear patch containing `p`; zero across padded
    /// directions outside the node hull.
    pub fn interp_grad(&self, p: [f64; 2]) -> [f64; 2] {
        let c = self.patch(p);
        let v00 = self.at(c.ix, c.iy);
        let v10 = self.at(c.ix + 1, c.iy);
        let v01 = self.at(c.ix, c.iy + 1);
        let v11 = self.at(c.ix + 1, c.iy + 1);
        let gx = ((v10 - v00) * (1.0 - c.fy) + (v11 - v01) * c.fy) / self.geom.dx();
        let gy = ((v01 - v00) * (1.0 - c.fx) + (v11 - v10) * c.fx) / self.geom.dy();
        [if c.inside_x { gx } else { 0.0 }, if c.inside_y { gy } else { 0.0 }]
    }

    /// Bilinear resampling onto another grid's cell centres.
    pub fn resample(&self, geom: Geometry) -> Result<GridField> {
        GridField::from_fn(geom, |x, y| self.interp([x, y]))
    }
}

struct Patch {
    ix: usize,
    iy: usize,
    fx: f64,
    fy: f64,
    inside_x: bool,
    inside_y: bool,
}

impl GridPmf {
    /// Normalizes nonnegative weights into a pmf.
    pub fn from_weights(geom: Geometry, weights: Vec<f64>) -> Result<Self> {
        geom.validate()?;
        if weights.len() != geom.len() {
            return Err(Error::DimensionMismatch {
                expected: geom.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("pmf weights must be finite and >= 0".into()));
        }
        let z: f64 = weights.iter().sum();
        if z <= 0.0 {
            return Err(Error::InvalidArgument("pmf has zero total mass".into()));
        }
        Ok(Self {
            geom,
            mass: weights.into_iter().map(|w| w / z).collect(),
        })
    }

    /// `mass ∝ exp(log_weights)`, computed with max subtraction. Cells with
    /// `-inf` log weight get zero mass.
    pub fn from_log_weights(geom: Geometry, log_weights: &[f64]) -> Result<Self> {
        let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::InvalidArgument("no finite log weight".into()));
        }
        Self::from_weights(geom, log_weights.iter().map(|l| (l - max).exp()).collect())
    }

    pub fn uniform(geom: Geometry) -> Result<Self> {
        Self::from_weights(geom, vec![1.0; geom.len()])
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Grid-interpolable log-density `ln(mass / cell_area)`; empty cells get
    /// `floor` instead of `-inf`.
    pub fn log_density_field(&self, floor: f64) -> Result<GridField> {
        let area = self.geom.cell_area();
        let values = self
            .mass
            .iter()
            .map(|m| if *m > 0.0 { (m / area).ln().max(floor) } else { floor })
            .collect();
        GridField::new(self.geom, values)
    }

    /// Expectation of a per-cell quantity.
    pub fn expect(&self, f: &[f64]) -> f64 {
        self.mass.iter().zip(f).map(|(m, v)| m * v).sum()
    }
}

/// What the data density is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityKind {
    GrfPotential,
    GaussianMixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostKind {
    Grf,
    RbfSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub weight: f64,
}

/// Everything needed to regenerate the 2D world deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub seed: u64,
    pub geometry: Geometry,
    pub density_kind: DensityKind,
    pub cost_kind: CostKind,
    /// Kernel length scale of GRF synthesis (domain units).
    pub length_scale: f64,
    /// Standard deviation the GRF / RBF fields are standardized to.
    pub field_std: f64,
    /// Exponent scale turning the density potential into a pmf.
    pub density_scale: f64,
    pub n_rbf: usize,
    pub rbf_width: [f64; 2],
    pub mixture: Vec<MixtureComponent>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            geometry: Geometry::default(),
            density_kind: DensityKind::GaussianMixture,
            cost_kind: CostKind::RbfSum,
            length_scale: 0.6,
            field_std: 1.0,
            density_scale: 1.5,
            n_rbf: 8,
            rbf_width: [1.0, 2.0],
            mixture: vec![
                MixtureComponent {
                    mean: [-1.5, -1.0],
                    cov: [[0.4, 0.1], [0.1, 0.3]],
                    weight: 0.4,
                },
                MixtureComponent {
                    mean: [1.5, 1.2],
                    cov: [[0.3, -0.1], [-0.1, 0.5]],
                    weight: 0.35,
                },
                MixtureComponent {
                    mean: [0.8, -1.8],
                    cov: [[0.25, 0.0], [0.0, 0.25]],
                    weight: 0.25,
                },
            ],
        }
    }
}

impl WorldSpec {
    /// Potential field of the data density (GRF kind).
    pub fn density_potential(&self) -> Result<GridField> {
        let mut r = rng::substream(self.seed, "world/density", 0);
        make_grf(self.geometry, self.length_scale, self.field_std, &mut r)
    }

    pub fn density(&self) -> Result<GridPmf> {
        match self.density_kind {
            DensityKind::GrfPotential => density_from_potential(&self.density_potential()?, self.density_scale),
            DensityKind::GaussianMixture => mixture_pmf(&self.mixture, self.geometry),
        }
    }

    /// Cost landscape `C(x)`.
    pub fn cost(&self) -> Result<GridField> {
        let mut r = rng::substream(self.seed, "world/cost", 0);
        match self.cost_kind {
            CostKind::Grf => make_grf(self.geometry, self.length_scale, self.field_std, &mut r),
            CostKind::RbfSum => {
                let (mut f, _) = rbf_raw(self.geometry, self.n_rbf, self.rbf_width, &mut r)?;
                f.standardize(self.field_std);
                Ok(f)
            }
        }
    }
}

fn gaussian_kernel(sigma_cells: f64) -> Vec<f64> {
    let half = (4.0 * sigma_cells).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-0.5 * (i as f64 / sigma_cells).powi(2)).exp())
        .collect();
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    k
}

/// White noise convolved with a Gaussian kernel of the given length scale,
/// standardized to zero mean and standard deviation `field_std`.
///
/// The noise lives on a padded grid so the smoothing has no edge bias.
pub fn make_grf(geom: Geometry, length_scale: f64, field_std: f64, rng: &mut Rng) -> Result<GridField> {
    geom.validate()?;
    if !(length_scale > 0.0 && field_std > 0.0) {
        return Err(Error::InvalidArgument("length_scale and field_std must be > 0".into()));
    }
    let kx = gaussian_kernel(length_scale / geom.dx());
    let ky = gaussian_kernel(length_scale / geom.dy());
    let px = kx.len() / 2;
    let py = ky.len() / 2;
    let wx = geom.nx + 2 * px;
    let wy = geom.ny + 2 * py;
    let noise = rng::normal_vec(rng, wx * wy);

    // convolve along x: (wy rows) x (nx cols)
    let mut tmp = vec![0.0; wy * geom.nx];
    for j in 0..wy {
        let row = &noise[j * wx..(j + 1) * wx];
        for i in 0..geom.nx {
            tmp[j * geom.nx + i] = kx.iter().zip(&row[i..i + kx.len()]).map(|(k, v)| k * v).sum();
        }
    }
    let mut values = vec![0.0; geom.len()];
    for j in 0..geom.ny {
        for i in 0..geom.nx {
            let mut acc = 0.0;
            for (m, k) in ky.iter().enumerate() {
                acc += k * tmp[(j + m) * geom.nx + i];
            }
            values[j * geom.nx + i] = acc;
        }
    }
    let mut f = GridField::new(geom, values)?;
    f.standardize(field_std);
    Ok(f)
}

/// One Gaussian bump of the RBF cost field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub center: [f64; 2],
    pub width: f64,
    pub sign: f64,
}

/// Unstandardized sum of `n_rbf` random signed Gaussian bumps, plus the bumps.
pub fn rbf_raw(geom: Geometry, n_rbf: usize, width: [f64; 2], rng: &mut Rng) -> Result<(GridField, Vec<Bump>)> {
    if n_rbf == 0 {
        return Err(Error::InvalidArgument("n_rbf must be >= 1".into()));
    }
    let bumps: Vec<Bump> = (0..n_rbf)
        .map(|_| Bump {
            center: [
                rng.gen_range(geom.x_min..geom.x_max),
                rng.gen_range(geom.y_min..geom.y_max),
            ],
            width: if width[1] > width[0] {
                rng.gen_range(width[0]..width[1])
            } else {
                width[0]
            },
            sign: if rng.gen::<bool>() { 1.0 } else { -1.0 },
        })
        .collect();
    let f = GridField::from_fn(geom, |x, y| {
        bumps
            .iter()
            .map(|b| {
                let r2 = (x - b.center[0]).powi(2) + (y - b.center[1]).powi(2);
                b.sign * (-0.5 * r2 / (b.width * b.width)).exp()
            })
            .sum()
    })?;
    Ok((f, bumps))
}

/// `mass ∝ exp(scale * potential)`; mass outside the domain is zero by
/// construction.
pub fn density_from_potential(potential: &GridField, scale: f64) -> Result<GridPmf> {
    if !scale.is_finite() {
        return Err(Error::InvalidArgument("scale must be finite".into()));
    }
    let lw: Vec<f64> = potential.values.iter().map(|v| scale * v).collect();
    GridPmf::from_log_weights(potential.geom, &lw)
}

fn mixture_log_pdf(comp: &MixtureComponent, x: f64, y: f64) -> Result<f64> {
    let [[a, b], [c, d]] = comp.cov;
    let det = a * d - b * c;
    if !(a > 0.0 && det > 0.0 && (b - c).abs() <= 1e-12 * (a.abs() + d.abs())) {
        return Err(Error::CovarianceNotSpd);
    }
    let dx = x - comp.mean[0];
    let dy = y - comp.mean[1];
    let q = (d * dx * dx - (b + c) * dx * dy + a * dy * dy) / det;
    Ok(-0.5 * q - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln())
}

/// Gaussian-mixture density evaluated at cell centres and normalized.
pub fn mixture_pmf(components: &[MixtureComponent], geom: Geometry) -> Result<GridPmf> {
    if components.is_empty() {
        return Err(Error::InvalidArgument("empty mixture".into()));
    }
    let wsum: f64 = components.iter().map(|c| c.weight).sum();
    if components.iter().any(|c| c.weight < 0.0) || (wsum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(
            "mixture weights must be >= 0 and sum to 1".into(),
        ));
    }
    for c in components {
        mixture_log_pdf(c, 0.0, 0.0)?;
    }
    let mut weights = Vec::with_capacity(geom.len());
    for (_, x, y) in geom.centers() {
        let mut acc = 0.0;
        for c in components {
            if c.weight > 0.0 {
                acc += c.weight * mixture_log_pdf(c, x, y)?.exp();
            }
        }
        weights.push(acc);
    }
    GridPmf::from_weights(geom, weights)
}

/// `q ∝ p * exp(-lambda * cost)`, renormalized.
pub fn tilt(p: &GridPmf, cost: &GridField, lambda: f64) -> Result<GridPmf> {
    if p.geom != cost.geom {
        return Err(Error::GeometryMismatch);
    }
    tilt_values(p, &cost.values, lambda)
}

/// [`tilt`] against raw per-cell cost values.
pub fn tilt_values(p: &GridPmf, cost: &[f64], lambda: f64) -> Result<GridPmf> {
    if cost.len() != p.mass.len() {
        return Err(Error::GeometryMismatch);
    }
    let expo: Vec<f64> = cost.iter().map(|c| -lambda * c).collect();
    let max = p
        .mass
        .iter()
        .zip(&expo)
        .filter(|(m, _)| **m > 0.0)
        .map(|(_, e)| *e)
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::InvalidArgument("non-finite tilt exponent".into()));
    }
    let w: Vec<f64> = expo.iter().map(|e| (e - max).exp()).collect();
    if p.mass.iter().zip(&w).all(|(m, w)| *m == 0.0 || *w == 1.0) {
        return Ok(p.clone());
    }
    GridPmf::from_weights(p.geom, p.mass.iter().zip(&w).map(|(m, w)| m * w).collect())
}

/// Multinomial cell draw plus uniform jitter within the cell.
pub fn sample(p: &GridPmf, n: usize, rng: &mut Rng) -> Vec<[f64; 2]> {
    let mut cdf = Vec::with_capacity(p.mass.len());
    let mut acc = 0.0;
    for m in &p.mass {
        acc += m;
        cdf.push(acc);
    }
    let total = acc;
    let g = p.geom;
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>() * total;
            let mut k = cdf.partition_point(|c| *c <= u).min(cdf.len() - 1);
            while p.mass[k] == 0.0 && k > 0 {
                k -= 1;
            }
            let (ix, iy) = (k % g.nx, k / g.nx);
            let x = g.x_min + (ix as f64 + rng.gen::<f64>()) * g.dx();
            let y = g.y_min + (iy as f64 + rng.gen::<f64>()) * g.dy();
            g.clamp_point([x, y])
        })
        .collect()
}

/// `sum a ln(a/b)` over cells with `a > 0`.
pub fn kl(a: &GridPmf, b: &GridPmf) -> Result<f64> {
    if a.geom != b.geom {
        return Err(Error::GeometryMismatch);
    }
    let mut acc = 0.0;
    for (pa, pb) in a.mass.iter().zip(&b.mass) {
        if *pa > 0.0 {
            if *pb <= 0.0 {
                return Err(Error::AbsoluteContinuity);
            }
            acc += pa * (pa / pb).ln();
        }
    }
    Ok(acc)
}

/// Symmetrized KL, `(KL(a||b) + KL(b||a)) / 2`.
pub fn skl(a: &GridPmf, b: &GridPmf) -> Result<f64> {
    Ok(0.5 * (kl(a, b)? + kl(b, a)?))
}

/// Normalized cell counts; outside points land in boundary cells.
pub fn histogram(points: &[[f64; 2]], geom: Geometry) -> Result<GridPmf> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("histogram of zero points".into()));
    }
    let mut counts = vec![0.0; geom.len()];
    for p in points {
        let (ix, iy) = geom.cell_of(*p);
        counts[geom.index(ix, iy)] += 1.0;
    }
    GridPmf::from_weights(geom, counts)
}

const MAGIC: &[u8; 4] = b"TF2D";
const VERSION: u32 = 1;

fn encode(geom: &Geometry, values: &[f64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(4 + 4 + 32 + 8 + 8 * values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [geom.x_min, geom.x_max, geom.y_min, geom.y_max] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(geom.nx as u32).to_le_bytes());
    buf.extend_from_slice(&(geom.ny as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn decode(path: &Path, bytes: &[u8]) -> Result<(Geometry, Vec<f64>)> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 48 || &bytes[0..4] != MAGIC {
        return Err(bad("missing TF2D magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad("unsupported version"));
    }
    let f = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let nx = u32::from_le_bytes(bytes[40..44].try_into().unwrap()) as usize;
    let ny = u32::from_le_bytes(bytes[44..48].try_into().unwrap()) as usize;
    let geom = Geometry {
        x_min: f(8),
        x_max: f(16),
        y_min: f(24),
        y_max: f(32),
        nx,
        ny,
    };
    if bytes.len() != 48 + 8 * nx * ny {
        return Err(bad("payload length does not match nx*ny"));
    }
    let values = bytes[48..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((geom, values))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

impl GridField {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.geom, &self.values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (geom, values) = decode(path, &read_all(path)?)?;
        GridField::new(geom, values)
    }

    /// 8-bit binary PGM, min-max scaled, top row = largest y.
    pub fn to_pgm(&self) -> Vec<u8> {
        pgm(&self.geom, &self.values)
    }
}

impl GridPmf {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.geom, &self.mass)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (geom, mass) = decode(path, &read_all(path)?)?;
        geom.validate()?;
        let total: f64 = mass.iter().sum();
        if mass.iter().any(|m| !(m.is_finite() && *m >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "not a normalized pmf".into(),
            });
        }
        Ok(GridPmf { geom, mass })
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        pgm(&self.geom, &self.mass)
    }
}

fn pgm(geom: &Geometry, values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", geom.nx, geom.ny).into_bytes();
    for iy in (0..geom.ny).rev() {
        for ix in 0..geom.nx {
            let v = values[geom.index(ix, iy)];
            out.push((((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Geometry {
        Geometry::square(3.5, 32)
    }

    #[test]
    fn grf_standardized_and_deterministic() {
        let g = Geometry::square(3.5, 64);
        let a = make_grf(g, 0.5, 1.0, &mut rng::substream(1, "t", 0)).unwrap();
        let b = make_grf(g, 0.5, 1.0, &mut rng::substream(1, "t", 0)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert!(a.mean().abs() < 1e-12);
        assert!((a.std() - 1.0).abs() < 1e-10);
        let c = make_grf(g, 0.5, 2.5, &mut rng::substream(1, "t", 0)).unwrap();
        assert!((c.std() - 2.5).abs() < 1e-10);
    }

    #[test]
    fn grf_smoother_with_longer_length_scale() {
        let g = Geometry::square(3.5, 64);
        let lap_var = |ls: f64| {
            let f = make_grf(g, ls, 1.0, &mut rng::substream(3, "t", 0)).unwrap();
            let mut acc = Vec::new();
            for iy in 1..g.ny - 1 {
                for ix in 1..g.nx - 1 {
                    acc.push(
                        f.at(ix + 1, iy) + f.at(ix - 1, iy) + f.at(ix, iy + 1) + f.at(ix, iy - 1) - 4.0 * f.at(ix, iy),
                    );
                }
            }
            let m = acc.iter().sum::<f64>() / acc.len() as f64;
            acc.iter().map(|v| (v - m).powi(2)).sum::<f64>() / acc.len() as f64
        };
        let v = [lap_var(0.2), lap_var(0.5), lap_var(1.0), lap_var(2.0)];
        assert!(v.windows(2).all(|w| w[1] < w[0]), "{v:?}");
        assert!(v[3] < 1e-3);
    }

    #[test]
    fn single_positive_bump_peaks_at_its_center() {
        let g = small();
        let mut r = rng::substream(5, "rbf", 0);
        loop {
            let (f, bumps) = rbf_raw(g, 1, [0.5, 0.8], &mut r).unwrap();
            if bumps[0].sign < 0.0 {
                continue;
            }
            let (cx, cy) = g.cell_of(bumps[0].center);
            let argmax = f
                .values
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, g.index(cx, cy));
            let mut fs = f.clone();
            fs.standardize(1.0);
            assert!(fs.mean().abs() < 1e-12 && (fs.std() - 1.0).abs() < 1e-10);
            break;
        }
    }

    #[test]
    fn rbf_cost_deterministic() {
        let spec = WorldSpec {
            cost_kind: CostKind::RbfSum,
            geometry: small(),
            ..Default::default()
        };
        assert_eq!(spec.cost().unwrap(), spec.cost().unwrap());
        let c = spec.cost().unwrap();
        assert!((c.std() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn density_from_potential_cases() {
        let g = small();
        let pot = make_grf(g, 0.5, 1.0, &mut rng::substream(2, "p", 0)).unwrap();
        let u = density_from_potential(&pot, 0.0).unwrap();
        let expected = 1.0 / g.len() as f64;
        assert!(u.mass.iter().all(|m| (m - expected).abs() < 1e-18));

        let argmax = pot
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let sharp = density_from_potential(&pot, 1e4).unwrap();
        assert!(sharp.mass[argmax] > 1.0 - 1e-6);

        let p1 = density_from_potential(&pot, 1.0).unwrap();
        let p2 = density_from_potential(&pot, 2.0).unwrap();
        let sq = GridPmf::from_weights(g, p1.mass.iter().map(|m| m * m).collect()).unwrap();
        for (a, b) in p2.mass.iter().zip(&sq.mass) {
            assert!((a - b).abs() <= 1e-12 * b.max(1e-300) + 1e-300);
        }
    }

    #[test]
    fn mixture_symmetries() {
        let g = Geometry::square(3.5, 31);
        let unit = MixtureComponent {
            mean: [0.0, 0.0],
            cov: [[1.0, 0.0], [0.0, 1.0]],
            weight: 1.0,
        };
        let p = mixture_pmf(&[unit.clone()], g).unwrap();
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                assert_eq!(p.mass[g.index(ix, iy)], p.mass[g.index(g.nx - 1 - ix, g.ny - 1 - iy)]);
            }
        }
        let left = MixtureComponent {
            mean: [-1.0, 0.5],
            cov: [[0.5, 0.1], [0.1, 0.7]],
            weight: 0.5,
        };
        let right = MixtureComponent {
            mean: [1.0, 0.5],
            cov: [[0.5, -0.1], [-0.1, 0.7]],
            weight: 0.5,
        };
        let m = mixture_pmf(&[left, right], g).unwrap();
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                assert_eq!(m.mass[g.index(ix, iy)], m.mass[g.index(g.nx - 1 - ix, iy)]);
            }
        }
        let mut zero = unit.clone();
        zero.weight = 0.0;
        zero.mean = [2.0, 2.0];
        assert_eq!(mixture_pmf(&[unit, zero], g).unwrap(), p);
    }

    #[test]
    fn mixture_rejects_degenerate_covariance() {
        let c = MixtureComponent {
            mean: [0.0, 0.0],
            cov: [[1.0, 1.0], [1.0, 1.0]],
            weight: 1.0,
        };
        assert!(matches!(mixture_pmf(&[c], small()), Err(Error::CovarianceNotSpd)));
    }

    #[test]
    fn tilt_cases() {
        let g = Geometry::square(1.0, 2);
        let p = GridPmf::from_weights(g, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let cost = GridField::new(g, vec![0.0, 3f64.ln(), 0.0, 3f64.ln()]).unwrap();
        let q = tilt(&p, &cost, 1.0).unwrap();
        assert!((q.mass[0] - 0.375).abs() < 1e-15 && (q.mass[1] - 0.125).abs() < 1e-15);
        assert_eq!(tilt(&p, &cost, 0.0).unwrap(), p);
        let flat = GridField::new(g, vec![2.0; 4]).unwrap();
        assert_eq!(tilt(&p, &flat, 5.0).unwrap(), p);
        let other = GridField::new(Geometry::square(2.0, 2), vec![0.0; 4]).unwrap();
        assert!(matches!(tilt(&p, &other, 1.0), Err(Error::GeometryMismatch)));
    }

    #[test]
    fn kl_values() {
        let g = Geometry::square(1.0, 2);
        let a = GridPmf::from_weights(g, vec![0.375, 0.125, 0.375, 0.125]).unwrap();
        let b = GridPmf::uniform(g).unwrap();
        // two cells (0.75, 0.25) vs (0.5, 0.5), duplicated: same KL
        let k = kl(&a, &b).unwrap();
        assert!((k - 0.130812).abs() < 5e-7, "{k}");
        assert_eq!(kl(&a, &a).unwrap(), 0.0);
        assert_eq!(skl(&a, &b).unwrap(), skl(&b, &a).unwrap());
        let z = GridPmf::from_weights(g, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(kl(&b, &z), Err(Error::AbsoluteContinuity)));
        assert!(kl(&z, &b).is_ok());
    }

    #[test]
    fn sampling_contracts() {
        let g = small();
        let mut w = vec![0.0; g.len()];
        let k = g.index(7, 20);
        w[k] = 1.0;
        let p = GridPmf::from_weights(g, w).unwrap();
        let pts = sample(&p, 2000, &mut rng::substream(0, "s", 0));
        let (x0, y0) = (g.x_min + 7.0 * g.dx(), g.y_min + 20.0 * g.dy());
        for q in &pts {
            assert!(q[0] >= x0 && q[0] <= x0 + g.dx() && q[1] >= y0 && q[1] <= y0 + g.dy());
        }
        let pot = make_grf(g, 0.5, 1.0, &mut rng::substream(2, "p", 0)).unwrap();
        let p = density_from_potential(&pot, 1.0).unwrap();
        for q in sample(&p, 5000, &mut rng::substream(1, "s", 0)) {
            assert!(g.contains(q));
        }
        let a = sample(&p, 10, &mut rng::substream(1, "s", 0));
        let b = sample(&p, 10, &mut rng::substream(1, "s", 0));
        assert_eq!(a, b);
    }

    #[test]
    fn interpolation_contracts() {
        let g = Geometry::square(2.0, 8);
        let pot = make_grf(g, 0.5, 1.0, &mut rng::substream(9, "i", 0)).unwrap();
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let v = pot.interp([g.x_center(ix), g.y_center(iy)]);
                assert!((v - pot.at(ix, iy)).abs() < 1e-14);
            }
        }
        let lin = GridField::from_fn(g, |x, y| 2.0 * x - 0.5 * y + 1.0).unwrap();
        for p in [[0.1, 0.2], [-1.3, 0.9], [1.6, -1.6]] {
            assert!((lin.interp(p) - (2.0 * p[0] - 0.5 * p[1] + 1.0)).abs() < 1e-12);
            let gr = lin.interp_grad(p);
            assert!((gr[0] - 2.0).abs() < 1e-12 && (gr[1] + 0.5).abs() < 1e-12);
        }
        let h = g.dx() / 100.0;
        let mut r = rng::substream(4, "i", 0);
        for _ in 0..50 {
            let p = [r.gen_range(-1.6..1.6), r.gen_range(-1.6..1.6)];
            // stay away from patch boundaries
            let ux = (p[0] - g.x_min) / g.dx() - 0.5;
            let uy = (p[1] - g.y_min) / g.dy() - 0.5;
            if (ux - ux.round()).abs() < 0.05 || (uy - uy.round()).abs() < 0.05 {
                continue;
            }
            let gr = pot.interp_grad(p);
            let fx = (pot.interp([p[0] + h, p[1]]) - pot.interp([p[0] - h, p[1]])) / (2.0 * h);
            let fy = (pot.interp([p[0], p[1] + h]) - pot.interp([p[0], p[1] - h])) / (2.0 * h);
            assert!((gr[0] - fx).abs() < 1e-6 && (gr[1] - fy).abs() < 1e-6);
        }
        // border padding
        let far = pot.interp([10.0, 10.0]);
        assert_eq!(far, pot.at(g.nx - 1, g.ny - 1));
        assert_eq!(pot.interp_grad([10.0, 10.0]), [0.0, 0.0]);
    }

    #[test]
    fn histogram_contracts() {
        let g = small();
        let h = histogram(&[[0.3, -0.2]], g).unwrap();
        assert_eq!(h.mass.iter().filter(|m| **m > 0.0).count(), 1);
        assert_eq!(h.total(), 1.0);
        let h = histogram(&[[100.0, -100.0], [0.0, 0.0]], g).unwrap();
        assert_eq!(h.mass[g.index(g.nx - 1, 0)], 0.5);
    }

    #[test]
    fn binary_round_trip_and_pgm() {
        let g = small();
        let f = make_grf(g, 0.5, 1.0, &mut rng::substream(2, "p", 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tf2d");
        f.save(&path).unwrap();
        assert_eq!(GridField::load(&path).unwrap(), f);
        let bytes = f.to_bytes();
        assert_eq!(&bytes[0..4], b"TF2D");
        assert_eq!(bytes.len(), 48 + 8 * g.len());
        let p = density_from_potential(&f, 1.0).unwrap();
        p.save(&path).unwrap();
        assert_eq!(GridPmf::load(&path).unwrap(), p);
        let pgm = p.to_pgm();
        assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
        assert_eq!(pgm.len(), 13 + g.len());
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(GridField::load(&path), Err(Error::Format { .. })));
    }
}
