//! Domain-gap diagnostics on pooled feature tokens: Gaussian-kernel MMD and
//! principal-component projections.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::exec;

/// Smallest bandwidth the median heuristic returns.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Largest point count the median heuristic looks at.
pub const MEDIAN_SUBSAMPLE: usize = 1000;

/// `m×d` feature rows with a domain tag and optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub rows: Tensor,
    pub domain: u32,
    pub labels: Option<Vec<usize>>,
}

impl FeatureSet {
    pub fn new(rows: Tensor, domain: u32, labels: Option<Vec<usize>>) -> Result<Self> {
        if rows.rank() != 2 {
            return Err(Error::shape("feature set", rows.shape(), &[0, 0]));
        }
        if !rows.is_finite() {
            return Err(Error::NonFinite("feature set".into()));
        }
        if let Some(l) = &labels {
            if l.len() != rows.rows() {
                return Err(Error::shape("feature labels", &[l.len()], &[rows.rows()]));
            }
        }
        Ok(Self { rows, domain, labels })
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    /// Writes `domain,class,f0,…`; unlabeled rows leave `class` empty.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("domain,class");
        for j in 0..self.dim() {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let class = self.labels.as_ref().map_or(String::new(), |l| l[i].to_string());
            let _ = write!(out, "{},{}", self.domain, class);
            for v in self.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize, reason: String| Error::Format {
            kind: "feature csv",
            reason: format!("{}: line {line}: {reason}", path.display()),
        };
        let mut lines = text.lines().enumerate();
        let header = lines
            .next()
            .ok_or_else(|| bad(1, "missing header".into()))?
            .1;
        let dim = header.split(',').count().checked_sub(2).filter(|_| header.starts_with("domain,class"));
        let dim = dim.ok_or_else(|| bad(1, "header must start with domain,class".into()))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut domain = None;
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != dim + 2 {
                return Err(bad(ln + 1, format!("expected {} fields, found {}", dim + 2, f.len())));
            }
            let d: u32 = f[0].parse().map_err(|_| bad(ln + 1, format!("bad domain {:?}", f[0])))?;
            domain.get_or_insert(d);
            labels.push(if f[1].is_empty() {
                None
            } else {
                Some(f[1].parse::<usize>().map_err(|_| bad(ln + 1, format!("bad class {:?}", f[1])))?)
            });
            for v in &f[2..] {
                data.push(v.parse::<f64>().map_err(|_| bad(ln + 1, format!("bad value {v:?}")))?);
            }
        }
        let m = labels.len();
        let labels = labels.into_iter().collect::<Option<Vec<_>>>();
        Self::new(Tensor::new([m, dim], data)?, domain.unwrap_or(0), labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the pooled sample.
    Median,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
    /// Seed of the median-heuristic subsample.
    pub seed: u64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Median,
            seed: 0,
        }
    }
}

impl KernelConfig {
    pub fn fixed(sigma: f64) -> Self {
        Self {
            bandwidth: Bandwidth::Fixed(sigma),
            seed: 0,
        }
    }

    pub fn mode(&self) -> &'static str {
        match self.bandwidth {
            Bandwidth::Fixed(_) => "fixed",
            Bandwidth::Median => "median",
        }
    }

    /// The bandwidth to use for the pair `(x, y)`.
    pub fn sigma(&self, x: &FeatureSet, y: &FeatureSet) -> Result<f64> {
        match self.bandwidth {
            Bandwidth::Fixed(s) => {
                check_sigma(s)?;
                Ok(s)
            }
            Bandwidth::Median => {
                let pooled: Vec<&[f64]> = (0..x.len()).map(|i| x.row(i)).chain((0..y.len()).map(|i| y.row(i))).collect();
                median_heuristic(&pooled, self.seed)
            }
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("kernel bandwidth {sigma} must be positive and finite")))
    }
}

fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `exp(−‖x−y‖²/(2σ²))`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    if x.len() != y.len() {
        return Err(Error::shape("kernel", &[x.len()], &[y.len()]));
    }
    Ok((-squared_distance(x, y) / (2.0 * sigma * sigma)).exp())
}

/// `Σ_i Σ_j k(a_i, b_j)`, skipping `i = j` when `skip_diagonal`. Row sums
/// may run in parallel; they are always combined in row order.
fn kernel_sum(a: &FeatureSet, b: &FeatureSet, sigma: f64, skip_diagonal: bool) -> f64 {
    let denom = 2.0 * sigma * sigma;
    let row = |i: usize| -> f64 {
        let x = a.row(i);
        let mut s = 0.0;
        for j in 0..b.len() {
            if skip_diagonal && i == j {
                continue;
            }
            s += (-squared_distance(x, b.row(j)) / denom).exp();
        }
        s
    };
    let rows: Vec<f64> = if exec::parallel() && a.len() * b.len() > 1 << 14 {
        (0..a.len()).into_par_iter().map(row).collect()
    } else {
        (0..a.len()).map(row).collect()
    };
    rows.iter().sum()
}

/// Orders a pair canonically so the estimate is exactly symmetric.
fn canonical<'a>(x: &'a FeatureSet, y: &'a FeatureSet) -> (&'a FeatureSet, &'a FeatureSet) {
    let key = |f: &FeatureSet| (f.len(), f.rows.data().to_vec());
    let (kx, ky) = (key(x), key(y));
    let ord = kx.0.cmp(&ky.0).then_with(|| {
        kx.1.iter()
            .zip(&ky.1)
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    if ord.is_gt() {
        (y, x)
    } else {
        (x, y)
    }
}

/// Unbiased squared MMD; may be slightly negative.
pub fn mmd_squared(x: &FeatureSet, y: &FeatureSet, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    for (name, s) in [("first", x), ("second", y)] {
        if s.len() < 2 {
            return Err(Error::Invalid(format!(
                "MMD needs at least 2 samples per set, {name} set has {}",
                s.len()
            )));
        }
    }
    if x.dim() != y.dim() {
        return Err(Error::shape("mmd", &[x.dim()], &[y.dim()]));
    }
    let (a, b) = canonical(x, y);
    let (m, n) = (a.len() as f64, b.len() as f64);
    let aa = kernel_sum(a, a, sigma, true) / (m * (m - 1.0));
    let bb = kernel_sum(b, b, sigma, true) / (n * (n - 1.0));
    let ab = kernel_sum(a, b, sigma, false) / (m * n);
    Ok(aa + bb - 2.0 * ab)
}

/// Median pairwise Euclidean distance over at most [`MEDIAN_SUBSAMPLE`]
/// points, floored at [`SIGMA_FLOOR`]. With an even number of distances the
/// two middle values are averaged.
pub fn median_heuristic(points: &[&[f64]], seed: u64) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Invalid("median heuristic needs at least 2 points".into()));
    }
    let chosen: Vec<&[f64]> = if points.len() > MEDIAN_SUBSAMPLE {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, points.len(), MEDIAN_SUBSAMPLE).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| points[i]).collect()
    } else {
        points.to_vec()
    };
    let mut d = Vec::with_capacity(chosen.len() * (chosen.len() - 1) / 2);
    for i in 0..chosen.len() {
        for j in i + 1..chosen.len() {
            d.push(squared_distance(chosen[i], chosen[j]).sqrt());
        }
    }
    d.sort_unstable_by(f64::total_cmp);
    let n = d.len();
    let median = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    Ok(median.max(SIGMA_FLOOR))
}

/// A fitted projection and the projected rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `m×dims`.
    pub coords: Tensor,
    /// Fraction of total variance per component, non-increasing.
    pub explained: Vec<f64>,
    /// Unit principal directions, one per component (zero when the data has
    /// fewer non-degenerate directions than requested).
    pub components: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Principal-component projection of the rows of `data` onto `dims` axes.
pub fn pca_project(data: &Tensor, dims: usize) -> Result<Projection> {
    if data.rank() != 2 {
        return Err(Error::shape("pca input", data.shape(), &[0, 0]));
    }
    let (m, d) = (data.shape()[0], data.shape()[1]);
    if dims == 0 || dims > d {
        return Err(Error::Invalid(format!("cannot project {d}-dimensional data onto {dims} axes")));
    }
    if m <= dims {
        return Err(Error::Invalid(format!("PCA onto {dims} axes needs more than {dims} rows, got {m}")));
    }
    if !data.is_finite() {
        return Err(Error::NonFinite("pca input".into()));
    }
    let mut mean = vec![0.0; d];
    for i in 0..m {
        for (acc, v) in mean.iter_mut().zip(data.row(i)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let centered = DMatrix::from_fn(m, d, |i, j| data.at(i, j) - mean[j]);
    let cov = centered.transpose() * &centered / (m as f64 - 1.0);
    let total: f64 = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * d as f64 * f64::EPSILON * 16.0;

    let mut components = Vec::with_capacity(dims);
    let mut explained = Vec::with_capacity(dims);
    for &k in order.iter().take(dims) {
        let value = eig.eigenvalues[k];
        if value <= tol || total <= 0.0 {
            components.push(vec![0.0; d]);
            explained.push(0.0);
            continue;
        }
        let mut dir: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = (0..d)
            .max_by(|&a, &b| dir[a].abs().total_cmp(&dir[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0);
        if dir[lead] < 0.0 {
            dir.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(dir);
        explained.push(value / total);
    }
    let coords = Tensor::from_fn([m, dims], |idx| {
        let (i, c) = (idx / dims, idx % dims);
        (0..d).map(|j| centered[(i, j)] * components[c][j]).sum()
    });
    Ok(Projection {
        coords,
        explained,
        components,
        mean,
    })
}

/// MMD, bandwidth and a joint projection of two feature sets.
#[derive(Clone, Debug, PartialEq)]
pub struct GapReport {
    pub mmd: f64,
    pub sigma: f64,
    pub sigma_mode: &'static str,
    pub source_size: usize,
    pub target_size: usize,
    /// Fitted on the union; source rows first.
    pub projection: Projection,
}

impl GapReport {
    /// `key=value` lines.
    pub fn report(&self) -> String {
        let ev: Vec<String> = self.projection.explained.iter().map(|v| v.to_string()).collect();
        format!(
            "mmd={}\nsigma={}\nsigma_mode={}\nsource_size={}\ntarget_size={}\nexplained_variance={}\n",
            self.mmd,
            self.sigma,
            self.sigma_mode,
            self.source_size,
            self.target_size,
            ev.join(" ")
        )
    }

    pub const CSV_HEADER: &'static str = "mmd,sigma,sigma_mode,source_size,target_size";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.mmd, self.sigma, self.sigma_mode, self.source_size, self.target_size
        )
    }
}

fn stack(sets: &[&FeatureSet]) -> Result<Tensor> {
    let d = sets[0].dim();
    let mut data = Vec::new();
    let mut m = 0;
    for s in sets {
        if s.dim() != d {
            return Err(Error::shape("feature sets", &[s.dim()], &[d]));
        }
        data.extend_from_slice(s.rows.data());
        m += s.len();
    }
    Tensor::new([m, d], data)
}

pub fn domain_gap_report(
    source: &FeatureSet,
    target: &FeatureSet,
    kernel: &KernelConfig,
    dims: usize,
) -> Result<GapReport> {
    let sigma = kernel.sigma(source, target)?;
    let mmd = mmd_squared(source, target, sigma)?;
    let projection = pca_project(&stack(&[source, target])?, dims)?;
    Ok(GapReport {
        mmd,
        sigma,
        sigma_mode: kernel.mode(),
        source_size: source.len(),
        target_size: target.len(),
        projection,
    })
}

/// Projects the union of `sets` on shared axes and writes
/// `domain,class,pc1,pc2[,pc3]`. Returns the fitted projection.
pub fn write_projection_csv(path: impl AsRef<Path>, sets: &[&FeatureSet], dims: usize) -> Result<Projection> {
    let path = path.as_ref();
    if sets.is_empty() {
        return Err(Error::Invalid("no feature sets to project".into()));
    }
    let proj = pca_project(&stack(sets)?, dims)?;
    let mut out = String::from("domain,class");
    for c in 1..=dims {
        let _ = write!(out, ",pc{c}");
    }
    out.push('\n');
    let mut row = 0;
    for s in sets {
        for i in 0..s.len() {
            let class = s.labels.as_ref().map_or(String::new(), |l| l[i].to_string());
            let _ = write!(out, "{},{}", s.domain, class);
            for v in proj.coords.row(row) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
            row += 1;
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(proj)
}
