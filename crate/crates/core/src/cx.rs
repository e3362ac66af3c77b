//! Contextual similarity between two sets of deep features and the
//! `-log CX` loss, with its analytic gradient.
//!
//! Rows of the distance matrix index the generated set, columns the
//! reference set. Each reference feature is credited with the best affinity
//! any generated feature assigns to it, so the measure ignores where on the
//! grid features come from.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::perceptual::FeatureStack;
use crate::rng::SeededRng;
use crate::scalar::Real;
use crate::tensor::FeatureMap;

/// `N` feature vectors of dimension `dim`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        contract!(dim > 0, "feature dimension must be positive");
        contract!(
            !data.is_empty() && data.len().is_multiple_of(dim),
            "{} values do not form a nonempty set of {dim}-vectors",
            data.len()
        );
        contract!(
            data.iter().all(|v| v.is_finite()),
            "feature set has non-finite values"
        );
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        contract!(rows.iter().all(|r| r.len() == dim), "ragged feature rows");
        Self::new(dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Same set with rows reordered: row `i` of the result is row `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for &i in order {
            data.extend_from_slice(self.row(i));
        }
        Self { dim: self.dim, data }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub source_layers: Vec<String>,
    pub target_layers: Vec<String>,
    /// Bandwidth `h` of the exponential affinity.
    pub h: f64,
    pub epsilon: f64,
    pub feature_cap: usize,
    pub subsample_seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.99,
            source_layers: vec!["conv4_2".to_string()],
            target_layers: vec!["conv3_2".to_string(), "conv4_2".to_string()],
            h: 0.5,
            epsilon: 1e-5,
            feature_cap: 1024,
            subsample_seed: 0,
        }
    }
}

impl LossConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.lambda1 + self.lambda2 > 0.0) {
            return bad("at least one loss weight must be positive");
        }
        if !(self.h > 0.0) {
            return bad("bandwidth h must be positive");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.feature_cap == 0 {
            return bad("feature_cap must be positive");
        }
        for l in self.source_layers.iter().chain(&self.target_layers) {
            crate::perceptual::layer_index(l)?;
        }
        Ok(())
    }
}

/// Spatial positions kept for a `height x width` grid: all of them under
/// the cap, otherwise `cap` positions drawn uniformly by `seed`.
pub fn subsample_positions(height: usize, width: usize, cap: usize, seed: u64) -> Vec<usize> {
    let n = height * width;
    if n <= cap {
        (0..n).collect()
    } else {
        SeededRng::derived(seed, n as u64).sample_indices(n, cap)
    }
}

/// Rows of the set are the channel vectors at `positions` of `grid`.
pub fn gather_positions<T: Real>(grid: &FeatureMap<T>, positions: &[usize]) -> Result<FeatureSet> {
    let (c, _, _) = grid.shape();
    let hw = grid.plane_len();
    let mut data = Vec::with_capacity(positions.len() * c);
    for &p in positions {
        contract!(p < hw, "position {p} outside a grid of {hw}");
        for ch in 0..c {
            data.push(grid.data()[ch * hw + p].as_f64());
        }
    }
    FeatureSet::new(c, data)
}

/// Scatters a gradient over gathered rows back onto the grid layout.
pub fn scatter_positions<T: Real>(
    grad_rows: &[f64],
    positions: &[usize],
    shape: (usize, usize, usize),
) -> FeatureMap<T> {
    let (c, h, w) = shape;
    let hw = h * w;
    let mut out = FeatureMap::zeros(c, h, w);
    let data = out.data_mut();
    for (r, &p) in positions.iter().enumerate() {
        for ch in 0..c {
            data[ch * hw + p] += T::of(grad_rows[r * c + ch]);
        }
    }
    out
}

pub fn flatten_and_subsample<T: Real>(
    stack: &FeatureStack<T>,
    layer: &str,
    cap: usize,
    seed: u64,
) -> Result<FeatureSet> {
    let grid = stack
        .get(layer)
        .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
    let positions = subsample_positions(grid.height(), grid.width(), cap, seed);
    gather_positions(grid, &positions)
}

/// Cosine distances `1 - cos(x_i - mu_Y, y_j - mu_Y)` in `[0, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        contract!(rows > 0 && cols > 0, "distance matrix must be nonempty");
        contract!(data.len() == rows * cols, "distance buffer size mismatch");
        contract!(
            data.iter().all(|d| d.is_finite() && *d >= 0.0),
            "distances must be finite and non-negative"
        );
        Ok(Self { rows, cols, data })
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Unit rows `(v - center) / max(|v - center|, eps)` and their pre-normalisation norms.
fn center_and_normalize(set: &FeatureSet, center: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let dim = set.dim;
    let mut out = Vec::with_capacity(set.data.len());
    let mut norms = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let row = set.row(i);
        let start = out.len();
        out.extend(row.iter().zip(center).map(|(v, c)| v - c));
        let norm = libm::sqrt(out[start..].iter().map(|v| v * v).sum::<f64>());
        let denom = norm.max(eps);
        out[start..start + dim].iter_mut().for_each(|v| *v /= denom);
        norms.push(norm);
    }
    (out, norms)
}

fn mean_vector(set: &FeatureSet) -> Vec<f64> {
    let mut mu = vec![0.0; set.dim];
    for i in 0..set.len() {
        for (m, v) in mu.iter_mut().zip(set.row(i)) {
            *m += v;
        }
    }
    let n = set.len() as f64;
    mu.iter_mut().for_each(|m| *m /= n);
    mu
}

struct DistanceParts {
    matrix: DistanceMatrix,
    /// Entries that hit the `[0, 2]` clamp carry no gradient.
    clamped: Vec<bool>,
    x_unit: Vec<f64>,
    x_norms: Vec<f64>,
    y_unit: Vec<f64>,
}

/// Guard against zero-length vectors after centering.
const NORM_EPS: f64 = 1e-12;

fn distance_parts(x: &FeatureSet, y: &FeatureSet) -> Result<DistanceParts> {
    contract!(
        x.dim == y.dim,
        "feature dimension mismatch: {} vs {}",
        x.dim,
        y.dim
    );
    contract!(!y.is_empty() && !x.is_empty(), "feature sets must be nonempty");
    let mu = mean_vector(y);
    let (x_unit, x_norms) = center_and_normalize(x, &mu, NORM_EPS);
    let (y_unit, _) = center_and_normalize(y, &mu, NORM_EPS);
    let (n, m, c) = (x.len(), y.len(), x.dim);
    let mut cos = vec![0.0; n * m];
    f64::gemm(
        n,
        c,
        m,
        1.0,
        &x_unit,
        (c as isize, 1),
        &y_unit,
        (1, c as isize),
        0.0,
        &mut cos,
        (m as isize, 1),
    );
    let mut clamped = vec![false; n * m];
    let data = cos
        .iter()
        .zip(clamped.iter_mut())
        .map(|(&cs, cl)| {
            let d = 1.0 - cs;
            if !(0.0..=2.0).contains(&d) {
                *cl = true;
            }
            d.clamp(0.0, 2.0)
        })
        .collect();
    Ok(DistanceParts {
        matrix: DistanceMatrix {
            rows: n,
            cols: m,
            data,
        },
        clamped,
        x_unit,
        x_norms,
        y_unit,
    })
}

pub fn distance_matrix(x: &FeatureSet, y: &FeatureSet) -> Result<DistanceMatrix> {
    distance_parts(x, y).map(|p| p.matrix)
}

struct Affinities {
    /// Row-normalised affinities `A`, N x M.
    a: Vec<f64>,
    row_min: Vec<f64>,
    row_argmin: Vec<usize>,
    /// For each column, the row holding its maximum affinity.
    col_argmax: Vec<usize>,
    cx: f64,
}

fn affinities(d: &DistanceMatrix, h: f64, eps: f64) -> Affinities {
    let (n, m) = (d.rows, d.cols);
    let mut a = vec![0.0; n * m];
    let mut row_min = Vec::with_capacity(n);
    let mut row_argmin = Vec::with_capacity(n);
    for i in 0..n {
        let row = d.row(i);
        let (arg, &min) = row
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(y.1))
            .expect("nonempty row");
        row_min.push(min);
        row_argmin.push(arg);
        let scale = 1.0 / (min + eps);
        let out = &mut a[i * m..(i + 1) * m];
        // largest logit belongs to the smallest relative distance
        let zmax = (1.0 - min * scale) / h;
        let mut total = 0.0;
        for (o, &dij) in out.iter_mut().zip(row) {
            let z = (1.0 - dij * scale) / h;
            *o = libm::exp(z - zmax);
            total += *o;
        }
        out.iter_mut().for_each(|v| *v /= total);
    }
    let mut col_argmax = vec![0; m];
    let mut sum = 0.0;
    for (j, best) in col_argmax.iter_mut().enumerate() {
        let mut bi = 0;
        for i in 1..n {
            if a[i * m + j] > a[bi * m + j] {
                bi = i;
            }
        }
        *best = bi;
        sum += a[bi * m + j];
    }
    Affinities {
        a,
        row_min,
        row_argmin,
        col_argmax,
        cx: sum / m as f64,
    }
}

/// Contextual similarity in `(0, 1]`.
pub fn contextual_similarity(d: &DistanceMatrix, h: f64, epsilon: f64) -> f64 {
    affinities(d, h, epsilon).cx
}

/// `-log CX(g, ref)`.
pub fn cx_loss(g_feats: &FeatureSet, ref_feats: &FeatureSet, h: f64, epsilon: f64) -> Result<f64> {
    let d = distance_matrix(g_feats, ref_feats)?;
    Ok(-libm::log(contextual_similarity(&d, h, epsilon)))
}

/// `-log CX(g, ref)` and its gradient with respect to every generated
/// feature (row-major, same layout as `g_feats`).
pub fn cx_loss_with_grad(
    g_feats: &FeatureSet,
    ref_feats: &FeatureSet,
    h: f64,
    epsilon: f64,
) -> Result<(f64, Vec<f64>)> {
    let parts = distance_parts(g_feats, ref_feats)?;
    let d = &parts.matrix;
    let (n, m, c) = (d.rows, d.cols, g_feats.dim);
    let aff = affinities(d, h, epsilon);
    let loss = -libm::log(aff.cx);

    // dL/dA is nonzero only at each column's argmax.
    let coef = -1.0 / (aff.cx * m as f64);
    let mut g_d = vec![0.0; n * m];
    for i in 0..n {
        let a_row = &aff.a[i * m..(i + 1) * m];
        let mut ga_dot_a = 0.0;
        for (j, &best) in aff.col_argmax.iter().enumerate() {
            if best == i {
                ga_dot_a += coef * a_row[j];
            }
        }
        let denom = aff.row_min[i] + epsilon;
        let mut g_min = 0.0;
        let row_g = &mut g_d[i * m..(i + 1) * m];
        for j in 0..m {
            let ga = if aff.col_argmax[j] == i { coef } else { 0.0 };
            let gz = a_row[j] * (ga - ga_dot_a);
            let g_rel = -gz / h;
            row_g[j] += g_rel / denom;
            g_min -= g_rel * d.data[i * m + j] / (denom * denom);
        }
        row_g[aff.row_argmin[i]] += g_min;
    }
    for (g, &cl) in g_d.iter_mut().zip(&parts.clamped) {
        if cl {
            *g = 0.0;
        }
    }

    // d = 1 - <x_hat, y_hat>  =>  dL/dx_hat = -G_D * Y_hat
    let mut g_unit = vec![0.0; n * c];
    f64::gemm(
        n,
        m,
        c,
        -1.0,
        &g_d,
        (m as isize, 1),
        &parts.y_unit,
        (c as isize, 1),
        0.0,
        &mut g_unit,
        (c as isize, 1),
    );
    for i in 0..n {
        let xu = &parts.x_unit[i * c..(i + 1) * c];
        let gu = &mut g_unit[i * c..(i + 1) * c];
        let norm = parts.x_norms[i];
        if norm > NORM_EPS {
            let proj: f64 = xu.iter().zip(gu.iter()).map(|(a, b)| a * b).sum();
            for (g, &x) in gu.iter_mut().zip(xu) {
                *g = (*g - x * proj) / norm;
            }
        } else {
            gu.iter_mut().for_each(|g| *g /= NORM_EPS);
        }
    }
    Ok((loss, g_unit))
}
