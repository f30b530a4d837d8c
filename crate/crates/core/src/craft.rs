//! Attack preparation: the auxiliary brightness CDF, the bin vector and the
//! two crafted front blocks.

use serde::{Deserialize, Serialize};

use crate::data::{brightness, ImageSample, TextRecord};
use crate::error::{Error, Result};
use crate::math::{matmul_bt, relu, Matrix};
use crate::models::LocalModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    LinearLeakage,
    ZeroGradient,
}

impl ModuleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::LinearLeakage => "linear_leakage",
            ModuleKind::ZeroGradient => "zero_gradient",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Insertion {
    ImageFront,
    PostEmbedding,
}

/// Ascending brightness values of the auxiliary samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrightnessCdf {
    sorted_values: Vec<f64>,
}

impl BrightnessCdf {
    pub fn from_values(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("auxiliary set is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite brightness value".into()));
        }
        values.sort_by(f64::total_cmp);
        Ok(BrightnessCdf { sorted_values: values })
    }

    pub fn from_images(aux: &[ImageSample]) -> Result<Self> {
        let values = aux.iter().map(|s| brightness(&s.pixels)).collect::<Result<Vec<_>>>()?;
        Self::from_values(values)
    }

    /// Brightness of each record's flattened embedding under the published
    /// table.
    pub fn from_text(aux: &[TextRecord], embedding: &Matrix) -> Result<Self> {
        let e = embedding.cols();
        let values = aux
            .iter()
            .map(|r| {
                let mut z = Vec::with_capacity(r.tokens.len() * e);
                for &t in &r.tokens {
                    if t >= embedding.rows() {
                        return Err(Error::Index(format!("token {t} outside embedding table")));
                    }
                    z.extend_from_slice(embedding.row(t));
                }
                brightness(&z)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_values(values)
    }

    pub fn sorted_values(&self) -> &[f64] {
        &self.sorted_values
    }

    pub fn len(&self) -> usize {
        self.sorted_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted_values.is_empty()
    }

    /// Fraction of values `<= x`.
    pub fn eval(&self, x: f64) -> f64 {
        self.sorted_values.partition_point(|&v| v <= x) as f64 / self.len() as f64
    }

    /// Nearest-rank quantile: the smallest value whose CDF is at least `q`.
    pub fn quantile(&self, q: f64) -> f64 {
        let n = self.len();
        // slack absorbs representation error in q·N for rational levels
        let rank = (q * n as f64 - 1e-9).ceil().clamp(1.0, n as f64) as usize;
        self.sorted_values[rank - 1]
    }
}

/// `h_j = ψ⁻¹(j/k)` for `j = 1..=k`, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinVector {
    h: Vec<f64>,
}

impl BinVector {
    pub fn new(cdf: &BrightnessCdf, k: usize) -> Result<Self> {
        if k < 1 {
            return Err(Error::Config("bin count k must be at least 1".into()));
        }
        let n = cdf.len();
        let h = (1..=k)
            .map(|j| {
                // ceil(j·N/k) in exact integer arithmetic
                let rank = (j * n).div_ceil(k);
                cdf.sorted_values[rank - 1]
            })
            .collect();
        Ok(BinVector { h })
    }

    pub fn from_edges(h: Vec<f64>) -> Result<Self> {
        if h.is_empty() || h.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("bin edges must be non-empty and non-decreasing".into()));
        }
        Ok(BinVector { h })
    }

    pub fn edges(&self) -> &[f64] {
        &self.h
    }

    pub fn k(&self) -> usize {
        self.h.len()
    }

    pub fn max(&self) -> f64 {
        *self.h.last().expect("non-empty")
    }

    /// All edges equal: every sample would share one bin.
    pub fn is_degenerate(&self) -> bool {
        self.h.first() == self.h.last()
    }

    /// Bin index (1-based) a brightness value is recovered in, or `None` when
    /// it activates no neuron (at or below `h_1`). Ties fall to the lower bin.
    pub fn bin_of(&self, b: f64) -> Option<usize> {
        let active = self.h.partition_point(|&h| h < b);
        (active > 0).then_some(active)
    }
}

/// The adversarial two-layer block `out = w2 · relu(w1 · x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CraftedModule {
    /// k × d
    pub w1: Matrix,
    /// 1 × k
    pub b1: Matrix,
    /// d × k
    pub w2: Matrix,
    /// 1 × d
    pub b2: Matrix,
    pub kind: ModuleKind,
    pub insertion: Insertion,
}

impl CraftedModule {
    pub fn k(&self) -> usize {
        self.w1.rows()
    }

    pub fn d(&self) -> usize {
        self.w1.cols()
    }

    pub fn pre_activation(&self, x: &Matrix) -> Result<Matrix> {
        let mut pre = matmul_bt(x, &self.w1)?;
        pre.add_row_broadcast(&self.b1)?;
        Ok(pre)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = matmul_bt(&relu(&self.pre_activation(x)?), &self.w2)?;
        out.add_row_broadcast(&self.b2)?;
        Ok(out)
    }

    /// Blocks in canonical order with their published names.
    pub fn named_blocks(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("crafted.w1", &self.w1),
            ("crafted.b1", &self.b1),
            ("crafted.w2", &self.w2),
            ("crafted.b2", &self.b2),
        ]
    }
}

fn build(h: &BinVector, d: usize, w2_row_scale: f64, kind: ModuleKind, insertion: Insertion) -> CraftedModule {
    let k = h.k();
    let d = d.max(1);
    let bias = match kind {
        ModuleKind::LinearLeakage => h.edges().iter().map(|v| -v).collect(),
        ModuleKind::ZeroGradient => vec![-h.max(); k],
    };
    CraftedModule {
        w1: Matrix::filled(k, d, 1.0 / d as f64),
        b1: Matrix::row_vector(bias),
        w2: Matrix::filled(d, k, w2_row_scale),
        b2: Matrix::zeros(1, d),
        kind,
        insertion,
    }
}

/// Rows of `w1` all `1/d`, `b1 = −H`, identical `w2` rows, `b2 = 0`.
pub fn craft_linear_leakage(h: &BinVector, d: usize, w2_row_scale: f64) -> CraftedModule {
    build(h, d, w2_row_scale, ModuleKind::LinearLeakage, Insertion::ImageFront)
}

pub fn craft_linear_leakage_at(h: &BinVector, d: usize, w2_row_scale: f64, insertion: Insertion) -> CraftedModule {
    build(h, d, w2_row_scale, ModuleKind::LinearLeakage, insertion)
}

/// As [`craft_linear_leakage`] but with every bias at `−h_k`.
pub fn craft_zero_gradient(h: &BinVector, d: usize, w2_row_scale: f64) -> CraftedModule {
    build(h, d, w2_row_scale, ModuleKind::ZeroGradient, Insertion::ImageFront)
}

pub fn craft_zero_gradient_at(h: &BinVector, d: usize, w2_row_scale: f64, insertion: Insertion) -> CraftedModule {
    build(h, d, w2_row_scale, ModuleKind::ZeroGradient, insertion)
}

/// A zero-gradient block whose biases sit just below `−bound` instead of at
/// `−h_k`. With `bound` at or above the largest attainable brightness no
/// input can activate it; the margin covers rounding in the `d`-term mean.
pub fn craft_zero_gradient_bounded(
    k: usize,
    d: usize,
    w2_row_scale: f64,
    bound: f64,
    insertion: Insertion,
) -> CraftedModule {
    let d = d.max(1);
    let k = k.max(1);
    let margin = 2.0 * d as f64 * f64::EPSILON * bound.abs().max(1.0);
    CraftedModule {
        w1: Matrix::filled(k, d, 1.0 / d as f64),
        b1: Matrix::filled(1, k, -(bound + margin)),
        w2: Matrix::filled(d, k, w2_row_scale),
        b2: Matrix::zeros(1, d),
        kind: ModuleKind::ZeroGradient,
        insertion,
    }
}

/// Installs `module` in front of the model's head; head parameters are
/// untouched.
pub fn graft<M: LocalModel>(model: &M, module: &CraftedModule) -> Result<M> {
    if module.insertion != model.insertion() {
        return Err(Error::Shape(format!(
            "{:?} module cannot be grafted at {:?}",
            module.insertion,
            model.insertion()
        )));
    }
    let d = model.feature_dim();
    if module.d() != d || module.w2.rows() != d || module.b2.cols() != d {
        return Err(Error::Shape(format!(
            "module dimension {} does not match model feature dimension {d}",
            module.d()
        )));
    }
    let mut out = model.clone();
    *out.crafted_mut() = Some(crate::models::CraftedLayer::from_module(module));
    Ok(out)
}

/// Recognises the crafted patterns in raw parameter blocks.
pub fn detect_kind(w1: &Matrix, b1: &Matrix, w2: &Matrix) -> Option<ModuleKind> {
    let d = w1.cols();
    if d == 0 || w1.rows() == 0 || b1.len() != w1.rows() || w2.cols() != w1.rows() {
        return None;
    }
    let inv = 1.0 / d as f64;
    let tol = 1e-12;
    if w1.data().iter().any(|&v| (v - inv).abs() > tol) {
        return None;
    }
    let first = w2.row(0);
    if (1..w2.rows()).any(|r| w2.row(r).iter().zip(first).any(|(a, b)| (a - b).abs() > tol)) {
        return None;
    }
    let b = b1.data();
    if b.len() > 1 && b.iter().all(|&v| v == b[0]) {
        Some(ModuleKind::ZeroGradient)
    } else if b.windows(2).all(|w| w[0] >= w[1]) {
        Some(ModuleKind::LinearLeakage)
    } else {
        None
    }
}
