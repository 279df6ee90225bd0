//! Hawkes model representation and the integrated branching algebra.
//!
//! Kernels are expanded on a dictionary of unit-mass exponentials
//! `g(s) = decay * exp(-decay * s)`, so the integrated kernel matrix is the sum
//! of coefficients over the dictionary and no quadrature is ever needed.
//! From it we get the branching matrix `R = (Id - Phi)^-1` and the mean
//! intensities `Lambda = R * mu`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Lu, Matrix, Vector};
use crate::types::Component;

/// Tolerance of the power iteration behind [`spectral_radius`].
pub const SPECTRAL_TOLERANCE: f64 = 1e-10;
/// Iteration cap of the power iteration behind [`spectral_radius`].
pub const SPECTRAL_MAX_ITER: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("power iteration did not settle after {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("kernel matrix is unstable: spectral radius {spectral_radius:.6} >= 1")]
    Unstable { spectral_radius: f64 },
    #[error("Id - Phi is numerically singular (pivot {pivot:e} in column {column})")]
    Singular { column: usize, pivot: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("toy model denominator (1 - phi_s)^2 - phi_c^2 vanishes")]
    DegenerateDenominator,
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// Dictionary of exponential basis functions, identified by their decay rates
/// (1/seconds), strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BasisDictionary {
    decays: Vec<f64>,
}

impl BasisDictionary {
    pub fn new(decays: Vec<f64>) -> Result<Self, ModelError> {
        if decays.is_empty() {
            return Err(ModelError::Invalid("basis dictionary needs at least one decay".into()));
        }
        if decays.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(ModelError::Invalid("decays must be finite and positive".into()));
        }
        if decays.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ModelError::Invalid("decays must be strictly increasing".into()));
        }
        Ok(Self { decays })
    }

    /// `len` decays `1/tau` with `tau` log-spaced on `[tau_min, tau_max]` seconds.
    pub fn log_spaced(len: usize, tau_min: f64, tau_max: f64) -> Result<Self, ModelError> {
        if len == 0 || !(tau_min > 0.0 && tau_max > tau_min) {
            return Err(ModelError::Invalid(format!(
                "log-spaced grid needs len >= 1 and 0 < tau_min < tau_max (got {len}, {tau_min}, {tau_max})"
            )));
        }
        let taus: Vec<f64> = if len == 1 {
            vec![tau_max]
        } else {
            let (a, b) = (tau_min.ln(), tau_max.ln());
            (0..len)
                .map(|i| (a + (b - a) * i as f64 / (len - 1) as f64).exp())
                .collect()
        };
        // largest lag first so decays come out increasing
        Self::new(taus.iter().rev().map(|t| 1.0 / t).collect())
    }

    pub fn decays(&self) -> &[f64] {
        &self.decays
    }

    pub fn len(&self) -> usize {
        self.decays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decays.is_empty()
    }

    /// `g_l(s)`; zero for negative lags.
    pub fn eval(&self, l: usize, s: f64) -> f64 {
        if s < 0.0 {
            0.0
        } else {
            let d = self.decays[l];
            d * (-d * s).exp()
        }
    }
}

impl TryFrom<Vec<f64>> for BasisDictionary {
    type Error = ModelError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<BasisDictionary> for Vec<f64> {
    fn from(b: BasisDictionary) -> Self {
        b.decays
    }
}

/// Coefficients `alpha[target][source][l]` of the kernels on a basis.
/// Coefficients may be negative (inhibition).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    dim: usize,
    basis: BasisDictionary,
    coeffs: Vec<f64>,
}

impl KernelMatrix {
    pub fn zeros(dim: usize, basis: BasisDictionary) -> Self {
        let len = dim * dim * basis.len();
        Self { dim, basis, coeffs: vec![0.0; len] }
    }

    /// Builds from a nested `[target][source][l]` array.
    pub fn from_nested(basis: BasisDictionary, nested: &[Vec<Vec<f64>>]) -> Result<Self, ModelError> {
        let dim = nested.len();
        let mut k = Self::zeros(dim, basis);
        for (t, row) in nested.iter().enumerate() {
            if row.len() != dim {
                return Err(ModelError::DimensionMismatch { expected: dim, found: row.len() });
            }
            for (s, cell) in row.iter().enumerate() {
                if cell.len() != k.basis.len() {
                    return Err(ModelError::DimensionMismatch {
                        expected: k.basis.len(),
                        found: cell.len(),
                    });
                }
                for (l, v) in cell.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(ModelError::Invalid(format!("non-finite coefficient at [{t}][{s}][{l}]")));
                    }
                    k.set(t, s, l, *v);
                }
            }
        }
        Ok(k)
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.dim)
            .map(|t| (0..self.dim).map(|s| self.cell(t, s).to_vec()).collect())
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn basis(&self) -> &BasisDictionary {
        &self.basis
    }

    fn offset(&self, target: usize, source: usize) -> usize {
        (target * self.dim + source) * self.basis.len()
    }

    pub fn get(&self, target: usize, source: usize, l: usize) -> f64 {
        self.coeffs[self.offset(target, source) + l]
    }

    pub fn set(&mut self, target: usize, source: usize, l: usize, value: f64) {
        let o = self.offset(target, source);
        self.coeffs[o + l] = value;
    }

    /// All dictionary coefficients of one kernel.
    pub fn cell(&self, target: usize, source: usize) -> &[f64] {
        let o = self.offset(target, source);
        &self.coeffs[o..o + self.basis.len()]
    }

    pub fn cell_mut(&mut self, target: usize, source: usize) -> &mut [f64] {
        let o = self.offset(target, source);
        let l = self.basis.len();
        &mut self.coeffs[o..o + l]
    }

    pub fn has_negative(&self) -> bool {
        self.coeffs.iter().any(|c| *c < 0.0)
    }

    /// Kernel value `phi[target][source](s)`.
    pub fn eval(&self, target: usize, source: usize, s: f64) -> f64 {
        self.cell(target, source)
            .iter()
            .enumerate()
            .map(|(l, a)| a * self.basis.eval(l, s))
            .sum()
    }
}

/// Integrated kernel matrix: `Phi[t][s] = sum_l alpha[t][s][l]`. Exact, since
/// every basis function has unit mass.
pub fn integrate_kernels(k: &KernelMatrix) -> Matrix {
    Matrix::from_fn(k.dim(), k.dim(), |t, s| k.cell(t, s).iter().sum())
}

/// Spectral radius of the entrywise absolute value of `phi`.
pub fn spectral_radius(phi: &Matrix) -> Result<f64, ModelError> {
    if !phi.is_square() {
        return Err(ModelError::DimensionMismatch { expected: phi.nrows(), found: phi.ncols() });
    }
    linalg::perron_root_abs(phi, SPECTRAL_TOLERANCE, SPECTRAL_MAX_ITER)
        .map_err(|e| ModelError::NonConvergence { iterations: e.iterations })
}

/// `R = (Id - Phi)^-1`, gated on `spectral_radius(|Phi|) < 1`.
pub fn compute_r(phi: &Matrix) -> Result<Matrix, ModelError> {
    let rho = spectral_radius(phi)?;
    if rho >= 1.0 {
        return Err(ModelError::Unstable { spectral_radius: rho });
    }
    let n = phi.nrows();
    let a = Matrix::identity(n, n) - phi;
    let lu = Lu::factor(&a).map_err(|e| ModelError::Singular { column: e.column, pivot: e.pivot })?;
    let mut r = lu.inverse();
    // one step of iterative refinement when the residual is visible
    let resid = Matrix::identity(n, n) - &r * &a;
    if linalg::max_abs(&resid) > 1e-13 {
        r += &r * resid;
    }
    Ok(r)
}

/// `Lambda = R * mu_bar`.
pub fn mean_intensities(r: &Matrix, mu_bar: &Vector) -> Result<Vector, ModelError> {
    if r.ncols() != mu_bar.len() {
        return Err(ModelError::DimensionMismatch { expected: r.ncols(), found: mu_bar.len() });
    }
    Ok(r * mu_bar)
}

/// Baselines recovered from mean intensities. Negative entries are kept and
/// listed in `negative`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredBaselines {
    pub values: Vector,
    pub negative: Vec<usize>,
}

/// `mu_bar = (Id - Phi) * Lambda`.
pub fn recover_baselines(lambda: &Vector, phi: &Matrix) -> Result<RecoveredBaselines, ModelError> {
    if phi.ncols() != lambda.len() || !phi.is_square() {
        return Err(ModelError::DimensionMismatch { expected: phi.ncols(), found: lambda.len() });
    }
    let values = lambda - phi * lambda;
    let negative = values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v < 0.0)
        .map(|(i, _)| i)
        .collect();
    Ok(RecoveredBaselines { values, negative })
}

/// Closed-form `R` of the symmetric two-component model with self branching
/// `phi_s` and cross branching `phi_c`.
pub fn toy_model_r(phi_s: f64, phi_c: f64) -> Result<Matrix, ModelError> {
    let denom = (1.0 - phi_s).powi(2) - phi_c * phi_c;
    if denom == 0.0 {
        return Err(ModelError::DegenerateDenominator);
    }
    let d = (1.0 - phi_s) / denom;
    let o = phi_c / denom;
    Ok(Matrix::from_row_slice(2, 2, &[d, o, o, d]))
}

/// Asymptotic squared volatility of the symmetric up/down toy model with
/// unit jumps and baseline `mu` on each side.
pub fn toy_model_sigma2(mu: f64, phi_s: f64, phi_c: f64) -> Result<f64, ModelError> {
    if phi_s + phi_c >= 1.0 {
        return Err(ModelError::Unstable { spectral_radius: phi_s + phi_c });
    }
    Ok(2.0 * mu / ((1.0 - phi_s - phi_c) * (1.0 - phi_s + phi_c).powi(2)))
}

/// Piecewise-constant baseline: `values[component][k]` applies on
/// `[edges[k], edges[k+1])`, times in seconds from session open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseBaseline {
    edges: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl PiecewiseBaseline {
    pub fn new(edges: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        if edges.len() < 2 {
            return Err(ModelError::Invalid("baseline needs at least two edges".into()));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ModelError::Invalid("baseline edges must be finite and strictly increasing".into()));
        }
        let k = edges.len() - 1;
        for (c, row) in values.iter().enumerate() {
            if row.len() != k {
                return Err(ModelError::DimensionMismatch { expected: k, found: row.len() });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Invalid(format!("non-finite baseline for component {c}")));
            }
        }
        Ok(Self { edges, values })
    }

    /// One bin over `[0, horizon)` per component.
    pub fn constant(rates: &[f64], horizon: f64) -> Result<Self, ModelError> {
        Self::new(vec![0.0, horizon], rates.iter().map(|r| vec![*r]).collect())
    }

    /// `bins` equal-width edges over `[0, length]`.
    pub fn equal_edges(bins: usize, length: f64) -> Vec<f64> {
        (0..=bins).map(|k| length * k as f64 / bins as f64).collect()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn n_components(&self) -> usize {
        self.values.len()
    }

    pub fn start(&self) -> f64 {
        self.edges[0]
    }

    pub fn end(&self) -> f64 {
        *self.edges.last().unwrap()
    }

    /// Bin containing `t`, or `None` outside `[start, end)`.
    pub fn bin_index(&self, t: f64) -> Option<usize> {
        if t < self.start() || t >= self.end() {
            return None;
        }
        Some(self.edges.partition_point(|e| *e <= t) - 1)
    }

    pub fn value(&self, component: usize, bin: usize) -> f64 {
        self.values[component][bin]
    }

    /// Duration-weighted mean rate of one component.
    pub fn time_average(&self, component: usize) -> f64 {
        let total = self.end() - self.start();
        self.values[component]
            .iter()
            .zip(self.edges.windows(2))
            .map(|(v, w)| v * (w[1] - w[0]))
            .sum::<f64>()
            / total
    }

    pub fn time_averages(&self) -> Vector {
        Vector::from_iterator(self.n_components(), (0..self.n_components()).map(|c| self.time_average(c)))
    }
}

/// Labelled multivariate Hawkes model with exponential-dictionary kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct HawkesModel {
    components: Vec<Component>,
    kernels: KernelMatrix,
    baseline: PiecewiseBaseline,
    jumps: Vec<f64>,
}

impl HawkesModel {
    pub fn new(
        components: Vec<Component>,
        kernels: KernelMatrix,
        baseline: PiecewiseBaseline,
        jumps: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let n = components.len();
        for found in [kernels.dim(), baseline.n_components(), jumps.len()] {
            if found != n {
                return Err(ModelError::DimensionMismatch { expected: n, found });
            }
        }
        for (c, d) in components.iter().zip(&jumps) {
            if !c.kind.delta_consistent(*d) {
                return Err(ModelError::Invalid(format!("jump {d} inconsistent with component {c}")));
            }
        }
        Ok(Self { components, kernels, baseline, jumps })
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn kernels(&self) -> &KernelMatrix {
        &self.kernels
    }

    pub fn baseline(&self) -> &PiecewiseBaseline {
        &self.baseline
    }

    pub fn jumps(&self) -> &[f64] {
        &self.jumps
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn basis(&self) -> &BasisDictionary {
        self.kernels.basis()
    }

    pub fn phi(&self) -> Matrix {
        integrate_kernels(&self.kernels)
    }

    pub fn jump_vector(&self) -> Vector {
        Vector::from_column_slice(&self.jumps)
    }

    /// Branching summary using the time-averaged baselines.
    pub fn summarize(&self) -> Result<BranchingSummary, ModelError> {
        BranchingSummary::from_phi(self.phi(), &self.baseline.time_averages())
    }
}

/// Integrated branching quantities of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchingSummary {
    pub phi: Matrix,
    pub r: Matrix,
    pub lambda: Vector,
    pub rho_spec: f64,
}

impl BranchingSummary {
    pub fn from_phi(phi: Matrix, mu_bar: &Vector) -> Result<Self, ModelError> {
        let rho_spec = spectral_radius(&phi)?;
        let r = compute_r(&phi)?;
        let lambda = mean_intensities(&r, mu_bar)?;
        Ok(Self { phi, r, lambda, rho_spec })
    }

    pub fn dim(&self) -> usize {
        self.phi.nrows()
    }
}

/// On-disk model schema (model files and `truth.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(default = "model_schema_version")]
    pub schema_version: u32,
    pub components: Vec<Component>,
    pub decays: Vec<f64>,
    /// `[target][source][l]`
    pub coefficients: Vec<Vec<Vec<f64>>>,
    pub baseline: PiecewiseBaseline,
    pub jumps: Vec<f64>,
}

pub const MODEL_SCHEMA_VERSION: u32 = 1;

fn model_schema_version() -> u32 {
    MODEL_SCHEMA_VERSION
}

impl TryFrom<ModelFile> for HawkesModel {
    type Error = ModelError;

    fn try_from(f: ModelFile) -> Result<Self, Self::Error> {
        if f.schema_version != MODEL_SCHEMA_VERSION {
            return Err(ModelError::Invalid(format!("unsupported model schema version {}", f.schema_version)));
        }
        let basis = BasisDictionary::new(f.decays)?;
        let kernels = KernelMatrix::from_nested(basis, &f.coefficients)?;
        let baseline = PiecewiseBaseline::new(f.baseline.edges, f.baseline.values)?;
        HawkesModel::new(f.components, kernels, baseline, f.jumps)
    }
}

impl From<HawkesModel> for ModelFile {
    fn from(m: HawkesModel) -> Self {
        ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            decays: m.kernels.basis().decays().to_vec(),
            coefficients: m.kernels.to_nested(),
            components: m.components,
            baseline: m.baseline,
            jumps: m.jumps,
        }
    }
}

/// Symmetric up/down model of one agent with a single exponential kernel:
/// `Phi = [[phi_s, phi_c], [phi_c, phi_s]]`, baseline `mu` on both sides,
/// jumps `+1` / `-1` half-tick.
pub fn toy_model(mu: f64, phi_s: f64, phi_c: f64, decay: f64, horizon: f64) -> Result<HawkesModel, ModelError> {
    use crate::types::{AgentId, EventType};
    let basis = BasisDictionary::new(vec![decay])?;
    let kernels = KernelMatrix::from_nested(
        basis,
        &[vec![vec![phi_s], vec![phi_c]], vec![vec![phi_c], vec![phi_s]]],
    )?;
    let components = vec![
        Component::new(AgentId(0), EventType::PriceUp),
        Component::new(AgentId(0), EventType::PriceDown),
    ];
    HawkesModel::new(
        components,
        kernels,
        PiecewiseBaseline::constant(&[mu, mu], horizon)?,
        vec![1.0, -1.0],
    )
}
