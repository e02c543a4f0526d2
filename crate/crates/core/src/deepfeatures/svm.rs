//! Soft-margin kernel SVM trained with an SMO dual solver.
//!
//! The solver follows the LIBSVM formulation: minimize
//! `0.5 a'Qa - e'a` subject to `y'a = 0` and `0 <= a_i <= C`, picking the
//! working pair by maximal violation for `i` and the second-order gain for `j`.

use serde::{Deserialize, Serialize};

use super::{FeatureError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Poly,
    Rbf,
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelKind::Linear => "linear",
            KernelKind::Poly => "poly",
            KernelKind::Rbf => "rbf",
        })
    }
}

impl std::str::FromStr for KernelKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            "poly" => Ok(Self::Poly),
            "rbf" => Ok(Self::Rbf),
            other => Err(format!("unknown kernel `{other}` (linear|poly|rbf)")),
        }
    }
}

fn default_degree() -> u32 {
    3
}
fn default_coef0() -> f64 {
    1.0
}
fn default_c() -> f64 {
    1.0
}
fn default_tolerance() -> f64 {
    1e-3
}
fn default_max_iter() -> usize {
    100_000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    #[serde(default = "default_degree")]
    pub degree: u32,
    /// `None` resolves at fit time to `1 / (n_features * variance)` of the
    /// standardized training matrix.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_coef0")]
    pub coef0: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

impl KernelSpec {
    pub fn new(kind: KernelKind) -> Self {
        Self {
            kind,
            degree: default_degree(),
            gamma: None,
            coef0: default_coef0(),
            c: default_c(),
            tolerance: default_tolerance(),
            max_iter: default_max_iter(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FeatureError::Config(m));
        if !(self.c > 0.0) || !self.c.is_finite() {
            return bad(format!("C must be positive, got {}", self.c));
        }
        if self.degree < 1 {
            return bad("degree must be at least 1".into());
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0) || !g.is_finite() {
                return bad(format!("gamma must be positive, got {g}"));
            }
        }
        if !(self.tolerance > 0.0) || self.max_iter == 0 {
            return bad("tolerance and max_iter must be positive".into());
        }
        Ok(())
    }

    fn gamma(&self) -> f64 {
        self.gamma.expect("gamma resolved before use")
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.kind {
            KernelKind::Linear => dot(a, b),
            KernelKind::Poly => (self.gamma() * dot(a, b) + self.coef0).powi(self.degree as i32),
            KernelKind::Rbf => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-self.gamma() * d2).exp()
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-column affine standardization fitted on training rows. Constant
/// columns keep scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SVMModel {
    pub support_vectors: Vec<Vec<f64>>,
    /// `alpha_i * y_i` for each support vector.
    pub dual_coef: Vec<f64>,
    pub bias: f64,
    /// Kernel with `gamma` resolved.
    pub kernel: KernelSpec,
    pub scaler: Standardizer,
    pub n_features: usize,
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
}

impl SVMModel {
    /// Decision value on an already standardized row.
    pub fn decision_standardized(&self, x: &[f64]) -> f64 {
        self.support_vectors
            .iter()
            .zip(&self.dual_coef)
            .map(|(sv, c)| c * self.kernel.eval(sv, x))
            .sum::<f64>()
            + self.bias
    }
}

/// Fits a soft-margin SVM on `rows` (raw features) with labels `+1` for
/// `true`. Features are standardized first. The solver is deterministic;
/// `seed` is recorded with the model.
pub fn train_svm(
    rows: &[Vec<f64>],
    labels: &[bool],
    kernel: &KernelSpec,
    seed: u64,
) -> Result<SVMModel> {
    kernel.validate()?;
    if rows.len() != labels.len() {
        return Err(FeatureError::LengthMismatch(rows.len(), labels.len()));
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(FeatureError::SingleClass);
    }
    let d = rows[0].len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(FeatureError::Dimension {
                expected: d,
                got: r.len(),
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite { row: i });
        }
    }
    let scaler = Standardizer::fit(rows);
    let x: Vec<Vec<f64>> = rows.iter().map(|r| scaler.apply(r)).collect();
    let mut kernel = *kernel;
    if kernel.gamma.is_none() {
        let n = (x.len() * d) as f64;
        let mean = x.iter().flatten().sum::<f64>() / n;
        let var = x.iter().flatten().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        kernel.gamma = Some(if var > 1e-12 {
            1.0 / (d as f64 * var)
        } else {
            1.0 / d as f64
        });
    }
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let sol = smo(&x, &y, &kernel);
    let mut support_vectors = Vec::new();
    let mut dual_coef = Vec::new();
    for (i, &a) in sol.alpha.iter().enumerate() {
        if a > 0.0 {
            support_vectors.push(x[i].clone());
            dual_coef.push(a * y[i]);
        }
    }
    Ok(SVMModel {
        support_vectors,
        dual_coef,
        bias: -sol.rho,
        kernel,
        scaler,
        n_features: d,
        iterations: sol.iterations,
        converged: sol.converged,
        seed,
    })
}

/// Signed decision values, larger for the positive class.
pub fn svm_score(model: &SVMModel, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    rows.iter()
        .map(|r| {
            if r.len() != model.n_features {
                return Err(FeatureError::Dimension {
                    expected: model.n_features,
                    got: r.len(),
                });
            }
            Ok(model.decision_standardized(&model.scaler.apply(r)))
        })
        .collect()
}

struct Solution {
    alpha: Vec<f64>,
    rho: f64,
    iterations: usize,
    converged: bool,
}

/// Lazily computed rows of `Q_ij = y_i y_j K(x_i, x_j)`.
struct QMatrix<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    kernel: &'a KernelSpec,
    rows: Vec<Option<Vec<f64>>>,
    diag: Vec<f64>,
}

impl<'a> QMatrix<'a> {
    fn new(x: &'a [Vec<f64>], y: &'a [f64], kernel: &'a KernelSpec) -> Self {
        let diag = x.iter().map(|xi| kernel.eval(xi, xi)).collect();
        Self {
            x,
            y,
            kernel,
            rows: vec![None; x.len()],
            diag,
        }
    }

    fn row(&mut self, i: usize) -> &[f64] {
        if self.rows[i].is_none() {
            let (xi, yi) = (&self.x[i], self.y[i]);
            self.rows[i] = Some(
                self.x
                    .iter()
                    .zip(self.y)
                    .map(|(xj, yj)| yi * yj * self.kernel.eval(xi, xj))
                    .collect(),
            );
        }
        self.rows[i].as_deref().unwrap()
    }
}

const TAU: f64 = 1e-12;

fn smo(x: &[Vec<f64>], y: &[f64], kernel: &KernelSpec) -> Solution {
    let n = x.len();
    let c = kernel.c;
    let eps = kernel.tolerance;
    let mut q = QMatrix::new(x, y, kernel);
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let in_up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let in_low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < kernel.max_iter {
        // i: maximal -y_t G_t over I_up.
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if in_up(alpha[t], y[t]) && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i = t;
            }
        }
        // j: second-order gain over I_low among violating candidates.
        let mut gmin = f64::INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        if i != usize::MAX {
            let qi_diag = q.diag[i];
            let qi = q.row(i).to_vec();
            for t in 0..n {
                if !in_low(alpha[t], y[t]) {
                    continue;
                }
                let v = -y[t] * grad[t];
                gmin = gmin.min(v);
                let b = gmax - v;
                if b > 0.0 {
                    let a = qi_diag + q.diag[t] - 2.0 * y[i] * y[t] * qi[t];
                    let a = if a > 0.0 { a } else { TAU };
                    let gain = -(b * b) / a;
                    if gain <= best {
                        best = gain;
                        j = t;
                    }
                }
            }
        } else {
            for t in 0..n {
                if in_low(alpha[t], y[t]) {
                    gmin = gmin.min(-y[t] * grad[t]);
                }
            }
        }
        if gmax - gmin < eps || j == usize::MAX {
            converged = true;
            break;
        }
        iterations += 1;
        let qi = q.row(i).to_vec();
        let qj = q.row(j).to_vec();
        let (old_ai, old_aj) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = q.diag[i] + q.diag[j] + 2.0 * qi[j];
            let quad = if quad > 0.0 { quad } else { TAU };
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = q.diag[i] + q.diag[j] - 2.0 * qi[j];
            let quad = if quad > 0.0 { quad } else { TAU };
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (dai, daj) = (alpha[i] - old_ai, alpha[j] - old_aj);
        for t in 0..n {
            grad[t] += qi[t] * dai + qj[t] * daj;
        }
    }
    // rho: mean of y G over free vectors, else the midpoint of the bounds.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum, mut free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum += yg;
        }
    }
    let rho = if free > 0 {
        sum / free as f64
    } else {
        (ub + lb) / 2.0
    };
    Solution {
        alpha,
        rho,
        iterations,
        converged,
    }
}
