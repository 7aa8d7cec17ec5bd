//! RNN averaging and the LDA stacker over base-model probabilities.

use std::path::Path;

use nalgebra::{Cholesky, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::class::{Class, ClassProbabilities, NUM_CLASSES};
use crate::error::{Error, Result};

/// Stacking features: three probabilities from each base model.
pub const STACK_DIM: usize = 6;
pub const DEFAULT_SHRINK: f64 = 0.05;
const MIN_EIGENVALUE: f64 = 1e-12;

type Mat = SMatrix<f64, STACK_DIM, STACK_DIM>;
type Vec6 = SVector<f64, STACK_DIM>;

pub fn average_probs(ps: &[ClassProbabilities]) -> ClassProbabilities {
    if ps.is_empty() {
        return ClassProbabilities::uniform();
    }
    let mut out = [0.0; NUM_CLASSES];
    for p in ps {
        for (o, v) in out.iter_mut().zip(p.0) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= ps.len() as f64);
    ClassProbabilities(out)
}

/// Drops the noise-class entry of each model; it is implied by the other three.
pub fn stack_features(p_gbt: &ClassProbabilities, p_rnn: &ClassProbabilities) -> [f64; STACK_DIM] {
    let (g, r) = (p_gbt.0, p_rnn.0);
    [g[0], g[1], g[2], r[0], r[1], r[2]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    pub means: Vec<[f64; STACK_DIM]>,
    /// Regularized shared covariance, row-major.
    pub covariance: Vec<[f64; STACK_DIM]>,
    pub priors: [f64; NUM_CLASSES],
    pub shrink: f64,
    pub version: u32,
}

impl LdaModel {
    fn cov(&self) -> Mat {
        Mat::from_fn(|i, j| self.covariance[i][j])
    }

    /// Discriminant scores; classes with zero prior get `-inf`.
    pub fn scores(&self, z: &[f64; STACK_DIM]) -> Result<[f64; NUM_CLASSES]> {
        let chol = Cholesky::new(self.cov()).ok_or(Error::Regularization { shrink: self.shrink })?;
        let z = Vec6::from_column_slice(z);
        let mut s = [f64::NEG_INFINITY; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            if self.priors[c] <= 0.0 {
                continue;
            }
            let mu = Vec6::from_column_slice(&self.means[c]);
            let w = chol.solve(&mu);
            s[c] = z.dot(&w) - 0.5 * mu.dot(&w) + self.priors[c].ln();
        }
        Ok(s)
    }

    pub fn posterior(&self, z: &[f64; STACK_DIM]) -> Result<ClassProbabilities> {
        Ok(ClassProbabilities::softmax(&self.scores(z)?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: LdaModel = serde_json::from_str(s)?;
        if m.version != 1 || m.means.len() != NUM_CLASSES || m.covariance.len() != STACK_DIM {
            return Err(Error::Shape("unsupported stacker model".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Gaussian classifier with a shared, diagonally shrunk covariance.
pub fn fit_lda(z: &[[f64; STACK_DIM]], y: &[usize], shrink: f64) -> Result<LdaModel> {
    if z.len() != y.len() {
        return Err(Error::Shape(format!("{} rows but {} labels", z.len(), y.len())));
    }
    if z.len() < 10 {
        return Err(Error::DegenerateData("stacker needs at least 10 rows".into()));
    }
    if !(0.0..=1.0).contains(&shrink) {
        return Err(Error::InvalidArgument(format!("shrink {shrink} outside [0, 1]")));
    }
    if let Some(&c) = y.iter().find(|&&c| c >= NUM_CLASSES) {
        return Err(Error::InvalidArgument(format!("label {c} out of range")));
    }
    let n = z.len() as f64;
    let mut counts = [0usize; NUM_CLASSES];
    let mut means = vec![Vec6::zeros(); NUM_CLASSES];
    for (row, &c) in z.iter().zip(y) {
        counts[c] += 1;
        means[c] += Vec6::from_column_slice(row);
    }
    if counts.iter().filter(|&&k| k > 0).count() < 2 {
        return Err(Error::DegenerateData("stacker needs at least two classes".into()));
    }
    for c in 0..NUM_CLASSES {
        if counts[c] > 0 {
            means[c] /= counts[c] as f64;
        }
    }
    let mut sigma = Mat::zeros();
    for (row, &c) in z.iter().zip(y) {
        let d = Vec6::from_column_slice(row) - means[c];
        sigma += d * d.transpose();
    }
    sigma /= n;
    let reg = sigma * (1.0 - shrink) + Mat::from_diagonal(&sigma.diagonal()) * shrink;
    // Features are probabilities, so an absolute floor separates genuine
    // spread from rounding residue of constant columns.
    let pd = Cholesky::new(reg).is_some() && reg.symmetric_eigenvalues().min() > MIN_EIGENVALUE;
    if !pd {
        return Err(Error::Regularization { shrink });
    }
    let mut priors = [0.0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        priors[c] = counts[c] as f64 / n;
    }
    Ok(LdaModel {
        means: means.iter().map(|m| std::array::from_fn(|i| m[i])).collect(),
        covariance: (0..STACK_DIM).map(|i| std::array::from_fn(|j| reg[(i, j)])).collect(),
        priors,
        shrink,
        version: 1,
    })
}

/// Averages the RNNs, stacks with the boosted trees and applies the LDA.
pub fn predict_stacked(
    gbt: &ClassProbabilities,
    rnns: &[ClassProbabilities],
    lda: &LdaModel,
) -> Result<(ClassProbabilities, Class)> {
    let p = lda.posterior(&stack_features(gbt, &average_probs(rnns)))?;
    Ok((p, p.argmax()))
}
