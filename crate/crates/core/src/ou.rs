//! The phylogenetic Ornstein-Uhlenbeck covariance function and the covariance
//! matrices it induces over sets of tree nodes.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::{DistanceMatrix, NodeId, PhyloTree};

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("distance must be non-negative, got {0}")]
    NegativeDistance(f64),
    #[error("the same node cannot sit at distance {0} from itself")]
    SelfDistance(f64),
    #[error("invalid hyperparameters: {0}")]
    InvalidParams(String),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
}

/// Hyperparameters of one OU component.
///
/// `lambda` is `None` when `sigma_f == 0`: with no inherited variation the
/// length-scale has no effect and is recorded as inapplicable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuParams {
    pub sigma_f: f64,
    pub lambda: Option<f64>,
    pub sigma_n: f64,
}

impl OuParams {
    pub fn new(sigma_f: f64, lambda: f64, sigma_n: f64) -> Result<Self, KernelError> {
        let p = OuParams {
            sigma_f,
            lambda: Some(lambda),
            sigma_n,
        };
        p.validate()?;
        Ok(p)
    }

    /// A component with specific variation only.
    pub fn specific_only(sigma_n: f64) -> Result<Self, KernelError> {
        let p = OuParams {
            sigma_f: 0.0,
            lambda: None,
            sigma_n,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.sigma_f) || !finite_nonneg(self.sigma_n) {
            return Err(KernelError::InvalidParams(format!(
                "sigma_f = {}, sigma_n = {} must be non-negative",
                self.sigma_f, self.sigma_n
            )));
        }
        match self.lambda {
            Some(l) if !(l > 0.0 && l.is_finite()) => Err(KernelError::InvalidParams(format!(
                "lambda = {l} must be positive"
            ))),
            None if self.sigma_f > 0.0 => Err(KernelError::InvalidParams(
                "lambda is required when sigma_f > 0".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Whether the length-scale influences the kernel at all.
    pub fn lambda_applicable(&self) -> bool {
        self.sigma_f > 0.0 && self.lambda.is_some()
    }

    /// `sigma_f^2 + sigma_n^2`.
    pub fn prior_variance(&self) -> f64 {
        self.sigma_f * self.sigma_f + self.sigma_n * self.sigma_n
    }

    /// Inherited part of the covariance at a given distance.
    #[inline]
    pub(crate) fn inherited(&self, distance: f64) -> f64 {
        match self.lambda {
            Some(l) if self.sigma_f > 0.0 => self.sigma_f * self.sigma_f * (-distance / l).exp(),
            _ => 0.0,
        }
    }
}

/// `sigma_f^2 exp(-d / lambda) + sigma_n^2 [same_node]`.
///
/// The specific term fires only for node identity; distinct nodes at distance
/// zero do not share specific variation.
pub fn ou_cov(params: &OuParams, distance: f64, same_node: bool) -> Result<f64, KernelError> {
    if !(distance >= 0.0) {
        return Err(KernelError::NegativeDistance(distance));
    }
    if same_node && distance != 0.0 {
        return Err(KernelError::SelfDistance(distance));
    }
    let delta = if same_node {
        params.sigma_n * params.sigma_n
    } else {
        0.0
    };
    Ok(params.inherited(distance) + delta)
}

/// Dense covariance over an ordered list of nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceMatrix {
    pub node_order: Vec<NodeId>,
    pub entries: DMatrix<f64>,
}

impl CovarianceMatrix {
    pub fn to_csv(&self, tree: &PhyloTree) -> String {
        let names: Vec<String> = self.node_order.iter().map(|&i| tree.name(i)).collect();
        let mut out = String::from("node_id");
        for name in &names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, name) in names.iter().enumerate() {
            out.push_str(name);
            for j in 0..names.len() {
                let _ = write!(out, ",{}", self.entries[(i, j)]);
            }
            out.push('\n');
        }
        out
    }

    /// Reads the layout written by [`CovarianceMatrix::to_csv`].
    pub fn from_csv(text: &str, tree: &PhyloTree) -> Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or("empty covariance file")?;
        let node_order = header
            .split(',')
            .skip(1)
            .map(|name| {
                tree.find_by_name(name.trim())
                    .ok_or_else(|| format!("unknown node '{name}'"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let n = node_order.len();
        let mut entries = DMatrix::zeros(n, n);
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            if i >= n {
                return Err("too many rows".into());
            }
            let values: Vec<&str> = line.split(',').skip(1).collect();
            if values.len() != n {
                return Err(format!("row {i} has {} values, expected {n}", values.len()));
            }
            for (j, v) in values.iter().enumerate() {
                entries[(i, j)] = v
                    .trim()
                    .parse()
                    .map_err(|_| format!("bad number '{v}' in row {i}"))?;
            }
            rows += 1;
        }
        if rows != n {
            return Err(format!("expected {n} rows, found {rows}"));
        }
        Ok(CovarianceMatrix {
            node_order,
            entries,
        })
    }
}

/// Applies [`ou_cov`] entrywise. Diagonal entries count as the same node
/// only when `include_self_delta` is set.
pub fn build_cov_matrix(
    params: &OuParams,
    distances: &DistanceMatrix,
    include_self_delta: bool,
) -> Result<CovarianceMatrix, KernelError> {
    params.validate()?;
    let n = distances.len();
    let mut entries = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let same = include_self_delta && distances.node_order[i] == distances.node_order[j];
            let v = ou_cov(params, distances.get(i, j), same)?;
            entries[(i, j)] = v;
            entries[(j, i)] = v;
        }
    }
    Ok(CovarianceMatrix {
        node_order: distances.node_order.clone(),
        entries,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsdReport {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub is_psd: bool,
}

/// Minimum eigenvalue check; `is_psd` when it exceeds `-tolerance`.
pub fn validate_psd(matrix: &DMatrix<f64>, tolerance: f64) -> Result<PsdReport, KernelError> {
    if !matrix.is_square() {
        return Err(KernelError::NotSquare(matrix.nrows(), matrix.ncols()));
    }
    let asym = (matrix - matrix.transpose()).amax();
    if asym > 1e-12 {
        return Err(KernelError::Asymmetric(asym));
    }
    if matrix.nrows() == 0 {
        return Ok(PsdReport {
            min_eigenvalue: 0.0,
            max_eigenvalue: 0.0,
            is_psd: true,
        });
    }
    let eig = SymmetricEigen::new(matrix.clone());
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    Ok(PsdReport {
        min_eigenvalue: min,
        max_eigenvalue: max,
        is_psd: min > -tolerance,
    })
}
