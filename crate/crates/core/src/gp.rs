//! Univariate phylogenetic GP regression per weight component, and assembly of
//! the per-component posteriors into posterior bands for whole curves.
//!
//! A query is always a new node identity: its covariance with every tip omits
//! the specific term, including when the query sits exactly on a tip. The
//! prediction at a tip is therefore for an independent organism at that point
//! of the tree, and the specific variance is the same at every query.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{cholesky_with_jitter, Factor, FactorizationError};
use crate::ou::{build_cov_matrix, KernelError, OuParams};
use crate::separation::IcaResult;
use crate::tree::{patristic_distances, DistanceMatrix, NodeId, PhyloTree, TreeError};

#[derive(Debug, Error)]
pub enum GpError {
    #[error(transparent)]
    Factorization(#[from] FactorizationError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("dimension mismatch: {0}")]
    Mismatch(String),
    #[error("total variance {total} is below the specific variance {specific}")]
    VarianceBelowSpecific { total: f64, specific: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorWeight {
    pub node: NodeId,
    pub component: usize,
    pub mean: f64,
    pub total_variance: f64,
    pub inherited_variance: f64,
    pub specific_variance: f64,
}

/// Conditioned GP for one component, ready to answer queries anywhere on the
/// tree.
pub struct GpRegression {
    params: OuParams,
    component: usize,
    tips: Vec<NodeId>,
    distances: DistanceMatrix,
    factor: Factor,
    alpha: DVector<f64>,
}

impl GpRegression {
    pub fn fit(
        tree: &PhyloTree,
        tips: &[NodeId],
        weights: &DVector<f64>,
        params: &OuParams,
        component: usize,
    ) -> Result<Self, GpError> {
        Self::fit_with_distances(
            patristic_distances(tree, None)?,
            tips,
            weights,
            params,
            component,
        )
    }

    /// `distances` must cover every node of the tree in id order.
    pub fn fit_with_distances(
        distances: DistanceMatrix,
        tips: &[NodeId],
        weights: &DVector<f64>,
        params: &OuParams,
        component: usize,
    ) -> Result<Self, GpError> {
        params.validate()?;
        if tips.len() != weights.len() {
            return Err(GpError::Mismatch(format!(
                "{} tips but {} weights",
                tips.len(),
                weights.len()
            )));
        }
        if tips.is_empty() {
            return Err(GpError::Mismatch("no training tips".into()));
        }
        if let Some(t) = tips.iter().find(|t| t.0 >= distances.len()) {
            return Err(TreeError::UnknownNode(*t).into());
        }
        let tip_d = sub_distances(&distances, tips);
        let k = build_cov_matrix(params, &tip_d, true)?;
        let factor = cholesky_with_jitter(&k.entries)?;
        let alpha = factor.solve(weights);
        Ok(GpRegression {
            params: *params,
            component,
            tips: tips.to_vec(),
            distances,
            factor,
            alpha,
        })
    }

    pub fn predict(&self, node: NodeId) -> Result<PosteriorWeight, GpError> {
        if node.0 >= self.distances.len() {
            return Err(TreeError::UnknownNode(node).into());
        }
        let cross = DVector::from_iterator(
            self.tips.len(),
            self.tips
                .iter()
                .map(|t| self.params.inherited(self.distances.get(node.0, t.0))),
        );
        let mean = cross.dot(&self.alpha);
        let v = self.factor.solve_lower(&cross);
        let total = (self.params.prior_variance() - v.norm_squared()).max(0.0);
        let raw = PosteriorWeight {
            node,
            component: self.component,
            mean,
            total_variance: total,
            inherited_variance: 0.0,
            specific_variance: 0.0,
        };
        decompose_variance(&raw, &self.params)
    }
}

fn sub_distances(all: &DistanceMatrix, nodes: &[NodeId]) -> DistanceMatrix {
    // all covers every node in id order, so re-indexing is a lookup
    let n = nodes.len();
    let mut entries = vec![0.0; n * n];
    for (i, a) in nodes.iter().enumerate() {
        for (j, b) in nodes.iter().enumerate() {
            entries[i * n + j] = all.get(a.0, b.0);
        }
    }
    DistanceMatrix::from_parts(nodes.to_vec(), entries)
}

/// Posterior of one component's weight at each query node given the tip
/// weights (`tip_weights[j]` belongs to `tips[j]`).
pub fn gp_posterior(
    tree: &PhyloTree,
    tips: &[NodeId],
    tip_weights: &DVector<f64>,
    params: &OuParams,
    queries: &[NodeId],
) -> Result<Vec<PosteriorWeight>, GpError> {
    let gp = GpRegression::fit(tree, tips, tip_weights, params, 0)?;
    queries.iter().map(|&q| gp.predict(q)).collect()
}

/// Splits a total posterior variance into the specific part (`sigma_n^2`,
/// the same everywhere) and the inherited remainder.
pub fn decompose_variance(
    post: &PosteriorWeight,
    params: &OuParams,
) -> Result<PosteriorWeight, GpError> {
    let specific = params.sigma_n * params.sigma_n;
    let tolerance = 1e-12 * params.prior_variance().max(1.0);
    if post.total_variance < specific - tolerance {
        return Err(GpError::VarianceBelowSpecific {
            total: post.total_variance,
            specific,
        });
    }
    let inherited = (post.total_variance - specific).max(0.0);
    Ok(PosteriorWeight {
        total_variance: inherited + specific,
        inherited_variance: inherited,
        specific_variance: specific,
        ..*post
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FunctionalPosterior {
    pub node: NodeId,
    pub mean_curve: DVector<f64>,
    pub inherited_sd_curve: DVector<f64>,
    pub total_sd_curve: DVector<f64>,
}

/// Maps independent per-component posteriors at one node onto curves:
/// mean `mu(x) + sum_i m_i phi_i(x)`, variance `sum_i v_i phi_i(x)^2`.
pub fn functional_posterior(
    per_component: &[PosteriorWeight],
    basis: &DMatrix<f64>,
    mean_curve: &DVector<f64>,
) -> Result<FunctionalPosterior, GpError> {
    let k = basis.nrows();
    if per_component.len() != k {
        return Err(GpError::Mismatch(format!(
            "{} component posteriors for {} basis curves",
            per_component.len(),
            k
        )));
    }
    if mean_curve.len() != basis.ncols() {
        return Err(GpError::Mismatch(format!(
            "mean curve has {} points, basis has {}",
            mean_curve.len(),
            basis.ncols()
        )));
    }
    let node = per_component.first().map(|p| p.node).unwrap_or(NodeId(0));
    let m = basis.ncols();
    let mut mean = mean_curve.clone();
    let mut total = DVector::zeros(m);
    let mut inherited = DVector::zeros(m);
    for (i, post) in per_component.iter().enumerate() {
        for x in 0..m {
            let phi = basis[(i, x)];
            mean[x] += post.mean * phi;
            total[x] += post.total_variance * phi * phi;
            inherited[x] += post.inherited_variance * phi * phi;
        }
    }
    Ok(FunctionalPosterior {
        node,
        mean_curve: mean,
        inherited_sd_curve: inherited.map(f64::sqrt),
        total_sd_curve: total.map(f64::sqrt),
    })
}

/// Everything the regression needs from the decomposition step.
#[derive(Clone, Debug)]
pub struct TipData {
    pub tips: Vec<NodeId>,
    /// `tips.len() x k`.
    pub weights: DMatrix<f64>,
    /// `k x m`.
    pub basis: DMatrix<f64>,
    pub mean_curve: DVector<f64>,
}

impl TipData {
    pub fn from_ica(tips: Vec<NodeId>, ica: &IcaResult) -> Self {
        TipData {
            tips,
            weights: ica.tip_weights.clone(),
            basis: ica.estimated_basis.clone(),
            mean_curve: ica.mean_curve.clone(),
        }
    }

    /// Weights obtained by least-squares projection of the (uncentred) tip
    /// curves onto a known basis; the mean curve is zero.
    pub fn from_known_basis(
        tips: Vec<NodeId>,
        tip_curves: &DMatrix<f64>,
        basis: &DMatrix<f64>,
    ) -> Result<Self, GpError> {
        if tip_curves.ncols() != basis.ncols() || tip_curves.nrows() != tips.len() {
            return Err(GpError::Mismatch("tip curves do not match basis or tips".into()));
        }
        let gram = basis * basis.transpose();
        let chol = cholesky_with_jitter(&gram)?;
        let rhs = basis * tip_curves.transpose();
        let mut weights_t = DMatrix::zeros(basis.nrows(), tips.len());
        for j in 0..tips.len() {
            weights_t.set_column(j, &chol.solve(&rhs.column(j).into_owned()));
        }
        Ok(TipData {
            tips,
            weights: weights_t.transpose(),
            basis: basis.clone(),
            mean_curve: DVector::zeros(basis.ncols()),
        })
    }

    pub fn k(&self) -> usize {
        self.basis.nrows()
    }
}

/// Per-component posteriors at every node (`result[i][node]`).
pub fn posterior_weights_all(
    tree: &PhyloTree,
    data: &TipData,
    params: &[OuParams],
) -> Result<Vec<Vec<PosteriorWeight>>, GpError> {
    if params.len() != data.k() {
        return Err(GpError::Mismatch(format!(
            "{} parameter sets for {} components",
            params.len(),
            data.k()
        )));
    }
    if data.weights.nrows() != data.tips.len() || data.weights.ncols() != data.k() {
        return Err(GpError::Mismatch("weight matrix shape".into()));
    }
    let distances = patristic_distances(tree, None)?;
    let queries: Vec<NodeId> = tree.ids().collect();
    params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let y = data.weights.column(i).into_owned();
            let gp = GpRegression::fit_with_distances(distances.clone(), &data.tips, &y, p, i)?;
            queries.iter().map(|&q| gp.predict(q)).collect()
        })
        .collect()
}

/// Functional posteriors at every node of the tree, in node-id order.
pub fn reconstruct_all(
    tree: &PhyloTree,
    data: &TipData,
    params: &[OuParams],
) -> Result<Vec<FunctionalPosterior>, GpError> {
    let per_component = posterior_weights_all(tree, data, params)?;
    tree.ids()
        .map(|id| {
            let at_node: Vec<PosteriorWeight> =
                per_component.iter().map(|c| c[id.0]).collect();
            functional_posterior(&at_node, &data.basis, &data.mean_curve)
        })
        .collect()
}

/// CSV with columns `node_id,grid_index,mean,inherited_sd,total_sd`.
pub fn posteriors_csv(tree: &PhyloTree, posteriors: &[FunctionalPosterior]) -> String {
    let mut out = String::from("node_id,grid_index,mean,inherited_sd,total_sd\n");
    for p in posteriors {
        let name = tree.name(p.node);
        for x in 0..p.mean_curve.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                name, x, p.mean_curve[x], p.inherited_sd_curve[x], p.total_sd_curve[x]
            );
        }
    }
    out
}

/// Fractions of (node, grid point) pairs whose true value lies within one
/// and two total standard deviations of the posterior mean.
pub fn coverage(posteriors: &[&FunctionalPosterior], truth: &[DVector<f64>]) -> (f64, f64) {
    let (mut one, mut two, mut count) = (0usize, 0usize, 0usize);
    for (p, t) in posteriors.iter().zip(truth) {
        for x in 0..t.len() {
            let z = (t[x] - p.mean_curve[x]).abs();
            let sd = p.total_sd_curve[x];
            if z <= sd {
                one += 1;
            }
            if z <= 2.0 * sd {
                two += 1;
            }
            count += 1;
        }
    }
    if count == 0 {
        return (0.0, 0.0);
    }
    (one as f64 / count as f64, two as f64 / count as f64)
}
