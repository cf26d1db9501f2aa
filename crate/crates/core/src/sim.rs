//! Synthetic function-valued traits: a basis, OU weights sampled jointly over
//! every node of a tree, and curves assembled as `w_t^T phi`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{sampling_factor, FactorizationError};
use crate::ou::{build_cov_matrix, KernelError, OuParams};
use crate::tree::{patristic_distances, random_tree, NodeId, PhyloTree, TreeError};

/// Stream used for tree generation under a top-level seed.
pub const TREE_STREAM: u64 = 1;
/// Component `i` draws its weights from stream `WEIGHT_STREAM + i`.
pub const WEIGHT_STREAM: u64 = 16;

/// Random generator for a named sub-stream of a top-level seed.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("basis grid needs at least 16 points, got {0}")]
    GridTooSmall(usize),
    #[error("at least one component is required")]
    NoComponents,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("covariance for component {component} cannot be factorized: {source}")]
    NotPsd {
        component: usize,
        source: FactorizationError,
    },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("malformed file: {0}")]
    Format(String),
}

/// `k` discretised curves on a shared grid; rows are basis functions.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisSet {
    pub curves: DMatrix<f64>,
    pub grid: Vec<f64>,
}

impl BasisSet {
    pub fn new(curves: DMatrix<f64>, grid: Vec<f64>) -> Result<Self, SimError> {
        if curves.nrows() < 1 || curves.ncols() < 2 {
            return Err(SimError::Dimension(format!(
                "basis must be at least 1x2, got {}x{}",
                curves.nrows(),
                curves.ncols()
            )));
        }
        if grid.len() != curves.ncols() {
            return Err(SimError::Dimension(format!(
                "grid has {} points but curves have {}",
                grid.len(),
                curves.ncols()
            )));
        }
        if curves.iter().chain(grid.iter()).any(|v| !v.is_finite()) {
            return Err(SimError::Dimension("non-finite basis value".into()));
        }
        Ok(BasisSet { curves, grid })
    }

    pub fn k(&self) -> usize {
        self.curves.nrows()
    }

    pub fn m(&self) -> usize {
        self.curves.ncols()
    }

    /// Pairwise cosine similarities between rows.
    pub fn cosine_gram(&self) -> DMatrix<f64> {
        let g = &self.curves * self.curves.transpose();
        DMatrix::from_fn(self.k(), self.k(), |i, j| {
            g[(i, j)] / (g[(i, i)] * g[(j, j)]).sqrt()
        })
    }

    /// CSV: a `grid` header row followed by one row per curve.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("grid");
        for x in &self.grid {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
        for i in 0..self.k() {
            let _ = write!(out, "phi{}", i + 1);
            for j in 0..self.m() {
                let _ = write!(out, ",{}", self.curves[(i, j)]);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, SimError> {
        let mut rows = text.lines().filter(|l| !l.trim().is_empty());
        let header = rows
            .next()
            .ok_or_else(|| SimError::Format("empty basis file".into()))?;
        let grid = parse_numbers(header.split(',').skip(1))?;
        let mut values = Vec::new();
        let mut k = 0;
        for row in rows {
            let v = parse_numbers(row.split(',').skip(1))?;
            if v.len() != grid.len() {
                return Err(SimError::Format(format!(
                    "basis row {} has {} values, grid has {}",
                    k + 1,
                    v.len(),
                    grid.len()
                )));
            }
            values.extend(v);
            k += 1;
        }
        BasisSet::new(DMatrix::from_row_slice(k, grid.len(), &values), grid)
    }
}

pub(crate) fn parse_numbers<'a>(
    fields: impl Iterator<Item = &'a str>,
) -> Result<Vec<f64>, SimError> {
    fields
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|_| SimError::Format(format!("not a number: '{f}'")))
        })
        .collect()
}

/// Three smooth curves on a uniform grid over `[0, 1]`: two Gaussian bumps of
/// different centre and width, and a cubic trend. They overlap, so the rows
/// are far from orthogonal.
pub fn make_default_basis(m: usize) -> Result<BasisSet, SimError> {
    if m < 16 {
        return Err(SimError::GridTooSmall(m));
    }
    let grid: Vec<f64> = (0..m).map(|j| j as f64 / (m - 1) as f64).collect();
    let bump = |x: f64, c: f64, w: f64| (-0.5 * ((x - c) / w).powi(2)).exp();
    let curves = DMatrix::from_fn(3, m, |i, j| {
        let x = grid[j];
        match i {
            0 => bump(x, 0.3, 0.05),
            1 => bump(x, 0.55, 0.08),
            _ => x * x * (1.5 - x),
        }
    });
    BasisSet::new(curves, grid)
}

/// One weight vector per tree node, stored as a `nodes x k` matrix indexed by
/// node id.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightAssignment {
    pub values: DMatrix<f64>,
}

impl WeightAssignment {
    pub fn k(&self) -> usize {
        self.values.ncols()
    }

    pub fn node(&self, id: NodeId) -> Vec<f64> {
        self.values.row(id.0).iter().copied().collect()
    }

    /// Weights of component `i` at the given nodes.
    pub fn component_at(&self, i: usize, nodes: &[NodeId]) -> DVector<f64> {
        DVector::from_iterator(nodes.len(), nodes.iter().map(|n| self.values[(n.0, i)]))
    }

    pub fn to_csv(&self, tree: &PhyloTree) -> String {
        weights_csv(tree, &tree.ids().collect::<Vec<_>>(), &self.values)
    }
}

/// CSV with a `node_id` column and one column per component.
pub fn weights_csv(tree: &PhyloTree, nodes: &[NodeId], values: &DMatrix<f64>) -> String {
    let mut out = String::from("node_id");
    for i in 0..values.ncols() {
        let _ = write!(out, ",w{}", i + 1);
    }
    out.push('\n');
    for (r, &id) in nodes.iter().enumerate() {
        out.push_str(&tree.name(id));
        for i in 0..values.ncols() {
            let _ = write!(out, ",{}", values[(r, i)]);
        }
        out.push('\n');
    }
    out
}

/// Reads [`weights_csv`] output back into `(nodes, values)`.
pub fn read_weights_csv(
    text: &str,
    tree: &PhyloTree,
) -> Result<(Vec<NodeId>, DMatrix<f64>), SimError> {
    let mut rows = text.lines().filter(|l| !l.trim().is_empty());
    let header = rows
        .next()
        .ok_or_else(|| SimError::Format("empty weights file".into()))?;
    let k = header.split(',').count() - 1;
    let mut nodes = Vec::new();
    let mut values = Vec::new();
    for row in rows {
        let mut fields = row.split(',');
        let name = fields.next().unwrap_or("").trim();
        let id = tree
            .find_by_name(name)
            .ok_or_else(|| SimError::Format(format!("unknown node '{name}'")))?;
        let v = parse_numbers(fields)?;
        if v.len() != k {
            return Err(SimError::Format(format!("row for {name} has {} weights", v.len())));
        }
        nodes.push(id);
        values.extend(v);
    }
    Ok((nodes.clone(), DMatrix::from_row_slice(nodes.len(), k, &values)))
}

/// Joint zero-mean Gaussian sampler over every node of a tree, one factor
/// per component.
pub struct WeightSampler {
    factors: Vec<DMatrix<f64>>,
    n_nodes: usize,
}

impl WeightSampler {
    pub fn new(tree: &PhyloTree, params: &[OuParams]) -> Result<Self, SimError> {
        if params.is_empty() {
            return Err(SimError::NoComponents);
        }
        let distances = patristic_distances(tree, None)?;
        let factors = params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let cov = build_cov_matrix(p, &distances, true)?;
                sampling_factor(&cov.entries).map_err(|source| SimError::NotPsd {
                    component: i,
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(WeightSampler {
            factors,
            n_nodes: tree.len(),
        })
    }

    /// One joint draw of component `i` over all nodes.
    pub fn draw_component<R: rand::Rng + ?Sized>(&self, i: usize, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_iterator(
            self.n_nodes,
            (0..self.n_nodes).map(|_| StandardNormal.sample(&mut *rng)),
        );
        &self.factors[i] * z
    }

    /// Every component drawn from its own sub-stream of `seed`.
    pub fn draw(&self, seed: u64) -> WeightAssignment {
        let mut values = DMatrix::zeros(self.n_nodes, self.factors.len());
        for i in 0..self.factors.len() {
            let mut rng = substream(seed, WEIGHT_STREAM + i as u64);
            values.set_column(i, &self.draw_component(i, &mut rng));
        }
        WeightAssignment { values }
    }
}

pub fn sample_weights(
    tree: &PhyloTree,
    params: &[OuParams],
    seed: u64,
) -> Result<WeightAssignment, SimError> {
    Ok(WeightSampler::new(tree, params)?.draw(seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Split {
    Train,
    Validate,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "TRAIN",
            Split::Validate => "VALIDATE",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub params: Vec<OuParams>,
}

/// One curve per node, tips tagged for training and internal nodes for
/// validation. Rows of `curves` are indexed by `nodes`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraitDataset {
    pub nodes: Vec<NodeId>,
    pub split: Vec<Split>,
    pub curves: DMatrix<f64>,
    pub grid: Vec<f64>,
    pub provenance: Provenance,
}

impl TraitDataset {
    fn rows_with(&self, tag: Split) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&r| self.split[r] == tag).collect()
    }

    /// Training curves (`n_tips x m`) and their node ids.
    pub fn train(&self) -> (Vec<NodeId>, DMatrix<f64>) {
        self.subset(Split::Train)
    }

    pub fn validate(&self) -> (Vec<NodeId>, DMatrix<f64>) {
        self.subset(Split::Validate)
    }

    fn subset(&self, tag: Split) -> (Vec<NodeId>, DMatrix<f64>) {
        let rows = self.rows_with(tag);
        let ids = rows.iter().map(|&r| self.nodes[r]).collect();
        (ids, self.curves.select_rows(rows.iter()))
    }

    /// CSV: `node_id,tag,<grid values...>` header, then one row per node.
    pub fn to_csv(&self, tree: &PhyloTree) -> String {
        let mut out = String::from("node_id,tag");
        for x in &self.grid {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
        for (r, &id) in self.nodes.iter().enumerate() {
            let _ = write!(out, "{},{}", tree.name(id), self.split[r].as_str());
            for j in 0..self.curves.ncols() {
                let _ = write!(out, ",{}", self.curves[(r, j)]);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, tree: &PhyloTree) -> Result<Self, SimError> {
        let mut rows = text.lines().filter(|l| !l.trim().is_empty());
        let header = rows
            .next()
            .ok_or_else(|| SimError::Format("empty traits file".into()))?;
        let grid = parse_numbers(header.split(',').skip(2))?;
        let (mut nodes, mut split, mut values) = (Vec::new(), Vec::new(), Vec::new());
        for row in rows {
            let mut fields = row.split(',');
            let name = fields.next().unwrap_or("").trim();
            let id = tree
                .find_by_name(name)
                .ok_or_else(|| SimError::Format(format!("unknown node '{name}'")))?;
            let tag = match fields.next().map(str::trim) {
                Some("TRAIN") => Split::Train,
                Some("VALIDATE") => Split::Validate,
                other => return Err(SimError::Format(format!("bad tag {other:?} for {name}"))),
            };
            let v = parse_numbers(fields)?;
            if v.len() != grid.len() {
                return Err(SimError::Format(format!("curve for {name} has {} values", v.len())));
            }
            nodes.push(id);
            split.push(tag);
            values.extend(v);
        }
        let curves = DMatrix::from_row_slice(nodes.len(), grid.len(), &values);
        Ok(TraitDataset {
            nodes,
            split,
            curves,
            grid,
            provenance: Provenance {
                seed: None,
                params: Vec::new(),
            },
        })
    }
}

/// Curves `w_t^T phi` at every node of the tree.
pub fn assemble_traits(
    tree: &PhyloTree,
    weights: &WeightAssignment,
    basis: &BasisSet,
) -> Result<TraitDataset, SimError> {
    if weights.k() != basis.k() {
        return Err(SimError::Dimension(format!(
            "{} weight components but {} basis curves",
            weights.k(),
            basis.k()
        )));
    }
    if weights.values.nrows() != tree.len() {
        return Err(SimError::Dimension(format!(
            "{} weight rows for {} nodes",
            weights.values.nrows(),
            tree.len()
        )));
    }
    let curves = &weights.values * &basis.curves;
    let nodes: Vec<NodeId> = tree.ids().collect();
    let split = nodes
        .iter()
        .map(|&id| if tree.is_tip(id) { Split::Train } else { Split::Validate })
        .collect();
    Ok(TraitDataset {
        nodes,
        split,
        curves,
        grid: basis.grid.clone(),
        provenance: Provenance {
            seed: None,
            params: Vec::new(),
        },
    })
}

/// Hyperparameters of the three reference components: strong inherited
/// variation with a long length-scale, specific variation only, and moderate
/// inherited variation with half the length-scale.
pub fn reference_params() -> Vec<OuParams> {
    vec![
        OuParams {
            sigma_f: 4.5,
            lambda: Some(17.9),
            sigma_n: 0.45,
        },
        OuParams {
            sigma_f: 0.0,
            lambda: None,
            sigma_n: 1.0,
        },
        OuParams {
            sigma_f: 3.0,
            lambda: Some(8.95),
            sigma_n: 0.45,
        },
    ]
}

/// Sizes for a simulated scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_tips: usize,
    pub ig_mu: f64,
    pub ig_lambda: f64,
    pub grid_size: usize,
    pub params: Vec<OuParams>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_tips: 128,
            ig_mu: 0.5,
            ig_lambda: 0.5,
            grid_size: 1024,
            params: reference_params(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub tree: PhyloTree,
    pub basis: BasisSet,
    pub weights: WeightAssignment,
    pub dataset: TraitDataset,
}

pub fn simulate(config: &ScenarioConfig, seed: u64) -> Result<Scenario, SimError> {
    let tree = random_tree(
        config.n_tips,
        config.ig_mu,
        config.ig_lambda,
        &mut substream(seed, TREE_STREAM),
    )?;
    let basis = make_default_basis(config.grid_size)?;
    if config.params.len() != basis.k() {
        return Err(SimError::Dimension(format!(
            "{} parameter sets for a {}-curve basis",
            config.params.len(),
            basis.k()
        )));
    }
    let weights = sample_weights(&tree, &config.params, seed)?;
    let mut dataset = assemble_traits(&tree, &weights, &basis)?;
    dataset.provenance = Provenance {
        seed: Some(seed),
        params: config.params.clone(),
    };
    Ok(Scenario {
        tree,
        basis,
        weights,
        dataset,
    })
}

/// 128-tip tree with IG(0.5, 0.5) branch lengths, the default 1024-point
/// basis, and [`reference_params`].
pub fn reference_scenario(seed: u64) -> Scenario {
    simulate(&ScenarioConfig::default(), seed).expect("reference scenario is well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ou::ou_cov;
    use crate::tree::parse_newick;

    #[test]
    fn default_basis_shape_and_rank() {
        let b = make_default_basis(1024).unwrap();
        assert_eq!((b.k(), b.m()), (3, 1024));
        let sv = b.curves.clone().svd(false, false).singular_values;
        assert!(sv.min() > 1e-3 * sv.max());
        assert!(make_default_basis(15).is_err());
    }

    #[test]
    fn default_basis_is_not_orthogonal() {
        for m in [16, 100, 1024] {
            let g = make_default_basis(m).unwrap().cosine_gram();
            let mut max_off = 0.0f64;
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        assert!(g[(i, j)].abs() < 1.0 - 1e-6);
                        max_off = max_off.max(g[(i, j)].abs());
                    }
                }
            }
            assert!(max_off >= 0.2);
        }
    }

    #[test]
    fn basis_csv_round_trip() {
        let b = make_default_basis(32).unwrap();
        assert_eq!(BasisSet::from_csv(&b.to_csv()).unwrap(), b);
    }

    fn small_tree() -> PhyloTree {
        parse_newick("((A:0.3,B:0.7)x:0.5,(C:1.2,D:0.1)y:0.4)r;").unwrap()
    }

    #[test]
    fn unit_and_zero_weights() {
        let tree = small_tree();
        let basis = make_default_basis(20).unwrap();
        let mut values = DMatrix::zeros(tree.len(), 3);
        values[(1, 0)] = 1.0;
        values[(2, 0)] = 0.3;
        values[(2, 1)] = -1.0;
        values[(2, 2)] = 2.0;
        values[(3, 0)] = 0.6;
        values[(3, 1)] = -2.0;
        values[(3, 2)] = 4.0;
        let ds = assemble_traits(&tree, &WeightAssignment { values }, &basis).unwrap();
        assert_eq!(ds.curves.row(1), basis.curves.row(0));
        assert!(ds.curves.row(0).iter().all(|&v| v == 0.0));
        for j in 0..20 {
            assert!((ds.curves[(3, j)] - 2.0 * ds.curves[(2, j)]).abs() < 1e-12);
        }
        assert_eq!(ds.train().0.len(), 4);
        assert_eq!(ds.validate().0.len(), 3);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let tree = small_tree();
        let basis = make_default_basis(20).unwrap();
        let w = WeightAssignment {
            values: DMatrix::zeros(tree.len(), 2),
        };
        assert!(matches!(
            assemble_traits(&tree, &w, &basis),
            Err(SimError::Dimension(_))
        ));
        assert!(matches!(
            sample_weights(&tree, &[], 1),
            Err(SimError::NoComponents)
        ));
    }

    #[test]
    fn specific_only_weights_are_white() {
        let tree = small_tree();
        let p = [OuParams::specific_only(1.0).unwrap()];
        let sampler = WeightSampler::new(&tree, &p).unwrap();
        let n = 2000;
        let draws: Vec<WeightAssignment> = (0..n).map(|s| sampler.draw(s)).collect();
        let nn = tree.len();
        for a in 0..nn {
            let xa: Vec<f64> = draws.iter().map(|w| w.values[(a, 0)]).collect();
            let var = xa.iter().map(|x| x * x).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() < 0.07, "var {var}");
            let mean = xa.iter().sum::<f64>() / n as f64;
            assert!(mean.abs() < 3.0 / (n as f64).sqrt());
            for b in (a + 1)..nn {
                let cov = draws
                    .iter()
                    .map(|w| w.values[(a, 0)] * w.values[(b, 0)])
                    .sum::<f64>()
                    / n as f64;
                assert!(cov.abs() < 0.05 * 1.0, "cov {cov}");
            }
        }
    }

    #[test]
    fn inherited_covariance_matches_kernel() {
        let tree = small_tree();
        let p = OuParams::new(4.5, 17.9, 0.45).unwrap();
        let sampler = WeightSampler::new(&tree, &[p]).unwrap();
        let d = patristic_distances(&tree, None).unwrap();
        let n = 2000usize;
        let draws: Vec<DVector<f64>> = (0..n as u64)
            .map(|s| sampler.draw(s).values.column(0).into_owned())
            .collect();
        let (a, b) = (1, 5);
        let prod: Vec<f64> = draws.iter().map(|w| w[a] * w[b]).collect();
        let mean = prod.iter().sum::<f64>() / n as f64;
        let sd = (prod.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let expected = ou_cov(&p, d.get(a, b), false).unwrap();
        assert!((mean - expected).abs() < 3.0 * sd / (n as f64).sqrt());
        for node in 0..tree.len() {
            let m = draws.iter().map(|w| w[node]).sum::<f64>() / n as f64;
            let se = (p.prior_variance() / n as f64).sqrt();
            assert!(m.abs() < 3.0 * se);
        }
    }

    #[test]
    fn reference_scenario_counts_and_determinism() {
        let s = reference_scenario(7);
        assert_eq!(s.tree.len(), 255);
        assert_eq!(s.dataset.curves.nrows(), 255);
        assert_eq!(s.dataset.train().0.len(), 128);
        assert_eq!(s.dataset.validate().0.len(), 127);
        assert_eq!(s.dataset.provenance.params, reference_params());
        let again = reference_scenario(7);
        assert_eq!(again.dataset, s.dataset);
        assert_eq!(again.tree, s.tree);
    }

    #[test]
    fn reference_params_match_table() {
        let p = reference_params();
        assert_eq!((p[0].sigma_f, p[0].lambda, p[0].sigma_n), (4.5, Some(17.9), 0.45));
        assert_eq!((p[1].sigma_f, p[1].lambda, p[1].sigma_n), (0.0, None, 1.0));
        assert_eq!((p[2].sigma_f, p[2].lambda, p[2].sigma_n), (3.0, Some(8.95), 0.45));
    }

    #[test]
    fn traits_csv_round_trip() {
        let cfg = ScenarioConfig {
            n_tips: 5,
            grid_size: 16,
            ..ScenarioConfig::default()
        };
        let s = simulate(&cfg, 3).unwrap();
        let back = TraitDataset::from_csv(&s.dataset.to_csv(&s.tree), &s.tree).unwrap();
        assert_eq!(back.nodes, s.dataset.nodes);
        assert_eq!(back.split, s.dataset.split);
        assert_eq!(back.curves, s.dataset.curves);
        let (nodes, w) = read_weights_csv(&s.weights.to_csv(&s.tree), &s.tree).unwrap();
        assert_eq!(nodes.len(), s.tree.len());
        assert_eq!(w, s.weights.values);
    }
}
