//! Zero-mean GP marginal likelihood of tip weights and one-dimensional profile
//! maximum likelihood for the OU hyperparameters.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cholesky_with_jitter, FactorizationError};
use crate::ou::{build_cov_matrix, KernelError, OuParams};
use crate::tree::{patristic_distances, DistanceMatrix, NodeId, PhyloTree, TreeError};

const SCAN_POINTS: usize = 64;
/// Golden-section stops once the bracket is this narrow in log space, i.e.
/// this relative width in the parameter.
const REFINE_WIDTH: f64 = 1e-6;
const FLAT_VARIATION: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum HyperfitError {
    #[error(transparent)]
    Factorization(#[from] FactorizationError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("dimension mismatch: {0}")]
    Mismatch(String),
    #[error("invalid bounds [{lower}, {upper}]")]
    InvalidBounds { lower: f64, upper: f64 },
    #[error("ratio must be positive and finite, got {0}")]
    InvalidRatio(f64),
    #[error("unknown parameter '{0}' (expected sigma_f, sigma_n or lambda)")]
    UnknownParameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeParam {
    SigmaF,
    SigmaN,
    Lambda,
}

impl FreeParam {
    pub fn name(self) -> &'static str {
        match self {
            FreeParam::SigmaF => "sigma_f",
            FreeParam::SigmaN => "sigma_n",
            FreeParam::Lambda => "lambda",
        }
    }
}

impl fmt::Display for FreeParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FreeParam {
    type Err = HyperfitError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sigma_f" => Ok(FreeParam::SigmaF),
            "sigma_n" => Ok(FreeParam::SigmaN),
            "lambda" => Ok(FreeParam::Lambda),
            other => Err(HyperfitError::UnknownParameter(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self, HyperfitError> {
        if !(lower > 0.0 && upper > lower && upper.is_finite()) {
            return Err(HyperfitError::InvalidBounds { lower, upper });
        }
        Ok(Bounds { lower, upper })
    }

    /// `[1e-4, 100]` for the scales, `[1e-3, 100]` times the mean tip-tip
    /// distance for the length-scale.
    pub fn default_for(param: FreeParam, mean_tip_distance: f64) -> Self {
        match param {
            FreeParam::Lambda => {
                let d = if mean_tip_distance > 0.0 {
                    mean_tip_distance
                } else {
                    1.0
                };
                Bounds {
                    lower: 1e-3 * d,
                    upper: 100.0 * d,
                }
            }
            _ => Bounds {
                lower: 1e-4,
                upper: 100.0,
            },
        }
    }
}

/// Tip weights of one component together with their pairwise distances.
#[derive(Clone, Debug)]
pub struct TipLikelihood {
    distances: DistanceMatrix,
    weights: DVector<f64>,
}

impl TipLikelihood {
    pub fn new(
        tree: &PhyloTree,
        tips: &[NodeId],
        weights: &DVector<f64>,
    ) -> Result<Self, HyperfitError> {
        if tips.len() != weights.len() {
            return Err(HyperfitError::Mismatch(format!(
                "{} tips but {} weights",
                tips.len(),
                weights.len()
            )));
        }
        if tips.is_empty() {
            return Err(HyperfitError::Mismatch("no tips".into()));
        }
        Ok(TipLikelihood {
            distances: patristic_distances(tree, Some(tips))?,
            weights: weights.clone(),
        })
    }

    pub fn n(&self) -> usize {
        self.weights.len()
    }

    pub fn mean_tip_distance(&self) -> f64 {
        self.distances.pair_stats().1
    }

    /// `-1/2 y^T K^-1 y - 1/2 log det K - n/2 log 2 pi`.
    pub fn log_likelihood(&self, params: &OuParams) -> Result<f64, HyperfitError> {
        let k = build_cov_matrix(params, &self.distances, true)?;
        let factor = cholesky_with_jitter(&k.entries)?;
        let v = factor.solve_lower(&self.weights);
        let n = self.n() as f64;
        Ok(-0.5 * v.norm_squared()
            - 0.5 * factor.log_det()
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
    }

    /// `sigma_f` maximizing the likelihood when `sigma_n = ratio * sigma_f`:
    /// with `K = sigma_f^2 M`, the optimum is `sqrt(y^T M^-1 y / n)`.
    pub fn ratio_closed_form(&self, lambda: f64, ratio: f64) -> Result<f64, HyperfitError> {
        let unit = OuParams::new(1.0, lambda, ratio)?;
        let m = build_cov_matrix(&unit, &self.distances, true)?;
        let factor = cholesky_with_jitter(&m.entries)?;
        let v = factor.solve_lower(&self.weights);
        Ok((v.norm_squared() / self.n() as f64).sqrt())
    }
}

pub fn log_marginal_likelihood(
    tree: &PhyloTree,
    tips: &[NodeId],
    weights: &DVector<f64>,
    params: &OuParams,
) -> Result<f64, HyperfitError> {
    TipLikelihood::new(tree, tips, weights)?.log_likelihood(params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodProfile {
    pub parameter_name: String,
    pub grid: Vec<f64>,
    pub log_likelihoods: Vec<f64>,
    pub argmax: f64,
}

impl LikelihoodProfile {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},log_likelihood\n", self.parameter_name);
        for (x, ll) in self.grid.iter().zip(&self.log_likelihoods) {
            out.push_str(&format!("{x},{ll}\n"));
        }
        out
    }

    pub fn variation(&self) -> f64 {
        let max = self.log_likelihoods.iter().cloned().fold(f64::MIN, f64::max);
        let min = self.log_likelihoods.iter().cloned().fold(f64::MAX, f64::min);
        max - min
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerDiagnostics {
    pub iterations: usize,
    pub bracket: [f64; 2],
    pub scan_argmax: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MLEResult {
    pub parameter: String,
    /// `None` when the profile is flat and no maximizer is meaningful.
    pub estimate: Option<f64>,
    pub log_likelihood_at_estimate: Option<f64>,
    pub fixed_params: BTreeMap<String, f64>,
    pub bounds: Bounds,
    pub optimizer_diagnostics: OptimizerDiagnostics,
    pub at_lower_bound: bool,
    pub at_upper_bound: bool,
    pub identifiable: bool,
    #[serde(skip)]
    pub profile: Option<LikelihoodProfile>,
}

/// Estimate, its log-likelihood and the optimizer record; `None` for a flat
/// profile.
type Refined = Option<(f64, f64, OptimizerDiagnostics)>;

/// Maximizes `f` over `[lower, upper]`: a log-spaced scan followed by
/// golden-section refinement of the bracket around the scan maximum.
fn maximize_log_scale<F>(
    name: &str,
    bounds: Bounds,
    mut f: F,
) -> Result<(LikelihoodProfile, Refined), HyperfitError>
where
    F: FnMut(f64) -> Result<f64, HyperfitError>,
{
    let (lo, hi) = (bounds.lower.ln(), bounds.upper.ln());
    let step = (hi - lo) / (SCAN_POINTS - 1) as f64;
    let ts: Vec<f64> = (0..SCAN_POINTS).map(|i| lo + step * i as f64).collect();
    let mut grid: Vec<f64> = ts.iter().map(|t| t.exp()).collect();
    grid[0] = bounds.lower;
    grid[SCAN_POINTS - 1] = bounds.upper;
    let lls = grid.iter().map(|&x| f(x)).collect::<Result<Vec<_>, _>>()?;
    let best = (0..SCAN_POINTS)
        .filter(|&i| lls[i].is_finite())
        .max_by(|&a, &b| lls[a].total_cmp(&lls[b]))
        .unwrap_or(0);
    let mut profile = LikelihoodProfile {
        parameter_name: name.to_string(),
        grid: grid.clone(),
        log_likelihoods: lls.clone(),
        argmax: grid[best],
    };
    if profile.variation() < FLAT_VARIATION {
        return Ok((profile, None));
    }

    let ia = best.saturating_sub(1);
    let ib = (best + 1).min(SCAN_POINTS - 1);
    let (mut a, mut b) = (ts[ia], ts[ib]);
    let mut top = (ts[best], lls[best]);
    for (t, ll) in [(ts[ia], lls[ia]), (ts[ib], lls[ib])] {
        if ll > top.1 {
            top = (t, ll);
        }
    }
    let mut eval = |t: f64, top: &mut (f64, f64)| -> Result<f64, HyperfitError> {
        let ll = f(t.exp())?;
        if ll > top.1 {
            *top = (t, ll);
        }
        Ok(ll)
    };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = eval(c, &mut top)?;
    let mut fd = eval(d, &mut top)?;
    let mut iterations = 0;
    while b - a > REFINE_WIDTH {
        iterations += 1;
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = eval(c, &mut top)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = eval(d, &mut top)?;
        }
    }
    let mid = 0.5 * (a + b);
    eval(mid, &mut top)?;
    let estimate = top.0.exp().clamp(bounds.lower, bounds.upper);
    profile.argmax = grid[best];
    let diagnostics = OptimizerDiagnostics {
        iterations,
        bracket: [ts[ia].exp(), ts[ib].exp()],
        scan_argmax: grid[best],
    };
    Ok((profile, Some((estimate, top.1, diagnostics))))
}

fn finish(
    name: &str,
    bounds: Bounds,
    fixed_params: BTreeMap<String, f64>,
    outcome: (LikelihoodProfile, Refined),
) -> MLEResult {
    let (profile, found) = outcome;
    match found {
        Some((estimate, ll, diagnostics)) => {
            let near = |bound: f64| (estimate / bound).ln().abs() <= REFINE_WIDTH;
            MLEResult {
                parameter: name.to_string(),
                estimate: Some(estimate),
                log_likelihood_at_estimate: Some(ll),
                fixed_params,
                bounds,
                optimizer_diagnostics: diagnostics,
                at_lower_bound: near(bounds.lower),
                at_upper_bound: near(bounds.upper),
                identifiable: true,
                profile: Some(profile),
            }
        }
        None => MLEResult {
            parameter: name.to_string(),
            estimate: None,
            log_likelihood_at_estimate: None,
            fixed_params,
            bounds,
            optimizer_diagnostics: OptimizerDiagnostics {
                iterations: 0,
                bracket: [bounds.lower, bounds.upper],
                scan_argmax: profile.argmax,
            },
            at_lower_bound: false,
            at_upper_bound: false,
            identifiable: false,
            profile: Some(profile),
        },
    }
}

/// Profiles one hyperparameter with the other two held at `fixed`.
///
/// When `sigma_f` is free and `fixed` carries no length-scale (a purely
/// specific component), the mean tip-tip distance is used as the length-scale.
pub fn profile_mle(
    data: &TipLikelihood,
    free: FreeParam,
    fixed: &OuParams,
    bounds: Option<Bounds>,
) -> Result<MLEResult, HyperfitError> {
    let bounds = match bounds {
        Some(b) => Bounds::new(b.lower, b.upper)?,
        None => Bounds::default_for(free, data.mean_tip_distance()),
    };
    let lambda = fixed.lambda.unwrap_or_else(|| {
        let d = data.mean_tip_distance();
        if d > 0.0 {
            d
        } else {
            1.0
        }
    });
    let build = |x: f64| -> OuParams {
        match free {
            FreeParam::SigmaF => OuParams {
                sigma_f: x,
                lambda: Some(lambda),
                sigma_n: fixed.sigma_n,
            },
            FreeParam::SigmaN => OuParams {
                sigma_n: x,
                lambda: Some(lambda),
                ..*fixed
            },
            FreeParam::Lambda => OuParams {
                lambda: Some(x),
                ..*fixed
            },
        }
    };
    let mut fixed_params = BTreeMap::new();
    if free != FreeParam::SigmaF {
        fixed_params.insert("sigma_f".to_string(), fixed.sigma_f);
    }
    if free != FreeParam::SigmaN {
        fixed_params.insert("sigma_n".to_string(), fixed.sigma_n);
    }
    if free != FreeParam::Lambda {
        fixed_params.insert("lambda".to_string(), lambda);
    }
    let outcome = maximize_log_scale(free.name(), bounds, |x| data.log_likelihood(&build(x)))?;
    Ok(finish(free.name(), bounds, fixed_params, outcome))
}

/// Maximizes over `sigma_f` with `sigma_n = ratio * sigma_f` and a known
/// length-scale.
pub fn ratio_mle(
    data: &TipLikelihood,
    lambda: f64,
    ratio: f64,
    bounds: Option<Bounds>,
) -> Result<MLEResult, HyperfitError> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(HyperfitError::InvalidRatio(ratio));
    }
    OuParams::new(1.0, lambda, ratio)?;
    let bounds = match bounds {
        Some(b) => Bounds::new(b.lower, b.upper)?,
        None => Bounds::default_for(FreeParam::SigmaF, data.mean_tip_distance()),
    };
    let fixed_params = BTreeMap::from([
        ("lambda".to_string(), lambda),
        ("ratio".to_string(), ratio),
    ]);
    let outcome = maximize_log_scale("sigma_f", bounds, |s| {
        data.log_likelihood(&OuParams {
            sigma_f: s,
            lambda: Some(lambda),
            sigma_n: ratio * s,
        })
    })?;
    Ok(finish("sigma_f", bounds, fixed_params, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::parse_newick;
    use std::f64::consts::PI;

    fn comp1() -> OuParams {
        OuParams::new(4.5, 17.9, 0.45).unwrap()
    }

    fn single_tip(y: f64) -> TipLikelihood {
        let tree = parse_newick("(A:1)r;").unwrap();
        let a = tree.find_by_name("A").unwrap();
        TipLikelihood::new(&tree, &[a], &DVector::from_vec(vec![y])).unwrap()
    }

    #[test]
    fn one_tip_hand_values() {
        let v = 20.4525;
        let ll = single_tip(0.0).log_likelihood(&comp1()).unwrap();
        assert!((ll - (-0.5 * (2.0 * PI * v).ln())).abs() < 1e-12);
        assert!((ll - (-2.428)).abs() < 5e-4);
        let ll = single_tip(v.sqrt()).log_likelihood(&comp1()).unwrap();
        assert!((ll - (-0.5 * (2.0 * PI * v).ln() - 0.5)).abs() < 1e-12);
    }

    fn small_data() -> TipLikelihood {
        let tree = parse_newick("((A:0.5,B:1.2):0.7,(C:0.3,D:2.0):0.1,E:1.5)r;").unwrap();
        let tips = tree.tips();
        let y = DVector::from_vec(vec![1.3, -0.4, 2.2, 0.9, -1.7]);
        TipLikelihood::new(&tree, &tips, &y).unwrap()
    }

    #[test]
    fn permuting_tips_leaves_likelihood_unchanged() {
        let tree = parse_newick("((A:0.5,B:1.2):0.7,(C:0.3,D:2.0):0.1,E:1.5)r;").unwrap();
        let tips = tree.tips();
        let y = [1.3, -0.4, 2.2, 0.9, -1.7];
        let a = log_marginal_likelihood(&tree, &tips, &DVector::from_row_slice(&y), &comp1())
            .unwrap();
        let order = [3, 0, 4, 1, 2];
        let ptips: Vec<_> = order.iter().map(|&i| tips[i]).collect();
        let py: Vec<_> = order.iter().map(|&i| y[i]).collect();
        let b = log_marginal_likelihood(&tree, &ptips, &DVector::from_vec(py), &comp1()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ratio_optimum_matches_closed_form() {
        let data = small_data();
        let closed = data.ratio_closed_form(17.9, 0.1).unwrap();
        let mle = ratio_mle(&data, 17.9, 0.1, None).unwrap();
        let est = mle.estimate.unwrap();
        assert!(((est - closed) / closed).abs() < 1e-6, "{est} vs {closed}");
        assert!(mle.identifiable && !mle.at_lower_bound && !mle.at_upper_bound);
    }

    #[test]
    fn zero_data_drives_ratio_scale_to_lower_bound() {
        let tree = parse_newick("(A:1,B:2)r;").unwrap();
        let data = TipLikelihood::new(&tree, &tree.tips(), &DVector::zeros(2)).unwrap();
        let mle = ratio_mle(&data, 1.0, 0.1, None).unwrap();
        assert!(mle.at_lower_bound);
        assert!((mle.estimate.unwrap() / 1e-4 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn length_scale_without_inherited_variance_is_flat() {
        let data = small_data();
        let fixed = OuParams::specific_only(0.45).unwrap();
        let mle = profile_mle(&data, FreeParam::Lambda, &fixed, None).unwrap();
        assert!(!mle.identifiable);
        assert_eq!(mle.estimate, None);
        assert!(mle.profile.unwrap().variation() < 1e-10);
    }

    #[test]
    fn refined_estimate_lies_in_scan_bracket() {
        let data = small_data();
        for free in [FreeParam::SigmaF, FreeParam::SigmaN, FreeParam::Lambda] {
            let mle = profile_mle(&data, free, &comp1(), None).unwrap();
            let est = mle.estimate.unwrap();
            let [lo, hi] = mle.optimizer_diagnostics.bracket;
            assert!(est >= lo && est <= hi);
            let ll = mle.log_likelihood_at_estimate.unwrap();
            let at = |x: f64| {
                let mut p = comp1();
                match free {
                    FreeParam::SigmaF => p.sigma_f = x,
                    FreeParam::SigmaN => p.sigma_n = x,
                    FreeParam::Lambda => p.lambda = Some(x),
                }
                data.log_likelihood(&p).unwrap()
            };
            assert!(ll >= at(lo) && ll >= at(hi));
        }
    }

    #[test]
    fn specific_only_component_uses_mean_distance_for_sigma_f() {
        let data = small_data();
        let fixed = OuParams::specific_only(0.45).unwrap();
        let mle = profile_mle(&data, FreeParam::SigmaF, &fixed, None).unwrap();
        assert_eq!(mle.fixed_params["lambda"], data.mean_tip_distance());
        assert!(mle.identifiable);
    }

    #[test]
    fn bounds_and_names_validate() {
        assert!(Bounds::new(0.0, 1.0).is_err());
        assert!(Bounds::new(2.0, 1.0).is_err());
        assert!(ratio_mle(&small_data(), 1.0, 0.0, None).is_err());
        assert_eq!("lambda".parse::<FreeParam>().unwrap(), FreeParam::Lambda);
        assert!("tau".parse::<FreeParam>().is_err());
        let b = Bounds::default_for(FreeParam::Lambda, 2.0);
        assert_eq!((b.lower, b.upper), (2e-3, 200.0));
    }

    #[test]
    fn profile_csv_has_header_and_rows() {
        let mle = profile_mle(&small_data(), FreeParam::SigmaF, &comp1(), None).unwrap();
        let csv = mle.profile.unwrap().to_csv();
        assert!(csv.starts_with("sigma_f,log_likelihood\n"));
        assert_eq!(csv.lines().count(), 65);
    }
}
