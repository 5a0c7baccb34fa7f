//! Survival trees split on model score residuals.
//!
//! Each node refits the unconditional transformation model (at null
//! treatment effect for the predictive families), evaluates one score per
//! subject, and selects variable and cutpoint by a permutation-moment
//! standardized quadratic form: for a candidate split with left sum `s_L`,
//! `T = (s_L - mu)' Sigma^+ (s_L - mu)` where `mu` and `Sigma` are the
//! exact permutation mean and covariance of `s_L`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::Basis;
use crate::likelihood::{
    nelson_aalen, score_alpha, score_alpha_beta, score_theta, score_theta_beta,
    score_theta_thetatr, LikelihoodError, ModelParams, Subject, SurvResponse,
};
use crate::optim::{self, FitConfig, FitError};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error(
        "method {0} is not available: NP-theta, NP-theta-beta and NP-theta-thetatr are \
         computationally infeasible and NP-alpha-beta is not implemented; the nonparametric \
         basis pairs only with alpha scores"
    )]
    InfeasibleSpec(String),
    #[error(
        "unknown method '{0}'; expected <W|Bs|NP>-<alpha|theta|alpha-beta|theta-beta|theta-thetatr>"
    )]
    ParseMethod(String),
    #[error("mtry must lie in 1..={1}, got {0}")]
    BadMtry(usize, usize),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// Score family defining the split statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreFamily {
    /// Log-rank scores (intercept shift), prognostic.
    Alpha,
    /// Full parameter-vector scores, prognostic non-proportional.
    Theta,
    /// Bivariate log-rank-by-arm scores, predictive proportional.
    AlphaBeta,
    /// Parameter scores plus a constant treatment shift.
    ThetaBeta,
    /// Parameter scores plus a time-varying treatment deviation.
    ThetaThetaTr,
}

impl ScoreFamily {
    pub fn is_predictive(&self) -> bool {
        matches!(
            self,
            ScoreFamily::AlphaBeta | ScoreFamily::ThetaBeta | ScoreFamily::ThetaThetaTr
        )
    }

    /// Score dimension given the split-basis parameter count.
    pub fn score_dim(&self, p: usize) -> usize {
        match self {
            ScoreFamily::Alpha => 1,
            ScoreFamily::Theta => p,
            ScoreFamily::AlphaBeta => 2,
            ScoreFamily::ThetaBeta => p + 1,
            ScoreFamily::ThetaThetaTr => 2 * p,
        }
    }

    fn label(&self) -> &'static str {
        match self {
            ScoreFamily::Alpha => "alpha",
            ScoreFamily::Theta => "theta",
            ScoreFamily::AlphaBeta => "alpha-beta",
            ScoreFamily::ThetaBeta => "theta-beta",
            ScoreFamily::ThetaThetaTr => "theta-thetatr",
        }
    }
}

/// Basis kind of the node model; the Bernstein order and support are
/// resolved from the forest configuration and training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    Weibull,
    Bernstein,
    Nonparametric,
}

impl BasisKind {
    fn label(&self) -> &'static str {
        match self {
            BasisKind::Weibull => "W",
            BasisKind::Bernstein => "Bs",
            BasisKind::Nonparametric => "NP",
        }
    }
}

/// A (basis, score family) cell of the model grid, e.g. `Bs-theta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub basis: BasisKind,
    pub family: ScoreFamily,
}

impl SplitSpec {
    pub fn new(basis: BasisKind, family: ScoreFamily) -> Result<Self, TreeError> {
        let spec = SplitSpec { basis, family };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), TreeError> {
        if self.basis == BasisKind::Nonparametric && self.family != ScoreFamily::Alpha {
            return Err(TreeError::InfeasibleSpec(self.to_string()));
        }
        Ok(())
    }
}

impl std::fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.basis.label(), self.family.label())
    }
}

impl std::str::FromStr for SplitSpec {
    type Err = TreeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (basis_str, family_str) = s
            .split_once('-')
            .ok_or_else(|| TreeError::ParseMethod(s.to_string()))?;
        let basis = match basis_str {
            "W" => BasisKind::Weibull,
            "Bs" => BasisKind::Bernstein,
            "NP" => BasisKind::Nonparametric,
            _ => return Err(TreeError::ParseMethod(s.to_string())),
        };
        let family = match family_str {
            "alpha" => ScoreFamily::Alpha,
            "theta" => ScoreFamily::Theta,
            "alpha-beta" => ScoreFamily::AlphaBeta,
            "theta-beta" => ScoreFamily::ThetaBeta,
            "theta-thetatr" => ScoreFamily::ThetaThetaTr,
            _ => return Err(TreeError::ParseMethod(s.to_string())),
        };
        SplitSpec::new(basis, family)
    }
}

/// Candidate-variable count per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mtry {
    /// `ceil(sqrt(J))`.
    Sqrt,
    /// All variables (bagging).
    All,
    Fixed(usize),
}

impl Mtry {
    pub fn resolve(&self, n_vars: usize) -> Result<usize, TreeError> {
        let m = match *self {
            Mtry::Sqrt => (n_vars as f64).sqrt().ceil() as usize,
            Mtry::All => n_vars,
            Mtry::Fixed(m) => m,
        };
        if m == 0 || m > n_vars {
            return Err(TreeError::BadMtry(m, n_vars));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub min_node: usize,
    pub mtry: Mtry,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            max_depth: 10,
            min_node: 20,
            mtry: Mtry::Sqrt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        var: usize,
        cutpoint: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        /// Training indices of the subsample members in this leaf.
        members: Vec<u32>,
        /// Cached unconditional fit on the aggregation basis, for
        /// out-of-subsample log-likelihoods (permutation importance).
        params: Option<Vec<f64>>,
        /// True when this node is a leaf because the node model failed.
        #[serde(default)]
        failed: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
    pub root: usize,
}

impl Tree {
    /// Leaf id reached by covariate vector `x`.
    pub fn descend(&self, x: &[f64]) -> usize {
        let mut id = self.root;
        loop {
            match &self.nodes[id] {
                TreeNode::Split {
                    var,
                    cutpoint,
                    left,
                    right,
                } => {
                    id = if x[*var] <= *cutpoint { *left } else { *right };
                }
                TreeNode::Leaf { .. } => return id,
            }
        }
    }

    pub fn leaf_members(&self, leaf: usize) -> &[u32] {
        match &self.nodes[leaf] {
            TreeNode::Leaf { members, .. } => members,
            _ => panic!("not a leaf"),
        }
    }

    pub fn n_splits(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Split { .. }))
            .count()
    }

    /// Variables used by any split in this tree.
    pub fn used_variables(&self) -> Vec<usize> {
        let mut vars: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                TreeNode::Split { var, .. } => Some(*var),
                _ => None,
            })
            .collect();
        vars.sort_unstable();
        vars.dedup();
        vars
    }
}

/// Per-subject scores of one node, row-major `n x q`; row `i` belongs to
/// the `i`-th entry of the node's index list.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub n: usize,
    pub q: usize,
    pub data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.q..(i + 1) * self.q]
    }
}

/// Node-model fit plus per-subject scores of the requested family.
/// Returns `Ok(None)` when the node model does not converge (the node
/// becomes a leaf). The second element is the node fit for warm starts.
pub fn node_scores(
    spec: &SplitSpec,
    split_basis: Option<&Basis>,
    subjects: &[Subject],
    indices: &[u32],
    fit_cfg: &FitConfig,
    warm: Option<&[f64]>,
) -> Result<Option<(ScoreMatrix, Option<Vec<f64>>)>, TreeError> {
    let node_subjects: Vec<&Subject> = indices.iter().map(|&i| &subjects[i as usize]).collect();

    if spec.basis == BasisKind::Nonparametric {
        // node-local Nelson-Aalen log-rank scores, no parametric fit
        let responses: Vec<SurvResponse> = node_subjects.iter().map(|s| s.response).collect();
        let basis = Basis::Nonparametric {
            baseline: Some(nelson_aalen(&responses)),
        };
        let params = ModelParams::prognostic(vec![]);
        let mut data = Vec::with_capacity(indices.len());
        for s in &node_subjects {
            data.push(score_alpha(&basis, &params, s)?);
        }
        let scores = ScoreMatrix {
            n: indices.len(),
            q: 1,
            data,
        };
        return Ok(Some((scores, None)));
    }

    let basis = split_basis.expect("parametric split spec requires a resolved basis");
    let owned: Vec<Subject> = node_subjects.iter().map(|s| (*s).clone()).collect();
    let weights = vec![1.0; owned.len()];
    let fit = match optim::fit_weighted(basis, &owned, &weights, fit_cfg, warm) {
        Ok(f) if f.converged => f,
        Ok(_) | Err(FitError::Degenerate) | Err(FitError::NonFiniteStart) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let theta = fit.params.theta.clone();
    let p = theta.len();
    let q = spec.family.score_dim(p);
    let mut data = Vec::with_capacity(indices.len() * q);
    for s in &node_subjects {
        match spec.family {
            ScoreFamily::Alpha => {
                data.push(score_alpha(basis, &ModelParams::prognostic(theta.clone()), s)?);
            }
            ScoreFamily::Theta => {
                data.extend(score_theta(basis, &ModelParams::prognostic(theta.clone()), s)?);
            }
            ScoreFamily::AlphaBeta => {
                let sc = score_alpha_beta(basis, &ModelParams::with_beta(theta.clone(), 0.0), s)?;
                data.extend_from_slice(&sc);
            }
            ScoreFamily::ThetaBeta => {
                data.extend(score_theta_beta(
                    basis,
                    &ModelParams::with_beta(theta.clone(), 0.0),
                    s,
                )?);
            }
            ScoreFamily::ThetaThetaTr => {
                data.extend(score_theta_thetatr(
                    basis,
                    &ModelParams::with_theta_tr(theta.clone(), vec![0.0; p]),
                    s,
                )?);
            }
        }
    }
    let scores = ScoreMatrix {
        n: indices.len(),
        q,
        data,
    };
    Ok(Some((scores, Some(theta))))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub var: usize,
    pub cutpoint: f64,
    pub statistic: f64,
}

/// Best admissible split by the permutation-standardized quadratic form.
///
/// Ties break toward the lower variable index, then the lower cutpoint;
/// returns `None` when no cutpoint is admissible or the best statistic
/// is zero.
pub fn best_split(
    scores: &ScoreMatrix,
    subjects: &[Subject],
    indices: &[u32],
    candidate_vars: &[usize],
    min_node: usize,
) -> Option<Split> {
    let n = scores.n;
    let q = scores.q;
    if n < 2 * min_node {
        return None;
    }
    let nf = n as f64;
    let mut total = vec![0.0; q];
    let mut second = vec![0.0; q * q];
    for i in 0..n {
        let row = scores.row(i);
        for a in 0..q {
            total[a] += row[a];
            for b in a..q {
                second[a * q + b] += row[a] * row[b];
            }
        }
    }
    // V = sum s s' - (sum s)(sum s)'/n, symmetric
    let mut v = nalgebra::DMatrix::<f64>::zeros(q, q);
    for a in 0..q {
        for b in a..q {
            let val = second[a * q + b] - total[a] * total[b] / nf;
            v[(a, b)] = val;
            v[(b, a)] = val;
        }
    }
    let sigma_max = v
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0f64, |m, &s| m.max(s));
    if sigma_max <= 0.0 {
        return None;
    }
    let pinv = v.pseudo_inverse(1e-10 * sigma_max).ok()?;

    let mut best: Option<Split> = None;
    let mut order: Vec<usize> = (0..n).collect();
    let mut prefix = vec![0.0; q];
    let mut delta = vec![0.0; q];
    for &var in candidate_vars {
        order.sort_by(|&i, &j| {
            let vi = subjects[indices[i] as usize].covariates[var];
            let vj = subjects[indices[j] as usize].covariates[var];
            vi.total_cmp(&vj)
        });
        prefix.fill(0.0);
        for k in 0..n - 1 {
            let row = scores.row(order[k]);
            for a in 0..q {
                prefix[a] += row[a];
            }
            let here = subjects[indices[order[k]] as usize].covariates[var];
            let next = subjects[indices[order[k + 1]] as usize].covariates[var];
            if here == next {
                continue;
            }
            let n_left = k + 1;
            if n_left < min_node || n - n_left < min_node {
                continue;
            }
            let nl = n_left as f64;
            for a in 0..q {
                delta[a] = prefix[a] - nl / nf * total[a];
            }
            let kappa = nl * (nf - nl) / (nf * (nf - 1.0));
            let mut t = 0.0;
            for a in 0..q {
                let mut acc = 0.0;
                for b in 0..q {
                    acc += pinv[(a, b)] * delta[b];
                }
                t += delta[a] * acc;
            }
            t /= kappa;
            if t.is_finite() && t > 0.0 && best.as_ref().map_or(true, |b| t > b.statistic) {
                best = Some(Split {
                    var,
                    cutpoint: 0.5 * (here + next),
                    statistic: t,
                });
            }
        }
    }
    best
}

/// Everything a single tree needs from its forest: data, resolved bases,
/// configuration, and warm starts.
pub struct TreeGrower<'a> {
    pub subjects: &'a [Subject],
    pub spec: SplitSpec,
    /// Resolved node-model basis; `None` for the nonparametric spec.
    pub split_basis: Option<Basis>,
    /// Aggregation basis for cached leaf models.
    pub agg_basis: Basis,
    pub tree_cfg: TreeConfig,
    pub fit_cfg: FitConfig,
    /// Warm start for root-node split-model fits.
    pub split_warm: Option<Vec<f64>>,
    /// Warm start for leaf aggregation fits.
    pub agg_warm: Option<Vec<f64>>,
}

impl<'a> TreeGrower<'a> {
    pub fn grow(&self, subsample: &[u32], seed: u64) -> Result<Tree, TreeError> {
        let n_vars = self.subjects.first().map_or(0, |s| s.covariates.len());
        let mtry = self.tree_cfg.mtry.resolve(n_vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nodes = Vec::new();
        let root = self.build(
            subsample.to_vec(),
            0,
            mtry,
            n_vars,
            &mut rng,
            self.split_warm.as_deref(),
            &mut nodes,
        )?;
        Ok(Tree { nodes, root })
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        &self,
        indices: Vec<u32>,
        depth: usize,
        mtry: usize,
        n_vars: usize,
        rng: &mut ChaCha8Rng,
        warm: Option<&[f64]>,
        nodes: &mut Vec<TreeNode>,
    ) -> Result<usize, TreeError> {
        let n = indices.len();
        if depth >= self.tree_cfg.max_depth || n < 2 * self.tree_cfg.min_node {
            return Ok(self.make_leaf(indices, false, nodes));
        }
        let scored = node_scores(
            &self.spec,
            self.split_basis.as_ref(),
            self.subjects,
            &indices,
            &self.fit_cfg,
            warm,
        )?;
        let (scores, node_theta) = match scored {
            Some(s) => s,
            None => return Ok(self.make_leaf(indices, true, nodes)),
        };
        let mut candidates = rand::seq::index::sample(rng, n_vars, mtry).into_vec();
        candidates.sort_unstable();
        let split = best_split(
            &scores,
            self.subjects,
            &indices,
            &candidates,
            self.tree_cfg.min_node,
        );
        let split = match split {
            Some(s) => s,
            None => return Ok(self.make_leaf(indices, false, nodes)),
        };
        let (left_idx, right_idx): (Vec<u32>, Vec<u32>) = indices
            .iter()
            .partition(|&&i| self.subjects[i as usize].covariates[split.var] <= split.cutpoint);
        let left = self.build(
            left_idx,
            depth + 1,
            mtry,
            n_vars,
            rng,
            node_theta.as_deref(),
            nodes,
        )?;
        let right = self.build(
            right_idx,
            depth + 1,
            mtry,
            n_vars,
            rng,
            node_theta.as_deref(),
            nodes,
        )?;
        nodes.push(TreeNode::Split {
            var: split.var,
            cutpoint: split.cutpoint,
            left,
            right,
        });
        Ok(nodes.len() - 1)
    }

    fn make_leaf(&self, indices: Vec<u32>, failed: bool, nodes: &mut Vec<TreeNode>) -> usize {
        let owned: Vec<Subject> = indices
            .iter()
            .map(|&i| self.subjects[i as usize].clone())
            .collect();
        let weights = vec![1.0; owned.len()];
        let params =
            optim::fit_weighted(&self.agg_basis, &owned, &weights, &self.fit_cfg, self.agg_warm.as_deref())
                .ok()
                .map(|f| {
                    // leaf models evaluate out-of-subsample observations:
                    // keep the density slope strictly positive so their
                    // contributions stay finite
                    let mut theta = f.params.theta;
                    optim::margin_monotone_theta(&mut theta, &self.agg_basis);
                    theta
                });
        nodes.push(TreeNode::Leaf {
            members: indices,
            params,
            failed,
        });
        nodes.len() - 1
    }
}
