//! Forest growth, nearest-neighbor weights, and local adaptive
//! maximum-likelihood aggregation.
//!
//! A forest grows trees on subsamples drawn without replacement
//! (stratified by treatment arm for predictive forests). Prediction at a
//! query point counts, per training subject, the trees in which the query
//! and the subject share a terminal node; those raw co-membership counts
//! weight a constrained maximum-likelihood refit on the aggregation basis
//! (a monotone Bernstein log-cumulative hazard, for every split family).
//!
//! The out-of-sample log-likelihood sums validation contributions at the
//! locally fitted parameters; permutation variable importance measures the
//! per-tree drop in out-of-subsample log-likelihood under cached leaf
//! models when one covariate column is shuffled.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{default_support, Basis, BasisError};
use crate::likelihood::{loglik, LikelihoodError, ModelParams, Subject, SurvResponse};
use crate::optim::{
    self, DesignCache, FitConfig, FitError, FitResult, PredictiveMode,
};
use crate::tree::{
    BasisKind, ScoreFamily, SplitSpec, Tree, TreeConfig, TreeError, TreeGrower, TreeNode,
};

#[derive(Debug, Error)]
pub enum ForestError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("dataset too small: subsamples of size {subsample} cannot hold two nodes of {min_node}")]
    DatasetTooSmall { subsample: usize, min_node: usize },
    #[error("covariate vector has length {got}, the forest was grown on {expected}")]
    CovariateMismatch { got: usize, expected: usize },
    #[error("predictive forests require treatment indicators on every subject")]
    MissingTreatment,
    #[error("subsample index {0} out of range for {1} training subjects")]
    BadSubsampleIndex(u32, usize),
    #[error("variable index {0} out of range for {1} covariates")]
    BadVariable(usize, usize),
    #[error("no tree excludes subject {0}; cannot form out-of-bag weights")]
    NoOobTrees(usize),
    #[error("model file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file encoding: {0}")]
    Json(#[from] serde_json::Error),
}

/// Forest-level configuration; tree-level settings nest inside.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Subsample fraction, drawn without replacement.
    pub subsample_fraction: f64,
    /// Stratify subsamples by treatment arm (predictive default).
    pub stratify_by_treatment: bool,
    pub tree: TreeConfig,
    pub spec: SplitSpec,
    /// Order of the Bernstein log-cumulative hazard, for Bernstein split
    /// bases and for the aggregation basis of every split family.
    pub bernstein_order: usize,
    pub master_seed: u64,
    pub fit: FitConfig,
}

impl ForestConfig {
    pub fn new(spec: SplitSpec) -> Self {
        ForestConfig {
            n_trees: 250,
            subsample_fraction: 0.632,
            stratify_by_treatment: spec.family.is_predictive(),
            tree: TreeConfig::default(),
            spec,
            bernstein_order: 5,
            master_seed: 0,
            fit: FitConfig::default(),
        }
    }
}

/// What prediction needs from a training subject: response and arm, but
/// no covariates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainObs {
    pub response: SurvResponse,
    pub treatment: Option<u8>,
}

impl TrainObs {
    pub fn from_subjects(subjects: &[Subject]) -> Vec<TrainObs> {
        subjects
            .iter()
            .map(|s| TrainObs {
                response: s.response,
                treatment: s.treatment,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Forest {
    pub config: ForestConfig,
    /// Log-time support of the training data, recorded for reproducibility.
    pub support: (f64, f64),
    /// Node-model basis; `None` for nonparametric (log-rank) splitting.
    pub split_basis: Option<Basis>,
    /// Aggregation basis of the local maximum-likelihood refits.
    pub agg_basis: Basis,
    pub trees: Vec<Tree>,
    pub subsamples: Vec<Vec<u32>>,
    /// Unconditional fit on the aggregation basis (warm start and
    /// depth-zero reduction point).
    pub root_params: Vec<f64>,
    pub n_train: usize,
    pub n_covariates: usize,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Reproducible per-stream seed derivation from the master seed.
pub(crate) fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream.wrapping_add(0xA5A5_A5A5_0000_0001)))
}

/// Strict-margin repair of a fitted parameter set (both arms for
/// treatment-deviation models); see [`optim::margin_monotone_theta`].
fn margin_monotone(params: &mut ModelParams, basis: &Basis) {
    optim::margin_monotone_theta(&mut params.theta, basis);
    if let Some(tr) = &mut params.theta_tr {
        let mut combined: Vec<f64> =
            params.theta.iter().zip(tr.iter()).map(|(a, b)| a + b).collect();
        optim::margin_monotone_theta(&mut combined, basis);
        for (k, c) in combined.into_iter().enumerate() {
            tr[k] = c - params.theta[k];
        }
    }
}

/// Draw `n_trees` subsamples of size `ceil(fraction * n)` without
/// replacement, preserving per-arm proportions to within one subject when
/// stratified.
pub fn draw_subsamples(
    n: usize,
    treatments: Option<&[u8]>,
    cfg: &ForestConfig,
) -> Vec<Vec<u32>> {
    use rand::SeedableRng;
    let m = (cfg.subsample_fraction * n as f64).ceil() as usize;
    let m = m.clamp(1, n);
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, u64::MAX));
    let mut out = Vec::with_capacity(cfg.n_trees);
    match treatments.filter(|_| cfg.stratify_by_treatment) {
        Some(arms) => {
            let treated: Vec<u32> = (0..n as u32).filter(|&i| arms[i as usize] == 1).collect();
            let control: Vec<u32> = (0..n as u32).filter(|&i| arms[i as usize] != 1).collect();
            let mt = ((m as f64 * treated.len() as f64 / n as f64).round() as usize)
                .clamp(m.saturating_sub(control.len()), treated.len().min(m));
            let mc = m - mt;
            for _ in 0..cfg.n_trees {
                let mut sub: Vec<u32> = rand::seq::index::sample(&mut rng, treated.len(), mt)
                    .iter()
                    .map(|k| treated[k])
                    .collect();
                sub.extend(
                    rand::seq::index::sample(&mut rng, control.len(), mc)
                        .iter()
                        .map(|k| control[k]),
                );
                sub.sort_unstable();
                out.push(sub);
            }
        }
        None => {
            for _ in 0..cfg.n_trees {
                let mut sub: Vec<u32> = rand::seq::index::sample(&mut rng, n, m)
                    .iter()
                    .map(|k| k as u32)
                    .collect();
                sub.sort_unstable();
                out.push(sub);
            }
        }
    }
    out
}

/// Grow a forest, drawing its subsamples from the master seed.
pub fn grow_forest(subjects: &[Subject], cfg: &ForestConfig) -> Result<Forest, ForestError> {
    let treatments: Option<Vec<u8>> = subjects
        .iter()
        .map(|s| s.treatment)
        .collect::<Option<Vec<u8>>>();
    let subsamples = draw_subsamples(subjects.len(), treatments.as_deref(), cfg);
    grow_forest_with_subsamples(subjects, cfg, subsamples)
}

/// Grow a forest on externally supplied subsample index sets (the
/// benchmark harness grows all methods on identical subsamples).
pub fn grow_forest_with_subsamples(
    subjects: &[Subject],
    cfg: &ForestConfig,
    subsamples: Vec<Vec<u32>>,
) -> Result<Forest, ForestError> {
    cfg.spec.validate()?;
    let n = subjects.len();
    for sub in &subsamples {
        for &i in sub {
            if i as usize >= n {
                return Err(ForestError::BadSubsampleIndex(i, n));
            }
        }
    }
    if cfg.spec.family.is_predictive() && subjects.iter().any(|s| s.treatment.is_none()) {
        return Err(ForestError::MissingTreatment);
    }
    let m = subsamples.first().map_or(0, Vec::len);
    if cfg.tree.max_depth >= 1 && m < 2 * cfg.tree.min_node {
        return Err(ForestError::DatasetTooSmall {
            subsample: m,
            min_node: cfg.tree.min_node,
        });
    }

    let mut log_bounds = Vec::with_capacity(2 * n);
    for s in subjects {
        let (lo, hi) = s.response.finite_bounds();
        log_bounds.push(lo.ln());
        if let Some(h) = hi {
            log_bounds.push(h.ln());
        }
    }
    let support = default_support(&log_bounds)?;
    let agg_basis = Basis::bernstein(cfg.bernstein_order, support)?;
    let split_basis = match cfg.spec.basis {
        BasisKind::Weibull => Some(Basis::weibull()),
        BasisKind::Bernstein => Some(Basis::bernstein(cfg.bernstein_order, support)?),
        BasisKind::Nonparametric => None,
    };

    let root = optim::fit_unconditional(&agg_basis, subjects, &cfg.fit)?;
    let split_warm = match &split_basis {
        Some(b) if *b != agg_basis => {
            Some(optim::fit_unconditional(b, subjects, &cfg.fit)?.params.theta)
        }
        Some(_) => Some(root.params.theta.clone()),
        None => None,
    };

    let grower = TreeGrower {
        subjects,
        spec: cfg.spec,
        split_basis: split_basis.clone(),
        agg_basis: agg_basis.clone(),
        tree_cfg: cfg.tree.clone(),
        fit_cfg: cfg.fit.clone(),
        split_warm,
        agg_warm: Some(root.params.theta.clone()),
    };
    let trees: Result<Vec<Tree>, TreeError> = subsamples
        .par_iter()
        .enumerate()
        .map(|(b, sub)| grower.grow(sub, derive_seed(cfg.master_seed, b as u64)))
        .collect();

    Ok(Forest {
        config: cfg.clone(),
        support,
        split_basis,
        agg_basis,
        trees: trees?,
        subsamples,
        root_params: root.params.theta,
        n_train: n,
        n_covariates: subjects.first().map_or(0, |s| s.covariates.len()),
    })
}

/// Reusable state for many predictions against the same training data:
/// aggregation-basis design rows plus response metadata.
pub struct PredictionContext<'a> {
    forest: &'a Forest,
    cache: DesignCache,
    responses: Vec<SurvResponse>,
    treated: Vec<Option<bool>>,
    any_treatment: bool,
}

impl Forest {
    pub fn is_predictive(&self) -> bool {
        self.config.spec.family.is_predictive()
    }

    fn check_x(&self, x: &[f64]) -> Result<(), ForestError> {
        if x.len() != self.n_covariates {
            return Err(ForestError::CovariateMismatch {
                got: x.len(),
                expected: self.n_covariates,
            });
        }
        Ok(())
    }

    /// Raw nearest-neighbor weights: for each training subject, the number
    /// of trees in which it shares a terminal node with `x`.
    pub fn weights(&self, x: &[f64]) -> Result<Vec<u32>, ForestError> {
        self.check_x(x)?;
        let mut w = vec![0u32; self.n_train];
        for tree in &self.trees {
            let leaf = tree.descend(x);
            for &i in tree.leaf_members(leaf) {
                w[i as usize] += 1;
            }
        }
        Ok(w)
    }

    pub fn prediction_context<'a>(
        &'a self,
        train: &[TrainObs],
    ) -> Result<PredictionContext<'a>, ForestError> {
        let responses: Vec<SurvResponse> = train.iter().map(|t| t.response).collect();
        let treated: Vec<Option<bool>> = train.iter().map(|t| t.treatment.map(|r| r == 1)).collect();
        let cache = DesignCache::build(&self.agg_basis, &responses)?;
        Ok(PredictionContext {
            forest: self,
            cache,
            responses,
            treated,
            any_treatment: train.iter().all(|t| t.treatment.is_some()) && !train.is_empty(),
        })
    }

    /// Local maximum-likelihood parameters at `x` (the one-off form of
    /// [`PredictionContext::predict_params`]).
    pub fn predict_params(
        &self,
        train: &[TrainObs],
        x: &[f64],
    ) -> Result<ModelParams, ForestError> {
        Ok(self.prediction_context(train)?.predict_params(x)?.params)
    }

    /// Out-of-sample log-likelihood: validation contributions at the
    /// locally fitted parameters, each subject evaluated at its own arm.
    pub fn oos_loglik(
        &self,
        train: &[TrainObs],
        validation: &[Subject],
    ) -> Result<f64, ForestError> {
        let ctx = self.prediction_context(train)?;
        let terms: Result<Vec<f64>, ForestError> = validation
            .par_iter()
            .map(|s| {
                let fit = ctx.predict_params(&s.covariates)?;
                Ok(loglik(&self.agg_basis, &fit.params, s)?)
            })
            .collect();
        Ok(terms?.iter().sum())
    }

    /// Out-of-bag log-likelihood over the training sample: each subject is
    /// predicted from the trees whose subsample excluded it. Subjects
    /// contained in every subsample are skipped.
    pub fn oob_loglik(&self, subjects: &[Subject]) -> Result<f64, ForestError> {
        let train = TrainObs::from_subjects(subjects);
        let ctx = self.prediction_context(&train)?;
        let membership = self.membership_masks();
        let terms: Result<Vec<f64>, ForestError> = subjects
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let trees: Vec<usize> = (0..self.trees.len())
                    .filter(|&b| !membership[b][i])
                    .collect();
                if trees.is_empty() {
                    return Ok(0.0);
                }
                let fit = ctx.predict_params_from_trees(&s.covariates, &trees)?;
                Ok(loglik(&self.agg_basis, &fit.params, s)?)
            })
            .collect();
        Ok(terms?.iter().sum())
    }

    fn membership_masks(&self) -> Vec<Vec<bool>> {
        self.subsamples
            .iter()
            .map(|sub| {
                let mut mask = vec![false; self.n_train];
                for &i in sub {
                    mask[i as usize] = true;
                }
                mask
            })
            .collect()
    }

    /// Likelihood-based permutation variable importance: mean per-tree drop
    /// in out-of-subsample log-likelihood (under the cached leaf models on
    /// the aggregation basis) when covariate `j` is permuted among the
    /// out-of-subsample observations.
    pub fn permutation_importance(
        &self,
        subjects: &[Subject],
        n_perm: usize,
        seed: u64,
    ) -> Result<Vec<f64>, ForestError> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n_vars = self.n_covariates;
        for s in subjects {
            self.check_x(&s.covariates)?;
        }
        let membership = self.membership_masks();
        let per_tree: Vec<Vec<f64>> = (0..self.trees.len())
            .into_par_iter()
            .map(|b| {
                let tree = &self.trees[b];
                let mut drop = vec![0.0; n_vars];
                let oob: Vec<usize> = (0..subjects.len())
                    .filter(|&i| i < self.n_train && !membership[b][i])
                    .collect();
                if oob.is_empty() {
                    return drop;
                }
                let leaf_ll = |leaf: usize, s: &Subject| -> f64 {
                    let theta = match &tree.nodes[leaf] {
                        TreeNode::Leaf { params: Some(p), .. } => p.clone(),
                        _ => self.root_params.clone(),
                    };
                    loglik(&self.agg_basis, &ModelParams::prognostic(theta), s)
                        .unwrap_or(f64::NEG_INFINITY)
                };
                let base: Vec<f64> = oob
                    .iter()
                    .map(|&i| leaf_ll(tree.descend(&subjects[i].covariates), &subjects[i]))
                    .collect();
                let used = tree.used_variables();
                for &j in &used {
                    for rep in 0..n_perm {
                        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(
                            seed,
                            ((b as u64) << 32) ^ ((j as u64) << 8) ^ rep as u64,
                        ));
                        let mut donors: Vec<usize> = oob.clone();
                        donors.shuffle(&mut rng);
                        // subjects whose contribution is non-finite under
                        // either leaf assignment are skipped pairwise
                        let diff: f64 = oob
                            .iter()
                            .zip(&donors)
                            .zip(&base)
                            .map(|((&i, &d), &base_i)| {
                                let mut x = subjects[i].covariates.clone();
                                x[j] = subjects[d].covariates[j];
                                let perm_i = leaf_ll(tree.descend(&x), &subjects[i]);
                                if base_i.is_finite() && perm_i.is_finite() {
                                    base_i - perm_i
                                } else {
                                    0.0
                                }
                            })
                            .sum();
                        drop[j] += diff / n_perm as f64;
                    }
                }
                drop
            })
            .collect();
        let mut importance = vec![0.0; n_vars];
        for tree_drop in &per_tree {
            for j in 0..n_vars {
                importance[j] += tree_drop[j] / self.trees.len() as f64;
            }
        }
        Ok(importance)
    }
}

impl<'a> PredictionContext<'a> {
    /// Weighted constrained refit at `x`, warm-started from the forest's
    /// unconditional fit. Predictive forests fit the time-varying
    /// treatment-deviation model.
    pub fn predict_params(&self, x: &[f64]) -> Result<FitResult, ForestError> {
        let trees: Vec<usize> = (0..self.forest.trees.len()).collect();
        self.predict_params_from_trees(x, &trees)
    }

    fn predict_params_from_trees(
        &self,
        x: &[f64],
        trees: &[usize],
    ) -> Result<FitResult, ForestError> {
        self.forest.check_x(x)?;
        let mut w = vec![0.0f64; self.forest.n_train];
        for &b in trees {
            let tree = &self.forest.trees[b];
            let leaf = tree.descend(x);
            for &i in tree.leaf_members(leaf) {
                w[i as usize] += 1.0;
            }
        }
        let warm = Some(self.forest.root_params.as_slice());
        let mut fit = if self.forest.is_predictive() && self.any_treatment {
            optim::fit_predictive_cached(
                &self.forest.agg_basis,
                &self.cache,
                &self.responses,
                &self.treated,
                &w,
                PredictiveMode::ThetaTr,
                &self.forest.config.fit,
                warm,
            )?
        } else {
            optim::fit_prognostic_cached(
                &self.forest.agg_basis,
                &self.cache,
                &self.responses,
                &w,
                &self.forest.config.fit,
                warm,
            )?
        };
        margin_monotone(&mut fit.params, &self.forest.agg_basis);
        Ok(fit)
    }
}

/// Survivor curve `S(t) = exp(-exp(z(t)))` on a positive grid; `arm`
/// selects the treated curve when the parameters carry treatment terms.
pub fn predict_survivor(
    params: &ModelParams,
    basis: &Basis,
    grid: &[f64],
    arm: Option<u8>,
) -> Result<Vec<f64>, ForestError> {
    let mut out = Vec::with_capacity(grid.len());
    let treated = arm == Some(1);
    for &t in grid {
        if !(t > 0.0) {
            return Err(BasisError::NonPositiveTime(t).into());
        }
        let a = basis.eval(t)?;
        let mut z: f64 = a.iter().zip(&params.theta).map(|(ak, th)| ak * th).sum();
        if treated {
            if let Some(b) = params.beta {
                z += b;
            }
            if let Some(tr) = &params.theta_tr {
                z += a.iter().zip(tr).map(|(ak, th)| ak * th).sum::<f64>();
            }
        }
        out.push((-z.exp()).exp());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Versioned on-disk model: configuration, support, subsamples, tree
/// structures with cached leaf parameters, the root fit, the training
/// responses needed by the weighted refits, and the covariate schema.
/// serde_json round-trips every f64 exactly (shortest-representation
/// encoding), so reloaded models reproduce predictions bitwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    /// Split statistic variant recorded for reproducibility.
    pub split_statistic: String,
    pub covariate_names: Vec<String>,
    pub train: Vec<TrainObs>,
    pub forest: Forest,
}

impl ModelFile {
    pub fn new(forest: Forest, train: Vec<TrainObs>, covariate_names: Vec<String>) -> Self {
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            split_statistic: "quad".to_string(),
            covariate_names,
            train,
            forest,
        }
    }

    pub fn to_json(&self) -> Result<String, ForestError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ForestError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ForestError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ForestError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::Mtry;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exp_subjects(n: usize, seed: u64, n_cov: usize) -> Vec<Subject> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let cov: Vec<f64> = (0..n_cov).map(|_| rng.random()).collect();
                let e: f64 = -(1.0 - rng.random::<f64>()).ln();
                Subject::new(SurvResponse::Exact(e), cov)
            })
            .collect()
    }

    fn small_config(spec: &str, n_trees: usize, seed: u64) -> ForestConfig {
        let mut cfg = ForestConfig::new(spec.parse().unwrap());
        cfg.n_trees = n_trees;
        cfg.master_seed = seed;
        cfg.tree.mtry = Mtry::All;
        cfg
    }

    #[test]
    fn depth_zero_forest_reduces_to_unconditional() {
        let subjects = exp_subjects(100, 1, 2);
        let mut cfg = small_config("Bs-theta", 1, 9);
        cfg.subsample_fraction = 1.0;
        cfg.tree.max_depth = 0;
        let forest = grow_forest(&subjects, &cfg).unwrap();
        let uncond =
            optim::fit_unconditional(&forest.agg_basis, &subjects, &cfg.fit).unwrap();
        let train = TrainObs::from_subjects(&subjects);

        // weights: every subject is in the subsample and the single leaf
        let w = forest.weights(&subjects[7].covariates).unwrap();
        assert!(w.iter().all(|&c| c == 1));

        let p = forest.predict_params(&train, &subjects[7].covariates).unwrap();
        for (a, b) in p.theta.iter().zip(&uncond.params.theta) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }

        // oos equals the unconditional validation log-likelihood
        let valid = exp_subjects(50, 2, 2);
        let oos = forest.oos_loglik(&train, &valid).unwrap();
        let direct: f64 = valid
            .iter()
            .map(|s| loglik(&forest.agg_basis, &uncond.params, s).unwrap())
            .sum();
        assert!((oos - direct).abs() < 1e-6, "{oos} vs {direct}");

        // duplicated validation set doubles the value exactly
        let mut doubled = valid.clone();
        doubled.extend(valid.iter().cloned());
        let oos2 = forest.oos_loglik(&train, &doubled).unwrap();
        assert_relative_eq!(oos2, 2.0 * oos, max_relative = 1e-12);
    }

    #[test]
    fn weight_identities() {
        let subjects = exp_subjects(120, 3, 3);
        let mut cfg = small_config("W-alpha", 10, 4);
        cfg.tree.min_node = 10;
        let forest = grow_forest(&subjects, &cfg).unwrap();
        let x = &subjects[5].covariates;
        let w = forest.weights(x).unwrap();
        assert!(w.iter().all(|&c| c as usize <= forest.trees.len()));
        // sum of weights equals the summed sizes of x's leaves
        let expected: usize = forest
            .trees
            .iter()
            .map(|t| t.leaf_members(t.descend(x)).len())
            .sum();
        assert_eq!(w.iter().map(|&c| c as usize).sum::<usize>(), expected);
        // mismatched covariate length
        assert!(matches!(
            forest.weights(&[0.0; 7]),
            Err(ForestError::CovariateMismatch { .. })
        ));
    }

    #[test]
    fn stratified_subsample_counts() {
        // 40% treated, N = 250: ceil(.632 * 250) = 158 with 63-64 treated
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let subjects: Vec<Subject> = (0..250)
            .map(|i| {
                let arm = u8::from(i < 100);
                let e: f64 = -(1.0 - rng.random::<f64>()).ln();
                Subject::with_treatment(SurvResponse::Exact(e), vec![rng.random()], arm)
            })
            .collect();
        let cfg = small_config("W-alpha-beta", 20, 5);
        assert!(cfg.stratify_by_treatment);
        let arms: Vec<u8> = subjects.iter().map(|s| s.treatment.unwrap()).collect();
        let subs = draw_subsamples(250, Some(&arms), &cfg);
        for sub in &subs {
            assert_eq!(sub.len(), 158);
            let treated = sub.iter().filter(|&&i| arms[i as usize] == 1).count();
            assert!(
                treated == 63 || treated == 64,
                "treated count {treated} in subsample"
            );
        }
    }

    #[test]
    fn forest_is_deterministic() {
        let subjects = exp_subjects(100, 21, 2);
        let mut cfg = small_config("Bs-alpha", 5, 77);
        cfg.tree.min_node = 10;
        let f1 = grow_forest(&subjects, &cfg).unwrap();
        let f2 = grow_forest(&subjects, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&f1).unwrap(),
            serde_json::to_string(&f2).unwrap()
        );
    }

    #[test]
    fn two_clusters_recover_their_own_laws() {
        // x in {0, 1}-ish clusters with different Weibull laws; local
        // prediction at a cluster center tracks that cluster's own fit
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut subjects = Vec::new();
        for i in 0..500 {
            let cluster = i % 2;
            let x = 0.8 * cluster as f64 + 0.2 * rng.random::<f64>();
            let e: f64 = -(1.0 - rng.random::<f64>()).ln();
            // cluster 0: unit exponential; cluster 1: scale shift
            let t = if cluster == 0 { e } else { e * (2.0f64).exp() };
            subjects.push(Subject::new(SurvResponse::Exact(t), vec![x]));
        }
        let mut cfg = small_config("Bs-theta", 100, 12);
        cfg.tree.min_node = 40;
        let forest = grow_forest(&subjects, &cfg).unwrap();
        let train = TrainObs::from_subjects(&subjects);
        let ctx = forest.prediction_context(&train).unwrap();

        let cluster_a: Vec<Subject> = subjects.iter().filter(|s| s.covariates[0] < 0.5).cloned().collect();
        let own = optim::fit_unconditional(&forest.agg_basis, &cluster_a, &cfg.fit).unwrap();
        let local = ctx.predict_params(&[0.1]).unwrap();
        let grid: Vec<f64> = (1..=40).map(|k| 0.2 * k as f64).collect();
        let s_local = predict_survivor(&local.params, &forest.agg_basis, &grid, None).unwrap();
        let s_own = predict_survivor(&own.params, &forest.agg_basis, &grid, None).unwrap();
        let sup: f64 = s_local
            .iter()
            .zip(&s_own)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(sup < 0.1, "sup distance {sup}");
    }

    #[test]
    fn predictive_null_effect_has_small_arm_gap() {
        // treatment independent of outcome: predicted arm curves nearly agree
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let subjects: Vec<Subject> = (0..500)
            .map(|_| {
                let arm = u8::from(rng.random::<f64>() < 0.5);
                let e: f64 = -(1.0 - rng.random::<f64>()).ln();
                Subject::with_treatment(SurvResponse::Exact(e), vec![rng.random()], arm)
            })
            .collect();
        let mut cfg = small_config("Bs-theta-thetatr", 250, 3);
        cfg.tree.min_node = 20;
        let forest = grow_forest(&subjects, &cfg).unwrap();
        let train = TrainObs::from_subjects(&subjects);
        let ctx = forest.prediction_context(&train).unwrap();
        let grid: Vec<f64> = (1..=30).map(|k| 0.15 * k as f64).collect();
        let mut gap_total = 0.0;
        let queries = [0.1, 0.3, 0.5, 0.7, 0.9];
        for &xq in &queries {
            let fit = ctx.predict_params(&[xq]).unwrap();
            let s0 = predict_survivor(&fit.params, &forest.agg_basis, &grid, Some(0)).unwrap();
            let s1 = predict_survivor(&fit.params, &forest.agg_basis, &grid, Some(1)).unwrap();
            let mean_gap: f64 = s0
                .iter()
                .zip(&s1)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / grid.len() as f64;
            gap_total += mean_gap / queries.len() as f64;
        }
        assert!(gap_total < 0.05, "average arm gap {gap_total}");
    }

    #[test]
    fn survivor_curve_values_and_monotonicity() {
        let p = ModelParams::prognostic(vec![0.0, 1.0]);
        let s = predict_survivor(&p, &Basis::weibull(), &[1.0, 2.0, 4.0], None).unwrap();
        assert_relative_eq!(s[0], (-1.0f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(s[1], (-2.0f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(s[2], (-4.0f64).exp(), epsilon = 1e-12);
        for w in s.windows(2) {
            assert!(w[1] <= w[0]);
        }
        // null theta_tr: identical arm curves
        let ptr = ModelParams::with_theta_tr(vec![0.0, 1.0], vec![0.0, 0.0]);
        let a0 = predict_survivor(&ptr, &Basis::weibull(), &[0.5, 1.5], Some(0)).unwrap();
        let a1 = predict_survivor(&ptr, &Basis::weibull(), &[0.5, 1.5], Some(1)).unwrap();
        assert_eq!(a0, a1);
        assert!(predict_survivor(&p, &Basis::weibull(), &[0.0], None).is_err());
    }

    #[test]
    fn unused_variable_importance_is_exactly_zero() {
        // a constant column can never be split on
        let mut subjects = exp_subjects(150, 51, 2);
        for s in subjects.iter_mut() {
            s.covariates.push(1.0);
        }
        let mut cfg = small_config("W-theta", 10, 6);
        cfg.tree.min_node = 15;
        let forest = grow_forest(&subjects, &cfg).unwrap();
        let imp = forest.permutation_importance(&subjects, 1, 99).unwrap();
        assert_eq!(imp.len(), 3);
        assert_eq!(imp[2], 0.0);
    }

    #[test]
    fn strong_signal_dominates_importance() {
        let mut top = 0;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
            let subjects: Vec<Subject> = (0..250)
                .map(|_| {
                    let cov: Vec<f64> = (0..5).map(|_| rng.random()).collect();
                    let e: f64 = -(1.0 - rng.random::<f64>()).ln();
                    let t = e * (-2.0 * cov[0]).exp();
                    Subject::new(SurvResponse::Exact(t), cov)
                })
                .collect();
            let mut cfg = small_config("W-theta", 60, 100 + seed);
            cfg.tree.min_node = 20;
            let forest = grow_forest(&subjects, &cfg).unwrap();
            let imp = forest.permutation_importance(&subjects, 2, seed).unwrap();
            let best = imp
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            if best == 0 {
                top += 1;
            }
        }
        assert!(top >= 9, "signal variable ranked first in {top}/10 runs");
    }

    #[test]
    fn model_file_roundtrip_is_bitwise() {
        let subjects = exp_subjects(90, 61, 2);
        let mut cfg = small_config("Bs-theta", 4, 13);
        cfg.tree.min_node = 10;
        let forest = grow_forest(&subjects, &cfg).unwrap();
        let train = TrainObs::from_subjects(&subjects);
        let model = ModelFile::new(forest, train.clone(), vec!["x0".into(), "x1".into()]);
        let json = model.to_json().unwrap();
        let reloaded = ModelFile::from_json(&json).unwrap();
        assert_eq!(json, reloaded.to_json().unwrap());
        // reloaded predictions match bitwise
        for q in [[0.2, 0.8], [0.5, 0.5], [0.9, 0.1]] {
            let a = model.forest.predict_params(&train, &q).unwrap();
            let b = reloaded.forest.predict_params(&reloaded.train, &q).unwrap();
            assert_eq!(a.theta, b.theta);
        }
    }

    #[test]
    fn too_small_dataset_is_rejected() {
        let subjects = exp_subjects(20, 71, 1);
        let cfg = small_config("W-alpha", 2, 1);
        // ceil(.632 * 20) = 13 < 2 * 20
        assert!(matches!(
            grow_forest(&subjects, &cfg),
            Err(ForestError::DatasetTooSmall { .. })
        ));
    }

    #[test]
    fn predictive_forest_requires_treatments() {
        let subjects = exp_subjects(100, 81, 2);
        let cfg = small_config("W-alpha-beta", 2, 1);
        assert!(matches!(
            grow_forest(&subjects, &cfg),
            Err(ForestError::MissingTreatment)
        ));
    }
}
