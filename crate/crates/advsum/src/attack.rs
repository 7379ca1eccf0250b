//! Joint site-selection and site-perturbation attack on the surrogate.
//!
//! The discrete problem — pick at most `k` sites and one vocabulary token per
//! picked site so that the classifier's cross-entropy on the true label is
//! maximized — is relaxed to continuous variables: a selection weight
//! `z_s ∈ [0,1]` per site and a simplex vector `u_s` over the vocabulary per
//! site. Each position of the augmented program (the original stream with
//! every insert template spliced in) becomes a weighted mixture row:
//!
//! - fixed token: one-hot, mass 1;
//! - replace-site occurrence: `(1−z_s)·onehot(orig) + z_s·u_s`, mass 1;
//! - insert-template fixed token: `z_s·onehot(tok)`, mass `z_s`;
//! - insert-template slot: `z_s·u_s`, mass `z_s`.
//!
//! At `z = 0` the mixture evaluates the clean program exactly; at binary `z`
//! and one-hot `u` it evaluates the discretely perturbed program exactly. In
//! between, mass-weighted mean pooling keeps the loss differentiable in
//! `(z, u)`, and [`MixtureEvaluator`] computes those gradients analytically.
//!
//! [`optimize`] runs projected gradient ascent (optionally with randomized
//! smoothing, which averages gradients at Gaussian-jittered variables), and
//! after every iteration discretizes the relaxed variables into a concrete
//! [`PerturbationPlan`], scores it with the real discrete loss, and keeps the
//! best plan seen. The best-so-far candidate starts at the empty plan, so the
//! result never falls below the clean loss. [`brute_force`] provides the
//! exact discrete optimum for tiny instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{mix_seed, CodeSnippet, LabelSet, Vocabulary};
use crate::surrogate::{
    argmax, forward_pooled, loss_tokens, pooled_gradient, predict_tokens, ModelParams,
    SurrogateError,
};
use crate::transforms::{
    apply_plan, extract_sites, is_identifier, validate_plan, Assignment, PerturbSite,
    PerturbationPlan, PerturbedSnippet, RowKind, SiteKind, SlotProgram, TransformError,
    TEMPLATE_TOKENS,
};

/// Errors from attack construction and search.
#[derive(Debug, Error)]
pub enum AttackError {
    #[error("snippet label `{0}` is not in the label set")]
    UnknownLabel(String),
    #[error("brute-force budget exceeded: instance requires {required} evaluations, budget {budget}")]
    BudgetExceeded { required: u128, budget: u128 },
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
}

/// Attack hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Maximum number of perturbed sites (the budget `1ᵀz ≤ k`).
    pub k: usize,
    /// Projected-ascent iterations.
    pub iters: usize,
    /// Constant ascent step size.
    pub step: f64,
    /// Randomized-smoothing sample count `m` (0 disables smoothing).
    pub smooth_samples: usize,
    /// Randomized-smoothing noise scale `σ`.
    pub smooth_sigma: f64,
    /// Cap on insert sites considered per snippet (search budget only;
    /// validation always accepts the full site universe).
    pub max_insert_slots: usize,
    /// Seed for initialization noise, smoothing draws, and sampled rounding.
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            k: 5,
            iters: 100,
            step: 5.0,
            smooth_samples: 10,
            smooth_sigma: 0.1,
            max_insert_slots: 8,
            seed: 0,
        }
    }
}

/// The relaxed optimization variables: one selection weight and one
/// vocabulary distribution per site.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackVars {
    /// Selection weights, one per site, each in `[0, 1]`.
    pub z: Vec<f64>,
    /// Token distributions, one per site, each length |Ω| on the simplex
    /// (coordinates outside the site's valid-token mask pinned to zero).
    pub u: Vec<Vec<f64>>,
}

/// Outcome of one attack run.
#[derive(Clone, Debug)]
pub struct AttackResult {
    /// Best discrete plan found (possibly empty).
    pub plan: PerturbationPlan,
    /// The snippet with `plan` applied.
    pub perturbed: PerturbedSnippet,
    /// Surrogate cross-entropy on the clean snippet.
    pub clean_loss: f64,
    /// Surrogate cross-entropy on `perturbed` (the best discrete loss found).
    pub adv_loss: f64,
    /// Whether the surrogate's argmax on `perturbed` differs from the truth.
    pub success: bool,
    /// Best-so-far discrete loss after each iteration (non-decreasing).
    pub trace: Vec<f64>,
}

/// Tokens the attack needs in the vocabulary beyond the corpus itself: the
/// insert-template constants and both boolean literals.
#[must_use]
pub fn vocabulary_extras() -> Vec<String> {
    let mut extras: Vec<String> = TEMPLATE_TOKENS.iter().map(|&t| t.to_owned()).collect();
    extras.push("true".to_owned());
    extras
}

/// Top-k selection: a boolean vector marking the `min(k, n)` largest scores,
/// ties broken toward the lowest index.
#[must_use]
pub fn project_topk(scores: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut selected = vec![false; scores.len()];
    for &i in order.iter().take(k) {
        selected[i] = true;
    }
    selected
}

/// Euclidean projection onto the probability simplex (sorted-threshold
/// construction). Inputs already on the simplex pass through unchanged.
#[must_use]
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "cannot project an empty vector");
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &s) in sorted.iter().enumerate() {
        cumsum += s;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if s - candidate > 0.0 {
            tau = candidate;
        }
    }
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

/// Simplex projection restricted to the coordinates allowed by `mask`; all
/// other coordinates are pinned to zero. A mask with no allowed coordinates
/// yields the zero vector.
#[must_use]
pub fn project_simplex_masked(v: &[f64], mask: &[bool]) -> Vec<f64> {
    debug_assert_eq!(v.len(), mask.len());
    let sub: Vec<f64> = v
        .iter()
        .zip(mask)
        .filter_map(|(&x, &m)| m.then_some(x))
        .collect();
    if sub.is_empty() {
        return vec![0.0; v.len()];
    }
    let projected = project_simplex(&sub);
    let mut out = vec![0.0; v.len()];
    let mut it = projected.into_iter();
    for (o, &m) in out.iter_mut().zip(mask) {
        if m {
            *o = it.next().expect("one projected entry per masked coord");
        }
    }
    out
}

/// The vocabulary tokens a site may legally be assigned, as a mask over Ω:
/// boolean literals for boolean sites; fresh (not occurring in the snippet)
/// identifiers for renames; any identifier for insert fillers.
#[must_use]
pub fn site_token_mask(site: &PerturbSite, snippet: &CodeSnippet, vocab: &Vocabulary) -> Vec<bool> {
    let existing: std::collections::HashSet<&str> =
        snippet.tokens.iter().map(String::as_str).collect();
    (0..vocab.len())
        .map(|j| {
            let token = vocab.token(j).expect("index within vocabulary");
            match site.kind {
                SiteKind::ReplaceBoolLiteral => token == "true" || token == "false",
                SiteKind::RenameLocalVar | SiteKind::RenameParam | SiteKind::RenameField => {
                    is_identifier(token) && !existing.contains(token)
                }
                SiteKind::InsertPrint | SiteKind::InsertDeadCode => is_identifier(token),
            }
        })
        .collect()
}

/// Pre-resolved row of a [`SlotProgram`] (token strings mapped to vocabulary
/// indices once, up front).
enum PreRow {
    Fixed(usize),
    Replace { site: usize, orig: usize },
    InsertFixed { site: usize, token: usize },
    InsertSlot { site: usize },
}

/// Differentiable loss of the relaxed mixture over a [`SlotProgram`].
///
/// Evaluation never materializes the dense row matrix: per site it needs only
/// `u_s·E` and `Σ u_s`, and the gradient reuses the shared per-row input
/// gradient of the surrogate (see [`crate::surrogate::grad_input_base`]).
pub struct MixtureEvaluator<'a> {
    params: &'a ModelParams,
    label_index: usize,
    rows: Vec<PreRow>,
    site_count: usize,
}

/// Loss and gradients of one relaxed evaluation.
#[derive(Clone, Debug)]
pub struct MixtureEval {
    pub loss: f64,
    pub grad_z: Vec<f64>,
    pub grad_u: Vec<Vec<f64>>,
}

impl<'a> MixtureEvaluator<'a> {
    /// Resolves the program's tokens against the vocabulary (unknown tokens
    /// map to the sentinel index).
    #[must_use]
    pub fn new(
        program: &SlotProgram,
        params: &'a ModelParams,
        vocab: &Vocabulary,
        label_index: usize,
    ) -> Self {
        let rows = program
            .rows
            .iter()
            .map(|r| match r {
                RowKind::Fixed { token } => PreRow::Fixed(vocab.index_or_sentinel(token)),
                RowKind::ReplaceSlot { site, token } => PreRow::Replace {
                    site: *site,
                    orig: vocab.index_or_sentinel(token),
                },
                RowKind::InsertFixed { site, token } => PreRow::InsertFixed {
                    site: *site,
                    token: vocab.index_or_sentinel(token),
                },
                RowKind::InsertSlot { site } => PreRow::InsertSlot { site: *site },
            })
            .collect();
        MixtureEvaluator {
            params,
            label_index,
            rows,
            site_count: program.sites.len(),
        }
    }

    /// Pooled embedding and total mass of the mixture at `vars`.
    ///
    /// Zero-weight contributions are skipped rather than multiplied in, so at
    /// `z = 0` the arithmetic is identical to pooling the clean stream, and at
    /// binary `z` with one-hot `u` it is identical to pooling the discretely
    /// perturbed stream.
    fn pool(&self, vars: &AttackVars) -> (Vec<f64>, f64) {
        let params = self.params;
        let d = params.hidden_w.rows;
        // Per-site u_s·E and Σ u_s, shared by every row reading site s.
        let mut ue = vec![vec![0.0; d]; self.site_count];
        let mut usum = vec![0.0; self.site_count];
        for s in 0..self.site_count {
            for (j, &w) in vars.u[s].iter().enumerate() {
                if w != 0.0 {
                    usum[s] += w;
                    let e_row = params.embed.row(j);
                    for (e, acc) in ue[s].iter_mut().enumerate() {
                        *acc += w * e_row[e];
                    }
                }
            }
        }
        let mut pooled = vec![0.0; d];
        let mut mass = 0.0;
        let add = |dst: &mut [f64], weight: f64, src: &[f64]| {
            if weight == 1.0 {
                for (a, &b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            } else if weight != 0.0 {
                for (a, &b) in dst.iter_mut().zip(src) {
                    *a += weight * b;
                }
            }
        };
        for row in &self.rows {
            match *row {
                PreRow::Fixed(t) => {
                    add(&mut pooled, 1.0, params.embed.row(t));
                    mass += 1.0;
                }
                PreRow::Replace { site, orig } => {
                    let z = vars.z[site];
                    add(&mut pooled, 1.0 - z, params.embed.row(orig));
                    add(&mut pooled, z, &ue[site]);
                    mass += 1.0 - z;
                    if z != 0.0 {
                        mass += z * usum[site];
                    }
                }
                PreRow::InsertFixed { site, token } => {
                    let z = vars.z[site];
                    add(&mut pooled, z, params.embed.row(token));
                    if z != 0.0 {
                        mass += z;
                    }
                }
                PreRow::InsertSlot { site } => {
                    let z = vars.z[site];
                    add(&mut pooled, z, &ue[site]);
                    if z != 0.0 {
                        mass += z * usum[site];
                    }
                }
            }
        }
        // Projected iterates always have mass ≥ 1 (every original position
        // contributes 1), but smoothing evaluates at jittered, unprojected
        // points where the mass can cross zero; keep the extended loss
        // finite there.
        if mass.abs() < 1e-9 {
            mass = 1e-9;
        }
        for p in &mut pooled {
            *p /= mass;
        }
        (pooled, mass)
    }

    /// Cross-entropy of the relaxed mixture at `vars`.
    #[must_use]
    pub fn loss(&self, vars: &AttackVars) -> f64 {
        let (pooled, _) = self.pool(vars);
        -forward_pooled(self.params, &pooled).probs[self.label_index].ln()
    }

    /// Loss plus exact analytic gradients with respect to every `z_s` and
    /// every `u_s` coordinate.
    #[must_use]
    pub fn evaluate(&self, vars: &AttackVars) -> MixtureEval {
        let params = self.params;
        let (pooled, mass) = self.pool(vars);
        let fwd = forward_pooled(params, &pooled);
        let loss = -fwd.probs[self.label_index].ln();
        let g = pooled_gradient(params, &fwd, self.label_index);
        let dot_pooled: f64 = pooled.iter().zip(&g).map(|(a, b)| a * b).sum();
        // Shared per-row input gradient: w[j] = ∂loss/∂(row weight on token j),
        // identical for every row because pooling is a mass-weighted mean.
        let w: Vec<f64> = (0..params.vocab_size())
            .map(|j| {
                let dot: f64 = params.embed.row(j).iter().zip(&g).map(|(a, b)| a * b).sum();
                (dot - dot_pooled) / mass
            })
            .collect();
        let uw: Vec<f64> = (0..self.site_count)
            .map(|s| vars.u[s].iter().zip(&w).map(|(a, b)| a * b).sum())
            .collect();

        let mut grad_z = vec![0.0; self.site_count];
        // How many rows read each site's u: that multiplicity scales ∂/∂u.
        let mut slot_rows = vec![0usize; self.site_count];
        for row in &self.rows {
            match *row {
                PreRow::Fixed(_) => {}
                PreRow::Replace { site, orig } => {
                    grad_z[site] += uw[site] - w[orig];
                    slot_rows[site] += 1;
                }
                PreRow::InsertFixed { site, token } => {
                    grad_z[site] += w[token];
                }
                PreRow::InsertSlot { site } => {
                    grad_z[site] += uw[site];
                    slot_rows[site] += 1;
                }
            }
        }
        let grad_u = (0..self.site_count)
            .map(|s| {
                let scale = slot_rows[s] as f64 * vars.z[s];
                w.iter().map(|&wj| scale * wj).collect()
            })
            .collect();
        MixtureEval {
            loss,
            grad_z,
            grad_u,
        }
    }
}

/// Standard normal draw via Box–Muller.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Randomized-smoothing gradient over an arbitrary gradient function: the
/// average of `m` gradients evaluated at the variables plus zero-mean
/// Gaussian noise of scale `σ` (noise applied pre-projection, to every `z`
/// and `u` coordinate). With `σ = 0` this is the plain gradient.
pub fn smoothed_grad_with<F>(
    mut grad_fn: F,
    vars: &AttackVars,
    m: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<Vec<f64>>)
where
    F: FnMut(&AttackVars) -> (Vec<f64>, Vec<Vec<f64>>),
{
    if m == 0 || sigma == 0.0 {
        return grad_fn(vars);
    }
    let mut acc_z = vec![0.0; vars.z.len()];
    let mut acc_u: Vec<Vec<f64>> = vars.u.iter().map(|u| vec![0.0; u.len()]).collect();
    for _ in 0..m {
        let mut jittered = vars.clone();
        for z in &mut jittered.z {
            *z += sigma * gaussian(rng);
        }
        for u in &mut jittered.u {
            for x in u {
                *x += sigma * gaussian(rng);
            }
        }
        let (gz, gu) = grad_fn(&jittered);
        for (a, b) in acc_z.iter_mut().zip(&gz) {
            *a += b;
        }
        for (au, bu) in acc_u.iter_mut().zip(&gu) {
            for (a, b) in au.iter_mut().zip(bu) {
                *a += b;
            }
        }
    }
    let inv = 1.0 / m as f64;
    for a in &mut acc_z {
        *a *= inv;
    }
    for au in &mut acc_u {
        for a in au {
            *a *= inv;
        }
    }
    (acc_z, acc_u)
}

/// Smoothed gradient of the mixture loss (see [`smoothed_grad_with`]).
#[must_use]
pub fn smoothed_grad(
    evaluator: &MixtureEvaluator<'_>,
    vars: &AttackVars,
    m: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    smoothed_grad_with(
        |v| {
            let eval = evaluator.evaluate(v);
            (eval.grad_z, eval.grad_u)
        },
        vars,
        m,
        sigma,
        rng,
    )
}

/// Greedily turns relaxed variables into a concrete plan: sites are taken in
/// descending-`z` order from the top-k selection, each assigned its chosen
/// token. Assignments that would invalidate the partial plan (a rename token
/// already claimed, or a second template at the same (gap, ordinal)) fall
/// back to the site's next-best token, or drop the site.
fn round_plan(
    sites: &[PerturbSite],
    masks: &[Vec<bool>],
    z: &[f64],
    mut pick_token: impl FnMut(usize) -> Vec<usize>,
    k: usize,
    vocab: &Vocabulary,
) -> PerturbationPlan {
    let selected = project_topk(z, k);
    let mut order: Vec<usize> = (0..sites.len()).filter(|&s| selected[s]).collect();
    order.sort_by(|&a, &b| {
        z[b].partial_cmp(&z[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut used_rename: std::collections::HashSet<usize> = std::collections::HashSet::new();
    let mut used_gap: std::collections::HashSet<(usize, usize)> = std::collections::HashSet::new();
    let mut assignments = Vec::new();
    for s in order {
        let site = &sites[s];
        if !site.kind.is_replace() && !used_gap.insert((site.gap(), site.ordinal)) {
            continue;
        }
        let is_rename = matches!(
            site.kind,
            SiteKind::RenameLocalVar | SiteKind::RenameParam | SiteKind::RenameField
        );
        let choice = pick_token(s).into_iter().find(|&j| {
            debug_assert!(masks[s][j]);
            !(is_rename && used_rename.contains(&j))
        });
        let Some(j) = choice else { continue };
        if is_rename {
            used_rename.insert(j);
        }
        assignments.push(Assignment {
            site: site.clone(),
            token: vocab.token(j).expect("masked index in vocab").to_owned(),
        });
    }
    PerturbationPlan { assignments }
}

/// Valid token indices of site `s` sorted by descending `u` weight (ties to
/// the lowest index).
fn tokens_by_weight(masks: &[Vec<bool>], u: &[Vec<f64>], s: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = masks[s]
        .iter()
        .enumerate()
        .filter_map(|(j, &m)| m.then_some(j))
        .collect();
    idx.sort_by(|&a, &b| {
        u[s][b]
            .partial_cmp(&u[s][a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Valid token indices of site `s` with one sampled from the `u` distribution
/// moved to the front (the rest keep weight order as fallbacks).
fn tokens_by_sample(
    masks: &[Vec<bool>],
    u: &[Vec<f64>],
    s: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut idx = tokens_by_weight(masks, u, s);
    let total: f64 = idx.iter().map(|&j| u[s][j]).sum();
    if total > 0.0 {
        let mut draw = rng.gen_range(0.0..total);
        let mut picked = 0usize;
        for (pos, &j) in idx.iter().enumerate() {
            draw -= u[s][j];
            if draw <= 0.0 {
                picked = pos;
                break;
            }
        }
        let j = idx.remove(picked);
        idx.insert(0, j);
    }
    idx
}

/// Projected gradient ascent on the relaxed mixture with per-iteration
/// discretization and best-so-far retention.
///
/// The caller supplies the candidate sites (normally
/// [`extract_sites`](crate::transforms::extract_sites) under the configured
/// insert cap) and is expected to attack only snippets the surrogate
/// classifies correctly. With zero usable sites the result is degenerate:
/// empty plan, `adv_loss == clean_loss`, empty trace.
pub fn optimize(
    params: &ModelParams,
    snippet: &CodeSnippet,
    sites: &[PerturbSite],
    vocab: &Vocabulary,
    labels: &LabelSet,
    config: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    let label_index = labels
        .lookup(&snippet.label)
        .ok_or_else(|| AttackError::UnknownLabel(snippet.label.clone()))?;
    let clean_indices: Vec<usize> = snippet
        .tokens
        .iter()
        .map(|t| vocab.index_or_sentinel(t))
        .collect();
    let clean_loss = loss_tokens(params, &clean_indices, label_index);

    // Sites with at least one legal token; the rest cannot be assigned.
    let mut usable: Vec<PerturbSite> = Vec::new();
    let mut masks: Vec<Vec<bool>> = Vec::new();
    for site in sites {
        let mask = site_token_mask(site, snippet, vocab);
        if mask.iter().any(|&m| m) {
            usable.push(site.clone());
            masks.push(mask);
        }
    }

    let finish = |plan: PerturbationPlan,
                  adv_loss: f64,
                  trace: Vec<f64>|
     -> Result<AttackResult, AttackError> {
        let perturbed = apply_plan(snippet, &plan, vocab)?;
        let indices: Vec<usize> = perturbed
            .tokens
            .iter()
            .map(|t| vocab.index_or_sentinel(t))
            .collect();
        let success = argmax(&predict_tokens(params, &indices)) != label_index;
        Ok(AttackResult {
            plan,
            perturbed,
            clean_loss,
            adv_loss,
            success,
            trace,
        })
    };

    if usable.is_empty() {
        return finish(PerturbationPlan::empty(), clean_loss, Vec::new());
    }

    let program = crate::transforms::instantiate_slots(snippet, &usable)?;
    let evaluator = MixtureEvaluator::new(&program, params, vocab, label_index);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let n = usable.len();
    let mut vars = AttackVars {
        z: vec![(config.k as f64 / n as f64).min(1.0); n],
        u: masks
            .iter()
            .map(|mask| {
                let count = mask.iter().filter(|&&m| m).count();
                let w = 1.0 / count as f64;
                mask.iter().map(|&m| if m { w } else { 0.0 }).collect()
            })
            .collect(),
    };

    let mut best_plan = PerturbationPlan::empty();
    let mut best_loss = clean_loss;
    let mut trace = Vec::with_capacity(config.iters);

    for _ in 0..config.iters {
        let (gz, gu) = smoothed_grad(
            &evaluator,
            &vars,
            config.smooth_samples,
            config.smooth_sigma,
            &mut rng,
        );
        for (z, g) in vars.z.iter_mut().zip(&gz) {
            *z = (*z + config.step * g).clamp(0.0, 1.0);
        }
        for s in 0..n {
            for (j, valid) in masks[s].iter().enumerate() {
                if *valid {
                    vars.u[s][j] += config.step * gu[s][j];
                }
            }
            vars.u[s] = project_simplex_masked(&vars.u[s], &masks[s]);
        }

        // Deterministic rounding plus one sampled rounding; both scored with
        // the true discrete loss.
        let deterministic = round_plan(
            &usable,
            &masks,
            &vars.z,
            |s| tokens_by_weight(&masks, &vars.u, s),
            config.k,
            vocab,
        );
        let sampled = round_plan(
            &usable,
            &masks,
            &vars.z,
            |s| tokens_by_sample(&masks, &vars.u, s, &mut rng),
            config.k,
            vocab,
        );

        for plan in [deterministic, sampled] {
            if plan.is_empty() {
                continue;
            }
            let perturbed = apply_plan(snippet, &plan, vocab)?;
            let indices: Vec<usize> = perturbed
                .tokens
                .iter()
                .map(|t| vocab.index_or_sentinel(t))
                .collect();
            let loss = loss_tokens(params, &indices, label_index);
            if loss > best_loss {
                best_loss = loss;
                best_plan = plan;
            }
        }
        trace.push(best_loss);
    }

    finish(best_plan, best_loss, trace)
}

/// Result of an exhaustive search.
#[derive(Clone, Debug)]
pub struct BruteForceOutcome {
    /// The lexicographically first plan attaining the optimum.
    pub plan: PerturbationPlan,
    /// The optimal discrete loss (≥ the clean loss: the empty plan is always
    /// in the search space).
    pub loss: f64,
    /// Number of valid candidate plans evaluated (including the empty plan).
    pub evaluated: usize,
}

/// Exhaustive maximization of the discrete loss over every site subset of
/// size ≤ k and every token assignment from `vocab_subset`.
///
/// The combinatorial size `Σ_{j≤k} C(n,j)·|subset|^j` must not exceed
/// `budget` (use 1e6); larger instances are refused with the computed size.
/// Candidates that fail plan validation are skipped without being counted.
pub fn brute_force(
    params: &ModelParams,
    snippet: &CodeSnippet,
    sites: &[PerturbSite],
    k: usize,
    vocab_subset: &[String],
    vocab: &Vocabulary,
    labels: &LabelSet,
    budget: u128,
) -> Result<BruteForceOutcome, AttackError> {
    let label_index = labels
        .lookup(&snippet.label)
        .ok_or_else(|| AttackError::UnknownLabel(snippet.label.clone()))?;
    let n = sites.len();
    let v = vocab_subset.len() as u128;
    let mut required: u128 = 0;
    for j in 0..=k.min(n) {
        required = required.saturating_add(binomial(n, j).saturating_mul(v.saturating_pow(j as u32)));
    }
    if required > budget {
        return Err(AttackError::BudgetExceeded { required, budget });
    }

    let score = |plan: &PerturbationPlan| -> Result<Option<f64>, AttackError> {
        if validate_plan(snippet, plan, vocab).is_err() {
            return Ok(None);
        }
        let perturbed = apply_plan(snippet, plan, vocab)?;
        let indices: Vec<usize> = perturbed
            .tokens
            .iter()
            .map(|t| vocab.index_or_sentinel(t))
            .collect();
        Ok(Some(loss_tokens(params, &indices, label_index)))
    };

    let mut best_plan = PerturbationPlan::empty();
    let mut best_loss = score(&best_plan)?.expect("empty plan is always valid");
    let mut evaluated = 1usize;

    for j in 1..=k.min(n) {
        let mut combo: Vec<usize> = (0..j).collect();
        loop {
            // Odometer over token choices for the current site combination.
            let mut digits = vec![0usize; j];
            'assignments: loop {
                let plan = PerturbationPlan {
                    assignments: combo
                        .iter()
                        .zip(&digits)
                        .map(|(&s, &d)| Assignment {
                            site: sites[s].clone(),
                            token: vocab_subset[d].clone(),
                        })
                        .collect(),
                };
                if let Some(loss) = score(&plan)? {
                    evaluated += 1;
                    if loss > best_loss {
                        best_loss = loss;
                        best_plan = plan;
                    }
                }
                for pos in (0..j).rev() {
                    digits[pos] += 1;
                    if digits[pos] < vocab_subset.len() {
                        continue 'assignments;
                    }
                    digits[pos] = 0;
                }
                break;
            }
            // Next lexicographic combination of site indices; the maximum
            // value at position `pos` is n - j + pos.
            let mut advanced = false;
            for pos in (0..j).rev() {
                if combo[pos] < n - j + pos {
                    combo[pos] += 1;
                    for later in pos + 1..j {
                        combo[later] = combo[later - 1] + 1;
                    }
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                break;
            }
        }
    }

    Ok(BruteForceOutcome {
        plan: best_plan,
        loss: best_loss,
        evaluated,
    })
}

fn binomial(n: usize, j: usize) -> u128 {
    if j > n {
        return 0;
    }
    let mut acc: u128 = 1;
    for i in 0..j {
        acc = acc.saturating_mul((n - i) as u128) / (i + 1) as u128;
    }
    acc
}

/// One corpus entry's attack outcome; errors are carried per item so a batch
/// never aborts half way.
#[derive(Debug)]
pub struct AttackBatchItem {
    pub origin_id: String,
    pub outcome: Result<AttackResult, AttackError>,
}

/// Attacks every snippet independently (in parallel), deriving each
/// optimization's seed from the batch seed and the snippet id, so results are
/// deterministic regardless of scheduling. Callers normally pass only the
/// surrogate's correctly-classified subset.
#[must_use]
pub fn attack_corpus(
    params: &ModelParams,
    snippets: &[CodeSnippet],
    vocab: &Vocabulary,
    labels: &LabelSet,
    config: &AttackConfig,
) -> Vec<AttackBatchItem> {
    snippets
        .par_iter()
        .map(|snippet| {
            let per_snippet = AttackConfig {
                seed: mix_seed(config.seed, &snippet.id),
                ..*config
            };
            let sites = extract_sites(snippet, config.max_insert_slots);
            AttackBatchItem {
                origin_id: snippet.id.clone(),
                outcome: optimize(params, snippet, &sites, vocab, labels, &per_snippet),
            }
        })
        .collect()
}

/// One line of the attack output file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackRecord {
    pub origin_id: String,
    pub plan: PerturbationPlan,
    pub perturbed_code: String,
    pub clean_loss: f64,
    pub adv_loss: f64,
    pub success: bool,
}

impl AttackRecord {
    /// Record view of a finished attack.
    #[must_use]
    pub fn from_result(result: &AttackResult) -> Self {
        AttackRecord {
            origin_id: result.perturbed.origin_id.clone(),
            plan: result.plan.clone(),
            perturbed_code: result.perturbed.render_tokens(),
            clean_loss: result.clean_loss,
            adv_loss: result.adv_loss,
            success: result.success,
        }
    }
}

/// Writes attack records as newline-delimited JSON.
pub fn save_attack_records(
    path: &std::path::Path,
    records: &[AttackRecord],
) -> Result<(), std::io::Error> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("attack records serialize"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

/// Reads an attack output file (blank lines skipped).
pub fn load_attack_records(path: &std::path::Path) -> Result<Vec<AttackRecord>, std::io::Error> {
    let mut records = Vec::new();
    for (i, line) in std::fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: AttackRecord = serde_json::from_str(line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("attack record line {}: {e}", i + 1),
            )
        })?;
        records.push(record);
    }
    Ok(records)
}
