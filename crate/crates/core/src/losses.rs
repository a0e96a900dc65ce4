//! Objective terms: masked-token prediction, prototype alignment, lineage
//! separation, GMVE mixture KL, and their weighted total.
//!
//! Each term has a graph builder (used by training, differentiable) and a
//! plain-value entry point that evaluates the same builder.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{gmve_posterior_vars, gmve_prior_vars, GmveConfig, GmveVars, ModelState};
use crate::ontology::TypePair;
use crate::params::ParamStore;
use crate::tensor::{dot, Tensor};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Weight of the L2 parameter regularizer inside the MLM term.
    pub alpha_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            alpha_reg: 0.0,
        }
    }
}

impl LossWeights {
    pub fn mlm_only() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            alpha_reg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("alpha_reg", self.alpha_reg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

fn empty_store() -> (ParamStore, Vec<bool>) {
    (ParamStore::new(), Vec::new())
}

fn check_nonzero(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| *x == 0.0) {
        Err(Error::ZeroVector)
    } else {
        Ok(())
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `-Σ_i log softmax_j(cos(cell_i, proto_j) / temperature)[label_i]`, the
/// softmax running over every prototype row.
pub(crate) fn prototype_loss_graph(
    g: &mut Graph,
    cells: Var,
    prototypes: Var,
    labels: &[usize],
    temperature: f64,
) -> Var {
    let cn = g.l2_normalize_rows(cells);
    let pn = g.l2_normalize_rows(prototypes);
    let pt = g.transpose(pn);
    let sims = g.matmul(cn, pt);
    let sims = if temperature == 1.0 {
        sims
    } else {
        g.scale(sims, 1.0 / temperature)
    };
    let logp = g.log_softmax_rows(sims);
    let idx: Vec<(usize, usize)> = labels.iter().enumerate().map(|(i, &l)| (i, l)).collect();
    let picked = g.pick(logp, &idx);
    let s = g.sum_all(picked);
    g.scale(s, -1.0)
}

pub fn prototype_loss(
    cell_embeddings: &[Vec<f64>],
    labels: &[usize],
    prototype_embeddings: &[Vec<f64>],
    temperature: f64,
) -> Result<f64> {
    if cell_embeddings.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: cell_embeddings.len(),
            actual: labels.len(),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= prototype_embeddings.len()) {
        return Err(Error::MissingPrototype(l));
    }
    for v in cell_embeddings.iter().chain(prototype_embeddings) {
        check_nonzero(v)?;
    }
    if cell_embeddings.is_empty() {
        return Ok(0.0);
    }
    let (store, mask) = empty_store();
    let mut g = Graph::new(&store, &mask);
    let c = g.input(Tensor::from_rows(cell_embeddings));
    let p = g.input(Tensor::from_rows(prototype_embeddings));
    let loss = prototype_loss_graph(&mut g, c, p, labels, temperature);
    Ok(g.scalar(loss))
}

/// Pairs of `pairs` with both members among `present`, as index pairs into it.
pub(crate) fn batch_pairs(present: &[&str], pairs: &BTreeSet<TypePair>) -> Vec<(usize, usize)> {
    let pos: BTreeMap<&str, usize> = present.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    pairs
        .iter()
        .filter_map(|p| Some((*pos.get(p.first())?, *pos.get(p.second())?)))
        .collect()
}

/// Mean cosine similarity between per-type mean embeddings over the lineage
/// pairs present in the batch. `None` when no pair is present (loss 0).
pub(crate) fn lineage_loss_graph(
    g: &mut Graph,
    cells: Var,
    labels: &[usize],
    type_names: &[String],
    pairs: &BTreeSet<TypePair>,
) -> Option<Var> {
    let present_idx: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let present: Vec<&str> = present_idx.iter().map(|&i| type_names[i].as_str()).collect();
    let rb = batch_pairs(&present, pairs);
    if rb.is_empty() {
        return None;
    }
    let b = labels.len();
    let mut avg = Tensor::zeros(present_idx.len(), b);
    for (row, &t) in present_idx.iter().enumerate() {
        let members: Vec<usize> = (0..b).filter(|&i| labels[i] == t).collect();
        let w = 1.0 / members.len() as f64;
        for i in members {
            avg.set(row, i, w);
        }
    }
    let a = g.input(avg);
    let means = g.matmul(a, cells);
    Some(lineage_from_means(g, means, &rb))
}

fn lineage_from_means(g: &mut Graph, means: Var, rb: &[(usize, usize)]) -> Var {
    let mn = g.l2_normalize_rows(means);
    let mt = g.transpose(mn);
    let gram = g.matmul(mn, mt);
    let picked = g.pick(gram, rb);
    let s = g.sum_all(picked);
    g.scale(s, 1.0 / rb.len() as f64)
}

pub fn lineage_loss(type_mean_embeddings: &BTreeMap<String, Vec<f64>>, pairs: &BTreeSet<TypePair>) -> Result<f64> {
    let present: Vec<&str> = type_mean_embeddings.keys().map(String::as_str).collect();
    let rb = batch_pairs(&present, pairs);
    if rb.is_empty() {
        return Ok(0.0);
    }
    for v in type_mean_embeddings.values() {
        check_nonzero(v)?;
    }
    let rows: Vec<Vec<f64>> = type_mean_embeddings.values().cloned().collect();
    let (store, mask) = empty_store();
    let mut g = Graph::new(&store, &mask);
    let m = g.input(Tensor::from_rows(&rows));
    let loss = lineage_from_means(&mut g, m, &rb);
    Ok(g.scalar(loss))
}

/// Log density of each row of `z` under a diagonal Gaussian, `[S, d] -> [S, 1]`.
fn gaussian_log_density(g: &mut Graph, z: Var, mean: Var, var: Var) -> Var {
    let d = g.value(z).cols() as f64;
    let diff = g.sub(z, mean);
    let sq = g.mul(diff, diff);
    let inv = g.recip(var);
    let w = g.mul(sq, inv);
    let quad = g.sum_cols(w);
    let logv = g.log(var);
    let logdet = g.sum_all(logv);
    let a = g.scale(quad, -0.5);
    let b = g.scale(logdet, -0.5);
    let lp = g.add(a, b);
    let c = g.input(Tensor::scalar(-0.5 * d * LN_2PI));
    g.add(lp, c)
}

fn mixture_log_density(g: &mut Graph, z: Var, mix: &GmveVars) -> Var {
    let cols: Vec<Var> = (0..mix.means.len())
        .map(|j| {
            let ld = gaussian_log_density(g, z, mix.means[j], mix.variances[j]);
            let lw = g.slice_cols(mix.log_weights, j, 1);
            g.add(ld, lw)
        })
        .collect();
    let all = g.concat_cols(&cols);
    g.log_sum_exp_rows(all)
}

/// Standard-normal draws for every component: `components` blocks of
/// `[num_samples, dim]`, generated in component order.
pub fn kl_noise(components: usize, num_samples: usize, dim: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..components)
        .map(|_| {
            let data = (0..num_samples * dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            Tensor::from_vec(num_samples, dim, data)
        })
        .collect()
}

/// Monte Carlo `KL(q(z|h) || p(z))` with stratified reparameterized sampling:
/// `Σ_l π_l · mean_s[log q(z_ls) − log p(z_ls)]`, `z_ls = μ_l + σ_l ε_ls`.
pub(crate) fn gmve_kl_graph(g: &mut Graph, cfg: &GmveConfig, h: Var, num_samples: usize, seed: u64) -> Var {
    let post = gmve_posterior_vars(g, cfg, h);
    let prior = gmve_prior_vars(g, cfg);
    let noise = kl_noise(cfg.components, num_samples, cfg.latent_dim, seed);
    let mut per_comp = Vec::with_capacity(cfg.components);
    for (l, eps) in noise.into_iter().enumerate() {
        let eps = g.input(eps);
        let sd = g.sqrt(post.variances[l]);
        let scaled = g.mul(eps, sd);
        let z = g.add(scaled, post.means[l]);
        let lq = mixture_log_density(g, z, &post);
        let lp = mixture_log_density(g, z, &prior);
        let diff = g.sub(lq, lp);
        let s = g.sum_all(diff);
        per_comp.push(g.scale(s, 1.0 / num_samples as f64));
    }
    let kls = g.concat_cols(&per_comp);
    let w = g.exp(post.log_weights);
    let weighted = g.mul(w, kls);
    g.sum_all(weighted)
}

pub fn gmve_kl(state: &ModelState, h_c: &[f64], num_samples: usize, seed: u64) -> Result<f64> {
    if num_samples == 0 {
        return Err(Error::InvalidConfig("num_samples must be >= 1".into()));
    }
    if h_c.len() != state.hidden_size() {
        return Err(Error::LengthMismatch {
            expected: state.hidden_size(),
            actual: h_c.len(),
        });
    }
    let mask = vec![false; state.params.len()];
    let mut g = Graph::new(&state.params, &mask);
    let h = g.input(Tensor::row_vector(h_c.to_vec()));
    let kl = gmve_kl_graph(&mut g, &state.config.gmve, h, num_samples, seed);
    Ok(g.scalar(kl))
}

/// `-Σ_{i∈M} log softmax(logits_i)[target_i]` over pre-selected rows.
pub(crate) fn mlm_loss_graph(g: &mut Graph, masked_logits: Var, targets: &[usize]) -> Var {
    let logp = g.log_softmax_rows(masked_logits);
    let idx: Vec<(usize, usize)> = targets.iter().enumerate().map(|(i, &t)| (i, t)).collect();
    let picked = g.pick(logp, &idx);
    let s = g.sum_all(picked);
    g.scale(s, -1.0)
}

/// MLM loss from full per-position logits; `regularizer_value` is typically
/// [`l2_regularizer`] over the trainable parameters.
pub fn mlm_loss(
    token_logits: &Tensor,
    masked_positions: &[usize],
    targets: &[usize],
    alpha_reg: f64,
    regularizer_value: f64,
) -> Result<f64> {
    if masked_positions.is_empty() {
        return Err(Error::EmptyMaskSet);
    }
    if masked_positions.len() != targets.len() {
        return Err(Error::LengthMismatch {
            expected: masked_positions.len(),
            actual: targets.len(),
        });
    }
    let (store, mask) = empty_store();
    let mut g = Graph::new(&store, &mask);
    let all = g.input(token_logits.clone());
    let rows = g.gather_rows(all, masked_positions);
    let loss = mlm_loss_graph(&mut g, rows, targets);
    Ok(g.scalar(loss) + alpha_reg * regularizer_value)
}

/// `Σ p²` over the parameters selected by `mask`.
pub fn l2_regularizer(params: &ParamStore, mask: &[bool]) -> f64 {
    params
        .iter()
        .filter(|(id, _, _)| mask[id.index()])
        .map(|(_, _, t)| t.sq_norm())
        .sum()
}

pub fn total_loss(mlm: f64, proto: f64, lineage: f64, gmve: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("mlm", mlm), ("prototype", proto), ("lineage", lineage), ("gmve", gmve)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteInput(name));
        }
    }
    Ok(mlm + w.lambda1 * proto + w.lambda2 * lineage + w.lambda3 * gmve)
}
