//! Cell encoder, marker encoder, GMVE head, MLM head, task heads and
//! low-rank adapters, all backed by one [`ParamStore`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ontology::Prototype;
use crate::params::{normal_init, ParamStore};
use crate::tensor::Tensor;
use crate::tokenizer::{GeneVocabulary, TokenSequence};

const MASK_NEG: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// Desk-scale cell encoder: hidden 64, 2 layers, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_size: 64,
            num_layers: 2,
            num_heads: 4,
            max_len: 256,
            dropout: 0.0,
            activation: Activation::Relu,
            layer_norm_eps: 1e-12,
        }
    }

    /// Geneformer-sized cell encoder.
    pub fn full_cell() -> Self {
        Self {
            vocab_size: 20275,
            hidden_size: 768,
            num_layers: 12,
            num_heads: 12,
            max_len: 4096,
            dropout: 0.02,
            activation: Activation::Relu,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn full_marker() -> Self {
        Self {
            num_layers: 2,
            max_len: 200,
            dropout: 0.01,
            ..Self::full_cell()
        }
    }

    pub fn intermediate_size(&self) -> usize {
        4 * self.hidden_size
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("hidden_size", self.hidden_size),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("max_len", self.max_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmveConfig {
    /// Mixture component count `L`.
    pub components: usize,
    pub latent_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Projection {
    fn name(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Key => "key",
            Projection::Value => "value",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<Projection>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.05,
            targets: vec![Projection::Query, Projection::Key, Projection::Value],
        }
    }
}

impl AdapterConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub cell: EncoderConfig,
    pub marker: EncoderConfig,
    pub gmve: GmveConfig,
    pub init_std: f64,
}

impl ModelConfig {
    /// Desk-scale defaults for a vocabulary of `vocab_size` tokens.
    pub fn desk(vocab_size: usize) -> Self {
        let cell = EncoderConfig::desk(vocab_size);
        let marker = EncoderConfig {
            num_layers: 2,
            max_len: 200,
            ..cell.clone()
        };
        Self {
            gmve: GmveConfig {
                components: 8,
                latent_dim: cell.hidden_size,
            },
            cell,
            marker,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cell.validate()?;
        self.marker.validate()?;
        if self.cell.hidden_size != self.marker.hidden_size {
            return Err(Error::InvalidConfig(
                "cell and marker encoders must share hidden_size".into(),
            ));
        }
        if self.cell.vocab_size != self.marker.vocab_size {
            return Err(Error::InvalidConfig(
                "cell and marker encoders must share the gene vocabulary".into(),
            ));
        }
        if self.gmve.components == 0 || self.gmve.latent_dim == 0 {
            return Err(Error::InvalidConfig("GMVE sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Provenance tag of a checkpoint: pretrained, post-pretrained, fine-tuned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pt,
    Pp,
    Ft,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pt => "pt",
            Stage::Pp => "pp",
            Stage::Ft => "ft",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskHead {
    /// Linear classifier over these labels, in index order.
    Identity { classes: Vec<String> },
    /// Reuses the MLM head.
    Imputation,
    /// Linear regression from the cell embedding to per-gene expression
    /// change. `held_out` types were excluded from training.
    Perturbation {
        num_genes: usize,
        #[serde(default)]
        held_out: Vec<String>,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub init_seed: u64,
    /// `(stage, seed)` for every training run applied to these parameters.
    pub runs: Vec<(String, u64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub stage: Option<Stage>,
    pub adapter: Option<AdapterConfig>,
    pub head: Option<TaskHead>,
    pub seeds: SeedRecord,
    pub params: ParamStore,
}

/// Output of [`ModelState::encode_cell`].
#[derive(Clone, Debug, PartialEq)]
pub struct CellEncoding {
    pub h_c: Vec<f64>,
    pub token_logits: Tensor,
}

pub(crate) struct EncoderPass {
    pub hidden: Var,
    pub pooled: Var,
}

/// Inverted dropout driven by an explicit generator; `None` means eval mode.
pub(crate) struct DropoutCtx<'r> {
    pub rng: &'r mut ChaCha8Rng,
}

fn dropout(g: &mut Graph, x: Var, p: f64, ctx: &mut Option<DropoutCtx>) -> Var {
    let Some(ctx) = ctx.as_mut() else { return x };
    if p <= 0.0 {
        return x;
    }
    let (r, c) = g.value(x).shape();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..r * c)
        .map(|_| if ctx.rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let m = g.input(Tensor::from_vec(r, c, mask));
    g.mul(x, m)
}

fn init_encoder(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, std: f64, rng: &mut ChaCha8Rng) {
    let h = cfg.hidden_size;
    let f = cfg.intermediate_size();
    store.insert(
        format!("{prefix}.embed.token"),
        normal_init(cfg.vocab_size, h, std, rng),
    );
    store.insert(
        format!("{prefix}.embed.position"),
        normal_init(cfg.max_len, h, std, rng),
    );
    store.insert(format!("{prefix}.embed.ln.gamma"), Tensor::full(1, h, 1.0));
    store.insert(format!("{prefix}.embed.ln.beta"), Tensor::zeros(1, h));
    for l in 0..cfg.num_layers {
        let p = format!("{prefix}.layer.{l}");
        for proj in ["query", "key", "value", "output"] {
            store.insert(format!("{p}.attn.{proj}.weight"), normal_init(h, h, std, rng));
            store.insert(format!("{p}.attn.{proj}.bias"), Tensor::zeros(1, h));
        }
        store.insert(format!("{p}.attn.ln.gamma"), Tensor::full(1, h, 1.0));
        store.insert(format!("{p}.attn.ln.beta"), Tensor::zeros(1, h));
        store.insert(format!("{p}.ffn.up.weight"), normal_init(h, f, std, rng));
        store.insert(format!("{p}.ffn.up.bias"), Tensor::zeros(1, f));
        store.insert(format!("{p}.ffn.down.weight"), normal_init(f, h, std, rng));
        store.insert(format!("{p}.ffn.down.bias"), Tensor::zeros(1, h));
        store.insert(format!("{p}.ffn.ln.gamma"), Tensor::full(1, h, 1.0));
        store.insert(format!("{p}.ffn.ln.beta"), Tensor::zeros(1, h));
    }
}

fn linear(g: &mut Graph, x: Var, prefix: &str) -> Var {
    let w = g.param_named(&format!("{prefix}.weight"));
    let b = g.param_named(&format!("{prefix}.bias"));
    let y = g.matmul(x, w);
    g.add(y, b)
}

#[allow(clippy::too_many_arguments)]
fn adapted_projection(
    g: &mut Graph,
    x: Var,
    prefix: &str,
    proj: Projection,
    adapter: Option<&AdapterConfig>,
    ctx: &mut Option<DropoutCtx>,
) -> Var {
    let name = format!("{prefix}.attn.{}", proj.name());
    let base = linear(g, x, &name);
    match adapter {
        Some(a) if a.targets.contains(&proj) => {
            let xa = dropout(g, x, a.dropout, ctx);
            let la = g.param_named(&format!("{name}.lora_a"));
            let lb = g.param_named(&format!("{name}.lora_b"));
            let down = g.matmul(xa, la);
            let up = g.matmul(down, lb);
            let up = g.scale(up, a.scaling());
            g.add(base, up)
        }
        _ => base,
    }
}

/// Runs one transformer encoder (post-LN, BERT layout) over `tokens`.
/// PAD positions are excluded as attention keys and from mean pooling.
pub(crate) fn encoder_forward(
    g: &mut Graph,
    prefix: &str,
    cfg: &EncoderConfig,
    adapter: Option<&AdapterConfig>,
    tokens: &[usize],
    pad_id: usize,
    ctx: &mut Option<DropoutCtx>,
) -> Result<EncoderPass> {
    let t = tokens.len();
    if t > cfg.max_len {
        return Err(Error::SequenceTooLong {
            len: t,
            max: cfg.max_len,
        });
    }
    let keep: Vec<bool> = tokens.iter().map(|&tok| tok != pad_id).collect();
    if !keep.iter().any(|k| *k) {
        return Err(Error::EmptySequence);
    }
    if let Some(&bad) = tokens.iter().find(|&&tok| tok >= cfg.vocab_size) {
        return Err(Error::UnknownGene(format!("token id {bad}")));
    }
    let h = cfg.hidden_size;
    let heads = cfg.num_heads;
    let dh = h / heads;
    let eps = cfg.layer_norm_eps;

    let tok_table = g.param_named(&format!("{prefix}.embed.token"));
    let pos_table = g.param_named(&format!("{prefix}.embed.position"));
    let tok = g.gather_rows(tok_table, tokens);
    let positions: Vec<usize> = (0..t).collect();
    let pos = g.gather_rows(pos_table, &positions);
    let x = g.add(tok, pos);
    let gamma = g.param_named(&format!("{prefix}.embed.ln.gamma"));
    let beta = g.param_named(&format!("{prefix}.embed.ln.beta"));
    let x = g.layer_norm(x, gamma, beta, eps);
    let mut x = dropout(g, x, cfg.dropout, ctx);

    let key_mask = g.input(Tensor::row_vector(
        keep.iter().map(|&k| if k { 0.0 } else { MASK_NEG }).collect(),
    ));
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    for l in 0..cfg.num_layers {
        let p = format!("{prefix}.layer.{l}");
        let q = adapted_projection(g, x, &p, Projection::Query, adapter, ctx);
        let k = adapted_projection(g, x, &p, Projection::Key, adapter, ctx);
        let v = adapted_projection(g, x, &p, Projection::Value, adapter, ctx);
        let mut contexts = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = g.slice_cols(q, hd * dh, dh);
            let kh = g.slice_cols(k, hd * dh, dh);
            let vh = g.slice_cols(v, hd * dh, dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, inv_sqrt);
            let scores = g.add(scores, key_mask);
            let probs = g.softmax_rows(scores);
            contexts.push(g.matmul(probs, vh));
        }
        let ctx_all = if heads == 1 {
            contexts[0]
        } else {
            g.concat_cols(&contexts)
        };
        let attn = linear(g, ctx_all, &format!("{p}.attn.output"));
        let attn = dropout(g, attn, cfg.dropout, ctx);
        let res = g.add(x, attn);
        let gamma = g.param_named(&format!("{p}.attn.ln.gamma"));
        let beta = g.param_named(&format!("{p}.attn.ln.beta"));
        let x1 = g.layer_norm(res, gamma, beta, eps);

        let up = linear(g, x1, &format!("{p}.ffn.up"));
        let act = match cfg.activation {
            Activation::Relu => g.relu(up),
            Activation::Gelu => g.gelu(up),
        };
        let down = linear(g, act, &format!("{p}.ffn.down"));
        let down = dropout(g, down, cfg.dropout, ctx);
        let res = g.add(x1, down);
        let gamma = g.param_named(&format!("{p}.ffn.ln.gamma"));
        let beta = g.param_named(&format!("{p}.ffn.ln.beta"));
        x = g.layer_norm(res, gamma, beta, eps);
    }
    let pooled = g.masked_mean_rows(x, &keep);
    Ok(EncoderPass { hidden: x, pooled })
}

/// MLM logits for the given rows of an encoder's hidden states.
pub(crate) fn mlm_logits(g: &mut Graph, hidden_rows: Var) -> Var {
    linear(g, hidden_rows, "mlm")
}

/// Graph nodes of the GMVE posterior for one cell embedding.
pub(crate) struct GmveVars {
    /// `[1, L]` log mixture weights.
    pub log_weights: Var,
    /// `L` nodes of `[1, d]`.
    pub means: Vec<Var>,
    /// `L` nodes of `[1, d]`, strictly positive.
    pub variances: Vec<Var>,
}

pub(crate) fn gmve_posterior_vars(g: &mut Graph, cfg: &GmveConfig, h: Var) -> GmveVars {
    let logits = linear(g, h, "gmve.posterior.pi");
    let log_weights = g.log_softmax_rows(logits);
    let mu_all = linear(g, h, "gmve.posterior.mu");
    let raw_all = linear(g, h, "gmve.posterior.var");
    let var_all = g.softplus(raw_all);
    let d = cfg.latent_dim;
    let means = (0..cfg.components).map(|l| g.slice_cols(mu_all, l * d, d)).collect();
    let variances = (0..cfg.components).map(|l| g.slice_cols(var_all, l * d, d)).collect();
    GmveVars {
        log_weights,
        means,
        variances,
    }
}

pub(crate) fn gmve_prior_vars(g: &mut Graph, cfg: &GmveConfig) -> GmveVars {
    let logits = g.param_named("gmve.prior.logits");
    let log_weights = g.log_softmax_rows(logits);
    let mean = g.param_named("gmve.prior.mean");
    let raw = g.param_named("gmve.prior.var");
    let var = g.softplus(raw);
    let means = (0..cfg.components).map(|l| g.gather_rows(mean, &[l])).collect();
    let variances = (0..cfg.components).map(|l| g.gather_rows(var, &[l])).collect();
    GmveVars {
        log_weights,
        means,
        variances,
    }
}

/// Evaluated GMVE posterior `q(z | h)` for one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GmvePosterior {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl GmvePosterior {
    /// Draws `z`: seeded component choice, then `mu + sqrt(var) * eps`.
    pub fn sample(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = self.weights.len() - 1;
        for (l, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                comp = l;
                break;
            }
        }
        self.means[comp]
            .iter()
            .zip(&self.variances[comp])
            .map(|(m, v)| {
                let e: f64 = StandardNormal.sample(&mut rng);
                m + v.sqrt() * e
            })
            .collect()
    }
}

fn eval_mask(params: &ParamStore) -> Vec<bool> {
    vec![false; params.len()]
}

impl ModelState {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let std = config.init_std;
        init_encoder(&mut params, "cell", &config.cell, std, &mut rng);
        init_encoder(&mut params, "marker", &config.marker, std, &mut rng);
        let h = config.cell.hidden_size;
        let v = config.cell.vocab_size;
        params.insert("mlm.weight", normal_init(h, v, std, &mut rng));
        params.insert("mlm.bias", Tensor::zeros(1, v));
        let GmveConfig {
            components: l,
            latent_dim: d,
        } = config.gmve;
        params.insert("gmve.posterior.pi.weight", normal_init(h, l, std, &mut rng));
        params.insert("gmve.posterior.pi.bias", Tensor::zeros(1, l));
        params.insert("gmve.posterior.mu.weight", normal_init(h, l * d, std, &mut rng));
        params.insert("gmve.posterior.mu.bias", Tensor::zeros(1, l * d));
        params.insert("gmve.posterior.var.weight", normal_init(h, l * d, std, &mut rng));
        params.insert("gmve.posterior.var.bias", Tensor::zeros(1, l * d));
        params.insert("gmve.prior.logits", Tensor::zeros(1, l));
        params.insert("gmve.prior.mean", normal_init(l, d, 1.0, &mut rng));
        params.insert("gmve.prior.var", Tensor::zeros(l, d));
        Ok(Self {
            config,
            stage: None,
            adapter: None,
            head: None,
            seeds: SeedRecord {
                init_seed: seed,
                runs: Vec::new(),
            },
            params,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.config.cell.hidden_size
    }

    pub fn pad_id(&self) -> usize {
        self.config.cell.vocab_size - 1
    }

    /// Pooled embedding `h_c` (mean over non-PAD positions) and per-position
    /// MLM logits, in eval mode.
    pub fn encode_cell(&self, seq: &TokenSequence) -> Result<CellEncoding> {
        let mask = eval_mask(&self.params);
        let mut g = Graph::new(&self.params, &mask);
        let pass = encoder_forward(
            &mut g,
            "cell",
            &self.config.cell,
            self.adapter.as_ref(),
            &seq.tokens,
            self.pad_id(),
            &mut None,
        )?;
        let logits = mlm_logits(&mut g, pass.hidden);
        Ok(CellEncoding {
            h_c: g.value(pass.pooled).data().to_vec(),
            token_logits: g.value(logits).clone(),
        })
    }

    /// `h_c` only; skips the MLM head.
    pub fn embed(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let mask = eval_mask(&self.params);
        let mut g = Graph::new(&self.params, &mask);
        let pass = encoder_forward(
            &mut g,
            "cell",
            &self.config.cell,
            self.adapter.as_ref(),
            &seq.tokens,
            self.pad_id(),
            &mut None,
        )?;
        Ok(g.value(pass.pooled).data().to_vec())
    }

    /// Marker-encoder embedding of a prototype, gene order preserved.
    pub fn encode_prototype(&self, proto: &Prototype, vocab: &GeneVocabulary) -> Result<Vec<f64>> {
        let tokens = prototype_tokens(proto, vocab)?;
        let mask = eval_mask(&self.params);
        let mut g = Graph::new(&self.params, &mask);
        let pass = encoder_forward(
            &mut g,
            "marker",
            &self.config.marker,
            None,
            &tokens,
            self.pad_id(),
            &mut None,
        )?;
        Ok(g.value(pass.pooled).data().to_vec())
    }

    pub fn gmve_posterior(&self, h_c: &[f64]) -> Result<GmvePosterior> {
        if h_c.len() != self.hidden_size() {
            return Err(Error::LengthMismatch {
                expected: self.hidden_size(),
                actual: h_c.len(),
            });
        }
        let mask = eval_mask(&self.params);
        let mut g = Graph::new(&self.params, &mask);
        let h = g.input(Tensor::row_vector(h_c.to_vec()));
        let vars = gmve_posterior_vars(&mut g, &self.config.gmve, h);
        Ok(GmvePosterior {
            weights: g.value(vars.log_weights).data().iter().map(|x| x.exp()).collect(),
            means: vars.means.iter().map(|v| g.value(*v).data().to_vec()).collect(),
            variances: vars.variances.iter().map(|v| g.value(*v).data().to_vec()).collect(),
        })
    }

    /// Prior mixture weights `p_l`.
    pub fn gmve_prior_weights(&self) -> Vec<f64> {
        let logits = self.params.by_name("gmve.prior.logits").expect("prior logits");
        let mut out = vec![0.0; logits.len()];
        crate::graph::softmax_into(logits.data(), &mut out);
        out
    }

    /// Adds zero-initialized low-rank factors to the configured attention
    /// projections of the cell encoder. The adapted forward pass starts out
    /// identical to the base model.
    pub fn attach_adapters(mut self, cfg: AdapterConfig, seed: u64) -> Result<Self> {
        if self.adapter.is_some() {
            return Err(Error::AdaptersAlreadyAttached);
        }
        if cfg.rank == 0 {
            return Err(Error::InvalidConfig("adapter rank must be >= 1".into()));
        }
        if cfg.targets.is_empty() {
            return Err(Error::InvalidConfig("adapter needs at least one target".into()));
        }
        let h = self.hidden_size();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (h as f64).sqrt();
        for l in 0..self.config.cell.num_layers {
            for proj in &cfg.targets {
                let name = format!("cell.layer.{l}.attn.{}", proj.name());
                self.params
                    .insert(format!("{name}.lora_a"), normal_init(h, cfg.rank, std, &mut rng));
                self.params.insert(format!("{name}.lora_b"), Tensor::zeros(cfg.rank, h));
            }
        }
        self.adapter = Some(cfg);
        Ok(self)
    }

    /// Adds (or replaces) a freshly initialized task head.
    pub fn attach_head(&mut self, head: TaskHead, seed: u64) {
        let h = self.hidden_size();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = match &head {
            TaskHead::Identity { classes } => Some(("head.identity", classes.len())),
            TaskHead::Perturbation { num_genes, .. } => Some(("head.perturbation", *num_genes)),
            TaskHead::Imputation => None,
        };
        if let Some((prefix, n)) = out {
            let w = normal_init(h, n, self.config.init_std, &mut rng);
            let wname = format!("{prefix}.weight");
            let bname = format!("{prefix}.bias");
            match self.params.id(&wname) {
                Some(id) if self.params.get(id).shape() == (h, n) => {
                    *self.params.get_mut(id) = w;
                    let bid = self.params.expect(&bname);
                    *self.params.get_mut(bid) = Tensor::zeros(1, n);
                }
                Some(_) => {
                    // Shape changed: rebuild the store without the stale head.
                    let mut fresh = ParamStore::new();
                    for (_, name, t) in self.params.iter() {
                        if !name.starts_with(prefix) {
                            fresh.insert(name, t.clone());
                        }
                    }
                    fresh.insert(wname, w);
                    fresh.insert(bname, Tensor::zeros(1, n));
                    self.params = fresh;
                }
                None => {
                    self.params.insert(wname, w);
                    self.params.insert(bname, Tensor::zeros(1, n));
                }
            }
        }
        self.head = Some(head);
    }

    pub fn trainable_mask(&self, filter: impl Fn(&str) -> bool) -> Vec<bool> {
        self.params.iter().map(|(_, n, _)| filter(n)).collect()
    }
}

pub fn prototype_tokens(proto: &Prototype, vocab: &GeneVocabulary) -> Result<Vec<usize>> {
    proto
        .genes
        .iter()
        .map(|gene| vocab.index_of(gene).ok_or_else(|| Error::UnknownGene(gene.clone())))
        .collect()
}

/// Classifier logits for a batch of embeddings (rows).
pub(crate) fn identity_logits(g: &mut Graph, h: Var) -> Var {
    linear(g, h, "head.identity")
}

pub(crate) fn perturbation_output(g: &mut Graph, h: Var) -> Var {
    linear(g, h, "head.perturbation")
}

/// Whether a parameter name belongs to the cell encoder's last layer.
pub fn is_last_layer(name: &str, cfg: &EncoderConfig) -> bool {
    name.starts_with(&format!("cell.layer.{}.", cfg.num_layers - 1)) && !name.contains(".lora_")
}

pub fn is_adapter(name: &str) -> bool {
    name.contains(".lora_")
}

/// Base cell-encoder weights (everything under `cell.` except adapters).
pub fn is_cell_base(name: &str) -> bool {
    name.starts_with("cell.") && !is_adapter(name)
}
