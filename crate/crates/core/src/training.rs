//! The three training stages (pretrain, post-pretrain, fine-tune), the
//! batch objective shared by all of them, AdamW with a warmup/decay schedule,
//! and early stopping.
//!
//! Every random choice (batch order, masks, dropout, KL noise, few-shot
//! subsampling) is drawn from a seed derived from `TrainConfig::seed`, so a
//! run is reproducible from its config and data.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::dataset::{ExpressionDataset, Split};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    gmve_kl_graph, l2_regularizer, lineage_loss_graph, mlm_loss_graph, prototype_loss_graph, LossWeights,
};
use crate::model::{
    encoder_forward, identity_logits, is_adapter, is_last_layer, mlm_logits, perturbation_output, Activation,
    AdapterConfig, DropoutCtx, EncoderConfig, GmveConfig, ModelConfig, ModelState, Stage, TaskHead,
};
use crate::ontology::{organize_markers, parent_lineage_pairs, CellOntology, MarkerCatalog, TypePair};
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;
use crate::tokenizer::{mask_tokens, tokenize, GeneMedians, GeneVocabulary, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Pretrain,
    PostPretrain,
    FineTune,
}

impl StageKind {
    pub fn output_stage(self) -> Stage {
        match self {
            StageKind::Pretrain => Stage::Pt,
            StageKind::PostPretrain => Stage::Pp,
            StageKind::FineTune => Stage::Ft,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StageKind::Pretrain => "pretrain",
            StageKind::PostPretrain => "post_pretrain",
            StageKind::FineTune => "fine_tune",
        }
    }

    /// Stages an input checkpoint may carry for this stage to run on.
    pub fn accepts(self, stage: Option<Stage>) -> bool {
        match self {
            StageKind::Pretrain => matches!(stage, None | Some(Stage::Pt)),
            StageKind::PostPretrain => stage == Some(Stage::Pt),
            StageKind::FineTune => matches!(stage, Some(Stage::Pt | Stage::Pp)),
        }
    }
}

/// Which parameters train: linear probe, last layer, full, or low-rank adapters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[serde(alias = "LP")]
    Lp,
    #[serde(alias = "LL")]
    Ll,
    #[default]
    #[serde(alias = "FF")]
    Ff,
    #[serde(alias = "LoRA", alias = "LORA")]
    Lora,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    #[serde(alias = "cell_identity")]
    Identity,
    Imputation,
    Perturbation,
}

/// Encoder and head sizes used when a run starts from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub marker_layers: usize,
    pub marker_max_len: usize,
    pub marker_dropout: f64,
    pub gmve_components: usize,
    /// Defaults to `hidden_size`.
    pub gmve_latent_dim: Option<usize>,
    pub init_std: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let desk = EncoderConfig::desk(4);
        Self {
            hidden_size: desk.hidden_size,
            num_layers: desk.num_layers,
            num_heads: desk.num_heads,
            max_len: desk.max_len,
            dropout: desk.dropout,
            activation: desk.activation,
            marker_layers: 2,
            marker_max_len: 200,
            marker_dropout: 0.0,
            gmve_components: 8,
            gmve_latent_dim: None,
            init_std: 0.02,
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let cell = EncoderConfig {
            vocab_size,
            hidden_size: self.hidden_size,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            max_len: self.max_len,
            dropout: self.dropout,
            activation: self.activation,
            layer_norm_eps: 1e-12,
        };
        let marker = EncoderConfig {
            num_layers: self.marker_layers,
            max_len: self.marker_max_len,
            dropout: self.marker_dropout,
            ..cell.clone()
        };
        ModelConfig {
            cell,
            marker,
            gmve: GmveConfig {
                components: self.gmve_components,
                latent_dim: self.gmve_latent_dim.unwrap_or(self.hidden_size),
            },
            init_std: self.init_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: StageKind,
    pub mode: TrainMode,
    pub task: Task,
    pub seed: u64,
    pub weights: LossWeights,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub epoch_cap: usize,
    /// Stop pretraining once the epoch's mean training MLM loss per masked
    /// token reaches this value.
    pub mlm_loss_threshold: Option<f64>,
    pub mask_rate: f64,
    pub kl_samples: usize,
    /// Prototype length `K`.
    pub prototype_len: usize,
    pub temperature: f64,
    /// Per-class cap on fine-tuning cells.
    pub few_shot_n: Option<usize>,
    /// Cell types withheld from perturbation fine-tuning. Empty means the
    /// rarest type in the data.
    pub held_out_types: Vec<String>,
    /// Keep the GMVE term active while fine-tuning (weighted by `lambda3`).
    pub gmve_in_fine_tune: bool,
    pub model: ModelSettings,
    pub adapter: AdapterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: StageKind::Pretrain,
            mode: TrainMode::Ff,
            task: Task::Identity,
            seed: 0,
            weights: LossWeights::default(),
            lr_peak: 1e-3,
            warmup_steps: 20,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 12,
            patience: 3,
            epoch_cap: 50,
            mlm_loss_threshold: None,
            mask_rate: 0.15,
            kl_samples: 8,
            prototype_len: 16,
            temperature: 1.0,
            few_shot_n: None,
            held_out_types: Vec::new(),
            gmve_in_fine_tune: false,
            model: ModelSettings::default(),
            adapter: AdapterConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Optimizer settings for full-size post-pretraining.
    pub fn full_scale() -> Self {
        Self {
            lr_peak: 1e-5,
            warmup_steps: 1000,
            weight_decay: 1e-3,
            batch_size: 12,
            mlm_loss_threshold: Some(3.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        self.weights.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.epoch_cap == 0 {
            return bad("epoch_cap must be >= 1");
        }
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) {
            return bad("lr_peak must be finite and >= 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid Adam moments");
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::RateOutOfRange(self.mask_rate));
        }
        if self.kl_samples == 0 {
            return bad("kl_samples must be >= 1");
        }
        if self.prototype_len == 0 {
            return bad("prototype_len must be >= 1");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be > 0");
        }
        if self.few_shot_n == Some(0) {
            return bad("few_shot_n must be >= 1");
        }
        if self.stage == StageKind::PostPretrain && self.mode == TrainMode::Lp {
            return bad("post-pretraining supports modes ll, ff and lora");
        }
        Ok(())
    }

    /// SHA-256 of the config's canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Mixes `parts` into `base` (SplitMix64 finalizer per part).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x = x
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(p.wrapping_mul(0xD1B5_4A32_D192_ED03));
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

const PURPOSE_ORDER: u64 = 1;
const PURPOSE_MASK: u64 = 2;
const PURPOSE_DROPOUT: u64 = 3;
const PURPOSE_KL: u64 = 4;
const PURPOSE_VAL: u64 = 5;
const PURPOSE_FEW_SHOT: u64 = 6;
const PURPOSE_ADAPTER: u64 = 7;
const PURPOSE_HEAD: u64 = 8;
const PURPOSE_INIT: u64 = 9;

/// Linear warmup to `peak` over `warmup` steps, then linear decay reaching
/// zero one step after `total`. Steps count from 1.
pub fn learning_rate(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    if warmup > 0 && step <= warmup {
        return peak * step as f64 / warmup as f64;
    }
    let remaining = (total + 1).saturating_sub(step) as f64;
    let span = (total + 1).saturating_sub(warmup.max(1)).max(1) as f64;
    peak * (remaining / span).clamp(0.0, 1.0)
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(num_params: usize, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            first: vec![None; num_params],
            second: vec![None; num_params],
        }
    }

    /// Updates every trainable parameter that received a gradient.
    pub fn step(&mut self, params: &mut ParamStore, trainable: &[bool], grads: &Grads, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let i = id.index();
            if !trainable[i] {
                continue;
            }
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let p = params.get_mut(id);
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
                *pv -= lr * (update + self.weight_decay * *pv);
            }
        }
    }
}

/// Stops at the first epoch where validation loss has gone `patience`
/// consecutive epochs without a strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records `loss` for `epoch`; returns `true` when training should stop.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    pub fn improved_at(&self, epoch: usize) -> bool {
        self.best_epoch == epoch
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Per-term batch-mean losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub mlm: f64,
    pub prototype: f64,
    pub lineage: f64,
    pub gmve: f64,
    pub task: f64,
    pub total: f64,
}

impl LossTerms {
    fn add_scaled(&mut self, o: &LossTerms, k: f64) {
        self.mlm += k * o.mlm;
        self.prototype += k * o.prototype;
        self.lineage += k * o.lineage;
        self.gmve += k * o.gmve;
        self.task += k * o.task;
        self.total += k * o.total;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossTerms,
    pub val_loss: f64,
    pub learning_rate: f64,
    /// Mean masked-token loss, the quantity compared to `mlm_loss_threshold`.
    pub mlm_per_token: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochCap,
    Patience,
    MlmThreshold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: StageKind,
    pub mode: TrainMode,
    pub task: Option<Task>,
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub stopping_epoch: usize,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    pub train_cells: usize,
    pub val_cells: usize,
}

/// Result of a training stage.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub record: RunRecord,
}

/// Tokenized view of a dataset: rank-value tokens for every cell.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: GeneVocabulary,
    pub medians: GeneMedians,
    pub tokens: Vec<Vec<usize>>,
}

impl Corpus {
    /// Medians come from the training split.
    pub fn new(data: &ExpressionDataset, max_len: usize) -> Result<Self> {
        if data.num_cells() == 0 {
            return Err(Error::EmptyDataset);
        }
        let vocab = GeneVocabulary::new(data.genes.clone())?;
        let train = data.indices(Split::Train);
        let medians = GeneMedians::from_rows(data.num_genes(), train.iter().map(|&i| data.expression(i)));
        let tokens = (0..data.num_cells())
            .map(|i| tokenize(data.expression(i), &vocab, &medians, max_len).map(|s| s.tokens))
            .collect::<Result<_>>()?;
        Ok(Self { vocab, medians, tokens })
    }
}

/// Prototype token sequences for every class plus the lineage pairs.
#[derive(Clone, Debug)]
pub struct PrototypeSet {
    pub classes: Vec<String>,
    pub tokens: Vec<Vec<usize>>,
    pub pairs: BTreeSet<TypePair>,
}

impl PrototypeSet {
    pub fn build(
        classes: &[String],
        ontology: &CellOntology,
        catalog: &MarkerCatalog,
        vocab: &GeneVocabulary,
        k: usize,
    ) -> Result<Self> {
        catalog.validate(ontology, vocab)?;
        let tokens = classes
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let proto = organize_markers(catalog, ontology, c, k).map_err(|e| match e {
                    Error::UnknownCellType(_) => Error::MissingPrototype(i),
                    other => other,
                })?;
                crate::model::prototype_tokens(&proto, vocab)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            classes: classes.to_vec(),
            tokens,
            pairs: parent_lineage_pairs(ontology),
        })
    }
}

/// Supervised head objective added during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeadLoss {
    None,
    /// Mean cross-entropy of the identity classifier.
    Identity,
    /// Mean squared error of the predicted expression change.
    Perturbation,
}

/// Which terms a batch objective evaluates.
#[derive(Clone, Debug)]
pub struct Objective<'a> {
    pub weights: LossWeights,
    pub use_mlm: bool,
    /// Class names, lineage pairs and prototype tokens.
    pub prototypes: Option<&'a PrototypeSet>,
    pub use_prototype_term: bool,
    pub use_lineage: bool,
    pub use_gmve: bool,
    pub head: HeadLoss,
    pub kl_samples: usize,
    pub temperature: f64,
}

impl Objective<'_> {
    fn needs_embeddings(&self) -> bool {
        self.use_prototype_term || self.use_lineage || self.use_gmve || self.head != HeadLoss::None
    }
}

/// One cell of a batch.
#[derive(Clone, Debug)]
pub struct BatchItem {
    /// Possibly masked tokens; the MLM term uses `masked`/`targets`.
    pub seq: TokenSequence,
    pub label: usize,
    pub delta: Option<Vec<f64>>,
    pub kl_seed: u64,
    /// Precomputed `h_c`, used instead of running the encoder.
    pub cached: Option<Vec<f64>>,
}

/// Evaluates the batch objective and, if `trainable` selects anything, its
/// gradient. Per-cell terms are averaged over the batch:
///
/// `total = mlm + λ1·proto + λ2·lineage + λ3·gmve + head`.
///
/// Each cell and prototype gets its own encoder graph; a small head graph
/// treats their pooled embeddings as leaves, and its leaf gradients seed the
/// encoder graphs' backward passes.
pub fn batch_objective(
    state: &ModelState,
    trainable: &[bool],
    objective: &Objective,
    items: &[BatchItem],
    dropout_seed: Option<u64>,
) -> Result<(LossTerms, Grads)> {
    let b = items.len();
    let mut grads = Grads::new(&state.params);
    if b == 0 {
        return Ok((LossTerms::default(), grads));
    }
    let inv_b = 1.0 / b as f64;
    let w = &objective.weights;
    let pad = state.pad_id();
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let cfg = &state.config;

    // Cell encoder graphs.
    let mut cell_graphs: Vec<Option<(Graph, Option<Var>, Var)>> = Vec::with_capacity(b);
    let mut embeddings: Vec<Vec<f64>> = Vec::with_capacity(b);
    let mut mlm_sum = 0.0;
    for item in items {
        let needs_encoder = objective.use_mlm || item.cached.is_none();
        if !needs_encoder {
            embeddings.push(item.cached.clone().expect("cached embedding"));
            cell_graphs.push(None);
            continue;
        }
        let mut g = Graph::new(&state.params, trainable);
        let mut ctx = rng.as_mut().map(|rng| DropoutCtx { rng });
        let pass = encoder_forward(
            &mut g,
            "cell",
            &cfg.cell,
            state.adapter.as_ref(),
            &item.seq.tokens,
            pad,
            &mut ctx,
        )?;
        let nll = if objective.use_mlm && !item.seq.masked.is_empty() {
            let rows = g.gather_rows(pass.hidden, &item.seq.masked);
            let logits = mlm_logits(&mut g, rows);
            let nll = mlm_loss_graph(&mut g, logits, &item.seq.targets);
            mlm_sum += g.scalar(nll);
            Some(nll)
        } else {
            None
        };
        embeddings.push(g.value(pass.pooled).data().to_vec());
        cell_graphs.push(Some((g, nll, pass.pooled)));
    }

    // Prototype graphs.
    let mut proto_graphs = Vec::new();
    let mut proto_rows = Vec::new();
    if let Some(protos) = objective.prototypes.filter(|_| objective.use_prototype_term) {
        for tokens in &protos.tokens {
            let mut g = Graph::new(&state.params, trainable);
            let mut ctx = rng.as_mut().map(|rng| DropoutCtx { rng });
            let pass = encoder_forward(&mut g, "marker", &cfg.marker, None, tokens, pad, &mut ctx)?;
            proto_rows.push(g.value(pass.pooled).data().to_vec());
            proto_graphs.push((g, pass.pooled));
        }
    }

    let mut terms = LossTerms {
        mlm: mlm_sum * inv_b,
        ..LossTerms::default()
    };

    let mut cell_seeds: Vec<Option<Tensor>> = vec![None; b];
    let mut proto_seeds: Vec<Option<Tensor>> = vec![None; proto_graphs.len()];
    if objective.needs_embeddings() {
        let mut g = Graph::new(&state.params, trainable);
        let h = g.variable(Tensor::from_rows(&embeddings));
        let labels: Vec<usize> = items.iter().map(|i| i.label).collect();
        let mut parts: Vec<Var> = Vec::new();
        let mut proto_var = None;
        if let Some(protos) = objective.prototypes.filter(|_| objective.use_prototype_term) {
            let p = g.variable(Tensor::from_rows(&proto_rows));
            proto_var = Some(p);
            let loss = prototype_loss_graph(&mut g, h, p, &labels, objective.temperature);
            let loss = g.scale(loss, inv_b);
            terms.prototype = g.scalar(loss);
            if w.lambda1 != 0.0 {
                parts.push(g.scale(loss, w.lambda1));
            }
            debug_assert_eq!(protos.classes.len(), proto_rows.len());
        }
        if objective.use_lineage {
            let protos = objective
                .prototypes
                .ok_or_else(|| Error::InvalidConfig("lineage term needs class names and pairs".into()))?;
            if let Some(loss) = lineage_loss_graph(&mut g, h, &labels, &protos.classes, &protos.pairs) {
                terms.lineage = g.scalar(loss);
                if w.lambda2 != 0.0 {
                    parts.push(g.scale(loss, w.lambda2));
                }
            }
        }
        if objective.use_gmve {
            let mut kls = Vec::with_capacity(b);
            for (i, item) in items.iter().enumerate() {
                let hi = g.gather_rows(h, &[i]);
                kls.push(gmve_kl_graph(&mut g, &cfg.gmve, hi, objective.kl_samples, item.kl_seed));
            }
            let all = g.concat_rows(&kls);
            let s = g.sum_all(all);
            let loss = g.scale(s, inv_b);
            terms.gmve = g.scalar(loss);
            if w.lambda3 != 0.0 {
                parts.push(g.scale(loss, w.lambda3));
            }
        }
        match objective.head {
            HeadLoss::None => {}
            HeadLoss::Identity => {
                let logits = identity_logits(&mut g, h);
                let logp = g.log_softmax_rows(logits);
                let idx: Vec<(usize, usize)> = labels.iter().enumerate().map(|(i, &l)| (i, l)).collect();
                let picked = g.pick(logp, &idx);
                let s = g.sum_all(picked);
                let loss = g.scale(s, -inv_b);
                terms.task = g.scalar(loss);
                parts.push(loss);
            }
            HeadLoss::Perturbation => {
                let pred = perturbation_output(&mut g, h);
                let target: Vec<Vec<f64>> = items
                    .iter()
                    .map(|i| {
                        i.delta
                            .clone()
                            .ok_or_else(|| Error::IncompatibleTask("cell lacks a perturbation delta".into()))
                    })
                    .collect::<Result<_>>()?;
                let genes = target[0].len() as f64;
                let t = g.input(Tensor::from_rows(&target));
                let diff = g.sub(pred, t);
                let sq = g.mul(diff, diff);
                let s = g.sum_all(sq);
                let loss = g.scale(s, inv_b / genes);
                terms.task = g.scalar(loss);
                parts.push(loss);
            }
        }
        if !parts.is_empty() {
            let mut total = parts[0];
            for &p in &parts[1..] {
                total = g.add(total, p);
            }
            let bp = g.backward_scalar(total);
            grads.merge(bp.param_grads());
            if let Some(dh) = bp.grad(h) {
                for (i, seed) in cell_seeds.iter_mut().enumerate() {
                    *seed = Some(Tensor::row_vector(dh.row(i).to_vec()));
                }
            }
            if let Some(dp) = proto_var.and_then(|p| bp.grad(p)) {
                for (j, seed) in proto_seeds.iter_mut().enumerate() {
                    *seed = Some(Tensor::row_vector(dp.row(j).to_vec()));
                }
            }
        }
    }

    let mut reg = 0.0;
    if objective.use_mlm && w.alpha_reg != 0.0 {
        reg = w.alpha_reg * l2_regularizer(&state.params, trainable);
    }
    terms.mlm += reg;
    terms.total =
        terms.mlm + w.lambda1 * terms.prototype + w.lambda2 * terms.lineage + w.lambda3 * terms.gmve + terms.task;
    if !terms.total.is_finite() {
        return Err(Error::NonFiniteInput("training loss"));
    }

    if trainable.iter().any(|t| *t) {
        for (slot, seed) in cell_graphs.iter().zip(cell_seeds) {
            let Some((g, nll, pooled)) = slot else { continue };
            let mut seeds = Vec::with_capacity(2);
            if let Some(nll) = nll {
                seeds.push((*nll, Tensor::scalar(inv_b)));
            }
            if let Some(s) = seed {
                seeds.push((*pooled, s));
            }
            if !seeds.is_empty() {
                grads.merge(g.backward(&seeds).param_grads());
            }
        }
        for ((g, pooled), seed) in proto_graphs.iter().zip(proto_seeds) {
            if let Some(s) = seed {
                grads.merge(g.backward(&[(*pooled, s)]).param_grads());
            }
        }
        if reg != 0.0 {
            for (id, _, t) in state.params.iter() {
                if trainable[id.index()] {
                    let mut d = t.clone();
                    d.scale_assign(2.0 * w.alpha_reg);
                    grads.accumulate(id, &d);
                }
            }
        }
    }
    Ok((terms, grads))
}

/// Parameters trained by `stage` in `mode` (for fine-tuning, on `task`).
pub fn trainable_filter(
    state: &ModelState,
    stage: StageKind,
    mode: TrainMode,
    task: Task,
    gmve_in_fine_tune: bool,
) -> Vec<bool> {
    let cell_cfg = state.config.cell.clone();
    let aux = |n: &str| n.starts_with("mlm.") || n.starts_with("marker.") || n.starts_with("gmve.");
    let head_prefix = match task {
        Task::Identity => "head.identity.",
        Task::Perturbation => "head.perturbation.",
        Task::Imputation => "mlm.",
    };
    state.trainable_mask(|n| match stage {
        StageKind::Pretrain => (n.starts_with("cell.") && !is_adapter(n)) || n.starts_with("mlm."),
        StageKind::PostPretrain => match mode {
            TrainMode::Ff => !n.starts_with("head."),
            TrainMode::Ll => is_last_layer(n, &cell_cfg) || aux(n),
            TrainMode::Lora => is_adapter(n) || aux(n),
            TrainMode::Lp => aux(n),
        },
        StageKind::FineTune => {
            let head = n.starts_with(head_prefix) || (gmve_in_fine_tune && n.starts_with("gmve."));
            head || match mode {
                TrainMode::Lp => false,
                TrainMode::Ll => is_last_layer(n, &cell_cfg),
                TrainMode::Ff => n.starts_with("cell."),
                TrainMode::Lora => is_adapter(n),
            }
        }
    })
}

/// Fresh, untrained model sized by `settings` for the dataset's genes.
pub fn init_model(data: &ExpressionDataset, settings: &ModelSettings, seed: u64) -> Result<ModelState> {
    ModelState::init(
        settings.model_config(data.num_genes() + 2),
        derive_seed(seed, &[PURPOSE_INIT]),
    )
}

fn check_vocab(state: &ModelState, data: &ExpressionDataset) -> Result<()> {
    if state.config.cell.vocab_size != data.num_genes() + 2 {
        return Err(Error::Checkpoint(format!(
            "model vocabulary has {} genes, dataset has {}",
            state.config.cell.vocab_size - 2,
            data.num_genes()
        )));
    }
    Ok(())
}

fn check_stage(state: &ModelState, cfg: &TrainConfig, requested: StageKind) -> Result<()> {
    if cfg.stage != requested {
        return Err(Error::InvalidConfig(format!(
            "config is for stage {}, not {}",
            cfg.stage.name(),
            requested.name()
        )));
    }
    if !requested.accepts(state.stage) {
        return Err(Error::StageOrderViolation {
            found: state.stage,
            requested: requested.name().into(),
        });
    }
    Ok(())
}

/// Per-class cap of `n` cells, chosen by seeded sampling; order preserved.
pub fn few_shot_subsample(indices: &[usize], labels: &[usize], n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: BTreeSet<usize> = indices.iter().map(|&i| labels[i]).collect();
    let mut keep = BTreeSet::new();
    for c in classes {
        let members: Vec<usize> = indices.iter().copied().filter(|&i| labels[i] == c).collect();
        if members.len() <= n {
            keep.extend(members);
        } else {
            keep.extend(
                index::sample(&mut rng, members.len(), n)
                    .into_iter()
                    .map(|j| members[j]),
            );
        }
    }
    indices.iter().copied().filter(|i| keep.contains(i)).collect()
}

/// Everything the epoch loop needs besides the model.
struct RunPlan<'a> {
    cfg: &'a TrainConfig,
    stage: StageKind,
    task: Option<Task>,
    objective: Objective<'a>,
    corpus: &'a Corpus,
    labels: Vec<usize>,
    deltas: Option<Vec<Vec<f64>>>,
    train: Vec<usize>,
    val: Vec<usize>,
    mask: bool,
    /// Encoder frozen: embed each cell once, in eval mode.
    cache_embeddings: bool,
}

impl RunPlan<'_> {
    fn item(&self, cell: usize, mask_seed: u64, kl_seed: u64, cache: &[Option<Vec<f64>>]) -> Result<BatchItem> {
        let seq = TokenSequence::unmasked(self.corpus.tokens[cell].clone());
        let seq = if self.mask {
            mask_tokens(&seq, &self.corpus.vocab, self.cfg.mask_rate, mask_seed)?
        } else {
            seq
        };
        Ok(BatchItem {
            seq,
            label: self.labels[cell],
            delta: self.deltas.as_ref().map(|d| d[cell].clone()),
            kl_seed,
            cached: cache.get(cell).cloned().flatten(),
        })
    }
}

fn run(mut state: ModelState, plan: RunPlan) -> Result<TrainOutcome> {
    let cfg = plan.cfg;
    if plan.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let trainable = trainable_filter(&state, plan.stage, cfg.mode, cfg.task, cfg.gmve_in_fine_tune);
    let seed = cfg.seed;
    let batches_per_epoch = plan.train.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epoch_cap;
    let mut opt = AdamW::new(state.params.len(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = state.params.clone();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::EpochCap;
    let mut step = 0usize;

    let mut cache: Vec<Option<Vec<f64>>> = Vec::new();
    if plan.cache_embeddings {
        cache = vec![None; plan.corpus.tokens.len()];
        for &i in plan.train.iter().chain(&plan.val) {
            cache[i] = Some(state.embed(&TokenSequence::unmasked(plan.corpus.tokens[i].clone()))?);
        }
    }

    for epoch in 1..=cfg.epoch_cap {
        let mut order = plan.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            &[PURPOSE_ORDER, epoch as u64],
        )));
        let mut sums = LossTerms::default();
        let mut masked_tokens = 0usize;
        let mut lr = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            step += 1;
            let e = epoch as u64;
            let items: Vec<BatchItem> = chunk
                .iter()
                .map(|&c| {
                    plan.item(
                        c,
                        derive_seed(seed, &[PURPOSE_MASK, e, c as u64]),
                        derive_seed(seed, &[PURPOSE_KL, e, c as u64]),
                        &cache,
                    )
                })
                .collect::<Result<_>>()?;
            masked_tokens += items.iter().map(|i| i.seq.masked.len()).sum::<usize>();
            let dropout_seed = derive_seed(seed, &[PURPOSE_DROPOUT, e, bi as u64]);
            let (terms, grads) = batch_objective(&state, &trainable, &plan.objective, &items, Some(dropout_seed))?;
            lr = learning_rate(step, cfg.warmup_steps, total_steps, cfg.lr_peak);
            opt.step(&mut state.params, &trainable, &grads, lr);
            sums.add_scaled(&terms, chunk.len() as f64);
        }
        let n = plan.train.len() as f64;
        let mlm_per_token = if masked_tokens > 0 {
            sums.mlm / masked_tokens as f64
        } else {
            0.0
        };
        let mut train = LossTerms::default();
        train.add_scaled(&sums, 1.0 / n);

        let val_loss = if plan.val.is_empty() {
            train.total
        } else {
            let mut acc = 0.0;
            for chunk in plan.val.chunks(cfg.batch_size) {
                let items: Vec<BatchItem> = chunk
                    .iter()
                    .map(|&c| {
                        plan.item(
                            c,
                            derive_seed(seed, &[PURPOSE_VAL, PURPOSE_MASK, c as u64]),
                            derive_seed(seed, &[PURPOSE_VAL, PURPOSE_KL, c as u64]),
                            &cache,
                        )
                    })
                    .collect::<Result<_>>()?;
                let none = vec![false; state.params.len()];
                let (terms, _) = batch_objective(&state, &none, &plan.objective, &items, None)?;
                acc += terms.total * chunk.len() as f64;
            }
            acc / plan.val.len() as f64
        };
        epochs.push(EpochRecord {
            epoch,
            train,
            val_loss,
            learning_rate: lr,
            mlm_per_token,
        });
        let stop = stopper.observe(epoch, val_loss);
        if stopper.improved_at(epoch) {
            best = state.params.clone();
        }
        if stop {
            stop_reason = StopReason::Patience;
            break;
        }
        if plan.stage == StageKind::Pretrain {
            if let Some(th) = cfg.mlm_loss_threshold {
                if masked_tokens > 0 && mlm_per_token <= th {
                    stop_reason = StopReason::MlmThreshold;
                    break;
                }
            }
        }
    }
    let stopping_epoch = epochs.len();
    let best_epoch = stopper.best_epoch().max(1);
    if stopper.best_epoch() > 0 {
        state.params = best;
    }
    state.stage = Some(plan.stage.output_stage());
    state.seeds.runs.push((plan.stage.name().to_owned(), seed));
    let record = RunRecord {
        stage: plan.stage,
        mode: cfg.mode,
        task: plan.task,
        seed,
        config_hash: cfg.hash(),
        epochs,
        stopping_epoch,
        best_epoch,
        stop_reason,
        train_cells: plan.train.len(),
        val_cells: plan.val.len(),
    };
    Ok(TrainOutcome { state, record })
}

fn mlm_objective<'a>(weights: &LossWeights) -> Objective<'a> {
    Objective {
        weights: LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            alpha_reg: weights.alpha_reg,
        },
        use_mlm: true,
        prototypes: None,
        use_prototype_term: false,
        use_lineage: false,
        use_gmve: false,
        head: HeadLoss::None,
        kl_samples: 1,
        temperature: 1.0,
    }
}

/// Masked-token pretraining on the training split.
pub fn pretrain(state: ModelState, data: &ExpressionDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_stage(&state, cfg, StageKind::Pretrain)?;
    check_vocab(&state, data)?;
    let corpus = Corpus::new(data, state.config.cell.max_len)?;
    let plan = RunPlan {
        cfg,
        stage: StageKind::Pretrain,
        task: None,
        objective: mlm_objective(&cfg.weights),
        corpus: &corpus,
        labels: vec![0; data.num_cells()],
        deltas: None,
        train: data.indices(Split::Train),
        val: data.indices(Split::Val),
        mask: true,
        cache_embeddings: false,
    };
    run(state, plan)
}

fn maybe_attach_adapters(state: ModelState, cfg: &TrainConfig) -> Result<ModelState> {
    if cfg.mode == TrainMode::Lora && state.adapter.is_none() {
        state.attach_adapters(cfg.adapter.clone(), derive_seed(cfg.seed, &[PURPOSE_ADAPTER]))
    } else {
        Ok(state)
    }
}

fn label_indices(data: &ExpressionDataset, classes: &[String]) -> Result<Vec<usize>> {
    data.meta
        .iter()
        .map(|m| {
            classes
                .iter()
                .position(|c| c == &m.cell_type)
                .ok_or_else(|| Error::LabelSpaceMismatch(format!("unknown label `{}`", m.cell_type)))
        })
        .collect()
}

/// Optimizes the full objective: MLM plus the weighted prototype, lineage and
/// GMVE terms. Prototypes are re-encoded from the current marker encoder at
/// every step. Terms with zero weight are skipped entirely, so all-zero
/// weights reproduce MLM training exactly.
pub fn post_pretrain(
    state: ModelState,
    data: &ExpressionDataset,
    ontology: &CellOntology,
    catalog: &MarkerCatalog,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_stage(&state, cfg, StageKind::PostPretrain)?;
    check_vocab(&state, data)?;
    let state = maybe_attach_adapters(state, cfg)?;
    let corpus = Corpus::new(data, state.config.cell.max_len)?;
    let classes = data.label_space();
    let labels = label_indices(data, &classes)?;
    let w = &cfg.weights;
    let protos = if w.lambda1 != 0.0 || w.lambda2 != 0.0 {
        Some(PrototypeSet::build(
            &classes,
            ontology,
            catalog,
            &corpus.vocab,
            cfg.prototype_len,
        )?)
    } else {
        None
    };
    let plan = RunPlan {
        cfg,
        stage: StageKind::PostPretrain,
        task: None,
        objective: Objective {
            weights: w.clone(),
            use_mlm: true,
            prototypes: protos.as_ref(),
            use_prototype_term: w.lambda1 != 0.0,
            use_lineage: w.lambda2 != 0.0,
            use_gmve: w.lambda3 != 0.0,
            head: HeadLoss::None,
            kl_samples: cfg.kl_samples,
            temperature: cfg.temperature,
        },
        corpus: &corpus,
        labels,
        deltas: None,
        train: data.indices(Split::Train),
        val: data.indices(Split::Val),
        mask: true,
        cache_embeddings: false,
    };
    run(state, plan)
}

/// Held-out types for perturbation fine-tuning: configured, or the rarest.
pub fn perturbation_holdout(data: &ExpressionDataset, cfg: &TrainConfig) -> Vec<String> {
    if !cfg.held_out_types.is_empty() {
        return cfg.held_out_types.clone();
    }
    let counts = data.type_counts();
    counts
        .iter()
        .min_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(b.0)))
        .map(|(t, _)| vec![t.clone()])
        .unwrap_or_default()
}

/// Attaches the task head and trains the parameters selected by `cfg.mode`.
pub fn fine_tune(state: ModelState, data: &ExpressionDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_stage(&state, cfg, StageKind::FineTune)?;
    check_vocab(&state, data)?;
    let mut state = maybe_attach_adapters(state, cfg)?;
    let corpus = Corpus::new(data, state.config.cell.max_len)?;
    let classes = data.label_space();
    let labels = label_indices(data, &classes)?;
    let mut train = data.indices(Split::Train);
    let mut val = data.indices(Split::Val);
    let head_seed = derive_seed(cfg.seed, &[PURPOSE_HEAD]);
    let mut deltas = None;
    let head = match cfg.task {
        Task::Identity => {
            state.attach_head(
                TaskHead::Identity {
                    classes: classes.clone(),
                },
                head_seed,
            );
            HeadLoss::Identity
        }
        Task::Imputation => {
            state.attach_head(TaskHead::Imputation, head_seed);
            HeadLoss::None
        }
        Task::Perturbation => {
            let post = data
                .perturbed
                .as_ref()
                .ok_or_else(|| Error::IncompatibleTask("perturbation needs paired pre/post data".into()))?;
            let held_out = perturbation_holdout(data, cfg);
            for t in &held_out {
                if !classes.contains(t) {
                    return Err(Error::UnknownCellType(t.clone()));
                }
            }
            let keep = |i: &usize| !held_out.contains(&data.meta[*i].cell_type);
            train.retain(keep);
            val.retain(keep);
            deltas = Some(
                (0..data.num_cells())
                    .map(|i| post.row(i).iter().zip(data.expression(i)).map(|(a, b)| a - b).collect())
                    .collect(),
            );
            state.attach_head(
                TaskHead::Perturbation {
                    num_genes: data.num_genes(),
                    held_out,
                },
                head_seed,
            );
            HeadLoss::Perturbation
        }
    };
    if let Some(n) = cfg.few_shot_n {
        train = few_shot_subsample(&train, &labels, n, derive_seed(cfg.seed, &[PURPOSE_FEW_SHOT]));
    }
    let trainable = trainable_filter(&state, StageKind::FineTune, cfg.mode, cfg.task, cfg.gmve_in_fine_tune);
    let encoder_frozen = state
        .params
        .iter()
        .all(|(id, n, _)| !(n.starts_with("cell.") && trainable[id.index()]));
    let use_gmve = cfg.gmve_in_fine_tune && cfg.weights.lambda3 != 0.0;
    let is_imputation = cfg.task == Task::Imputation;
    let plan = RunPlan {
        cfg,
        stage: StageKind::FineTune,
        task: Some(cfg.task),
        objective: Objective {
            weights: LossWeights {
                lambda1: 0.0,
                lambda2: 0.0,
                lambda3: if use_gmve { cfg.weights.lambda3 } else { 0.0 },
                alpha_reg: if is_imputation { cfg.weights.alpha_reg } else { 0.0 },
            },
            use_mlm: is_imputation,
            prototypes: None,
            use_prototype_term: false,
            use_lineage: false,
            use_gmve,
            head,
            kl_samples: cfg.kl_samples,
            temperature: cfg.temperature,
        },
        corpus: &corpus,
        labels,
        deltas,
        train,
        val,
        mask: is_imputation,
        cache_embeddings: encoder_frozen && !is_imputation,
    };
    run(state, plan)
}
