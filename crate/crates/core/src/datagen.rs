//! Synthetic long-tailed single-cell data.
//!
//! Expression of gene `g` in a cell of type `T`, batch `b` and depth `d`:
//!
//! ```text
//! x = d * (s * exp(mu_g + sigma * eps - sigma^2 / 2)
//!          + f * s * [g marks T or an ancestor of T]
//!          + shift[b][g])
//! ```
//!
//! where `s` is the base scale, `f` the marker over-expression factor and
//! `shift` a non-negative per-batch offset. Type counts follow
//! `rank^(-1/alpha)`.
//!
//! Randomness is split into independent ChaCha streams (gene means, marker
//! placement, batch offsets, cells, perturbation) so that changing how many
//! cells are drawn leaves the underlying "biology" untouched.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{CellMeta, DatasetBundle, ExpressionDataset, Split};
use crate::error::{Error, Result};
use crate::ontology::{CellOntology, Marker, MarkerCatalog};
use crate::tensor::Tensor;

const STREAM_GENES: u64 = 1;
const STREAM_MARKERS: u64 = 2;
const STREAM_BATCHES: u64 = 3;
const STREAM_CELLS: u64 = 4;
const STREAM_OOD: u64 = 5;
const STREAM_SIGNATURE: u64 = 6;
const STREAM_PERTURB: u64 = 7;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn yes() -> bool {
    true
}

/// One node of the generated ontology. `parent = None` hangs it under the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeSpec {
    pub name: String,
    #[serde(default)]
    pub parent: Option<String>,
    /// Whether cells of this type are sampled. Internal lineage nodes usually
    /// only contribute markers.
    #[serde(default = "yes")]
    pub labeled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { val: 0.15, test: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    /// Explicit per-gene delta. When empty, a sparse signature is drawn:
    /// `affected_genes` genes get `±magnitude * base_scale`.
    pub signature: Vec<f64>,
    pub affected_genes: usize,
    pub magnitude: f64,
    pub noise_sd: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            signature: Vec::new(),
            affected_genes: 16,
            magnitude: 1.0,
            noise_sd: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_genes: usize,
    pub num_cells: usize,
    pub root: String,
    /// Ordered by intended abundance: labeled types earlier in the list are
    /// more frequent.
    pub cell_types: Vec<TypeSpec>,
    pub tail_exponent: f64,
    /// Equal type frequencies (the `alpha -> infinity` limit).
    pub uniform: bool,
    pub markers_per_type: usize,
    pub marker_factor: f64,
    pub base_scale: f64,
    /// Spread of per-gene log means.
    pub gene_spread: f64,
    /// Per-cell log-normal noise.
    pub noise_sd: f64,
    pub num_batches: usize,
    pub batch_shift: f64,
    pub depth_range: (f64, f64),
    pub split: SplitFractions,
    /// Extra cells from an unseen batch with its own shift, tagged `ood`.
    pub ood_cells: usize,
    pub ood_shift: f64,
    pub ood_depth_range: (f64, f64),
    pub perturbation: Option<PerturbationConfig>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_genes: 160,
            num_cells: 3000,
            root: "cell".into(),
            cell_types: default_tree(3, 4),
            tail_exponent: 0.4,
            uniform: false,
            markers_per_type: 8,
            marker_factor: 2.0,
            base_scale: 1.0,
            gene_spread: 0.5,
            noise_sd: 0.5,
            num_batches: 2,
            batch_shift: 0.5,
            depth_range: (0.5, 1.5),
            split: SplitFractions::default(),
            ood_cells: 0,
            ood_shift: 1.0,
            ood_depth_range: (0.3, 2.0),
            perturbation: None,
            seed: 0,
        }
    }
}

/// `lineages` internal unlabeled nodes under the root, each with `leaves`
/// labeled children. Leaves are listed leaf-major (`L0.T0, L1.T0, ...`) so
/// that abundance interleaves lineages.
pub fn default_tree(lineages: usize, leaves: usize) -> Vec<TypeSpec> {
    let mut out: Vec<TypeSpec> = (0..lineages)
        .map(|l| TypeSpec {
            name: format!("lineage_{l}"),
            parent: None,
            labeled: false,
        })
        .collect();
    for t in 0..leaves {
        for l in 0..lineages {
            out.push(TypeSpec {
                name: format!("type_{l}_{t}"),
                parent: Some(format!("lineage_{l}")),
                labeled: true,
            });
        }
    }
    out
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !self.uniform && !(self.tail_exponent > 0.0 && self.tail_exponent.is_finite()) {
            return bad(format!("tail_exponent must be > 0, got {}", self.tail_exponent));
        }
        if self.markers_per_type == 0 {
            return bad("markers_per_type must be >= 1".into());
        }
        let needed = self.cell_types.len() * self.markers_per_type;
        if needed > self.num_genes {
            return bad(format!(
                "{} types x {} markers need {needed} genes, only {} configured",
                self.cell_types.len(),
                self.markers_per_type,
                self.num_genes
            ));
        }
        let labeled = self.cell_types.iter().filter(|t| t.labeled).count();
        if labeled == 0 {
            return bad("no labeled cell types".into());
        }
        if self.num_cells < labeled {
            return bad(format!("{} cells cannot cover {labeled} types", self.num_cells));
        }
        if self.num_batches == 0 {
            return bad("num_batches must be >= 1".into());
        }
        for (name, v) in [
            ("marker_factor", self.marker_factor),
            ("batch_shift", self.batch_shift),
            ("ood_shift", self.ood_shift),
            ("noise_sd", self.noise_sd),
            ("gene_spread", self.gene_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        if !(self.base_scale > 0.0 && self.base_scale.is_finite()) {
            return bad("base_scale must be > 0".into());
        }
        for (name, (lo, hi)) in [
            ("depth_range", self.depth_range),
            ("ood_depth_range", self.ood_depth_range),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} must satisfy 0 < lo <= hi"));
            }
        }
        let SplitFractions { val, test } = self.split;
        if !(val >= 0.0 && test >= 0.0 && val + test < 1.0) {
            return bad("split fractions must be >= 0 and sum below 1".into());
        }
        if let Some(p) = &self.perturbation {
            if !p.signature.is_empty() && p.signature.len() != self.num_genes {
                return bad(format!(
                    "perturbation signature has {} entries, expected {}",
                    p.signature.len(),
                    self.num_genes
                ));
            }
            if p.signature.is_empty() && p.affected_genes > self.num_genes {
                return bad("perturbation affects more genes than exist".into());
            }
            if !(p.noise_sd >= 0.0) {
                return bad("perturbation noise_sd must be >= 0".into());
            }
        }
        self.ontology()?;
        Ok(())
    }

    pub fn ontology(&self) -> Result<CellOntology> {
        let mut nodes = vec![self.root.clone()];
        nodes.extend(self.cell_types.iter().map(|t| t.name.clone()));
        let edges: Vec<(String, String)> = self
            .cell_types
            .iter()
            .map(|t| (t.parent.clone().unwrap_or_else(|| self.root.clone()), t.name.clone()))
            .collect();
        CellOntology::new(nodes, &edges).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn labeled_types(&self) -> Vec<&str> {
        self.cell_types
            .iter()
            .filter(|t| t.labeled)
            .map(|t| t.name.as_str())
            .collect()
    }
}

/// Frequencies `rank^(-1/alpha)` (or uniform) apportioned to `total` cells by
/// largest remainder, each type receiving at least one cell.
pub fn apportion(num_types: usize, total: usize, tail_exponent: f64, uniform: bool) -> Vec<usize> {
    if num_types == 0 {
        return Vec::new();
    }
    let weights: Vec<f64> = (1..=num_types)
        .map(|r| {
            if uniform {
                1.0
            } else {
                (r as f64).powf(-1.0 / tail_exponent)
            }
        })
        .collect();
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..num_types).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    // Guarantee every type is present by borrowing from the most abundant.
    for i in 0..num_types {
        if counts[i] == 0 {
            let donor = (0..num_types).max_by_key(|&j| (counts[j], usize::MAX - j)).unwrap();
            if counts[donor] > 1 {
                counts[donor] -= 1;
                counts[i] = 1;
            }
        }
    }
    counts
}

/// Fixed parts of the generative process, independent of how many cells are drawn.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    cfg: GeneratorConfig,
    ontology: CellOntology,
    catalog: MarkerCatalog,
    genes: Vec<String>,
    log_means: Vec<f64>,
    /// Per labeled type: indicator of genes over-expressed in its cells.
    signal: BTreeMap<String, Vec<bool>>,
    batch_offsets: Vec<Vec<f64>>,
    ood_offsets: Vec<f64>,
}

impl SyntheticWorld {
    pub fn new(cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let ontology = cfg.ontology()?;
        let genes: Vec<String> = (0..cfg.num_genes).map(|g| format!("G{g:04}")).collect();

        let mut rng = stream(cfg.seed, STREAM_GENES);
        let log_means: Vec<f64> = (0..cfg.num_genes).map(|_| cfg.gene_spread * normal(&mut rng)).collect();

        let mut pool: Vec<usize> = (0..cfg.num_genes).collect();
        pool.shuffle(&mut stream(cfg.seed, STREAM_MARKERS));
        let mut own: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut entries = BTreeMap::new();
        for (i, t) in cfg.cell_types.iter().enumerate() {
            let mut chunk = pool[i * cfg.markers_per_type..(i + 1) * cfg.markers_per_type].to_vec();
            chunk.sort_unstable();
            let level = ontology.level(&t.name).expect("type is in ontology");
            entries.insert(
                t.name.clone(),
                chunk
                    .iter()
                    .map(|&g| Marker {
                        gene: genes[g].clone(),
                        level,
                    })
                    .collect(),
            );
            own.insert(t.name.clone(), chunk);
        }
        let mut signal = BTreeMap::new();
        for t in cfg.cell_types.iter().filter(|t| t.labeled) {
            let mut mask = vec![false; cfg.num_genes];
            let lineage = std::iter::once(t.name.as_str()).chain(ontology.ancestors(&t.name));
            for node in lineage {
                for &g in own.get(node).map(Vec::as_slice).unwrap_or(&[]) {
                    mask[g] = true;
                }
            }
            signal.insert(t.name.clone(), mask);
        }

        let mut rng = stream(cfg.seed, STREAM_BATCHES);
        let batch_offsets = (0..cfg.num_batches)
            .map(|_| {
                (0..cfg.num_genes)
                    .map(|_| cfg.batch_shift * cfg.base_scale * normal(&mut rng).abs())
                    .collect()
            })
            .collect();
        let mut rng = stream(cfg.seed, STREAM_OOD);
        let ood_offsets = (0..cfg.num_genes)
            .map(|_| cfg.ood_shift * cfg.base_scale * normal(&mut rng).abs())
            .collect();

        Ok(Self {
            cfg: cfg.clone(),
            ontology,
            catalog: MarkerCatalog::new(entries),
            genes,
            log_means,
            signal,
            batch_offsets,
            ood_offsets,
        })
    }

    pub fn ontology(&self) -> &CellOntology {
        &self.ontology
    }

    pub fn catalog(&self) -> &MarkerCatalog {
        &self.catalog
    }

    /// Cell counts per labeled type, in configuration order.
    pub fn type_counts(&self) -> Vec<(String, usize)> {
        let labeled = self.cfg.labeled_types();
        let counts = apportion(
            labeled.len(),
            self.cfg.num_cells,
            self.cfg.tail_exponent,
            self.cfg.uniform,
        );
        labeled.into_iter().map(str::to_owned).zip(counts).collect()
    }

    fn expression(&self, rng: &mut ChaCha8Rng, cell_type: &str, offsets: &[f64], depth: f64) -> Vec<f64> {
        let c = &self.cfg;
        let mask = &self.signal[cell_type];
        let half_var = 0.5 * c.noise_sd * c.noise_sd;
        (0..c.num_genes)
            .map(|g| {
                let base = c.base_scale * (self.log_means[g] + c.noise_sd * normal(rng) - half_var).exp();
                let marker = if mask[g] { c.marker_factor * c.base_scale } else { 0.0 };
                depth * (base + marker + offsets[g])
            })
            .collect()
    }

    /// Draws a dataset with the given per-type counts from stream `cell_seed`.
    pub fn sample(&self, counts: &[(String, usize)], cell_seed: u64) -> Result<ExpressionDataset> {
        let c = &self.cfg;
        for (t, _) in counts {
            if !self.signal.contains_key(t) {
                return Err(Error::UnknownCellType(t.clone()));
            }
        }
        let mut rng = stream(cell_seed, STREAM_CELLS);
        let mut labels: Vec<&str> = counts
            .iter()
            .flat_map(|(t, n)| std::iter::repeat_n(t.as_str(), *n))
            .collect();
        labels.shuffle(&mut rng);

        let mut splits = vec![Split::Train; labels.len()];
        for (t, n) in counts {
            let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == t).collect();
            idx.shuffle(&mut rng);
            let (n_val, n_test) = split_sizes(*n, &c.split);
            for &i in &idx[..n_test] {
                splits[i] = Split::Test;
            }
            for &i in &idx[n_test..n_test + n_val] {
                splits[i] = Split::Val;
            }
        }

        let total = labels.len() + c.ood_cells;
        let mut data = Vec::with_capacity(total * c.num_genes);
        let mut meta = Vec::with_capacity(total);
        for (i, t) in labels.iter().enumerate() {
            let batch = rng.random_range(0..c.num_batches);
            let depth = uniform_in(&mut rng, c.depth_range);
            data.extend(self.expression(&mut rng, t, &self.batch_offsets[batch], depth));
            meta.push(CellMeta {
                cell_id: format!("cell_{i:06}"),
                cell_type: (*t).to_owned(),
                batch,
                split: splits[i],
            });
        }
        if c.ood_cells > 0 {
            let ood_counts = apportion(counts.len(), c.ood_cells, c.tail_exponent, c.uniform);
            let mut ood_labels: Vec<&str> = counts
                .iter()
                .zip(&ood_counts)
                .flat_map(|((t, _), n)| std::iter::repeat_n(t.as_str(), *n))
                .collect();
            ood_labels.shuffle(&mut rng);
            for (j, t) in ood_labels.iter().enumerate() {
                let depth = uniform_in(&mut rng, c.ood_depth_range);
                data.extend(self.expression(&mut rng, t, &self.ood_offsets, depth));
                meta.push(CellMeta {
                    cell_id: format!("cell_{:06}", labels.len() + j),
                    cell_type: (*t).to_owned(),
                    batch: c.num_batches,
                    split: Split::Ood,
                });
            }
        }
        let rows = meta.len();
        let mut ds = ExpressionDataset::new(self.genes.clone(), Tensor::from_vec(rows, c.num_genes, data), meta)?;
        if let Some(p) = &c.perturbation {
            let signature = self.signature(p);
            ds = apply_perturbation(&ds, &signature, p.noise_sd, cell_seed)?;
        }
        Ok(ds)
    }

    /// Per-gene perturbation delta for this world.
    pub fn signature(&self, p: &PerturbationConfig) -> Vec<f64> {
        if !p.signature.is_empty() {
            return p.signature.clone();
        }
        let mut rng = stream(self.cfg.seed, STREAM_SIGNATURE);
        let mut genes: Vec<usize> = (0..self.cfg.num_genes).collect();
        genes.shuffle(&mut rng);
        let mut sig = vec![0.0; self.cfg.num_genes];
        for &g in &genes[..p.affected_genes] {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sig[g] = sign * p.magnitude * self.cfg.base_scale;
        }
        sig
    }

    pub fn bundle(&self, dataset: ExpressionDataset) -> DatasetBundle {
        DatasetBundle {
            dataset,
            ontology: self.ontology.clone(),
            catalog: self.catalog.clone(),
        }
    }
}

fn uniform_in(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// `(val, test)` cell counts for a type with `n` cells; train keeps at least
/// one cell, then test, then val get one each when possible.
fn split_sizes(n: usize, f: &SplitFractions) -> (usize, usize) {
    let mut test = (f.test * n as f64).round() as usize;
    let mut val = (f.val * n as f64).round() as usize;
    if n >= 2 && f.test > 0.0 {
        test = test.max(1);
    }
    if n >= 3 && f.val > 0.0 {
        val = val.max(1);
    }
    while test + val >= n && (test + val) > 0 {
        if val > 0 && (val >= test || test == 0) {
            val -= 1;
        } else {
            test -= 1;
        }
    }
    (val, test)
}

/// Generates the full dataset described by `cfg`.
pub fn generate(cfg: &GeneratorConfig) -> Result<DatasetBundle> {
    let world = SyntheticWorld::new(cfg)?;
    let ds = world.sample(&world.type_counts(), cfg.seed)?;
    Ok(world.bundle(ds))
}

/// Adds `signature` plus seeded Gaussian noise to every cell, clipping at
/// zero, and stores the result as the paired post-perturbation matrix.
pub fn apply_perturbation(
    data: &ExpressionDataset,
    signature: &[f64],
    noise_sd: f64,
    seed: u64,
) -> Result<ExpressionDataset> {
    if signature.len() != data.num_genes() {
        return Err(Error::LengthMismatch {
            expected: data.num_genes(),
            actual: signature.len(),
        });
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::InvalidConfig("noise_sd must be finite and >= 0".into()));
    }
    let mut rng = stream(seed, STREAM_PERTURB);
    let mut post = data.matrix.clone();
    for i in 0..post.rows() {
        for (v, &d) in post.row_mut(i).iter_mut().zip(signature) {
            let noise = if noise_sd > 0.0 {
                noise_sd * normal(&mut rng)
            } else {
                0.0
            };
            *v = (*v + d + noise).max(0.0);
        }
    }
    let mut out = data.clone();
    out.perturbed = Some(post);
    Ok(out)
}
