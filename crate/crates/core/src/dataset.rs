//! Expression matrices with per-cell metadata, and their on-disk layout.
//!
//! A dataset directory holds `expression.tsv` (header `cell_id` then gene
//! ids), `metadata.json` (array aligned with the matrix rows),
//! `ontology.json`, `markers.json`, and optionally `perturbed.tsv` with the
//! paired post-perturbation matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::{CatalogFile, CellOntology, MarkerCatalog, OntologyFile};
use crate::tensor::Tensor;

pub const EXPRESSION_FILE: &str = "expression.tsv";
pub const METADATA_FILE: &str = "metadata.json";
pub const ONTOLOGY_FILE: &str = "ontology.json";
pub const CATALOG_FILE: &str = "markers.json";
pub const PERTURBED_FILE: &str = "perturbed.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    /// Held-out batch with its own covariate shift.
    Ood,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellMeta {
    pub cell_id: String,
    pub cell_type: String,
    pub batch: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionDataset {
    pub genes: Vec<String>,
    /// cells × genes, non-negative.
    pub matrix: Tensor,
    pub meta: Vec<CellMeta>,
    /// Paired post-perturbation expression, same shape as `matrix`.
    pub perturbed: Option<Tensor>,
}

impl ExpressionDataset {
    pub fn new(genes: Vec<String>, matrix: Tensor, meta: Vec<CellMeta>) -> Result<Self> {
        let ds = Self {
            genes,
            matrix,
            meta,
            perturbed: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.matrix.rows() != self.meta.len() {
            return Err(Error::LengthMismatch {
                expected: self.meta.len(),
                actual: self.matrix.rows(),
            });
        }
        if self.matrix.cols() != self.genes.len() {
            return Err(Error::LengthMismatch {
                expected: self.genes.len(),
                actual: self.matrix.cols(),
            });
        }
        if self.matrix.data().iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig("expression values must be finite and >= 0".into()));
        }
        if let Some(p) = &self.perturbed {
            if p.shape() != self.matrix.shape() {
                return Err(Error::InvalidConfig("perturbed matrix shape differs".into()));
            }
        }
        let ids: BTreeSet<&str> = self.meta.iter().map(|m| m.cell_id.as_str()).collect();
        if ids.len() != self.meta.len() {
            return Err(Error::InvalidConfig("duplicate cell id".into()));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.meta.len()
    }

    pub fn num_genes(&self) -> usize {
        self.genes.len()
    }

    pub fn expression(&self, cell: usize) -> &[f64] {
        self.matrix.row(cell)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.meta.len()).filter(|&i| self.meta[i].split == split).collect()
    }

    /// Sorted distinct cell-type labels; class index order for classifiers.
    pub fn label_space(&self) -> Vec<String> {
        self.meta
            .iter()
            .map(|m| m.cell_type.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Cell count per type over the whole dataset.
    pub fn type_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for m in &self.meta {
            *out.entry(m.cell_type.clone()).or_insert(0) += 1;
        }
        out
    }

    /// Row subset, preserving order of `rows`.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let cols = self.num_genes();
        let mut data = Vec::with_capacity(rows.len() * cols);
        let mut pdata = Vec::new();
        for &r in rows {
            data.extend_from_slice(self.matrix.row(r));
            if let Some(p) = &self.perturbed {
                pdata.extend_from_slice(p.row(r));
            }
        }
        Self {
            genes: self.genes.clone(),
            matrix: Tensor::from_vec(rows.len(), cols, data),
            meta: rows.iter().map(|&r| self.meta[r].clone()).collect(),
            perturbed: self
                .perturbed
                .as_ref()
                .map(|_| Tensor::from_vec(rows.len(), cols, pdata)),
        }
    }
}

/// Dataset plus the ontology and marker catalog describing its cell types.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub dataset: ExpressionDataset,
    pub ontology: CellOntology,
    pub catalog: MarkerCatalog,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn format_matrix(ids: &[CellMeta], genes: &[String], m: &Tensor) -> String {
    let mut out = String::from("cell_id");
    for g in genes {
        out.push('\t');
        out.push_str(g);
    }
    out.push('\n');
    for (i, meta) in ids.iter().enumerate() {
        out.push_str(&meta.cell_id);
        for v in m.row(i) {
            // `{}` prints the shortest representation that parses back exactly.
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

fn parse_matrix(path: &Path, text: &str) -> Result<(Vec<String>, Vec<String>, Tensor)> {
    let bad = |reason: String| Error::Format {
        path: path.to_owned(),
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let mut cols = header.split('\t');
    if cols.next() != Some("cell_id") {
        return Err(bad("header must start with cell_id".into()));
    }
    let genes: Vec<String> = cols.map(str::to_owned).collect();
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        ids.push(fields.next().unwrap_or_default().to_owned());
        let before = data.len();
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| bad(format!("line {}: bad number `{f}`", ln + 2)))?;
            data.push(v);
        }
        if data.len() - before != genes.len() {
            return Err(bad(format!("line {}: expected {} values", ln + 2, genes.len())));
        }
    }
    let rows = ids.len();
    Ok((genes, ids, Tensor::from_vec(rows, data.len() / rows.max(1), data)))
}

impl DatasetBundle {
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<String>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ds = &self.dataset;
        let mut written = vec![
            EXPRESSION_FILE.to_owned(),
            METADATA_FILE.to_owned(),
            ONTOLOGY_FILE.to_owned(),
            CATALOG_FILE.to_owned(),
        ];
        write_file(
            &dir.join(EXPRESSION_FILE),
            &format_matrix(&ds.meta, &ds.genes, &ds.matrix),
        )?;
        write_file(&dir.join(METADATA_FILE), &serde_json::to_string_pretty(&ds.meta)?)?;
        write_file(
            &dir.join(ONTOLOGY_FILE),
            &serde_json::to_string_pretty(&self.ontology.to_file())?,
        )?;
        write_file(
            &dir.join(CATALOG_FILE),
            &serde_json::to_string_pretty(&self.catalog.to_file())?,
        )?;
        if let Some(p) = &ds.perturbed {
            write_file(&dir.join(PERTURBED_FILE), &format_matrix(&ds.meta, &ds.genes, p))?;
            written.push(PERTURBED_FILE.to_owned());
        }
        Ok(written)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let expr_path = dir.join(EXPRESSION_FILE);
        let (genes, ids, matrix) = parse_matrix(&expr_path, &read_file(&expr_path)?)?;
        let meta: Vec<CellMeta> = serde_json::from_str(&read_file(&dir.join(METADATA_FILE))?)?;
        if meta.len() != ids.len() || meta.iter().zip(&ids).any(|(m, id)| &m.cell_id != id) {
            return Err(Error::Format {
                path: dir.join(METADATA_FILE),
                reason: "metadata not aligned with expression rows".into(),
            });
        }
        let ontology: OntologyFile = serde_json::from_str(&read_file(&dir.join(ONTOLOGY_FILE))?)?;
        let catalog: CatalogFile = serde_json::from_str(&read_file(&dir.join(CATALOG_FILE))?)?;
        let pert_path = dir.join(PERTURBED_FILE);
        let perturbed = if pert_path.exists() {
            let (pg, pids, p) = parse_matrix(&pert_path, &read_file(&pert_path)?)?;
            if pg != genes || pids != ids {
                return Err(Error::Format {
                    path: pert_path,
                    reason: "perturbed matrix not aligned with expression".into(),
                });
            }
            Some(p)
        } else {
            None
        };
        let dataset = ExpressionDataset {
            genes,
            matrix,
            meta,
            perturbed,
        };
        dataset.validate()?;
        Ok(Self {
            dataset,
            ontology: CellOntology::from_file(ontology)?,
            catalog: MarkerCatalog::from_file(catalog),
        })
    }
}
