//! Cell-type hierarchy, marker catalogs and specificity-ordered prototypes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::GeneVocabulary;

/// Single-parent cell-type tree. Levels are derived from the edges (root = 0).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellOntology {
    nodes: Vec<String>,
    parent: BTreeMap<String, String>,
    level: BTreeMap<String, usize>,
    root: String,
}

/// On-disk layout: `{"nodes": [...], "edges": [[parent, child], ...]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OntologyFile {
    pub nodes: Vec<String>,
    pub edges: Vec<(String, String)>,
}

impl CellOntology {
    pub fn new(nodes: Vec<String>, edges: &[(String, String)]) -> Result<Self> {
        let known: BTreeSet<&str> = nodes.iter().map(String::as_str).collect();
        if known.len() != nodes.len() {
            return Err(Error::InvalidOntology("duplicate node".into()));
        }
        let mut parent = BTreeMap::new();
        for (p, c) in edges {
            for n in [p, c] {
                if !known.contains(n.as_str()) {
                    return Err(Error::InvalidOntology(format!("edge references unknown node `{n}`")));
                }
            }
            if p == c {
                return Err(Error::InvalidOntology(format!("self loop on `{p}`")));
            }
            if parent.insert(c.clone(), p.clone()).is_some() {
                return Err(Error::InvalidOntology(format!("`{c}` has more than one parent")));
            }
        }
        let roots: Vec<&String> = nodes.iter().filter(|n| !parent.contains_key(*n)).collect();
        let root = match roots.as_slice() {
            [r] => (*r).clone(),
            [] => return Err(Error::InvalidOntology("no root".into())),
            many => {
                return Err(Error::InvalidOntology(format!(
                    "expected exactly one root, found {}",
                    many.len()
                )))
            }
        };
        let mut level = BTreeMap::new();
        for n in &nodes {
            let mut depth = 0;
            let mut cur = n;
            while let Some(p) = parent.get(cur) {
                depth += 1;
                if depth > nodes.len() {
                    return Err(Error::InvalidOntology(format!("cycle through `{n}`")));
                }
                cur = p;
            }
            level.insert(n.clone(), depth);
        }
        Ok(Self {
            nodes,
            parent,
            level,
            root,
        })
    }

    pub fn from_file(file: OntologyFile) -> Result<Self> {
        Self::new(file.nodes, &file.edges)
    }

    pub fn to_file(&self) -> OntologyFile {
        let edges = self
            .nodes
            .iter()
            .filter_map(|c| self.parent.get(c).map(|p| (p.clone(), c.clone())))
            .collect();
        OntologyFile {
            nodes: self.nodes.clone(),
            edges,
        }
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn root(&self) -> &str {
        &self.root
    }

    pub fn contains(&self, node: &str) -> bool {
        self.level.contains_key(node)
    }

    pub fn parent(&self, node: &str) -> Option<&str> {
        self.parent.get(node).map(String::as_str)
    }

    pub fn level(&self, node: &str) -> Option<usize> {
        self.level.get(node).copied()
    }

    /// Ancestors from the immediate parent up to the root.
    pub fn ancestors(&self, node: &str) -> Vec<&str> {
        let mut out = Vec::new();
        let mut cur = node;
        while let Some(p) = self.parent.get(cur) {
            out.push(p.as_str());
            cur = p;
        }
        out
    }

    pub fn children(&self, node: &str) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|c| self.parent(c) == Some(node))
            .map(String::as_str)
            .collect()
    }
}

/// Unordered cell-type pair stored with the lexicographically smaller id first.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TypePair(String, String);

impl TypePair {
    pub fn new(a: &str, b: &str) -> Self {
        if a <= b {
            Self(a.to_owned(), b.to_owned())
        } else {
            Self(b.to_owned(), a.to_owned())
        }
    }

    pub fn first(&self) -> &str {
        &self.0
    }

    pub fn second(&self) -> &str {
        &self.1
    }
}

/// All unordered pairs of distinct types sharing both parent and level.
pub fn parent_lineage_pairs(ontology: &CellOntology) -> BTreeSet<TypePair> {
    let mut by_parent: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for n in ontology.nodes() {
        if let Some(p) = ontology.parent(n) {
            by_parent.entry(p).or_default().push(n);
        }
    }
    let mut pairs = BTreeSet::new();
    for siblings in by_parent.values() {
        for (i, a) in siblings.iter().enumerate() {
            for b in &siblings[i + 1..] {
                // Siblings in a tree always share a level; keep the check explicit.
                if ontology.level(a) == ontology.level(b) {
                    pairs.insert(TypePair::new(a, b));
                }
            }
        }
    }
    pairs
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Marker {
    pub gene: String,
    pub level: usize,
}

/// Cell type → marker genes tagged with their specificity level.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MarkerCatalog {
    entries: BTreeMap<String, Vec<Marker>>,
}

/// On-disk layout: `{"type": [["gene", level], ...], ...}`.
pub type CatalogFile = BTreeMap<String, Vec<(String, usize)>>;

impl MarkerCatalog {
    pub fn new(entries: BTreeMap<String, Vec<Marker>>) -> Self {
        Self { entries }
    }

    pub fn from_file(file: CatalogFile) -> Self {
        let entries = file
            .into_iter()
            .map(|(t, ms)| {
                let ms = ms.into_iter().map(|(gene, level)| Marker { gene, level }).collect();
                (t, ms)
            })
            .collect();
        Self { entries }
    }

    pub fn to_file(&self) -> CatalogFile {
        self.entries
            .iter()
            .map(|(t, ms)| (t.clone(), ms.iter().map(|m| (m.gene.clone(), m.level)).collect()))
            .collect()
    }

    pub fn markers(&self, cell_type: &str) -> Option<&[Marker]> {
        self.entries.get(cell_type).map(Vec::as_slice)
    }

    pub fn cell_types(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn validate(&self, ontology: &CellOntology, vocab: &GeneVocabulary) -> Result<()> {
        for (t, markers) in &self.entries {
            if !ontology.contains(t) {
                return Err(Error::InvalidCatalog(format!("cell type `{t}` not in ontology")));
            }
            for m in markers {
                if vocab.index_of(&m.gene).is_none() {
                    return Err(Error::InvalidCatalog(format!(
                        "marker `{}` of `{t}` not in gene vocabulary",
                        m.gene
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Marker-gene sequence for one cell type, most specific first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prototype {
    pub cell_type: String,
    pub genes: Vec<String>,
    pub levels: Vec<usize>,
}

fn sorted_unique(markers: &[Marker]) -> Vec<Marker> {
    let mut ms = markers.to_vec();
    ms.sort_by(|a, b| b.level.cmp(&a.level).then_with(|| a.gene.cmp(&b.gene)));
    let mut seen = BTreeSet::new();
    ms.retain(|m| seen.insert(m.gene.clone()));
    ms
}

/// Orders a type's markers by specificity (deepest level first, gene id as
/// tie-break) and keeps the first `k`. Types with fewer than `k` markers are
/// padded with their ancestors' markers, nearest ancestor first.
pub fn organize_markers(
    catalog: &MarkerCatalog,
    ontology: &CellOntology,
    cell_type: &str,
    k: usize,
) -> Result<Prototype> {
    let own = catalog
        .markers(cell_type)
        .filter(|m| !m.is_empty())
        .ok_or_else(|| Error::UnknownCellType(cell_type.to_owned()))?;
    let mut chosen = sorted_unique(own);
    if chosen.len() >= k {
        chosen.truncate(k);
    } else {
        let mut seen: BTreeSet<String> = chosen.iter().map(|m| m.gene.clone()).collect();
        for anc in ontology.ancestors(cell_type) {
            let Some(ms) = catalog.markers(anc) else { continue };
            for m in sorted_unique(ms) {
                if chosen.len() == k {
                    break;
                }
                if seen.insert(m.gene.clone()) {
                    chosen.push(m);
                }
            }
        }
        if chosen.len() < k {
            return Err(Error::InsufficientMarkers {
                cell_type: cell_type.to_owned(),
                available: chosen.len(),
                required: k,
            });
        }
        chosen = sorted_unique(&chosen);
    }
    Ok(Prototype {
        cell_type: cell_type.to_owned(),
        genes: chosen.iter().map(|m| m.gene.clone()).collect(),
        levels: chosen.iter().map(|m| m.level).collect(),
    })
}
