//! Rank-value tokenization of expression profiles and MLM masking.

use std::collections::HashMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gene ids plus two reserved tokens at the end: `MASK = k - 2`, `PAD = k - 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneVocabulary {
    genes: Vec<String>,
    index: HashMap<String, usize>,
}

impl GeneVocabulary {
    pub fn new(genes: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(genes.len());
        for (i, g) in genes.iter().enumerate() {
            if index.insert(g.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate gene id `{g}`")));
            }
        }
        Ok(Self { genes, index })
    }

    pub fn genes(&self) -> &[String] {
        &self.genes
    }

    pub fn num_genes(&self) -> usize {
        self.genes.len()
    }

    /// Vocabulary size `k`, reserved tokens included.
    pub fn size(&self) -> usize {
        self.genes.len() + 2
    }

    pub fn mask_id(&self) -> usize {
        self.genes.len()
    }

    pub fn pad_id(&self) -> usize {
        self.genes.len() + 1
    }

    pub fn index_of(&self, gene: &str) -> Option<usize> {
        self.index.get(gene).copied()
    }

    pub fn gene(&self, token: usize) -> Option<&str> {
        self.genes.get(token).map(String::as_str)
    }

    /// Vocabulary file body: a JSON list of gene ids.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.genes).expect("string list serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }
}

/// Per-gene normalization factors (median of non-zero training values).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneMedians(pub Vec<f64>);

impl GeneMedians {
    pub fn unit(num_genes: usize) -> Self {
        Self(vec![1.0; num_genes])
    }

    /// Genes never expressed in `rows` get a factor of 1.
    pub fn from_rows<'a>(num_genes: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); num_genes];
        for row in rows {
            for (g, &v) in row.iter().enumerate() {
                if v > 0.0 {
                    cols[g].push(v);
                }
            }
        }
        Self(
            cols.into_iter()
                .map(|mut c| {
                    if c.is_empty() {
                        return 1.0;
                    }
                    c.sort_by(f64::total_cmp);
                    let n = c.len();
                    if n % 2 == 1 {
                        c[n / 2]
                    } else {
                        0.5 * (c[n / 2 - 1] + c[n / 2])
                    }
                })
                .collect(),
        )
    }
}

/// Token ids plus the masked positions and their original tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub masked: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TokenSequence {
    pub fn unmasked(tokens: Vec<usize>) -> Self {
        Self {
            tokens,
            masked: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions holding a real (non-PAD) token.
    pub fn content_len(&self, pad_id: usize) -> usize {
        self.tokens.iter().filter(|&&t| t != pad_id).count()
    }

    /// Tokens with every masked position restored.
    pub fn restored(&self) -> Vec<usize> {
        let mut t = self.tokens.clone();
        for (&p, &orig) in self.masked.iter().zip(&self.targets) {
            t[p] = orig;
        }
        t
    }
}

/// Drops unexpressed genes, divides by the gene medians, and orders genes by
/// normalized value (descending, gene index ascending on ties), keeping at
/// most `max_len`.
pub fn tokenize(
    expression: &[f64],
    vocab: &GeneVocabulary,
    medians: &GeneMedians,
    max_len: usize,
) -> Result<TokenSequence> {
    if expression.len() != vocab.num_genes() {
        return Err(Error::LengthMismatch {
            expected: vocab.num_genes(),
            actual: expression.len(),
        });
    }
    if medians.0.len() != vocab.num_genes() {
        return Err(Error::LengthMismatch {
            expected: vocab.num_genes(),
            actual: medians.0.len(),
        });
    }
    let mut ranked: Vec<(usize, f64)> = expression
        .iter()
        .zip(&medians.0)
        .enumerate()
        .filter(|(_, (v, _))| **v > 0.0)
        .map(|(g, (v, m))| (g, v / m))
        .collect();
    if ranked.is_empty() {
        return Err(Error::AllZeroExpression);
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(max_len);
    Ok(TokenSequence::unmasked(ranked.into_iter().map(|(g, _)| g).collect()))
}

/// Masks `round(rate * t)` non-PAD positions chosen without replacement by a
/// generator seeded with `seed`; masked tokens become `MASK`.
pub fn mask_tokens(seq: &TokenSequence, vocab: &GeneVocabulary, rate: f64, seed: u64) -> Result<TokenSequence> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::RateOutOfRange(rate));
    }
    if !seq.masked.is_empty() {
        return Err(Error::AlreadyMasked);
    }
    let candidates: Vec<usize> = (0..seq.tokens.len())
        .filter(|&p| seq.tokens[p] != vocab.pad_id())
        .collect();
    let t = candidates.len();
    let m = ((rate * t as f64).round() as usize).min(t);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = index::sample(&mut rng, t, m)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    positions.sort_unstable();
    let mut tokens = seq.tokens.clone();
    let targets = positions
        .iter()
        .map(|&p| std::mem::replace(&mut tokens[p], vocab.mask_id()))
        .collect();
    Ok(TokenSequence {
        tokens,
        masked: positions,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(n: usize) -> GeneVocabulary {
        GeneVocabulary::new((0..n).map(|i| format!("G{i}")).collect()).unwrap()
    }

    #[test]
    fn reserved_tokens_sit_at_the_end() {
        let v = vocab(14);
        assert_eq!(v.size(), 16);
        assert_eq!(v.mask_id(), 14);
        assert_eq!(v.pad_id(), 15);
        assert!(GeneVocabulary::new(vec!["a".into(), "a".into()]).is_err());
        assert_eq!(GeneVocabulary::from_json(&v.to_json()).unwrap(), v);
    }

    #[test]
    fn drops_zeros_and_sorts_descending() {
        let v = vocab(4);
        let s = tokenize(&[0.1, 5.0, 0.0, 2.0], &v, &GeneMedians::unit(4), 10).unwrap();
        assert_eq!(s.tokens, vec![1, 3, 0]);
        assert!(s.masked.is_empty());
    }

    #[test]
    fn ties_fall_back_to_gene_order_and_truncate() {
        let v = vocab(5);
        let s = tokenize(&[2.0; 5], &v, &GeneMedians::unit(5), 10).unwrap();
        assert_eq!(s.tokens, vec![0, 1, 2, 3, 4]);
        let s = tokenize(&[1.0, 5.0, 3.0, 4.0, 2.0], &v, &GeneMedians::unit(5), 3).unwrap();
        assert_eq!(s.tokens, vec![1, 3, 2]);
    }

    #[test]
    fn medians_rescale_before_ranking() {
        let v = vocab(2);
        let med = GeneMedians(vec![10.0, 1.0]);
        let s = tokenize(&[5.0, 1.0], &v, &med, 10).unwrap();
        assert_eq!(s.tokens, vec![1, 0]);
    }

    #[test]
    fn tokenize_errors() {
        let v = vocab(3);
        assert!(matches!(
            tokenize(&[1.0], &v, &GeneMedians::unit(3), 4),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            tokenize(&[0.0; 3], &v, &GeneMedians::unit(3), 4),
            Err(Error::AllZeroExpression)
        ));
    }

    #[test]
    fn nonzero_median() {
        let rows = [vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 0.0]];
        let m = GeneMedians::from_rows(2, rows.iter().map(Vec::as_slice));
        assert_eq!(m.0, vec![3.0, 2.0]);
    }

    #[test]
    fn mask_rate_edges() {
        let v = vocab(10);
        let s = TokenSequence::unmasked((0..10).collect());
        let m0 = mask_tokens(&s, &v, 0.0, 1).unwrap();
        assert!(m0.masked.is_empty());
        assert_eq!(m0.tokens, s.tokens);
        let m1 = mask_tokens(&s, &v, 1.0, 1).unwrap();
        assert_eq!(m1.masked, (0..10).collect::<Vec<_>>());
        assert!(m1.tokens.iter().all(|&t| t == v.mask_id()));
        assert_eq!(
            mask_tokens(&s, &v, 0.3, 7).unwrap(),
            mask_tokens(&s, &v, 0.3, 7).unwrap()
        );
        assert!(matches!(mask_tokens(&s, &v, 1.5, 0), Err(Error::RateOutOfRange(_))));
        assert!(matches!(mask_tokens(&m1, &v, 0.5, 0), Err(Error::AlreadyMasked)));
    }

    proptest! {
        #[test]
        fn masking_skips_pad_and_restores(len in 1usize..40, pad in 0usize..10, rate in 0.0f64..=1.0, seed in any::<u64>()) {
            let v = vocab(50);
            let mut tokens: Vec<usize> = (0..len).collect();
            tokens.extend(std::iter::repeat(v.pad_id()).take(pad));
            let s = TokenSequence::unmasked(tokens.clone());
            let m = mask_tokens(&s, &v, rate, seed).unwrap();
            prop_assert!(m.masked.iter().all(|&p| p < len));
            prop_assert_eq!(m.masked.len(), m.targets.len());
            prop_assert_eq!(m.restored(), tokens);
            let t = len as f64;
            let frac = m.masked.len() as f64 / t;
            prop_assert!(frac >= rate - 1.0 / t - 1e-12 && frac <= rate + 1.0 / t + 1e-12);
        }

        #[test]
        fn rank_implied_values_reproduce_order(values in prop::collection::vec(0.0f64..10.0, 1..30)) {
            let n = values.len();
            let v = vocab(n);
            let med = GeneMedians::unit(n);
            if let Ok(s) = tokenize(&values, &v, &med, n) {
                let mut implied = vec![0.0; n];
                for (rank, &g) in s.tokens.iter().enumerate() {
                    implied[g] = (s.tokens.len() - rank) as f64;
                }
                let again = tokenize(&implied, &v, &med, n).unwrap();
                prop_assert_eq!(again, s);
            }
        }
    }
}
