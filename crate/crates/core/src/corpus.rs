//! Vocabulary and dataset construction.
//!
//! Every token is a scaled standard-basis vector, so embeddings are exactly
//! orthogonal. Which coordinate a token occupies is a seeded permutation; the
//! occupied coordinate doubles as the token's output class.
//!
//! Pre-training sentences have the shape `(o, END, s, r, a)`. Each one turns
//! into three next-token examples: `[o] -> END`, `[o s] -> r` and
//! `[o s r] -> a`. Questions are `[s p] -> a`, with `p` the format token.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Sequence;
use crate::seed::{self, Stream};

pub type TokenId = usize;
pub type ClassId = usize;

/// Sizes of the synthetic world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    /// Frequent subject/answer pairs, each seen with `k` relation phrases.
    pub n_freq: usize,
    /// Rare pairs, each seen with a single relation phrase.
    pub n_rare: usize,
    pub k: usize,
    /// Size of the universal relation set.
    pub r_size: usize,
    pub dim: usize,
}

impl VocabSpec {
    pub fn n_pairs(&self) -> usize {
        self.n_freq + self.n_rare
    }

    /// Subjects, answers, relations plus the context, ending and format tokens.
    pub fn token_count(&self) -> usize {
        2 * self.n_pairs() + self.r_size + 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidSpec("k must be at least 1".into()));
        }
        if self.k > self.r_size {
            return Err(Error::InvalidSpec(format!(
                "k = {} exceeds the relation set size {}",
                self.k, self.r_size
            )));
        }
        if self.dim < self.token_count() {
            return Err(Error::DimensionTooSmall {
                needed: self.token_count(),
                dim: self.dim,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "role", content = "index", rename_all = "snake_case")]
pub enum TokenRole {
    Context,
    End,
    Format,
    Subject(usize),
    Answer(usize),
    Relation(usize),
}

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    roles: Vec<TokenRole>,
    classes: Vec<ClassId>,
    /// One row per token.
    vectors: Array2<f64>,
    by_role: HashMap<TokenRole, TokenId>,
    by_class: Vec<Option<TokenId>>,
}

impl EmbeddingTable {
    /// Assembles a table from explicit role/class assignments. Tokens are
    /// scaled basis vectors: the context token has norm `sqrt(dim)`, all
    /// others norm 1.
    pub fn from_assignment(dim: usize, roles: Vec<TokenRole>, classes: Vec<ClassId>) -> Result<Self> {
        if roles.len() != classes.len() {
            return Err(Error::Shape("roles and classes differ in length".into()));
        }
        if roles.len() > dim {
            return Err(Error::DimensionTooSmall {
                needed: roles.len(),
                dim,
            });
        }
        let mut by_class = vec![None; dim];
        let mut by_role = HashMap::with_capacity(roles.len());
        let mut vectors = Array2::zeros((roles.len(), dim));
        let context_norm = (dim as f64).sqrt();
        for (token, (&role, &class)) in roles.iter().zip(&classes).enumerate() {
            if class >= dim {
                return Err(Error::InvalidSpec(format!("class {class} out of range for dim {dim}")));
            }
            if by_class[class].replace(token).is_some() {
                return Err(Error::InvalidSpec(format!("class {class} assigned twice")));
            }
            if by_role.insert(role, token).is_some() {
                return Err(Error::InvalidSpec(format!("role {role:?} assigned twice")));
            }
            vectors[[token, class]] = if role == TokenRole::Context { context_norm } else { 1.0 };
        }
        Ok(Self {
            dim,
            roles,
            classes,
            vectors,
            by_role,
            by_class,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn roles(&self) -> &[TokenRole] {
        &self.roles
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn role(&self, token: TokenId) -> TokenRole {
        self.roles[token]
    }

    pub fn token(&self, role: TokenRole) -> Option<TokenId> {
        self.by_role.get(&role).copied()
    }

    pub fn class_of_token(&self, token: TokenId) -> ClassId {
        self.classes[token]
    }

    /// Output class `I(.)` of a role.
    pub fn class(&self, role: TokenRole) -> Option<ClassId> {
        self.token(role).map(|t| self.classes[t])
    }

    pub fn token_of_class(&self, class: ClassId) -> Option<TokenId> {
        self.by_class.get(class).copied().flatten()
    }

    pub fn context_token(&self) -> TokenId {
        self.by_role[&TokenRole::Context]
    }

    pub fn end_token(&self) -> TokenId {
        self.by_role[&TokenRole::End]
    }

    pub fn format_token(&self) -> TokenId {
        self.by_role[&TokenRole::Format]
    }

    pub fn subject(&self, j: usize) -> Option<TokenId> {
        self.token(TokenRole::Subject(j))
    }

    pub fn answer(&self, j: usize) -> Option<TokenId> {
        self.token(TokenRole::Answer(j))
    }

    pub fn relation(&self, i: usize) -> Option<TokenId> {
        self.token(TokenRole::Relation(i))
    }

    pub fn count_role(&self, f: impl Fn(&TokenRole) -> bool) -> usize {
        self.roles.iter().filter(|r| f(r)).count()
    }

    /// Embedding of one token as a dense vector.
    pub fn embedding(&self, token: TokenId) -> ndarray::ArrayView1<'_, f64> {
        self.vectors.row(token)
    }

    /// Embeds a token sequence as the `d x L` input of the model.
    pub fn sequence(&self, context: &[TokenId]) -> Sequence {
        let mut seq = Sequence::new(self.dim);
        for &t in context {
            let class = self.classes[t];
            seq.push_sparse(vec![class], vec![self.vectors[[t, class]]]);
        }
        seq
    }
}

/// Builds the orthogonal vocabulary. Token ids are laid out as context, end,
/// format, subjects, answers, relations; their basis coordinates are a seeded
/// permutation of `0..dim`.
pub fn build_vocab(spec: &VocabSpec, seed: u64) -> Result<EmbeddingTable> {
    spec.validate()?;
    let n = spec.n_pairs();
    let mut roles = vec![TokenRole::Context, TokenRole::End, TokenRole::Format];
    roles.extend((0..n).map(TokenRole::Subject));
    roles.extend((0..n).map(TokenRole::Answer));
    roles.extend((0..spec.r_size).map(TokenRole::Relation));

    let mut coords: Vec<usize> = (0..spec.dim).collect();
    coords.shuffle(&mut seed::rng(seed, Stream::Vocab));
    coords.truncate(roles.len());
    EmbeddingTable::from_assignment(spec.dim, roles, coords)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceTuple {
    pub subject: TokenId,
    pub relation: TokenId,
    pub answer: TokenId,
    pub is_rare: bool,
}

/// A `context -> label` pair. Both the next-token and the Q&A datasets use it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub context: Vec<TokenId>,
    pub label: ClassId,
    pub is_rare: bool,
}

pub type NtpExample = Example;
pub type QaExample = Example;

/// Samples the relation subsets: `k` distinct relations for each frequent
/// subject and one for each rare subject.
pub fn build_sentences(table: &EmbeddingTable, spec: &VocabSpec, seed: u64) -> Result<Vec<SentenceTuple>> {
    spec.validate()?;
    let mut rng = seed::rng(seed, Stream::Sentences);
    let mut out = Vec::with_capacity(spec.n_freq * spec.k + spec.n_rare);
    for j in 0..spec.n_pairs() {
        let is_rare = j >= spec.n_freq;
        let count = if is_rare { 1 } else { spec.k };
        let subject = lookup(table, TokenRole::Subject(j))?;
        let answer = lookup(table, TokenRole::Answer(j))?;
        for i in index::sample(&mut rng, spec.r_size, count).into_iter() {
            out.push(SentenceTuple {
                subject,
                relation: lookup(table, TokenRole::Relation(i))?,
                answer,
                is_rare,
            });
        }
    }
    Ok(out)
}

fn lookup(table: &EmbeddingTable, role: TokenRole) -> Result<TokenId> {
    table
        .token(role)
        .ok_or_else(|| Error::InvalidSpec(format!("vocabulary has no {role:?}")))
}

/// Three next-token examples per sentence.
pub fn build_ntp(table: &EmbeddingTable, tuples: &[SentenceTuple]) -> Vec<NtpExample> {
    let o = table.context_token();
    let end = table.class_of_token(table.end_token());
    let mut out = Vec::with_capacity(3 * tuples.len());
    for t in tuples {
        out.push(Example {
            context: vec![o],
            label: end,
            is_rare: t.is_rare,
        });
        out.push(Example {
            context: vec![o, t.subject],
            label: table.class_of_token(t.relation),
            is_rare: t.is_rare,
        });
        out.push(Example {
            context: vec![o, t.subject, t.relation],
            label: table.class_of_token(t.answer),
            is_rare: t.is_rare,
        });
    }
    out
}

/// The context-free three-token variant: `[s] -> r` and `[s r] -> a`.
pub fn build_ntp_three_token(table: &EmbeddingTable, tuples: &[SentenceTuple]) -> Vec<NtpExample> {
    tuples
        .iter()
        .flat_map(|t| {
            [
                Example {
                    context: vec![t.subject],
                    label: table.class_of_token(t.relation),
                    is_rare: t.is_rare,
                },
                Example {
                    context: vec![t.subject, t.relation],
                    label: table.class_of_token(t.answer),
                    is_rare: t.is_rare,
                },
            ]
        })
        .collect()
}

/// One question `[s_j p] -> a_j` per subject/answer pair, in pair order.
pub fn build_qa(table: &EmbeddingTable, spec: &VocabSpec) -> Result<Vec<QaExample>> {
    let p = table.format_token();
    (0..spec.n_pairs())
        .map(|j| {
            Ok(Example {
                context: vec![lookup(table, TokenRole::Subject(j))?, p],
                label: table.class_of_token(lookup(table, TokenRole::Answer(j))?),
                is_rare: j >= spec.n_freq,
            })
        })
        .collect()
}

/// Splits the Q&A set into a fine-tuning subset (a `beta` fraction of the
/// frequent questions, rounded to the nearest count) and everything else.
/// Both parts keep the input order.
pub fn split_ft(qa: &[QaExample], beta: f64, seed: u64) -> Result<(Vec<QaExample>, Vec<QaExample>)> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidSpec(format!("beta = {beta} is outside [0, 1]")));
    }
    let frequent: Vec<usize> = qa
        .iter()
        .enumerate()
        .filter(|(_, e)| !e.is_rare)
        .map(|(i, _)| i)
        .collect();
    let take = (beta * frequent.len() as f64).round() as usize;
    let mut rng = seed::rng(seed, Stream::Split);
    let mut chosen = vec![false; qa.len()];
    for pick in index::sample(&mut rng, frequent.len(), take.min(frequent.len())).into_iter() {
        chosen[frequent[pick]] = true;
    }
    let (ft, held): (Vec<_>, Vec<_>) = qa.iter().cloned().zip(chosen).partition(|(_, c)| *c);
    Ok((
        ft.into_iter().map(|(e, _)| e).collect(),
        held.into_iter().map(|(e, _)| e).collect(),
    ))
}

/// Conditional next-token entropy (nats per example) of a dataset: the
/// smallest achievable mean cross-entropy.
pub fn dataset_entropy(examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut groups: BTreeMap<&[TokenId], BTreeMap<ClassId, usize>> = BTreeMap::new();
    for e in examples {
        *groups.entry(&e.context).or_default().entry(e.label).or_default() += 1;
    }
    let mut total = 0.0;
    for labels in groups.values() {
        let size: usize = labels.values().sum();
        for &c in labels.values() {
            total -= c as f64 * (c as f64 / size as f64).ln();
        }
    }
    Ok(total / examples.len() as f64)
}

/// Everything derived from one vocabulary spec, beta and seed.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: VocabSpec,
    pub table: EmbeddingTable,
    pub sentences: Vec<SentenceTuple>,
    pub ntp: Vec<NtpExample>,
    pub qa: Vec<QaExample>,
    pub ft: Vec<QaExample>,
    pub heldout: Vec<QaExample>,
}

impl Corpus {
    pub fn generate(spec: &VocabSpec, beta: f64, seed: u64) -> Result<Self> {
        let table = build_vocab(spec, seed)?;
        let sentences = build_sentences(&table, spec, seed)?;
        let ntp = build_ntp(&table, &sentences);
        let qa = build_qa(&table, spec)?;
        let (ft, heldout) = split_ft(&qa, beta, seed)?;
        Ok(Self {
            spec: *spec,
            table,
            sentences,
            ntp,
            qa,
            ft,
            heldout,
        })
    }
}
