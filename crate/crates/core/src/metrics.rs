//! Evaluation: extraction loss on held-out questions, and probes of the
//! attention pattern and MLP features.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, EmbeddingTable, Example, SentenceTuple, TokenRole};
use crate::error::{Error, Result};
use crate::grad::batch_grads;
use crate::model::{attention_scores, batch_loss, forward, forward_into, Batch, ForwardCache, ModelParams};

/// Fraction of examples whose true-class output does not strictly exceed
/// every other class output. Ties count as errors.
pub fn extraction_loss(params: &ModelParams, table: &EmbeddingTable, heldout: &[Example]) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut cache = ForwardCache::default();
    let mut wrong = 0usize;
    for e in heldout {
        forward_into(params, &table.sequence(&e.context), &mut cache);
        let target = cache.output[e.label];
        let beaten = cache
            .output
            .iter()
            .enumerate()
            .any(|(i, &v)| i != e.label && v >= target);
        if beaten {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / heldout.len() as f64)
}

/// `1 - extraction_loss`.
pub fn accuracy(params: &ModelParams, table: &EmbeddingTable, examples: &[Example]) -> Result<f64> {
    extraction_loss(params, table, examples).map(|l| 1.0 - l)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionProbe {
    /// Largest attention on the context token over all `[o s]` inputs.
    pub alpha_ctx_2tok: f64,
    /// Same over all `[o s r]` inputs.
    pub alpha_ctx_3tok: f64,
    /// Extremes of subject-to-relation attention ratio over `[o s r]`.
    pub ratio_min: f64,
    pub ratio_max: f64,
}

pub fn attention_probe(params: &ModelParams, table: &EmbeddingTable, sentences: &[SentenceTuple]) -> AttentionProbe {
    let o = table.context_token();
    let mut probe = AttentionProbe {
        alpha_ctx_2tok: f64::NEG_INFINITY,
        alpha_ctx_3tok: f64::NEG_INFINITY,
        ratio_min: f64::INFINITY,
        ratio_max: f64::NEG_INFINITY,
    };
    for t in sentences {
        let two = attention_scores(params.z(), &table.sequence(&[o, t.subject]));
        probe.alpha_ctx_2tok = probe.alpha_ctx_2tok.max(two[0]);
        let three = attention_scores(params.z(), &table.sequence(&[o, t.subject, t.relation]));
        probe.alpha_ctx_3tok = probe.alpha_ctx_3tok.max(three[0]);
        let ratio = three[1] / three[2];
        probe.ratio_min = probe.ratio_min.min(ratio);
        probe.ratio_max = probe.ratio_max.max(ratio);
    }
    probe
}

/// Attention weights for each context, in input order.
pub fn attention_heatmap(params: &ModelParams, table: &EmbeddingTable, contexts: &[Vec<usize>]) -> Vec<Vec<f64>> {
    contexts
        .iter()
        .map(|c| attention_scores(params.z(), &table.sequence(c)))
        .collect()
}

/// Neuron-mean inner products of the MLP with selected embeddings, and the
/// same projections of the mean first fine-tuning gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureProbe {
    /// `(1/m) sum_k <w_{I(END),k}, 2o>`
    pub end_probe: f64,
    /// Per relation `i`: `(1/m) sum_k <w_{I(r_i),k}, p>`.
    pub relation_format: Vec<f64>,
    /// Per pair `j`: `(1/m) sum_k <w_{I(a_j),k}, p>`.
    pub answer_format: Vec<f64>,
    /// `[i][j]`: `(1/m) sum_k <w_{I(r_i),k}, s_j>`.
    pub relation_subject: Vec<Vec<f64>>,
    /// Per pair `j`: `(1/m) sum_k <w_{I(a_j),k}, s_j>`.
    pub answer_subject: Vec<f64>,
    /// Projections of the neuron-mean fine-tuning gradient; empty when no
    /// fine-tuning set was given.
    pub grad_relation_format: Vec<f64>,
    pub grad_answer_format: Vec<f64>,
    pub grad_relation_subject: Vec<Vec<f64>>,
    pub grad_answer_subject: Vec<f64>,
}

pub fn feature_probe(params: &ModelParams, table: &EmbeddingTable, ft: Option<&Batch>) -> Result<FeatureProbe> {
    let n_pairs = table.count_role(|r| matches!(r, TokenRole::Subject(_)));
    let n_rel = table.count_role(|r| matches!(r, TokenRole::Relation(_)));
    let emb = |t: usize| table.embedding(t);
    let p = emb(table.format_token());
    let o2 = emb(table.context_token()).mapv(|v| 2.0 * v);
    let class = |role: TokenRole| table.class(role).expect("role present in vocabulary");
    let subjects: Vec<usize> = (0..n_pairs).map(|j| table.subject(j).expect("subject")).collect();

    let mean_dot = |c, v| params.neuron_mean_dot(c, v);
    let mut probe = FeatureProbe {
        end_probe: mean_dot(class(TokenRole::End), o2.view()),
        relation_format: (0..n_rel).map(|i| mean_dot(class(TokenRole::Relation(i)), p)).collect(),
        answer_format: (0..n_pairs).map(|j| mean_dot(class(TokenRole::Answer(j)), p)).collect(),
        relation_subject: (0..n_rel)
            .map(|i| {
                subjects
                    .iter()
                    .map(|&s| mean_dot(class(TokenRole::Relation(i)), emb(s)))
                    .collect()
            })
            .collect(),
        answer_subject: (0..n_pairs)
            .map(|j| mean_dot(class(TokenRole::Answer(j)), emb(subjects[j])))
            .collect(),
        grad_relation_format: Vec::new(),
        grad_answer_format: Vec::new(),
        grad_relation_subject: Vec::new(),
        grad_answer_subject: Vec::new(),
    };

    let Some(ft) = ft.filter(|b| !b.is_empty()) else {
        return Ok(probe);
    };
    let g = batch_grads(params, ft)?;
    let m = params.m();
    let grad_mean_dot =
        |c: usize, v: ndarray::ArrayView1<'_, f64>| (0..m).map(|k| g.dw.row(c * m + k).dot(&v)).sum::<f64>() / m as f64;
    probe.grad_relation_format = (0..n_rel)
        .map(|i| grad_mean_dot(class(TokenRole::Relation(i)), p))
        .collect();
    probe.grad_answer_format = (0..n_pairs)
        .map(|j| grad_mean_dot(class(TokenRole::Answer(j)), p))
        .collect();
    probe.grad_relation_subject = (0..n_rel)
        .map(|i| {
            subjects
                .iter()
                .map(|&s| grad_mean_dot(class(TokenRole::Relation(i)), emb(s)))
                .collect()
        })
        .collect();
    probe.grad_answer_subject = (0..n_pairs)
        .map(|j| grad_mean_dot(class(TokenRole::Answer(j)), emb(subjects[j])))
        .collect();
    Ok(probe)
}

/// Smallest fraction of active neurons over all sentences `(s_j, r_k, a_j)`,
/// taking both the relation-class neurons against `s_j` and the answer-class
/// neurons against `x_a([o s_j r_k])`.
pub fn activation_counts(params: &ModelParams, table: &EmbeddingTable, sentences: &[SentenceTuple]) -> f64 {
    let m = params.m();
    let o = table.context_token();
    let mut min = 1.0f64;
    for t in sentences {
        let rel = table.class_of_token(t.relation);
        let s = table.embedding(t.subject);
        let active = (0..m).filter(|&k| params.neuron(rel, k).dot(&s) > 0.0).count();
        min = min.min(active as f64 / m as f64);

        let cache = forward(params, &table.sequence(&[o, t.subject, t.relation]));
        let ans = table.class_of_token(t.answer);
        let active = (0..m).filter(|&k| cache.activations[ans * m + k] > 0.0).count();
        min = min.min(active as f64 / m as f64);
    }
    min
}

/// One evaluation snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub train_loss: f64,
    pub entropy: f64,
    pub extraction_loss: f64,
    pub ood_accuracy: f64,
    pub alpha_ctx_2tok: f64,
    pub alpha_ctx_3tok: f64,
    pub alpha_ratio_min: f64,
    pub alpha_ratio_max: f64,
    pub end_probe: f64,
    pub activation_fraction_min: f64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "train_loss,entropy,extraction_loss,ood_accuracy,alpha_ctx_2tok,alpha_ctx_3tok,alpha_ratio_min,alpha_ratio_max,end_probe,activation_fraction_min";

    pub fn to_csv_row(&self) -> String {
        [
            self.train_loss,
            self.entropy,
            self.extraction_loss,
            self.ood_accuracy,
            self.alpha_ctx_2tok,
            self.alpha_ctx_3tok,
            self.alpha_ratio_min,
            self.alpha_ratio_max,
            self.end_probe,
            self.activation_fraction_min,
        ]
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let vals = row
            .trim_end()
            .split(',')
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::Decode(format!("bad metrics field {f:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let [train_loss, entropy, extraction_loss, ood_accuracy, alpha_ctx_2tok, alpha_ctx_3tok, alpha_ratio_min, alpha_ratio_max, end_probe, activation_fraction_min] =
            vals[..]
        else {
            return Err(Error::Decode(format!("expected 10 metrics fields, got {}", vals.len())));
        };
        Ok(Self {
            train_loss,
            entropy,
            extraction_loss,
            ood_accuracy,
            alpha_ctx_2tok,
            alpha_ctx_3tok,
            alpha_ratio_min,
            alpha_ratio_max,
            end_probe,
            activation_fraction_min,
        })
    }
}

/// Precomputed inputs for [`evaluate`].
#[derive(Debug, Clone)]
pub struct EvalBundle<'a> {
    pub table: &'a EmbeddingTable,
    pub sentences: &'a [SentenceTuple],
    pub heldout: &'a [Example],
    pub ntp: Batch,
    pub entropy: f64,
}

impl<'a> EvalBundle<'a> {
    pub fn new(corpus: &'a Corpus) -> Result<Self> {
        Ok(Self {
            table: &corpus.table,
            sentences: &corpus.sentences,
            heldout: &corpus.heldout,
            ntp: Batch::new(&corpus.table, &corpus.ntp),
            entropy: crate::corpus::dataset_entropy(&corpus.ntp)?,
        })
    }
}

pub fn evaluate(params: &ModelParams, bundle: &EvalBundle<'_>) -> Result<MetricsRecord> {
    let extraction = extraction_loss(params, bundle.table, bundle.heldout)?;
    let att = attention_probe(params, bundle.table, bundle.sentences);
    let features = feature_probe(params, bundle.table, None)?;
    Ok(MetricsRecord {
        train_loss: batch_loss(params, &bundle.ntp)?,
        entropy: bundle.entropy,
        extraction_loss: extraction,
        ood_accuracy: 1.0 - extraction,
        alpha_ctx_2tok: att.alpha_ctx_2tok,
        alpha_ctx_3tok: att.alpha_ctx_3tok,
        alpha_ratio_min: att.ratio_min,
        alpha_ratio_max: att.ratio_max,
        end_probe: features.end_probe,
        activation_fraction_min: activation_counts(params, bundle.table, bundle.sentences),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::VocabSpec;
    use crate::model::{init_params, ModelSpec};
    use ndarray::Array2;

    fn corpus() -> Corpus {
        Corpus::generate(
            &VocabSpec {
                n_freq: 6,
                n_rare: 2,
                k: 2,
                r_size: 3,
                dim: 32,
            },
            0.5,
            1,
        )
        .unwrap()
    }

    /// One neuron per class reading the subject coordinate of each question
    /// and writing to its answer class.
    fn oracle_params(c: &Corpus, m: usize) -> ModelParams {
        let d = c.spec.dim;
        let mut w = Array2::zeros((d * m, d));
        for e in &c.qa {
            let s = c.table.class_of_token(e.context[0]);
            for k in 0..m {
                w[[e.label * m + k, s]] = 1.0;
            }
        }
        ModelParams::from_parts(w, Array2::zeros((d, d)), m, 10.0).unwrap()
    }

    #[test]
    fn perfect_model_has_zero_extraction_loss() {
        let c = corpus();
        let p = oracle_params(&c, 2);
        assert_eq!(extraction_loss(&p, &c.table, &c.heldout).unwrap(), 0.0);
        assert_eq!(accuracy(&p, &c.table, &c.qa).unwrap(), 1.0);
    }

    #[test]
    fn ties_are_errors() {
        let c = corpus();
        let p = ModelParams::zeros(&ModelSpec {
            dim: 32,
            m: 2,
            lambda: 5.0,
        })
        .unwrap();
        assert_eq!(extraction_loss(&p, &c.table, &c.heldout).unwrap(), 1.0);
        assert!(matches!(extraction_loss(&p, &c.table, &[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn one_wrong_of_three() {
        let c = corpus();
        let mut p = oracle_params(&c, 1);
        let three = &c.qa[..3];
        // route the second question's subject to a different answer as well,
        // with a larger weight
        let s = c.table.class_of_token(three[1].context[0]);
        p.w_mut()[[three[2].label, s]] = 2.0;
        let l = extraction_loss(&p, &c.table, three).unwrap();
        assert!((l - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn extraction_is_order_invariant() {
        let c = corpus();
        let p = init_params(
            &ModelSpec {
                dim: 32,
                m: 3,
                lambda: 20.0,
            },
            0.3,
            2,
        )
        .unwrap();
        let a = extraction_loss(&p, &c.table, &c.qa).unwrap();
        let mut rev = c.qa.clone();
        rev.reverse();
        assert_eq!(a, extraction_loss(&p, &c.table, &rev).unwrap());
    }

    #[test]
    fn zero_z_gives_uniform_attention() {
        let c = corpus();
        let p = init_params(
            &ModelSpec {
                dim: 32,
                m: 2,
                lambda: 7.0,
            },
            0.0,
            0,
        )
        .unwrap();
        let a = attention_probe(&p, &c.table, &c.sentences);
        assert_eq!(a.alpha_ctx_2tok, 0.5);
        assert!((a.alpha_ctx_3tok - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((a.ratio_min, a.ratio_max), (1.0, 1.0));

        let single = attention_probe(
            &init_params(
                &ModelSpec {
                    dim: 32,
                    m: 2,
                    lambda: 7.0,
                },
                0.5,
                3,
            )
            .unwrap(),
            &c.table,
            &c.sentences[..1],
        );
        assert_eq!(single.ratio_min, single.ratio_max);
    }

    #[test]
    fn zero_w_feature_probe() {
        let c = corpus();
        let p = ModelParams::zeros(&ModelSpec {
            dim: 32,
            m: 2,
            lambda: 7.0,
        })
        .unwrap();
        let f = feature_probe(&p, &c.table, None).unwrap();
        assert_eq!(f.end_probe, 0.0);
        assert!(f.relation_format.iter().chain(&f.answer_format).all(|&v| v == 0.0));
        assert!(f.grad_relation_format.is_empty());
        let ft = Batch::new(&c.table, &c.ft);
        let f = feature_probe(&p, &c.table, Some(&ft)).unwrap();
        assert!(f.grad_answer_format.iter().all(|&v| v == 0.0));
        assert_eq!(f.grad_relation_subject.len(), 3);
    }

    #[test]
    fn activation_fraction_extremes() {
        let c = corpus();
        let d = 32;
        let m = 4;
        let ones = ModelParams::from_parts(Array2::from_elem((d * m, d), 1.0), Array2::zeros((d, d)), m, 1.0).unwrap();
        assert_eq!(activation_counts(&ones, &c.table, &c.sentences), 1.0);
        let neg = ModelParams::from_parts(Array2::from_elem((d * m, d), -1.0), Array2::zeros((d, d)), m, 1.0).unwrap();
        assert_eq!(activation_counts(&neg, &c.table, &c.sentences), 0.0);
    }

    #[test]
    fn init_activation_fraction_is_high_whp() {
        let spec = VocabSpec {
            n_freq: 1,
            n_rare: 0,
            k: 1,
            r_size: 1,
            dim: 16,
        };
        let mut ok = 0;
        let trials = 200;
        for seed in 0..trials {
            let c = Corpus::generate(&spec, 0.0, seed).unwrap();
            let p = init_params(
                &ModelSpec {
                    dim: 16,
                    m: 100,
                    lambda: 1.0,
                },
                1.0 / 16.0,
                seed,
            )
            .unwrap();
            if activation_counts(&p, &c.table, &c.sentences) >= 0.4 {
                ok += 1;
            }
        }
        assert!(ok as f64 / trials as f64 >= 0.9, "{ok}/{trials}");
    }

    #[test]
    fn evaluate_is_consistent_and_deterministic() {
        let c = corpus();
        let p = init_params(
            &ModelSpec {
                dim: 32,
                m: 3,
                lambda: 5.0,
            },
            0.2,
            4,
        )
        .unwrap();
        let b = EvalBundle::new(&c).unwrap();
        let r = evaluate(&p, &b).unwrap();
        assert_eq!(r, evaluate(&p, &b).unwrap());
        assert_eq!(r.train_loss, batch_loss(&p, &b.ntp).unwrap());
        assert_eq!(r.extraction_loss, extraction_loss(&p, &c.table, &c.heldout).unwrap());
        assert_eq!(r.ood_accuracy, 1.0 - r.extraction_loss);
        assert_eq!(r.activation_fraction_min, activation_counts(&p, &c.table, &c.sentences));
        let back = MetricsRecord::from_csv_row(&r.to_csv_row()).unwrap();
        assert_eq!(back, r);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<MetricsRecord>(&json).unwrap(), r);
    }
}
