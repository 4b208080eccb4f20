//! Evaluation harnesses: fill-in-the-blank accuracy and outfit compatibility
//! AUC under a per-item BFS context budget.
//!
//! For every task the query items plus the union of their k-neighbourhoods
//! form a context subgraph; edges between query items are removed by default
//! so the quantity being predicted is never an input. Questions and outfits
//! are independent and evaluate in parallel.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::decoder::{decode_batch, decode_pair};
use crate::encoder::encoder_infer;
use crate::graph::{Graph, NodeRemap};
use crate::numeric::{Matrix, NumericError};
use crate::trainer::GaeModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("node {node} has no features or is absent from the graph")]
    MissingFeatures { node: usize },
    #[error("no questions to evaluate")]
    EmptyQuestionSet,
    #[error("an outfit needs at least 2 items, got {len}")]
    TooFewItems { len: usize },
    #[error("both score classes must be non-empty")]
    EmptyClass,
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// One fill-in-the-blank question: a partial outfit, candidate item ids, and
/// the index of the correct candidate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FitbQuestion {
    pub partial: Vec<usize>,
    pub choices: Vec<usize>,
    pub answer_index: usize,
}

/// A labelled outfit for the compatibility task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outfit {
    pub items: Vec<usize>,
    pub valid: bool,
}

/// Context protocol parameters: BFS budget per query item and whether edges
/// among the query items are withheld from the context graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalConfig {
    pub k: usize,
    pub exclude_query_edges: bool,
}

impl EvalConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            exclude_query_edges: true,
        }
    }
}

/// Builds the context graph for a set of query nodes: the queries plus the
/// union of each query's k-neighbourhood, induced from `g`, with query-query
/// edges removed when configured.
pub fn build_eval_context(g: &Graph, query: &[usize], cfg: &EvalConfig) -> (Graph, NodeRemap) {
    let mut nodes: BTreeSet<usize> = query.iter().copied().collect();
    for &q in query {
        nodes.extend(g.k_neighbourhood(q, cfg.k));
    }
    let node_list: Vec<usize> = nodes.iter().copied().collect();
    let (sub, remap) = g.induced_subgraph(&node_list);
    if !cfg.exclude_query_edges {
        return (sub, remap);
    }
    let query_new: BTreeSet<usize> = query.iter().filter_map(|&q| remap.to_new(q)).collect();
    let kept: Vec<(usize, usize)> = sub
        .edges()
        .into_iter()
        .filter(|(i, j)| !(query_new.contains(i) && query_new.contains(j)))
        .collect();
    let stripped = Graph::build(sub.num_nodes(), &kept).expect("filtered edges stay valid");
    (stripped, remap)
}

/// Embeds the context graph of `query` in inference mode. Returns the
/// embedding matrix (rows follow the remap) and the remap itself.
pub fn context_embeddings(
    model: &GaeModel,
    x: &Matrix,
    g: &Graph,
    query: &[usize],
    cfg: &EvalConfig,
) -> Result<(Matrix, NodeRemap), EvalError> {
    for &q in query {
        if q >= g.num_nodes() || q >= x.rows() {
            return Err(EvalError::MissingFeatures { node: q });
        }
    }
    let (ctx, remap) = build_eval_context(g, query, cfg);
    let mut gathered = Matrix::zeros(remap.len(), x.cols());
    for (new, &old) in remap.new_to_old().iter().enumerate() {
        gathered.row_mut(new).copy_from_slice(x.row(old));
    }
    let standardized = model.standardize(&gathered);
    let h = encoder_infer(&standardized, &ctx, &model.layers)?;
    Ok((h, remap))
}

/// Sums each choice's pairwise probabilities against the partial outfit.
/// `pair_probs[j][i]` is the probability for (partial item i, choice j).
pub fn score_choices(pair_probs: &[Vec<f64>]) -> Vec<f64> {
    pair_probs.iter().map(|row| row.iter().sum()).collect()
}

/// Index of the maximal score; ties resolve to the lowest index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Detailed outcome of one question.
#[derive(Clone, Debug, PartialEq)]
pub struct FitbOutcome {
    pub chosen: usize,
    pub correct: bool,
    pub scores: Vec<f64>,
}

fn answer_question(
    model: &GaeModel,
    x: &Matrix,
    g: &Graph,
    question: &FitbQuestion,
    cfg: &EvalConfig,
) -> Result<FitbOutcome, EvalError> {
    assert!(question.choices.len() >= 2, "a question needs >= 2 choices");
    assert!(
        question.answer_index < question.choices.len(),
        "answer index out of range"
    );
    let mut query: Vec<usize> = question.partial.clone();
    query.extend(&question.choices);
    let (h, remap) = context_embeddings(model, x, g, &query, cfg)?;
    let mut pair_probs = Vec::with_capacity(question.choices.len());
    for &choice in &question.choices {
        let cj = remap.to_new(choice).expect("choice in context");
        let mut row = Vec::with_capacity(question.partial.len());
        for &item in &question.partial {
            let oi = remap.to_new(item).expect("item in context");
            let (p, _) = decode_pair(h.row(oi), h.row(cj), &model.decoder)?;
            row.push(p);
        }
        pair_probs.push(row);
    }
    let scores = score_choices(&pair_probs);
    let chosen = argmax_lowest(&scores);
    Ok(FitbOutcome {
        chosen,
        correct: chosen == question.answer_index,
        scores,
    })
}

/// Answers one question: the choice whose summed pairwise probability
/// against the partial outfit is highest (lowest index on ties).
pub fn fitb_answer(
    model: &GaeModel,
    x: &Matrix,
    g: &Graph,
    question: &FitbQuestion,
    cfg: &EvalConfig,
) -> Result<usize, EvalError> {
    answer_question(model, x, g, question, cfg).map(|o| o.chosen)
}

fn try_map_all<T: Sync, R: Send>(
    items: &[T],
    f: impl Fn(&T) -> Result<R, EvalError> + Sync + Send,
) -> Result<Vec<R>, EvalError> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        crate::parallel::run(|| items.par_iter().map(f).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Per-question outcomes, in question order.
pub fn fitb_results(
    model: &GaeModel,
    x: &Matrix,
    g: &Graph,
    questions: &[FitbQuestion],
    cfg: &EvalConfig,
) -> Result<Vec<FitbOutcome>, EvalError> {
    if questions.is_empty() {
        return Err(EvalError::EmptyQuestionSet);
    }
    try_map_all(questions, |q| answer_question(model, x, g, q, cfg))
}

/// Fraction of questions answered correctly.
pub fn fitb_accuracy(
    model: &GaeModel,
    x: &Matrix,
    g: &Graph,
    questions: &[FitbQuestion],
    cfg: &EvalConfig,
) -> Result<f64, EvalError> {
    let outcomes = fitb_results(model, x, g, questions, cfg)?;
    let correct = outcomes.iter().filter(|o| o.correct).count();
    Ok(correct as f64 / outcomes.len() as f64)
}

/// Mean decoded probability over all item pairs of one outfit.
pub fn outfit_score(
    model: &GaeModel,
    x: &Matrix,
    g: &Graph,
    items: &[usize],
    cfg: &EvalConfig,
) -> Result<f64, EvalError> {
    if items.len() < 2 {
        return Err(EvalError::TooFewItems { len: items.len() });
    }
    let (h, remap) = context_embeddings(model, x, g, items, cfg)?;
    let mut pairs = Vec::with_capacity(items.len() * (items.len() - 1) / 2);
    for (a, &i) in items.iter().enumerate() {
        for &j in items.iter().skip(a + 1) {
            pairs.push((
                remap.to_new(i).expect("item in context"),
                remap.to_new(j).expect("item in context"),
            ));
        }
    }
    let probs = decode_batch(&h, &pairs, &model.decoder)?;
    Ok(probs.iter().sum::<f64>() / probs.len() as f64)
}

/// Outcome of scoring one labelled outfit.
#[derive(Clone, Debug, PartialEq)]
pub struct OutfitOutcome {
    pub score: f64,
    pub valid: bool,
}

/// Scores every outfit, in order.
pub fn outfit_results(
    model: &GaeModel,
    x: &Matrix,
    g: &Graph,
    outfits: &[Outfit],
    cfg: &EvalConfig,
) -> Result<Vec<OutfitOutcome>, EvalError> {
    try_map_all(outfits, |o| {
        outfit_score(model, x, g, &o.items, cfg).map(|score| OutfitOutcome {
            score,
            valid: o.valid,
        })
    })
}

/// ROC-AUC of outfit scores, valid against invalid.
pub fn compat_auc(
    model: &GaeModel,
    x: &Matrix,
    g: &Graph,
    outfits: &[Outfit],
    cfg: &EvalConfig,
) -> Result<f64, EvalError> {
    let outcomes = outfit_results(model, x, g, outfits, cfg)?;
    let valid: Vec<f64> = outcomes.iter().filter(|o| o.valid).map(|o| o.score).collect();
    let invalid: Vec<f64> = outcomes
        .iter()
        .filter(|o| !o.valid)
        .map(|o| o.score)
        .collect();
    roc_auc(&valid, &invalid)
}

/// Area under the ROC curve via the rank statistic: the probability that a
/// random valid score exceeds a random invalid one, counting ties as half.
pub fn roc_auc(valid_scores: &[f64], invalid_scores: &[f64]) -> Result<f64, EvalError> {
    if valid_scores.is_empty() || invalid_scores.is_empty() {
        return Err(EvalError::EmptyClass);
    }
    let n_v = valid_scores.len();
    let n_i = invalid_scores.len();
    let mut combined: Vec<(f64, bool)> = valid_scores
        .iter()
        .map(|&s| (s, true))
        .chain(invalid_scores.iter().map(|&s| (s, false)))
        .collect();
    combined.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Average ranks across tie groups, summed over the valid class.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < combined.len() {
        let mut j = i;
        while j + 1 < combined.len() && combined[j + 1].0 == combined[i].0 {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for entry in &combined[i..=j] {
            if entry.1 {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_v * (n_v + 1)) as f64 / 2.0;
    Ok(u / (n_v as f64 * n_i as f64))
}

/// One row of a k-sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub fitb_accuracy: f64,
    pub compat_auc: f64,
}

/// Evaluates both tasks at every requested context budget.
pub fn k_sweep(
    model: &GaeModel,
    x: &Matrix,
    g: &Graph,
    questions: &[FitbQuestion],
    outfits: &[Outfit],
    k_values: &[usize],
) -> Result<Vec<SweepRow>, EvalError> {
    assert!(!k_values.is_empty(), "k_sweep needs at least one k");
    k_values
        .iter()
        .map(|&k| {
            let cfg = EvalConfig::new(k);
            Ok(SweepRow {
                k,
                fitb_accuracy: fitb_accuracy(model, x, g, questions, &cfg)?,
                compat_auc: compat_auc(model, x, g, outfits, &cfg)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::trainer::{GaeModel, StandardizeStats};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn toy_model(input_dim: usize, width: usize, seed: u64) -> GaeModel {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let config = EncoderConfig {
            num_layers: 2,
            hidden_width: width,
            input_dim,
            input_dropout: 0.0,
            seed,
        };
        let stats = StandardizeStats {
            mean: vec![0.0; input_dim],
            std: vec![1.0; input_dim],
        };
        GaeModel::init(config, stats, &mut rng)
    }

    #[test]
    fn context_with_zero_budget_is_isolated_queries() {
        let g = Graph::build(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]).unwrap();
        let cfg = EvalConfig::new(0);
        let (ctx, remap) = build_eval_context(&g, &[0, 4], &cfg);
        assert_eq!(ctx.num_nodes(), 2);
        assert_eq!(ctx.num_edges(), 0);
        assert_eq!(remap.to_new(0), Some(0));
        assert_eq!(remap.to_new(4), Some(1));
    }

    #[test]
    fn adjacent_queries_lose_their_edge_under_exclusion() {
        let g = Graph::build(3, &[(0, 1), (1, 2)]).unwrap();
        let cfg = EvalConfig::new(0);
        let (ctx, _) = build_eval_context(&g, &[0, 1], &cfg);
        assert_eq!(ctx.num_edges(), 0);
        let keep = EvalConfig {
            k: 0,
            exclude_query_edges: false,
        };
        let (ctx2, _) = build_eval_context(&g, &[0, 1], &keep);
        assert_eq!(ctx2.num_edges(), 1);
    }

    #[test]
    fn path_context_by_hand() {
        // path 0-1-2-3-4, query {0,4}, k=1 -> nodes {0,1,3,4}, edges {(0,1),(3,4)}
        let g = Graph::build(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
        let cfg = EvalConfig::new(1);
        let (ctx, remap) = build_eval_context(&g, &[0, 4], &cfg);
        assert_eq!(remap.new_to_old(), &[0, 1, 3, 4]);
        let edges: Vec<(usize, usize)> = ctx
            .edges()
            .into_iter()
            .map(|(i, j)| (remap.to_old(i), remap.to_old(j)))
            .collect();
        assert_eq!(edges, vec![(0, 1), (3, 4)]);
    }

    #[test]
    fn score_sums_by_hand() {
        let probs = vec![vec![0.9, 0.8], vec![0.1, 0.2], vec![0.5, 0.4]];
        let scores = score_choices(&probs);
        assert!((scores[0] - 1.7).abs() < 1e-12);
        assert!((scores[1] - 0.3).abs() < 1e-12);
        assert!((scores[2] - 0.9).abs() < 1e-12);
        assert_eq!(argmax_lowest(&scores), 0);
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        assert_eq!(argmax_lowest(&[0.5, 0.5, 0.5]), 0);
        assert_eq!(argmax_lowest(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn fitb_accuracy_counts_fraction() {
        let g = Graph::build(8, &[(0, 1), (2, 3), (4, 5), (6, 7)]).unwrap();
        let model = toy_model(2, 3, 4);
        let x = Matrix::from_vec(8, 2, (0..16).map(|i| i as f64 * 0.3 - 2.0).collect());
        let questions: Vec<FitbQuestion> = (0..4)
            .map(|i| FitbQuestion {
                partial: vec![i],
                choices: vec![(i + 1) % 8, (i + 2) % 8, (i + 3) % 8, (i + 4) % 8],
                answer_index: 0,
            })
            .collect();
        let acc = fitb_accuracy(&model, &x, &g, &questions, &EvalConfig::new(1)).unwrap();
        let outcomes = fitb_results(&model, &x, &g, &questions, &EvalConfig::new(1)).unwrap();
        let manual =
            outcomes.iter().filter(|o| o.correct).count() as f64 / outcomes.len() as f64;
        assert_eq!(acc, manual);
    }

    #[test]
    fn empty_question_set_is_an_error() {
        let g = Graph::build(2, &[(0, 1)]).unwrap();
        let model = toy_model(2, 3, 4);
        let x = Matrix::zeros(2, 2);
        assert_eq!(
            fitb_accuracy(&model, &x, &g, &[], &EvalConfig::new(0)).unwrap_err(),
            EvalError::EmptyQuestionSet
        );
    }

    #[test]
    fn outfit_of_two_items_is_the_single_pair_probability() {
        let g = Graph::build(4, &[(0, 1), (2, 3)]).unwrap();
        let model = toy_model(2, 3, 9);
        let x = Matrix::from_vec(4, 2, (0..8).map(|i| i as f64).collect());
        let cfg = EvalConfig::new(0);
        let score = outfit_score(&model, &x, &g, &[0, 2], &cfg).unwrap();
        let (h, remap) = context_embeddings(&model, &x, &g, &[0, 2], &cfg).unwrap();
        let (p, _) = decode_pair(
            h.row(remap.to_new(0).unwrap()),
            h.row(remap.to_new(2).unwrap()),
            &model.decoder,
        )
        .unwrap();
        assert_eq!(score, p);
    }

    #[test]
    fn outfit_score_is_mean_of_pairs() {
        let g = Graph::build(5, &[(0, 1), (1, 2), (3, 4)]).unwrap();
        let model = toy_model(3, 4, 2);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = Matrix::from_vec(5, 3, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let cfg = EvalConfig::new(2);
        let items = [0, 2, 4];
        let score = outfit_score(&model, &x, &g, &items, &cfg).unwrap();
        let (h, remap) = context_embeddings(&model, &x, &g, &items, &cfg).unwrap();
        let mut probs = Vec::new();
        for (a, &i) in items.iter().enumerate() {
            for &j in items.iter().skip(a + 1) {
                let (p, _) = decode_pair(
                    h.row(remap.to_new(i).unwrap()),
                    h.row(remap.to_new(j).unwrap()),
                    &model.decoder,
                )
                .unwrap();
                probs.push(p);
            }
        }
        assert_eq!(probs.len(), 3);
        let mean = probs.iter().sum::<f64>() / 3.0;
        assert!((score - mean).abs() < 1e-15);
    }

    #[test]
    fn too_few_items_is_an_error() {
        let g = Graph::build(2, &[(0, 1)]).unwrap();
        let model = toy_model(2, 3, 4);
        let x = Matrix::zeros(2, 2);
        assert_eq!(
            outfit_score(&model, &x, &g, &[0], &EvalConfig::new(0)).unwrap_err(),
            EvalError::TooFewItems { len: 1 }
        );
    }

    #[test]
    fn outfit_score_is_permutation_invariant() {
        let g = Graph::build(6, &[(0, 1), (2, 3), (4, 5), (1, 2)]).unwrap();
        let model = toy_model(2, 4, 11);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let x = Matrix::from_vec(6, 2, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let cfg = EvalConfig::new(1);
        let a = outfit_score(&model, &x, &g, &[0, 2, 4], &cfg).unwrap();
        let b = outfit_score(&model, &x, &g, &[4, 0, 2], &cfg).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn roc_auc_hand_cases() {
        assert_eq!(roc_auc(&[0.9, 0.8], &[0.1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[0.5, 0.5, 0.5]).unwrap(), 0.5);
        // wins: (0.8,0.6), (0.8,0.2), (0.4,0.2); loss: (0.4,0.6)
        assert_eq!(roc_auc(&[0.8, 0.4], &[0.6, 0.2]).unwrap(), 0.75);
    }

    #[test]
    fn roc_auc_empty_class_is_an_error() {
        assert_eq!(roc_auc(&[], &[0.1]).unwrap_err(), EvalError::EmptyClass);
        assert_eq!(roc_auc(&[0.1], &[]).unwrap_err(), EvalError::EmptyClass);
    }

    #[test]
    fn k_zero_matches_manually_isolated_evaluation() {
        // Build the isolated-query graph by hand and compare bit-for-bit.
        let g = Graph::build(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]).unwrap();
        let model = toy_model(2, 4, 31);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let x = Matrix::from_vec(6, 2, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let query = [1usize, 4];
        let (h, remap) =
            context_embeddings(&model, &x, &g, &query, &EvalConfig::new(0)).unwrap();

        let isolated = Graph::build(2, &[]).unwrap();
        let mut gathered = Matrix::zeros(2, 2);
        gathered.row_mut(0).copy_from_slice(x.row(1));
        gathered.row_mut(1).copy_from_slice(x.row(4));
        let h_manual =
            encoder_infer(&model.standardize(&gathered), &isolated, &model.layers).unwrap();
        assert_eq!(h.row(remap.to_new(1).unwrap()), h_manual.row(0));
        assert_eq!(h.row(remap.to_new(4).unwrap()), h_manual.row(1));
    }

    #[test]
    fn duplicated_k_values_give_identical_rows() {
        let g = Graph::build(6, &[(0, 1), (1, 2), (3, 4), (4, 5)]).unwrap();
        let model = toy_model(2, 3, 12);
        let x = Matrix::from_vec(6, 2, (0..12).map(|i| i as f64 * 0.25).collect());
        let questions = vec![FitbQuestion {
            partial: vec![0],
            choices: vec![1, 3],
            answer_index: 0,
        }];
        let outfits = vec![
            Outfit {
                items: vec![0, 1],
                valid: true,
            },
            Outfit {
                items: vec![0, 3],
                valid: false,
            },
        ];
        let rows = k_sweep(&model, &x, &g, &questions, &outfits, &[1, 1]).unwrap();
        assert_eq!(rows[0], rows[1]);
    }

    proptest! {
        #[test]
        fn auc_complement_identity(
            a in proptest::collection::vec(0.0f64..1.0, 1..40),
            b in proptest::collection::vec(0.0f64..1.0, 1..40),
        ) {
            let ab = roc_auc(&a, &b).unwrap();
            let ba = roc_auc(&b, &a).unwrap();
            prop_assert!((ab + ba - 1.0).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            a in proptest::collection::vec(-5.0f64..5.0, 1..30),
            b in proptest::collection::vec(-5.0f64..5.0, 1..30),
        ) {
            let before = roc_auc(&a, &b).unwrap();
            let fa: Vec<f64> = a.iter().map(|v| (v * 0.7).exp()).collect();
            let fb: Vec<f64> = b.iter().map(|v| (v * 0.7).exp()).collect();
            let after = roc_auc(&fa, &fb).unwrap();
            prop_assert!((before - after).abs() < 1e-12);
        }
    }
}
