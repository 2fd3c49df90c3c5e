//! Retrieval and classification metrics: recall, precision, average
//! precision, mAP, Recall@K, and the bidirectional retrieval harness that
//! produces `EvalReport` artifacts.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::data::{ImageSample, PairDataset, Split, TextSample};
use crate::error::{Error, Result};
use crate::model::{encode_image, encode_text, similarity, MatchModel};

/// Binary confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// True-positive rate `tp / (tp + fn)`. Undefined when no positives exist.
pub fn recall(c: &ConfusionCounts) -> Result<f64> {
    if c.tp + c.fn_ == 0 {
        return Err(Error::UndefinedMetric("recall with no actual positives".into()));
    }
    Ok(c.tp as f64 / (c.tp + c.fn_) as f64)
}

/// Positive predictive value `tp / (tp + fp)`. Undefined when nothing was
/// predicted positive.
pub fn precision(c: &ConfusionCounts) -> Result<f64> {
    if c.tp + c.fp == 0 {
        return Err(Error::UndefinedMetric("precision with no predicted positives".into()));
    }
    Ok(c.tp as f64 / (c.tp + c.fp) as f64)
}

/// One query's ranking: candidates ordered best-first plus the relevant set.
#[derive(Clone, Debug)]
pub struct RankedList {
    pub query_id: String,
    pub ranked: Vec<String>,
    pub relevant: BTreeSet<String>,
}

impl RankedList {
    pub fn new(query_id: String, ranked: Vec<String>, relevant: BTreeSet<String>) -> Result<RankedList> {
        let unique: BTreeSet<&String> = ranked.iter().collect();
        if unique.len() != ranked.len() {
            return Err(Error::Invariant(format!(
                "ranked candidates for query {query_id} contain duplicates"
            )));
        }
        if let Some(missing) = relevant.iter().find(|r| !unique.contains(r)) {
            return Err(Error::Invariant(format!(
                "relevant id {missing} of query {query_id} is not among the candidates"
            )));
        }
        Ok(RankedList { query_id, ranked, relevant })
    }
}

/// Interpolation-free rank-sum average precision: the mean, over relevant
/// items, of precision at each relevant item's rank.
pub fn average_precision(list: &RankedList) -> Result<f64> {
    if list.relevant.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "average precision of query {} with an empty relevant set",
            list.query_id
        )));
    }
    let mut hits = 0u64;
    let mut sum = 0.0;
    for (idx, id) in list.ranked.iter().enumerate() {
        if list.relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (idx + 1) as f64;
        }
    }
    Ok(sum / list.relevant.len() as f64)
}

/// Arithmetic mean of per-list average precision.
pub fn mean_average_precision(lists: &[RankedList]) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::UndefinedMetric("mAP of an empty collection".into()));
    }
    let mut sum = 0.0;
    for list in lists {
        sum += average_precision(list)
            .map_err(|e| Error::UndefinedMetric(format!("query {}: {e}", list.query_id)))?;
    }
    Ok(sum / lists.len() as f64)
}

/// Fraction of queries whose top-k candidates contain a relevant item.
pub fn recall_at_k(lists: &[RankedList], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidInput("recall@k needs k >= 1".into()));
    }
    if lists.is_empty() {
        return Err(Error::InvalidInput("recall@k of an empty collection".into()));
    }
    let hits = lists
        .iter()
        .filter(|l| l.ranked.iter().take(k).any(|id| l.relevant.contains(id)))
        .count();
    Ok(hits as f64 / lists.len() as f64)
}

/// Per-query average precision entry of a report.
#[derive(Clone, Debug, Serialize)]
pub struct QueryAp {
    pub query_id: String,
    pub direction: String,
    pub ap: f64,
}

/// Full evaluation artifact.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    /// Classification-style recall over thresholded scores; absent when the
    /// denominator is empty.
    pub recall: Option<f64>,
    /// Classification-style precision; absent when nothing scored above the
    /// threshold.
    pub precision: Option<f64>,
    pub map: f64,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub per_query_ap: Vec<QueryAp>,
    pub counts: ConfusionCounts,
    /// How the table maps onto ranking data, since single recall/precision
    /// numbers for a retrieval task are a reconstruction.
    pub notes: String,
}

impl EvalReport {
    /// Aligned-column text table: header row then one value row.
    pub fn to_table(&self) -> String {
        let mut headers = vec!["recall".to_string(), "precision".to_string(), "map".to_string()];
        let fmt_opt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
        let mut values = vec![fmt_opt(self.recall), fmt_opt(self.precision), format!("{:.4}", self.map)];
        for (k, v) in &self.recall_at_k {
            headers.push(format!("recall@{k}"));
            values.push(format!("{v:.4}"));
        }
        let widths: Vec<usize> = headers
            .iter()
            .zip(&values)
            .map(|(h, v)| h.len().max(v.len()))
            .collect();
        let mut line1 = String::new();
        let mut line2 = String::new();
        for ((h, v), w) in headers.iter().zip(&values).zip(&widths) {
            line1.push_str(&format!("{h:<w$}  ", w = w));
            line2.push_str(&format!("{v:<w$}  ", w = w));
        }
        format!("{}\n{}\n", line1.trim_end(), line2.trim_end())
    }
}

/// Anything that can embed both modalities and score a pair of embeddings.
/// The trained model scores by cosine; the kernel head re-scores with its
/// decision value.
pub trait EmbeddingScorer {
    fn embed_image(&self, sample: &ImageSample) -> Result<Vec<f64>>;
    fn embed_text(&self, sample: &TextSample) -> Result<Vec<f64>>;

    fn score(&self, image_key: &[f64], text_key: &[f64]) -> Result<f64> {
        similarity(image_key, text_key)
    }

    /// Decision threshold for the classification-style counts.
    fn classification_threshold(&self) -> f64 {
        0.5
    }
}

impl EmbeddingScorer for MatchModel {
    fn embed_image(&self, sample: &ImageSample) -> Result<Vec<f64>> {
        encode_image(&self.image_enc, &self.config, &sample.pixels)
            .map_err(|e| Error::Shape(format!("image {}: {e}", sample.id)))
    }

    fn embed_text(&self, sample: &TextSample) -> Result<Vec<f64>> {
        encode_text(&self.text_enc, &self.config, &sample.token_ids)
            .map_err(|e| Error::Shape(format!("caption {}: {e}", sample.id)))
    }
}

/// Cosine scoring re-ranked by a trained multiple-kernel head over the
/// concatenated image and text embeddings.
pub struct MklRescorer<'a> {
    pub model: &'a MatchModel,
    pub head: &'a crate::mkl::MklModel,
}

impl EmbeddingScorer for MklRescorer<'_> {
    fn embed_image(&self, sample: &ImageSample) -> Result<Vec<f64>> {
        self.model.embed_image(sample)
    }

    fn embed_text(&self, sample: &TextSample) -> Result<Vec<f64>> {
        self.model.embed_text(sample)
    }

    fn score(&self, image_key: &[f64], text_key: &[f64]) -> Result<f64> {
        let mut joint = Vec::with_capacity(image_key.len() + text_key.len());
        joint.extend_from_slice(image_key);
        joint.extend_from_slice(text_key);
        crate::mkl::decision_function(self.head, &joint)
    }

    /// The kernel head classifies by the sign of its decision value.
    fn classification_threshold(&self) -> f64 {
        0.0
    }
}

/// Runs bidirectional retrieval over one split: every caption queries all
/// images and every image queries all captions, each sample encoded once.
/// A candidate is relevant when its caption content equals the query pair's
/// caption, so duplicated captions share their relevance class; for datasets
/// with unique captions this is exactly the paired item. Classification
/// counts come from thresholding every (image, caption) combination.
pub fn evaluate_retrieval<S: EmbeddingScorer>(
    scorer: &S,
    data: &PairDataset,
    split: Split,
    ks: &[usize],
) -> Result<EvalReport> {
    let pair_idx = data.split_indices(split);
    if pair_idx.is_empty() {
        return Err(Error::InvalidInput(format!("split {:?} is empty", split)));
    }

    // Encode each distinct image and caption once.
    let mut image_embeds: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut text_embeds: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &p in &pair_idx {
        let rec = &data.pairs[p];
        if !image_embeds.contains_key(&rec.image) {
            image_embeds.insert(rec.image, scorer.embed_image(&data.images[rec.image])?);
        }
        if !text_embeds.contains_key(&rec.text) {
            text_embeds.insert(rec.text, scorer.embed_text(&data.texts[rec.text])?);
        }
    }

    // scores[i][j]: query pair i's caption against candidate pair j's image.
    let n = pair_idx.len();
    let mut scores = vec![vec![0.0f64; n]; n];
    for (qi, &q) in pair_idx.iter().enumerate() {
        let text_key = &text_embeds[&data.pairs[q].text];
        for (ci, &c) in pair_idx.iter().enumerate() {
            let image_key = &image_embeds[&data.pairs[c].image];
            scores[qi][ci] = scorer.score(image_key, text_key)?;
        }
    }

    let caption_of = |p: usize| -> &str { &data.texts[data.pairs[p].text].raw };
    let relevant_sets: Vec<BTreeSet<String>> = pair_idx
        .iter()
        .map(|&q| {
            pair_idx
                .iter()
                .filter(|&&c| caption_of(c) == caption_of(q))
                .map(|&c| data.pairs[c].pair_id.clone())
                .collect()
        })
        .collect();

    let ranked_by = |key: &dyn Fn(usize) -> f64| -> Vec<String> {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
        order.into_iter().map(|ci| data.pairs[pair_idx[ci]].pair_id.clone()).collect()
    };

    let mut lists = Vec::with_capacity(2 * n);
    for qi in 0..n {
        let query_pair = &data.pairs[pair_idx[qi]];
        lists.push(RankedList::new(
            format!("caption:{}", query_pair.pair_id),
            ranked_by(&|ci| scores[qi][ci]),
            relevant_sets[qi].clone(),
        )?);
    }
    for ci in 0..n {
        let query_pair = &data.pairs[pair_idx[ci]];
        lists.push(RankedList::new(
            format!("image:{}", query_pair.pair_id),
            ranked_by(&|qi| scores[qi][ci]),
            relevant_sets[ci].clone(),
        )?);
    }

    let map = mean_average_precision(&lists)?;
    let mut at_k = BTreeMap::new();
    for &k in ks {
        at_k.insert(k, recall_at_k(&lists, k)?);
    }
    let per_query_ap = lists
        .iter()
        .map(|l| {
            Ok(QueryAp {
                query_id: l.query_id.clone(),
                direction: if l.query_id.starts_with("caption") {
                    "text_to_image".into()
                } else {
                    "image_to_text".into()
                },
                ap: average_precision(l)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let threshold = scorer.classification_threshold();
    let mut counts = ConfusionCounts::default();
    for qi in 0..n {
        for ci in 0..n {
            let actual = relevant_sets[qi].contains(&data.pairs[pair_idx[ci]].pair_id);
            let predicted = scores[qi][ci] >= threshold;
            match (actual, predicted) {
                (true, true) => counts.tp += 1,
                (false, true) => counts.fp += 1,
                (true, false) => counts.fn_ += 1,
                (false, false) => counts.tn += 1,
            }
        }
    }

    Ok(EvalReport {
        recall: recall(&counts).ok(),
        precision: precision(&counts).ok(),
        map,
        recall_at_k: at_k,
        per_query_ap,
        counts,
        notes: "single recall/precision values are score-threshold counts over all \
                image-caption combinations; ranking relevance is caption-content match, \
                averaged over both retrieval directions"
            .into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    #[test]
    fn recall_hand_cases() {
        assert_eq!(recall(&counts(9, 0, 1, 0)).unwrap(), 0.9);
        assert_eq!(recall(&counts(5, 3, 0, 2)).unwrap(), 1.0);
        assert!(recall(&counts(0, 7, 0, 3)).is_err());
    }

    #[test]
    fn precision_hand_cases() {
        assert_eq!(precision(&counts(9, 1, 0, 0)).unwrap(), 0.9);
        assert_eq!(precision(&counts(4, 0, 9, 0)).unwrap(), 1.0);
        assert!(precision(&counts(0, 0, 5, 5)).is_err());
    }

    fn list(ids: &[&str], relevant: &[&str]) -> RankedList {
        RankedList::new(
            "q".into(),
            ids.iter().map(|s| s.to_string()).collect(),
            relevant.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn ap_is_one_for_perfect_rankings() {
        let l = list(&["a", "b", "c", "d"], &["a", "b"]);
        assert_eq!(average_precision(&l).unwrap(), 1.0);
    }

    #[test]
    fn ap_single_relevant_at_rank_two() {
        let l = list(&["a", "b"], &["b"]);
        assert_eq!(average_precision(&l).unwrap(), 0.5);
    }

    #[test]
    fn ap_requires_a_relevant_item() {
        let l = RankedList::new("q".into(), vec!["a".into()], BTreeSet::new()).unwrap();
        assert!(average_precision(&l).is_err());
    }

    #[test]
    fn ap_ignores_order_below_the_last_relevant_item() {
        let a = list(&["x", "r", "y", "z"], &["r"]);
        let b = list(&["x", "r", "z", "y"], &["r"]);
        assert_eq!(average_precision(&a).unwrap(), average_precision(&b).unwrap());
    }

    #[test]
    fn ranked_list_invariants_are_enforced() {
        assert!(RankedList::new(
            "q".into(),
            vec!["a".into(), "a".into()],
            BTreeSet::new()
        )
        .is_err());
        assert!(RankedList::new(
            "q".into(),
            vec!["a".into()],
            ["b".to_string()].into_iter().collect()
        )
        .is_err());
    }

    #[test]
    fn map_hand_cases() {
        let perfect = list(&["a", "b"], &["a"]);
        let half = list(&["a", "b"], &["b"]);
        assert_eq!(mean_average_precision(&[perfect.clone(), half]).unwrap(), 0.75);
        assert_eq!(mean_average_precision(&[perfect.clone()]).unwrap(), 1.0);
        assert_eq!(
            mean_average_precision(&[perfect.clone(), perfect.clone(), perfect]).unwrap(),
            1.0
        );
    }

    #[test]
    fn map_of_copies_equals_single_ap() {
        let l = list(&["a", "b", "c"], &["b", "c"]);
        let single = average_precision(&l).unwrap();
        let copies = vec![l.clone(), l.clone(), l.clone(), l];
        assert!((mean_average_precision(&copies).unwrap() - single).abs() < 1e-15);
    }

    #[test]
    fn recall_at_k_definitions() {
        let top = list(&["r", "x", "y"], &["r"]);
        assert_eq!(recall_at_k(&[top.clone()], 1).unwrap(), 1.0);

        let third = list(&["x", "y", "r", "z", "w"], &["r"]);
        assert_eq!(recall_at_k(&[third.clone()], 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[third.clone()], 5).unwrap(), 1.0);

        assert!(recall_at_k(&[], 1).is_err());
        assert!(recall_at_k(&[top], 0).is_err());
    }

    #[test]
    fn recall_at_k_matches_hand_counted_mixed_collection() {
        // Ten lists, relevant item at rank r = 1..=10.
        let lists: Vec<RankedList> = (1..=10)
            .map(|r| {
                let ranked: Vec<String> = (1..=10)
                    .map(|i| if i == r { "rel".to_string() } else { format!("c{i}") })
                    .collect();
                RankedList::new(
                    format!("q{r}"),
                    ranked,
                    ["rel".to_string()].into_iter().collect(),
                )
                .unwrap()
            })
            .collect();
        assert_eq!(recall_at_k(&lists, 1).unwrap(), 0.1);
        assert_eq!(recall_at_k(&lists, 3).unwrap(), 0.3);
        assert_eq!(recall_at_k(&lists, 10).unwrap(), 1.0);
    }

    #[test]
    fn recall_at_k_is_monotone_in_k() {
        let lists: Vec<RankedList> = (1..=7)
            .map(|r| {
                let ranked: Vec<String> = (1..=7)
                    .map(|i| if i == r { "rel".to_string() } else { format!("c{i}") })
                    .collect();
                RankedList::new(format!("q{r}"), ranked, ["rel".to_string()].into_iter().collect())
                    .unwrap()
            })
            .collect();
        let mut prev = 0.0;
        for k in 1..=7 {
            let v = recall_at_k(&lists, k).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn report_table_is_aligned_and_complete() {
        let report = EvalReport {
            recall: Some(0.9),
            precision: None,
            map: 0.95,
            recall_at_k: [(1, 0.8), (5, 0.99)].into_iter().collect(),
            per_query_ap: vec![],
            counts: ConfusionCounts::default(),
            notes: String::new(),
        };
        let table = report.to_table();
        assert!(table.contains("recall@1"));
        assert!(table.contains("undefined"));
        assert!(table.contains("0.9500"));
    }
}
