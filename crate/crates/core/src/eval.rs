//! Zero-shot downstream scoring: multi-label recognition (video mAP) and
//! natural-language-query grounding (recall@K at temporal IoU).

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MomentPrediction;
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::temporal::decode_timestamp;

/// Closed interval in seconds.
pub type Interval = (f64, f64);

/// Videos with their multi-label ground truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledVideoSet {
    pub videos: Vec<(String, Vec<u32>)>,
}

impl LabeledVideoSet {
    pub fn validate(&self, classes: usize) -> Result<()> {
        for (id, labels) in &self.videos {
            if let Some(bad) = labels.iter().find(|&&c| c as usize >= classes) {
                return Err(Error::Contract(format!("{id}: label {bad} outside vocabulary of {classes}")));
            }
        }
        Ok(())
    }

    /// `V × K` indicator matrix.
    pub fn indicators(&self, classes: usize) -> Vec<Vec<bool>> {
        self.videos
            .iter()
            .map(|(_, labels)| {
                let mut row = vec![false; classes];
                for &c in labels {
                    row[c as usize] = true;
                }
                row
            })
            .collect()
    }
}

/// A language query against one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlqQuery {
    pub video_id: String,
    pub concept: u32,
    pub start: f64,
    pub end: f64,
}

impl NlqQuery {
    pub fn interval(&self) -> Interval {
        (self.start, self.end)
    }
}

/// `score_c = (1/N) Σ_i ⟨visual_i, class_c⟩` for every class row.
pub fn recognition_scores<S: Scalar>(pred: &MomentPrediction<S>, class_vectors: &Tensor<S>) -> Result<Vec<f64>> {
    let sims = pred.visual.matmul_t(class_vectors)?;
    let (n, k) = sims.dims2()?;
    Ok((0..k)
        .map(|c| (0..n).map(|i| sims.get(i, c).as_f64()).sum::<f64>() / n as f64)
        .collect())
}

/// Indices sorted by descending score; equal scores keep their original order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Mean of the precision at each positive's rank; `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if positive[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| acc / hits as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    /// `None` for classes with no positive video.
    pub per_class: Vec<Option<f64>>,
}

/// Video-level mAP over a `V × K` score matrix.
///
/// Classes without a positive video are excluded (with a warning); if none
/// remain the result is an error.
pub fn video_map(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MapReport> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "video_map",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let k = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != k) || labels.iter().any(|r| r.len() != k) {
        return Err(Error::Contract("ragged score or label rows".into()));
    }
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        let ap = average_precision(&col, &pos);
        if ap.is_none() {
            warn!("class {c} has no positive video; excluded from mAP");
        }
        per_class.push(ap);
    }
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::Task("no class has a positive video".into()));
    }
    Ok(MapReport {
        map: valid.iter().sum::<f64>() / valid.len() as f64,
        per_class,
    })
}

/// Top-`k` intervals for a query vector: queries ranked by visual similarity,
/// endpoints decoded against the base table, inverted pairs swapped.
pub fn nlq_infer<S: Scalar>(
    pred: &MomentPrediction<S>,
    query_vec: &[S],
    table: &Tensor<S>,
    duration: f64,
    k: usize,
) -> Result<Vec<Interval>> {
    let n = pred.num_queries();
    if k == 0 || k > n {
        return Err(Error::Config(format!("top-K must be in 1..={n}, got {k}")));
    }
    if query_vec.len() != pred.visual.cols() {
        return Err(Error::Shape {
            op: "nlq_infer",
            lhs: pred.visual.shape().to_vec(),
            rhs: vec![1, query_vec.len()],
        });
    }
    let scores: Vec<f64> = (0..n)
        .map(|i| pred.visual.row(i).iter().zip(query_vec).map(|(&a, &b)| (a * b).as_f64()).sum())
        .collect();
    ranking(&scores)
        .into_iter()
        .take(k)
        .map(|i| {
            let s = decode_timestamp(table, pred.te_start.row(i), duration)?;
            let e = decode_timestamp(table, pred.te_end.row(i), duration)?;
            Ok(if s > e { (e, s) } else { (s, e) })
        })
        .collect()
}

/// Intersection over union; zero when the union is empty.
pub fn temporal_iou(p: Interval, g: Interval) -> f64 {
    let inter = (p.1.min(g.1) - p.0.max(g.0)).max(0.0);
    let union = (p.1 - p.0) + (g.1 - g.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Fraction of queries with any of the first `k` predictions at IoU ≥ `threshold`.
pub fn nlq_recall(gt: &[Interval], predictions: &[Vec<Interval>], k: usize, threshold: f64) -> Result<f64> {
    if gt.len() != predictions.len() {
        return Err(Error::Shape {
            op: "nlq_recall",
            lhs: vec![gt.len()],
            rhs: vec![predictions.len()],
        });
    }
    if gt.is_empty() {
        return Err(Error::Task("no NLQ queries".into()));
    }
    let hits = gt
        .iter()
        .zip(predictions)
        .filter(|(g, p)| p.iter().take(k).any(|&q| temporal_iou(q, **g) >= threshold))
        .count();
    Ok(hits as f64 / gt.len() as f64)
}

/// `R@K` for every `K` and IoU threshold, keyed as `{"K": {"iou": value}}`.
pub type RecallGrid = BTreeMap<String, BTreeMap<String, f64>>;

pub fn recall_grid(gt: &[Interval], predictions: &[Vec<Interval>], ks: &[usize], ious: &[f64]) -> Result<RecallGrid> {
    let mut grid = RecallGrid::new();
    for &k in ks {
        let row = grid.entry(k.to_string()).or_default();
        for &iou in ious {
            row.insert(format!("{iou}"), nlq_recall(gt, predictions, k, iou)?);
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn prediction(visual: Vec<Vec<f64>>, te: Vec<Vec<f64>>) -> MomentPrediction<f64> {
        let rows = |m: &Vec<Vec<f64>>| {
            Tensor::matrix(m.len(), m[0].len(), m.iter().flat_map(|r| unit(r)).collect()).unwrap()
        };
        MomentPrediction {
            visual: rows(&visual),
            te_start: rows(&te),
            te_end: rows(&te),
        }
    }

    #[test]
    fn recognition_examples() {
        let c = vec![0.6, 0.8];
        let pred = prediction(vec![c.clone(); 3], vec![vec![1.0, 0.0]; 3]);
        let classes = Tensor::<f64>::from_rows(&[&[0.6, 0.8], &[-0.8, 0.6]]);
        let s = recognition_scores(&pred, &classes).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15);
        assert!(s[1].abs() < 1e-15);
    }

    #[test]
    fn recognition_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut draw = |r: usize, c: usize| -> Vec<Vec<f64>> {
            (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let pred = prediction(draw(5, 4), draw(5, 3));
        let classes: Vec<Vec<f64>> = draw(3, 4).iter().map(|r| unit(r)).collect();
        let ct = Tensor::matrix(3, 4, classes.concat()).unwrap();
        let got = recognition_scores(&pred, &ct).unwrap();
        for c in 0..3 {
            let mut acc = 0.0;
            for i in 0..5 {
                for k in 0..4 {
                    acc += pred.visual.get(i, k) * classes[c][k];
                }
            }
            assert!((got[c] - acc / 5.0).abs() < 1e-14);
        }
    }

    #[test]
    fn recognition_is_linear_in_class_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut draw = |r: usize, c: usize| -> Vec<Vec<f64>> {
            (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let pred = prediction(draw(4, 6), draw(4, 2));
        let uv: Vec<Vec<f64>> = draw(2, 6).iter().map(|r| unit(r)).collect();
        let sum: Vec<f64> = uv[0].iter().zip(&uv[1]).map(|(a, b)| a + b).collect();
        let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        let t = Tensor::matrix(3, 6, [uv[0].clone(), uv[1].clone(), unit(&sum)].concat()).unwrap();
        let s = recognition_scores(&pred, &t).unwrap();
        assert!((s[2] - (s[0] + s[1]) / norm).abs() < 1e-13);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.1], &[true, false]), Some(1.0));
        assert_eq!(average_precision(&[0.9, 0.1], &[false, true]), Some(0.5));
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(average_precision(&[0.5, 0.5], &[false, false]), None);
    }

    #[test]
    fn map_skips_classes_without_positives() {
        let scores = vec![vec![0.9, 0.2], vec![0.1, 0.8]];
        let labels = vec![vec![true, false], vec![false, false]];
        let r = video_map(&scores, &labels).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.per_class[1], None);
        assert!(video_map(&scores, &[vec![false; 2], vec![false; 2]]).is_err());
    }

    #[test]
    fn iou_examples() {
        assert_eq!(temporal_iou((1.0, 3.0), (1.0, 3.0)), 1.0);
        assert_eq!(temporal_iou((0.0, 1.0), (2.0, 3.0)), 0.0);
        assert!((temporal_iou((0.0, 4.0), (2.0, 6.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(temporal_iou((2.0, 2.0), (2.0, 2.0)), 0.0);
    }

    #[test]
    fn recall_examples() {
        let gt = vec![(0.0, 10.0), (20.0, 30.0)];
        let exact = vec![vec![(0.0, 10.0)], vec![(20.0, 30.0)]];
        assert_eq!(nlq_recall(&gt, &exact, 1, 0.99).unwrap(), 1.0);
        let far = vec![vec![(50.0, 60.0)], vec![(70.0, 80.0)]];
        assert_eq!(nlq_recall(&gt, &far, 5, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn recall_hand_tally() {
        // ten queries, ground truth [10q, 10q + 10]
        let gt: Vec<Interval> = (0..10).map(|q| (10.0 * q as f64, 10.0 * q as f64 + 10.0)).collect();
        let preds: Vec<Vec<Interval>> = gt
            .iter()
            .enumerate()
            .map(|(q, &(a, b))| match q % 4 {
                0 => vec![(a, b), (a + 50.0, b + 50.0)],         // exact at rank 1
                1 => vec![(a + 50.0, b + 50.0), (a + 4.0, b + 4.0)], // IoU 6/14 at rank 2
                2 => vec![(a + 6.0, b + 6.0)],                    // IoU 4/16 at rank 1
                _ => vec![(a + 100.0, b + 100.0)],                // miss
            })
            .collect();
        // q%4 == 0: q=0,4,8; ==1: 1,5,9; ==2: 2,6; ==3: 3,7
        assert_eq!(nlq_recall(&gt, &preds, 1, 0.3).unwrap(), 0.3);
        assert_eq!(nlq_recall(&gt, &preds, 5, 0.3).unwrap(), 0.6);
        assert_eq!(nlq_recall(&gt, &preds, 1, 0.2).unwrap(), 0.5);
        assert_eq!(nlq_recall(&gt, &preds, 5, 0.5).unwrap(), 0.3);
    }

    #[test]
    fn nlq_ranks_by_similarity_and_swaps() {
        let table = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]]);
        let mut pred = prediction(
            vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]],
            vec![vec![1.0, 0.0]; 3],
        );
        // query 1 starts at the end and ends at the start
        pred.te_start = Tensor::from_rows(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0]]);
        pred.te_end = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0], &[-1.0, 0.0]]);
        let out = nlq_infer(&pred, &[1.0, 0.0], &table, 10.0, 3).unwrap();
        assert_eq!(out, vec![(0.0, 10.0), (5.0, 10.0), (0.0, 5.0)]);
        assert!(nlq_infer(&pred, &[1.0, 0.0], &table, 10.0, 4).is_err());
    }

    #[test]
    fn grid_layout() {
        let gt = vec![(0.0, 10.0)];
        let p = vec![vec![(0.0, 10.0)]];
        let g = recall_grid(&gt, &p, &[1, 5], &[0.3, 0.5]).unwrap();
        assert_eq!(g["1"]["0.3"], 1.0);
        assert_eq!(g["5"]["0.5"], 1.0);
    }

    fn arb_case() -> impl Strategy<Value = (Vec<Interval>, Vec<Vec<Interval>>)> {
        let iv = (0.0..90.0f64, 0.5..10.0f64).prop_map(|(a, w)| (a, a + w));
        prop::collection::vec((iv.clone(), prop::collection::vec(iv, 1..6)), 1..12)
            .prop_map(|v| v.into_iter().unzip())
    }

    proptest! {
        #[test]
        fn recall_is_monotone((gt, preds) in arb_case()) {
            for k in 1..5 {
                for t in [0.1, 0.3, 0.5, 0.7] {
                    let r = nlq_recall(&gt, &preds, k, t).unwrap();
                    prop_assert!(nlq_recall(&gt, &preds, k + 1, t).unwrap() >= r);
                    prop_assert!(nlq_recall(&gt, &preds, k, t + 0.1).unwrap() <= r);
                }
            }
        }

        #[test]
        fn map_depends_only_on_ranks(
            scores in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 3), 2..8),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<Vec<bool>> = scores.iter().map(|r| r.iter().map(|_| rng.random_bool(0.5)).collect()).collect();
            if labels.iter().flatten().any(|&x| x) {
                let warped: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|x| x.exp() * 2.0 + 1.0).collect()).collect();
                let a = video_map(&scores, &labels).unwrap().map;
                let b = video_map(&warped, &labels).unwrap().map;
                prop_assert_eq!(a, b);
            }
        }
    }
}
