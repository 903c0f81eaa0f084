//! Training loop: interval sampling, matching, loss and one Adam step per batch.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{sample_intervals, ConceptVocabulary, MomentSample, VideoRecord};
use crate::error::{Error, Result};
use crate::matching::{
    build_cost, hungarian, pair_means, sigmoid_contrastive_loss_var, similarity_vars, Assignment,
    GroundTruthVars, SimilarityMatrices,
};
use crate::model::Model;
use crate::numerics::{Adam, AdamConfig, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::temporal::embed_timestamps_var;

/// Knobs of the optimisation schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Draw interval samples once (as in epoch 0) instead of every epoch.
    pub freeze_intervals: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            seed: 0,
            freeze_intervals: false,
        }
    }
}

impl Schedule {
    pub fn steps_per_epoch(&self, chunks: usize) -> usize {
        chunks.div_ceil(self.batch_size.max(1))
    }
}

/// One chunk together with the interval samples used as its ground truth.
pub type BatchItem<'a, S> = (&'a VideoRecord<S>, Vec<MomentSample>);

/// What one batch evaluation produced.
#[derive(Clone, Debug)]
pub struct LossEval<S> {
    pub loss: S,
    /// Per parameter slot; `None` when the batch was evaluated without gradients.
    pub grads: Vec<Option<Tensor<S>>>,
    /// Per used chunk, in batch order.
    pub assignments: Vec<Assignment>,
    pub sims: Vec<SimilarityMatrices<S>>,
    /// Indices (into the batch) of chunks that contributed.
    pub used: Vec<usize>,
}

/// Per-step summary, also the row format of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    /// Visual, start and end channels.
    pub matched: [f64; 3],
    pub unmatched: [f64; 3],
    pub matched_mean: f64,
    pub unmatched_mean: f64,
    pub temperature: f64,
    pub bias: f64,
    pub chunks_used: usize,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "step,loss,matched_sim_mean,unmatched_sim_mean,t,b";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss, self.matched_mean, self.unmatched_mean, self.temperature, self.bias
        )
    }
}

/// Why a chunk cannot be trained on, if it cannot.
pub fn unusable_reason<S: Scalar>(model: &Model<S>, chunk: &VideoRecord<S>) -> Option<String> {
    let cfg = model.config();
    if chunk.narrations.is_empty() {
        Some("has no narrations".into())
    } else if chunk.frames() < cfg.conv_kernel {
        Some(format!("has {} frames, fewer than the kernel {}", chunk.frames(), cfg.conv_kernel))
    } else {
        None
    }
}

fn chunk_loss<S: Scalar>(
    model: &Model<S>,
    vocab: &ConceptVocabulary<S>,
    tape: &mut Tape<S>,
    vars: &[Var],
    chunk: &VideoRecord<S>,
    samples: &[MomentSample],
    fixed: Option<&Assignment>,
) -> Result<(Var, Assignment, SimilarityMatrices<S>)> {
    let n = model.config().num_queries;
    if samples.len() > n {
        return Err(Error::Capacity {
            queries: n,
            targets: samples.len(),
        });
    }
    let pred = model.forward_on(tape, vars, &chunk.features)?;

    let lang_rows: Vec<&[S]> = samples.iter().map(|s| vocab.vector(s.concept)).collect();
    let lang = Tensor::matrix(
        samples.len(),
        vocab.dim(),
        lang_rows.iter().flat_map(|r| r.iter().copied()).collect(),
    )?;
    let table = model.table_var(vars);
    let starts: Vec<f64> = samples.iter().map(|s| s.start).collect();
    let ends: Vec<f64> = samples.iter().map(|s| s.end).collect();
    let te_start = embed_timestamps_var(tape, table, &starts, chunk.duration)?;
    let te_end = embed_timestamps_var(tape, table, &ends, chunk.duration)?;
    let gt = GroundTruthVars {
        lang: tape.constant(lang),
        te_start: tape.l2_normalize_rows(te_start)?,
        te_end: tape.l2_normalize_rows(te_end)?,
    };

    let sims = similarity_vars(tape, &pred, &gt)?;
    let values = sims.read(tape);
    let assignment = match fixed {
        Some(a) => a.clone(),
        None => hungarian(&build_cost(&values)?)?,
    };
    let loss = sigmoid_contrastive_loss_var(
        tape,
        &sims,
        &assignment,
        model.log_temperature_var(vars),
        model.loss_bias_var(vars),
    )?;
    Ok((loss, assignment, values))
}

/// Mean loss over the usable chunks of `batch`, with gradients when
/// `with_grads` is set.
///
/// With `fixed`, the given assignments (one per used chunk) replace matching,
/// which makes the loss a smooth function of the parameters.
pub fn evaluate_batch<S: Scalar>(
    model: &Model<S>,
    vocab: &ConceptVocabulary<S>,
    batch: &[BatchItem<'_, S>],
    fixed: Option<&[Assignment]>,
    with_grads: bool,
) -> Result<LossEval<S>> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, with_grads);
    let mut losses = Vec::new();
    let mut assignments = Vec::new();
    let mut sims = Vec::new();
    let mut used = Vec::new();
    for (k, (chunk, samples)) in batch.iter().enumerate() {
        if let Some(why) = unusable_reason(model, chunk) {
            warn!("skipping chunk {}: {why}", chunk.video_id);
            continue;
        }
        let preset = match fixed {
            Some(list) => Some(list.get(used.len()).ok_or_else(|| {
                Error::Contract(format!("no fixed assignment for used chunk {}", used.len()))
            })?),
            None => None,
        };
        let (loss, a, s) = chunk_loss(model, vocab, &mut tape, &vars, chunk, samples, preset)?;
        losses.push(loss);
        assignments.push(a);
        sims.push(s);
        used.push(k);
    }
    let Some((&first, rest)) = losses.split_first() else {
        return Err(Error::Contract("batch has no usable chunks".into()));
    };
    let mut total = first;
    for &l in rest {
        total = tape.add(total, l)?;
    }
    let mean = tape.scale(total, S::one() / S::of(losses.len() as f64));
    let loss = tape.value(mean).item()?;
    let grads = if with_grads {
        let g = tape.backward(mean)?;
        model.params().collect_grads(&vars, &g)
    } else {
        vec![None; model.params().len()]
    };
    Ok(LossEval {
        loss,
        grads,
        assignments,
        sims,
        used,
    })
}

/// Deterministic seed for a stream identified by `parts`.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    // splitmix64 finaliser folded over the parts
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts
        .iter()
        .fold(mix(seed.wrapping_add(0x9e37_79b9_7f4a_7c15)), |acc, &p| {
            mix(acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15))
        })
}

/// Model, optimizer and vocabulary bundled for training.
#[derive(Clone, Debug)]
pub struct Trainer<'v, S> {
    pub model: Model<S>,
    pub adam: Adam<S>,
    pub vocab: &'v ConceptVocabulary<S>,
    pub schedule: Schedule,
}

impl<'v, S: Scalar> Trainer<'v, S> {
    pub fn new(model: Model<S>, adam: AdamConfig, vocab: &'v ConceptVocabulary<S>, schedule: Schedule) -> Result<Self> {
        if schedule.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if vocab.dim() != model.config().feature_dim {
            return Err(Error::Config(format!(
                "vocabulary width {} differs from model feature width {}",
                vocab.dim(),
                model.config().feature_dim
            )));
        }
        let adam = Adam::new(adam, model.params());
        Ok(Self {
            model,
            adam,
            vocab,
            schedule,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step_count()
    }

    /// Interval samples for chunk `index` in `epoch`, from a stream that does
    /// not depend on anything else that happened during training.
    pub fn samples_for(&self, chunk: &VideoRecord<S>, index: usize, epoch: usize) -> Vec<MomentSample> {
        let epoch = if self.schedule.freeze_intervals { 0 } else { epoch };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.schedule.seed, &[1, epoch as u64, index as u64]));
        sample_intervals(&chunk.narrations, chunk.duration, &mut rng)
    }

    /// Chunk visiting order for `epoch`.
    pub fn epoch_order(&self, chunks: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..chunks).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.schedule.seed, &[2, epoch as u64]));
        order.shuffle(&mut rng);
        order
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &[BatchItem<'_, S>]) -> Result<StepReport> {
        let eval = evaluate_batch(&self.model, self.vocab, batch, None, true)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss is {} at step {}",
                eval.loss,
                self.adam.step_count() + 1
            )));
        }
        self.adam.step(self.model.params_mut(), &eval.grads)?;
        Ok(self.report(&eval))
    }

    fn report(&self, eval: &LossEval<S>) -> StepReport {
        let mut sums = [[0.0f64; 2]; 3];
        let mut counts = [[0usize; 2]; 3];
        for (a, s) in eval.assignments.iter().zip(&eval.sims) {
            for (c, sim) in s.channels().into_iter().enumerate() {
                let (m, u) = pair_means(sim, a);
                let nm = a.targets();
                let nu = a.queries * a.targets() - nm;
                if nm > 0 {
                    sums[c][0] += m * nm as f64;
                    counts[c][0] += nm;
                }
                if nu > 0 {
                    sums[c][1] += u * nu as f64;
                    counts[c][1] += nu;
                }
            }
        }
        let ratio = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
        let matched = [0, 1, 2].map(|c| ratio(sums[c][0], counts[c][0]));
        let unmatched = [0, 1, 2].map(|c| ratio(sums[c][1], counts[c][1]));
        let pooled = |k: usize| {
            ratio(
                (0..3).map(|c| sums[c][k]).sum(),
                (0..3).map(|c| counts[c][k]).sum(),
            )
        };
        StepReport {
            step: self.adam.step_count(),
            loss: eval.loss.as_f64(),
            matched,
            unmatched,
            matched_mean: pooled(0),
            unmatched_mean: pooled(1),
            temperature: self.model.temperature().as_f64(),
            bias: self.model.loss_bias().as_f64(),
            chunks_used: eval.used.len(),
        }
    }

    /// Runs the schedule from the current step to the end, calling `on_step`
    /// after every update. Resuming from a checkpoint replays exactly because
    /// shuffles and samples are derived from `(seed, epoch, index)` only.
    pub fn run<F>(&mut self, chunks: &[VideoRecord<S>], mut on_step: F) -> Result<()>
    where
        F: FnMut(&Self, &StepReport) -> Result<()>,
    {
        if chunks.is_empty() {
            return Err(Error::Contract("no training chunks".into()));
        }
        let per_epoch = self.schedule.steps_per_epoch(chunks.len()) as u64;
        let total = per_epoch * self.schedule.epochs as u64;
        while self.step_count() < total {
            let step = self.step_count();
            let epoch = (step / per_epoch) as usize;
            let b = (step % per_epoch) as usize;
            let order = self.epoch_order(chunks.len(), epoch);
            let bs = self.schedule.batch_size;
            let batch: Vec<BatchItem<'_, S>> = order[b * bs..((b + 1) * bs).min(chunks.len())]
                .iter()
                .map(|&i| (&chunks[i], self.samples_for(&chunks[i], i, epoch)))
                .collect();
            let report = self.train_step(&batch)?;
            on_step(self, &report)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_video, VideoSpec};
    use crate::model::ModelConfig;

    fn small() -> (ConceptVocabulary<f64>, ModelConfig, VideoRecord<f64>) {
        let vocab = ConceptVocabulary::generate(6, 16, 2).unwrap();
        let cfg = ModelConfig {
            feature_dim: 16,
            model_dim: 16,
            conv_kernel: 7,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            head_dim: 8,
            num_queries: 6,
            te_rows: 16,
            ffn_hidden: 32,
        };
        let spec = VideoSpec {
            moments: 3,
            duration: 60.0,
            fps: 2.0,
            ..VideoSpec::default()
        };
        let video = generate_video(&vocab, &spec, "v", 4).unwrap();
        (vocab, cfg, video)
    }

    #[test]
    fn initial_loss_is_finite_and_positive() {
        let (vocab, cfg, video) = small();
        let model = Model::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples = sample_intervals(&video.narrations, video.duration, &mut rng);
        let eval = evaluate_batch(&model, &vocab, &[(&video, samples)], None, false).unwrap();
        assert!(eval.loss.is_finite() && eval.loss > 0.0);
        assert_eq!(eval.assignments[0].targets(), 3);
    }

    #[test]
    fn temperature_gradient_matches_finite_difference() {
        let (vocab, cfg, video) = small();
        let model = Model::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples = sample_intervals(&video.narrations, video.duration, &mut rng);
        let batch = [(&video, samples)];
        let eval = evaluate_batch(&model, &vocab, &batch, None, true).unwrap();
        let slot = model.params().slot("loss.log_temperature").unwrap();
        let analytic = eval.grads[slot].as_ref().unwrap().data()[0];
        let h = 1e-5;
        let at = |delta: f64| {
            let mut m = model.clone();
            m.params_mut().at_mut(slot).data_mut()[0] += delta;
            evaluate_batch(&m, &vocab, &batch, Some(&eval.assignments), false).unwrap().loss
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(rel < 1e-4, "{analytic} vs {numeric}");
    }

    #[test]
    fn overfitting_lowers_the_loss() {
        let (vocab, cfg, video) = small();
        let schedule = Schedule {
            epochs: 200,
            batch_size: 1,
            seed: 3,
            freeze_intervals: true,
        };
        let adam = AdamConfig {
            lr: 2e-3,
            ..AdamConfig::default()
        };
        let mut trainer = Trainer::new(Model::new(cfg, 1).unwrap(), adam, &vocab, schedule).unwrap();
        let mut losses = Vec::new();
        trainer
            .run(std::slice::from_ref(&video), |_, r| {
                losses.push(r.loss);
                Ok(())
            })
            .unwrap();
        assert_eq!(losses.len(), 200);
        assert!(losses[199] < losses[0], "{} !< {}", losses[199], losses[0]);
    }

    #[test]
    fn empty_chunks_are_skipped() {
        let (vocab, cfg, video) = small();
        let model = Model::new(cfg, 1).unwrap();
        let mut bare = video.clone();
        bare.narrations.clear();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples = sample_intervals(&video.narrations, video.duration, &mut rng);
        let eval = evaluate_batch(&model, &vocab, &[(&bare, vec![]), (&video, samples)], None, false).unwrap();
        assert_eq!(eval.used, vec![1]);
        let err = evaluate_batch(&model, &vocab, &[(&bare, vec![])], None, false).unwrap_err();
        assert_eq!(err.category(), "contract");
    }

    #[test]
    fn too_many_narrations_is_a_capacity_error() {
        let (vocab, mut cfg, video) = small();
        cfg.num_queries = 2;
        let model = Model::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples = sample_intervals(&video.narrations, video.duration, &mut rng);
        let err = evaluate_batch(&model, &vocab, &[(&video, samples)], None, false).unwrap_err();
        assert!(matches!(err, Error::Capacity { .. }));
    }

    #[test]
    fn frozen_samples_repeat_across_epochs() {
        let (vocab, cfg, video) = small();
        let mut schedule = Schedule::default();
        let t = Trainer::new(Model::new(cfg, 1).unwrap(), AdamConfig::default(), &vocab, schedule).unwrap();
        assert_ne!(t.samples_for(&video, 0, 0), t.samples_for(&video, 0, 1));
        schedule.freeze_intervals = true;
        let t = Trainer::new(Model::new(cfg, 1).unwrap(), AdamConfig::default(), &vocab, schedule).unwrap();
        assert_eq!(t.samples_for(&video, 0, 0), t.samples_for(&video, 0, 5));
        assert_eq!(t.epoch_order(10, 3), t.epoch_order(10, 3));
    }

    #[test]
    fn csv_row_layout() {
        let r = StepReport {
            step: 3,
            loss: 1.5,
            matched: [0.0; 3],
            unmatched: [0.0; 3],
            matched_mean: 0.25,
            unmatched_mean: -0.5,
            temperature: 10.0,
            bias: -10.0,
            chunks_used: 1,
        };
        assert_eq!(r.csv_row(), "3,1.5,0.25,-0.5,10,-10");
        assert_eq!(StepReport::CSV_HEADER.split(',').count(), 6);
    }
}
