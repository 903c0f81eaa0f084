//! Dataset generation, training and evaluation runs over on-disk artifacts.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::datagen::{
    generate_video, load_record, store_record, ConceptVocabulary, Manifest, ManifestChunk, ManifestVideo,
    Split, VideoRecord,
};
use crate::error::{Error, Result};
use crate::eval::{nlq_infer, recall_grid, recognition_scores, temporal_iou, video_map, Interval, RecallGrid};
use crate::model::{Model, MomentPrediction};
use crate::train::{derive_seed, unusable_reason, StepReport, Trainer};

pub const VOCAB_FILE: &str = "vocab.json";
pub const CHUNK_DIR: &str = "chunks";
pub const CHECKPOINT_FILE: &str = "checkpoint.malc";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "report.json";
pub const NLQ_CSV_FILE: &str = "nlq_queries.csv";
pub const CONFIG_FILE: &str = "config.json";

// stream tags for derive_seed
const VOCAB_STREAM: u64 = 10;
const VIDEO_STREAM: u64 = 11;
const INIT_STREAM: u64 = 20;

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn is_nonempty_dir(path: &Path) -> Result<bool> {
    match fs::read_dir(path) {
        Ok(mut entries) => Ok(entries.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn video_id(i: usize) -> String {
    format!("video{i:03}")
}

/// Writes `num_videos` synthetic videos, chunked, plus `vocab.json` and
/// `manifest.json`. The last `holdout_videos` videos form the test split.
pub fn generate_dataset(config: &RunConfig, out: &Path, force: bool, workers: usize) -> Result<Manifest> {
    config.validate()?;
    if !force && is_nonempty_dir(out)? {
        return Err(Error::Refused(out.to_path_buf()));
    }
    create_dir(&out.join(CHUNK_DIR))?;

    let vocab = ConceptVocabulary::<f64>::generate(
        config.vocab_size,
        config.feature_dim,
        derive_seed(config.seed, &[VOCAB_STREAM]),
    )?;
    write_file(&out.join(VOCAB_FILE), vocab.to_json()?.as_bytes())?;

    let spec = config.video_spec();
    let train_count = config.num_videos - config.holdout_videos;
    let videos: Vec<ManifestVideo> = pool(workers)?.install(|| {
        (0..config.num_videos)
            .into_par_iter()
            .map(|i| {
                let id = video_id(i);
                let record = generate_video(&vocab, &spec, &id, derive_seed(config.seed, &[VIDEO_STREAM, i as u64]))?;
                let mut chunks = Vec::new();
                for chunk in record.chunk(config.chunk_seconds)? {
                    let rel = format!("{CHUNK_DIR}/{}.maln", chunk.video_id);
                    store_record(&out.join(&rel), &chunk)?;
                    chunks.push(ManifestChunk {
                        path: rel,
                        start: chunk.offset,
                        duration: chunk.duration,
                    });
                }
                Ok(ManifestVideo {
                    video_id: id,
                    duration: record.duration,
                    fps: record.fps,
                    split: if i < train_count { Split::Train } else { Split::Test },
                    chunks,
                    narrations: record.narrations,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let manifest = Manifest {
        vocab_file: VOCAB_FILE.into(),
        feature_dim: config.feature_dim,
        videos,
        config: config.to_json(),
    };
    manifest.save(out)?;
    info!("wrote {} videos in {} chunks to {}", manifest.videos.len(), manifest.chunk_count(), out.display());
    Ok(manifest)
}

/// A dataset loaded back from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub vocab: ConceptVocabulary<f64>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let vocab_path = dir.join(&manifest.vocab_file);
        let text = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let vocab = ConceptVocabulary::from_json(&text)?;
        if vocab.dim() != manifest.feature_dim {
            return Err(Error::Contract(format!(
                "vocabulary width {} differs from manifest feature_dim {}",
                vocab.dim(),
                manifest.feature_dim
            )));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            vocab,
        })
    }

    pub fn chunks(&self, video: &ManifestVideo) -> Result<Vec<VideoRecord<f64>>> {
        video
            .chunks
            .iter()
            .enumerate()
            .map(|(k, c)| {
                load_record(
                    &self.dir.join(&c.path),
                    &format!("{}_c{k}", video.video_id),
                    c.duration,
                    video.fps,
                    c.start,
                )
            })
            .collect()
    }

    /// The whole video, reassembled from its chunks, with unclipped narrations.
    pub fn full_video(&self, video: &ManifestVideo) -> Result<VideoRecord<f64>> {
        let mut record = VideoRecord::concat(&video.video_id, &self.chunks(video)?)?;
        if !video.narrations.is_empty() {
            record.narrations = video.narrations.clone();
        }
        record.validate()?;
        Ok(record)
    }

    pub fn videos_in(&self, split: Split) -> impl Iterator<Item = &ManifestVideo> {
        self.manifest.videos.iter().filter(move |v| v.split == split)
    }

    /// Test-split videos, or every video when there is no test split.
    pub fn eval_videos(&self) -> Vec<&ManifestVideo> {
        let test: Vec<_> = self.videos_in(Split::Test).collect();
        if test.is_empty() {
            self.manifest.videos.iter().collect()
        } else {
            test
        }
    }

    /// All usable training chunks in manifest order.
    pub fn training_chunks(&self, model: &Model<f64>) -> Result<Vec<VideoRecord<f64>>> {
        let mut out = Vec::new();
        for video in self.videos_in(Split::Train) {
            for chunk in self.chunks(video)? {
                match unusable_reason(model, &chunk) {
                    Some(why) => warn!("leaving out chunk {}: {why}", chunk.video_id),
                    None => out.push(chunk),
                }
            }
        }
        Ok(out)
    }
}

/// Outcome of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub reports: Vec<StepReport>,
    pub checkpoint: PathBuf,
}

impl TrainSummary {
    pub fn initial_loss(&self) -> Option<f64> {
        self.reports.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.reports.last().map(|r| r.loss)
    }
}

fn read_log_prefix(path: &Path, upto: u64) -> Result<Vec<String>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= upto))
        .map(str::to_string)
        .collect())
}

/// Trains on the dataset's train split, writing `train_log.csv`, `config.json`
/// and `checkpoint.malc` into `out`.
///
/// With `resume`, training continues from that checkpoint and earlier log rows
/// are kept. A non-finite loss or gradient stops the run after saving the last
/// good state.
pub fn train_model(config: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    config.validate()?;
    let dataset = Dataset::open(data)?;
    if dataset.manifest.feature_dim != config.feature_dim {
        return Err(Error::Task(format!(
            "dataset features are {}-wide but the model expects {}",
            dataset.manifest.feature_dim, config.feature_dim
        )));
    }
    create_dir(out)?;
    write_file(&out.join(CONFIG_FILE), serde_json::to_string_pretty(config)?.as_bytes())?;

    let mut trainer = match resume {
        Some(path) => Checkpoint::<f64>::load(path)?.into_trainer(config, &dataset.vocab)?,
        None => {
            let model = Model::new(config.model(), derive_seed(config.seed, &[INIT_STREAM]))?;
            Trainer::new(model, config.adam(), &dataset.vocab, config.schedule())?
        }
    };
    let chunks = dataset.training_chunks(&trainer.model)?;
    if chunks.is_empty() {
        return Err(Error::Task("the train split has no usable chunks".into()));
    }
    info!(
        "training on {} chunks, {} steps per epoch",
        chunks.len(),
        config.schedule().steps_per_epoch(chunks.len())
    );

    let log_path = out.join(TRAIN_LOG_FILE);
    let kept = read_log_prefix(&log_path, trainer.step_count())?;
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut lines = vec![StepReport::CSV_HEADER.to_string()];
    lines.extend(kept);
    for l in &lines {
        writeln!(log, "{l}").map_err(|e| Error::io(&log_path, e))?;
    }

    let ck_path = out.join(CHECKPOINT_FILE);
    let mut reports = Vec::new();
    let every = config.checkpoint_every;
    let outcome = trainer.run(&chunks, |t, r| {
        writeln!(log, "{}", r.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        reports.push(r.clone());
        if every > 0 && r.step % every == 0 {
            Checkpoint::capture(config, t).save(&ck_path)?;
        }
        Ok(())
    });
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if let Err(e) = outcome {
        if matches!(e, Error::NonFinite(_)) {
            // the failed step did not touch the parameters
            let good = Checkpoint::capture(config, &trainer);
            good.save(&ck_path)?;
            warn!("training aborted; state after step {} saved to {}", good.step, ck_path.display());
        }
        return Err(e);
    }
    Checkpoint::capture(config, &trainer).save(&ck_path)?;
    Ok(TrainSummary {
        reports,
        checkpoint: ck_path,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Recognition,
    Nlq,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recognition" => Ok(Task::Recognition),
            "nlq" => Ok(Task::Nlq),
            other => Err(Error::Task(format!("unknown task {other:?}; expected recognition or nlq"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Recognition => "recognition",
            Task::Nlq => "nlq",
        })
    }
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub videos: usize,
    pub map: Option<f64>,
    pub recall: Option<RecallGrid>,
    pub config: serde_json::Value,
}

/// One row of the per-query NLQ table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlqOutcome {
    pub video_id: String,
    pub concept: u32,
    pub gt: Interval,
    pub predictions: Vec<Interval>,
}

impl NlqOutcome {
    pub const CSV_HEADER: &'static str = "video_id,concept,gt_start,gt_end,top1_start,top1_end,top1_iou,best_iou";

    pub fn csv_row(&self) -> String {
        let top = self.predictions[0];
        let best = self
            .predictions
            .iter()
            .map(|&p| temporal_iou(p, self.gt))
            .fold(0.0, f64::max);
        format!(
            "{},{},{},{},{},{},{},{}",
            self.video_id,
            self.concept,
            self.gt.0,
            self.gt.1,
            top.0,
            top.1,
            temporal_iou(top, self.gt),
            best
        )
    }
}

/// Predictions for whole videos, computed in parallel and returned in input order.
pub fn predict_videos(
    model: &Model<f64>,
    videos: &[VideoRecord<f64>],
    workers: usize,
) -> Result<Vec<MomentPrediction<f64>>> {
    pool(workers)?.install(|| videos.par_iter().map(|v| model.predict(&v.features)).collect())
}

/// Recognition mAP over `videos`, labels being the set of narrated concepts.
pub fn recognition_map(
    model: &Model<f64>,
    vocab: &ConceptVocabulary<f64>,
    videos: &[VideoRecord<f64>],
    workers: usize,
) -> Result<f64> {
    let preds = predict_videos(model, videos, workers)?;
    let scores = preds
        .iter()
        .map(|p| recognition_scores(p, vocab.matrix()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<bool>> = videos
        .iter()
        .map(|v| {
            let mut row = vec![false; vocab.len()];
            for n in &v.narrations {
                row[n.concept as usize] = true;
            }
            row
        })
        .collect();
    Ok(video_map(&scores, &labels)?.map)
}

/// One NLQ query per narration, answered with the top `k` intervals.
pub fn nlq_outcomes(
    model: &Model<f64>,
    vocab: &ConceptVocabulary<f64>,
    videos: &[VideoRecord<f64>],
    k: usize,
    workers: usize,
) -> Result<Vec<NlqOutcome>> {
    let preds = predict_videos(model, videos, workers)?;
    let mut out = Vec::new();
    for (v, p) in videos.iter().zip(&preds) {
        for n in &v.narrations {
            out.push(NlqOutcome {
                video_id: v.video_id.clone(),
                concept: n.concept,
                gt: (n.start, n.end),
                predictions: nlq_infer(p, vocab.vector(n.concept), model.table(), v.duration, k)?,
            });
        }
    }
    Ok(out)
}

/// Evaluates a checkpoint on the dataset's evaluation videos and writes
/// `report.json` (plus `nlq_queries.csv` for NLQ) into `out`.
pub fn evaluate(
    config: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    task: Task,
    out: &Path,
    workers: usize,
) -> Result<EvalReport> {
    let ck = Checkpoint::<f64>::load(checkpoint)?;
    let model = ck.model()?;
    let dataset = Dataset::open(data)?;
    if dataset.manifest.feature_dim != model.config().feature_dim {
        return Err(Error::Task(format!(
            "{task} on a dataset with {}-wide features, but the checkpoint expects {}",
            dataset.manifest.feature_dim,
            model.config().feature_dim
        )));
    }
    let videos = dataset
        .eval_videos()
        .into_iter()
        .map(|v| dataset.full_video(v))
        .collect::<Result<Vec<_>>>()?;
    if let Some(v) = videos.iter().find(|v| v.frames() < model.config().conv_kernel) {
        return Err(Error::Task(format!("{} is too short for the tokenizer", v.video_id)));
    }
    create_dir(out)?;

    let mut report = EvalReport {
        task,
        videos: videos.len(),
        map: None,
        recall: None,
        config: config.to_json(),
    };
    match task {
        Task::Recognition => {
            report.map = Some(recognition_map(&model, &dataset.vocab, &videos, workers)?);
        }
        Task::Nlq => {
            if videos.iter().all(|v| v.narrations.is_empty()) {
                return Err(Error::Task("nlq needs narrated videos; the evaluation split has none".into()));
            }
            let k = config.nlq_k.iter().copied().max().unwrap_or(1);
            let outcomes = nlq_outcomes(&model, &dataset.vocab, &videos, k, workers)?;
            let gt: Vec<Interval> = outcomes.iter().map(|o| o.gt).collect();
            let preds: Vec<Vec<Interval>> = outcomes.iter().map(|o| o.predictions.clone()).collect();
            report.recall = Some(recall_grid(&gt, &preds, &config.nlq_k, &config.iou_thresholds)?);
            let mut csv = String::from(NlqOutcome::CSV_HEADER);
            csv.push('\n');
            for o in &outcomes {
                csv.push_str(&o.csv_row());
                csv.push('\n');
            }
            write_file(&out.join(NLQ_CSV_FILE), csv.as_bytes())?;
        }
    }
    let text = serde_json::to_string_pretty(&report)? + "\n";
    write_file(&out.join(REPORT_FILE), text.as_bytes())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            feature_dim: 16,
            model_dim: 16,
            heads: 2,
            head_dim: 8,
            num_queries: 6,
            te_rows: 16,
            ffn_hidden: 32,
            enc_layers: 1,
            dec_layers: 1,
            num_videos: 4,
            holdout_videos: 1,
            video_seconds: 60.0,
            fps: 2.0,
            chunk_seconds: 30.0,
            moments_per_video: 3,
            min_moment: 5.0,
            max_moment: 10.0,
            vocab_size: 6,
            epochs: 2,
            batch_size: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn generation_layout_and_refusal() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&tiny(), dir.path(), false, 2).unwrap();
        assert_eq!(m.chunk_count(), 8);
        assert_eq!(m.videos.iter().filter(|v| v.split == Split::Test).count(), 1);
        let err = generate_dataset(&tiny(), dir.path(), false, 1).unwrap_err();
        assert_eq!(err.category(), "refused");
        generate_dataset(&tiny(), dir.path(), true, 1).unwrap();
    }

    #[test]
    fn reassembled_video_keeps_unclipped_narrations() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&tiny(), dir.path(), false, 1).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        for v in &m.videos {
            let full = ds.full_video(v).unwrap();
            assert_eq!(full.narrations, v.narrations);
            assert_eq!(full.frames(), 120);
        }
    }

    #[test]
    fn task_names_parse() {
        assert_eq!("nlq".parse::<Task>().unwrap(), Task::Nlq);
        assert_eq!("recognition".parse::<Task>().unwrap().to_string(), "recognition");
        assert_eq!("detect".parse::<Task>().unwrap_err().category(), "task");
    }

    #[test]
    fn train_then_evaluate() {
        let data = tempfile::tempdir().unwrap();
        let run = tempfile::tempdir().unwrap();
        let cfg = tiny();
        generate_dataset(&cfg, data.path(), false, 1).unwrap();
        let summary = train_model(&cfg, data.path(), run.path(), None).unwrap();
        let log = fs::read_to_string(run.path().join(TRAIN_LOG_FILE)).unwrap();
        let ds = Dataset::open(data.path()).unwrap();
        let chunks = ds.training_chunks(&Model::new(cfg.model(), 0).unwrap()).unwrap().len();
        let steps = cfg.epochs * chunks.div_ceil(cfg.batch_size);
        assert_eq!(log.lines().count(), 1 + steps);
        assert_eq!(summary.reports.len(), steps);
        for task in [Task::Recognition, Task::Nlq] {
            let r = evaluate(&cfg, data.path(), &summary.checkpoint, task, run.path(), 2).unwrap();
            assert_eq!(r.videos, 1);
            assert_eq!(r.map.is_some(), task == Task::Recognition);
        }
        let csv = fs::read_to_string(run.path().join(NLQ_CSV_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 1 + cfg.moments_per_video);
    }
}
