use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::vocab::{gaussian_unit, ConceptVocabulary};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// A timestamped concept annotation with the planted interval it came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Narration {
    pub concept: u32,
    /// Seconds from the start of the record.
    pub timestamp: f64,
    pub start: f64,
    pub end: f64,
}

/// Frame features and narrations of one (possibly chunked) untrimmed video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord<S> {
    pub video_id: String,
    pub duration: f64,
    pub fps: f64,
    /// Seconds between the source video's start and this record's start.
    pub offset: f64,
    /// `T × C`, unit-norm rows.
    pub features: Tensor<S>,
    pub narrations: Vec<Narration>,
}

/// Interval endpoints drawn for one narration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentSample {
    pub concept: u32,
    pub start: f64,
    pub end: f64,
}

/// Parameters of one synthetic video.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSpec {
    pub moments: usize,
    pub duration: f64,
    pub fps: f64,
    pub noise_level: f64,
    pub min_moment: f64,
    pub max_moment: f64,
    /// Draw concepts without replacement, so no concept is planted twice.
    #[serde(default)]
    pub distinct_concepts: bool,
}

impl Default for VideoSpec {
    fn default() -> Self {
        Self {
            moments: 4,
            duration: 100.0,
            fps: 6.0,
            noise_level: 0.1,
            min_moment: 10.0,
            max_moment: 20.0,
            distinct_concepts: false,
        }
    }
}

pub fn frame_count(duration: f64, fps: f64) -> usize {
    (duration * fps).round() as usize
}

impl<S: Scalar> VideoRecord<S> {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || !(self.fps > 0.0) {
            return Err(Error::Contract(format!(
                "{}: duration {} and fps {} must be positive",
                self.video_id, self.duration, self.fps
            )));
        }
        let mut prev = f64::NEG_INFINITY;
        for n in &self.narrations {
            let ordered = n.timestamp > prev
                && n.start <= n.timestamp
                && n.timestamp <= n.end
                && n.start >= 0.0
                && n.end <= self.duration;
            if !ordered {
                return Err(Error::Contract(format!(
                    "{}: narration {n:?} violates ordering or bounds",
                    self.video_id
                )));
            }
            prev = n.timestamp;
        }
        Ok(())
    }

    /// Splits into consecutive non-overlapping pieces of `chunk_seconds`.
    ///
    /// Each narration goes to the chunk containing its timestamp, re-based to the
    /// chunk start, with its interval clipped to the chunk. The last chunk may be
    /// shorter.
    pub fn chunk(&self, chunk_seconds: f64) -> Result<Vec<VideoRecord<S>>> {
        if !(chunk_seconds > 0.0) {
            return Err(Error::Config(format!("chunk length must be positive, got {chunk_seconds}")));
        }
        let ratio = self.duration / chunk_seconds;
        let count = if (ratio - ratio.round()).abs() < 1e-9 {
            ratio.round().max(1.0) as usize
        } else {
            ratio.ceil() as usize
        };
        let total = self.frames();
        let mut chunks = Vec::with_capacity(count);
        for k in 0..count {
            let start = k as f64 * chunk_seconds;
            let last = k + 1 == count;
            let end = if last {
                self.duration
            } else {
                ((k + 1) as f64 * chunk_seconds).min(self.duration)
            };
            let f0 = ((start * self.fps).round() as usize).min(total);
            let f1 = if last {
                total
            } else {
                ((end * self.fps).round() as usize).min(total)
            };
            if f1 <= f0 {
                return Err(Error::Generation(format!(
                    "chunk {k} of {} holds no frames",
                    self.video_id
                )));
            }
            let narrations = self
                .narrations
                .iter()
                .filter(|n| n.timestamp >= start && (n.timestamp < end || (last && n.timestamp <= end)))
                .map(|n| Narration {
                    concept: n.concept,
                    timestamp: n.timestamp - start,
                    start: n.start.max(start) - start,
                    end: n.end.min(end) - start,
                })
                .collect();
            chunks.push(VideoRecord {
                video_id: format!("{}_c{k}", self.video_id),
                duration: end - start,
                fps: self.fps,
                offset: self.offset + start,
                features: self.features.slice_rows(f0, f1 - f0)?,
                narrations,
            });
        }
        Ok(chunks)
    }

    /// Reassembles chunks produced by [`VideoRecord::chunk`].
    pub fn concat(video_id: &str, chunks: &[VideoRecord<S>]) -> Result<VideoRecord<S>> {
        let first = chunks
            .first()
            .ok_or_else(|| Error::Contract(format!("{video_id}: no chunks to join")))?;
        let features = Tensor::vstack(&chunks.iter().map(|c| c.features.clone()).collect::<Vec<_>>())?;
        let mut narrations = Vec::new();
        let mut duration = 0.0;
        for c in chunks {
            let base = c.offset - first.offset;
            narrations.extend(c.narrations.iter().map(|n| Narration {
                concept: n.concept,
                timestamp: n.timestamp + base,
                start: n.start + base,
                end: n.end + base,
            }));
            duration = base + c.duration;
        }
        Ok(VideoRecord {
            video_id: video_id.to_string(),
            duration,
            fps: first.fps,
            offset: first.offset,
            features,
            narrations,
        })
    }
}

/// Plants `spec.moments` non-overlapping moments and renders frame features.
///
/// In-moment frames are `normalize(concept + noise·N(0, I))`, background frames
/// `normalize(N(0, I))`. Values pass through `f32` so that the on-disk store
/// round-trips them exactly.
pub fn generate_video<S: Scalar>(
    vocab: &ConceptVocabulary<S>,
    spec: &VideoSpec,
    video_id: &str,
    seed: u64,
) -> Result<VideoRecord<S>> {
    if spec.moments == 0 {
        return Err(Error::Generation("a video needs at least one moment".into()));
    }
    if !(spec.min_moment > 0.0) || spec.max_moment < spec.min_moment {
        return Err(Error::Generation(format!(
            "moment length range [{}, {}] is invalid",
            spec.min_moment, spec.max_moment
        )));
    }
    if !(spec.duration > 0.0) || !(spec.fps > 0.0) {
        return Err(Error::Generation("duration and fps must be positive".into()));
    }
    if spec.distinct_concepts && spec.moments > vocab.len() {
        return Err(Error::Generation(format!(
            "{} distinct concepts requested from a vocabulary of {}",
            spec.moments,
            vocab.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lengths: Vec<f64> = (0..spec.moments)
        .map(|_| rng.random_range(spec.min_moment..=spec.max_moment))
        .collect();
    let used: f64 = lengths.iter().sum();
    if used > spec.duration {
        return Err(Error::Generation(format!(
            "{} moments need {used:.2} s but the video lasts {} s",
            spec.moments, spec.duration
        )));
    }
    let slack = spec.duration - used;
    let mut cuts: Vec<f64> = (0..spec.moments).map(|_| rng.random_range(0.0..=slack)).collect();
    cuts.sort_by(|a, b| a.total_cmp(b));

    let concepts: Vec<u32> = if spec.distinct_concepts {
        index::sample(&mut rng, vocab.len(), spec.moments)
            .into_iter()
            .map(|c| c as u32)
            .collect()
    } else {
        (0..spec.moments).map(|_| rng.random_range(0..vocab.len() as u32)).collect()
    };

    let mut narrations = Vec::with_capacity(spec.moments);
    let mut elapsed = 0.0;
    for (j, &len) in lengths.iter().enumerate() {
        let start = cuts[j] + elapsed;
        let end = (start + len).min(spec.duration);
        elapsed += len;
        narrations.push(Narration {
            concept: concepts[j],
            timestamp: 0.5 * (start + end),
            start,
            end,
        });
    }

    let frames = frame_count(spec.duration, spec.fps);
    let dim = vocab.dim();
    let mut data = Vec::with_capacity(frames * dim);
    for f in 0..frames {
        let time = (f as f64 + 0.5) / spec.fps;
        let host = narrations.iter().find(|n| n.start <= time && time <= n.end);
        let v: Vec<f64> = match host {
            Some(n) => {
                let c = vocab.vector(n.concept);
                let raw: Vec<f64> = c
                    .iter()
                    .map(|&x| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        x.as_f64() + spec.noise_level * z
                    })
                    .collect();
                let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < 1e-12 {
                    gaussian_unit(&mut rng, dim)
                } else {
                    raw.into_iter().map(|x| x / norm).collect()
                }
            }
            None => gaussian_unit(&mut rng, dim),
        };
        data.extend(v.into_iter().map(|x| S::of(x as f32 as f64)));
    }

    let record = VideoRecord {
        video_id: video_id.to_string(),
        duration: spec.duration,
        fps: spec.fps,
        offset: 0.0,
        features: Tensor::matrix(frames, dim, data)?,
        narrations,
    };
    record.validate()?;
    Ok(record)
}

/// Draws `(s_j, e_j)` with `s_j ~ U(t_{j−1}, t_j)` and `e_j ~ U(t_j, t_{j+1})`.
///
/// The first narration uses `t_0 = 0`, the last `t_{M+1} = duration`.
pub fn sample_interval<R: Rng + ?Sized>(
    narrations: &[Narration],
    j: usize,
    duration: f64,
    rng: &mut R,
) -> MomentSample {
    let t = narrations[j].timestamp;
    let prev = if j == 0 { 0.0 } else { narrations[j - 1].timestamp };
    let next = narrations.get(j + 1).map_or(duration, |n| n.timestamp);
    MomentSample {
        concept: narrations[j].concept,
        start: rng.random_range(prev..=t),
        end: rng.random_range(t..=next),
    }
}

pub fn sample_intervals<R: Rng + ?Sized>(
    narrations: &[Narration],
    duration: f64,
    rng: &mut R,
) -> Vec<MomentSample> {
    (0..narrations.len())
        .map(|j| sample_interval(narrations, j, duration, rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> ConceptVocabulary<f64> {
        ConceptVocabulary::generate(8, 64, 1).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn narr(ts: &[f64]) -> Vec<Narration> {
        ts.iter()
            .map(|&t| Narration {
                concept: 0,
                timestamp: t,
                start: t,
                end: t,
            })
            .collect()
    }

    #[test]
    fn distinct_concepts_never_repeat() {
        let v = vocab();
        let spec = VideoSpec {
            moments: 8,
            duration: 200.0,
            distinct_concepts: true,
            ..VideoSpec::default()
        };
        for seed in 0..20 {
            let rec = generate_video(&v, &spec, "v", seed).unwrap();
            let mut seen: Vec<u32> = rec.narrations.iter().map(|n| n.concept).collect();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), 8);
        }
        let too_many = VideoSpec { moments: 9, duration: 400.0, ..spec };
        assert!(generate_video(&v, &too_many, "v", 0).is_err());
    }

    #[test]
    fn noiseless_moment_frames_equal_their_concept() {
        let v = vocab();
        let spec = VideoSpec {
            noise_level: 0.0,
            ..VideoSpec::default()
        };
        let rec = generate_video(&v, &spec, "v", 5).unwrap();
        let mut checked = 0;
        for f in 0..rec.frames() {
            let time = (f as f64 + 0.5) / rec.fps;
            if let Some(n) = rec.narrations.iter().find(|n| n.start <= time && time <= n.end) {
                let c = dot(rec.features.row(f), v.vector(n.concept));
                assert!((c - 1.0).abs() < 1e-6, "frame {f}: {c}");
                // nearest-concept classification is exact without noise
                let best = (0..v.len() as u32)
                    .max_by(|&a, &b| {
                        dot(rec.features.row(f), v.vector(a))
                            .total_cmp(&dot(rec.features.row(f), v.vector(b)))
                    })
                    .unwrap();
                assert_eq!(best, n.concept);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn background_frames_are_uncorrelated_with_concepts() {
        let v = vocab();
        let spec = VideoSpec {
            moments: 1,
            duration: 200.0,
            min_moment: 1.0,
            max_moment: 1.0,
            ..VideoSpec::default()
        };
        let rec = generate_video(&v, &spec, "bg", 2).unwrap();
        let n = &rec.narrations[0];
        let mut sum = 0.0;
        let mut count = 0;
        for f in 0..rec.frames() {
            let time = (f as f64 + 0.5) / rec.fps;
            if time < n.start || time > n.end {
                for k in 0..v.len() as u32 {
                    sum += dot(rec.features.row(f), v.vector(k)).abs();
                    count += 1;
                }
            }
            if count >= 1000 * v.len() {
                break;
            }
        }
        let mean = sum / count as f64;
        assert!(count >= 1000);
        assert!(mean < 3.0 / 64f64.sqrt(), "mean |cos| = {mean}");
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let v = vocab();
        let a = generate_video(&v, &VideoSpec::default(), "v", 7).unwrap();
        let b = generate_video(&v, &VideoSpec::default(), "v", 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames(), 600);
        a.validate().unwrap();
        for w in a.narrations.windows(2) {
            assert!(w[0].end <= w[1].start, "moments overlap");
        }
        for n in &a.narrations {
            assert_eq!(n.timestamp, 0.5 * (n.start + n.end));
        }
    }

    #[test]
    fn overfull_video_is_rejected() {
        let spec = VideoSpec {
            moments: 10,
            duration: 50.0,
            ..VideoSpec::default()
        };
        assert!(matches!(
            generate_video(&vocab(), &spec, "x", 0),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn interval_sampling_respects_neighbours() {
        let ns = narr(&[2.0, 5.0, 9.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let s = sample_interval(&ns, 1, 12.0, &mut rng);
            assert!((2.0..=5.0).contains(&s.start));
            assert!((5.0..=9.0).contains(&s.end));
        }
        let single = narr(&[5.0]);
        for _ in 0..1000 {
            let s = sample_interval(&single, 0, 10.0, &mut rng);
            assert!((0.0..=5.0).contains(&s.start));
            assert!((5.0..=10.0).contains(&s.end));
        }
    }

    #[test]
    fn interval_start_mean_is_uniform() {
        let ns = narr(&[2.0, 5.0, 9.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| sample_interval(&ns, 1, 12.0, &mut rng).start)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 3.5).abs() < 0.05, "{mean}");
    }

    #[test]
    fn chunking_counts_and_rebases() {
        let v = vocab();
        let spec = VideoSpec {
            moments: 1,
            duration: 100.0,
            min_moment: 4.0,
            max_moment: 4.0,
            ..VideoSpec::default()
        };
        let mut rec = generate_video(&v, &spec, "v", 1).unwrap();
        rec.narrations = vec![Narration {
            concept: 3,
            timestamp: 50.0,
            start: 48.0,
            end: 52.0,
        }];
        let chunks = rec.chunk(40.0).unwrap();
        assert_eq!(chunks.len(), 3);
        let frames: Vec<usize> = chunks.iter().map(|c| c.frames()).collect();
        assert_eq!(frames, vec![240, 240, 120]);
        assert_eq!(chunks[2].duration, 20.0);
        assert!(chunks[0].narrations.is_empty());
        assert_eq!(chunks[1].narrations[0].timestamp, 10.0);
        assert_eq!(chunks[1].narrations[0].start, 8.0);

        let whole = VideoRecord::concat("v", &chunks).unwrap();
        assert_eq!(whole.features, rec.features);
        assert_eq!(whole.narrations, rec.narrations);
        assert_eq!(whole.duration, rec.duration);
    }

    #[test]
    fn chunk_of_full_length_is_a_no_op() {
        let v = vocab();
        let spec = VideoSpec {
            duration: 600.0,
            ..VideoSpec::default()
        };
        let rec = generate_video(&v, &spec, "v", 1).unwrap();
        let chunks = rec.chunk(600.0).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].features, rec.features);
        assert_eq!(chunks[0].narrations, rec.narrations);
        assert_eq!(chunks[0].duration, rec.duration);
    }

    #[test]
    fn clipped_narrations_stay_inside_their_chunk() {
        let v = vocab();
        for seed in 0..20 {
            let rec = generate_video(&v, &VideoSpec::default(), "v", seed).unwrap();
            for c in rec.chunk(30.0).unwrap() {
                c.validate().unwrap();
            }
        }
    }
}
