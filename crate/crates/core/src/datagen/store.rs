//! Feature-store files and the dataset manifest.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MALN" | version u32 | T u32 | C u32 | T·C × f32 (row-major)
//! count u32 | count × (concept u32, t f64, start f64, end f64)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::video::{Narration, VideoRecord};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const FEATURE_MAGIC: [u8; 4] = *b"MALN";
pub const FEATURE_VERSION: u32 = 1;
const NARRATION_BYTES: usize = 4 + 3 * 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestChunk {
    /// Relative to the dataset directory.
    pub path: String,
    pub start: f64,
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub video_id: String,
    pub duration: f64,
    pub fps: f64,
    pub split: Split,
    pub chunks: Vec<ManifestChunk>,
    /// Narrations of the whole video, with intervals not clipped at chunk edges.
    #[serde(default)]
    pub narrations: Vec<Narration>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub vocab_file: String,
    pub feature_dim: usize,
    pub videos: Vec<ManifestVideo>,
    /// Effective configuration that produced the dataset.
    pub config: serde_json::Value,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(Self::FILE_NAME);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn chunk_count(&self) -> usize {
        self.videos.iter().map(|v| v.chunks.len()).sum()
    }
}

pub fn store_record<S: Scalar>(path: &Path, record: &VideoRecord<S>) -> Result<()> {
    let (t, c) = record.features.dims2()?;
    let mut buf = Vec::with_capacity(16 + 4 * t * c + 4 + NARRATION_BYTES * record.narrations.len());
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(c as u32).to_le_bytes());
    for &x in record.features.data() {
        buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    buf.extend_from_slice(&(record.narrations.len() as u32).to_le_bytes());
    for n in &record.narrations {
        buf.extend_from_slice(&n.concept.to_le_bytes());
        buf.extend_from_slice(&n.timestamp.to_le_bytes());
        buf.extend_from_slice(&n.start.to_le_bytes());
        buf.extend_from_slice(&n.end.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!(
                    "need {n} bytes for {what} at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a feature file into its feature matrix and narrations.
pub fn read_feature_file<S: Scalar>(path: &Path) -> Result<(Tensor<S>, Vec<Narration>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != FEATURE_MAGIC {
        return Err(Error::Magic {
            path: path.to_path_buf(),
            expected: FEATURE_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            expected: FEATURE_VERSION,
            found: version,
        });
    }
    let t = r.u32("frame count")? as usize;
    let c = r.u32("feature width")? as usize;
    let payload = r.take(t * c * 4, "features")?;
    let data = payload
        .chunks_exact(4)
        .map(|b| S::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
        .collect();
    let features = Tensor::matrix(t, c, data)?;
    let count = r.u32("narration count")? as usize;
    let mut narrations = Vec::with_capacity(count);
    for _ in 0..count {
        narrations.push(Narration {
            concept: r.u32("concept id")?,
            timestamp: r.f64("timestamp")?,
            start: r.f64("interval start")?,
            end: r.f64("interval end")?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok((features, narrations))
}

/// Loads a record; id, duration, fps and offset come from the manifest.
pub fn load_record<S: Scalar>(
    path: &Path,
    video_id: &str,
    duration: f64,
    fps: f64,
    offset: f64,
) -> Result<VideoRecord<S>> {
    let (features, narrations) = read_feature_file(path)?;
    let record = VideoRecord {
        video_id: video_id.to_string(),
        duration,
        fps,
        offset,
        features,
        narrations,
    };
    record.validate()?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_video, ConceptVocabulary, VideoSpec};

    fn sample() -> VideoRecord<f64> {
        let v = ConceptVocabulary::generate(6, 32, 2).unwrap();
        generate_video(&v, &VideoSpec::default(), "vid", 3).unwrap()
    }

    #[test]
    fn round_trip_is_exact_and_sized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let rec = sample();
        store_record(&path, &rec).unwrap();
        let size = fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(size, 16 + rec.frames() * 32 * 4 + 4 + 28 * rec.narrations.len());
        let back = load_record::<f64>(&path, "vid", rec.duration, rec.fps, 0.0).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn corrupt_files_give_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        store_record(&path, &sample()).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_feature_file::<f64>(&path), Err(Error::Magic { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            read_feature_file::<f64>(&path),
            Err(Error::Version { found: 2, .. })
        ));

        fs::write(&path, &good[..good.len() - 5]).unwrap();
        assert!(matches!(read_feature_file::<f64>(&path), Err(Error::Truncated { .. })));

        fs::write(&path, &good[..2]).unwrap();
        assert!(matches!(read_feature_file::<f64>(&path), Err(Error::Truncated { .. })));

        let mut long = good.clone();
        long.push(0);
        fs::write(&path, &long).unwrap();
        assert!(matches!(read_feature_file::<f64>(&path), Err(Error::Truncated { .. })));
    }
}
