//! Synthetic untrimmed videos with planted moments, interval sampling,
//! chunking, and the on-disk feature store.

mod store;
mod video;
mod vocab;

pub use store::{
    load_record, read_feature_file, store_record, Manifest, ManifestChunk, ManifestVideo, Split,
    FEATURE_MAGIC, FEATURE_VERSION,
};
pub use video::{
    frame_count, generate_video, sample_interval, sample_intervals, MomentSample, Narration,
    VideoRecord, VideoSpec,
};
pub use vocab::{ConceptVocabulary, MAX_CONCEPT_COSINE};
