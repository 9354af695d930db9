//! Tri-modal contrastive embeddings over overhead imagery, audio and text,
//! with cross-modal retrieval and zero-shot soundscape mapping.
//!
//! Pipeline: [`dataset`] builds aligned feature triplets, [`encoders`]
//! holds the three towers and temperatures, [`contrastive`] trains them on
//! the tape in [`autodiff`], [`retrieval`] scores a held-out gallery and
//! [`soundscape`] turns text or audio queries into georeferenced maps.

pub mod audio;
pub mod autodiff;
pub mod contrastive;
pub mod dataset;
pub mod embedding;
pub mod encoders;
pub mod geocode;
pub mod retrieval;
pub mod soundscape;
pub mod text;

pub use audio::{AudioError, MelConfig, MelExtractor, WaveformClip};
pub use contrastive::{LossBreakdown, LossMode, StepLog, TrainConfig, TrainError, TrainResult};
pub use dataset::{DatasetError, FeatureTable, SampleManifest, SampleRecord, SplitAssignment, TripletBatch};
pub use embedding::{EmbeddingBatch, EmbeddingError, EmbeddingVector, SimilarityMatrix};
pub use encoders::{ModelConfig, ModelError, ModelSnapshot, Modality, TemperatureSet};
pub use retrieval::{Direction, RetrievalError, RetrievalReport};
pub use soundscape::{
    CompositeMap, GeoBoundingBox, Heatmap, MapError, Query, RenderedMap, Soundscape, TileGrid, TileIndex, TileSource,
};
pub use text::TextRecord;
