//! Procedural source data, corruption families and domain streams.

pub mod corrupt;
pub mod glyphs;
pub mod stream;

pub use corrupt::{corrupt, CorruptionSpec, Family};
pub use glyphs::{class_templates, generate_glyphs, source_split, GlyphDataset, GLYPH_GEOMETRY};
pub use stream::{build_stream, BatchTruth, Domain, DomainStream, Schedule, StreamBatch};
