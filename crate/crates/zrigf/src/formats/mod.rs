//! On-disk formats: binary PPM images, JSONL corpora, the retrieval index
//! and training checkpoints.

pub mod checkpoint_file;
pub mod index_file;
pub mod jsonl;
pub mod ppm;
