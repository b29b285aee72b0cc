//! File formats: binary feature maps and feature sets, binary checkpoints,
//! the dataset manifest, and the text reports (rankings, accuracy tables,
//! attention records, loss logs).

pub mod checkpoint;
pub mod feature_files;
pub mod manifest;
pub mod report;
