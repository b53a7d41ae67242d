//! Datasets on disk, synthetic data, checkpoints, reports and overlays.

mod checkpoint;
mod dataset;
mod png_io;
mod report;
mod synthetic;

pub use checkpoint::{
    decode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta, ManifestEntry,
    FORMAT_VERSION, MAGIC,
};
pub use dataset::{Dataset, DatasetMeta, Provenance, Sample};
pub use png_io::{
    load_dataset, read_image_png, read_mask_png, render_overlay, save_dataset, write_image_png,
    write_mask_png, META_FILE,
};
pub use report::{read_report, write_report, Aggregates, Comparison, Report, REPORT_VERSION};
pub use synthetic::{generate_synthetic, synthetic_sample, Domain, Palette, SyntheticSpec};
