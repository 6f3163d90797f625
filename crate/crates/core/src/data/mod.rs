//! Dataset records, the synthetic corpus generator and checkpoints.

pub mod checkpoint;
pub mod dataset;
pub mod synth;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, checkpoint_from_bytes_as, load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_VERSION, MAGIC};
pub use dataset::{
    load_dataset, parse_records, read_records, record_to_problem, write_records, DataError, DatasetRecord,
};
pub use synth::{synth_generate, SynthError, SynthProfile};
