//! File formats, JSON documents, checkpoints and the synthetic generator.

pub mod checkpoint;
pub mod documents;
pub mod features;
pub mod synth;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, ln_from_checkpoint, load_checkpoint, rn_from_checkpoint, save_checkpoint,
    Checkpoint, ModelKind,
};
pub use documents::{
    class_vocabulary, load_annotations, load_items, save_annotations, save_items, Item, VideoAnnotation, VideoItems,
};
pub use features::{decode_feature_file, encode_feature_file, read_feature_file, write_feature_file, FeatureKind};
pub use synth::{read_dataset, synth_generate, write_dataset, SynthConfig, VideoData};
