//! Language-guided segmentation around the fusion module: frozen class
//! embeddings, a small convolutional backbone, channel alignment, the
//! pixel-text score map and a light decoder head.

mod backbone;
mod checkpoint;
mod model;
mod text;

pub use backbone::{BackboneStub, InvertedResidual};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use model::{
    compute_score_map, downsample_labels, fuse_and_concat, ForwardOutput, PipelineConfig, SegmentationPipeline,
    IGNORE_INDEX, OUTPUT_STRIDE,
};
pub use text::{load_text_embeddings, prompt, stub_text_encoder, TextEmbeddings, KJTE_MAGIC};
