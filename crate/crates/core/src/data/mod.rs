//! Annotation ingestion, dataset statistics and synthetic scenes.

pub mod coco;
pub mod io;
pub mod synth;

pub use coco::{
    dataset_stats, embedded_splits, load_annotations, parse_annotations, CocoAnnotation, CocoCategory, CocoDoc,
    CocoImage, CountsManifest, LoadReport, SplitAssignment, StatsRow, StatsTable,
};
pub use io::{
    decode_ppm, export_detections, load_detections, read_ppm, read_split_manifest, split_manifest, write_ppm,
    write_split_manifest, SPLIT_NAMES,
};
pub use synth::{
    object_mask, occlusion_fractions, scenes_to_coco, scenes_to_gts, synth_categories, synth_dataset, synth_generate,
    SynthObject, SynthScene, SynthSceneSpec, CATEGORY_NAMES,
};
