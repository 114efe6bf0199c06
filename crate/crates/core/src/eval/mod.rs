//! Analysis protocols: scale-shift stress tests, size-split grouping and
//! attention-diffusion measurements.

pub mod attention;
pub mod protocols;

pub use attention::{
    attention_map, diffusion_metrics, emit_heatmap, heatmap_pixels, read_heatmap_csv, AttentionMap,
    DiffusionMetrics, HeatmapFiles, QUERY_MARKER,
};
pub use protocols::{
    run_protocol, shrink_pad, shrink_pad_protocol, size_split, size_split_protocol, standard_protocol,
    LoadedRecognizer, ProtocolReport, Recognize, PROTOCOLS,
};
