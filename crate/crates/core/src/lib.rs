//! Brain tumor segmentation inference.
//!
//! The crate covers the inference side of a multi-modal MRI tumor segmenter:
//! cropping and normalizing scans ([`preprocess`]), running a pluggable model
//! ([`predictor`]) over overlapping windows ([`tiler`]), flip test-time
//! augmentation and model ensembling ([`ensemble`]), connected-component
//! cleanup ([`postprocess`]), Dice/HD95 scoring ([`metrics`]), postprocessing
//! parameter sweeps ([`tuner`]) and the end-to-end case runner ([`pipeline`]).

pub mod volgrid;
pub mod preprocess;
pub mod predictor;
pub mod tiler;
pub mod ensemble;
pub mod postprocess;
pub mod metrics;
pub mod tuner;
pub mod synth;
pub mod pipeline;
