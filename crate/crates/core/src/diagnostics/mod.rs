//! Empirical mixing, conductance and isoperimetry diagnostics, with an
//! exhaustive small-chain oracle.

pub mod estimators;
pub mod exact;
pub mod iso;
pub mod mixing;

pub use estimators::{
    ergodic_flow_estimate, ergodic_flow_mc, halfspace_family, ls_bound, s_conductance_scan,
    s_conductance_scan_chain, state_frequencies_mc, warm_start_hs, BallWalkChain, Chain, ConductanceScan,
    ErgodicFlow, FlowEstimate, ScanEntry,
};
pub use exact::{ExactChain, ExactKind, LsReport};
pub use iso::{
    embedding_iso_transfer, embedding_iso_transfer_with, image_samples, iso_check, iso_check_with_diameter,
    ImageSamples, IsoResult, TransferResult,
};
pub use mixing::{mixing_curve, tv_distance, Histogram, MixReport, TvPoint};
