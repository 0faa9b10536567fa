//! Metrics and analysis: equal error rate, backward-time measurement, Grad-CAM
//! and tabular run reports.

mod eer;
mod gradcam;
mod report;
mod timing;

pub use eer::{compute_eer, eer_bruteforce, ScoreSet};
pub use gradcam::{cam_from_maps, feature_maps_and_grads, gradcam, write_matrix};
pub use report::{
    emit_report, read_reports, sidecar_path, CurvePoint, RunReport, Strategy, ABSENT, REPORT_HEADER,
};
pub use timing::{measure_backward_time, BackwardTiming};
