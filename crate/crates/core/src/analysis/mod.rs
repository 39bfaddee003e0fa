//! Post-processing: the Adam/Signum update identity, effective learning rate
//! quantiles, sweep curves, alignment plots and stability width.

pub mod curves;
pub mod efflr;
pub mod lemma;

pub use curves::{align_and_plot, stability_width, AlignedRow, CurvePoint, PlotOutput, SweepCurve};
pub use efflr::{efflr_quantiles, quantile_sorted, EffLrSnapshot, Quantiles};
pub use lemma::{check_lemma1, Lemma1Config, Lemma1Report, Lemma1Sample};

/// Default tolerance for [`stability_width`].
pub const DEFAULT_STABILITY_TOL: f64 = 1.1;
