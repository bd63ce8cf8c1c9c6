//! Interactive episodes: clicks, Zoom-In regions, click simulation and
//! per-step refinement over cached features.

mod clicks;
mod misleading;
mod roi;
mod session;
mod simulate;

pub use clicks::{ClickHistory, ClickPoint, Polarity};
pub use misleading::{
    apply_misleading_click, effective_click, make_misleading_schedule, MisleadingKind, MisleadingSchedule,
    MISLEADING_BAD_CLICKS, MISLEADING_TOTAL_CLICKS,
};
pub use roi::compute_roi;
pub use session::{
    run_interaction_step, run_session, step_roi, Monolithic, Protocol, Segmenter, SessionOutcome, SessionState, Stage,
    StepTrace,
};
pub use simulate::{components, simulate_next_click, squared_distance_transform, Component};
