//! The round-based audit driver: configuration, state, rounds, escalation,
//! export and replay.

mod config;
mod state;

pub use config::{
    AuditConfig, CollectionConfig, ComparisonPriorConfig, Escalation, Source,
};
pub use state::{
    replay, replay_with, AuditState, ContestRoundResult, ContestStatus, ContestView, Decision,
    OpenSelection, PlanRequest, ReplayReport, Round, RoundReport, SelectedBallot, StatusReport,
    STATE_FORMAT,
};
