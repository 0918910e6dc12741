//! Tabular workbench for iterative Nash policy optimization on
//! general-preference games.
//!
//! A game is a preference matrix `P` over `m` responses, a reference policy
//! and a regularization strength `tau`. The crate solves for the regularized
//! Nash policy, runs exact online mirror descent against it, and learns the
//! same iterates from sampled pairwise preferences.

pub mod cli;
pub mod dpo;
pub mod error;
pub mod expt;
pub mod game;
pub mod io;
pub mod learner;
pub mod omd;
pub mod oracle;
#[cfg(test)]
mod properties;

pub use error::{Error, Result};
pub use game::{
    best_response, duality_gap, game_value, kl_divergence, nash_fixed_point, nash_solve,
    win_prob, GameSpec, Policy, PreferenceMatrix, ResponseSpace,
};
pub use learner::{fit_next_policy, run_inpo, FitData, LearnConfig, LearnMode, RunTrace};
pub use omd::{omd_step, run_planner, PlannerTrace, StepSchedule};
pub use oracle::{
    collect_dataset, tournament_select, CollectionMode, OracleKind, PreferenceDataset,
    PreferenceOracle,
};
