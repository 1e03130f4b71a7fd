//! Planning for exponentially large MDPs that decompose into a tree of small
//! interacting subsystems.

pub mod action;
pub mod generate;
pub mod lp;
pub mod model;
pub mod modelfile;
pub mod models;
pub mod oracle;
pub mod planner;
pub mod report;
pub mod reuse;
pub mod standalone;
pub mod validate;
