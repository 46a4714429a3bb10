//! Mixed-integer model predictive control with learned one-step value functions.

pub mod controller;
pub mod harness;
pub mod learner;
pub mod minlp;
pub mod model;
pub mod nlp;
pub mod ocp;
