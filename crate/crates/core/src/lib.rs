//! Hyperparameter optimization under seed noise.
//!
//! Random search (optionally with repetitions), asynchronous successive
//! halving and GP-based Bayesian optimization (EI, LCB, noisy EI) share one
//! suggest/observe interface and a matched, agent-equivalent budget. The
//! [`harness`] drives them against synthetic noisy objectives or external
//! training workers and evaluates final recommendations on fresh seeds.

pub mod acquisition;
pub mod cli;
pub mod gp;
pub mod harness;
pub mod optimizer;
pub mod space;
