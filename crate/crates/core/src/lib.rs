//! Low-rank solver for semidefinite programs in dual form with unit diagonal
//! constraints, plus moment relaxations of binary quadratic programs.
//!
//! The outer loop ([`admm`]) is a dual ADMM whose subproblems are solved over
//! a product of oblique manifolds ([`oblique`]) by a Riemannian trust-region
//! method ([`rtr`]).

pub mod admm;
pub mod bqp;
pub mod eig;
pub mod error;
pub mod matrix;
pub mod oblique;
pub mod operator;
pub mod problem;
pub mod rtr;
pub mod trace;

pub use admm::{solve, solve_observed, AdmmParams, AdmmState, Solution, Status};
pub use bqp::{brute_force, gen_random, relax, relax_dense, relax_sparse, BqpInstance, BqpKind};
pub use eig::EigenMode;
pub use error::{Error, Result};
pub use matrix::{BlockSymMatrix, SparseSym, SymBlock};
pub use oblique::{Factor, SubproblemContext, TangentVector};
pub use operator::LinearOperator;
pub use problem::Problem;
pub use rtr::TrustRegionParams;
pub use trace::TraceRecord;
