//! Symbolic ODE systems, synthetic data generation, integration, tokenization,
//! inference utilities and the evaluation protocol.

pub mod corruption;
pub mod dataset;
pub mod evaluation;
pub mod expr;
pub mod generator;
pub mod inference;
mod infix;
pub mod integrator;
pub mod odebench;
pub mod rng;
pub mod tokenizer;
pub mod trajectory;

pub use expr::{BinaryOp, Expr, OdeSystem, ParseError, Symbol, UnaryOp};
pub use trajectory::Trajectory;
