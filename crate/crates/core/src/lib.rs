//! Matrix-valued augmented, optimistic and hybrid primal–dual corrections
//! for equality-constrained optimization, plus the closed-form hybrid
//! design, step-based baselines, local spectral analysis and a benchmark
//! harness over instances with controlled Jacobian conditioning.

pub mod baselines;
pub mod bench;
pub mod cli;
pub mod design;
pub mod dynamics;
pub mod numerics;
pub mod problem;
pub mod spectral;
