//! Desk-scale toolkit for constitutional critique/revision data pipelines:
//! self-critique SFT data generation, AI-feedback preference pairs, a
//! verifiable DPO training kernel, degeneration clean-up, and
//! harmlessness/helpfulness evaluation — all backend-agnostic and
//! reproducible from an explicit seed.

pub mod collapse;
pub mod config;
pub mod constitution;
pub mod datastore;
pub mod dpo;
pub mod eval;
pub mod gateway;
pub mod parallel;
pub mod stage1;
pub mod stage2;
