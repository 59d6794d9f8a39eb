//! Experience-driven repository environment setup.

pub mod adjudication;
pub mod agent;
pub mod distiller;
pub mod gateway;
pub mod kb_tools;
pub mod orchestrator;
pub mod prompts;
pub mod retriever;
pub mod sandbox;
pub mod shell;
pub mod store;
pub mod text;
pub mod trajectory;
pub mod verifier;
pub mod xpu;
