//! Adversarial robustness benchmark for code summarization.
//!
//! The toolkit treats code summarization as closed-set classification: a model
//! reads a flattened token stream (a Python function body with whitespace
//! normalized away) and predicts the function's name from a fixed dictionary
//! of candidates. Around that task it provides:
//!
//! - [`corpus`] — dataset loading, per-query label dictionaries, and the token
//!   vocabulary the attack optimizes over.
//! - [`transforms`] — semantics-preserving perturbations of token streams
//!   (identifier renames, boolean-literal swaps, `print` and dead-code
//!   insertion) with exact inverses.
//! - [`surrogate`] — a small differentiable classifier with analytic input
//!   gradients, standing in for a full sequence model.
//! - [`attack`] — the joint site-selection / site-perturbation optimizer
//!   (projected gradient ascent over a relaxed one-hot encoding, optional
//!   randomized smoothing) plus a brute-force oracle for tiny instances.
//! - [`prompts`] — byte-exact chat prompt templates: baseline, abstain,
//!   confidence, few-shot defense, inverse-transformation defense (single- and
//!   two-step), and the meta-prompting requests.
//! - [`llmclient`] — provider-agnostic chat completion with retries, a
//!   deterministic mock provider, a response cache, and answer parsing.
//! - [`harness`] — experiment orchestration and the Acc / ASR / Abstain
//!   metrics with exact two-decimal rendering.
//! - [`config`] — flat key-value experiment configuration shared by the
//!   library and the `advsum` command-line tool.
//!
//! # Example
//!
//! Perturb the worked example shipped with the crate and verify the inverse:
//!
//! ```
//! use advsum::demo;
//! use advsum::transforms::{apply_plan, strip_perturbations};
//!
//! let snippet = demo::example_snippet();
//! let vocab = demo::example_vocab();
//! let plan = demo::example_plan();
//!
//! let perturbed = apply_plan(&snippet, &plan, &vocab).unwrap();
//! assert_eq!(perturbed.tokens.len(), snippet.tokens.len() + 28);
//!
//! let restored = strip_perturbations(&perturbed).unwrap();
//! assert_eq!(restored.tokens, snippet.tokens);
//! ```

pub mod attack;
pub mod config;
pub mod corpus;
pub mod demo;
pub mod guide;
pub mod harness;
pub mod llmclient;
pub mod prompts;
pub mod surrogate;
pub mod transforms;
