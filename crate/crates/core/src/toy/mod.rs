//! A seeded, hand-built toy vision-language model with controllable failure
//! modes: a language-prior skew, grounding that fades with output length,
//! and background patches that carry no information.

pub mod config;
pub mod layout;
pub mod model;
pub mod pathology;
pub mod rng;
pub mod scene;
pub mod weights;

pub use config::{default_vocabulary, Knobs, ToyConfig};
pub use model::{ToyCache, ToyLvlm};
pub use pathology::PathologyProfile;
pub use scene::{
    caption_prompt, encode_scene, generate_scene_suite, probe_prompt, Cell, DistractorPolicy, Probe, Scene,
    SceneSuite, SuiteFile, SuiteItem, SuiteSpec,
};
pub use weights::{Circuit, ToyWeights};
