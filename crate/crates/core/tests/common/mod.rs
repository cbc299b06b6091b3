#![allow(dead_code)]

use evrb::model::LanguageBackend;
use evrb::toy::{generate_scene_suite, SceneSuite, SuiteSpec, ToyConfig, ToyLvlm};

pub fn default_model() -> ToyLvlm {
    ToyLvlm::new(ToyConfig::default()).unwrap()
}

pub fn suite(model: &ToyLvlm, seed: u64, scenes: usize) -> SceneSuite {
    generate_scene_suite(
        model.vocab(),
        model.pathology().popularity(),
        SuiteSpec::new(seed, scenes, model.config().knobs.rho),
    )
    .unwrap()
}
