mod common;

use evrb::audit::Threshold;
use evrb::engine::{write_trace_jsonl, Components, Engine, EngineConfig, StopReason};
use evrb::model::{greedy_decode, InputItem, KvCache, LanguageBackend, ModelError, Prompt, SequenceRole};
use evrb::rectify::{rectify, CAPTION_MU, PROBE_MU};
use evrb::toy::{caption_prompt, probe_prompt, ToyConfig, ToyLvlm};
use evrb::EvrbError;

use common::{default_model, suite};

#[test]
fn empty_mask_is_plain_greedy_decoding() {
    let model = default_model();
    let engine = Engine::new(&model, EngineConfig::evrb(CAPTION_MU).ablate(Components::NONE)).unwrap();
    for item in &suite(&model, 11, 8).items {
        let prompt = caption_prompt(&model, &item.scene).unwrap();
        let want = greedy_decode(&model, &prompt.inputs, &prompt.roles, 512).unwrap();
        assert_eq!(engine.generate(&prompt).unwrap().tokens, want);
    }
}

#[test]
fn concurrent_and_serial_branches_agree() {
    let model = default_model();
    let mut serial = EngineConfig::evrb(CAPTION_MU);
    serial.concurrent_branches = false;
    let mut concurrent = serial.clone();
    concurrent.concurrent_branches = true;
    let a = Engine::new(&model, serial).unwrap();
    let b = Engine::new(&model, concurrent).unwrap();
    for item in &suite(&model, 2, 6).items {
        let prompt = caption_prompt(&model, &item.scene).unwrap();
        let (x, y) = (a.generate(&prompt).unwrap(), b.generate(&prompt).unwrap());
        assert_eq!(x.tokens, y.tokens);
        assert_eq!(x.trace, y.trace);
        assert_eq!(x.tracker, y.tracker);
        assert_eq!(x.stop_reason, y.stop_reason);
    }
}

#[test]
fn one_trace_record_per_token() {
    let model = default_model();
    let engine = Engine::new(&model, EngineConfig::evrb(CAPTION_MU)).unwrap();
    for item in &suite(&model, 4, 6).items {
        let r = engine
            .generate(&caption_prompt(&model, &item.scene).unwrap())
            .unwrap();
        assert_eq!(r.trace.len(), r.tokens.len());
        assert_eq!(r.timing.token_secs.len(), r.tokens.len());
        for (i, (t, tok)) in r.trace.iter().zip(&r.tokens).enumerate() {
            assert_eq!(t.step, i);
            assert_eq!(t.token, *tok);
            assert_eq!(t.word, model.vocab().word(*tok));
        }
        assert!(r.trace[0].relevance.is_none());
        assert!(r.trace.last().unwrap().relevance.is_none());
    }
}

#[test]
fn branch_suffixes_stay_identical() {
    let model = default_model();
    let engine = Engine::new(&model, EngineConfig::evrb(CAPTION_MU)).unwrap();
    let item = &suite(&model, 0, 3).items[1];
    let prompt = caption_prompt(&model, &item.scene).unwrap();
    let generated = engine.generate(&prompt).unwrap().tokens;
    let outcome = engine.run_prefill(&prompt).unwrap();
    let (mut post, mut prior) = (outcome.posterior, outcome.prior);
    let mut feed = vec![(outcome.last_token, outcome.last_role)];
    feed.extend(generated.iter().map(|t| (*t, SequenceRole::Generated)));
    for (token, role) in feed {
        model.decode_step(&mut post.cache, token, role).unwrap();
        model.decode_step(&mut prior.cache, token, role).unwrap();
        assert_eq!(post.generated_positions(), prior.generated_positions());
        assert_eq!(post.cache.generated_tokens(), prior.cache.generated_tokens());
    }
    assert_eq!(post.cache.generated_count(), generated.len());
}

#[test]
fn branches_split_the_visual_tokens() {
    let model = default_model();
    let engine = Engine::new(&model, EngineConfig::evrb(CAPTION_MU)).unwrap();
    let item = &suite(&model, 0, 3).items[0];
    let prompt = caption_prompt(&model, &item.scene).unwrap();
    let outcome = engine.run_prefill(&prompt).unwrap();
    let audit = &outcome.audit;
    let visual_in = |b: &evrb::engine::BranchCache<_>| -> Vec<usize> {
        b.retained()
            .into_iter()
            .filter(|(_, r)| *r == SequenceRole::Visual)
            .map(|(p, _)| p)
            .collect()
    };
    assert_eq!(
        visual_in(&outcome.posterior),
        audit.clear_positions.iter().copied().collect::<Vec<_>>()
    );
    assert_eq!(
        visual_in(&outcome.prior),
        audit.redundant_positions.iter().copied().collect::<Vec<_>>()
    );
    let text = prompt.roles.iter().filter(|r| r.is_text()).count() - 1;
    assert_eq!(
        outcome.posterior.retained().len(),
        text + audit.clear_positions.len()
    );

    let mut text_only = EngineConfig::evrb(CAPTION_MU);
    text_only.prior_keeps_redundant = false;
    let outcome = Engine::new(&model, text_only)
        .unwrap()
        .run_prefill(&prompt)
        .unwrap();
    assert!(visual_in(&outcome.prior).is_empty());
}

#[test]
fn rectification_alone_matches_the_standalone_rectifier() {
    let model = default_model();
    let config = EngineConfig::evrb(PROBE_MU).ablate(Components {
        pruning: false,
        rectification: true,
        early_stop: false,
    });
    let engine = Engine::new(&model, config.clone()).unwrap();
    let item = &suite(&model, 0, 2).items[0];
    for probe in &item.probes {
        let r = engine
            .generate(&probe_prompt(&model, &item.scene, probe.word).unwrap())
            .unwrap();
        for t in &r.trace {
            let step = t.rectification.as_ref().unwrap();
            let again = rectify(&step.posterior, &step.prior, config.mu, config.epsilon).unwrap();
            assert_eq!(&again, step);
            assert_eq!(t.token, again.rectified.argmax());
            assert_eq!(t.eos_logit_before, t.eos_logit_after);
        }
    }
}

#[test]
fn termination_boost_only_after_punctuation() {
    let model = default_model();
    let engine = Engine::new(&model, EngineConfig::evrb(CAPTION_MU)).unwrap();
    let vocab = model.vocab();
    let mut boosted = 0;
    for item in &suite(&model, 0, 10).items {
        let r = engine
            .generate(&caption_prompt(&model, &item.scene).unwrap())
            .unwrap();
        for (i, t) in r.trace.iter().enumerate() {
            let after_punct = i > 0 && vocab.is_punctuation(r.tokens[i - 1]);
            assert_eq!(t.gated, after_punct, "step {i}");
            if t.eos_logit_after != t.eos_logit_before {
                assert!(t.gated);
                let factor = 1.0 + engine.config().lambda * t.mean_delta_js;
                assert_eq!(t.eos_logit_after, t.eos_logit_before * factor);
                boosted += 1;
            }
        }
    }
    assert!(boosted > 0);
}

#[test]
fn bias_probe_is_corrected() {
    let model = default_model();
    let vanilla = Engine::new(&model, EngineConfig::vanilla()).unwrap();
    let full = Engine::new(&model, EngineConfig::evrb(PROBE_MU)).unwrap();
    let item = &suite(&model, 0, 1).items[0];
    let probe = item.probes.iter().find(|p| !p.present).unwrap();
    let prompt = probe_prompt(&model, &item.scene, probe.word).unwrap();
    assert_eq!(vanilla.generate(&prompt).unwrap().text, "yes");
    assert_eq!(full.generate(&prompt).unwrap().text, "no");
}

#[test]
fn collapse_scene_stops_early() {
    let model = default_model();
    let vanilla = Engine::new(&model, EngineConfig::evrb(CAPTION_MU).ablate(Components::NONE)).unwrap();
    let full = Engine::new(&model, EngineConfig::evrb(CAPTION_MU)).unwrap();
    let item = &suite(&model, 0, 2).items[1];
    let prompt = caption_prompt(&model, &item.scene).unwrap();
    let (v, e) = (
        vanilla.generate(&prompt).unwrap(),
        full.generate(&prompt).unwrap(),
    );
    assert_eq!(e.stop_reason, StopReason::Eos);
    assert!(e.tokens.len() < v.tokens.len());
    assert!(e.tracker.mean_delta_js() > 0.0);
}

#[test]
fn empty_clear_set_degrades_to_the_posterior_branch() {
    let model = default_model();
    let mut config = EngineConfig::evrb(CAPTION_MU);
    config.threshold = Threshold::Nats(f64::NEG_INFINITY);
    let engine = Engine::new(&model, config).unwrap();
    let item = &suite(&model, 0, 1).items[0];
    let r = engine
        .generate(&caption_prompt(&model, &item.scene).unwrap())
        .unwrap();
    assert!(r.degraded.is_some());
    assert!(r.audit.as_ref().unwrap().clear_positions.is_empty());
    assert!(r
        .trace
        .iter()
        .all(|t| t.rectification.is_none() && t.relevance.is_none()));
    assert!(r.tracker.is_empty());
}

#[test]
fn prompt_without_image() {
    let model = default_model();
    let v = model.vocab();
    let words = ["<s>", "describe", "the", "image", "."];
    let prompt = Prompt::new(
        words
            .iter()
            .map(|w| InputItem::Token(v.require(w).unwrap()))
            .collect(),
        vec![
            SequenceRole::System,
            SequenceRole::Instruction,
            SequenceRole::Instruction,
            SequenceRole::Instruction,
            SequenceRole::Instruction,
        ],
    )
    .unwrap();
    let engine = Engine::new(&model, EngineConfig::evrb(CAPTION_MU)).unwrap();
    assert!(matches!(engine.run_prefill(&prompt), Err(EvrbError::Config(_))));
    let r = engine.generate(&prompt).unwrap();
    assert!(r.degraded.is_some());
    assert!(r.audit.is_none());
    let plain = greedy_decode(&model, &prompt.inputs, &prompt.roles, 512).unwrap();
    assert_eq!(r.tokens, plain);
}

#[test]
fn token_budget() {
    let model = default_model();
    let mut config = EngineConfig::evrb(CAPTION_MU);
    config.max_new_tokens = 3;
    let engine = Engine::new(&model, config).unwrap();
    let item = &suite(&model, 0, 1).items[0];
    let r = engine
        .generate(&caption_prompt(&model, &item.scene).unwrap())
        .unwrap();
    assert_eq!(r.tokens.len(), 3);
    assert_eq!(r.stop_reason, StopReason::MaxTokens);
}

#[test]
fn caches_are_tied_to_their_model() {
    let a = default_model();
    let b = ToyLvlm::new(ToyConfig::default()).unwrap();
    let item = &suite(&a, 0, 1).items[0];
    let prompt = caption_prompt(&a, &item.scene).unwrap();
    let mut cache = a.prefill(&prompt.inputs, &prompt.roles).unwrap().cache;
    let t = a.vocab().require("cat").unwrap();
    assert_eq!(
        b.decode_step(&mut cache, t, SequenceRole::Generated).unwrap_err(),
        ModelError::ForeignCache
    );
    assert!(a.decode_step(&mut cache, t, SequenceRole::Generated).is_ok());
}

#[test]
fn trace_lines_are_json() {
    let model = default_model();
    let engine = Engine::new(&model, EngineConfig::evrb(CAPTION_MU)).unwrap();
    let item = &suite(&model, 0, 2).items[1];
    let r = engine
        .generate(&caption_prompt(&model, &item.scene).unwrap())
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    write_trace_jsonl(&path, [("s1", &r), ("s2", &r)]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2 * r.trace.len());
    assert_eq!(lines[0]["sample"], "s1");
    assert_eq!(lines[0]["step"], 0);
    assert_eq!(lines[r.trace.len()]["sample"], "s2");

    let missing = dir.path().join("no/such/dir/t.jsonl");
    match write_trace_jsonl(&missing, [("s", &r)]) {
        Err(EvrbError::Io { path, .. }) => assert_eq!(path, missing),
        other => panic!("expected an IO error, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let model = default_model();
    let mut c = EngineConfig::evrb(CAPTION_MU);
    c.epsilon = -1.0;
    assert!(Engine::new(&model, c).is_err());
    let mut c = EngineConfig::evrb(CAPTION_MU);
    c.lambda = f64::NAN;
    assert!(Engine::new(&model, c).is_err());
}
