//! Acceptance criteria 1 to 10, one line each. Run with
//! `cargo test --test acceptance`; exits nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::f64::consts::LN_2;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use evrb::audit::{entropy_mass, partition_visual, Threshold};
use evrb::collapse::{js_divergence, scale_eos, vv_attention, CollapseTracker};
use evrb::engine::{Components, Engine, EngineConfig};
use evrb::eval::{audit_suite, evaluate, EvalOptions, EvalPlan, Mode, Task};
use evrb::model::{greedy_decode, LanguageBackend, SequenceRole, TokenId};
use evrb::prob::{entropy, LogitVector, ProbVector};
use evrb::rectify::{rectify, CAPTION_MU};
use evrb::toy::scene::{caption_prompt, Cell};
use evrb::toy::{generate_scene_suite, SceneSuite, SuiteSpec, ToyConfig, ToyLvlm};
use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

// Frozen from the first run on the default model, suite seed 0, 50 scenes.
const GOLDEN_PROBE_ACCURACY: (f64, f64) = (0.5, 1.0);
const GOLDEN_PROBE_CORRECT: (usize, usize) = (50, 100);
// (CHAIR_S, recall, mean length) for vanilla and EVRB.
const GOLDEN_CAPTION_VANILLA: (f64, f64, f64) = (1.0, 1.0, 35.08);
const GOLDEN_CAPTION_EVRB: (f64, f64, f64) = (0.42, 0.978494623655914, 22.04);

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn model() -> ToyLvlm {
    ToyLvlm::new(ToyConfig::default()).unwrap()
}

fn suite(model: &ToyLvlm, seed: u64, scenes: usize) -> SceneSuite {
    let spec = SuiteSpec::new(seed, scenes, model.config().knobs.rho);
    generate_scene_suite(model.vocab(), model.pathology().popularity(), spec).unwrap()
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, format!("took {took:?}, limit {limit:?}"))
}

fn random_dist(rng: &mut Xoshiro256PlusPlus, n: usize) -> ProbVector {
    let w: Vec<f64> = (0..n).map(|_| (rng.next_u64() >> 11) as f64 + 1.0).collect();
    ProbVector::from_weights(w).unwrap()
}

fn peaked_dist(rng: &mut Xoshiro256PlusPlus, n: usize) -> ProbVector {
    let w: Vec<f64> = (0..n)
        .map(|_| {
            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            (8.0 * u).exp()
                * if rng.next_u64().is_multiple_of(4) {
                    0.0
                } else {
                    1.0
                }
        })
        .collect();
    ProbVector::from_weights(w).unwrap_or_else(|_| ProbVector::uniform(n))
}

fn vanilla_equivalence() -> Outcome {
    let start = Instant::now();
    let model = model();
    let engine = Engine::new(&model, EngineConfig::evrb(CAPTION_MU).ablate(Components::NONE)).unwrap();
    let s = suite(&model, 0, 20);
    for item in &s.items {
        let prompt = caption_prompt(&model, &item.scene).unwrap();
        let want = greedy_decode(
            &model,
            &prompt.inputs,
            &prompt.roles,
            engine.config().max_new_tokens,
        )
        .unwrap();
        let got = engine.generate(&prompt).unwrap();
        ensure(got.tokens == want, format!("scene {} diverged", item.id))?;
    }
    within(Duration::from_secs(10), start)?;
    Ok(format!("20 scenes in {:.2?}", start.elapsed()))
}

fn entropy_suite() -> Outcome {
    ensure(
        entropy(ProbVector::one_hot(64, 7).as_slice()) == 0.0,
        "one-hot entropy",
    )?;
    ensure(
        (entropy(ProbVector::uniform(64).as_slice()) - 64f64.ln()).abs() < 1e-9,
        "uniform-64",
    )?;
    ensure((entropy(&[0.5, 0.5]) - LN_2).abs() < 1e-9, "two-point")?;
    let hs = [(1, 0.5), (2, 1.0), (3, 1.5)];
    let (clear, redundant) = partition_visual(&hs, 1.0);
    ensure(
        clear == BTreeSet::from([1]) && redundant == BTreeSet::from([2, 3]),
        "E = tau must be redundant",
    )?;
    let (clear, redundant) = partition_visual(&hs, f64::INFINITY);
    ensure(
        clear.len() == 3 && redundant.is_empty(),
        "tau = +inf keeps everything",
    )?;
    let (clear, redundant) = partition_visual(&hs, f64::NEG_INFINITY);
    ensure(
        clear.is_empty() && redundant.len() == 3,
        "tau = -inf keeps nothing",
    )?;
    ensure(Threshold::off().resolve(64) == f64::INFINITY, "off threshold")?;
    Ok("point values, strict boundary, infinite thresholds".into())
}

fn rectification_suite() -> Outcome {
    let post = ProbVector::new(vec![0.5, 0.4, 0.1]).unwrap();
    let prior = ProbVector::new(vec![0.6, 0.2, 0.2]).unwrap();
    let step = rectify(&post, &prior, 0.1, 0.0).unwrap();
    let ratios = [0.5 / 0.6, 0.4 / 0.2, 0.1 / 0.2];
    let z: f64 = ratios.iter().sum();
    for ((got, r), want) in step
        .rectified
        .as_slice()
        .iter()
        .zip(ratios)
        .zip([0.25, 0.60, 0.15])
    {
        ensure(
            (got - want).abs() < 1e-9 && (r / z - want).abs() < 1e-9,
            format!("worked example gave {got}"),
        )?;
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
    for i in 0..1000 {
        let n = 2 + (rng.next_u64() % 40) as usize;
        let post = peaked_dist(&mut rng, n);
        let prior = random_dist(&mut rng, n);
        let mu = 0.05 + 0.9 * ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64);
        let step = rectify(&post, &prior, mu, 1e-9).unwrap();
        let r = step.rectified.as_slice();
        ensure(
            (r.iter().sum::<f64>() - 1.0).abs() < 1e-9,
            format!("vector {i} not normalized"),
        )?;
        for (t, &x) in r.iter().enumerate() {
            if !step.plausible_set.contains(&TokenId(t as u32)) {
                ensure(
                    x == 0.0,
                    format!("vector {i}: mass {x} outside the plausible set"),
                )?;
            }
        }
        let flat = rectify(&post, &ProbVector::uniform(n), mu, 0.0).unwrap();
        ensure(
            flat.rectified.argmax() == post.argmax(),
            format!("vector {i}: uniform prior moved the argmax"),
        )?;
    }
    Ok("worked example and 1000 random posteriors".into())
}

fn js_suite() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
    for i in 0..1000 {
        let n = 2 + (rng.next_u64() % 40) as usize;
        let (a, b) = (peaked_dist(&mut rng, n), peaked_dist(&mut rng, n));
        let ab = js_divergence(&a, &b);
        ensure(
            (ab - js_divergence(&b, &a)).abs() < 1e-12,
            format!("pair {i} asymmetric"),
        )?;
        ensure(
            (0.0..=LN_2 + 1e-9).contains(&ab),
            format!("pair {i} out of range: {ab}"),
        )?;
        ensure(
            js_divergence(&a, &a) == 0.0,
            format!("pair {i}: JS(A, A) = {}", js_divergence(&a, &a)),
        )?;
    }
    let d = js_divergence(&ProbVector::one_hot(5, 0), &ProbVector::one_hot(5, 3));
    ensure((d - LN_2).abs() < 1e-6, format!("disjoint one-hots gave {d}"))?;
    Ok("1000 pairs, disjoint supports".into())
}

fn tracker_suite() -> Outcome {
    let mut t = CollapseTracker::new();
    for (w, js) in [("cat", 0.5), ("cat", 0.2), ("dog", 0.3), ("dog", 0.4)] {
        t.record(w, js);
    }
    ensure(
        t.mean_delta_js() == 0.15,
        format!("mean delta {}", t.mean_delta_js()),
    )?;
    let l = LogitVector::new(vec![2.0, -1.0]).unwrap();
    let eos = TokenId(0);
    ensure(
        scale_eos(&l, eos, 1.5, 0.2, true, false).as_slice()[0] == 2.6,
        "scaled eos logit",
    )?;
    ensure(
        scale_eos(&l, eos, 1.5, CollapseTracker::new().mean_delta_js(), true, false) == l,
        "empty tracker",
    )?;
    ensure(scale_eos(&l, eos, 1.5, 0.2, false, false) == l, "closed gate")?;
    Ok("tracker mean 0.15, scaled logit 2.6".into())
}

fn attention_alignment() -> Outcome {
    let start = Instant::now();
    let model = model();
    let s = suite(&model, 0, 50);
    let engine = Engine::new(&model, EngineConfig::evrb(CAPTION_MU)).unwrap();
    let (mut hits, mut pairs) = (0usize, 0usize);
    let mut misses = Vec::new();
    for item in &s.items {
        let prompt = caption_prompt(&model, &item.scene).unwrap();
        let outcome = engine.run_prefill(&prompt).unwrap();
        let clear: Vec<usize> = outcome.audit.clear_positions.iter().copied().collect();
        let clear_values = model.value_vectors(&outcome.posterior.cache, &clear).unwrap();
        let visual = prompt.visual_positions();
        for &word in &item.ground_truth {
            pairs += 1;
            let mut cache = outcome.posterior.cache.clone();
            model
                .decode_step(&mut cache, outcome.last_token, outcome.last_role)
                .unwrap();
            let step = model
                .decode_step(&mut cache, word, SequenceRole::Generated)
                .unwrap();
            let Some(profile) = vv_attention(&step.value_vectors, &clear_values) else {
                misses.push(format!("scene {} has no clear patches", item.id));
                continue;
            };
            let pos = clear[profile.weights.argmax().index()];
            let cell = visual.iter().position(|&p| p == pos).unwrap();
            if item.scene.cells()[cell] == Cell::Object(word) {
                hits += 1;
            } else {
                misses.push(format!("scene {} {}", item.id, model.vocab().word(word)));
            }
        }
    }
    let rate = hits as f64 / pairs as f64;
    ensure(rate >= 0.9, format!("{hits}/{pairs} aligned; misses {misses:?}"))?;
    within(Duration::from_secs(30), start)?;
    Ok(format!("{hits}/{pairs} pairs aligned ({:.1}%)", 100.0 * rate))
}

fn modes_plan(task: Task, parallel: bool) -> EvalPlan {
    let mut plan = EvalPlan::new(task);
    plan.modes = vec![Mode::vanilla(), Mode::evrb()];
    plan.options = EvalOptions {
        parallel,
        keep_traces: false,
    };
    plan
}

fn bias_mitigation() -> Outcome {
    let model = model();
    let s = suite(&model, 0, 50);
    let eval = evaluate(&model, &s, &modes_plan(Task::Pope, true)).unwrap();
    let v = eval.row("vanilla").unwrap().probe.unwrap();
    let e = eval.row("evrb").unwrap().probe.unwrap();
    ensure(v.probes == 100, format!("{} probes", v.probes))?;
    ensure(
        e.accuracy > v.accuracy,
        format!("EVRB {} vs vanilla {}", e.accuracy, v.accuracy),
    )?;
    let correct = |label: &str| {
        let rec = eval
            .report
            .probe_records
            .iter()
            .find(|r| r.label == label)
            .unwrap();
        rec.records.iter().filter(|r| r.correct).count()
    };
    let got = ((v.accuracy, e.accuracy), (correct("vanilla"), correct("evrb")));
    ensure(
        got == (GOLDEN_PROBE_ACCURACY, GOLDEN_PROBE_CORRECT),
        format!("golden mismatch: {got:?}"),
    )?;
    Ok(format!("accuracy vanilla {} EVRB {}", v.accuracy, e.accuracy))
}

fn collapse_mitigation() -> Outcome {
    let model = model();
    let s = suite(&model, 0, 50);
    let eval = evaluate(&model, &s, &modes_plan(Task::Chair, true)).unwrap();
    let v = eval.row("vanilla").unwrap().caption.unwrap();
    let e = eval.row("evrb").unwrap().caption.unwrap();
    ensure(
        e.chair_s < v.chair_s,
        format!("CHAIR_S {} vs {}", e.chair_s, v.chair_s),
    )?;
    ensure(
        e.mean_length < v.mean_length,
        format!("length {} vs {}", e.mean_length, v.mean_length),
    )?;
    ensure(
        e.recall >= v.recall - 0.05,
        format!("recall {} vs {}", e.recall, v.recall),
    )?;
    let got = (
        (v.chair_s, v.recall, v.mean_length),
        (e.chair_s, e.recall, e.mean_length),
    );
    ensure(
        got == (GOLDEN_CAPTION_VANILLA, GOLDEN_CAPTION_EVRB),
        format!("golden mismatch: {got:?}"),
    )?;
    Ok(format!(
        "CHAIR_S {} -> {}, length {} -> {}, recall {} -> {}",
        v.chair_s, e.chair_s, v.mean_length, e.mean_length, v.recall, e.recall
    ))
}

fn overhead() -> Outcome {
    let model = model();
    let s = suite(&model, 0, 50);
    let eval = evaluate(&model, &s, &modes_plan(Task::Chair, false)).unwrap();
    let v = eval.timing("vanilla", Task::Chair).unwrap().wall_secs;
    let e = eval.timing("evrb", Task::Chair).unwrap().wall_secs;
    let ratio = e / v;
    ensure(
        ratio <= 2.5,
        format!("EVRB {e:.3}s vs vanilla {v:.3}s, ratio {ratio:.2}"),
    )?;
    Ok(format!("ratio {ratio:.2} ({e:.3}s vs {v:.3}s)"))
}

fn bimodality() -> Outcome {
    let model = model();
    let s = suite(&model, 0, 50);
    ensure(s.rho == 0.4, format!("suite rho {}", s.rho))?;
    let reports = audit_suite(&model, &s, Threshold::default()).unwrap();
    let ln = (model.vocab().len() as f64).ln();
    let (lo, hi) = entropy_mass(&reports, 0.5 * ln, 0.8 * ln);
    ensure(lo >= 0.35 && hi >= 0.35, format!("below {lo:.3}, above {hi:.3}"))?;
    Ok(format!(
        "{:.1}% below 0.5 ln|V|, {:.1}% above 0.8 ln|V|",
        100.0 * lo,
        100.0 * hi
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("empty mask reproduces greedy decoding", vanilla_equivalence),
        ("entropy and partition", entropy_suite),
        ("rectification", rectification_suite),
        ("JS divergence", js_suite),
        ("tracker and EOS scaling", tracker_suite),
        ("value-value attention alignment", attention_alignment),
        ("probe bias mitigation", bias_mitigation),
        ("caption collapse mitigation", collapse_mitigation),
        ("decoding overhead", overhead),
        ("audit histogram bimodality", bimodality),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {} [PASS] {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} [FAIL] {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
