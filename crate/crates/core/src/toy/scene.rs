//! Toy "images": grids of object and background cells, the seeded suite
//! generator, prompt construction and the suite JSON format used for
//! cross-implementation replay.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::config::SINK;
use super::model::ToyLvlm;
use super::rng::Stream;
use crate::model::{InputItem, LanguageBackend, ModelError, Prompt, SequenceRole, TokenId, Vocabulary};

pub const CAPTION_INSTRUCTION: &str = "please help me describe the image in detail .";
pub const DEFAULT_ROWS: usize = 3;
pub const DEFAULT_COLS: usize = 4;
const MAX_OBJECTS_PER_SCENE: usize = 3;
const SUITE_FORMAT_VERSION: u32 = 1;

pub fn probe_instruction(word: &str) -> String {
    format!("is there a {word} in the image ?")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Background,
    Object(TokenId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    rows: usize,
    cols: usize,
    cells: Vec<Cell>,
}

impl Scene {
    /// `cells` in row-major order.
    pub fn new(rows: usize, cols: usize, cells: Vec<Cell>, vocab: &Vocabulary) -> Result<Self, ModelError> {
        if rows == 0 || cols == 0 {
            return Err(ModelError::Config("scene grid must be nonempty".into()));
        }
        if cells.len() != rows * cols {
            return Err(ModelError::LengthMismatch {
                what: "scene cells vs grid size",
                left: cells.len(),
                right: rows * cols,
            });
        }
        for cell in &cells {
            if let Cell::Object(id) = cell {
                if !vocab.is_object_word(*id) {
                    return Err(ModelError::Contract(format!(
                        "scene cell holds non-object token {id}"
                    )));
                }
            }
        }
        Ok(Self { rows, cols, cells })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn ground_truth(&self) -> BTreeSet<TokenId> {
        self.cells
            .iter()
            .filter_map(|c| match c {
                Cell::Object(id) => Some(*id),
                Cell::Background => None,
            })
            .collect()
    }

    pub fn background_fraction(&self) -> f64 {
        let bg = self.cells.iter().filter(|c| **c == Cell::Background).count();
        bg as f64 / self.cells.len() as f64
    }
}

/// One patch embedding per cell, row-major, plus the ground-truth objects.
pub fn encode_scene(model: &ToyLvlm, scene: &Scene) -> (Vec<Vec<f64>>, BTreeSet<TokenId>) {
    let patches = scene
        .cells
        .iter()
        .map(|c| match c {
            Cell::Object(id) => model.object_patch(*id).expect("scene holds object words"),
            Cell::Background => model.background_patch(),
        })
        .collect();
    (patches, scene.ground_truth())
}

fn build_prompt(model: &ToyLvlm, scene: &Scene, instruction: &str) -> Result<Prompt, ModelError> {
    let vocab = model.vocab();
    let (patches, _) = encode_scene(model, scene);
    let mut inputs = vec![InputItem::Token(vocab.require(SINK)?)];
    let mut roles = vec![SequenceRole::System];
    for p in patches {
        inputs.push(InputItem::Patch(p));
        roles.push(SequenceRole::Visual);
    }
    for id in vocab.encode(instruction)? {
        inputs.push(InputItem::Token(id));
        roles.push(SequenceRole::Instruction);
    }
    Prompt::new(inputs, roles)
}

/// `<s>`, the scene's patches, then the captioning instruction.
pub fn caption_prompt(model: &ToyLvlm, scene: &Scene) -> Result<Prompt, ModelError> {
    build_prompt(model, scene, CAPTION_INSTRUCTION)
}

/// `<s>`, the scene's patches, then "is there a <word> in the image ?".
pub fn probe_prompt(model: &ToyLvlm, scene: &Scene, word: TokenId) -> Result<Prompt, ModelError> {
    let vocab = model.vocab();
    if !vocab.is_object_word(word) {
        return Err(ModelError::Contract(format!("{word} is not an object word")));
    }
    build_prompt(model, scene, &probe_instruction(vocab.word(word)))
}

/// How the absent object of a no-probe is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorPolicy {
    /// Uniform over absent object words.
    Random,
    /// The most prior-favored absent object word.
    Popular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub word: TokenId,
    /// Whether the object is in the scene.
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteItem {
    pub id: usize,
    pub scene: Scene,
    pub ground_truth: BTreeSet<TokenId>,
    /// One yes-probe (when the scene has objects) followed by one no-probe.
    pub probes: Vec<Probe>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSuite {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub rho: f64,
    pub distractors: DistractorPolicy,
    pub items: Vec<SuiteItem>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteSpec {
    pub seed: u64,
    pub scenes: usize,
    pub rows: usize,
    pub cols: usize,
    pub rho: f64,
    pub distractors: DistractorPolicy,
}

impl SuiteSpec {
    pub fn new(seed: u64, scenes: usize, rho: f64) -> Self {
        Self {
            seed,
            scenes,
            rows: DEFAULT_ROWS,
            cols: DEFAULT_COLS,
            rho,
            distractors: DistractorPolicy::Random,
        }
    }
}

/// Scene `i` is drawn from `Stream::keyed(seed, i)`: one uniform per cell in
/// row-major order (background iff `u < ρ`), then `k = 1 + below(3)` capped
/// by the number of object cells, a shuffle of the object-word list whose
/// first `k` entries are the scene's objects, one object per object cell
/// (the first `k` cells take the `k` objects in order, the rest draw
/// `below(k)`), then the yes-probe `below(k)` and, for random distractors,
/// `below(#absent)` over absent words in id order.
pub fn generate_scene_suite(
    vocab: &Vocabulary,
    popularity: &[TokenId],
    spec: SuiteSpec,
) -> Result<SceneSuite, ModelError> {
    if spec.scenes == 0 {
        return Err(ModelError::Config("suite needs at least one scene".into()));
    }
    if !(0.0..=1.0).contains(&spec.rho) {
        return Err(ModelError::Config(format!(
            "rho must be in [0, 1], got {}",
            spec.rho
        )));
    }
    let objects: Vec<TokenId> = vocab.object_words().iter().copied().collect();
    if objects.len() <= MAX_OBJECTS_PER_SCENE {
        return Err(ModelError::Config("too few object words for distractors".into()));
    }
    let n_cells = spec.rows * spec.cols;
    let mut items = Vec::with_capacity(spec.scenes);
    for i in 0..spec.scenes {
        let mut rng = Stream::keyed(spec.seed, i as u64);
        let background: Vec<bool> = (0..n_cells).map(|_| rng.uniform() < spec.rho).collect();
        let object_cells = background.iter().filter(|b| !**b).count();
        let k = (1 + rng.below(MAX_OBJECTS_PER_SCENE)).min(object_cells);
        let mut pool = objects.clone();
        rng.shuffle(&mut pool);
        let chosen = &pool[..k];
        let mut cells = Vec::with_capacity(n_cells);
        let mut placed = 0;
        for &bg in &background {
            if bg {
                cells.push(Cell::Background);
            } else {
                let id = if placed < k {
                    chosen[placed]
                } else {
                    chosen[rng.below(k)]
                };
                placed += 1;
                cells.push(Cell::Object(id));
            }
        }
        let scene = Scene::new(spec.rows, spec.cols, cells, vocab)?;
        let ground_truth = scene.ground_truth();
        let mut probes = Vec::with_capacity(2);
        if k > 0 {
            probes.push(Probe {
                word: chosen[rng.below(k)],
                present: true,
            });
        }
        let absent: Vec<TokenId> = objects
            .iter()
            .copied()
            .filter(|o| !ground_truth.contains(o))
            .collect();
        let distractor = match spec.distractors {
            DistractorPolicy::Random => absent[rng.below(absent.len())],
            DistractorPolicy::Popular => popularity
                .iter()
                .copied()
                .find(|o| !ground_truth.contains(o))
                .unwrap_or(absent[0]),
        };
        probes.push(Probe {
            word: distractor,
            present: false,
        });
        items.push(SuiteItem {
            id: i,
            scene,
            ground_truth,
            probes,
        });
    }
    Ok(SceneSuite {
        seed: spec.seed,
        rows: spec.rows,
        cols: spec.cols,
        rho: spec.rho,
        distractors: spec.distractors,
        items,
    })
}

/// On-disk suite format. Cells and objects are word strings; background
/// cells are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteFile {
    pub version: u32,
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub rho: f64,
    pub distractors: DistractorPolicy,
    pub scenes: Vec<SceneFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub id: usize,
    pub grid: Vec<Vec<Option<String>>>,
    pub ground_truth: Vec<String>,
    pub caption_prompt: String,
    pub probes: Vec<ProbeFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFile {
    pub word: String,
    pub answer: String,
    pub prompt: String,
}

impl SceneSuite {
    pub fn to_file(&self, vocab: &Vocabulary) -> SuiteFile {
        let scenes = self
            .items
            .iter()
            .map(|item| SceneFile {
                id: item.id,
                grid: item
                    .scene
                    .cells
                    .chunks(item.scene.cols)
                    .map(|row| {
                        row.iter()
                            .map(|c| match c {
                                Cell::Object(id) => Some(vocab.word(*id).to_string()),
                                Cell::Background => None,
                            })
                            .collect()
                    })
                    .collect(),
                ground_truth: item
                    .ground_truth
                    .iter()
                    .map(|id| vocab.word(*id).to_string())
                    .collect(),
                caption_prompt: CAPTION_INSTRUCTION.to_string(),
                probes: item
                    .probes
                    .iter()
                    .map(|p| ProbeFile {
                        word: vocab.word(p.word).to_string(),
                        answer: if p.present { "yes" } else { "no" }.to_string(),
                        prompt: probe_instruction(vocab.word(p.word)),
                    })
                    .collect(),
            })
            .collect();
        SuiteFile {
            version: SUITE_FORMAT_VERSION,
            seed: self.seed,
            rows: self.rows,
            cols: self.cols,
            rho: self.rho,
            distractors: self.distractors,
            scenes,
        }
    }

    pub fn from_file(file: &SuiteFile, vocab: &Vocabulary) -> Result<Self, ModelError> {
        if file.version != SUITE_FORMAT_VERSION {
            return Err(ModelError::Config(format!(
                "unsupported suite format version {}",
                file.version
            )));
        }
        let mut items = Vec::with_capacity(file.scenes.len());
        for s in &file.scenes {
            if s.grid.len() != file.rows || s.grid.iter().any(|r| r.len() != file.cols) {
                return Err(ModelError::Config(format!(
                    "scene {} grid is not {}x{}",
                    s.id, file.rows, file.cols
                )));
            }
            let cells = s
                .grid
                .iter()
                .flatten()
                .map(|c| match c {
                    Some(w) => vocab.require(w).map(Cell::Object),
                    None => Ok(Cell::Background),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let scene = Scene::new(file.rows, file.cols, cells, vocab)?;
            let ground_truth = scene.ground_truth();
            let listed = s
                .ground_truth
                .iter()
                .map(|w| vocab.require(w))
                .collect::<Result<BTreeSet<_>, _>>()?;
            if listed != ground_truth {
                return Err(ModelError::Config(format!(
                    "scene {} ground truth disagrees with its grid",
                    s.id
                )));
            }
            let probes = s
                .probes
                .iter()
                .map(|p| {
                    let word = vocab.require(&p.word)?;
                    let present = match p.answer.as_str() {
                        "yes" => true,
                        "no" => false,
                        other => return Err(ModelError::Config(format!("probe answer {other:?}"))),
                    };
                    if present != ground_truth.contains(&word) {
                        return Err(ModelError::Config(format!(
                            "scene {} probe {:?} contradicts the grid",
                            s.id, p.word
                        )));
                    }
                    Ok(Probe { word, present })
                })
                .collect::<Result<Vec<_>, _>>()?;
            items.push(SuiteItem {
                id: s.id,
                scene,
                ground_truth,
                probes,
            });
        }
        Ok(Self {
            seed: file.seed,
            rows: file.rows,
            cols: file.cols,
            rho: file.rho,
            distractors: file.distractors,
            items,
        })
    }
}
