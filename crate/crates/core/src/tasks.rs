//! Synthetic multimodal continual suite.
//!
//! An "image" is a feature vector with two halves: a latent half that encodes
//! three small integer attributes as noisy one-hot blocks shared by every
//! suite (so one pretrained backbone can read them), and a cluster half that
//! places all images of one task around a task-specific center (so the frozen
//! guidance encoders can tell tasks apart). A task is a family (which
//! attribute function is asked for, visible through the instruction template)
//! plus a binding (which answer lexicon to reply in, visible nowhere in the
//! input: it has to be carried by the task's prompts).

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Token, Vocab, EOA, FILLER_WORDS, N_BINDINGS, TEMPLATE_WORDS};
use crate::TaskId;

pub const D_LATENT: usize = N_ATTRIBUTES * ATTRIBUTE_LEVELS;
pub const D_CLUSTER: usize = 24;
pub const D_IMAGE: usize = D_LATENT + D_CLUSTER;
pub const N_ATTRIBUTES: usize = 3;
pub const ATTRIBUTE_LEVELS: usize = 4;

const LATENT_NOISE: f64 = 0.05;
pub const CLUSTER_RADIUS: f64 = 2.5;
pub const CLUSTER_STD: f64 = 0.25;
const GENERIC_CLUSTERS: usize = 64;

pub type Latents = [u8; N_ATTRIBUTES];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    AttributeNaming,
    Counting,
    Comparison,
    Relation,
    Parity,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::AttributeNaming,
        Family::Counting,
        Family::Comparison,
        Family::Relation,
        Family::Parity,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::AttributeNaming => "attribute-naming",
            Family::Counting => "counting",
            Family::Comparison => "comparison",
            Family::Relation => "relation",
            Family::Parity => "parity",
        }
    }

    /// The attribute function this family asks about, in `0..crate::vocab::N_ANSWERS`.
    pub fn value(self, latents: &Latents) -> usize {
        match self {
            Family::AttributeNaming => latents[0] as usize,
            Family::Counting => latents[1] as usize,
            Family::Comparison => usize::from(latents[1] > latents[2]),
            Family::Relation => latents[2] as usize,
            Family::Parity => (latents[0] % 2) as usize,
        }
    }

    pub fn template(self) -> &'static [&'static str] {
        TEMPLATE_WORDS[self.index()]
    }
}

/// One instruction-tuning record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub task_id: TaskId,
    pub image: Vec<f64>,
    pub instruction: Vec<Token>,
    /// Answer tokens followed by the end-of-answer token.
    pub target: Vec<Token>,
    pub latents: Latents,
}

impl Sample {
    /// Answer tokens without the trailing end-of-answer marker.
    pub fn answer(&self) -> &[Token] {
        match self.target.last() {
            Some(&EOA) => &self.target[..self.target.len() - 1],
            _ => &self.target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub family: Family,
    pub binding: usize,
    pub cluster_center: Vec<f64>,
    pub cluster_std: f64,
    pub n_train: usize,
    pub n_eval: usize,
}

impl TaskSpec {
    pub fn name(&self) -> String {
        format!(
            "t{}-{}-b{}",
            self.task_id.0,
            self.family.name(),
            self.binding
        )
    }

    /// Deterministic answer tokens (without end-of-answer).
    pub fn answer_fn(&self, latents: &Latents) -> Vec<Token> {
        vec![Vocab::toy().answer(
            self.family.index(),
            self.binding,
            self.family.value(latents),
        )]
    }

    pub fn instruction_template(&self) -> Vec<Token> {
        let v = Vocab::toy();
        let mut t: Vec<Token> = self.family.template().iter().map(|w| v.id(w)).collect();
        t.push(v.id("?"));
        t
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Sample {
        let latents = random_latents(rng);
        let image = render_image(&latents, &self.cluster_center, self.cluster_std, rng);
        let instruction = instruction_for(self.family, rng, None);
        let mut target = self.answer_fn(&latents);
        target.push(EOA);
        Sample {
            task_id: self.task_id,
            image,
            instruction,
            target,
            latents,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteSizes {
    pub n_train: usize,
    pub n_eval: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        Self {
            n_train: 500,
            n_eval: 200,
        }
    }
}

/// How task identities relate to the two guidance modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteLayout {
    /// Every task has its own image cluster and family template where possible.
    #[default]
    Separable,
    /// Tasks come in pairs that alternate between sharing an image cluster
    /// (different families) and sharing an instruction template (same family,
    /// different binding, different clusters). Only both modalities together
    /// identify a task.
    JointlyDistinguishable,
}

fn random_latents<R: Rng>(rng: &mut R) -> Latents {
    let mut l = [0u8; N_ATTRIBUTES];
    for v in &mut l {
        *v = rng.gen_range(0..ATTRIBUTE_LEVELS as u8);
    }
    l
}

pub fn render_image<R: Rng>(latents: &Latents, center: &[f64], std: f64, rng: &mut R) -> Vec<f64> {
    let lat_noise = Normal::new(0.0, LATENT_NOISE).unwrap();
    let clu_noise = Normal::new(0.0, std.max(0.0)).unwrap();
    let mut image = vec![0.0; D_IMAGE];
    for (j, &a) in latents.iter().enumerate() {
        image[j * ATTRIBUTE_LEVELS + a as usize] = 1.0;
    }
    for x in image.iter_mut().take(D_LATENT) {
        *x += lat_noise.sample(rng);
    }
    for (k, &c) in center.iter().enumerate() {
        image[D_LATENT + k] = c + clu_noise.sample(rng);
    }
    image
}

fn instruction_for<R: Rng>(family: Family, rng: &mut R, binding: Option<usize>) -> Vec<Token> {
    let v = Vocab::toy();
    let mut out = Vec::new();
    if rng.gen_bool(0.5) {
        out.push(v.id(FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())]));
    }
    out.extend(family.template().iter().map(|w| v.id(w)));
    if let Some(b) = binding {
        out.push(v.id("using"));
        out.push(v.binding(b));
    }
    out.push(v.id("?"));
    out
}

fn random_center<R: Rng>(rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let raw: Vec<f64> = (0..D_CLUSTER).map(|_| normal.sample(rng)).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    raw.iter().map(|x| x / norm * CLUSTER_RADIUS).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Draws `n` centers whose pairwise distances are at least `4 · CLUSTER_STD`,
/// redrawing any candidate that violates the bound.
fn separated_centers<R: Rng>(n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n);
    while centers.len() < n {
        let c = random_center(rng);
        if centers.iter().all(|o| distance(o, &c) >= 4.0 * CLUSTER_STD) {
            centers.push(c);
        }
    }
    centers
}

pub fn generate_suite(t: usize, seed: u64, sizes: SuiteSizes) -> Result<Vec<TaskDataset>> {
    generate_suite_with_layout(t, seed, sizes, SuiteLayout::Separable)
}

pub fn generate_suite_with_layout(
    t: usize,
    seed: u64,
    sizes: SuiteSizes,
    layout: SuiteLayout,
) -> Result<Vec<TaskDataset>> {
    if t == 0 {
        return Err(Error::Config("suite needs at least one task".into()));
    }
    let capacity = Family::ALL.len() * N_BINDINGS;
    if t > capacity {
        return Err(Error::Capacity(format!(
            "{t} tasks requested but only {capacity} family/binding combinations exist"
        )));
    }
    if layout == SuiteLayout::JointlyDistinguishable && !t.is_multiple_of(2) {
        return Err(Error::Config(
            "jointly-distinguishable layout needs an even task count".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut family_order = Family::ALL.to_vec();
    family_order.shuffle(&mut rng);

    // (family, binding, cluster index)
    let mut plan: Vec<(Family, usize, usize)> = Vec::with_capacity(t);
    let mut used: BTreeSet<(Family, usize)> = BTreeSet::new();
    let fresh_binding =
        |family: Family, rng: &mut ChaCha8Rng, used: &mut BTreeSet<(Family, usize)>| loop {
            let b = rng.gen_range(0..N_BINDINGS);
            if used.insert((family, b)) {
                return b;
            }
        };
    match layout {
        SuiteLayout::Separable => {
            for i in 0..t {
                let family = family_order[i % family_order.len()];
                let b = fresh_binding(family, &mut rng, &mut used);
                plan.push((family, b, i));
            }
        }
        SuiteLayout::JointlyDistinguishable => {
            let mut next_family = 0;
            let mut next_cluster = 0;
            for pair in 0..t / 2 {
                if pair % 2 == 0 {
                    // shared cluster, two different families
                    for _ in 0..2 {
                        let family = family_order[next_family % family_order.len()];
                        next_family += 1;
                        let b = fresh_binding(family, &mut rng, &mut used);
                        plan.push((family, b, next_cluster));
                    }
                    next_cluster += 1;
                } else {
                    // shared family template, two clusters
                    let family = family_order[next_family % family_order.len()];
                    next_family += 1;
                    for _ in 0..2 {
                        let b = fresh_binding(family, &mut rng, &mut used);
                        plan.push((family, b, next_cluster));
                        next_cluster += 1;
                    }
                }
            }
        }
    }
    let n_clusters = plan.iter().map(|p| p.2).max().unwrap_or(0) + 1;
    let centers = separated_centers(n_clusters, &mut rng);

    let suite = plan
        .into_iter()
        .enumerate()
        .map(|(i, (family, binding, cluster))| {
            let spec = TaskSpec {
                task_id: TaskId(i as u32 + 1),
                family,
                binding,
                cluster_center: centers[cluster].clone(),
                cluster_std: CLUSTER_STD,
                n_train: sizes.n_train,
                n_eval: sizes.n_eval,
            };
            // Separate streams per split keep train and eval disjoint by seed.
            let mut train_rng = ChaCha8Rng::seed_from_u64(seed ^ (0x7a11 + 2 * i as u64) << 8);
            let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ (0xe7a1 + 2 * i as u64 + 1) << 8);
            let train = (0..sizes.n_train)
                .map(|_| spec.sample(&mut train_rng))
                .collect();
            let eval = (0..sizes.n_eval)
                .map(|_| spec.sample(&mut eval_rng))
                .collect();
            TaskDataset { spec, train, eval }
        })
        .collect();
    Ok(suite)
}

/// Shuffled union of all train splits, used for the multi-task upper bound.
pub fn joint_mixture(suite: &[TaskDataset], seed: u64) -> Result<Vec<Sample>> {
    if suite.is_empty() {
        return Err(Error::Input("empty suite".into()));
    }
    let mut all: Vec<Sample> = suite.iter().flat_map(|d| d.train.iter().cloned()).collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(all)
}

/// One prefix row of a pretraining record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefixRow {
    Token(Token),
    /// A random vector, regenerated from this seed by the backbone.
    Noise(u64),
}

/// A pretraining record: prefix rows (possibly none) plus a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSample {
    pub prefix: Vec<PrefixRow>,
    pub sample: Sample,
}

/// Generic mixture for backbone pretraining.
///
/// Half of the records state the binding inside the instruction
/// (`... using bindB ?`); the other half carry it as a block of `prompt_len`
/// rule tokens in the prefix. Either way the prefix also holds up to three
/// blocks belonging to other families and up to two blocks of random vectors,
/// which the model has to ignore. Image clusters are drawn from a pool
/// unrelated to any suite.
pub fn generic_mixture(n: usize, seed: u64, prompt_len: usize) -> Vec<PretrainSample> {
    let v = Vocab::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e4e_91c0);
    let centers: Vec<Vec<f64>> = (0..GENERIC_CLUSTERS)
        .map(|_| random_center(&mut rng))
        .collect();
    (0..n)
        .map(|_| {
            let family = Family::ALL[rng.gen_range(0..Family::ALL.len())];
            let binding = rng.gen_range(0..N_BINDINGS);
            let latents = random_latents(&mut rng);
            let center = &centers[rng.gen_range(0..centers.len())];
            let image = render_image(&latents, center, CLUSTER_STD, &mut rng);
            let target = vec![
                v.answer(family.index(), binding, family.value(&latents)),
                EOA,
            ];
            let inline = rng.gen_bool(0.5);
            let mut others: Vec<Family> = Family::ALL
                .iter()
                .copied()
                .filter(|&f| f != family)
                .collect();
            others.shuffle(&mut rng);
            let n_distract = rng.gen_range(0..=3);
            let n_noise = rng.gen_range(0..=2);
            let mut blocks: Vec<Option<Token>> = others
                .into_iter()
                .take(n_distract)
                .map(|f| Some(v.rule(f.index(), rng.gen_range(0..N_BINDINGS))))
                .collect();
            blocks.extend(std::iter::repeat_n(None, n_noise));
            if !inline {
                blocks.push(Some(v.rule(family.index(), binding)));
            }
            blocks.shuffle(&mut rng);
            let prefix = blocks
                .into_iter()
                .flat_map(|b| match b {
                    Some(t) => vec![PrefixRow::Token(t); prompt_len],
                    None => (0..prompt_len)
                        .map(|_| PrefixRow::Noise(rng.gen()))
                        .collect(),
                })
                .collect();
            let instruction = instruction_for(family, &mut rng, inline.then_some(binding));
            PretrainSample {
                prefix,
                sample: Sample {
                    task_id: TaskId(0),
                    image,
                    instruction,
                    target,
                    latents,
                },
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Suite files

const SUITE_FILE: &str = "suite.jsonl";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub t: usize,
    pub seed: u64,
    pub sizes: SuiteSizes,
    pub layout: SuiteLayout,
    pub families: Vec<String>,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Serialize)]
struct RecordOut<'a> {
    task_id: TaskId,
    latents: &'a Latents,
    image: &'a [f64],
    instruction: String,
    answer: String,
    split: &'static str,
}

pub fn save_suite(suite: &[TaskDataset], seed: u64, layout: SuiteLayout, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let v = Vocab::toy();
    let path = dir.join(SUITE_FILE);
    let mut out =
        std::io::BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    for d in suite {
        for (split, samples) in [("train", &d.train), ("eval", &d.eval)] {
            for s in samples {
                let rec = RecordOut {
                    task_id: s.task_id,
                    latents: &s.latents,
                    image: &s.image,
                    instruction: v.decode(&s.instruction),
                    answer: v.decode(s.answer()),
                    split,
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    let sizes = suite
        .first()
        .map(|d| SuiteSizes {
            n_train: d.spec.n_train,
            n_eval: d.spec.n_eval,
        })
        .unwrap_or_default();
    let manifest = SuiteManifest {
        t: suite.len(),
        seed,
        sizes,
        layout,
        families: suite
            .iter()
            .map(|d| d.spec.family.name().to_string())
            .collect(),
        tasks: suite.iter().map(|d| d.spec.clone()).collect(),
    };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))
}

/// Loaded suite plus non-fatal warnings (unknown fields).
#[derive(Debug)]
pub struct LoadedSuite {
    pub manifest: SuiteManifest,
    pub suite: Vec<TaskDataset>,
    pub warnings: Vec<String>,
}

const KNOWN_FIELDS: [&str; 6] = [
    "task_id",
    "latents",
    "image",
    "instruction",
    "answer",
    "split",
];

pub fn load_suite(dir: &Path) -> Result<LoadedSuite> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: SuiteManifest =
        serde_json::from_slice(&fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?)?;
    let v = Vocab::toy();
    let mut suite: Vec<TaskDataset> = manifest
        .tasks
        .iter()
        .map(|spec| TaskDataset {
            spec: spec.clone(),
            train: Vec::new(),
            eval: Vec::new(),
        })
        .collect();
    let mut warnings = Vec::new();
    let path = dir.join(SUITE_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: line_no,
            field: "<record>".into(),
            detail: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Schema {
            line: line_no,
            field: "<record>".into(),
            detail: "record is not an object".into(),
        })?;
        for key in obj.keys() {
            if !KNOWN_FIELDS.contains(&key.as_str()) {
                let w = format!("line {line_no}: ignoring unknown field `{key}`");
                log::warn!("{w}");
                warnings.push(w);
            }
        }
        let field = |name: &str| {
            obj.get(name).ok_or_else(|| Error::Schema {
                line: line_no,
                field: name.into(),
                detail: "missing field".into(),
            })
        };
        let bad = |name: &str, what: &str| Error::Schema {
            line: line_no,
            field: name.into(),
            detail: what.into(),
        };
        let task_id = field("task_id")?
            .as_u64()
            .ok_or_else(|| bad("task_id", "expected a positive integer"))?;
        let latents_v = field("latents")?
            .as_array()
            .ok_or_else(|| bad("latents", "expected an array"))?;
        if latents_v.len() != N_ATTRIBUTES {
            return Err(bad("latents", "wrong number of attributes"));
        }
        let mut latents = [0u8; N_ATTRIBUTES];
        for (slot, x) in latents.iter_mut().zip(latents_v) {
            *slot = x
                .as_u64()
                .filter(|&x| (x as usize) < ATTRIBUTE_LEVELS)
                .ok_or_else(|| bad("latents", "attribute out of range"))? as u8;
        }
        let image: Vec<f64> = field("image")?
            .as_array()
            .ok_or_else(|| bad("image", "expected a float list"))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| bad("image", "non-numeric entry")))
            .collect::<Result<_>>()?;
        if image.len() != D_IMAGE {
            return Err(bad("image", "wrong dimension"));
        }
        let instruction = field("instruction")?
            .as_str()
            .ok_or_else(|| bad("instruction", "expected a string"))?;
        let answer = field("answer")?
            .as_str()
            .ok_or_else(|| bad("answer", "expected a string"))?;
        let split = field("split")?
            .as_str()
            .ok_or_else(|| bad("split", "expected a string"))?;
        let instruction = v.encode(instruction);
        if instruction.is_empty() {
            return Err(bad("instruction", "empty instruction"));
        }
        let mut target = v.encode(answer);
        if target.is_empty() {
            return Err(bad("answer", "empty answer"));
        }
        target.push(EOA);
        let ds = suite
            .iter_mut()
            .find(|d| d.spec.task_id.0 as u64 == task_id)
            .ok_or_else(|| bad("task_id", "task not listed in manifest"))?;
        let sample = Sample {
            task_id: TaskId(task_id as u32),
            image,
            instruction,
            target,
            latents,
        };
        match split {
            "train" => ds.train.push(sample),
            "eval" => ds.eval.push(sample),
            _ => return Err(bad("split", "expected `train` or `eval`")),
        }
    }
    Ok(LoadedSuite {
        manifest,
        suite,
        warnings,
    })
}
