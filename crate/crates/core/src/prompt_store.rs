//! Per-task prompt sets, the shared prototype head and the snapshot cache of
//! finalized prototypes.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, NamedTensor};
use crate::error::{Error, Result};
use crate::guidance::GuidanceVector;
use crate::nn::{gaussian_matrix, gaussian_vector, l2_normalize, l2_normalize_backward, Linear};
use crate::TaskId;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub task_id: TaskId,
    /// `M × d_m`
    pub embeddings: Array2<f64>,
    pub frozen: bool,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.nrows() == 0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.embeddings
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }
}

/// Mean-pool, `d_m → d_g` affine, tanh, `d_g → d_g` affine, L2 normalize.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    rows: usize,
    pooled: Array2<f64>,
    hidden: Array2<f64>,
    unit: Array1<f64>,
    norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub fc1_weight: Array2<f64>,
    pub fc1_bias: Array1<f64>,
    pub fc2_weight: Array2<f64>,
    pub fc2_bias: Array1<f64>,
}

impl HeadGrad {
    pub fn accumulate(&mut self, other: &HeadGrad) {
        self.fc1_weight += &other.fc1_weight;
        self.fc1_bias += &other.fc1_bias;
        self.fc2_weight += &other.fc2_weight;
        self.fc2_bias += &other.fc2_bias;
    }
}

impl PrototypeHead {
    pub fn new(d_model: usize, d_g: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            fc1: Linear {
                weight: gaussian_matrix(&mut rng, d_model, d_g, INIT_STD),
                bias: gaussian_vector(&mut rng, d_g, INIT_STD),
            },
            fc2: Linear {
                weight: gaussian_matrix(&mut rng, d_g, d_g, INIT_STD),
                bias: gaussian_vector(&mut rng, d_g, INIT_STD),
            },
            trainable: true,
        }
    }

    pub fn d_model(&self) -> usize {
        self.fc1.d_in()
    }

    pub fn d_g(&self) -> usize {
        self.fc2.d_out()
    }

    pub fn forward(&self, prompts: &Array2<f64>) -> Result<(GuidanceVector, HeadCache)> {
        if prompts.ncols() != self.d_model() || prompts.nrows() == 0 {
            return Err(Error::Shape(format!(
                "prompt matrix {:?} does not match head input width {}",
                prompts.dim(),
                self.d_model()
            )));
        }
        let pooled = prompts
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        let hidden = self.fc1.forward(&pooled.view()).mapv(f64::tanh);
        let raw = self.fc2.forward(&hidden.view()).row(0).to_owned();
        let (unit, norm) = l2_normalize(&raw);
        let vector = GuidanceVector::from_unit(unit.to_vec())?;
        Ok((
            vector,
            HeadCache {
                rows: prompts.nrows(),
                pooled,
                hidden,
                unit,
                norm,
            },
        ))
    }

    /// Backpropagates a gradient on the unit output to the prompt rows and head parameters.
    pub fn backward(&self, cache: &HeadCache, d_unit: &Array1<f64>) -> (Array2<f64>, HeadGrad) {
        let d_raw = l2_normalize_backward(&cache.unit, cache.norm, d_unit).insert_axis(Axis(0));
        let (d_hidden, g2) = self.fc2.backward(&cache.hidden.view(), &d_raw, true);
        let d_pre = d_hidden * &cache.hidden.mapv(|h| 1.0 - h * h);
        let (d_pooled, g1) = self.fc1.backward(&cache.pooled.view(), &d_pre, true);
        let (g1, g2) = (g1.expect("requested"), g2.expect("requested"));
        let row = d_pooled.row(0).to_owned() / cache.rows as f64;
        let d_prompts = Array2::from_shape_fn((cache.rows, row.len()), |(_, j)| row[j]);
        (
            d_prompts,
            HeadGrad {
                fc1_weight: g1.weight.as_standard_layout().to_owned(),
                fc1_bias: g1.bias,
                fc2_weight: g2.weight.as_standard_layout().to_owned(),
                fc2_bias: g2.bias,
            },
        )
    }

    pub fn zero_grad(&self) -> HeadGrad {
        HeadGrad {
            fc1_weight: Array2::zeros(self.fc1.weight.raw_dim()),
            fc1_bias: Array1::zeros(self.fc1.bias.raw_dim()),
            fc2_weight: Array2::zeros(self.fc2.weight.raw_dim()),
            fc2_bias: Array1::zeros(self.fc2.bias.raw_dim()),
        }
    }

    pub fn apply_sgd(&mut self, grad: &HeadGrad, lr: f64) {
        self.fc1.weight.scaled_add(-lr, &grad.fc1_weight);
        self.fc1.bias.scaled_add(-lr, &grad.fc1_bias);
        self.fc2.weight.scaled_add(-lr, &grad.fc2_weight);
        self.fc2.bias.scaled_add(-lr, &grad.fc2_bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptStore {
    pub prompt_len: usize,
    pub d_model: usize,
    pub d_g: usize,
    pub seed: u64,
    sets: Vec<PromptSet>,
    head: PrototypeHead,
    cached_prototypes: Vec<GuidanceVector>,
}

impl PromptStore {
    pub fn new(prompt_len: usize, d_model: usize, d_g: usize, seed: u64) -> Result<Self> {
        if prompt_len == 0 {
            return Err(Error::Config("prompt length M must be at least 1".into()));
        }
        Ok(Self {
            prompt_len,
            d_model,
            d_g,
            seed,
            sets: Vec::new(),
            head: PrototypeHead::new(d_model, d_g, seed ^ 0x4ead),
            cached_prototypes: Vec::new(),
        })
    }

    pub fn sets(&self) -> &[PromptSet] {
        &self.sets
    }

    pub fn head(&self) -> &PrototypeHead {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut PrototypeHead {
        &mut self.head
    }

    pub fn cached_prototypes(&self) -> &[GuidanceVector] {
        &self.cached_prototypes
    }

    pub fn n_tasks(&self) -> usize {
        self.sets.len()
    }

    pub fn n_completed(&self) -> usize {
        self.cached_prototypes.len()
    }

    pub fn task_ids(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.sets.iter().map(|s| s.task_id)
    }

    pub fn get(&self, id: TaskId) -> Result<&PromptSet> {
        self.sets
            .iter()
            .find(|s| s.task_id == id)
            .ok_or(Error::Lookup(id))
    }

    /// The single trainable set, if a task is in progress.
    pub fn current(&self) -> Option<&PromptSet> {
        self.sets.last().filter(|s| !s.frozen)
    }

    pub fn current_mut(&mut self) -> Option<&mut PromptSet> {
        self.sets.last_mut().filter(|s| !s.frozen)
    }

    pub fn prototype(&self, id: TaskId) -> Result<&GuidanceVector> {
        let idx = self
            .sets
            .iter()
            .position(|s| s.task_id == id)
            .ok_or(Error::Lookup(id))?;
        self.cached_prototypes
            .get(idx)
            .ok_or_else(|| Error::State(format!("task {id} has no cached prototype yet")))
    }

    pub fn add_task(&mut self, task_id: TaskId, init_seed: u64) -> Result<()> {
        let expected = TaskId(self.sets.last().map_or(1, |s| s.task_id.0 + 1));
        if task_id != expected {
            return Err(Error::Ordering {
                expected,
                got: task_id,
            });
        }
        if let Some(open) = self.current() {
            return Err(Error::State(format!(
                "task {} must be finalized before task {task_id} is added",
                open.task_id
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        self.sets.push(PromptSet {
            task_id,
            embeddings: gaussian_matrix(&mut rng, self.prompt_len, self.d_model, INIT_STD),
            frozen: false,
        });
        Ok(())
    }

    pub fn project_prototype(&self, prompts: &PromptSet) -> Result<GuidanceVector> {
        if prompts.embeddings.dim() != (self.prompt_len, self.d_model) {
            return Err(Error::Shape(format!(
                "prompt set {:?} is not M×d_m = {}×{}",
                prompts.embeddings.dim(),
                self.prompt_len,
                self.d_model
            )));
        }
        self.head.forward(&prompts.embeddings).map(|(g, _)| g)
    }

    /// Freezes the current set and snapshots its prototype.
    pub fn finalize_task(&mut self, task_id: TaskId) -> Result<()> {
        let set = self.get(task_id)?;
        if set.frozen {
            return Err(Error::State(format!("task {task_id} is already finalized")));
        }
        let proto = self.project_prototype(set)?;
        self.cached_prototypes.push(proto);
        let set = self
            .sets
            .iter_mut()
            .find(|s| s.task_id == task_id)
            .expect("checked above");
        set.frozen = true;
        Ok(())
    }

    /// Total prompt tokens across all sets; the size of the extended vocabulary.
    pub fn n_prompt_tokens(&self) -> usize {
        self.sets.len() * self.prompt_len
    }

    /// Concatenated bytes of the frozen sets; stable once written.
    pub fn frozen_bytes(&self) -> Vec<u8> {
        self.sets
            .iter()
            .filter(|s| s.frozen)
            .flat_map(|s| s.to_bytes())
            .collect()
    }

    pub fn prototype_bytes(&self) -> Vec<u8> {
        self.cached_prototypes
            .iter()
            .flat_map(|p| p.values().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    /// Marks the store read-only for evaluation.
    pub fn freeze_all(&mut self) {
        self.head.trainable = false;
    }

    pub fn manifest_text(&self) -> String {
        let mut s = format!(
            "M={} d_m={} d_g={} seed={} completed={}\n",
            self.prompt_len,
            self.d_model,
            self.d_g,
            self.seed,
            self.n_completed()
        );
        for set in &self.sets {
            s.push_str(&format!(
                "task {} frozen={} prototype_cached={}\n",
                set.task_id,
                set.frozen,
                self.prototype(set.task_id).is_ok()
            ));
        }
        s
    }

    pub fn to_archive(&self) -> Archive {
        let mut tensors = Vec::new();
        for s in &self.sets {
            tensors.push(NamedTensor::new(
                format!("prompts.{}", s.task_id),
                vec![self.prompt_len, self.d_model],
                s.embeddings.iter().copied().collect(),
            ));
        }
        let h = &self.head;
        tensors.push(NamedTensor::new(
            "head.fc1.weight",
            h.fc1.weight.shape().to_vec(),
            h.fc1.weight.iter().copied().collect(),
        ));
        tensors.push(NamedTensor::new(
            "head.fc1.bias",
            vec![h.fc1.bias.len()],
            h.fc1.bias.to_vec(),
        ));
        tensors.push(NamedTensor::new(
            "head.fc2.weight",
            h.fc2.weight.shape().to_vec(),
            h.fc2.weight.iter().copied().collect(),
        ));
        tensors.push(NamedTensor::new(
            "head.fc2.bias",
            vec![h.fc2.bias.len()],
            h.fc2.bias.to_vec(),
        ));
        for (s, p) in self.sets.iter().zip(&self.cached_prototypes) {
            tensors.push(NamedTensor::new(
                format!("prototypes.{}", s.task_id),
                vec![p.dim()],
                p.values().to_vec(),
            ));
        }
        let metadata = serde_json::json!({
            "kind": "prompt_store",
            "M": self.prompt_len,
            "d_m": self.d_model,
            "d_g": self.d_g,
            "seed": self.seed,
            "task_ids": self.sets.iter().map(|s| s.task_id.0).collect::<Vec<_>>(),
            "frozen": self.sets.iter().map(|s| s.frozen).collect::<Vec<_>>(),
            "head_trainable": self.head.trainable,
            "completed": self.cached_prototypes.len(),
        });
        Archive { metadata, tensors }
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta = &archive.metadata;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("prompt_store") {
            return Err(Error::integrity(
                "metadata.kind",
                "not a prompt store archive",
            ));
        }
        let usize_field = |name: &str| -> Result<usize> {
            meta.get(name)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::integrity(format!("metadata.{name}"), "missing or invalid"))
        };
        let prompt_len = usize_field("M")?;
        let d_model = usize_field("d_m")?;
        let d_g = usize_field("d_g")?;
        let completed = usize_field("completed")?;
        let seed = meta
            .get("seed")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::integrity("metadata.seed", "missing"))?;
        let ids: Vec<u32> = serde_json::from_value(
            meta.get("task_ids")
                .cloned()
                .ok_or_else(|| Error::integrity("metadata.task_ids", "missing"))?,
        )
        .map_err(|e| Error::integrity("metadata.task_ids", e.to_string()))?;
        let frozen: Vec<bool> = serde_json::from_value(
            meta.get("frozen")
                .cloned()
                .ok_or_else(|| Error::integrity("metadata.frozen", "missing"))?,
        )
        .map_err(|e| Error::integrity("metadata.frozen", e.to_string()))?;
        if frozen.len() != ids.len() || completed > ids.len() {
            return Err(Error::integrity(
                "metadata.frozen",
                "inconsistent task bookkeeping",
            ));
        }
        let head_trainable = meta
            .get("head_trainable")
            .and_then(|v| v.as_bool())
            .unwrap_or(true);

        let matrix = |name: &str, rows: usize, cols: usize| -> Result<Array2<f64>> {
            let t = archive.get(name)?;
            if t.shape != [rows, cols] {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has shape {:?}, expected [{rows}, {cols}]",
                    t.shape
                )));
            }
            Ok(Array2::from_shape_vec((rows, cols), t.data.clone()).expect("shape checked"))
        };
        let vector = |name: &str, len: usize| -> Result<Array1<f64>> {
            let t = archive.get(name)?;
            if t.shape != [len] {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has shape {:?}, expected [{len}]",
                    t.shape
                )));
            }
            Ok(Array1::from(t.data.clone()))
        };

        let mut sets = Vec::with_capacity(ids.len());
        for (&id, &fz) in ids.iter().zip(&frozen) {
            sets.push(PromptSet {
                task_id: TaskId(id),
                embeddings: matrix(&format!("prompts.{id}"), prompt_len, d_model)?,
                frozen: fz,
            });
        }
        let head = PrototypeHead {
            fc1: Linear {
                weight: matrix("head.fc1.weight", d_model, d_g)?,
                bias: vector("head.fc1.bias", d_g)?,
            },
            fc2: Linear {
                weight: matrix("head.fc2.weight", d_g, d_g)?,
                bias: vector("head.fc2.bias", d_g)?,
            },
            trainable: head_trainable,
        };
        let mut cached_prototypes = Vec::with_capacity(completed);
        for &id in ids.iter().take(completed) {
            let v = vector(&format!("prototypes.{id}"), d_g)?;
            cached_prototypes.push(
                GuidanceVector::from_unit(v.to_vec())
                    .map_err(|e| Error::integrity(format!("prototypes.{id}"), e.to_string()))?,
            );
        }
        Ok(Self {
            prompt_len,
            d_model,
            d_g,
            seed,
            sets,
            head,
            cached_prototypes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)?;
        let manifest = path.with_extension("manifest.txt");
        std::fs::write(&manifest, self.manifest_text()).map_err(|e| Error::io(&manifest, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }

    /// Loads and checks that the archive matches the expected dimensions.
    pub fn load_expecting(path: &Path, shape: StoreShape) -> Result<Self> {
        let store = Self::load(path)?;
        if store.prompt_len != shape.prompt_len {
            return Err(Error::Shape(format!(
                "stored prompt length M={} but this run uses M={}",
                store.prompt_len, shape.prompt_len
            )));
        }
        if store.d_model != shape.d_model {
            return Err(Error::Shape(format!(
                "stored d_m={} but this run uses d_m={}",
                store.d_model, shape.d_model
            )));
        }
        if store.d_g != shape.d_g {
            return Err(Error::Shape(format!(
                "stored d_g={} but this run uses d_g={}",
                store.d_g, shape.d_g
            )));
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreShape {
    pub prompt_len: usize,
    pub d_model: usize,
    pub d_g: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store() -> PromptStore {
        PromptStore::new(10, 8, 4, 1).unwrap()
    }

    #[test]
    fn first_task_is_trainable_without_prototypes() {
        let mut s = store();
        s.add_task(TaskId(1), 5).unwrap();
        assert_eq!(s.n_tasks(), 1);
        assert!(s.current().is_some());
        assert_eq!(s.n_completed(), 0);
    }

    #[test]
    fn non_consecutive_id_is_an_ordering_error() {
        let mut s = store();
        for t in 1..=3 {
            s.add_task(TaskId(t), t as u64).unwrap();
            s.finalize_task(TaskId(t)).unwrap();
        }
        let err = s.add_task(TaskId(5), 0).unwrap_err();
        assert!(matches!(
            err,
            Error::Ordering {
                expected: TaskId(4),
                got: TaskId(5)
            }
        ));
    }

    #[test]
    fn adding_a_task_leaves_earlier_sets_untouched() {
        let mut s = store();
        s.add_task(TaskId(1), 5).unwrap();
        s.finalize_task(TaskId(1)).unwrap();
        let before = s.get(TaskId(1)).unwrap().to_bytes();
        s.add_task(TaskId(2), 6).unwrap();
        assert_eq!(s.get(TaskId(1)).unwrap().to_bytes(), before);
        assert!(s.get(TaskId(1)).unwrap().frozen);
    }

    #[test]
    fn unfinalized_task_blocks_the_next_one() {
        let mut s = store();
        s.add_task(TaskId(1), 5).unwrap();
        assert!(matches!(s.add_task(TaskId(2), 6), Err(Error::State(_))));
    }

    #[test]
    fn finalize_twice_is_a_state_error() {
        let mut s = store();
        s.add_task(TaskId(1), 5).unwrap();
        s.finalize_task(TaskId(1)).unwrap();
        assert_eq!(s.n_completed(), 1);
        assert!(s.get(TaskId(1)).unwrap().frozen);
        assert!(matches!(s.finalize_task(TaskId(1)), Err(Error::State(_))));
    }

    #[test]
    fn identical_sets_give_identical_prototypes() {
        let mut s = store();
        s.add_task(TaskId(1), 5).unwrap();
        let set = s.get(TaskId(1)).unwrap().clone();
        let mut twin = set.clone();
        twin.task_id = TaskId(9);
        assert_eq!(
            s.project_prototype(&set).unwrap(),
            s.project_prototype(&twin).unwrap()
        );
    }

    #[test]
    fn prototype_shape_is_checked() {
        let s = store();
        let bad = PromptSet {
            task_id: TaskId(1),
            embeddings: Array2::zeros((3, 8)),
            frozen: false,
        };
        assert!(matches!(s.project_prototype(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn cached_prototype_survives_head_updates() {
        let mut s = store();
        s.add_task(TaskId(1), 5).unwrap();
        s.finalize_task(TaskId(1)).unwrap();
        s.add_task(TaskId(2), 6).unwrap();
        s.finalize_task(TaskId(2)).unwrap();
        let cached = s.prototype(TaskId(2)).unwrap().clone();
        s.add_task(TaskId(3), 7).unwrap();
        // simulate head training for task 3
        let mut g = s.head().zero_grad();
        g.fc2_bias.fill(1.0);
        g.fc1_weight.fill(-0.5);
        s.head_mut().apply_sgd(&g, 0.3);
        let recomputed = s.project_prototype(s.get(TaskId(2)).unwrap()).unwrap();
        assert_ne!(recomputed, cached);
        assert_eq!(s.prototype(TaskId(2)).unwrap(), &cached);
    }

    #[test]
    fn head_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut head = PrototypeHead::new(6, 5, 2);
        // widen weights so the map is far from linear
        head.fc1.weight = gaussian_matrix(&mut rng, 6, 5, 0.8);
        head.fc2.weight = gaussian_matrix(&mut rng, 5, 5, 0.8);
        let prompts = gaussian_matrix(&mut rng, 4, 6, 1.0);
        let w = gaussian_vector(&mut rng, 5, 1.0);
        let f = |h: &PrototypeHead, p: &Array2<f64>| {
            let (g, _) = h.forward(p).unwrap();
            g.values()
                .iter()
                .zip(w.iter())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let (_, cache) = head.forward(&prompts).unwrap();
        let (dp, dh) = head.backward(&cache, &w);
        let step = 1e-3;
        for idx in 0..prompts.len() {
            let mut p1 = prompts.clone();
            let mut p2 = prompts.clone();
            p1.as_slice_mut().unwrap()[idx] += step;
            p2.as_slice_mut().unwrap()[idx] -= step;
            let numeric = (f(&head, &p1) - f(&head, &p2)) / (2.0 * step);
            let a = dp.as_slice().unwrap()[idx];
            assert!(
                (numeric - a).abs() <= 1e-4 * a.abs().max(1e-3),
                "prompt {idx}: {numeric} vs {a}"
            );
        }
        for idx in 0..head.fc1.weight.len() {
            let mut h1 = head.clone();
            let mut h2 = head.clone();
            h1.fc1.weight.as_slice_mut().unwrap()[idx] += step;
            h2.fc1.weight.as_slice_mut().unwrap()[idx] -= step;
            let numeric = (f(&h1, &prompts) - f(&h2, &prompts)) / (2.0 * step);
            let a = dh.fc1_weight.as_slice().unwrap()[idx];
            assert!(
                (numeric - a).abs() <= 1e-4 * a.abs().max(1e-3),
                "fc1 {idx}: {numeric} vs {a}"
            );
        }
    }

    #[test]
    fn save_load_round_trip_and_integrity() {
        let mut s = store();
        s.add_task(TaskId(1), 5).unwrap();
        s.finalize_task(TaskId(1)).unwrap();
        s.add_task(TaskId(2), 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.mpk");
        s.save(&path).unwrap();
        let back = PromptStore::load(&path).unwrap();
        assert_eq!(back, s);
        assert!(dir.path().join("store.manifest.txt").exists());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            PromptStore::load(&path),
            Err(Error::Integrity { .. })
        ));
    }

    #[test]
    fn loading_with_a_different_m_names_m() {
        let s = store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.mpk");
        s.save(&path).unwrap();
        let err = PromptStore::load_expecting(
            &path,
            StoreShape {
                prompt_len: 5,
                d_model: 8,
                d_g: 4,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape(ref m) if m.contains("M=")));
    }

    proptest! {
        #[test]
        fn prototypes_are_unit_norm(seed in 0u64..10_000) {
            let mut s = PromptStore::new(10, 8, 4, seed).unwrap();
            s.add_task(TaskId(1), seed.wrapping_mul(31)).unwrap();
            let g = s.project_prototype(s.get(TaskId(1)).unwrap()).unwrap();
            let n: f64 = g.values().iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }
}
