//! Tiny frozen multimodal decoder.
//!
//! Input layout for one sequence is `[prefix rows; image slots; instruction; answer]`.
//! Prefix rows carry no positional embedding so a prefix behaves like a bag of
//! task vectors; every other position gets a learned position vector counted
//! from the first image slot. The output projection is tied to the token table;
//! callers may append extra output rows for prompt tokens (see
//! [`BackboneModel::extended_output_rows`]), so logits have `V + n_ext` columns.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, NamedTensor};
use crate::error::{Error, Result};
use crate::nn::{
    gaussian_matrix, log_sum_exp, AttentionCache, CausalSelfAttention, FeedForward,
    FeedForwardCache, LayerNorm, LayerNormCache, Linear,
};
use crate::optim::Adam;
use crate::tasks::{PrefixRow, PretrainSample, Sample};
use crate::vocab::{Token, EOA};

const EMBED_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_image_slots: usize,
    pub d_image: usize,
    /// Maximum count of non-prefix positions (image slots + instruction + answer).
    pub max_positions: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            n_image_slots: 4,
            d_image: crate::tasks::D_IMAGE,
            max_positions: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: CausalSelfAttention,
    pub ln2: LayerNorm,
    pub mlp: FeedForward,
}

/// All backbone parameters. The same shape doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub image_adapter: Linear,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

impl BackboneWeights {
    fn init(config: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.d_model;
        // Fan-in scaling for every projection; embeddings get a fixed small std.
        let fan_in = |n: usize| 1.0 / (n as f64).sqrt();
        let blocks = (0..config.n_layers)
            .map(|_| {
                let mut attn = CausalSelfAttention::new(rng, d, config.n_heads, fan_in(d));
                let mut mlp = FeedForward::new(rng, d, config.d_ff, fan_in(d));
                mlp.fc2.weight *= (d as f64 / config.d_ff as f64).sqrt();
                let depth = (2.0 * config.n_layers as f64).sqrt();
                attn.out.weight /= depth;
                mlp.fc2.weight /= depth;
                Block {
                    ln1: LayerNorm::new(d),
                    attn,
                    ln2: LayerNorm::new(d),
                    mlp,
                }
            })
            .collect();
        Self {
            tok_emb: gaussian_matrix(rng, config.vocab_size, d, EMBED_STD),
            pos_emb: gaussian_matrix(rng, config.max_positions, d, EMBED_STD),
            image_adapter: Linear::new(
                rng,
                config.d_image,
                config.n_image_slots * d,
                fan_in(config.d_image),
            ),
            blocks,
            ln_f: LayerNorm::new(d),
        }
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, data) in z.tensors_mut() {
            data.fill(0.0);
        }
        z
    }

    /// Named flat views in a fixed order; names are stable checkpoint keys.
    pub fn tensors<'a>(&'a self) -> Vec<(String, Vec<usize>, &'a [f64])> {
        fn m(a: &Array2<f64>) -> (Vec<usize>, &[f64]) {
            (a.shape().to_vec(), a.as_slice().expect("standard layout"))
        }
        fn v(a: &Array1<f64>) -> (Vec<usize>, &[f64]) {
            (a.shape().to_vec(), a.as_slice().expect("standard layout"))
        }
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        let mut push = |name: String, (shape, data): (Vec<usize>, &'a [f64])| {
            out.push((name, shape, data));
        };
        push("tok_emb".into(), m(&self.tok_emb));
        push("pos_emb".into(), m(&self.pos_emb));
        push("image_adapter.weight".into(), m(&self.image_adapter.weight));
        push("image_adapter.bias".into(), v(&self.image_adapter.bias));
        for (i, b) in self.blocks.iter().enumerate() {
            push(format!("blocks.{i}.ln1.gain"), v(&b.ln1.gain));
            push(format!("blocks.{i}.ln1.bias"), v(&b.ln1.bias));
            push(format!("blocks.{i}.attn.qkv.weight"), m(&b.attn.qkv.weight));
            push(format!("blocks.{i}.attn.qkv.bias"), v(&b.attn.qkv.bias));
            push(format!("blocks.{i}.attn.out.weight"), m(&b.attn.out.weight));
            push(format!("blocks.{i}.attn.out.bias"), v(&b.attn.out.bias));
            push(format!("blocks.{i}.ln2.gain"), v(&b.ln2.gain));
            push(format!("blocks.{i}.ln2.bias"), v(&b.ln2.bias));
            push(format!("blocks.{i}.mlp.fc1.weight"), m(&b.mlp.fc1.weight));
            push(format!("blocks.{i}.mlp.fc1.bias"), v(&b.mlp.fc1.bias));
            push(format!("blocks.{i}.mlp.fc2.weight"), m(&b.mlp.fc2.weight));
            push(format!("blocks.{i}.mlp.fc2.bias"), v(&b.mlp.fc2.bias));
        }
        push("ln_f.gain".into(), v(&self.ln_f.gain));
        push("ln_f.bias".into(), v(&self.ln_f.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        fn m(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        fn v(a: &mut Array1<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("tok_emb".into(), m(&mut self.tok_emb)),
            ("pos_emb".into(), m(&mut self.pos_emb)),
            (
                "image_adapter.weight".into(),
                m(&mut self.image_adapter.weight),
            ),
            ("image_adapter.bias".into(), v(&mut self.image_adapter.bias)),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.ln1.gain"), v(&mut b.ln1.gain)));
            out.push((format!("blocks.{i}.ln1.bias"), v(&mut b.ln1.bias)));
            out.push((
                format!("blocks.{i}.attn.qkv.weight"),
                m(&mut b.attn.qkv.weight),
            ));
            out.push((format!("blocks.{i}.attn.qkv.bias"), v(&mut b.attn.qkv.bias)));
            out.push((
                format!("blocks.{i}.attn.out.weight"),
                m(&mut b.attn.out.weight),
            ));
            out.push((format!("blocks.{i}.attn.out.bias"), v(&mut b.attn.out.bias)));
            out.push((format!("blocks.{i}.ln2.gain"), v(&mut b.ln2.gain)));
            out.push((format!("blocks.{i}.ln2.bias"), v(&mut b.ln2.bias)));
            out.push((
                format!("blocks.{i}.mlp.fc1.weight"),
                m(&mut b.mlp.fc1.weight),
            ));
            out.push((format!("blocks.{i}.mlp.fc1.bias"), v(&mut b.mlp.fc1.bias)));
            out.push((
                format!("blocks.{i}.mlp.fc2.weight"),
                m(&mut b.mlp.fc2.weight),
            ));
            out.push((format!("blocks.{i}.mlp.fc2.bias"), v(&mut b.mlp.fc2.bias)));
        }
        out.push(("ln_f.gain".into(), v(&mut self.ln_f.gain)));
        out.push(("ln_f.bias".into(), v(&mut self.ln_f.bias)));
        out
    }

    fn accumulate(&mut self, other: &BackboneWeights, scale: f64) {
        let theirs = other.tensors();
        for ((_, mine), (_, _, src)) in self.tensors_mut().into_iter().zip(theirs) {
            for (a, b) in mine.iter_mut().zip(src) {
                *a += scale * b;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneModel {
    pub config: BackboneConfig,
    pub weights: BackboneWeights,
    pub seed: u64,
    pub frozen: bool,
}

/// Cached activations of one forward pass.
#[derive(Debug)]
pub struct ForwardCache {
    n_prefix: usize,
    image: Array1<f64>,
    /// Token id of each sequence position (None for prefix rows and image slots).
    token_at: Vec<Option<Token>>,
    blocks: Vec<BlockCache>,
    ln_f: LayerNormCache,
    rows: Vec<usize>,
    hidden_rows: Array2<f64>,
}

#[derive(Debug)]
struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    mlp: FeedForwardCache,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct BackboneGrads {
    pub prefix: Array2<f64>,
    pub vocab_ext: Array2<f64>,
    pub weights: Option<BackboneWeights>,
}

impl BackboneModel {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        if !config.d_model.is_multiple_of(config.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                config.d_model, config.n_heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            config,
            weights: BackboneWeights::init(&config, &mut rng),
            seed,
            frozen: false,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn validate(
        &self,
        prefix: &ArrayView2<f64>,
        vocab_ext: &ArrayView2<f64>,
        image: &[f64],
        instruction: &[Token],
        target_prefix: &[Token],
    ) -> Result<()> {
        let d = self.config.d_model;
        if prefix.ncols() != d && prefix.nrows() > 0 {
            return Err(Error::Shape(format!(
                "prefix width {} does not match model width {d}",
                prefix.ncols()
            )));
        }
        if vocab_ext.ncols() != d && vocab_ext.nrows() > 0 {
            return Err(Error::Shape(format!(
                "extended vocabulary width {} does not match model width {d}",
                vocab_ext.ncols()
            )));
        }
        if image.len() != self.config.d_image {
            return Err(Error::Shape(format!(
                "image dimension {} does not match {}",
                image.len(),
                self.config.d_image
            )));
        }
        if instruction.is_empty() {
            return Err(Error::Input("empty instruction".into()));
        }
        let v = self.config.vocab_size as Token;
        if let Some(&t) = instruction.iter().chain(target_prefix).find(|&&t| t >= v) {
            return Err(Error::Input(format!("token {t} outside vocabulary of {v}")));
        }
        let positions = self.config.n_image_slots + instruction.len() + target_prefix.len();
        if positions > self.config.max_positions {
            return Err(Error::Shape(format!(
                "{positions} positions exceed the maximum of {}",
                self.config.max_positions
            )));
        }
        Ok(())
    }

    fn run(
        &self,
        prefix: &ArrayView2<f64>,
        vocab_ext: &ArrayView2<f64>,
        image: &[f64],
        instruction: &[Token],
        target_prefix: &[Token],
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.validate(prefix, vocab_ext, image, instruction, target_prefix)?;
        let w = &self.weights;
        let d = self.config.d_model;
        let n_v = self.config.n_image_slots;
        let n_p = prefix.nrows();
        let n = n_p + n_v + instruction.len() + target_prefix.len();

        let mut x = Array2::zeros((n, d));
        if n_p > 0 {
            x.slice_mut(s![..n_p, ..]).assign(prefix);
        }
        let image = Array1::from(image.to_vec());
        let slots = w
            .image_adapter
            .forward(&image.view().insert_axis(ndarray::Axis(0)));
        let slots = slots
            .into_shape_with_order((n_v, d))
            .expect("adapter output reshapes to slots");
        x.slice_mut(s![n_p..n_p + n_v, ..]).assign(&slots);
        let mut token_at = vec![None; n_p + n_v];
        for (i, &t) in instruction.iter().chain(target_prefix).enumerate() {
            x.row_mut(n_p + n_v + i).assign(&w.tok_emb.row(t as usize));
            token_at.push(Some(t));
        }
        for p in 0..(n - n_p) {
            let mut row = x.row_mut(n_p + p);
            row += &w.pos_emb.row(p);
        }

        let mut caches = Vec::with_capacity(w.blocks.len());
        for block in &w.blocks {
            let (h, ln1) = block.ln1.forward(&x);
            let (a, attn) = block.attn.forward(h);
            x += &a;
            let (h, ln2) = block.ln2.forward(&x);
            let (m, mlp) = block.mlp.forward(h);
            x += &m;
            caches.push(BlockCache {
                ln1,
                attn,
                ln2,
                mlp,
            });
        }
        let (hf, ln_f) = w.ln_f.forward(&x);
        let first = n_p + n_v + instruction.len() - 1;
        let rows: Vec<usize> = (first..n).collect();
        let hidden_rows = hf.select(ndarray::Axis(0), &rows);
        let logits = self.project(&hidden_rows, vocab_ext);
        Ok((
            logits,
            ForwardCache {
                n_prefix: n_p,
                image,
                token_at,
                blocks: caches,
                ln_f,
                rows,
                hidden_rows,
            },
        ))
    }

    fn project(&self, hidden: &Array2<f64>, vocab_ext: &ArrayView2<f64>) -> Array2<f64> {
        let v = self.config.vocab_size;
        let n_ext = vocab_ext.nrows();
        let mut logits = Array2::zeros((hidden.nrows(), v + n_ext));
        logits
            .slice_mut(s![.., ..v])
            .assign(&hidden.dot(&self.weights.tok_emb.t()));
        if n_ext > 0 {
            logits
                .slice_mut(s![.., v..])
                .assign(&hidden.dot(&vocab_ext.t()));
        }
        logits
    }

    /// Frozen output rows for `n` extended-vocabulary tokens: every prompt
    /// token scores against the mean base token embedding.
    pub fn extended_output_rows(&self, n: usize) -> Array2<f64> {
        let mean = self
            .weights
            .tok_emb
            .mean_axis(ndarray::Axis(0))
            .expect("non-empty vocabulary");
        Array2::from_shape_fn((n, self.config.d_model), |(_, j)| mean[j])
    }

    /// One logit row per predicted position: the row after the last
    /// instruction token, then one per `target_prefix` token.
    pub fn forward_logits(
        &self,
        prefix: ArrayView2<f64>,
        vocab_ext: ArrayView2<f64>,
        image: &[f64],
        instruction: &[Token],
        target_prefix: &[Token],
    ) -> Result<Array2<f64>> {
        self.run(&prefix, &vocab_ext, image, instruction, target_prefix)
            .map(|(l, _)| l)
    }

    pub fn forward_with_cache(
        &self,
        prefix: ArrayView2<f64>,
        vocab_ext: ArrayView2<f64>,
        image: &[f64],
        instruction: &[Token],
        target_prefix: &[Token],
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.run(&prefix, &vocab_ext, image, instruction, target_prefix)
    }

    pub fn backward(
        &self,
        cache: &ForwardCache,
        vocab_ext: ArrayView2<f64>,
        dlogits: &Array2<f64>,
        want_weight_grads: bool,
    ) -> BackboneGrads {
        let w = &self.weights;
        let v = self.config.vocab_size;
        let d = self.config.d_model;
        let n_v = self.config.n_image_slots;
        let n = cache.token_at.len();
        let mut grads = want_weight_grads.then(|| w.zeros_like());

        let dl_base = dlogits.slice(s![.., ..v]);
        let dl_ext = dlogits.slice(s![.., v..]);
        let mut dh_rows = dl_base.dot(&w.tok_emb);
        let mut d_vocab_ext = Array2::zeros(vocab_ext.raw_dim());
        if vocab_ext.nrows() > 0 {
            dh_rows += &dl_ext.dot(&vocab_ext);
            d_vocab_ext = dl_ext.t().dot(&cache.hidden_rows);
        }
        if let Some(g) = grads.as_mut() {
            g.tok_emb += &dl_base.t().dot(&cache.hidden_rows);
        }

        let mut dhf = Array2::zeros((n, d));
        for (k, &r) in cache.rows.iter().enumerate() {
            dhf.row_mut(r).assign(&dh_rows.row(k));
        }
        let (mut dx, lnf_grad) = w.ln_f.backward(&cache.ln_f, &dhf, want_weight_grads);
        if let (Some(g), Some((gg, gb))) = (grads.as_mut(), lnf_grad) {
            g.ln_f.gain += &gg;
            g.ln_f.bias += &gb;
        }

        for (li, (block, bc)) in w.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let (dm, mlp_grad) = block.mlp.backward(&bc.mlp, &dx, want_weight_grads);
            let (dh, ln2_grad) = block.ln2.backward(&bc.ln2, &dm, want_weight_grads);
            dx += &dh;
            let (da, attn_grad) = block.attn.backward(&bc.attn, &dx, want_weight_grads);
            let (dh, ln1_grad) = block.ln1.backward(&bc.ln1, &da, want_weight_grads);
            dx += &dh;
            if let Some(g) = grads.as_mut() {
                let gb = &mut g.blocks[li];
                let mg = mlp_grad.expect("requested");
                gb.mlp.fc1.weight += &mg.fc1.weight;
                gb.mlp.fc1.bias += &mg.fc1.bias;
                gb.mlp.fc2.weight += &mg.fc2.weight;
                gb.mlp.fc2.bias += &mg.fc2.bias;
                let ag = attn_grad.expect("requested");
                gb.attn.qkv.weight += &ag.qkv.weight;
                gb.attn.qkv.bias += &ag.qkv.bias;
                gb.attn.out.weight += &ag.out.weight;
                gb.attn.out.bias += &ag.out.bias;
                let (g2, b2) = ln2_grad.expect("requested");
                gb.ln2.gain += &g2;
                gb.ln2.bias += &b2;
                let (g1, b1) = ln1_grad.expect("requested");
                gb.ln1.gain += &g1;
                gb.ln1.bias += &b1;
            }
        }

        let n_p = cache.n_prefix;
        let d_prefix = dx.slice(s![..n_p, ..]).to_owned();
        if let Some(g) = grads.as_mut() {
            for p in 0..(n - n_p) {
                let mut row = g.pos_emb.row_mut(p);
                row += &dx.row(n_p + p);
            }
            for (i, tok) in cache.token_at.iter().enumerate() {
                if let Some(t) = tok {
                    let mut row = g.tok_emb.row_mut(*t as usize);
                    row += &dx.row(i);
                }
            }
            let d_slots = dx
                .slice(s![n_p..n_p + n_v, ..])
                .to_owned()
                .into_shape_with_order((1, n_v * d))
                .expect("slots flatten");
            let (_, ag) = w.image_adapter.backward(
                &cache.image.view().insert_axis(ndarray::Axis(0)),
                &d_slots,
                true,
            );
            let ag = ag.expect("requested");
            g.image_adapter.weight += &ag.weight;
            g.image_adapter.bias += &ag.bias;
        }

        BackboneGrads {
            prefix: d_prefix,
            vocab_ext: d_vocab_ext,
            weights: grads,
        }
    }

    /// Summed negative log-likelihood of `sample.target` with teacher forcing,
    /// together with all gradients.
    pub fn sample_loss_and_grads(
        &self,
        prefix: ArrayView2<f64>,
        vocab_ext: ArrayView2<f64>,
        sample: &Sample,
        want_weight_grads: bool,
    ) -> Result<(f64, BackboneGrads)> {
        let target = &sample.target;
        if target.is_empty() {
            return Err(Error::Input("empty target".into()));
        }
        let (logits, cache) = self.run(
            &prefix,
            &vocab_ext,
            &sample.image,
            &sample.instruction,
            &target[..target.len() - 1],
        )?;
        let (loss, dlogits) = sequence_nll(&logits, target)?;
        let grads = self.backward(&cache, vocab_ext, &dlogits, want_weight_grads);
        Ok((loss, grads))
    }

    pub fn sample_loss(
        &self,
        prefix: ArrayView2<f64>,
        vocab_ext: ArrayView2<f64>,
        sample: &Sample,
    ) -> Result<f64> {
        let target = &sample.target;
        if target.is_empty() {
            return Err(Error::Input("empty target".into()));
        }
        let logits = self.forward_logits(
            prefix,
            vocab_ext,
            &sample.image,
            &sample.instruction,
            &target[..target.len() - 1],
        )?;
        sequence_nll(&logits, target).map(|(l, _)| l)
    }

    /// Greedy decoding. The end-of-answer token is not included in the output.
    pub fn generate(
        &self,
        prefix: ArrayView2<f64>,
        vocab_ext: ArrayView2<f64>,
        image: &[f64],
        instruction: &[Token],
        max_len: usize,
    ) -> Result<Vec<Token>> {
        if max_len == 0 {
            return Err(Error::Input("max_len must be at least 1".into()));
        }
        let mut out: Vec<Token> = Vec::with_capacity(max_len);
        while out.len() < max_len {
            let logits = self.forward_logits(prefix, vocab_ext, image, instruction, &out)?;
            let last = logits.row(logits.nrows() - 1);
            let mut best = 0usize;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            let tok = best as Token;
            if tok == EOA {
                break;
            }
            out.push(tok);
            if tok as usize >= self.config.vocab_size {
                // An extended-vocabulary row has no surface form; feeding it back is impossible.
                break;
            }
        }
        Ok(out)
    }

    pub fn to_archive(&self) -> Archive {
        let metadata = serde_json::json!({
            "kind": "backbone",
            "config": self.config,
            "seed": self.seed,
            "frozen": self.frozen,
        });
        let tensors = self
            .weights
            .tensors()
            .into_iter()
            .map(|(name, shape, data)| NamedTensor::new(name, shape, data.to_vec()))
            .collect();
        Archive { metadata, tensors }
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta = &archive.metadata;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("backbone") {
            return Err(Error::integrity(
                "metadata.kind",
                "not a backbone checkpoint",
            ));
        }
        let config: BackboneConfig = serde_json::from_value(
            meta.get("config")
                .cloned()
                .ok_or_else(|| Error::integrity("metadata.config", "missing"))?,
        )
        .map_err(|e| Error::integrity("metadata.config", e.to_string()))?;
        let seed = meta
            .get("seed")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::integrity("metadata.seed", "missing"))?;
        let frozen = meta
            .get("frozen")
            .and_then(|v| v.as_bool())
            .ok_or_else(|| Error::integrity("metadata.frozen", "missing"))?;
        let mut model = BackboneModel::new(config, seed)?;
        for (name, slot) in model.weights.tensors_mut() {
            let t = archive.get(&name)?;
            if t.data.len() != slot.len() {
                return Err(Error::Shape(format!(
                    "tensor `{name}` holds {} values, expected {}",
                    t.data.len(),
                    slot.len()
                )));
            }
            slot.copy_from_slice(&t.data);
        }
        model.frozen = frozen;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }

    /// Canonical serialized bytes; used for freeze checks.
    pub fn fingerprint_bytes(&self) -> Vec<u8> {
        self.to_archive().to_bytes()
    }
}

/// Summed token NLL and its gradient w.r.t. the logits.
pub fn sequence_nll(logits: &Array2<f64>, targets: &[Token]) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = logits.clone();
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let slice = row.as_slice().expect("row contiguous");
        if t as usize >= slice.len() {
            return Err(Error::Input(format!("target token {t} outside logits")));
        }
        let lse = log_sum_exp(slice);
        loss += lse - slice[t as usize];
        let mut g = grad.row_mut(i);
        g.mapv_inplace(|v| (v - lse).exp());
        g[t as usize] -= 1.0;
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub backbone: BackboneConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            epochs: 6,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

impl BackboneModel {
    /// Embeds a pretraining prefix. Noise rows get a random direction and a
    /// log-uniform scale between 0.03 and 1 per coordinate.
    pub fn prefix_rows(&self, rows: &[PrefixRow]) -> Array2<f64> {
        let d = self.config.d_model;
        let mut out = Array2::zeros((rows.len(), d));
        for (mut dst, r) in out.rows_mut().into_iter().zip(rows) {
            match *r {
                PrefixRow::Token(t) => dst.assign(&self.weights.tok_emb.row(t as usize)),
                PrefixRow::Noise(seed) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let scale = (rng.gen_range(0.03f64.ln()..0.0)).exp();
                    dst.assign(&gaussian_matrix(&mut rng, 1, d, scale).row(0));
                }
            }
        }
        out
    }
}

/// Trains every backbone parameter on the generic mixture, then freezes the model.
pub fn pretrain_backbone(
    mixture: &[PretrainSample],
    config: &PretrainConfig,
) -> Result<BackboneModel> {
    pretrain_with_progress(mixture, config, |_, _| {})
}

pub fn pretrain_with_progress(
    mixture: &[PretrainSample],
    config: &PretrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<BackboneModel> {
    if mixture.is_empty() {
        return Err(Error::Config("empty pretraining mixture".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Config(
            "epochs and batch size must be positive".into(),
        ));
    }
    let mut model = BackboneModel::new(config.backbone, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_ba5e);
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..mixture.len()).collect();
    let no_ext = Array2::<f64>::zeros((0, config.backbone.d_model));
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc = model.weights.zeros_like();
            for &i in batch {
                let item = &mixture[i];
                let prefix = model.prefix_rows(&item.prefix);
                let (loss, grads) = model.sample_loss_and_grads(
                    prefix.view(),
                    no_ext.view(),
                    &item.sample,
                    true,
                )?;
                epoch_loss += loss;
                let wg = grads.weights.expect("requested");
                acc.accumulate(&wg, 1.0);
                for (k, r) in item.prefix.iter().enumerate() {
                    if let PrefixRow::Token(t) = r {
                        let mut row = acc.tok_emb.row_mut(*t as usize);
                        row += &grads.prefix.row(k);
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<Vec<f64>> = acc
                .tensors()
                .into_iter()
                .map(|(_, _, g)| g.iter().map(|x| x * scale).collect())
                .collect();
            let mut params: Vec<&mut [f64]> = model
                .weights
                .tensors_mut()
                .into_iter()
                .map(|(_, p)| p)
                .collect();
            adam.step(&mut params, &grads);
        }
        let mean = epoch_loss / mixture.len() as f64;
        log::info!("pretrain epoch {} mean loss {:.4}", epoch + 1, mean);
        on_epoch(epoch, mean);
    }
    model.frozen = true;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::Sample;
    use crate::TaskId;

    fn tiny() -> BackboneModel {
        let config = BackboneConfig {
            vocab_size: 256,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 24,
            n_image_slots: 2,
            d_image: 6,
            max_positions: 16,
        };
        let mut m = BackboneModel::new(config, 11).unwrap();
        // Larger weights than the default init so that gradients are not vanishingly small.
        for (_, t) in m.weights.tensors_mut() {
            for (i, v) in t.iter_mut().enumerate() {
                *v *= 10.0;
                *v += 0.01 * ((i % 7) as f64 - 3.0);
            }
        }
        m
    }

    fn sample() -> Sample {
        Sample {
            task_id: TaskId(1),
            image: vec![0.3, -0.2, 0.9, 0.0, 0.5, -1.0],
            instruction: vec![20, 21, 22],
            target: vec![5, 7, EOA],
            latents: [0, 0, 0],
        }
    }

    #[test]
    fn logits_shape_contract() {
        let m = tiny();
        let s = sample();
        let empty = Array2::zeros((0, 16));
        let l = m
            .forward_logits(
                empty.view(),
                empty.view(),
                &s.image,
                &s.instruction,
                &[5, 7],
            )
            .unwrap();
        assert_eq!(l.dim(), (3, 256));
        let prefix = gaussian_matrix(&mut ChaCha8Rng::seed_from_u64(0), 30, 16, 0.5);
        let ext = prefix.clone();
        let l2 = m
            .forward_logits(prefix.view(), ext.view(), &s.image, &s.instruction, &[5, 7])
            .unwrap();
        assert_eq!(l2.dim(), (3, 286));
        assert_ne!(l.slice(s![.., ..256]), l2.slice(s![.., ..256]));
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let m = tiny();
        let s = sample();
        let bad = Array2::zeros((3, 15));
        let empty = Array2::zeros((0, 16));
        let err = m
            .forward_logits(bad.view(), empty.view(), &s.image, &s.instruction, &[])
            .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let err = m
            .forward_logits(empty.view(), empty.view(), &[1.0], &s.instruction, &[])
            .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn later_targets_do_not_change_earlier_rows() {
        let m = tiny();
        let s = sample();
        let prefix = gaussian_matrix(&mut ChaCha8Rng::seed_from_u64(1), 4, 16, 0.5);
        let a = m
            .forward_logits(
                prefix.view(),
                prefix.view(),
                &s.image,
                &s.instruction,
                &[5, 7, 9],
            )
            .unwrap();
        for j in 0..3 {
            let mut t = vec![5, 7, 9];
            t[j] = 40;
            let b = m
                .forward_logits(prefix.view(), prefix.view(), &s.image, &s.instruction, &t)
                .unwrap();
            // row r predicts position r and sees targets < r
            for r in 0..=j {
                assert_eq!(
                    a.row(r),
                    b.row(r),
                    "row {r} changed after editing target {j}"
                );
            }
            assert_ne!(a.row(j + 1), b.row(j + 1));
        }
    }

    #[test]
    fn weight_gradients_match_central_differences() {
        let m = tiny();
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prefix = gaussian_matrix(&mut rng, 3, 16, 0.5);
        let ext = gaussian_matrix(&mut rng, 5, 16, 0.5);
        let (_, grads) = m
            .sample_loss_and_grads(prefix.view(), ext.view(), &s, true)
            .unwrap();
        let wg = grads.weights.unwrap();
        let analytic: Vec<(String, Vec<f64>)> = wg
            .tensors()
            .into_iter()
            .map(|(n, _, d)| (n, d.to_vec()))
            .collect();
        let h = 1e-5;
        for (ti, (name, g)) in analytic.iter().enumerate() {
            // a handful of entries per tensor keeps the test fast
            let len = g.len();
            for idx in [0, len / 3, len / 2, len - 1] {
                let mut plus = m.clone();
                plus.weights.tensors_mut()[ti].1[idx] += h;
                let mut minus = m.clone();
                minus.weights.tensors_mut()[ti].1[idx] -= h;
                let fp = plus.sample_loss(prefix.view(), ext.view(), &s).unwrap();
                let fm = minus.sample_loss(prefix.view(), ext.view(), &s).unwrap();
                let numeric = (fp - fm) / (2.0 * h);
                let a = g[idx];
                assert!(
                    (numeric - a).abs() <= 1e-5 * (1.0 + a.abs()),
                    "{name}[{idx}]: numeric {numeric} vs analytic {a}"
                );
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_capped() {
        let m = tiny();
        let s = sample();
        let empty = Array2::zeros((0, 16));
        let a = m
            .generate(empty.view(), empty.view(), &s.image, &s.instruction, 1)
            .unwrap();
        assert!(a.len() <= 1);
        let b = m
            .generate(empty.view(), empty.view(), &s.image, &s.instruction, 4)
            .unwrap();
        let c = m
            .generate(empty.view(), empty.view(), &s.image, &s.instruction, 4)
            .unwrap();
        assert_eq!(b, c);
        assert!(m
            .generate(empty.view(), empty.view(), &s.image, &s.instruction, 0)
            .is_err());
    }

    #[test]
    fn generate_returns_argmax_token() {
        let m = tiny();
        let s = sample();
        let empty = Array2::zeros((0, 16));
        let logits = m
            .forward_logits(empty.view(), empty.view(), &s.image, &s.instruction, &[])
            .unwrap();
        let row = logits.row(0);
        let best = (0..row.len())
            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
            .unwrap() as Token;
        let out = m
            .generate(empty.view(), empty.view(), &s.image, &s.instruction, 1)
            .unwrap();
        if best == EOA {
            assert!(out.is_empty());
        } else {
            assert_eq!(out, vec![best]);
        }
    }

    #[test]
    fn uniform_logits_give_length_times_log_vocab() {
        let logits = Array2::zeros((3, 300));
        let (loss, _) = sequence_nll(&logits, &[1, 2, 3]).unwrap();
        assert!((loss - 3.0 * (300f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.mpk");
        m.save(&path).unwrap();
        let back = BackboneModel::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.fingerprint_bytes(), m.fingerprint_bytes());
    }

    #[test]
    fn empty_mixture_is_rejected() {
        let err = pretrain_backbone(&[], &PretrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("empty pretraining mixture"));
    }
}
