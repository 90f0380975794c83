use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    sinusoidal, AlignedFeatures, ModelConfig, SpatialFeatures, TokenSequence, VideoClip, VisualFeatures, BOS, EOS,
    MAX_DECODE_LEN, PAD,
};
use crate::adapters::{prompt_name, AdapterSet, INPUT_PROMPT};
use crate::error::{Error, Result};
use crate::graph::{AttnMask, Graph, Var};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Selects which parameters receive gradients, by name prefix.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub base: Vec<String>,
    pub adapter: Vec<String>,
}

impl Trainable {
    pub fn none() -> Self {
        Self::default()
    }

    /// Every adapter parameter, no base parameter.
    pub fn adapters() -> Self {
        Self {
            base: Vec::new(),
            adapter: vec![String::new()],
        }
    }

    pub fn adapter_prefixes<S: Into<String>>(prefixes: impl IntoIterator<Item = S>) -> Self {
        Self {
            base: Vec::new(),
            adapter: prefixes.into_iter().map(Into::into).collect(),
        }
    }

    pub fn base_prefixes<S: Into<String>>(prefixes: impl IntoIterator<Item = S>) -> Self {
        Self {
            base: prefixes.into_iter().map(Into::into).collect(),
            adapter: Vec::new(),
        }
    }

    pub fn all_base() -> Self {
        Self::base_prefixes([""])
    }

    pub fn base_trainable(&self, name: &str) -> bool {
        self.base.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn adapter_trainable(&self, name: &str) -> bool {
        self.adapter.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// Gradients from one backward pass, split by component.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    pub base: BTreeMap<String, Tensor>,
    pub adapter: BTreeMap<String, Tensor>,
}

/// The desk-scale lip reader: conv front-end, attention back-end, projector
/// and a prefix-conditioned autoregressive decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct LipReader {
    config: ModelConfig,
    params: ParamSet,
}

/// One forward pass under construction: the tape plus lazily bound
/// parameters.
pub(crate) struct Forward<'a> {
    pub(crate) g: Graph,
    model: &'a LipReader,
    adapters: Option<&'a AdapterSet>,
    trainable: &'a Trainable,
    base: HashMap<String, Var>,
    adapter: HashMap<String, Var>,
}

impl<'a> Forward<'a> {
    pub(crate) fn new(model: &'a LipReader, adapters: Option<&'a AdapterSet>, trainable: &'a Trainable) -> Self {
        Self {
            g: Graph::new(),
            model,
            adapters,
            trainable,
            base: HashMap::new(),
            adapter: HashMap::new(),
        }
    }

    fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.base.get(name) {
            return v;
        }
        let t = self
            .model
            .params
            .get(name)
            .unwrap_or_else(|| panic!("model has no parameter {name}"))
            .clone();
        let v = self.g.leaf(t, self.trainable.base_trainable(name));
        self.base.insert(name.to_string(), v);
        v
    }

    fn adapter_param(&mut self, name: &str) -> Option<Var> {
        if let Some(&v) = self.adapter.get(name) {
            return Some(v);
        }
        let t = self.adapters?.params().get(name)?.clone();
        let v = self.g.leaf(t, self.trainable.adapter_trainable(name));
        self.adapter.insert(name.to_string(), v);
        Some(v)
    }

    /// Base matrix `name` viewed as `rows×cols`, plus its LoRA side path.
    fn weight(&mut self, name: &str) -> Var {
        let w = self.param(name);
        let shape = self.g.shape(w).to_vec();
        let w = if shape.len() > 2 {
            self.g.reshape(w, &[shape[0], shape[1..].iter().product()])
        } else {
            w
        };
        let Some((_, scale)) = self.adapters.and_then(|a| a.lora(name)) else {
            return w;
        };
        let a = self.adapter_param(&crate::adapters::lora_a_name(name)).expect("lora a");
        let b = self.adapter_param(&crate::adapters::lora_b_name(name)).expect("lora b");
        let ba = self.g.matmul(b, a, false);
        let delta = self.g.scale(ba, scale);
        self.g.add(w, delta)
    }

    /// `x·Wᵀ + b`.
    fn linear(&mut self, x: Var, w: &str, b: &str) -> Var {
        let w = self.weight(w);
        let y = self.g.matmul(x, w, true);
        let b = self.param(b);
        self.g.add_row(y, b)
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Var {
        let gamma = self.param(&format!("{prefix}.gamma"));
        let beta = self.param(&format!("{prefix}.beta"));
        self.g.layer_norm(x, gamma, beta)
    }

    fn block(&mut self, p: &str, x: Var, heads: usize, mask: AttnMask, memory_rows: Option<Var>) -> Var {
        let a = self.layer_norm(x, &format!("{p}.ln1"));
        let q = self.linear(a, &format!("{p}.attn.wq"), &format!("{p}.attn.bq"));
        let k = self.linear(a, &format!("{p}.attn.wk"), &format!("{p}.attn.bk"));
        let v = self.linear(a, &format!("{p}.attn.wv"), &format!("{p}.attn.bv"));
        // Prompt rows are read by every layer through the same projections,
        // without bias, so all-zero rows contribute nothing.
        let memory = memory_rows.map(|rows| {
            let wk = self.weight(&format!("{p}.attn.wk"));
            let wv = self.weight(&format!("{p}.attn.wv"));
            let mk = self.g.matmul(rows, wk, true);
            let mv = self.g.matmul(rows, wv, true);
            (mk, mv)
        });
        let o = self.g.attention(q, k, v, memory, heads, mask);
        let o = self.linear(o, &format!("{p}.attn.wo"), &format!("{p}.attn.bo"));
        let x = self.g.add(x, o);
        let b = self.layer_norm(x, &format!("{p}.ln2"));
        let f = self.linear(b, &format!("{p}.ff.w1"), &format!("{p}.ff.b1"));
        let f = self.g.relu(f);
        let f = self.linear(f, &format!("{p}.ff.w2"), &format!("{p}.ff.b2"));
        self.g.add(x, f)
    }

    pub(crate) fn frontend(&mut self, clip: &VideoClip) -> Result<Var> {
        let cfg = &self.model.config;
        if (clip.h, clip.w, clip.c) != (cfg.frame_h, cfg.frame_w, cfg.channels) {
            return Err(Error::shape(
                "frontend.conv0",
                format!("{}x{}x{}", cfg.frame_h, cfg.frame_w, cfg.channels),
                format!("{}x{}x{}", clip.h, clip.w, clip.c),
            ));
        }
        if clip.t > cfg.max_frames {
            return Err(Error::shape("frontend", format!("at most {} frames", cfg.max_frames), clip.t));
        }
        let mut x = self.g.constant(clip.to_channels_first());
        for (i, (cin, _)) in cfg.conv_shapes().into_iter().enumerate() {
            let prompt = self.adapter_param(&prompt_name(i));
            if let Some(p) = prompt {
                let want = [cin, crate::adapters::border_len(cfg.frame_h, cfg.frame_w)];
                if self.g.shape(p) != want {
                    return Err(Error::shape(
                        format!("frontend.conv{i}"),
                        format!("{want:?}"),
                        format!("{:?}", self.g.shape(p)),
                    ));
                }
            }
            let padded = self.g.pad_with_prompt(x, prompt);
            let w = self.weight(&format!("frontend.conv{i}.weight"));
            let b = self.param(&format!("frontend.conv{i}.bias"));
            let y = self.g.conv3x3(padded, w, b);
            x = self.g.relu(y);
        }
        let s = self.g.shape(x).to_vec();
        let flat = self.g.reshape(x, &[s[0], s[1] * s[2] * s[3]]);
        Ok(self.linear(flat, "frontend.proj.weight", "frontend.proj.bias"))
    }

    pub(crate) fn backend(&mut self, fs: Var) -> Result<Var> {
        let cfg = &self.model.config;
        let (t, d) = (self.g.shape(fs)[0], self.g.shape(fs)[1]);
        if d != cfg.d_model {
            return Err(Error::shape("backend.block0", cfg.d_model, d));
        }
        let pe = self.g.constant(sinusoidal(t, d, 0));
        let mut x = self.g.add(fs, pe);
        for b in 0..cfg.encoder_blocks {
            x = self.block(&format!("backend.block{b}"), x, cfg.heads, AttnMask::Full, None);
        }
        Ok(self.layer_norm(x, "backend.ln_f"))
    }

    pub(crate) fn project(&mut self, fv: Var) -> Result<Var> {
        let d = self.g.shape(fv)[1];
        if d != self.model.config.d_model {
            return Err(Error::shape("projector", self.model.config.d_model, d));
        }
        Ok(self.linear(fv, "projector.weight", "projector.bias"))
    }

    pub(crate) fn encode(&mut self, clip: &VideoClip) -> Result<Var> {
        let fs = self.frontend(clip)?;
        let fv = self.backend(fs)?;
        self.project(fv)
    }

    /// Prompt rows from the adapter set stacked above `aligned`.
    pub(crate) fn with_prompt(&mut self, aligned: Var) -> (Var, usize) {
        match self.adapter_param(INPUT_PROMPT) {
            Some(p) if self.g.shape(p)[0] > 0 => {
                let n = self.g.shape(p)[0];
                (self.g.concat_rows(&[p, aligned]), n)
            }
            _ => (aligned, 0),
        }
    }

    /// Logits for each position of `inputs`, given a prefix whose first
    /// `n_prompt` rows are prompt rows.
    pub(crate) fn decoder(&mut self, prefix: Var, n_prompt: usize, inputs: &[usize]) -> Result<Var> {
        let cfg = &self.model.config;
        let (rows, width) = (self.g.shape(prefix)[0], self.g.shape(prefix)[1]);
        if width != cfg.d_dec {
            return Err(Error::shape("decoder prefix", cfg.d_dec, width));
        }
        if n_prompt > rows {
            return Err(Error::shape("decoder prefix", format!("more than {n_prompt} rows"), rows));
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::shape("decoder.embed", format!("token < {}", cfg.vocab_size), bad));
        }
        let t = rows - n_prompt;
        let visual = if n_prompt > 0 {
            self.g.slice_rows(prefix, n_prompt, rows)
        } else {
            prefix
        };
        let prompt = (n_prompt > 0).then(|| self.g.slice_rows(prefix, 0, n_prompt));
        let table = self.param("decoder.embed");
        let emb = self.g.embed(table, inputs);
        let h = self.g.concat_rows(&[visual, emb]);
        let pe = self.g.constant(sinusoidal(t + inputs.len(), width, 0));
        let mut x = self.g.add(h, pe);
        let mask = AttnMask::PrefixCausal { prefix: t };
        for b in 0..cfg.decoder_blocks {
            x = self.block(&format!("decoder.block{b}"), x, cfg.decoder_heads, mask, prompt);
        }
        let x = self.layer_norm(x, "decoder.ln_f");
        let text = self.g.slice_rows(x, t, t + inputs.len());
        Ok(self.linear(text, "decoder.out.weight", "decoder.out.bias"))
    }

    /// Teacher-forced mean token loss for one clip.
    pub(crate) fn loss(&mut self, clip: &VideoClip, target: &TokenSequence) -> Result<Var> {
        let aligned = self.encode(clip)?;
        self.loss_from_aligned(aligned, target)
    }

    pub(crate) fn loss_from_aligned(&mut self, aligned: Var, target: &TokenSequence) -> Result<Var> {
        let (prefix, n_prompt) = self.with_prompt(aligned);
        let logits = self.decoder(prefix, n_prompt, &target.decoder_inputs())?;
        Ok(self.g.cross_entropy(logits, &target.decoder_targets(), PAD))
    }

    /// Gradients of `root` for every trainable bound parameter.
    pub(crate) fn grads(&self, root: Var) -> ParamGrads {
        let grads = self.g.backward(root);
        let mut out = ParamGrads::default();
        for (name, &v) in &self.base {
            if self.g.requires_grad(v) {
                if let Some(t) = grads.get(v) {
                    out.base.insert(name.clone(), t);
                }
            }
        }
        for (name, &v) in &self.adapter {
            if self.g.requires_grad(v) {
                if let Some(t) = grads.get(v) {
                    out.adapter.insert(name.clone(), t);
                }
            }
        }
        out
    }
}

impl LipReader {
    /// Freshly initialized weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let c = &config;
        for (i, (cin, cout)) in c.conv_shapes().into_iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            p.insert(format!("frontend.conv{i}.weight"), Tensor::randn(&[cout, cin, 3, 3], std, &mut rng));
            p.insert(format!("frontend.conv{i}.bias"), Tensor::zeros(&[cout]));
        }
        let flat = c.conv_channels.last().copied().unwrap_or(c.channels) * c.frame_h * c.frame_w;
        linear_init(&mut p, "frontend.proj", c.d_model, flat, &mut rng);
        for b in 0..c.encoder_blocks {
            block_init(&mut p, &format!("backend.block{b}"), c.d_model, c.ff_dim, &mut rng);
        }
        ln_init(&mut p, "backend.ln_f", c.d_model);
        linear_init(&mut p, "projector", c.d_dec, c.d_model, &mut rng);
        p.insert("decoder.embed", Tensor::randn(&[c.vocab_size, c.d_dec], 0.5, &mut rng));
        for b in 0..c.decoder_blocks {
            block_init(&mut p, &format!("decoder.block{b}"), c.d_dec, c.decoder_ff_dim, &mut rng);
        }
        ln_init(&mut p, "decoder.ln_f", c.d_dec);
        linear_init(&mut p, "decoder.out", c.vocab_size, c.d_dec, &mut rng);
        Ok(Self { config, params: p })
    }

    /// Rebuilds a model from stored parameters, checking every shape.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let reference = LipReader::new(config.clone(), 0)?;
        for (name, want) in reference.params.iter() {
            match params.get(name) {
                None => return Err(Error::shape(name, format!("{:?}", want.shape()), "missing")),
                Some(t) if t.shape() != want.shape() => {
                    return Err(Error::shape(name, format!("{:?}", want.shape()), format!("{:?}", t.shape())))
                }
                _ => {}
            }
        }
        if let Some(extra) = params.names().find(|n| !reference.params.contains(n)) {
            return Err(Error::shape(extra, "absent", "unexpected parameter"));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable access for optimizers and tests. Shapes are not re-checked.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Hex SHA-256 over the 32-bit blob of every base parameter.
    pub fn base_hash(&self) -> String {
        self.params.blob_hash()
    }

    /// Element count of base parameters whose name starts with `prefix`.
    pub fn count_params(&self, prefix: &str) -> usize {
        self.params.numel_with_prefix(prefix)
    }

    pub(crate) fn forward<'a>(&'a self, adapters: Option<&'a AdapterSet>, trainable: &'a Trainable) -> Forward<'a> {
        Forward::new(self, adapters, trainable)
    }

    pub fn frontend_forward(&self, clip: &VideoClip, adapters: Option<&AdapterSet>) -> Result<SpatialFeatures> {
        let none = Trainable::none();
        let mut f = self.forward(adapters, &none);
        let v = f.frontend(clip)?;
        Ok(SpatialFeatures {
            values: f.g.value(v).clone(),
        })
    }

    pub fn backend_forward(&self, fs: &SpatialFeatures, adapters: Option<&AdapterSet>) -> Result<VisualFeatures> {
        let none = Trainable::none();
        let mut f = self.forward(adapters, &none);
        let x = f.g.constant(fs.values.clone());
        let v = f.backend(x)?;
        Ok(VisualFeatures {
            values: f.g.value(v).clone(),
        })
    }

    pub fn project(&self, fv: &VisualFeatures) -> Result<AlignedFeatures> {
        let none = Trainable::none();
        let mut f = self.forward(None, &none);
        let x = f.g.constant(fv.values.clone());
        let v = f.project(x)?;
        Ok(AlignedFeatures {
            values: f.g.value(v).clone(),
        })
    }

    /// Front-end, back-end and projector in one pass.
    pub fn encode(&self, clip: &VideoClip, adapters: Option<&AdapterSet>) -> Result<AlignedFeatures> {
        let none = Trainable::none();
        let mut f = self.forward(adapters, &none);
        let v = f.encode(clip)?;
        Ok(AlignedFeatures {
            values: f.g.value(v).clone(),
        })
    }

    /// Per-position logits (`(len+1)×vocab`) under teacher forcing. The first
    /// `n_prompt` rows of `prefix` are prompt rows; decoder LoRA is taken
    /// from `adapters`.
    pub fn decoder_forward(
        &self,
        prefix: &Tensor,
        n_prompt: usize,
        targets: &TokenSequence,
        adapters: Option<&AdapterSet>,
    ) -> Result<Tensor> {
        let none = Trainable::none();
        let mut f = self.forward(adapters, &none);
        let p = f.g.constant(prefix.clone());
        let logits = f.decoder(p, n_prompt, &targets.decoder_inputs())?;
        Ok(f.g.value(logits).clone())
    }

    /// Argmax decoding from BOS until EOS or [`MAX_DECODE_LEN`] words.
    pub fn greedy_decode(&self, prefix: &Tensor, n_prompt: usize, adapters: Option<&AdapterSet>) -> Result<TokenSequence> {
        let none = Trainable::none();
        let mut inputs = vec![BOS];
        while inputs.len() <= MAX_DECODE_LEN {
            let mut f = self.forward(adapters, &none);
            let p = f.g.constant(prefix.clone());
            let logits = f.decoder(p, n_prompt, &inputs)?;
            let logits = f.g.value(logits);
            let last = logits.row(logits.rows() - 1);
            let next = argmax(last);
            if next == EOS {
                break;
            }
            inputs.push(next);
        }
        Ok(TokenSequence::new(inputs[1..].to_vec()))
    }

    /// Encodes, prepends the adapter set's input prompt and decodes greedily.
    pub fn transcribe(&self, clip: &VideoClip, adapters: Option<&AdapterSet>) -> Result<TokenSequence> {
        let aligned = self.encode(clip, adapters)?;
        self.transcribe_aligned(&aligned, adapters)
    }

    pub fn transcribe_aligned(&self, aligned: &AlignedFeatures, adapters: Option<&AdapterSet>) -> Result<TokenSequence> {
        let prompt = adapters.and_then(AdapterSet::input_prompt);
        let prefix = crate::adapters::concat_prompt(prompt.as_ref(), aligned)?;
        self.greedy_decode(&prefix, prompt.map_or(0, |p| p.len()), adapters)
    }

    /// Teacher-forced loss and gradients for every parameter selected by
    /// `trainable`.
    pub fn loss_and_grads(
        &self,
        clip: &VideoClip,
        target: &TokenSequence,
        adapters: Option<&AdapterSet>,
        trainable: &Trainable,
    ) -> Result<(f64, ParamGrads)> {
        let mut f = self.forward(adapters, trainable);
        let loss = f.loss(clip, target)?;
        let value = f.g.value(loss).data()[0];
        Ok((value, f.grads(loss)))
    }

    /// Same as [`LipReader::loss_and_grads`] starting from precomputed
    /// aligned features, for runs where the encoder is frozen.
    pub fn loss_and_grads_aligned(
        &self,
        aligned: &AlignedFeatures,
        target: &TokenSequence,
        adapters: Option<&AdapterSet>,
        trainable: &Trainable,
    ) -> Result<(f64, ParamGrads)> {
        let mut f = self.forward(adapters, trainable);
        let a = f.g.constant(aligned.values.clone());
        let loss = f.loss_from_aligned(a, target)?;
        let value = f.g.value(loss).data()[0];
        Ok((value, f.grads(loss)))
    }

    pub fn loss(&self, clip: &VideoClip, target: &TokenSequence, adapters: Option<&AdapterSet>) -> Result<f64> {
        let none = Trainable::none();
        let mut f = self.forward(adapters, &none);
        let loss = f.loss(clip, target)?;
        Ok(f.g.value(loss).data()[0])
    }

    /// Copy with every LoRA delta folded into its base matrix. Prompts cannot
    /// be folded and are left in the adapter set.
    pub fn merged(&self, adapters: &AdapterSet) -> Result<LipReader> {
        let mut out = self.clone();
        for site in adapters.lora_sites() {
            let (pair, scale) = adapters.lora(&site).expect("listed site");
            let w = out
                .params
                .get_mut(&site)
                .ok_or_else(|| Error::shape(&site, "base parameter", "missing"))?;
            let shape = w.shape().to_vec();
            let delta = pair.b.matmul(&pair.a).scale(scale);
            let merged = w.reshape(&[shape[0], shape[1..].iter().product()]).add(&delta);
            *w = merged.reshape(&shape);
        }
        Ok(out)
    }
}

/// Mean negative log-likelihood of `targets` under row-wise softmax,
/// ignoring PAD targets.
pub fn ce_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::shape("ce_loss", logits.rows(), targets.len()));
    }
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let out = g.cross_entropy(l, targets, PAD);
    Ok(g.value(out).data()[0])
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn linear_init(p: &mut ParamSet, prefix: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng) {
    p.insert(format!("{prefix}.weight"), Tensor::randn(&[out, inp], 1.0 / (inp as f64).sqrt(), rng));
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[out]));
}

fn ln_init(p: &mut ParamSet, prefix: &str, width: usize) {
    p.insert(format!("{prefix}.gamma"), Tensor::full(&[width], 1.0));
    p.insert(format!("{prefix}.beta"), Tensor::zeros(&[width]));
}

fn block_init(p: &mut ParamSet, prefix: &str, d: usize, ff: usize, rng: &mut ChaCha8Rng) {
    ln_init(p, &format!("{prefix}.ln1"), d);
    for m in ["q", "k", "v", "o"] {
        p.insert(format!("{prefix}.attn.w{m}"), Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), rng));
        p.insert(format!("{prefix}.attn.b{m}"), Tensor::zeros(&[d]));
    }
    ln_init(p, &format!("{prefix}.ln2"), d);
    p.insert(format!("{prefix}.ff.w1"), Tensor::randn(&[ff, d], (2.0 / d as f64).sqrt(), rng));
    p.insert(format!("{prefix}.ff.b1"), Tensor::zeros(&[ff]));
    p.insert(format!("{prefix}.ff.w2"), Tensor::randn(&[d, ff], 1.0 / (ff as f64).sqrt(), rng));
    p.insert(format!("{prefix}.ff.b2"), Tensor::zeros(&[d]));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterLayout, LoraConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_dec: 8,
            encoder_blocks: 1,
            heads: 2,
            ff_dim: 16,
            decoder_blocks: 1,
            decoder_heads: 2,
            decoder_ff_dim: 16,
            vocab_size: 7,
            max_frames: 16,
            frame_h: 5,
            frame_w: 4,
            channels: 1,
            conv_channels: vec![2, 2],
        }
    }

    fn clip(t: usize, seed: u8) -> VideoClip {
        let n = t * 5 * 4;
        let frames = (0..n).map(|i| (i as u8).wrapping_mul(37).wrapping_add(seed)).collect();
        VideoClip::new(frames, t, 5, 4, 1, 12.5).unwrap()
    }

    #[test]
    fn shape_chain_and_length_preservation() {
        let m = LipReader::new(tiny(), 1).unwrap();
        for t in [1, 4] {
            let fs = m.frontend_forward(&clip(t, 0), None).unwrap();
            assert_eq!(fs.values.shape(), &[t, 8]);
            let fv = m.backend_forward(&fs, None).unwrap();
            assert_eq!(fv.values.shape(), &[t, 8]);
            let fa = m.project(&fv).unwrap();
            assert_eq!(fa.values.shape(), &[t, 8]);
        }
    }

    #[test]
    fn geometry_mismatch_names_layer() {
        let m = LipReader::new(tiny(), 1).unwrap();
        let bad = VideoClip::new(vec![0; 9], 1, 3, 3, 1, 12.5).unwrap();
        match m.frontend_forward(&bad, None) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, "frontend.conv0"),
            r => panic!("unexpected {r:?}"),
        }
        let fs = SpatialFeatures {
            values: Tensor::zeros(&[2, 5]),
        };
        assert!(m.backend_forward(&fs, None).is_err());
        let fv = VisualFeatures {
            values: Tensor::zeros(&[2, 5]),
        };
        assert!(m.project(&fv).is_err());
        let prefix = Tensor::zeros(&[3, 5]);
        assert!(m.decoder_forward(&prefix, 0, &TokenSequence::new(vec![3]), None).is_err());
    }

    #[test]
    fn identity_projector_passes_features_through() {
        let mut m = LipReader::new(tiny(), 1).unwrap();
        *m.params_mut().get_mut("projector.weight").unwrap() = Tensor::eye(8);
        let fv = VisualFeatures {
            values: Tensor::randn(&[3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2)),
        };
        assert_eq!(m.project(&fv).unwrap().values, fv.values);
        let zero = VisualFeatures {
            values: Tensor::zeros(&[3, 8]),
        };
        assert!(m.project(&zero).unwrap().values.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_prompt_matches_prompt_free_decoding() {
        let m = LipReader::new(tiny(), 3).unwrap();
        let aligned = m.encode(&clip(3, 1), None).unwrap();
        let target = TokenSequence::new(vec![3, 4]);
        let a = m.decoder_forward(&aligned.values, 0, &target, None).unwrap();
        let set = AdapterSet::init(m.config(), AdapterLayout::language(2), 0).unwrap();
        let prefix = crate::adapters::concat_prompt(set.input_prompt().as_ref(), &aligned).unwrap();
        assert_eq!(prefix.rows(), 5);
        let b = m.decoder_forward(&prefix, 2, &target, Some(&set)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn greedy_decode_is_deterministic_and_stops_on_eos() {
        let mut m = LipReader::new(tiny(), 4).unwrap();
        let aligned = m.encode(&clip(3, 2), None).unwrap();
        let a = m.greedy_decode(&aligned.values, 0, None).unwrap();
        let b = m.greedy_decode(&aligned.values, 0, None).unwrap();
        assert_eq!(a, b);
        let bias = m.params_mut().get_mut("decoder.out.bias").unwrap();
        bias.data_mut()[EOS] = 1e6;
        assert!(m.greedy_decode(&aligned.values, 0, None).unwrap().is_empty());
    }

    #[test]
    fn ce_loss_closed_forms() {
        let uniform = Tensor::zeros(&[3, 4]);
        let l = ce_loss(&uniform, &[0, 1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let mut peaked = Tensor::zeros(&[2, 4]);
        peaked.data_mut()[1] = 30.0;
        peaked.data_mut()[4 + 3] = 30.0;
        assert!(ce_loss(&peaked, &[1, 3]).unwrap() < 1e-9);
        // PAD rows are skipped.
        assert!((ce_loss(&uniform, &[0, PAD, PAD]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(ce_loss(&uniform, &[0]).is_err());
    }

    #[test]
    fn merged_lora_matches_side_path() {
        let m = LipReader::new(tiny(), 5).unwrap();
        let lora = LoraConfig::new(2, 4.0, crate::adapters::LoraTarget::ALL);
        let mut set = AdapterSet::init(m.config(), AdapterLayout::vision(Some(lora), false), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (name, t) in set.params_mut().iter_mut() {
            if name.ends_with(".b") {
                *t = Tensor::randn(t.shape(), 0.1, &mut rng);
            }
        }
        let c = clip(4, 3);
        let side = m.encode(&c, Some(&set)).unwrap();
        let merged = m.merged(&set).unwrap().encode(&c, None).unwrap();
        assert!(side.values.max_abs_diff(&merged.values) < 1e-10);
        assert_ne!(side, m.encode(&c, None).unwrap());
    }

    #[test]
    fn from_params_rejects_missing_and_misshaped() {
        let m = LipReader::new(tiny(), 1).unwrap();
        let mut p = m.params().clone();
        p.insert("projector.weight", Tensor::zeros(&[2, 2]));
        assert!(LipReader::from_params(tiny(), p).is_err());
        assert_eq!(LipReader::from_params(tiny(), m.params().clone()).unwrap(), m);
    }
}
