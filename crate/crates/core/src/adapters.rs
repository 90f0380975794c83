//! Speaker adapters: padding prompts on the front-end convolutions, LoRA
//! pairs on convolution kernels and attention projections, and the input
//! prompt prepended to the decoder prefix.
//!
//! Adapters never touch base weights. LoRA is evaluated as a side path at
//! forward time (`W + (α/r)·B·A`) and every adapter starts out as an exact
//! no-op: B and all prompts are zero-initialized.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{AlignedFeatures, ModelConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian used for LoRA `A` matrices.
pub const LORA_A_STD: f64 = 0.02;

/// Weight matrices a LoRA pair can attach to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    /// Front-end convolution kernels, through their matrix view.
    Wc,
    Wq,
    Wk,
    Wv,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] = [LoraTarget::Wc, LoraTarget::Wq, LoraTarget::Wk, LoraTarget::Wv];

    pub fn as_str(self) -> &'static str {
        match self {
            LoraTarget::Wc => "wc",
            LoraTarget::Wq => "wq",
            LoraTarget::Wk => "wk",
            LoraTarget::Wv => "wv",
        }
    }
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LoraTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "").as_str() {
            "wc" => Ok(LoraTarget::Wc),
            "wq" => Ok(LoraTarget::Wq),
            "wk" => Ok(LoraTarget::Wk),
            "wv" => Ok(LoraTarget::Wv),
            other => Err(Error::Config(format!("unknown LoRA target {other:?}"))),
        }
    }
}

/// Parses a comma-separated target list such as `wc,wq,wk,wv`.
pub fn parse_targets(s: &str) -> Result<BTreeSet<LoraTarget>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(LoraTarget::from_str)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: BTreeSet<LoraTarget>,
}

impl Default for LoraConfig {
    /// Rank 8, scaling 16, on the convolution plus query/key/value.
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: LoraTarget::ALL.into_iter().collect(),
        }
    }
}

impl LoraConfig {
    pub fn new(rank: usize, alpha: f64, targets: impl IntoIterator<Item = LoraTarget>) -> Self {
        Self {
            rank,
            alpha,
            targets: targets.into_iter().collect(),
        }
    }

    /// Multiplier applied to `B·A`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("LoRA alpha must be positive".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA target list is empty".into()));
        }
        Ok(())
    }
}

/// Low-rank factors bound to one weight matrix: `A` is r×d_in, `B` is d_out×r.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub site: String,
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraPair {
    pub fn init(site: impl Into<String>, d_out: usize, d_in: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            site: site.into(),
            a: Tensor::randn(&[rank, d_in], LORA_A_STD, rng),
            b: Tensor::zeros(&[d_out, rank]),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn numel(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

/// Returns `W + (α/r)·B·A` without modifying `W`.
pub fn apply_lora(w: &Tensor, pair: &LoraPair, cfg: &LoraConfig) -> Result<Tensor> {
    let (d_out, d_in) = (w.rows(), w.cols());
    if pair.a.rows() != cfg.rank || pair.b.cols() != cfg.rank {
        return Err(Error::shape(&pair.site, format!("rank {}", cfg.rank), format!("rank {}", pair.a.rows())));
    }
    if pair.a.cols() != d_in || pair.b.rows() != d_out {
        return Err(Error::shape(
            &pair.site,
            format!("{d_out}x{d_in}"),
            format!("{}x{}", pair.b.rows(), pair.a.cols()),
        ));
    }
    let delta = pair.b.matmul(&pair.a).scale(cfg.scale());
    Ok(w.reshape(&[d_out, d_in]).add(&delta).reshape(w.shape()))
}

/// Views a `[out, in, kh, kw]` kernel as an `out × (in·kh·kw)` matrix.
pub fn conv_as_matrix(kernel: &Tensor) -> Tensor {
    let s = kernel.shape();
    assert_eq!(s.len(), 4, "conv kernel must have four axes");
    kernel.reshape(&[s[0], s[1] * s[2] * s[3]])
}

/// Inverse of [`conv_as_matrix`].
pub fn matrix_as_conv(m: &Tensor, in_channels: usize, kh: usize, kw: usize) -> Tensor {
    m.reshape(&[m.rows(), in_channels, kh, kw])
}

/// Learnable border values replacing the zero padding of one 3×3 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddingPrompt {
    /// `[channels, border cells]`, cells ordered as [`border_cells`].
    pub values: Tensor,
    pub height: usize,
    pub width: usize,
}

impl PaddingPrompt {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            values: Tensor::zeros(&[channels, border_len(height, width)]),
            height,
            width,
        }
    }

    pub fn channels(&self) -> usize {
        self.values.rows()
    }
}

/// Number of border cells around an h×w plane padded by one.
pub fn border_len(height: usize, width: usize) -> usize {
    2 * (width + 2) + 2 * height
}

/// Pads a `[C, H, W]` plane stack or `[T, C, H, W]` clip by one cell, filling
/// the border from `prompt` (zeros when absent).
pub fn pad_with_prompt(x: &Tensor, prompt: Option<&PaddingPrompt>) -> Result<Tensor> {
    let s = x.shape().to_vec();
    let stacked = match s.len() {
        3 => x.reshape(&[1, s[0], s[1], s[2]]),
        4 => x.clone(),
        _ => return Err(Error::shape("padding", "[C,H,W] or [T,C,H,W]", format!("{s:?}"))),
    };
    let (c, h, w) = (stacked.shape()[1], stacked.shape()[2], stacked.shape()[3]);
    if let Some(p) = prompt {
        if p.values.shape() != [c, border_len(h, w)] {
            return Err(Error::shape(
                "padding prompt",
                format!("[{c}, {}]", border_len(h, w)),
                format!("{:?}", p.values.shape()),
            ));
        }
    }
    let mut g = Graph::new();
    let xv = g.constant(stacked);
    let pv = prompt.map(|p| g.constant(p.values.clone()));
    let out = g.pad_with_prompt(xv, pv);
    let out = g.value(out).clone();
    Ok(if s.len() == 3 {
        out.reshape(&[c, h + 2, w + 2])
    } else {
        out
    })
}

/// Learnable rows prepended to the decoder prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct InputPrompt {
    /// `[N_p, D_L]`
    pub values: Tensor,
}

impl InputPrompt {
    pub fn zeros(len: usize, width: usize) -> Self {
        Self {
            values: Tensor::zeros(&[len, width]),
        }
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stacks prompt rows above the aligned visual features.
pub fn concat_prompt(prompt: Option<&InputPrompt>, features: &AlignedFeatures) -> Result<Tensor> {
    let f = &features.values;
    let Some(p) = prompt.filter(|p| !p.is_empty()) else {
        return Ok(f.clone());
    };
    if p.values.cols() != f.cols() {
        return Err(Error::shape("input prompt", f.cols(), p.values.cols()));
    }
    let mut data = p.values.data().to_vec();
    data.extend_from_slice(f.data());
    Ok(Tensor::new(vec![p.len() + f.rows(), f.cols()], data))
}

/// Which adapters a set carries; everything needed to rebuild it against a
/// model configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterLayout {
    pub padding_prompt: bool,
    pub encoder_lora: Option<LoraConfig>,
    pub decoder_lora: Option<LoraConfig>,
    pub n_prompt: usize,
}

impl AdapterLayout {
    pub fn vision(lora: Option<LoraConfig>, padding_prompt: bool) -> Self {
        Self {
            padding_prompt,
            encoder_lora: lora,
            ..Self::default()
        }
    }

    pub fn language(n_prompt: usize) -> Self {
        Self {
            n_prompt,
            ..Self::default()
        }
    }
}

/// Per-component trainable element counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableCounts {
    pub padding_prompt: usize,
    pub frontend_lora: usize,
    pub backend_lora: usize,
    pub decoder_lora: usize,
    pub input_prompt: usize,
}

impl TrainableCounts {
    pub fn encoder(&self) -> usize {
        self.padding_prompt + self.frontend_lora + self.backend_lora
    }

    pub fn decoder(&self) -> usize {
        self.decoder_lora + self.input_prompt
    }

    pub fn total(&self) -> usize {
        self.encoder() + self.decoder()
    }
}

/// Every trainable adaptation parameter. Base weights are never part of an
/// adapter set, so all of them are frozen while it trains.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    layout: AdapterLayout,
    params: ParamSet,
}

pub(crate) fn prompt_name(layer: usize) -> String {
    format!("prompt.conv{layer}")
}

pub(crate) fn lora_a_name(site: &str) -> String {
    format!("lora.{site}.a")
}

pub(crate) fn lora_b_name(site: &str) -> String {
    format!("lora.{site}.b")
}

pub(crate) const INPUT_PROMPT: &str = "input_prompt";

/// Base-parameter names of the matrices a LoRA config attaches to, with
/// their `(d_out, d_in)`.
pub fn lora_sites(cfg: &ModelConfig, lora: &LoraConfig, decoder: bool) -> Result<Vec<(String, usize, usize)>> {
    let mut sites = Vec::new();
    for &t in &lora.targets {
        match (t, decoder) {
            (LoraTarget::Wc, true) => {
                return Err(Error::Config("the decoder has no convolution to target".into()))
            }
            (LoraTarget::Wc, false) => {
                for (i, (cin, cout)) in cfg.conv_shapes().into_iter().enumerate() {
                    sites.push((format!("frontend.conv{i}.weight"), cout, cin * 9));
                }
            }
            (t, false) => {
                for b in 0..cfg.encoder_blocks {
                    sites.push((format!("backend.block{b}.attn.{t}"), cfg.d_model, cfg.d_model));
                }
            }
            (t, true) => {
                for b in 0..cfg.decoder_blocks {
                    sites.push((format!("decoder.block{b}.attn.{t}"), cfg.d_dec, cfg.d_dec));
                }
            }
        }
    }
    Ok(sites)
}

impl AdapterSet {
    /// An empty set; binding it is equivalent to running without adapters.
    pub fn empty() -> Self {
        Self {
            layout: AdapterLayout::default(),
            params: ParamSet::new(),
        }
    }

    /// Fresh adapters: zero prompts, zero `B`, Gaussian `A` drawn from `seed`.
    pub fn init(cfg: &ModelConfig, layout: AdapterLayout, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        if layout.padding_prompt {
            for (i, (cin, _)) in cfg.conv_shapes().into_iter().enumerate() {
                let p = PaddingPrompt::zeros(cin, cfg.frame_h, cfg.frame_w);
                params.insert(prompt_name(i), p.values);
            }
        }
        for (lora, decoder) in [(&layout.encoder_lora, false), (&layout.decoder_lora, true)] {
            let Some(lora) = lora else { continue };
            lora.validate()?;
            for (site, d_out, d_in) in lora_sites(cfg, lora, decoder)? {
                let pair = LoraPair::init(&site, d_out, d_in, lora.rank, &mut rng);
                params.insert(lora_a_name(&site), pair.a);
                params.insert(lora_b_name(&site), pair.b);
            }
        }
        if layout.n_prompt > 0 {
            params.insert(INPUT_PROMPT, InputPrompt::zeros(layout.n_prompt, cfg.d_dec).values);
        }
        Ok(Self { layout, params })
    }

    pub fn layout(&self) -> &AdapterLayout {
        &self.layout
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable access for optimizers and tests. Shapes are not re-checked;
    /// call [`AdapterSet::validate`] after structural edits.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub(crate) fn from_parts(layout: AdapterLayout, params: ParamSet) -> Self {
        Self { layout, params }
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn padding_prompt(&self, layer: usize) -> Option<&Tensor> {
        self.params.get(&prompt_name(layer))
    }

    pub fn input_prompt(&self) -> Option<InputPrompt> {
        self.params.get(INPUT_PROMPT).map(|v| InputPrompt { values: v.clone() })
    }

    /// LoRA factors and scale for the base matrix named `site`, if adapted.
    pub fn lora(&self, site: &str) -> Option<(LoraPair, f64)> {
        let a = self.params.get(&lora_a_name(site))?;
        let b = self.params.get(&lora_b_name(site))?;
        let cfg = if site.starts_with("decoder.") {
            self.layout.decoder_lora.as_ref()?
        } else {
            self.layout.encoder_lora.as_ref()?
        };
        Some((
            LoraPair {
                site: site.to_string(),
                a: a.clone(),
                b: b.clone(),
            },
            cfg.scale(),
        ))
    }

    /// Names of the base matrices carrying LoRA pairs.
    pub fn lora_sites(&self) -> Vec<String> {
        self.params
            .names()
            .filter_map(|n| n.strip_prefix("lora.").and_then(|s| s.strip_suffix(".a")))
            .map(str::to_string)
            .collect()
    }

    /// Adds the parameters of `other`, which must not overlap with ours.
    pub fn merge(&mut self, other: &AdapterSet) -> Result<()> {
        for (name, t) in other.params.iter() {
            if self.params.contains(name) {
                return Err(Error::Config(format!("adapter parameter {name} present in both sets")));
            }
            self.params.insert(name, t.clone());
        }
        let (a, b) = (&mut self.layout, &other.layout);
        a.padding_prompt |= b.padding_prompt;
        if b.encoder_lora.is_some() {
            a.encoder_lora = b.encoder_lora.clone();
        }
        if b.decoder_lora.is_some() {
            a.decoder_lora = b.decoder_lora.clone();
        }
        a.n_prompt = a.n_prompt.max(b.n_prompt);
        Ok(())
    }

    /// Checks every tensor against the shapes `cfg` implies, reporting the
    /// first offending parameter.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = AdapterSet::init(cfg, self.layout.clone(), 0)?;
        for (name, want) in expected.params.iter() {
            match self.params.get(name) {
                None => return Err(Error::shape(name, format!("{:?}", want.shape()), "missing")),
                Some(have) if have.shape() != want.shape() => {
                    return Err(Error::shape(name, format!("{:?}", want.shape()), format!("{:?}", have.shape())))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.params.names().find(|n| !expected.params.contains(n)) {
            return Err(Error::shape(extra, "absent", "unexpected parameter"));
        }
        Ok(())
    }
}

/// Exact trainable element counts, from the pair formula `r·(d_in + d_out)`,
/// border-cell counts and `N_p·D_L`.
pub fn count_trainable(set: &AdapterSet) -> TrainableCounts {
    let mut c = TrainableCounts::default();
    for (name, t) in set.params.iter() {
        if name.starts_with("prompt.conv") {
            c.padding_prompt += t.rows() * t.cols();
        } else if name == INPUT_PROMPT {
            c.input_prompt += t.rows() * t.cols();
        }
    }
    for site in set.lora_sites() {
        let (pair, _) = set.lora(&site).expect("listed site");
        let (r, d_in, d_out) = (pair.rank(), pair.a.cols(), pair.b.rows());
        let n = r * (d_in + d_out);
        if site.starts_with("frontend.") {
            c.frontend_lora += n;
        } else if site.starts_with("backend.") {
            c.backend_lora += n;
        } else {
            c.decoder_lora += n;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(a: Vec<f64>, b: Vec<f64>, r: usize, d_in: usize, d_out: usize) -> LoraPair {
        LoraPair {
            site: "w".into(),
            a: Tensor::new(vec![r, d_in], a),
            b: Tensor::new(vec![d_out, r], b),
        }
    }

    #[test]
    fn zero_b_leaves_weight_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let p = LoraPair::init("w", 4, 6, 2, &mut rng);
        let cfg = LoraConfig::new(2, 4.0, [LoraTarget::Wq]);
        assert_eq!(apply_lora(&w, &p, &cfg).unwrap(), w);
    }

    #[test]
    fn hand_computed_rank_one_update() {
        let w = Tensor::zeros(&[2, 2]);
        let p = pair(vec![1.0, 0.0], vec![2.0, 0.0], 1, 2, 2);
        let cfg = LoraConfig::new(1, 1.0, [LoraTarget::Wq]);
        assert_eq!(apply_lora(&w, &p, &cfg).unwrap().data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn default_scale_is_two() {
        let cfg = LoraConfig::default();
        assert_eq!((cfg.rank, cfg.alpha), (8, 16.0));
        assert_eq!(cfg.scale(), 2.0);
    }

    #[test]
    fn rank_mismatch_is_rejected() {
        let w = Tensor::zeros(&[2, 2]);
        let p = pair(vec![1.0, 0.0], vec![2.0, 0.0], 1, 2, 2);
        assert!(apply_lora(&w, &p, &LoraConfig::new(2, 1.0, [LoraTarget::Wq])).is_err());
        let p = pair(vec![1.0, 0.0, 0.0], vec![2.0, 0.0], 1, 3, 2);
        assert!(apply_lora(&w, &p, &LoraConfig::new(1, 1.0, [LoraTarget::Wq])).is_err());
    }

    #[test]
    fn conv_matrix_view_shape_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Tensor::randn(&[8, 1, 3, 3], 1.0, &mut rng);
        let m = conv_as_matrix(&k);
        assert_eq!(m.shape(), &[8, 9]);
        assert_eq!(matrix_as_conv(&m, 1, 3, 3), k);
    }

    #[test]
    fn zero_prompt_equals_zero_padding() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let zero = PaddingPrompt::zeros(1, 2, 2);
        let a = pad_with_prompt(&x, Some(&zero)).unwrap();
        let b = pad_with_prompt(&x, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 4, 4]);
        assert_eq!(a.data().iter().sum::<f64>(), 10.0);
    }

    #[test]
    fn one_dimensional_padding_analogue() {
        // A 1×3 plane padded by a constant prompt: the middle row is the
        // padded 1-D signal.
        let x = Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]);
        let mut p = PaddingPrompt::zeros(1, 1, 3);
        p.values.data_mut().iter_mut().for_each(|v| *v = 5.0);
        let padded = pad_with_prompt(&x, Some(&p)).unwrap();
        assert_eq!(padded.row(0)[5..10], [5.0, 1.0, 2.0, 3.0, 5.0]);
    }

    #[test]
    fn prompt_geometry_mismatch_is_rejected() {
        let x = Tensor::zeros(&[1, 3, 3]);
        let p = PaddingPrompt::zeros(1, 4, 4);
        assert!(matches!(pad_with_prompt(&x, Some(&p)), Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_prompt_ordering() {
        let f = AlignedFeatures {
            values: Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
        };
        assert_eq!(concat_prompt(None, &f).unwrap(), f.values);
        assert_eq!(concat_prompt(Some(&InputPrompt::zeros(0, 2)), &f).unwrap(), f.values);
        let p = InputPrompt {
            values: Tensor::new(vec![2, 2], vec![0.5, -0.25, 7.0, 8.0]),
        };
        let out = concat_prompt(Some(&p), &f).unwrap();
        assert_eq!(out.rows(), 5);
        assert_eq!(out.row(0), p.values.row(0));
        assert_eq!(out.row(2), f.values.row(0));
        let bad = InputPrompt::zeros(2, 3);
        assert!(concat_prompt(Some(&bad), &f).is_err());
    }

    #[test]
    fn target_parsing() {
        let t = parse_targets("wc,wq, W_k,wv").unwrap();
        assert_eq!(t.len(), 4);
        assert!(parse_targets("wo").is_err());
    }

    fn reference_scale_config() -> ModelConfig {
        ModelConfig {
            d_model: 768,
            heads: 12,
            encoder_blocks: 12,
            d_dec: 4096,
            decoder_heads: 32,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn reference_scale_counts() {
        let cfg = reference_scale_config();
        let attn = LoraConfig::new(8, 16.0, [LoraTarget::Wq, LoraTarget::Wk, LoraTarget::Wv]);
        let set = AdapterSet::init(&cfg, AdapterLayout::vision(Some(attn), false), 0).unwrap();
        let counts = count_trainable(&set);
        assert_eq!(counts.backend_lora, 442_368);
        assert_eq!(counts.total(), set.params().numel());

        let set = AdapterSet::init(&cfg, AdapterLayout::language(10), 0).unwrap();
        assert_eq!(count_trainable(&set).input_prompt, 40_960);

        let single = LoraConfig::new(8, 16.0, [LoraTarget::Wq]);
        let cfg1 = ModelConfig {
            encoder_blocks: 1,
            ..cfg
        };
        let set = AdapterSet::init(&cfg1, AdapterLayout::vision(Some(single), false), 0).unwrap();
        assert_eq!(count_trainable(&set).total(), 12_288);
    }

    #[test]
    fn init_is_zero_b_and_seeded_a() {
        let cfg = ModelConfig::default();
        let layout = AdapterLayout {
            padding_prompt: true,
            encoder_lora: Some(LoraConfig::default()),
            decoder_lora: None,
            n_prompt: 4,
        };
        let a = AdapterSet::init(&cfg, layout.clone(), 7).unwrap();
        let b = AdapterSet::init(&cfg, layout, 7).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.params().iter() {
            if name.ends_with(".a") {
                let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
                let std = (t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64).sqrt();
                assert!(mean.abs() < 0.01 && (std - LORA_A_STD).abs() < 0.01, "{name}: {mean} {std}");
            } else {
                assert!(t.data().iter().all(|v| *v == 0.0), "{name} not zero");
            }
        }
        assert_eq!(count_trainable(&a).total(), a.params().numel());
    }

    #[test]
    fn overcomplete_rank_is_counted_by_the_pair_formula() {
        let cfg = ModelConfig::default();
        let lora = LoraConfig::new(10, 16.0, [LoraTarget::Wc]);
        let set = AdapterSet::init(&cfg, AdapterLayout::vision(Some(lora), false), 0).unwrap();
        let want: usize = cfg.conv_shapes().iter().map(|(cin, cout)| 10 * (cin * 9 + cout)).sum();
        assert_eq!(count_trainable(&set).frontend_lora, want);
    }

    #[test]
    fn validate_names_first_offending_parameter() {
        let cfg = ModelConfig::default();
        let set = AdapterSet::init(&cfg, AdapterLayout::language(3), 0).unwrap();
        let other = ModelConfig {
            d_dec: cfg.d_dec * 2,
            ..cfg.clone()
        };
        match set.validate(&other) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, INPUT_PROMPT),
            r => panic!("expected shape error, got {r:?}"),
        }
        set.validate(&cfg).unwrap();
    }
}
