//! Checks shared by the integration tests and the acceptance runner. Every
//! oracle here is computed independently of the library code it checks.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use lipadapt::adapters::{count_trainable, AdapterLayout, AdapterSet, LoraConfig, LoraTarget};
use lipadapt::datasetkit::synthetic::{Scenario, ScenarioConfig, SyntheticFaces};
use lipadapt::datasetkit::{
    build_dataset, clustering_accuracy, cross_corpus_overlap, extract_embeddings, identity_cluster, overlap_ratio,
    DatasetConfig, VideoRecord, DEFAULT_THRESHOLD,
};
use lipadapt::eval::wer;
use lipadapt::model::{LipReader, ModelConfig, TokenSequence, Trainable, VideoClip};
use lipadapt::tensor::Tensor;
use lipadapt::training::CosineSchedule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one acceptance check.
#[derive(Debug)]
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Two encoder and two decoder blocks on 6×6 frames.
pub fn two_block_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_dec: 8,
        encoder_blocks: 2,
        heads: 2,
        ff_dim: 12,
        decoder_blocks: 2,
        decoder_heads: 2,
        decoder_ff_dim: 12,
        vocab_size: 10,
        max_frames: 16,
        frame_h: 6,
        frame_w: 6,
        channels: 1,
        conv_channels: vec![2, 2],
    }
}

pub fn random_clip(cfg: &ModelConfig, frames: usize, rng: &mut ChaCha8Rng) -> VideoClip {
    let n = frames * cfg.frame_h * cfg.frame_w * cfg.channels;
    let bytes = (0..n).map(|_| rng.gen::<u8>()).collect();
    VideoClip::new(bytes, frames, cfg.frame_h, cfg.frame_w, cfg.channels, 12.5).unwrap()
}

pub fn random_target(cfg: &ModelConfig, len: usize, rng: &mut ChaCha8Rng) -> TokenSequence {
    TokenSequence::new((0..len).map(|_| rng.gen_range(3..cfg.vocab_size)).collect())
}

/// Every adapter kind on its own, by display name.
pub fn adapter_kinds() -> Vec<(&'static str, AdapterLayout)> {
    let lora = |t| Some(LoraConfig::new(8, 16.0, [t]));
    vec![
        ("padding prompt", AdapterLayout::vision(None, true)),
        ("LoRA W_c", AdapterLayout::vision(lora(LoraTarget::Wc), false)),
        ("LoRA W_q", AdapterLayout::vision(lora(LoraTarget::Wq), false)),
        ("LoRA W_k", AdapterLayout::vision(lora(LoraTarget::Wk), false)),
        ("LoRA W_v", AdapterLayout::vision(lora(LoraTarget::Wv), false)),
        ("decoder LoRA", AdapterLayout {
            decoder_lora: Some(LoraConfig::new(8, 16.0, [LoraTarget::Wq, LoraTarget::Wk, LoraTarget::Wv])),
            ..AdapterLayout::default()
        }),
        ("input prompt", AdapterLayout::language(10)),
    ]
}

/// Teacher-forced logits and encoder output of one input.
fn outputs(model: &LipReader, adapters: Option<&AdapterSet>, clip: &VideoClip, target: &TokenSequence) -> (Tensor, Tensor) {
    let aligned = model.encode(clip, adapters).unwrap();
    let prompt = adapters.and_then(AdapterSet::input_prompt);
    let prefix = lipadapt::adapters::concat_prompt(prompt.as_ref(), &aligned).unwrap();
    let n_prompt = prompt.map_or(0, |p| p.len());
    let logits = model.decoder_forward(&prefix, n_prompt, target, adapters).unwrap();
    (aligned.values, logits)
}

/// Largest elementwise change any freshly initialized adapter kind causes,
/// over `inputs` seeded clips.
pub fn zero_init_max_change(cfg: &ModelConfig, inputs: usize) -> Vec<(&'static str, f64)> {
    let model = LipReader::new(cfg.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let data: Vec<_> = (0..inputs)
        .map(|_| {
            let t = rng.gen_range(4..12);
            let len = rng.gen_range(1..5);
            (random_clip(cfg, t, &mut rng), random_target(cfg, len, &mut rng))
        })
        .collect();
    let plain: Vec<_> = data.iter().map(|(c, t)| outputs(&model, None, c, t)).collect();
    adapter_kinds()
        .into_iter()
        .enumerate()
        .map(|(k, (name, layout))| {
            let set = AdapterSet::init(cfg, layout, 100 + k as u64).unwrap();
            let worst = data
                .iter()
                .zip(&plain)
                .map(|((c, t), (f0, l0))| {
                    let (f1, l1) = outputs(&model, Some(&set), c, t);
                    f1.max_abs_diff(f0).max(l1.max_abs_diff(l0))
                })
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

/// Gradient group of a parameter name.
fn group_of(name: &str, adapter: bool) -> &'static str {
    if !adapter {
        return "fine-tuned base weights";
    }
    if name.starts_with("prompt.conv") {
        "padding prompt"
    } else if name == "input_prompt" {
        "input prompt"
    } else if name.ends_with(".a") {
        "LoRA A"
    } else {
        "LoRA B"
    }
}

/// Worst relative error between analytic gradients and central
/// differences (step 1e-5), per trainable group, on a two-block model with
/// every adapter kind attached and set to random non-zero values.
pub fn gradient_errors() -> BTreeMap<&'static str, (f64, usize)> {
    let cfg = two_block_config();
    let model = LipReader::new(cfg.clone(), 3).unwrap();
    let layout = AdapterLayout {
        padding_prompt: true,
        encoder_lora: Some(LoraConfig::new(2, 4.0, LoraTarget::ALL)),
        decoder_lora: Some(LoraConfig::new(2, 4.0, [LoraTarget::Wq, LoraTarget::Wk, LoraTarget::Wv])),
        n_prompt: 3,
    };
    let mut adapters = AdapterSet::init(&cfg, layout, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (_, t) in adapters.params_mut().iter_mut() {
        for x in t.data_mut() {
            *x = rng.gen_range(-0.3..0.3);
        }
    }
    let clip = random_clip(&cfg, 5, &mut rng);
    let target = random_target(&cfg, 3, &mut rng);
    let trainable = Trainable {
        base: vec!["frontend.".into(), "backend.".into()],
        adapter: vec![String::new()],
    };
    let (_, grads) = model.loss_and_grads(&clip, &target, Some(&adapters), &trainable).unwrap();

    let h = 1e-5;
    let mut worst: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();
    let mut record = |group: &'static str, analytic: f64, numeric: f64| {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        let e = worst.entry(group).or_insert((0.0, 0));
        e.0 = e.0.max(err);
        e.1 += 1;
    };
    for (name, g) in &grads.adapter {
        for i in 0..g.numel() {
            let at = |d: f64| {
                let mut a = adapters.clone();
                a.params_mut().get_mut(name).unwrap().data_mut()[i] += d;
                model.loss(&clip, &target, Some(&a)).unwrap()
            };
            record(group_of(name, true), g.data()[i], (at(h) - at(-h)) / (2.0 * h));
        }
    }
    for (name, g) in &grads.base {
        for i in 0..g.numel() {
            let at = |d: f64| {
                let mut m = model.clone();
                m.params_mut().get_mut(name).unwrap().data_mut()[i] += d;
                m.loss(&clip, &target, Some(&adapters)).unwrap()
            };
            record(group_of(name, false), g.data()[i], (at(h) - at(-h)) / (2.0 * h));
        }
    }
    worst
}

/// Border cells of an `h×w` plane padded by one, counted cell by cell.
pub fn border_cells(h: usize, w: usize) -> usize {
    let mut n = 0;
    for i in 0..h + 2 {
        for j in 0..w + 2 {
            if i == 0 || j == 0 || i == h + 1 || j == w + 1 {
                n += 1;
            }
        }
    }
    n
}

/// Trainable element count by enumeration: every element of every adapter
/// tensor, with padding prompts re-derived cell by cell from the geometry.
pub fn enumerate_trainable(cfg: &ModelConfig, set: &AdapterSet) -> usize {
    let mut n = 0;
    let mut cin = cfg.channels;
    let mut prompt_channels = Vec::new();
    for &c in &cfg.conv_channels {
        prompt_channels.push(cin);
        cin = c;
    }
    for (name, t) in set.params().iter() {
        if let Some(layer) = name.strip_prefix("prompt.conv") {
            let channels = prompt_channels[layer.parse::<usize>().unwrap()];
            n += channels * border_cells(cfg.frame_h, cfg.frame_w);
            assert_eq!(t.numel(), channels * border_cells(cfg.frame_h, cfg.frame_w));
        } else {
            n += t.data().iter().count();
        }
    }
    n
}

/// A wide encoder and an 8B-class decoder width, for analytic counts.
pub fn reference_scale_config() -> ModelConfig {
    ModelConfig {
        d_model: 768,
        d_dec: 4096,
        encoder_blocks: 12,
        heads: 12,
        ff_dim: 3072,
        decoder_blocks: 1,
        decoder_heads: 32,
        decoder_ff_dim: 4096,
        vocab_size: 1000,
        max_frames: 600,
        frame_h: 88,
        frame_w: 88,
        channels: 1,
        conv_channels: vec![64],
    }
}

/// Counts reported by the library against enumeration, including the two
/// analytic reference-scale cases.
pub fn count_checks() -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let desk = lipadapt::eval::ExperimentConfig::desk().model;
    let mut layouts = adapter_kinds();
    layouts.push((
        "vision+language",
        AdapterLayout {
            padding_prompt: true,
            encoder_lora: Some(LoraConfig::default()),
            decoder_lora: None,
            n_prompt: 10,
        },
    ));
    for (name, layout) in layouts {
        let set = AdapterSet::init(&desk, layout, 1).unwrap();
        out.push((format!("desk {name}"), count_trainable(&set).total(), enumerate_trainable(&desk, &set)));
    }
    let big = reference_scale_config();
    let attn = LoraConfig::new(8, 16.0, [LoraTarget::Wq, LoraTarget::Wk, LoraTarget::Wv]);
    let set = AdapterSet::init(&big, AdapterLayout::vision(Some(attn), false), 0).unwrap();
    // 12 blocks × 3 matrices × r·(768 + 768)
    let analytic = 12 * 3 * 8 * (768 + 768);
    assert_eq!(analytic, 442_368);
    out.push(("attention LoRA r=8, 12×768".into(), count_trainable(&set).total(), enumerate_trainable(&big, &set)));
    out.push(("attention LoRA analytic".into(), count_trainable(&set).total(), analytic));
    let set = AdapterSet::init(&big, AdapterLayout::language(10), 0).unwrap();
    out.push(("input prompt N_p=10, D_L=4096".into(), count_trainable(&set).total(), enumerate_trainable(&big, &set)));
    out.push(("input prompt analytic".into(), count_trainable(&set).total(), 10 * 4096));
    out
}

/// Word-level Levenshtein distance, top-down with memoization.
pub fn oracle_distance(r: &[String], h: &[String]) -> usize {
    fn go(i: usize, j: usize, r: &[String], h: &[String], memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if i == r.len() {
            h.len() - j
        } else if j == h.len() {
            r.len() - i
        } else {
            let same = if r[i] == h[j] { 0 } else { 1 };
            (go(i + 1, j + 1, r, h, memo) + same)
                .min(go(i + 1, j, r, h, memo) + 1)
                .min(go(i, j + 1, r, h, memo) + 1)
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; h.len() + 1]; r.len() + 1];
    go(0, 0, r, h, &mut memo)
}

pub fn random_words(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<String> {
    const POOL: [&str; 6] = ["a", "b", "c", "d", "e", "f"];
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| POOL[rng.gen_range(0..POOL.len())].to_string()).collect()
}

/// Mismatches between `wer` and the oracle over `pairs` random pairs, plus
/// the two boundary identities.
pub fn wer_check(pairs: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = 0;
    let mut tried = 0;
    while tried < pairs {
        let r = random_words(&mut rng, 12);
        let h = random_words(&mut rng, 12);
        if r.is_empty() {
            continue;
        }
        tried += 1;
        let expected = oracle_distance(&r, &h) as f64 / r.len() as f64;
        if wer(&r, &h).unwrap() != expected {
            bad += 1;
        }
    }
    let x: Vec<String> = "the quick brown fox".split(' ').map(String::from).collect();
    let none: Vec<String> = Vec::new();
    let same = wer(&x, &x).unwrap();
    let empty = wer(&x, &none).unwrap();
    Check::new(
        bad == 0 && same == 0.0 && empty == 1.0,
        format!("{bad}/{pairs} mismatches; wer(x,x)={same}; wer(ref,empty)={empty}"),
    )
}

pub fn schedule_check() -> Check {
    let s = CosineSchedule::vision_default();
    let cases = [(0, 1e-4), (2500, 5.5e-5), (5000, 1e-5)];
    let worst = cases
        .iter()
        .map(|&(step, want)| ((s.lr_at(step) - want) / want).abs())
        .fold(0.0, f64::max);
    Check::new(worst <= 1e-12, format!("max relative error {worst:.2e}"))
}

/// Clustering accuracy on `identities × videos` synthetic faces.
pub fn clustering_check(identities: usize, videos: usize, sigma: f64) -> (f64, usize) {
    let mut truth = BTreeMap::new();
    let mut records = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..identities {
        for k in 0..videos {
            let id = format!("v{i:03}-{k:03}");
            truth.insert(id.clone(), i);
            records.push(VideoRecord {
                id,
                source: "synthetic".into(),
                duration_s: rng.gen_range(2.0..10.0),
                speaker_id: None,
                transcript: None,
                pseudo_label: false,
                path: None,
            });
        }
    }
    let faces = SyntheticFaces {
        dim: 128,
        sigma,
        seed: 31,
        truth: truth.clone(),
    };
    let emb = extract_embeddings(&records, &faces, 1).unwrap();
    let index = identity_cluster(&emb, DEFAULT_THRESHOLD).unwrap();
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let pred = index.labels(&ids);
    let gold: Vec<usize> = ids.iter().map(|id| truth[id]).collect();
    (clustering_accuracy(&pred, &gold), index.len())
}

/// Planted cross-corpus identities recovered (as true-identity pairs) and
/// the set of all matched true-identity pairs.
pub fn planted_overlap_check() -> Check {
    let sc = Scenario::generate(&ScenarioConfig::default()).unwrap();
    let a = identity_cluster(&extract_embeddings(&sc.primary, &sc.faces, 1).unwrap(), DEFAULT_THRESHOLD).unwrap();
    let b = identity_cluster(&extract_embeddings(&sc.secondary, &sc.faces, 1).unwrap(), DEFAULT_THRESHOLD).unwrap();
    let majority = |index: &lipadapt::datasetkit::IdentityIndex, cluster: usize| {
        let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
        for id in &index.clusters[&cluster] {
            *votes.entry(sc.identity(id).unwrap()).or_default() += 1;
        }
        votes.into_iter().max_by_key(|&(_, n)| n).unwrap().0
    };
    let found: BTreeSet<(usize, usize)> = cross_corpus_overlap(&a, &b, DEFAULT_THRESHOLD)
        .iter()
        .map(|m| (majority(&a, m.a), majority(&b, m.b)))
        .collect();
    let planted: BTreeSet<(usize, usize)> = sc.shared.iter().map(|&i| (i, i)).collect();
    Check::new(found == planted, format!("{} matches, {} planted", found.len(), planted.len()))
}

/// Worst relative deviation of any (speaker, split) duration from its
/// budget in a full dataset build.
pub fn split_budget_check() -> Check {
    let sc = Scenario::generate(&ScenarioConfig::default()).unwrap();
    let cfg = DatasetConfig::default();
    let build = build_dataset(&sc.primary, &sc.secondary, &sc.faces, &sc.transcriber, &cfg).unwrap();
    let mut totals: BTreeMap<(String, String), f64> = BTreeMap::new();
    for r in &build.rows {
        *totals.entry((r.speaker_id.clone(), r.split.clone())).or_default() += r.duration_s / 60.0;
    }
    let b = &cfg.budgets;
    let budget = |split: &str| match split {
        "train" => b.train_min,
        "valid" => b.valid_min,
        _ => b.test_min,
    };
    let worst = totals
        .iter()
        .map(|((_, split), &m)| ((m - budget(split)) / budget(split)).abs())
        .fold(0.0, f64::max);
    let speakers: BTreeSet<_> = totals.keys().map(|(s, _)| s.clone()).collect();
    Check::new(
        worst <= 0.05 && !totals.is_empty(),
        format!("{} speakers, worst deviation {:.2}%", speakers.len(), 100.0 * worst),
    )
}

pub fn overlap_oracle_check(pairs: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut bad = 0;
    for _ in 0..pairs {
        let mut draw = || -> Vec<String> {
            let n = rng.gen_range(1..30);
            (0..n).map(|_| format!("w{}", rng.gen_range(0..40))).collect()
        };
        let (split, train) = (draw(), draw());
        let mut distinct: Vec<&String> = split.iter().collect();
        distinct.sort();
        distinct.dedup();
        let shared = distinct.iter().filter(|w| train.contains(w)).count();
        let expected = shared as f64 / distinct.len() as f64;
        let got = overlap_ratio(&split.iter().cloned().collect(), &train.iter().cloned().collect());
        if (got - expected).abs() > 1e-15 {
            bad += 1;
        }
    }
    Check::new(bad == 0, format!("{bad}/{pairs} mismatches"))
}
