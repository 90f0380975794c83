//! The lip-reading network and the data types flowing through it.
//!
//! Shape chain: a `T×H×W×C` clip becomes `T×D` spatial features (front-end),
//! `T×D` visual features (back-end), `T×D_L` aligned features (projector),
//! and finally per-token logits from the decoder, which reads the aligned
//! features (optionally preceded by prompt rows) as a fully visible prefix.

mod network;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use network::{ce_loss, LipReader, ParamGrads, Trainable};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const RESERVED_TOKENS: usize = 3;

/// Longest sequence greedy decoding will emit.
pub const MAX_DECODE_LEN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder width D.
    pub d_model: usize,
    /// Decoder width D_L.
    pub d_dec: usize,
    pub encoder_blocks: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
    pub decoder_ff_dim: usize,
    pub vocab_size: usize,
    pub max_frames: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub channels: usize,
    /// Output channels of each front-end convolution.
    pub conv_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_dec: 128,
            encoder_blocks: 2,
            heads: 4,
            ff_dim: 128,
            decoder_blocks: 2,
            decoder_heads: 4,
            decoder_ff_dim: 256,
            vocab_size: 128,
            max_frames: 256,
            frame_h: 24,
            frame_w: 24,
            channels: 1,
            conv_channels: vec![8, 8],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder width {} must be a positive multiple of {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_dec == 0 || self.decoder_heads == 0 || self.d_dec % self.decoder_heads != 0 {
            return Err(Error::Config(format!(
                "decoder width {} must be a positive multiple of {} heads",
                self.d_dec, self.decoder_heads
            )));
        }
        if self.vocab_size <= RESERVED_TOKENS {
            return Err(Error::Config("vocabulary has no room beyond BOS/EOS/PAD".into()));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::Config("front-end needs at least one non-empty convolution".into()));
        }
        if self.frame_h == 0 || self.frame_w == 0 || self.channels == 0 || self.max_frames == 0 {
            return Err(Error::Config("frame geometry must be non-empty".into()));
        }
        Ok(())
    }

    /// `(in_channels, out_channels)` of each front-end convolution.
    pub fn conv_shapes(&self) -> Vec<(usize, usize)> {
        let mut cin = self.channels;
        self.conv_channels
            .iter()
            .map(|&cout| {
                let s = (cin, cout);
                cin = cout;
                s
            })
            .collect()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// A clip of `T` frames, stored `T×H×W×C` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<u8>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub frame_rate: f64,
}

impl VideoClip {
    pub fn new(frames: Vec<u8>, t: usize, h: usize, w: usize, c: usize, frame_rate: f64) -> Result<Self> {
        if t == 0 {
            return Err(Error::Empty("clip".into()));
        }
        if frames.len() != t * h * w * c {
            return Err(Error::shape("clip", t * h * w * c, frames.len()));
        }
        Ok(Self {
            frames,
            t,
            h,
            w,
            c,
            frame_rate,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.t as f64 / self.frame_rate
    }

    /// Pixel values scaled to `[0, 1]` in `[T, C, H, W]` order.
    pub fn to_channels_first(&self) -> Tensor {
        let (t, h, w, c) = (self.t, self.h, self.w, self.c);
        let mut out = vec![0.0; t * c * h * w];
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    for ci in 0..c {
                        let src = ((ti * h + y) * w + x) * c + ci;
                        out[((ti * c + ci) * h + y) * w + x] = self.frames[src] as f64 / 255.0;
                    }
                }
            }
        }
        Tensor::new(vec![t, c, h, w], out)
    }

    /// Single frame `index` as a row-major `H×W×C` slice.
    pub fn frame(&self, index: usize) -> &[u8] {
        let n = self.h * self.w * self.c;
        &self.frames[index * n..(index + 1) * n]
    }
}

/// Per-frame front-end embeddings, `T×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialFeatures {
    pub values: Tensor,
}

/// Temporally contextualized back-end output, `T×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    pub values: Tensor,
}

/// Projector output in the decoder embedding space, `T×D_L`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedFeatures {
    pub values: Tensor,
}

/// Word tokens of one sentence, without BOS/EOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Teacher-forcing inputs: BOS followed by the words.
    pub fn decoder_inputs(&self) -> Vec<usize> {
        std::iter::once(BOS).chain(self.tokens.iter().copied()).collect()
    }

    /// Teacher-forcing targets: the words followed by EOS.
    pub fn decoder_targets(&self) -> Vec<usize> {
        self.tokens.iter().copied().chain(std::iter::once(EOS)).collect()
    }

    pub fn to_text(&self, vocab: &Vocab) -> String {
        self.tokens
            .iter()
            .map(|&t| vocab.word(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Word vocabulary with BOS, EOS and PAD at indices 0, 1, 2.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    pub fn new<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Self {
        Self {
            words: words.into_iter().map(Into::into).collect(),
        }
    }

    /// Total token count including the reserved ones.
    pub fn size(&self) -> usize {
        self.words.len() + RESERVED_TOKENS
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn token(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word).map(|i| i + RESERVED_TOKENS)
    }

    pub fn word(&self, token: usize) -> Option<&str> {
        token
            .checked_sub(RESERVED_TOKENS)
            .and_then(|i| self.words.get(i))
            .map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<TokenSequence> {
        words
            .iter()
            .map(|w| self.token(w.as_ref()).ok_or_else(|| Error::UnknownWord(w.as_ref().to_string())))
            .collect::<Result<Vec<_>>>()
            .map(TokenSequence::new)
    }
}

/// Fixed sinusoidal position table, `rows×width`, starting at position `offset`.
pub fn sinusoidal(rows: usize, width: usize, offset: usize) -> Tensor {
    let mut data = vec![0.0; rows * width];
    for r in 0..rows {
        let pos = (r + offset) as f64;
        for i in 0..width / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / width as f64);
            data[r * width + 2 * i] = (pos * freq).sin();
            data[r * width + 2 * i + 1] = (pos * freq).cos();
        }
    }
    Tensor::new(vec![rows, width], data)
}
