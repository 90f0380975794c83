//! Glyph animations standing in for talking-mouth video.
//!
//! Every word owns a fixed set of strokes that morph from a start pose to an
//! end pose over the word's frames. A speaker's profile then thickens,
//! shifts, re-contrasts and noises the strokes, and stretches or compresses
//! time through its speed factor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SpeakerProfile;
use crate::error::{Error, Result};
use crate::model::VideoClip;

const STROKES_PER_GLYPH: usize = 3;
const GLYPH_SEED: u64 = 0x6c79_7068;
const BACKGROUND: f64 = 50.0;
const INK: f64 = 140.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    /// Frames per word at speed 1.0.
    pub base_frames: usize,
    pub frame_rate: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 24,
            width: 24,
            base_frames: 8,
            frame_rate: 12.5,
        }
    }
}

/// `round(base_frames / speed)`, at least 2.
pub fn frames_per_word(base_frames: usize, speed: f64) -> usize {
    ((base_frames as f64 / speed).round() as usize).max(2)
}

#[derive(Clone, Copy, Debug)]
struct Segment {
    a: (f64, f64),
    b: (f64, f64),
}

/// Start and end pose of each stroke of word `index`, in unit coordinates.
fn glyph(index: usize) -> Vec<(Segment, Segment)> {
    let mut rng = crate::stream_rng(GLYPH_SEED, index as u64);
    let point = |rng: &mut ChaCha8Rng| (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9));
    (0..STROKES_PER_GLYPH)
        .map(|_| {
            let start = Segment {
                a: point(&mut rng),
                b: point(&mut rng),
            };
            let shift = |p: (f64, f64), rng: &mut ChaCha8Rng| {
                (
                    (p.0 + rng.gen_range(-0.25..0.25)).clamp(0.05, 0.95),
                    (p.1 + rng.gen_range(-0.25..0.25)).clamp(0.05, 0.95),
                )
            };
            let end = Segment {
                a: shift(start.a, &mut rng),
                b: shift(start.b, &mut rng),
            };
            (start, end)
        })
        .collect()
}

fn lerp(p: (f64, f64), q: (f64, f64), t: f64) -> (f64, f64) {
    (p.0 + (q.0 - p.0) * t, p.1 + (q.1 - p.1) * t)
}

fn dist_to_segment(p: (f64, f64), s: Segment) -> f64 {
    let (vx, vy) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let (wx, wy) = (p.0 - s.a.0, p.1 - s.a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (s.a.0 + t * vx - p.0, s.a.1 + t * vy - p.1);
    (cx * cx + cy * cy).sqrt()
}

/// Renders `sentence` as one clip; each word's glyph is keyed by its index
/// in `vocab`. `seed` fixes the sensor noise.
pub fn render_clip<S: AsRef<str>>(
    sentence: &[S],
    vocab: &[String],
    profile: &SpeakerProfile,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<VideoClip> {
    if sentence.is_empty() {
        return Err(Error::Empty("sentence".into()));
    }
    let word_indices = sentence
        .iter()
        .map(|w| {
            vocab
                .iter()
                .position(|v| v == w.as_ref())
                .ok_or_else(|| Error::UnknownWord(w.as_ref().to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    if cfg.height == 0 || cfg.width == 0 || cfg.base_frames == 0 {
        return Err(Error::Config("render geometry must be non-empty".into()));
    }
    let (h, w) = (cfg.height, cfg.width);
    let per_word = frames_per_word(cfg.base_frames, profile.speed);
    let t = per_word * word_indices.len();
    let mut frames = vec![0u8; t * h * w];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, profile.noise_sigma.max(1e-9)).expect("finite sigma");
    let radius = profile.thickness as f64 / 2.0;
    let (dx, dy) = (profile.offset.0 as f64, profile.offset.1 as f64);
    let span_x = (w as f64 - 4.0).max(1.0);
    let span_y = (h as f64 - 4.0).max(1.0);
    let to_px = |p: (f64, f64)| (2.0 + p.0 * span_x + dx, 2.0 + p.1 * span_y + dy);
    let mut fi = 0;
    for &word in &word_indices {
        let strokes = glyph(word);
        for k in 0..per_word {
            let alpha = k as f64 / (per_word - 1) as f64;
            let segs: Vec<Segment> = strokes
                .iter()
                .map(|(s, e)| Segment {
                    a: to_px(lerp(s.a, e.a, alpha)),
                    b: to_px(lerp(s.b, e.b, alpha)),
                })
                .collect();
            let frame = &mut frames[fi * h * w..(fi + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let p = (x as f64 + 0.5, y as f64 + 0.5);
                    let cov = segs
                        .iter()
                        .map(|s| (radius + 0.5 - dist_to_segment(p, *s)).clamp(0.0, 1.0))
                        .fold(0.0, f64::max);
                    let v = BACKGROUND + profile.contrast * INK * cov + noise.sample(&mut rng);
                    frame[y * w + x] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
            fi += 1;
        }
    }
    VideoClip::new(frames, t, h, w, 1, cfg.frame_rate)
}
