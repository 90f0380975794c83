//! Segment-frame selection, face-embedding extraction and identity
//! clustering.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};

use super::VideoRecord;
use crate::error::{Error, Result};
use crate::params::decode_f32_le;

/// Cosine similarity at or above which a video joins a cluster.
pub const DEFAULT_THRESHOLD: f64 = 0.7;
const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentFrames {
    pub indices: [usize; 3],
    /// Set when the clip was too short for three segments and one frame was
    /// used three times.
    pub fallback: bool,
}

/// Midpoint frame of each third of a `t_frames`-long clip.
pub fn segment_frames(t_frames: usize) -> SegmentFrames {
    if t_frames < 3 {
        return SegmentFrames {
            indices: [0; 3],
            fallback: true,
        };
    }
    let bound = |i: usize| i * t_frames / 3;
    SegmentFrames {
        indices: [0, 1, 2].map(|i| (bound(i) + bound(i + 1)) / 2),
        fallback: false,
    }
}

/// Face image → unit-norm embedding. The image is identified by its record
/// and frame index; real providers would decode and crop the frame.
pub trait EmbeddingProvider: Sync {
    fn dim(&self) -> usize;
    /// Identifies the provider in cache sidecars.
    fn tag(&self) -> String;
    fn embed(&self, record: &VideoRecord, frame: usize) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEmbeddings {
    pub id: String,
    pub segments: Vec<Vec<f64>>,
    pub fallback: bool,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn normalized(v: &[f64]) -> Vec<f64> {
    let n = l2_norm(v);
    v.iter().map(|x| x / n).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (l2_norm(a) * l2_norm(b))
}

fn check_unit(id: &str, v: &[f64]) -> Result<()> {
    let norm = l2_norm(v);
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::NonUnitEmbedding { id: id.to_string(), norm });
    }
    Ok(())
}

/// Embeds the three segment frames of every record, `workers` records at a
/// time. Output order follows `records`.
pub fn extract_embeddings(
    records: &[VideoRecord],
    provider: &dyn EmbeddingProvider,
    workers: usize,
) -> Result<Vec<VideoEmbeddings>> {
    let one = |r: &VideoRecord| -> Result<VideoEmbeddings> {
        let seg = segment_frames(r.frames());
        let segments = seg
            .indices
            .iter()
            .map(|&f| {
                let e = provider.embed(r, f)?;
                check_unit(&r.id, &e)?;
                Ok(e)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VideoEmbeddings {
            id: r.id.clone(),
            segments,
            fallback: seg.fallback,
        })
    };
    let workers = workers.max(1);
    if workers == 1 {
        return records.iter().map(one).collect();
    }
    let chunk = records.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(records.len());
        for h in handles {
            out.extend(h.join().expect("embedding worker panicked")?);
        }
        Ok(out)
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentityIndex {
    /// Cluster id → member video ids, in insertion order.
    pub clusters: BTreeMap<usize, Vec<String>>,
    /// Unit-norm centroid per cluster.
    pub centroids: BTreeMap<usize, Vec<f64>>,
    /// Video id → its three segment embeddings.
    pub segments: BTreeMap<String, Vec<Vec<f64>>>,
    pub assignment: BTreeMap<String, usize>,
}

impl IdentityIndex {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Cluster of each video id in `ids`, in order.
    pub fn labels(&self, ids: &[String]) -> Vec<usize> {
        ids.iter().map(|id| self.assignment[id]).collect()
    }
}

/// Single sequential pass: each video's identity vector (the renormalized
/// mean of its segment embeddings) joins the most similar cluster whose
/// centroid is within `threshold`, else opens a new cluster. Centroids are
/// renormalized running sums of member identity vectors.
pub fn identity_cluster(videos: &[VideoEmbeddings], threshold: f64) -> Result<IdentityIndex> {
    let mut index = IdentityIndex::default();
    let mut sums: Vec<Vec<f64>> = Vec::new();
    for v in videos {
        if v.segments.len() != 3 {
            return Err(Error::Format {
                what: format!("embeddings of {}", v.id),
                detail: format!("expected 3 segment embeddings, found {}", v.segments.len()),
            });
        }
        for s in &v.segments {
            check_unit(&v.id, s)?;
        }
        if index.segments.contains_key(&v.id) {
            return Err(Error::Config(format!("video {} listed twice", v.id)));
        }
        let dim = v.segments[0].len();
        let mut mean = vec![0.0; dim];
        for s in &v.segments {
            if s.len() != dim {
                return Err(Error::shape(&v.id, dim, s.len()));
            }
            for (m, x) in mean.iter_mut().zip(s) {
                *m += x;
            }
        }
        let ident = normalized(&mean);
        let best = index
            .centroids
            .iter()
            .map(|(&c, cen)| (c, cosine(&ident, cen)))
            .filter(|&(_, sim)| sim >= threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        let cluster = match best {
            Some((c, _)) => c,
            None => {
                let c = sums.len();
                sums.push(vec![0.0; dim]);
                index.clusters.insert(c, Vec::new());
                c
            }
        };
        for (s, x) in sums[cluster].iter_mut().zip(&ident) {
            *s += x;
        }
        index.centroids.insert(cluster, normalized(&sums[cluster]));
        index.clusters.get_mut(&cluster).expect("cluster exists").push(v.id.clone());
        index.segments.insert(v.id.clone(), v.segments.clone());
        index.assignment.insert(v.id.clone(), cluster);
    }
    Ok(index)
}

/// Fraction of items whose predicted cluster maps to their true label under
/// the best one-to-one matching of clusters to labels.
pub fn clustering_accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len(), "label vectors differ in length");
    if predicted.is_empty() {
        return 1.0;
    }
    let relabel = |xs: &[usize]| {
        let mut ids = BTreeMap::new();
        let v: Vec<usize> = xs
            .iter()
            .map(|x| {
                let n = ids.len();
                *ids.entry(*x).or_insert(n)
            })
            .collect();
        (v, ids.len())
    };
    let (p, np) = relabel(predicted);
    let (t, nt) = relabel(truth);
    let n = np.max(nt);
    let mut weights = Matrix::new(n, n, 0i64);
    for (a, b) in p.iter().zip(&t) {
        weights[(*a, *b)] += 1;
    }
    let (matched, _) = kuhn_munkres(&weights);
    matched as f64 / predicted.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityMatch {
    pub a: usize,
    pub b: usize,
    pub similarity: f64,
}

/// Centroid pairs across two indexes with cosine ≥ `threshold`, each cluster
/// used at most once; the most similar pairs are taken first.
pub fn cross_corpus_overlap(a: &IdentityIndex, b: &IdentityIndex, threshold: f64) -> Vec<IdentityMatch> {
    let mut cand: Vec<IdentityMatch> = Vec::new();
    for (&ia, ca) in &a.centroids {
        for (&ib, cb) in &b.centroids {
            let similarity = cosine(ca, cb);
            if similarity >= threshold {
                cand.push(IdentityMatch { a: ia, b: ib, similarity });
            }
        }
    }
    cand.sort_by(|x, y| y.similarity.total_cmp(&x.similarity).then((x.a, x.b).cmp(&(y.a, y.b))));
    let (mut used_a, mut used_b) = (Vec::new(), Vec::new());
    let mut out = Vec::new();
    for m in cand {
        if !used_a.contains(&m.a) && !used_b.contains(&m.b) {
            used_a.push(m.a);
            used_b.push(m.b);
            out.push(m);
        }
    }
    out
}

/// Per-record embedding blobs (little-endian `f32`, segments concatenated)
/// plus one `cache.json` sidecar naming the dimension and provider. A cache
/// written by a different provider or dimension is ignored.
pub struct EmbeddingCache {
    dir: PathBuf,
    dim: usize,
    tag: String,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct CacheSidecar {
    dim: usize,
    provider_tag: String,
}

impl EmbeddingCache {
    pub fn open(dir: &Path, provider: &dyn EmbeddingProvider) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let sidecar = CacheSidecar {
            dim: provider.dim(),
            provider_tag: provider.tag(),
        };
        let path = dir.join("cache.json");
        let stale = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str::<CacheSidecar>(&text).map_or(true, |s| s != sidecar),
            Err(_) => true,
        };
        if stale {
            for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.flatten() {
                if entry.path().extension().is_some_and(|x| x == "emb") {
                    fs::remove_file(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
                }
            }
            fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            dim: sidecar.dim,
            tag: sidecar.provider_tag,
        })
    }

    pub fn provider_tag(&self) -> &str {
        &self.tag
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.emb"))
    }

    pub fn get(&self, id: &str) -> Option<VideoEmbeddings> {
        let bytes = fs::read(self.path(id)).ok()?;
        let flat = decode_f32_le(&bytes);
        if flat.len() != 3 * self.dim {
            return None;
        }
        Some(VideoEmbeddings {
            id: id.to_string(),
            segments: flat.chunks(self.dim).map(normalized).collect(),
            fallback: false,
        })
    }

    pub fn put(&self, v: &VideoEmbeddings) -> Result<()> {
        let mut bytes = Vec::with_capacity(3 * self.dim * 4);
        for s in &v.segments {
            if s.len() != self.dim {
                return Err(Error::shape(&v.id, self.dim, s.len()));
            }
            for x in s {
                bytes.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        let path = self.path(&v.id);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    /// Cached embeddings where present, freshly extracted (and stored)
    /// otherwise.
    pub fn extract(
        &self,
        records: &[VideoRecord],
        provider: &dyn EmbeddingProvider,
        workers: usize,
    ) -> Result<Vec<VideoEmbeddings>> {
        let mut out: Vec<Option<VideoEmbeddings>> = records
            .iter()
            .map(|r| {
                self.get(&r.id).map(|mut v| {
                    v.fallback = segment_frames(r.frames()).fallback;
                    v
                })
            })
            .collect();
        let todo: Vec<VideoRecord> = records
            .iter()
            .zip(&out)
            .filter(|(_, v)| v.is_none())
            .map(|(r, _)| r.clone())
            .collect();
        let mut fresh = extract_embeddings(&todo, provider, workers)?.into_iter();
        for slot in out.iter_mut().filter(|v| v.is_none()) {
            let v = fresh.next().expect("one embedding per missing record");
            self.put(&v)?;
            *slot = Some(v);
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(id: &str, v: Vec<f64>) -> VideoEmbeddings {
        VideoEmbeddings {
            id: id.into(),
            segments: vec![v.clone(), v.clone(), v],
            fallback: false,
        }
    }

    #[test]
    fn segment_midpoints() {
        assert_eq!(segment_frames(9).indices, [1, 4, 7]);
        assert_eq!(segment_frames(3).indices, [0, 1, 2]);
        let short = segment_frames(2);
        assert_eq!(short.indices, [0, 0, 0]);
        assert!(short.fallback && !segment_frames(3).fallback);
    }

    #[test]
    fn identical_and_orthogonal() {
        let idx = identity_cluster(&[video("a", vec![1.0, 0.0]), video("b", vec![1.0, 0.0])], 0.7).unwrap();
        assert_eq!(idx.len(), 1);
        assert!((cosine(&idx.centroids[&0], &[1.0, 0.0]) - 1.0).abs() < 1e-12);
        let idx = identity_cluster(&[video("a", vec![1.0, 0.0]), video("b", vec![0.0, 1.0])], 0.7).unwrap();
        assert_eq!(idx.len(), 2);
    }

    #[test]
    fn non_unit_rejected() {
        let err = identity_cluster(&[video("bad", vec![1.0, 1.0])], 0.7).unwrap_err();
        assert!(matches!(err, Error::NonUnitEmbedding { ref id, .. } if id == "bad"));
    }

    #[test]
    fn accuracy_is_label_invariant() {
        assert_eq!(clustering_accuracy(&[5, 5, 9, 9], &[0, 0, 1, 1]), 1.0);
        assert_eq!(clustering_accuracy(&[0, 0, 0, 1], &[1, 1, 0, 0]), 0.75);
        assert_eq!(clustering_accuracy(&[0, 1, 2], &[0, 0, 0]), 1.0 / 3.0);
    }
}
