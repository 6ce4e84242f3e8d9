//! Synthetic multi-speaker corpus with known generative factors.
//!
//! Each utterance is a `T × F` frame matrix
//!
//! ```text
//! frames[t] = G_speaker · voice + G_content(content)[t] + noise[t]
//! ```
//!
//! where `G_speaker` (`F × V`) and the per-content temporal patterns are
//! random maps frozen by the corpus seed, `voice ~ N(0, I_V)` is drawn once
//! per speaker and `noise ~ N(0, σ²)` per element. Content patterns are
//! centred over time, so the speaker and content contributions live in
//! orthogonal subspaces of the flattened frame space.
//!
//! Randomness is split into substreams: one for the maps and one per
//! speaker (indexed by speaker id), each derived from the corpus seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::Matrix;
use crate::seeding::{rng_from, tags};

pub const MANIFEST_FILE: &str = "corpus.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub voice_dim: usize,
    pub n_contents: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    /// Per-feature standard deviation of the speaker term.
    pub speaker_scale: f64,
    /// Element standard deviation of the content patterns (before centring).
    pub content_scale: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 64,
            utts_per_speaker: 20,
            voice_dim: 8,
            n_contents: 20,
            frames: 40,
            feature_dim: 32,
            noise_std: 0.1,
            speaker_scale: 1.0,
            content_scale: 0.5,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 4 {
            return Err(Error::Config(format!(
                "n_speakers must be at least 4, got {}",
                self.n_speakers
            )));
        }
        if self.utts_per_speaker < 2 {
            return Err(Error::Config(format!(
                "utts_per_speaker must be at least 2 to form positive pairs, got {}",
                self.utts_per_speaker
            )));
        }
        for (name, v) in [
            ("voice_dim", self.voice_dim),
            ("n_contents", self.n_contents),
            ("frames", self.frames),
            ("feature_dim", self.feature_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("speaker_scale", self.speaker_scale),
            ("content_scale", self.content_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerGroundTruth {
    pub speaker_id: u32,
    pub voice_params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub speaker_id: u32,
    pub content_id: u32,
    /// Occurrence number of this (speaker, content) pair.
    pub instance: u32,
    pub frames: Matrix<f64>,
}

/// The frozen linear maps that generated the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMaps {
    /// `F × V`.
    pub speaker_map: Matrix<f64>,
    /// One `T × F` pattern per content id, zero mean over time.
    pub content_patterns: Vec<Matrix<f64>>,
}

impl GeneratorMaps {
    /// The stacked map `[G_speaker broadcast over time | G_content]` acting on
    /// `(voice, one_hot(content))`, as a `(T·F) × (V + C)` matrix.
    pub fn stacked(&self) -> Matrix<f64> {
        let (f, v) = self.speaker_map.shape();
        let t = self.content_patterns.first().map_or(0, Matrix::rows);
        let c = self.content_patterns.len();
        Matrix::from_fn(t * f, v + c, |row, col| {
            let (ti, fi) = (row / f, row % f);
            if col < v {
                self.speaker_map.get(fi, col)
            } else {
                self.content_patterns[col - v].get(ti, fi)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerSplit {
    pub train: Vec<u32>,
    pub held_out: Vec<u32>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub maps: GeneratorMaps,
    pub speakers: Vec<SpeakerGroundTruth>,
    pub utterances: Vec<Utterance>,
    pub split: Option<SpeakerSplit>,
}

fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| {
        let x: f64 = StandardNormal.sample(rng);
        std * x
    })
}

/// Generates a corpus. Deterministic in `config` (including its seed).
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let CorpusConfig {
        n_speakers,
        utts_per_speaker,
        voice_dim,
        n_contents,
        frames,
        feature_dim,
        noise_std,
        ..
    } = *config;

    let mut map_rng = rng_from(config.seed, &[tags::CORPUS_MAPS]);
    let speaker_map = normal_matrix(
        feature_dim,
        voice_dim,
        config.speaker_scale / (voice_dim as f64).sqrt(),
        &mut map_rng,
    );
    let content_patterns = (0..n_contents)
        .map(|_| {
            let mut p = normal_matrix(frames, feature_dim, config.content_scale, &mut map_rng);
            let mean = p.mean_rows();
            for t in 0..frames {
                for (x, m) in p.row_mut(t).iter_mut().zip(&mean) {
                    *x -= m;
                }
            }
            p
        })
        .collect::<Vec<_>>();
    let maps = GeneratorMaps {
        speaker_map,
        content_patterns,
    };

    let mut speakers = Vec::with_capacity(n_speakers);
    let mut utterances = Vec::with_capacity(n_speakers * utts_per_speaker);
    for sid in 0..n_speakers as u32 {
        let mut rng = rng_from(config.seed, &[tags::CORPUS_SPEAKER, u64::from(sid)]);
        let voice: Vec<f64> = (0..voice_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let offset = maps.speaker_map.matvec(&voice)?;
        let mut seen: BTreeMap<u32, u32> = BTreeMap::new();
        for _ in 0..utts_per_speaker {
            let content_id = rng.random_range(0..n_contents as u32);
            let instance = seen.entry(content_id).or_insert(0);
            let pattern = &maps.content_patterns[content_id as usize];
            let frames_m = Matrix::from_fn(frames, feature_dim, |t, f| {
                let n: f64 = StandardNormal.sample(&mut rng);
                offset[f] + pattern.get(t, f) + noise_std * n
            });
            utterances.push(Utterance {
                speaker_id: sid,
                content_id,
                instance: *instance,
                frames: frames_m,
            });
            *instance += 1;
        }
        speakers.push(SpeakerGroundTruth {
            speaker_id: sid,
            voice_params: voice,
        });
    }

    Ok(Corpus {
        config: config.clone(),
        maps,
        speakers,
        utterances,
        split: None,
    })
}

/// Partitions speakers into train and held-out sets.
pub fn split_speakers(corpus: &Corpus, held_out_fraction: f64, seed: u64) -> Result<Corpus> {
    if !(held_out_fraction > 0.0 && held_out_fraction < 0.5) {
        return Err(Error::Config(format!(
            "held_out_fraction must lie in (0, 0.5), got {held_out_fraction}"
        )));
    }
    let n = corpus.speakers.len();
    let n_held = (n as f64 * held_out_fraction).round() as usize;
    if n_held == 0 || n_held >= n {
        return Err(Error::Config(format!(
            "cannot split {n} speakers with held-out fraction {held_out_fraction}"
        )));
    }
    let mut ids: Vec<u32> = corpus.speakers.iter().map(|s| s.speaker_id).collect();
    ids.shuffle(&mut rng_from(seed, &[tags::SPLIT]));
    let mut held_out = ids[..n_held].to_vec();
    let mut train = ids[n_held..].to_vec();
    held_out.sort_unstable();
    train.sort_unstable();
    let mut out = corpus.clone();
    out.split = Some(SpeakerSplit { train, held_out, seed });
    Ok(out)
}

impl Corpus {
    pub fn frames_shape(&self) -> (usize, usize) {
        (self.config.frames, self.config.feature_dim)
    }

    /// Train speaker ids; every speaker when no split has been made.
    pub fn train_speakers(&self) -> Vec<u32> {
        match &self.split {
            Some(s) => s.train.clone(),
            None => self.speakers.iter().map(|s| s.speaker_id).collect(),
        }
    }

    pub fn held_out_speakers(&self) -> Vec<u32> {
        self.split.as_ref().map(|s| s.held_out.clone()).unwrap_or_default()
    }

    pub fn is_train_speaker(&self, speaker_id: u32) -> bool {
        match &self.split {
            Some(s) => s.train.binary_search(&speaker_id).is_ok(),
            None => true,
        }
    }

    /// Utterance indices grouped by speaker, restricted to `speakers`.
    pub fn utterances_by_speaker(&self, speakers: &[u32]) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = speakers.iter().map(|&s| (s, Vec::new())).collect();
        for (i, u) in self.utterances.iter().enumerate() {
            if let Some(v) = map.get_mut(&u.speaker_id) {
                v.push(i);
            }
        }
        map
    }

    pub fn train_utterances(&self) -> Vec<usize> {
        (0..self.utterances.len())
            .filter(|&i| self.is_train_speaker(self.utterances[i].speaker_id))
            .collect()
    }

    pub fn held_out_utterances(&self) -> Vec<usize> {
        (0..self.utterances.len())
            .filter(|&i| !self.is_train_speaker(self.utterances[i].speaker_id))
            .collect()
    }

    pub fn voice_params(&self, speaker_id: u32) -> Option<&[f64]> {
        self.speakers
            .iter()
            .find(|s| s.speaker_id == speaker_id)
            .map(|s| s.voice_params.as_slice())
    }
}

// ---------------------------------------------------------------------------
// On-disk format

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: CorpusConfig,
    maps: GeneratorMaps,
    speakers: Vec<SpeakerGroundTruth>,
    utterances: Vec<UtteranceRecord>,
    split: Option<SpeakerSplit>,
}

#[derive(Debug, Serialize, Deserialize)]
struct UtteranceRecord {
    index: usize,
    speaker_id: u32,
    content_id: u32,
    instance: u32,
    file: String,
}

fn frame_file_name(index: usize) -> String {
    format!("frames/utt_{index:06}.bin")
}

/// Writes `T`, `F` as little-endian `u32` followed by the row-major `f64` data.
pub fn write_frames(path: &Path, frames: &Matrix<f64>) -> Result<()> {
    let (t, f) = frames.shape();
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(
        &u32::try_from(t)
            .map_err(|_| Error::Format("too many frames".into()))?
            .to_le_bytes(),
    )?;
    w.write_all(
        &u32::try_from(f)
            .map_err(|_| Error::Format("feature dim too large".into()))?
            .to_le_bytes(),
    )?;
    for x in frames.as_slice() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_frames(path: &Path) -> Result<Matrix<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::Format(format!("{}: truncated header", path.display())));
    }
    let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != t * f * 8 {
        return Err(Error::Format(format!(
            "{}: expected {} values for {t}x{f}, found {} bytes",
            path.display(),
            t * f,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::new(t, f, data)
}

impl Corpus {
    /// Writes `corpus.json` plus one binary frame file per utterance.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("frames"))?;
        let mut records = Vec::with_capacity(self.utterances.len());
        for (index, u) in self.utterances.iter().enumerate() {
            let file = frame_file_name(index);
            write_frames(&dir.join(&file), &u.frames)?;
            records.push(UtteranceRecord {
                index,
                speaker_id: u.speaker_id,
                content_id: u.content_id,
                instance: u.instance,
                file,
            });
        }
        let manifest = Manifest {
            format_version: MANIFEST_VERSION,
            config: self.config.clone(),
            maps: self.maps.clone(),
            speakers: self.speakers.clone(),
            utterances: records,
            split: self.split.clone(),
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    /// Loads a corpus directory and validates every frame file against the manifest.
    pub fn load(dir: &Path) -> Result<Corpus> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported corpus format_version {}",
                manifest.format_version
            )));
        }
        manifest.config.validate()?;
        let shape = (manifest.config.frames, manifest.config.feature_dim);
        let mut utterances = Vec::with_capacity(manifest.utterances.len());
        for (i, r) in manifest.utterances.iter().enumerate() {
            if r.index != i {
                return Err(Error::Format(format!("utterance {i} listed with index {}", r.index)));
            }
            if r.content_id as usize >= manifest.config.n_contents
                || !manifest.speakers.iter().any(|s| s.speaker_id == r.speaker_id)
            {
                return Err(Error::Format(format!("utterance {i} has unknown speaker or content")));
            }
            let frames = read_frames(&dir.join(&r.file))?;
            if frames.shape() != shape {
                return Err(Error::shape("Corpus::load", frames.shape(), shape));
            }
            utterances.push(Utterance {
                speaker_id: r.speaker_id,
                content_id: r.content_id,
                instance: r.instance,
                frames,
            });
        }
        Ok(Corpus {
            config: manifest.config,
            maps: manifest.maps,
            speakers: manifest.speakers,
            utterances,
            split: manifest.split,
        })
    }
}
