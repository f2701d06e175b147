//! Seeded synthetic corpora: word prototypes rendered as noisy constant frame
//! blocks, with exact word and phone alignments, candidate boundaries and the
//! generating class assignment.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpusio::{
    write_alignments, write_boundary_file, write_class_file, write_feature_file, AlignmentEntry,
    AlignmentTrack, ClassFile, CorpusManifest, FeatureMatrix, ManifestEntry, Tier, Token,
};
use crate::error::{Error, Result};
use crate::eskmeans::{utterance_seed, CandidateSet};
use crate::promseg::Segmentation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub dim: usize,
    /// Inclusive range of frames per word token.
    pub frames_per_word: (usize, usize),
    /// Inclusive range of word tokens per utterance.
    pub words_per_utterance: (usize, usize),
    pub n_utterances: usize,
    pub noise_sigma: f64,
    /// Distractor candidates per true interior boundary.
    pub distractor_rate: f64,
    pub allow_adjacent_repeats: bool,
    /// Size of the synthetic phone inventory words are spelled from.
    pub phone_inventory: usize,
    pub n_speakers: usize,
    pub frame_rate_hz: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            dim: 16,
            frames_per_word: (8, 8),
            words_per_utterance: (3, 6),
            n_utterances: 100,
            noise_sigma: 0.01,
            distractor_rate: 0.5,
            allow_adjacent_repeats: true,
            phone_inventory: 12,
            n_speakers: 4,
            frame_rate_hz: 50.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Parameter(msg.into()));
        if self.vocab_size == 0 {
            return bad("vocab_size must be >= 1");
        }
        if self.vocab_size == 1 && !self.allow_adjacent_repeats && self.words_per_utterance.1 > 1 {
            return bad("a one-word vocabulary needs adjacent repeats for multi-word utterances");
        }
        if self.dim == 0 {
            return bad("dim must be >= 1");
        }
        let (f0, f1) = self.frames_per_word;
        let (w0, w1) = self.words_per_utterance;
        if f0 == 0 || f0 > f1 {
            return bad("frames_per_word must be a non-empty range of positive lengths");
        }
        if w0 == 0 || w0 > w1 {
            return bad("words_per_utterance must be a non-empty range of positive counts");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be >= 0");
        }
        if !(self.distractor_rate >= 0.0 && self.distractor_rate.is_finite()) {
            return bad("distractor_rate must be >= 0");
        }
        if self.phone_inventory == 0 || self.n_speakers == 0 {
            return bad("phone_inventory and n_speakers must be >= 1");
        }
        if !(self.frame_rate_hz > 0.0) {
            return bad("frame_rate_hz must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub prototypes: Vec<Vec<f32>>,
    /// Phone spelling of each word type.
    pub spellings: Vec<Vec<usize>>,
    pub features: Vec<FeatureMatrix>,
    pub words: Vec<AlignmentTrack>,
    pub phones: Vec<AlignmentTrack>,
    pub candidates: Vec<CandidateSet>,
    /// Generating word type of every token.
    pub classes: ClassFile,
    pub speakers: Vec<(String, String)>,
}

struct Utterance {
    features: FeatureMatrix,
    words: AlignmentTrack,
    phones: AlignmentTrack,
    candidates: CandidateSet,
    tokens: Vec<(usize, Token)>,
}

pub fn utterance_name(index: usize) -> String {
    format!("utt{index:05}")
}

fn random_unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

fn generate_utterance(
    spec: &SynthSpec,
    prototypes: &[Vec<f32>],
    spellings: &[Vec<usize>],
    index: usize,
) -> Result<Utterance> {
    let id = utterance_name(index);
    let mut rng = ChaCha8Rng::seed_from_u64(utterance_seed(spec.seed, index));
    let rate = spec.frame_rate_hz as f64;
    let n_words = rng.random_range(spec.words_per_utterance.0..=spec.words_per_utterance.1);
    let mut types: Vec<usize> = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        let w = loop {
            let w = rng.random_range(0..spec.vocab_size);
            if spec.allow_adjacent_repeats || types.last() != Some(&w) {
                break w;
            }
        };
        types.push(w);
    }
    let lengths: Vec<usize> = types
        .iter()
        .map(|_| rng.random_range(spec.frames_per_word.0..=spec.frames_per_word.1))
        .collect();
    let n_frames: usize = lengths.iter().sum();

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut data = Vec::with_capacity(n_frames * spec.dim);
    let mut word_entries = Vec::with_capacity(n_words);
    let mut phone_entries = Vec::new();
    let mut tokens = Vec::with_capacity(n_words);
    let mut ends = Vec::with_capacity(n_words);
    let mut start = 0;
    for (&w, &len) in types.iter().zip(&lengths) {
        for _ in 0..len {
            for &p in &prototypes[w] {
                let x = if spec.noise_sigma > 0.0 {
                    p as f64 + noise.sample(&mut rng)
                } else {
                    p as f64
                };
                data.push(x as f32);
            }
        }
        let end = start + len;
        let (s, e) = (start as f64 / rate, end as f64 / rate);
        word_entries.push(AlignmentEntry {
            start_s: s,
            end_s: e,
            label: format!("w{w}"),
        });
        let spelling = &spellings[w];
        let n_ph = spelling.len().min(len);
        for (k, ph) in spelling.iter().take(n_ph).enumerate() {
            let a = start + k * len / n_ph;
            let b = start + (k + 1) * len / n_ph;
            phone_entries.push(AlignmentEntry {
                start_s: a as f64 / rate,
                end_s: b as f64 / rate,
                label: format!("p{ph}"),
            });
        }
        tokens.push((w, Token::new(id.clone(), s, e)));
        ends.push(end);
        start = end;
    }

    let interior = &ends[..ends.len() - 1];
    let free: Vec<usize> = (1..n_frames).filter(|t| !interior.contains(t)).collect();
    let n_distractors = ((spec.distractor_rate * interior.len() as f64).round() as usize).min(free.len());
    let mut cands: Vec<usize> = sample(&mut rng, free.len(), n_distractors)
        .into_iter()
        .map(|i| free[i])
        .chain(ends.iter().copied())
        .collect();
    cands.sort_unstable();

    Ok(Utterance {
        features: FeatureMatrix::new(id.clone(), spec.frame_rate_hz, n_frames, spec.dim, data)?,
        words: AlignmentTrack::new(id.clone(), Tier::Word, word_entries)?,
        phones: AlignmentTrack::new(id.clone(), Tier::Phone, phone_entries)?,
        candidates: CandidateSet::new(id, cands)?,
        tokens,
    })
}

/// Builds the corpus; identical specs give bit-identical output.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<f32>> = (0..spec.vocab_size)
        .map(|_| random_unit_vector(&mut rng, spec.dim))
        .collect();
    let spellings: Vec<Vec<usize>> = (0..spec.vocab_size)
        .map(|_| {
            let n = rng.random_range(2..=3);
            (0..n).map(|_| rng.random_range(0..spec.phone_inventory)).collect()
        })
        .collect();
    let utterances: Vec<Utterance> = (0..spec.n_utterances)
        .into_par_iter()
        .map(|i| generate_utterance(spec, &prototypes, &spellings, i))
        .collect::<Result<_>>()?;

    let mut corpus = SynthCorpus {
        spec: spec.clone(),
        prototypes,
        spellings,
        features: Vec::with_capacity(utterances.len()),
        words: Vec::with_capacity(utterances.len()),
        phones: Vec::with_capacity(utterances.len()),
        candidates: Vec::with_capacity(utterances.len()),
        classes: ClassFile::default(),
        speakers: Vec::with_capacity(utterances.len()),
    };
    for (i, u) in utterances.into_iter().enumerate() {
        corpus
            .speakers
            .push((u.features.utterance_id().to_owned(), format!("spk{}", i % spec.n_speakers)));
        for (w, t) in u.tokens {
            corpus.classes.push(w, t);
        }
        corpus.features.push(u.features);
        corpus.words.push(u.words);
        corpus.phones.push(u.phones);
        corpus.candidates.push(u.candidates);
    }
    Ok(corpus)
}

impl SynthCorpus {
    /// Word-tier segmentations in frames.
    pub fn true_segmentations(&self) -> Vec<Segmentation> {
        self.candidates
            .iter()
            .zip(&self.words)
            .map(|(c, w)| {
                let rate = self.spec.frame_rate_hz as f64;
                let b = w.entries.iter().map(|e| (e.end_s * rate).round() as usize).collect();
                Segmentation::new(c.utterance_id.clone(), b).expect("generated boundaries are valid")
            })
            .collect()
    }

    pub fn total_duration_s(&self) -> f64 {
        self.features.iter().map(FeatureMatrix::duration_s).sum()
    }

    /// Writes `manifest.txt`, `features/<utt>.feat`, `words.txt`,
    /// `phones.txt`, `candidates.txt`, `classes.txt` and `speakers.txt`.
    /// Returns the manifest path.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let feat_dir = dir.join("features");
        fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        self.features
            .par_iter()
            .map(|m| write_feature_file(m, feat_dir.join(format!("{}.feat", m.utterance_id()))))
            .collect::<Result<()>>()?;
        let mut manifest = CorpusManifest::new(
            self.features
                .iter()
                .map(|m| ManifestEntry {
                    utterance_id: m.utterance_id().to_owned(),
                    feature_path: PathBuf::from(format!("features/{}.feat", m.utterance_id())),
                    duration_s: m.duration_s(),
                })
                .collect(),
        )?;
        manifest.alignments.insert(Tier::Word, "words.txt".into());
        manifest.alignments.insert(Tier::Phone, "phones.txt".into());
        let manifest_path = dir.join("manifest.txt");
        manifest.write(&manifest_path)?;
        write_alignments(&self.words, dir.join("words.txt"))?;
        write_alignments(&self.phones, dir.join("phones.txt"))?;
        let cands: Vec<Segmentation> = self.candidates.iter().cloned().map(Into::into).collect();
        write_boundary_file(&cands, dir.join("candidates.txt"))?;
        write_class_file(&self.classes, dir.join("classes.txt"))?;
        let speakers: String = self
            .speakers
            .iter()
            .map(|(u, s)| format!("{u} {s}\n"))
            .collect();
        crate::corpusio::write_text(&dir.join("speakers.txt"), &speakers)?;
        Ok(manifest_path)
    }
}
