//! Segmentation and lexicon evaluation: boundary precision/recall/F1,
//! over-segmentation, R-value, token F1, NED, bitrate and the per-cluster
//! content report.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpusio::{AlignmentTrack, ClassFile, Token};
use crate::error::{Error, Result};
use crate::promseg::Segmentation;

/// Slack on time comparisons so that a boundary exactly one tolerance away
/// is not lost to rounding (e.g. one 20 ms frame against a 20 ms tolerance).
const TIME_EPS: f64 = 1e-9;

pub const DEFAULT_TOLERANCE_S: f64 = 0.02;
/// Minimum absolute overlap for a phone to count toward a token.
pub const PHONE_MIN_OVERLAP_S: f64 = 0.03;
/// Minimum overlap as a fraction of the phone's own duration.
pub const PHONE_MIN_OVERLAP_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub over_segmentation: f64,
    pub r_value: f64,
    pub n_hyp: usize,
    pub n_ref: usize,
    pub n_hits: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_hit_tokens: usize,
    pub n_hyp_tokens: usize,
    pub n_ref_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LexiconScore {
    pub ned: f64,
    pub n_pairs: usize,
    pub bitrate_bits_per_s: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

fn f_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// R-value (percent) from recall and over-segmentation, both in percent.
pub fn r_value(recall: f64, over_segmentation: f64) -> f64 {
    let (r, os) = (recall / 100.0, over_segmentation / 100.0);
    let r1 = ((1.0 - r).powi(2) + os.powi(2)).sqrt();
    let r2 = (-os + r - 1.0) / std::f64::consts::SQRT_2;
    100.0 * (1.0 - (r1.abs() + r2.abs()) / 2.0)
}

fn within(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol + TIME_EPS
}

/// Greedy one-to-one matching in hypothesis order: each hypothesis takes
/// the nearest unmatched reference within tolerance, earlier on ties.
fn count_boundary_hits(hyp: &[f64], refs: &[f64], tol: f64) -> usize {
    let mut used = vec![false; refs.len()];
    let mut hits = 0;
    for &h in hyp {
        let best = refs
            .iter()
            .enumerate()
            .filter(|&(i, &r)| !used[i] && within(h, r, tol))
            .min_by(|a, b| (a.1 - h).abs().total_cmp(&(b.1 - h).abs()).then(a.0.cmp(&b.0)));
        if let Some((i, _)) = best {
            used[i] = true;
            hits += 1;
        }
    }
    hits
}

fn index_tracks(refs: &[AlignmentTrack]) -> HashMap<&str, &AlignmentTrack> {
    refs.iter().map(|t| (t.utterance_id.as_str(), t)).collect()
}

fn lookup<'a>(
    index: &HashMap<&str, &'a AlignmentTrack>,
    utterance_id: &str,
) -> Result<&'a AlignmentTrack> {
    index.get(utterance_id).copied().ok_or_else(|| {
        Error::Validation(format!("no reference alignment for utterance {utterance_id}"))
    })
}

fn check_eval_args(tolerance_s: f64, frame_rate_hz: f64) -> Result<()> {
    if !(tolerance_s >= 0.0) {
        return Err(Error::Parameter("tolerance must be >= 0".into()));
    }
    if !(frame_rate_hz > 0.0) {
        return Err(Error::Parameter("frame rate must be positive".into()));
    }
    Ok(())
}

/// Micro-averaged boundary scores over interior boundaries only.
pub fn boundary_score(
    hyp: &[Segmentation],
    refs: &[AlignmentTrack],
    tolerance_s: f64,
    frame_rate_hz: f64,
) -> Result<BoundaryScore> {
    check_eval_args(tolerance_s, frame_rate_hz)?;
    let index = index_tracks(refs);
    let mut counts = (0, 0, 0);
    let per_utt: Vec<(usize, usize, usize)> = hyp
        .iter()
        .map(|s| {
            let track = lookup(&index, &s.utterance_id)?;
            let h: Vec<f64> = s.interior().iter().map(|&b| b as f64 / frame_rate_hz).collect();
            let r = track.interior_boundaries();
            Ok((h.len(), r.len(), count_boundary_hits(&h, &r, tolerance_s)))
        })
        .collect::<Result<_>>()?;
    for (h, r, k) in per_utt {
        counts.0 += h;
        counts.1 += r;
        counts.2 += k;
    }
    let (n_hyp, n_ref, n_hits) = counts;
    if n_ref == 0 {
        return Err(Error::UndefinedMetric("no reference boundaries".into()));
    }
    let precision = ratio(n_hits, n_hyp);
    let recall = ratio(n_hits, n_ref);
    let over_segmentation = 100.0 * (n_hyp as f64 / n_ref as f64 - 1.0);
    Ok(BoundaryScore {
        precision,
        recall,
        f1: f_score(precision, recall),
        over_segmentation,
        r_value: r_value(recall, over_segmentation),
        n_hyp,
        n_ref,
        n_hits,
    })
}

/// A hypothesized token counts only if both of its edges match the edges of
/// a single reference token; each reference token is credited once.
pub fn token_score(
    hyp: &[Segmentation],
    refs: &[AlignmentTrack],
    tolerance_s: f64,
    frame_rate_hz: f64,
) -> Result<TokenScore> {
    check_eval_args(tolerance_s, frame_rate_hz)?;
    let index = index_tracks(refs);
    let (mut n_hit, mut n_hyp, mut n_ref) = (0, 0, 0);
    for s in hyp {
        let track = lookup(&index, &s.utterance_id)?;
        let mut used = vec![false; track.entries.len()];
        for (start, end) in s.segments() {
            let (hs, he) = (start as f64 / frame_rate_hz, end as f64 / frame_rate_hz);
            let best = track
                .entries
                .iter()
                .enumerate()
                .filter(|&(i, e)| {
                    !used[i] && within(e.start_s, hs, tolerance_s) && within(e.end_s, he, tolerance_s)
                })
                .map(|(i, e)| (i, (e.start_s - hs).abs() + (e.end_s - he).abs()))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            if let Some((i, _)) = best {
                used[i] = true;
                n_hit += 1;
            }
            n_hyp += 1;
        }
        n_ref += track.entries.len();
    }
    if n_ref == 0 {
        return Err(Error::UndefinedMetric("no reference tokens".into()));
    }
    let precision = ratio(n_hit, n_hyp);
    let recall = ratio(n_hit, n_ref);
    Ok(TokenScore {
        precision,
        recall,
        f1: f_score(precision, recall),
        n_hit_tokens: n_hit,
        n_hyp_tokens: n_hyp,
        n_ref_tokens: n_ref,
    })
}

/// Levenshtein distance with unit insert, delete and substitute costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over the length of the longer sequence; 0 for two empties.
pub fn normalized_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        0.0
    } else {
        edit_distance(a, b) as f64 / longest as f64
    }
}

/// Phones covered by `[onset_s, offset_s)`: a phone counts if the overlap is
/// at least half its duration or at least 30 ms. Labels containing spaces
/// contribute one symbol per token.
pub fn transcribe(track: &AlignmentTrack, onset_s: f64, offset_s: f64) -> Vec<String> {
    track
        .entries
        .iter()
        .filter(|e| {
            let ov = e.overlap_s(onset_s, offset_s);
            ov > 0.0
                && (ov + TIME_EPS >= PHONE_MIN_OVERLAP_FRACTION * e.duration_s()
                    || ov + TIME_EPS >= PHONE_MIN_OVERLAP_S)
        })
        .flat_map(|e| e.label.split_whitespace().map(str::to_owned))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NedMode {
    /// Mean over all within-cluster pairs of the whole lexicon.
    #[default]
    Pooled,
    /// Mean of per-cluster means, over clusters with at least one pair.
    PerCluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NedScore {
    pub ned: f64,
    pub n_pairs: usize,
}

fn transcribe_classes(
    classes: &ClassFile,
    phones: &[AlignmentTrack],
) -> Result<Vec<Vec<Vec<String>>>> {
    let index = index_tracks(phones);
    classes
        .classes
        .values()
        .map(|tokens| {
            tokens
                .iter()
                .map(|t| Ok(transcribe(lookup(&index, &t.utterance_id)?, t.onset_s, t.offset_s)))
                .collect()
        })
        .collect()
}

/// Normalized edit distance (percent) between phone transcriptions of all
/// same-cluster token pairs.
pub fn ned(classes: &ClassFile, phones: &[AlignmentTrack], mode: NedMode) -> Result<NedScore> {
    let transcripts = transcribe_classes(classes, phones)?;
    let per_cluster: Vec<(f64, usize)> = transcripts
        .par_iter()
        .map(|seqs| {
            let mut sum = 0.0;
            let mut n = 0;
            for i in 0..seqs.len() {
                for j in i + 1..seqs.len() {
                    sum += normalized_edit_distance(&seqs[i], &seqs[j]);
                    n += 1;
                }
            }
            (sum, n)
        })
        .collect();
    let n_pairs: usize = per_cluster.iter().map(|c| c.1).sum();
    if n_pairs == 0 {
        return Err(Error::UndefinedMetric(
            "NED needs at least one cluster with two tokens".into(),
        ));
    }
    let ned = match mode {
        NedMode::Pooled => per_cluster.iter().map(|c| c.0).sum::<f64>() / n_pairs as f64,
        NedMode::PerCluster => {
            let means: Vec<f64> = per_cluster
                .iter()
                .filter(|c| c.1 > 0)
                .map(|c| c.0 / c.1 as f64)
                .collect();
            means.iter().sum::<f64>() / means.len() as f64
        }
    };
    Ok(NedScore {
        ned: 100.0 * ned,
        n_pairs,
    })
}

/// `(n / duration) * H(p)` in bits per second, with `p` the empirical
/// distribution of cluster ids over tokens.
pub fn bitrate(classes: &ClassFile, total_duration_s: f64) -> Result<f64> {
    if !(total_duration_s > 0.0) {
        return Err(Error::Parameter("total duration must be positive".into()));
    }
    let n = classes.n_tokens();
    if n == 0 {
        return Ok(0.0);
    }
    let entropy: f64 = classes
        .classes
        .values()
        .filter(|t| !t.is_empty())
        .map(|t| {
            let p = t.len() as f64 / n as f64;
            p * (1.0 / p).log2()
        })
        .sum();
    Ok(n as f64 / total_duration_s * entropy)
}

pub fn lexicon_score(
    classes: &ClassFile,
    phones: &[AlignmentTrack],
    total_duration_s: f64,
    mode: NedMode,
) -> Result<LexiconScore> {
    let n = ned(classes, phones, mode)?;
    Ok(LexiconScore {
        ned: n.ned,
        n_pairs: n.n_pairs,
        bitrate_bits_per_s: bitrate(classes, total_duration_s)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub class: usize,
    pub n_tokens: usize,
    pub n_speakers: Option<usize>,
    pub mean_duration_s: f64,
    /// Ground-truth word with the longest overlap per token, most frequent first.
    pub labels: Vec<(String, usize)>,
}

/// Label of the reference interval that overlaps the token the longest;
/// earlier interval on ties, `None` without any overlap.
pub fn max_overlap_label<'a>(track: &'a AlignmentTrack, token: &Token) -> Option<&'a str> {
    let mut best: Option<(&str, f64)> = None;
    for e in &track.entries {
        let ov = e.overlap_s(token.onset_s, token.offset_s);
        if ov > 0.0 && best.is_none_or(|(_, b)| ov > b) {
            best = Some((e.label.as_str(), ov));
        }
    }
    best.map(|(l, _)| l)
}

/// Summaries of the `top_n` largest clusters (ties by lower class id).
pub fn cluster_report(
    classes: &ClassFile,
    words: &[AlignmentTrack],
    speakers: Option<&BTreeMap<String, String>>,
    top_n: usize,
) -> Vec<ClusterSummary> {
    let index = index_tracks(words);
    let mut order: Vec<(&usize, &Vec<Token>)> = classes.classes.iter().collect();
    order.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));
    order
        .into_iter()
        .take(top_n)
        .map(|(&class, tokens)| {
            let mut hist: BTreeMap<String, usize> = BTreeMap::new();
            for t in tokens {
                let label = index
                    .get(t.utterance_id.as_str())
                    .and_then(|track| max_overlap_label(track, t))
                    .unwrap_or("<none>");
                *hist.entry(label.to_owned()).or_default() += 1;
            }
            let mut labels: Vec<(String, usize)> = hist.into_iter().collect();
            labels.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let n_speakers = speakers.map(|map| {
                tokens
                    .iter()
                    .filter_map(|t| map.get(&t.utterance_id))
                    .collect::<BTreeSet<_>>()
                    .len()
            });
            let mean_duration_s = if tokens.is_empty() {
                0.0
            } else {
                tokens.iter().map(Token::duration_s).sum::<f64>() / tokens.len() as f64
            };
            ClusterSummary {
                class,
                n_tokens: tokens.len(),
                n_speakers,
                mean_duration_s,
                labels,
            }
        })
        .collect()
}

pub fn format_cluster_report(report: &[ClusterSummary]) -> String {
    let mut out = String::new();
    for c in report {
        let _ = write!(out, "Class {}: tokens={}", c.class, c.n_tokens);
        if let Some(s) = c.n_speakers {
            let _ = write!(out, " speakers={s}");
        }
        let _ = writeln!(out, " mean_duration={:.3}s", c.mean_duration_s);
        for (label, count) in &c.labels {
            let _ = writeln!(out, "  {label} {count}");
        }
    }
    out
}
