mod common;

use std::collections::BTreeMap;
use std::process::Command;

use wordseg_core::cluster::{kmeans_fit, ClusterModel, KMeansConfig};
use wordseg_core::eskmeans::{viterbi_segment, EsKmeansConfig, Fallback};
use wordseg_core::evalmetrics::boundary_score;
use wordseg_core::pipeline::{run_eskmeans_with_candidates, run_eval, Corpus, PipelineConfig};
use wordseg_core::promseg::Segmentation;
use wordseg_core::segembed::embed_mean;
use wordseg_core::synthcorpus::{generate, SynthCorpus, SynthSpec};

fn example_corpus(seed: u64) -> SynthCorpus {
    generate(&SynthSpec {
        vocab_size: 20,
        dim: 16,
        frames_per_word: (8, 8),
        words_per_utterance: (3, 6),
        noise_sigma: 0.01,
        distractor_rate: 0.5,
        n_utterances: 100,
        // a repeated word merges with its twin at no cost
        allow_adjacent_repeats: false,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

/// Centroids at the mean embedding of each generating word type.
fn generating_model(c: &SynthCorpus) -> ClusterModel {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (m, truth) in c.features.iter().zip(c.true_segmentations()) {
        let track = c.words.iter().find(|w| w.utterance_id == truth.utterance_id).unwrap();
        for ((a, b), e) in truth.segments().zip(&track.entries) {
            let w: usize = e.label[1..].parse().unwrap();
            let z = embed_mean(m, a, b).unwrap();
            let entry = sums.entry(w).or_insert_with(|| (vec![0.0; z.vector.len()], 0));
            entry.0.iter_mut().zip(&z.vector).for_each(|(s, v)| *s += v);
            entry.1 += 1;
        }
    }
    let centroids = sums
        .into_values()
        .map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    ClusterModel::from_centroids(centroids).unwrap()
}

#[test]
fn generating_segmentation_is_score_optimal() {
    let c = example_corpus(0);
    let model = generating_model(&c);
    let cfg = EsKmeansConfig { k: model.k(), ..EsKmeansConfig::default() };
    for ((m, cands), truth) in c.features.iter().zip(&c.candidates).zip(c.true_segmentations()) {
        let (_, best) = common::oracle_best_cost(m, &cands.candidates, &model, 5, 4).unwrap();
        assert_eq!(best, truth.boundaries, "{}", truth.utterance_id);
        let got = viterbi_segment(m, cands, &model, &cfg).unwrap();
        assert_eq!(got.fallback, Fallback::None);
        assert_eq!(got.segmentation, truth);
    }
}

#[test]
fn generating_solution_is_a_fixpoint() {
    let c = example_corpus(1);
    let model = generating_model(&c);
    let cfg = EsKmeansConfig { k: model.k(), ..EsKmeansConfig::default() };
    let segment = |model: &ClusterModel| -> Vec<Segmentation> {
        c.features
            .iter()
            .zip(&c.candidates)
            .map(|(m, cands)| viterbi_segment(m, cands, model, &cfg).unwrap().segmentation)
            .collect()
    };
    let first = segment(&model);
    let points: Vec<Vec<f64>> = c
        .features
        .iter()
        .zip(&first)
        .flat_map(|(m, s)| s.segments().map(|(a, b)| embed_mean(m, a, b).unwrap().vector).collect::<Vec<_>>())
        .collect();
    let refit = kmeans_fit(&points, &KMeansConfig::new(model.k(), 0), Some(&model.centroids), None).unwrap();
    let second = segment(&refit);
    assert_eq!(first, second);
    assert_eq!(first, c.true_segmentations());
}

#[test]
fn fit_from_random_start_prefers_precision() {
    let c = example_corpus(2);
    let corpus = Corpus::new(c.features.clone(), None).unwrap();
    let cfg = PipelineConfig { k: 20, seed: 2, ..PipelineConfig::default() };
    let out = run_eskmeans_with_candidates(&cfg, &corpus, c.candidates.clone()).unwrap();
    let s = boundary_score(&out.segmentations, &c.words, 0.02, 50.0).unwrap();
    let cand: Vec<Segmentation> = c.candidates.iter().cloned().map(Into::into).collect();
    let base = boundary_score(&cand, &c.words, 0.02, 50.0).unwrap();
    assert!(s.precision > base.precision + 20.0, "{} vs {}", s.precision, base.precision);
    println!("P {:.2} R {:.2} F1 {:.2}", s.precision, s.recall, s.f1);
    assert!(s.f1 >= 90.0, "F1 {}", s.f1);
}

fn parse_log(text: &str) -> Vec<(usize, String, f64)> {
    text.lines()
        .map(|line| {
            let fields: BTreeMap<&str, &str> = line.split(' ').filter_map(|kv| kv.split_once('=')).collect();
            (fields["iter"].parse().unwrap(), fields["phase"].to_owned(), fields["cost"].parse().unwrap())
        })
        .collect()
}

#[test]
fn segmentation_step_never_raises_cost() {
    for seed in 0..5 {
        let c = generate(&SynthSpec { n_utterances: 60, distractor_rate: 1.0, seed, ..SynthSpec::default() }).unwrap();
        let corpus = Corpus::new(c.features.clone(), None).unwrap();
        let mut cfg = PipelineConfig { k: 20, seed, ..PipelineConfig::default() };
        cfg.eskmeans.n_iterations = 8;
        let out = run_eskmeans_with_candidates(&cfg, &corpus, c.candidates.clone()).unwrap();
        let text: String = out.log.iter().map(|r| r.log_line() + "\n").collect();
        let log = parse_log(&text);
        assert_eq!(log.len(), 1 + 2 * 8);
        assert_eq!((log[0].0, log[0].1.as_str()), (0, "cluster"));
        // from the second round on, the previous segmentation is itself a
        // feasible DP path under the same centroids
        for w in log.windows(2).skip(2) {
            if w[1].1 == "seg" {
                assert!(w[1].2 <= w[0].2 * (1.0 + 1e-9), "seed {seed}: {:?} -> {:?}", w[0], w[1]);
            }
        }
    }
}

#[test]
fn cli_matches_library() {
    let c = generate(&SynthSpec { n_utterances: 20, distractor_rate: 1.0, seed: 4, ..SynthSpec::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = c.write_to_dir(dir.path()).unwrap();
    let bin = env!("CARGO_BIN_EXE_wordseg");
    let out_dir = dir.path().join("es");
    let status = Command::new(bin)
        .args(["--seed", "4", "eskmeans", "--k", "20", "--candidates", "file"])
        .arg("--manifest")
        .arg(&manifest)
        .arg("--candidate-file")
        .arg(dir.path().join("candidates.txt"))
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));

    let corpus = Corpus::new(c.features.clone(), None).unwrap();
    let cfg = PipelineConfig { manifest: manifest.clone(), k: 20, seed: 4, ..PipelineConfig::default() };
    let lib = run_eskmeans_with_candidates(&cfg, &corpus, c.candidates.clone()).unwrap();
    let written = std::fs::read_to_string(out_dir.join("boundaries.txt")).unwrap();
    assert_eq!(written, wordseg_core::corpusio::format_boundaries(&lib.segmentations));

    let eval = Command::new(bin)
        .arg("eval")
        .arg("--manifest")
        .arg(&manifest)
        .arg("--boundaries")
        .arg(out_dir.join("boundaries.txt"))
        .arg("--classes")
        .arg(out_dir.join("classes.txt"))
        .output()
        .unwrap();
    assert!(eval.status.success());
    let report = run_eval(&cfg, &out_dir.join("boundaries.txt"), Some(&out_dir.join("classes.txt"))).unwrap();
    assert_eq!(String::from_utf8(eval.stdout).unwrap().trim_end(), report.to_json_line().unwrap());
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_wordseg");
    let dir = tempfile::tempdir().unwrap();
    let missing = Command::new(bin)
        .args(["eval", "--boundaries", "b.txt", "--manifest"])
        .arg(dir.path().join("none.txt"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(3));
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "k = 0\n").unwrap();
    let invalid = Command::new(bin).arg("--config").arg(&config).args(["promseg"]).output().unwrap();
    assert_eq!(invalid.status.code(), Some(2));
    let synth = Command::new(bin)
        .args(["synth", "--utterances", "3", "--out"])
        .arg(dir.path().join("c"))
        .output()
        .unwrap();
    assert_eq!(synth.status.code(), Some(0));
    assert!(dir.path().join("c/manifest.txt").is_file());
}
