"""Exercises the wordseg extension end to end on a small synthetic corpus.

Build first:  maturin develop -m crates/py/Cargo.toml --release
"""
import math
import sys
import tempfile
from pathlib import Path

import wordseg


def check(name, ok):
    print(("PASS " if ok else "FAIL ") + name)
    return ok


def main():
    results = []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)

        rows = [[1.0, 0.0]] * 4 + [[0.0, 1.0]] * 4
        m = wordseg.FeatureMatrix("u1", rows, 50.0)
        m.write(tmp / "u1.feat")
        back = wordseg.FeatureMatrix.read(tmp / "u1.feat")
        results.append(check("feature round trip", back.rows() == m.rows() and back.frame_rate_hz == 50.0))

        curve = wordseg.dissimilarity_curve(m)
        results.append(check("curve spike", curve.index(max(curve)) == 3 and len(curve) == 7))
        results.append(check("smooth window 1", wordseg.smooth(curve, 1) == curve))
        results.append(check("peaks", wordseg.find_peaks([0, 1, 0, 2, 2, 0]) == [(1, 1.0), (3, 2.0)]))
        results.append(check("prominence segment", wordseg.prominence_segment(m, 1, 0.5) == [4, 8]))

        z = wordseg.embed_mean(m, 0, 4)
        results.append(check("embedding unit norm", math.isclose(sum(v * v for v in z), 1.0)))

        model = wordseg.kmeans([[0.0], [0.1], [5.0], [5.1]], 2, seed=0, n_init=4)
        results.append(check("kmeans", math.isclose(model.inertia, 0.01) and model.k == 2))

        model = wordseg.ClusterModel([[1.0, 0.0], [0.0, 1.0]])
        bounds, cost, fallback = wordseg.viterbi(m, [2, 4, 6, 8], model, 1, 4)
        results.append(check("viterbi", bounds == [4, 8] and cost < 1e-9 and fallback == "none"))

        align = "u1 0.0 0.08 a\nu1 0.08 0.16 b\n"
        s = wordseg.boundary_score([("u1", [4, 8])], align, 0.02, 50.0)
        results.append(check("boundary score", s["f1"] == 100.0 and s["r_value"] == 100.0))
        t = wordseg.token_score([("u1", [4, 8])], align, 0.02, 50.0)
        results.append(check("token score", t["f1"] == 100.0))
        results.append(check("ned", wordseg.normalized_edit_distance(["a", "b"], ["a", "c"]) == 0.5))

        manifest = wordseg.synth(tmp / "corpus", seed=3, n_utterances=30, allow_adjacent_repeats=False)
        out = wordseg.run_eskmeans(
            manifest=manifest,
            output_dir=tmp / "es",
            k=20,
            seed=3,
            candidates="file",
            candidate_file=tmp / "corpus" / "candidates.txt",
        )
        report = wordseg.evaluate(manifest, out / "boundaries.txt", out / "classes.txt")
        b = report["boundary"]
        print(f"es-kmeans+ P {b['precision']:.1f} R {b['recall']:.1f} F1 {b['f1']:.1f}")
        results.append(check("es-kmeans+ on synthetic", b["precision"] > 80.0 and report["lexicon"] is not None))

        out = wordseg.run_promseg_clus(manifest=manifest, output_dir=tmp / "bu", k=20, seed=3)
        report = wordseg.evaluate(manifest, out / "boundaries.txt", out / "classes.txt")
        results.append(check("bottom-up runs", (out / "classes.txt").is_file() and "token" in report))

        try:
            wordseg.FeatureMatrix.read(tmp / "missing.feat")
            results.append(check("missing file raises", False))
        except OSError:
            results.append(check("missing file raises", True))

    return 0 if all(results) else 1


if __name__ == "__main__":
    sys.exit(main())
