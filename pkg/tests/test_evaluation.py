import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zsfuse.backends import Backends, MockLLM
from zsfuse.baselines import MatchMetric
from zsfuse.errors import (
    EmptyMatrixError,
    EmptyPredictionsError,
    EvaluationFailedError,
    IndexOutOfRangeError,
    ManifestError,
    MissingImageError,
)
from zsfuse.evaluation import (
    CSV_FOOTER_KEYS,
    DatasetManifest,
    EvalConfig,
    EvaluationReport,
    ManifestRecord,
    cohens_kappa,
    confusion_matrix,
    emit_report,
    evaluate,
    load_manifest,
    top_k_accuracy,
)
from zsfuse.pipeline import FeatureSelection

from conftest import ThreeClassFixture, oracle_argmax, oracle_scores


def oracle_kappa(c):
    n = sum(sum(row) for row in c)
    m = len(c)
    po = sum(c[i][i] for i in range(m)) / n
    pe = sum(sum(c[i]) * sum(c[j][i] for j in range(m)) for i in range(m)) / n / n
    return (po - pe) / (1 - pe)


def oracle_topk(scores, truth, k):
    hits = 0
    for row, t in zip(scores, truth):
        ranked = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += t in ranked[:k]
    return hits / len(truth)


def write_dataset(fx, tmp_path, extra=()):
    records = []
    for i, img in enumerate(fx.images):
        (tmp_path / f"img{i:03d}.png").write_bytes(img)
        records.append({"image": f"img{i:03d}.png", "label_index": fx.truth[i]})
    for name, data, label in extra:
        (tmp_path / name).write_bytes(data)
        records.append({"image": name, "label_index": label})
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"name": "toy", "labels": list(fx.labels), "records": records}))
    return path


class TestManifest:
    def test_roundtrip(self, tmp_path):
        m = DatasetManifest("d", ("a", "b"), [ManifestRecord("x.png", 1)])
        m.save(tmp_path / "m.json")
        back = load_manifest(tmp_path / "m.json")
        assert back.labels == m.labels and back.records == m.records and back.root == tmp_path

    def test_index_out_of_range(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps({"name": "d", "labels": ["a"], "records": [{"image": "x", "label_index": 1}]}))
        with pytest.raises(IndexOutOfRangeError):
            load_manifest(tmp_path / "m.json")

    def test_schema(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps({"labels": ["a"]}))
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "m.json")

    def test_duplicate_labels(self):
        with pytest.raises(ManifestError):
            DatasetManifest("d", ("a", "a"), [])

    def test_strict_missing(self, tmp_path):
        DatasetManifest("d", ("a",), [ManifestRecord("gone.png", 0)]).save(tmp_path / "m.json")
        load_manifest(tmp_path / "m.json")
        with pytest.raises(MissingImageError):
            load_manifest(tmp_path / "m.json", strict=True)


class TestTopK:
    def test_example(self):
        scores = [[0.1, 0.9, 0.0], [0.5, 0.2, 0.3]]
        assert top_k_accuracy(scores, [1, 2], 1) == 0.5
        assert top_k_accuracy(scores, [1, 2], 2) == 1.0

    def test_ties_by_index(self):
        assert top_k_accuracy([[0.5, 0.5]], [1], 1) == 0.0

    @settings(max_examples=200)
    @given(st.integers(1, 8), st.integers(1, 20), st.integers(0, 2**32 - 1))
    def test_sort_oracle_and_monotone(self, m, n, seed):
        r = np.random.default_rng(seed)
        scores = np.round(r.normal(size=(n, m)), 1)
        truth = r.integers(m, size=n).tolist()
        accs = [top_k_accuracy(scores, truth, k) for k in range(1, m + 2)]
        assert accs == [oracle_topk(scores.tolist(), truth, k) for k in range(1, m + 2)]
        assert all(a <= b for a, b in zip(accs, accs[1:]))
        assert accs[m - 1] == 1.0

    def test_errors(self):
        with pytest.raises(EmptyPredictionsError):
            top_k_accuracy(np.zeros((0, 2)), [], 1)
        with pytest.raises(ValueError):
            top_k_accuracy([[1.0]], [0], 0)


class TestKappa:
    def test_uniform_is_zero(self):
        assert cohens_kappa([[25, 25], [25, 25]]) == 0.0

    def test_perfect(self):
        assert cohens_kappa([[5, 0], [0, 7]]) == 1.0

    def test_empty(self):
        with pytest.raises(EmptyMatrixError):
            cohens_kappa([[0, 0], [0, 0]])

    def test_formula_oracle(self):
        r = np.random.default_rng(5)
        checked = 0
        while checked < 1000:
            m = int(r.integers(2, 8))
            c = r.integers(0, 20, size=(m, m)).tolist()
            if sum(map(sum, c)) == 0:
                continue
            assert cohens_kappa(c) == pytest.approx(oracle_kappa(c), abs=1e-12)
            checked += 1


class TestConfusion:
    def test_reconciles(self):
        r = np.random.default_rng(2)
        truth, pred = r.integers(4, size=300), r.integers(4, size=300)
        c = confusion_matrix(truth, pred, 4)
        assert c.sum() == 300
        np.testing.assert_array_equal(c.sum(axis=1), np.bincount(truth, minlength=4))
        np.testing.assert_array_equal(c.sum(axis=0), np.bincount(pred, minlength=4))
        assert np.trace(c) == int(np.sum(truth == pred))


@pytest.fixture(scope="module")
def toy():
    return ThreeClassFixture(n_images=30, seed=21)


class TestEvaluate:
    def test_end_to_end_matches_oracle(self, toy, tmp_path):
        manifest = load_manifest(write_dataset(toy, tmp_path))
        cols = [toy.class_vecs[lab] for lab in toy.labels]
        rows = [oracle_scores(toy.features(i), cols, "avg-feature") for i in range(30)]
        preds = [oracle_argmax(row) for row in rows]
        report = evaluate(manifest, toy.model, EvalConfig(), Backends.create(toy.encoder, toy.llm))
        assert [r.predicted_index for r in report.records] == preds
        assert report.top1 == sum(p == t for p, t in zip(preds, toy.truth)) / 30
        assert report.top5 == 1.0
        c = [[0] * 3 for _ in range(3)]
        for t, p in zip(toy.truth, preds):
            c[t][p] += 1
        assert report.confusion == c
        assert report.kappa == pytest.approx(oracle_kappa(c), abs=1e-12)
        assert report.counters["encode_image_calls"] == 30 and report.counters["generate_calls"] == 60

    def test_json_roundtrip(self, toy, tmp_path):
        manifest = load_manifest(write_dataset(toy, tmp_path))
        report = evaluate(manifest, toy.model, EvalConfig(), toy.backends)
        back = EvaluationReport.from_dict(json.loads(emit_report(report, "json")))
        assert back == report

    def test_csv_shape(self, toy, tmp_path):
        manifest = load_manifest(write_dataset(toy, tmp_path))
        report = evaluate(manifest, toy.model, EvalConfig(selection=FeatureSelection.parse("if")), toy.backends)
        rows = list(csv.reader(io.StringIO(emit_report(report, "csv").decode())))
        assert len(rows) == 30 + 1 + 6
        assert rows[0] == ["image", "true", "predicted", "correct", "top5_hit"]
        assert [r[0] for r in rows[-6:]] == [f"#{k}" for k in CSV_FOOTER_KEYS]
        assert rows[-6][1] == "fusion:if:avg-feature"

    def test_warm_cache(self, toy, tmp_path):
        manifest = load_manifest(write_dataset(toy, tmp_path))
        cache = tmp_path / "cache"
        first = evaluate(manifest, toy.model, EvalConfig(), Backends.create(toy.encoder, toy.llm, cache_dir=cache))
        warm_backends = Backends.create(toy.encoder, toy.llm, cache_dir=cache)
        second = evaluate(manifest, toy.model, EvalConfig(), warm_backends)
        assert warm_backends.counters.network_calls == 0
        assert second.counters["cache_hits"] == 30 * 5
        assert emit_report(first, "csv") == emit_report(second, "csv")

    def test_failure_budget(self, toy, tmp_path):
        manifest = load_manifest(write_dataset(toy, tmp_path, extra=[("bad.png", b"junk", 0)]))
        with pytest.raises(EvaluationFailedError):
            evaluate(manifest, toy.model, EvalConfig(), toy.backends)
        report = evaluate(manifest, toy.model, EvalConfig(max_failure_fraction=0.05), toy.backends)
        assert report.failures == 1 and report.evaluated == 30
        assert report.records[-1].error.startswith("ImageDecodeError")

    def test_all_failed(self, toy, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"junk")
        manifest = DatasetManifest("d", toy.labels, [ManifestRecord("bad.png", 0)], root=tmp_path)
        with pytest.raises(EmptyPredictionsError):
            evaluate(manifest, toy.model, EvalConfig(max_failure_fraction=1.0), toy.backends)

    def test_label_mismatch(self, toy):
        manifest = DatasetManifest("d", ("x", "y", "z"), [ManifestRecord("a.png", 0)])
        with pytest.raises(ValueError):
            evaluate(manifest, toy.model, EvalConfig(), toy.backends)

    def test_baseline(self, toy, tmp_path):
        manifest = load_manifest(write_dataset(toy, tmp_path))
        from zsfuse import images, prompts

        llm = MockLLM()
        prompt = prompts.render_classification_prompt(toy.labels)
        for i, img in enumerate(toy.images):
            llm.add(prompt, images.preprocess(img)[1], ["a cat", "the dog", "some bird"][toy.truth[i]])
        report = evaluate(manifest, toy.model, EvalConfig(baseline=MatchMetric.parse("rouge1")), Backends.create(toy.encoder, llm))
        assert report.top1 == 1.0 and report.kappa == 1.0
        assert report.method == "baseline:rouge1"
        assert report.counters["encode_text_calls"] == 0
