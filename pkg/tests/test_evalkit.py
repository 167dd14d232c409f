import csv
import json

import numpy as np
import pytest

from mrplab.errors import InvalidInputError, UndefinedScoreError
from mrplab.evalkit import (
    ScoreReport,
    TopicScore,
    aggregate,
    build_report,
    continual_scores,
    fmt6,
    gradient_conflict_report,
    qa_accuracy,
    random_baseline,
    task_score,
    trainable_param_count,
    write_conflict_csv,
)
from mrplab.linalg import ProjectionBasis
from mrplab.nanomodel.model import BaseModel, HookedModel, ModelConfig
from mrplab.taskgen import LABEL_TOKENS, QaExample, generate_corpus

CFG = ModelConfig(vocab=160, d_model=16, n_blocks=2, n_heads=2, context_len=16, mlp_expansion=2)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(0, topics=3, entities_per_topic=4, examples_per_split={"train": 24, "test": 12},
                           vocab=CFG.vocab)


def oracle_model(answer_label_bias=None):
    """Zero trunk; the head puts all weight on one label through the final LayerNorm bias."""
    m = BaseModel.init(CFG, seed=0)
    for k, v in m.params.items():
        v[...] = 0.0
    m.params["ln_f.b"][0] = 1.0
    if answer_label_bias is not None:
        m.params["head"][0, answer_label_bias] = 10.0
    return m


def test_uniform_logits_score_zero_under_tie_rule(corpus):
    assert qa_accuracy(oracle_model(), corpus[0].split("test")) == 0.0


def test_oracle_model_scores_one():
    ex = [QaExample("t", "test", (1,), (4, 20, 21, 5), ((30,), (31,), (32,), (33,)), "C")] * 3
    assert qa_accuracy(oracle_model(LABEL_TOKENS[2]), ex) == 1.0
    assert qa_accuracy(oracle_model(LABEL_TOKENS[1]), ex) == 0.0


def test_accuracy_invariant_to_logit_shift(corpus):
    # pin one final-norm coordinate to 1 so a head row adds the same constant to every logit
    m = BaseModel.init(CFG, seed=3, std=0.5)
    m.params["ln_f.g"][0] = 0.0
    m.params["ln_f.b"][0] = 1.0
    test = corpus[0].split("test")
    before = qa_accuracy(m, test)
    assert 0.0 < before < 1.0
    for c in (3.5, -7.0):
        shifted = m.copy()
        shifted.params["head"][0, :] += c
        assert qa_accuracy(shifted, test) == before


def test_random_baseline_values(corpus):
    assert random_baseline(corpus[0].split("test")) == 0.25
    with pytest.raises(InvalidInputError):
        random_baseline([])
    with pytest.raises(InvalidInputError):
        qa_accuracy(oracle_model(), [])


def test_random_baseline_matches_simulated_guesser(corpus):
    test = corpus[0].split("test")
    rng = np.random.default_rng(0)
    n = 10_000
    truth = np.array([e.answer_index for e in test])
    picks = rng.integers(0, 4, size=(n,))
    hits = np.mean(picks == truth[np.arange(n) % len(test)])
    sigma = np.sqrt(0.25 * 0.75 / n)
    assert abs(hits - random_baseline(test)) <= 3 * sigma


def test_task_score_examples():
    assert task_score(0.8, 0.25, 0.8) == 1.0
    assert task_score(0.25, 0.25, 0.8) == 0.0
    assert task_score(0.363, 0.310, 0.640) == pytest.approx(0.16060606, abs=1e-8)
    assert task_score(0.95, 0.25, 0.8) > 1.0  # not clamped
    assert task_score(0.6, 0.25, 0.8) > task_score(0.5, 0.25, 0.8)
    with pytest.raises(UndefinedScoreError):
        task_score(0.5, 0.25, 0.25)


def test_continual_scores_examples():
    assert continual_scores([0.0, 0.0], [1.0, 1.0]) == 1.0
    assert continual_scores([0.5], [0.5, 0.5]) == 0.0
    assert continual_scores([0.2, 0.4], [0.9, 1.0]) == pytest.approx(0.65)
    with pytest.raises(InvalidInputError):
        continual_scores([0.1], [])


def test_aggregate_half_std():
    mean, half = aggregate([1.0, 3.0])
    assert mean == 2.0 and half == 0.5


def test_fmt6():
    assert fmt6(0.123456789) == 0.123457
    assert fmt6(1234567.0) == 1234570.0
    assert fmt6(7) == 7 and fmt6(None) is None


def test_trainable_param_count_examples():
    def hooks(*ranks):
        return {h: ProjectionBasis(np.eye(64)[:r]) for h, r in zip((2, 3), ranks)}

    assert trainable_param_count(hooks(8, 8)) == 1024
    assert trainable_param_count(hooks(2, 2)) == 256
    assert trainable_param_count({}) == 0


def test_report_is_deterministic_and_formatted(tmp_path, corpus):
    m = BaseModel.init(CFG, seed=3, std=0.5)
    tests = {c.topic: c.split("test") for c in corpus}
    up = {t: 0.9 for t in tests}
    kw = dict(stage=1, method="mrp", seed=0, config_hash="abc", trainable_params=64)
    r1 = build_report(HookedModel(m), tests, up, [corpus[0].topic], [corpus[2].topic], **kw)
    r2 = build_report(HookedModel(m), tests, up, [corpus[0].topic], [corpus[2].topic], **kw)
    r1.write(tmp_path / "a.json")
    r2.write(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    data = json.loads((tmp_path / "a.json").read_text())
    assert [t["role"] for t in data["topics"]] == ["unlearned", "pending", "retain"]
    assert data["final_score"] == pytest.approx(data["s_ret"] - data["s_unl"], abs=1e-5)
    assert data["format_version"] == 1


def test_report_with_undefined_score():
    r = ScoreReport(1, "mrp", 0, "h", [TopicScore("a", "unlearned", 0.3, 0.25, 0.25, None)], None, 0.5, None, 0)
    assert r.to_json()["topics"][0]["score"] is None


def test_gradient_conflict_identical_tasks_and_csv(tmp_path, corpus):
    m = BaseModel.init(CFG, seed=3, std=0.3)
    data = corpus[0].split("train")[:10]
    rows = gradient_conflict_report(m, data, data, batch_size=5)
    assert [r["cosine"] for r in rows] == [pytest.approx(1.0)] * 2
    rows.append({"block": 2, "cosine": None})
    write_conflict_csv(tmp_path / "g.csv", rows)
    got = list(csv.reader(open(tmp_path / "g.csv")))
    assert got[0] == ["block", "cosine"]
    assert got[-1] == ["2", "undefined"]


def test_gradient_conflict_marks_zero_gradient_blocks(corpus):
    m = BaseModel.init(CFG, seed=3, std=0.3)
    m.params["head"][:] = 0.0  # no gradient reaches the trunk
    m.params["ln_f.g"][:] = 0.0
    rows = gradient_conflict_report(m, corpus[0].split("train")[:5], corpus[1].split("train")[:5])
    assert all(r["cosine"] is None for r in rows)
