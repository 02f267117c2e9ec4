import itertools

import numpy as np
import pytest

from troi.eval import MetricsReport, evaluate, retrieval_accuracy, two_way_identification
from troi.nn import ModelDims, init_params
from troi.synth import Ellipsoid, SyntheticSubjectSpec, generate_subject, unit_sphere, zscore


def binomial_band(p, n, trials):
    sd = np.sqrt(p * (1 - p) / (n * trials))
    return p - 3 * sd, p + 3 * sd


def test_perfect_alignment():
    e = np.eye(5)
    assert retrieval_accuracy(e, e, "image") == 1.0
    assert retrieval_accuracy(e, e, "brain") == 1.0


def test_hand_built_similarity_4x4():
    # rows of h pick columns by construction: sim = h @ c.T with c = I
    h = np.array([[1.0, 0.2, 0.0, 0.0],
                  [0.9, 0.1, 0.0, 0.0],
                  [0.0, 0.0, 1.0, 0.5],
                  [0.0, 0.0, 0.3, 0.8]])
    c = np.eye(4)
    # image direction: argmax per row = [0, 0, 2, 3] -> hits at 0, 2, 3
    assert retrieval_accuracy(h, c, "image") == 0.75
    # brain direction works on cosines: column 0 sees 1/sqrt(1.04)=0.981 vs 0.9/sqrt(0.82)=0.994,
    # column 1 sees 0.196 vs 0.110, so the winners are [1, 0, 2, 3] -> hits at 2, 3
    assert retrieval_accuracy(h, c, "brain") == 0.5


def test_ties_break_to_lowest_index():
    h = np.array([[1.0, 1.0], [1.0, 1.0]])
    c = np.array([[1.0, 0.0], [0.0, 1.0]])
    # both candidates tie for every row -> row 0 correct, row 1 not
    assert retrieval_accuracy(h, c, "image") == 0.5


def test_retrieval_scale_invariance_and_symmetry():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(20, 6))
    c = rng.normal(size=(20, 6))
    assert retrieval_accuracy(3.7 * h, c) == retrieval_accuracy(h, c)
    # h == c makes the similarity matrix symmetric, so both directions agree
    e = unit_sphere(rng, 10, 10)
    assert retrieval_accuracy(e, e, "image") == retrieval_accuracy(e, e, "brain")


def test_retrieval_errors():
    with pytest.raises(ValueError):
        retrieval_accuracy(np.ones((1, 2)), np.ones((1, 2)))
    with pytest.raises(ValueError):
        retrieval_accuracy(np.ones((3, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        retrieval_accuracy(np.eye(2), np.eye(2), "sideways")


def test_random_retrieval_near_chance_300():
    rng = np.random.default_rng(1)
    n, trials = 300, 40
    accs = [retrieval_accuracy(rng.normal(size=(n, 16)), rng.normal(size=(n, 16))) for _ in range(trials)]
    lo, hi = binomial_band(1 / n, n, trials)
    assert lo <= np.mean(accs) <= hi


def test_two_way_identity_and_chance():
    rng = np.random.default_rng(2)
    c = unit_sphere(rng, 200, 8)
    assert two_way_identification(c, c, 0) == 1.0
    p = unit_sphere(rng, 200, 8)
    lo, hi = binomial_band(0.5, 200, 10)
    assert lo <= two_way_identification(p, c, 3, n_passes=10) <= hi


def test_two_way_exhaustive_enumeration():
    p = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]])
    c = np.array([[1.0, 0.1], [1.0, 0.0], [0.2, 1.0]])
    cosine = lambda a, b: a @ b / np.linalg.norm(a) / np.linalg.norm(b)
    # hand count: for each j, the share of distractors d != j that lose to c_j
    per_sample = []
    for j in range(3):
        others = [d for d in range(3) if d != j]
        per_sample.append(np.mean([cosine(p[j], c[j]) > cosine(p[j], c[d]) for d in others]))
    expected = np.mean(per_sample)
    # every joint distractor assignment as one pass
    passes = np.array([choice for choice in itertools.product([1, 2], [0, 2], [0, 1])])
    assert two_way_identification(p, c, distractors=passes) == pytest.approx(expected, abs=1e-12)


def test_two_way_relabel_invariance():
    rng = np.random.default_rng(4)
    p = rng.normal(size=(12, 5))
    c = rng.normal(size=(12, 5))
    perm = rng.permutation(12)
    inv = np.argsort(perm)
    d = np.array([rng.permutation([k for k in range(12)])[:1] for _ in range(12)]).T
    d = np.where(d == np.arange(12), (d + 1) % 12, d)
    # relabel samples: new index i holds old sample perm[i]; map distractors accordingly
    d_perm = inv[d[:, perm]]
    assert two_way_identification(p, c, distractors=d) == two_way_identification(p[perm], c[perm], distractors=d_perm)


def test_two_way_errors():
    with pytest.raises(ValueError):
        two_way_identification(np.ones((1, 2)), np.ones((1, 2)))


@pytest.fixture(scope="module")
def subject():
    spec = SyntheticSubjectSpec(dims=(6, 6, 6), embed_dim=8, roi_spec=(Ellipsoid((3, 3, 3), (2, 2, 2)),),
                                n_samples=200, n_test=100, seed=0)
    return zscore(generate_subject(spec))


def test_untrained_bundle_is_at_chance(subject):
    accs = []
    for seed in range(10):
        b = init_params(seed, {"target": subject.dims}, ModelDims(d_model=16, d_embed=8, n_blocks=1))
        m = evaluate(b, subject, seed=seed)
        assert m.n_candidates == 100
        accs += [m.image_retrieval_acc, m.brain_retrieval_acc]
    lo, hi = binomial_band(0.01, 100, len(accs))
    assert lo <= np.mean(accs) <= hi


def test_evaluate_oracle_bundle(subject, monkeypatch):
    import troi.eval as ev
    monkeypatch.setattr(ev, "predict", lambda bundle, sid, x: (subject.embeddings[subject.test],
                                                              subject.embeddings[subject.test]))
    m = ev.evaluate(None, subject, subject.true_roi)
    assert m.image_retrieval_acc == m.brain_retrieval_acc == m.two_way_ident == 1.0
    assert m.prior_embed_mse == 0.0
    assert (m.mask_iou, m.mask_precision, m.mask_recall) == (1.0, 1.0, 1.0)
    assert m.voxel_count == subject.true_roi.nonzero_count()


def test_evaluate_empty_split(subject):
    import dataclasses
    empty = dataclasses.replace(subject, test=np.array([], dtype=np.int64))
    with pytest.raises(ValueError, match="empty"):
        evaluate(None, empty)


def test_metrics_report_text_roundtrip(tmp_path):
    m = MetricsReport(0.5, 0.25, 0.875, 0.125, 0.3, 0.4, 0.6, 100, 600)
    m.save(tmp_path / "m.txt")
    text = (tmp_path / "m.txt").read_text()
    assert text.splitlines()[0] == "image_retrieval_acc=0.5"
    assert MetricsReport.from_text(text) == m
    assert "image" in m.table() and "brain" in m.table()
