import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amx.actmax import MaxConfig, ModelBundle, noise_protocol
from amx.data import synth_dataset
from amx.errors import ContractError, EvaluationError
from amx.evaluate import (latent_shift_report, maximization_success, success_flags, summarize_mode,
                          transfer_grid)
from amx.models import init_autoencoder, init_classifier
from amx.svg import embedding_svg, transfer_grid_svg


def constant(k, c, seed=0):
    """Classifier that ignores its input and always argmaxes to ``c``."""
    m = init_classifier(seed, k)
    m.params["fc2.w"].data[...] = 0.0
    m.params["fc2.b"].data[...] = 0.0
    m.params["fc2.b"].data[c] = 5.0
    return m


GRIDS = np.random.default_rng(0).uniform(0, 1, (3, 80, 64)).astype(np.float32)


@pytest.mark.parametrize("orig,sep,expected", [(1, 1, True), (1, 2, False), (2, 1, False), (2, 2, False)])
def test_success_truth_table(orig, sep, expected):
    assert maximization_success(constant(3, orig), constant(3, sep, seed=1), GRIDS[0], 1) is expected


def test_success_flags_vectorised_and_k_mismatch():
    assert success_flags(constant(3, 0), constant(3, 0), GRIDS, [0, 1, 0]).tolist() == [True, False, True]
    with pytest.raises(ContractError):
        success_flags(constant(3, 0), constant(4, 0), GRIDS, [0, 0, 0])


def test_perfect_generator_gives_identity(monkeypatch):
    import amx.evaluate as ev
    k = 4
    monkeypatch.setattr(ev, "predict", lambda model, grids: np.asarray(grids)[:, 0, 0].astype(int))
    samples = {c: np.full((5, 80, 64), c, np.float32) for c in range(k)}
    grid = transfer_grid(constant(k, 0), samples, list("abcd"))
    np.testing.assert_array_equal(grid.matrix, np.eye(k))
    assert grid.mean_diagonal == 1.0 and grid.counts.tolist() == [5] * 4


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=3, max_size=3), st.integers(0, 1000))
def test_rows_are_probability_vectors(sizes, seed):
    import amx.evaluate as ev
    rng = np.random.default_rng(seed)
    original = ev.predict
    ev.predict = lambda model, grids: rng.integers(0, 3, len(grids))
    try:
        grid = transfer_grid(constant(3, 0), {c: np.zeros((n, 80, 64), np.float32) for c, n in enumerate(sizes)})
    finally:
        ev.predict = original
    assert ((grid.matrix >= 0) & (grid.matrix <= 1)).all()
    assert np.abs(grid.matrix.sum(axis=1) - 1).max() <= 1e-9


def test_empty_row_names_class():
    with pytest.raises(EvaluationError, match="'b'"):
        transfer_grid(constant(3, 0), {0: GRIDS, 2: GRIDS}, ["a", "b", "c"])


def test_grid_csv_and_svg(tmp_path):
    grid = transfer_grid(constant(2, 1), {0: GRIDS, 1: GRIDS}, ["go", "no"])
    grid.write_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["target", "go", "no"] and rows[1] == ["go", "0.0", "1.0"]
    svg = transfer_grid_svg(grid, "direct")
    assert svg.startswith("<svg") and svg.count("<rect") >= 4


@pytest.fixture(scope="module")
def bundle():
    return ModelBundle(init_classifier(0, 3), init_autoencoder(1, latent_dim=16), init_classifier(2, 3))


def test_summarize_mode(bundle):
    cfg = MaxConfig(max_iters=3)
    results = noise_protocol("direct", bundle, per_class=2, seed=0, cfg=cfg)
    summary, grid = summarize_mode(bundle, results, ["a", "b", "c"])
    assert summary.runs == 6 and summary.mode == "direct"
    assert 0 <= summary.transfer_rate <= summary.original_rate <= 1
    assert summary.mean_diagonal == grid.mean_diagonal
    with pytest.raises(ContractError):
        summarize_mode(ModelBundle(bundle.classifier), results)


def test_latent_shift_report_pairs_rows(bundle, tmp_path):
    split = synth_dataset(3, 12, seed=0)
    examples = (split.train + split.val + split.test)[:32]
    rep = latent_shift_report(bundle, examples, MaxConfig(max_iters=4), perplexity=10, iters=60, seed=0)
    assert len(rep.points) == 2 * len(examples) and len(rep.rows) == len(examples)
    assert [p.phase for p in rep.points] == ["before"] * 32 + ["after"] * 32
    assert all(np.isfinite([p.x, p.y]).all() for p in rep.points)
    rep.write_embedding_csv(tmp_path / "e.csv")
    header = (tmp_path / "e.csv").read_text().splitlines()[0]
    assert header == "x,y,command,speaker,phase,misclassified"
    assert embedding_svg(rep.points).count("<circle") == 64 + 3  # plus one legend swatch per command


def test_already_confident_example_has_zero_displacement(bundle):
    split = synth_dataset(3, 12, seed=0)
    examples = (split.train + split.val + split.test)[:31]
    rep = latent_shift_report(bundle, examples, MaxConfig(target_prob_stop=0.0), perplexity=10, iters=20)
    assert all(r.displacement == 0.0 and r.iterations_used == 0 for r in rep.rows)


def test_latent_shift_needs_examples(bundle):
    with pytest.raises(EvaluationError):
        latent_shift_report(bundle, [])
