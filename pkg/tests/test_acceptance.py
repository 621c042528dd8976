"""Acceptance checks, one PASS/FAIL line per criterion (see the "acceptance" terminal section).

Criteria that need the Speech Commands corpus read its root from
``AMX_SPEECH_COMMANDS``.  Without it they are skipped as NOT VERIFIED.
``AMX_TOY_CORPUS`` runs the same checks on a generated toy corpus, labelled as
a proxy.  Criteria 4 to 6 and 8 also run a labelled proxy on the synthetic fixture.
"""

import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

from amx.actmax import MaxConfig, ModelBundle, noise_protocol, write_result
from amx.core import Graph, Tensor, check_gradients
from amx.data import DESK_CLASSES, DatasetSplit, scan_corpus, synth_dataset
from amx.evaluate import latent_codes, latent_shift_report, summarize_mode
from amx.models import init_autoencoder, init_classifier, save_checkpoint
from amx.train import TrainConfig, evaluate_accuracy, reconstruction_mse, train_autoencoder, train_classifier
from amx.tsne import trailing_mean, tsne

SEEDS = {"classifier": 0, "separate": 1, "autoencoder": 2, "maximization": 3}
SYNTH_CLF_EPOCHS = 2   # val accuracy is already 1.0 after one epoch on the fixture
SYNTH_AE_EPOCHS = 4
SYNTH_PER_CLASS = 20   # noise starts per class for the synthetic proxies (5 classes -> 100 runs)
CORPUS_EPOCHS = 30
CORPUS_PER_CLASS = 100

pytestmark = pytest.mark.slow


@dataclass
class Trained:
    label: str
    proxy: str | None
    split: DatasetSplit
    models: ModelBundle
    seconds: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)
    runs: dict = field(default_factory=dict)


def _train_all(split, clf_epochs, ae_epochs, label, proxy):
    out = Trained(label, proxy, split, None)
    t = time.perf_counter()
    clf, out.histories["classifier"] = train_classifier(split, TrainConfig(epochs=clf_epochs, seed=SEEDS["classifier"]))
    out.seconds["classifier"] = time.perf_counter() - t
    t = time.perf_counter()
    ae, out.histories["autoencoder"] = train_autoencoder(split, TrainConfig(epochs=ae_epochs, seed=SEEDS["autoencoder"]))
    out.seconds["autoencoder"] = time.perf_counter() - t
    t = time.perf_counter()
    sep, out.histories["separate"] = train_classifier(split, TrainConfig(epochs=clf_epochs, seed=SEEDS["separate"]))
    out.seconds["separate"] = time.perf_counter() - t
    out.models = ModelBundle(clf, ae, sep)
    return out


def _max_runs(trained: Trained, mode: str, per_class: int):
    key = (mode, per_class)
    if key not in trained.runs:
        t = time.perf_counter()
        results = noise_protocol(mode, trained.models, per_class, SEEDS["maximization"], MaxConfig())
        trained.runs[key] = (results, time.perf_counter() - t)
    return trained.runs[key]


@pytest.fixture(scope="session")
def synthetic():
    return _train_all(synth_dataset(5, 200, seed=0), SYNTH_CLF_EPOCHS, SYNTH_AE_EPOCHS, "synthetic fixture",
                      "synthetic fixture")


@pytest.fixture(scope="session")
def corpus():
    root = os.environ.get("AMX_SPEECH_COMMANDS")
    proxy = None
    if not root and os.environ.get("AMX_TOY_CORPUS"):
        root, proxy = os.environ["AMX_TOY_CORPUS"], "toy corpus"
    if not root:
        return None
    t = time.perf_counter()
    split = scan_corpus(root, class_filter=list(DESK_CLASSES), max_per_class=300)
    trained = _train_all(split, CORPUS_EPOCHS, CORPUS_EPOCHS, "Speech Commands subset", proxy)
    trained.seconds["ingest"] = time.perf_counter() - t - sum(trained.seconds.values())
    return trained


def _need_corpus(corpus, verdict, criterion):
    if corpus is None:
        verdict.not_verified(criterion, "AMX_SPEECH_COMMANDS is unset and the corpus is not available here")


# ---------------------------------------------------------------- 1. gradients

def _primitive_graphs(rng):
    def leaf(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    def const(*shape):
        return Tensor(rng.normal(size=shape))

    def dense(g):
        return g.sum(g.dense(leaf(6), leaf(4, 6), leaf(4)))

    def conv(g):
        return g.mse(g.conv2d(leaf(2, 6, 5), leaf(3, 2, 3, 3), leaf(3), padding="same"), const(3, 6, 5))

    def conv_valid_strided(g):
        return g.mse(g.conv2d(leaf(1, 7, 7), leaf(2, 1, 3, 3), leaf(2), stride=2), const(2, 3, 3))

    def pool(g):
        return g.mse(g.max_pool2d(leaf(2, 4, 6), 2), const(2, 2, 3))

    def relu(g):
        return g.mse(g.relu(leaf(3, 5)), const(3, 5))

    def sigmoid(g):
        return g.sum(g.sigmoid(leaf(3, 5)))

    def softmax_xent(g):
        return g.cross_entropy(g.softmax(leaf(4, 5)), [0, 4, 2, 1])

    def mse(g):
        return g.mse(leaf(3, 4), leaf(3, 4))

    def reshape(g):
        return g.mse(g.reshape(leaf(2, 6), (3, 4)), const(3, 4))

    def upsample(g):
        return g.mse(g.upsample2d(leaf(2, 2, 3), 2), const(2, 4, 6))

    def pick(g):
        return g.sum(g.pick(g.sigmoid(leaf(3, 4)), [1, 0, 3]))

    def affine(g):
        return g.sum(g.sigmoid(g.affine(leaf(3, 4), -1.7, 0.4)))

    def identity(g):
        return g.mse(g.identity(leaf(5)), const(5))

    return {f.__name__: f for f in (dense, conv, conv_valid_strided, pool, relu, sigmoid, softmax_xent, mse,
                                    reshape, upsample, pick, affine, identity)}


def test_c1_gradient_correctness(verdict):
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {}
    for name, build in _primitive_graphs(rng).items():
        g = Graph()
        loss = build(g)
        worst[name] = check_gradients(g, step=1e-5, loss=loss).max_rel_err
    clf = init_classifier(0, 10).astype(np.float64)
    ae = init_autoencoder(1, latent_dim=128).astype(np.float64)
    for t_ in list(clf.parameters()) + list(ae.parameters()):
        t_.requires_grad = False
    g = Graph()
    z = Tensor(np.random.default_rng(1).normal(size=128), requires_grad=True)
    loss = g.pick(clf.logits(g, ae.decode(g, z)), 3)
    composite = check_gradients(g, step=1e-5, loss=loss)
    worst["decoder->classifier"] = composite.max_rel_err
    seconds = time.perf_counter() - t
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-4 and seconds < 60 and composite.per_tensor[0].checked > 0
    verdict("C1 gradient correctness", ok, f"max rel err {worst[top]:.2e} ({top}) over {len(worst)} graphs "
            f"< 1e-4; {composite.per_tensor[0].checked}/128 latent elements checked; {seconds:.1f}s < 60s")
    assert ok


# ---------------------------------------------------------------- 2. synthetic end to end

def test_c2_synthetic_fixture(synthetic, verdict):
    hist = synthetic.histories["classifier"]
    first_hit = next((i + 1 for i, a in enumerate(hist.val_acc) if a >= 0.95), None)
    x_test = np.stack([ex.features for ex in synthetic.split.test])
    mse = reconstruction_mse(synthetic.models.autoencoder, x_test)
    seconds = synthetic.seconds["classifier"] + synthetic.seconds["autoencoder"]
    ok = first_hit is not None and first_hit <= 10 and mse < 0.01 and seconds < 300
    verdict("C2 synthetic fixture end-to-end", ok,
            f"val acc {max(hist.val_acc):.3f} >= 0.95 at epoch {first_hit}; test reconstruction mse {mse:.4f} < 0.01; "
            f"training {seconds:.0f}s < 300s")
    assert ok


# ---------------------------------------------------------------- 3. corpus accuracy

def test_c3_subset_accuracy(corpus, verdict):
    name = "C3 subset test accuracy"
    _need_corpus(corpus, verdict, name)
    acc = evaluate_accuracy(corpus.models.classifier, corpus.split.test)
    seconds = corpus.seconds["classifier"] + corpus.seconds.get("ingest", 0.0)
    ok = acc >= 0.70 and seconds < 1800
    verdict(name, ok, f"{acc:.3f} >= 0.70 after {CORPUS_EPOCHS} epochs; {seconds:.0f}s < 1800s", corpus.proxy)
    assert ok


# ---------------------------------------------------------------- 4-6. maximization on noise starts

def _success(trained, per_class, verdict, name):
    rates, seconds = {}, 0.0
    for mode in ("direct", "latent"):
        results, s = _max_runs(trained, mode, per_class)
        seconds += s
        flat = [r for rs in results.values() for r in rs]
        grids = np.stack([r.maximized for r in flat])
        pred = np.argmax(trained.models.classifier.logits(Graph(grad=False), Tensor(grids)).data, axis=1)
        rates[mode] = float(np.mean(pred == np.array([r.target for r in flat])))
    ok = rates["direct"] >= 0.90 and rates["latent"] >= 0.85 and seconds < 1200
    return verdict(name, ok, f"direct {rates['direct']:.3f} >= 0.90, latent {rates['latent']:.3f} >= 0.85 "
                   f"({per_class}/class); {seconds:.0f}s < 1200s", trained.proxy)


def test_c4_maximization_success(corpus, verdict):
    name = "C4 original-classifier success"
    _need_corpus(corpus, verdict, name)
    assert _success(corpus, CORPUS_PER_CLASS, verdict, name)


def test_c4_proxy_synthetic(synthetic, verdict):
    assert _success(synthetic, SYNTH_PER_CLASS, verdict, "C4 original-classifier success")


def _transfer(trained, per_class, verdict, name):
    summaries = {}
    for mode in ("direct", "latent"):
        results, _ = _max_runs(trained, mode, per_class)
        summaries[mode], _ = summarize_mode(trained.models, results)
    d, lat = summaries["direct"], summaries["latent"]
    ratio = lat.transfer_rate / d.transfer_rate if d.transfer_rate > 0 else math.inf
    ok = lat.transfer_rate >= 3 * d.transfer_rate and lat.transfer_rate > 0 and lat.mean_diagonal > d.mean_diagonal
    return verdict(name, ok, f"transfer latent {lat.transfer_rate:.3f} vs direct {d.transfer_rate:.3f} "
                   f"(ratio {ratio:.2f}, need >= 3); mean diagonal latent {lat.mean_diagonal:.3f} vs direct "
                   f"{d.mean_diagonal:.3f}", trained.proxy)


def test_c5_transfer_ordering(corpus, verdict):
    name = "C5 transfer ordering"
    _need_corpus(corpus, verdict, name)
    assert _transfer(corpus, CORPUS_PER_CLASS, verdict, name)


def test_c5_proxy_synthetic(synthetic, verdict):
    assert _transfer(synthetic, SYNTH_PER_CLASS, verdict, "C5 transfer ordering")


def _energy(trained, per_class, verdict, name):
    stats = {}
    for mode in ("direct", "latent"):
        results, _ = _max_runs(trained, mode, per_class)
        stats[mode], _ = summarize_mode(trained.models, results)
    d, lat = stats["direct"], stats["latent"]
    ok = d.mean_energy_top1 > lat.mean_energy_top1 and min(d.runs, lat.runs) >= 100
    cmp = ">" if d.mean_energy_top1 > lat.mean_energy_top1 else "<="
    return verdict(name, ok, f"direct {d.mean_energy_top1:.4f} {cmp} latent {lat.mean_energy_top1:.4f} "
                   f"over {d.runs} runs each", trained.proxy)


def test_c6_noise_structure(corpus, verdict):
    name = "C6 additive-noise energy concentration"
    _need_corpus(corpus, verdict, name)
    assert _energy(corpus, CORPUS_PER_CLASS, verdict, name)


@pytest.mark.xfail(strict=True, reason="measured on the band fixture: direct 0.117 <= latent 0.174 at "
                                        "20 starts/class; the toy corpus gives direct 0.212 > latent 0.073")
def test_c6_proxy_synthetic(synthetic, verdict):
    assert _energy(synthetic, SYNTH_PER_CLASS, verdict, "C6 additive-noise energy concentration")


# ---------------------------------------------------------------- 7. t-SNE contract

def _perplexity(row):
    nz = row[row > 0]
    return math.exp(-float(np.sum(nz * np.log(nz))))


def test_c7_tsne_contract(synthetic, verdict, tmp_path):
    examples = synthetic.split.test + synthetic.split.val
    z = latent_codes(synthetic.models, examples)
    a = tsne(z, perplexity=30, iters=1000, seed=SEEDS["maximization"])
    b = tsne(z, perplexity=30, iters=1000, seed=SEEDS["maximization"])
    worst = max(abs(_perplexity(r) - 30) for r in a.conditional_p)
    tail = trailing_mean(a.kl_history[250:], 50)
    rises = int(np.sum(np.diff(tail) > 0))
    same = a.embedding.tobytes() == b.embedding.tobytes() and a.kl_history.tobytes() == b.kl_history.tobytes()
    ok = worst < 1e-3 and rises == 0 and (a.kl_history >= 0).all() and same
    verdict("C7 t-SNE contract", ok, f"{len(z)} latents: worst row perplexity error {worst:.1e} < 1e-3; "
            f"trailing-mean KL rises {rises} times after exaggeration; repeat bit-identical {same}")
    assert ok


# ---------------------------------------------------------------- 8. latent shift

def _shift(trained, verdict, name):
    examples = trained.split.test[:300]
    rep = latent_shift_report(trained.models, examples, MaxConfig(), perplexity=30, iters=1000,
                              seed=SEEDS["maximization"])
    wrong = sum(r.misclassified for r in rep.rows)
    if wrong == 0:
        verdict.not_verified(name + (f" [proxy: {trained.proxy}]" if trained.proxy else ""),
                             f"no misclassified examples among {len(examples)}, so the comparison is undefined")
    mis, cor = rep.mean_displacement(True), rep.mean_displacement(False)
    return verdict(name, mis > cor, f"mean displacement misclassified {mis:.3f} ({wrong} examples) > correct "
                   f"{cor:.3f} ({len(examples) - wrong})", trained.proxy)


def test_c8_latent_shift(corpus, verdict):
    name = "C8 latent-shift diagnostic"
    _need_corpus(corpus, verdict, name)
    assert _shift(corpus, verdict, name)


def test_c8_proxy_synthetic(synthetic, verdict):
    assert _shift(synthetic, verdict, "C8 latent-shift diagnostic")


# ---------------------------------------------------------------- 9. determinism

def _artifacts(out: Path, clf, clf_hist, ae, ae_hist, runs, embedding) -> dict[str, bytes]:
    out.mkdir(parents=True)
    save_checkpoint(clf, out / "classifier.amxc")
    clf_hist.write_csv(out / "classifier_history.csv")
    save_checkpoint(ae, out / "autoencoder.amxc")
    ae_hist.write_csv(out / "autoencoder_history.csv")
    for mode, results in runs.items():
        for c, rs in results.items():
            for i, r in enumerate(rs):
                write_result(r, out / mode, f"{c}_{i:03d}")
    np.savetxt(out / "tsne.csv", embedding, fmt="%.17g")
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_c9_determinism(synthetic, verdict, tmp_path):
    split, m = synthetic.split, synthetic.models
    z = latent_codes(m, split.test + split.val)
    first = _artifacts(tmp_path / "a", m.classifier, synthetic.histories["classifier"], m.autoencoder,
                       synthetic.histories["autoencoder"],
                       {mode: _max_runs(synthetic, mode, SYNTH_PER_CLASS)[0] for mode in ("direct", "latent")},
                       tsne(z, perplexity=30, iters=1000, seed=SEEDS["maximization"]).embedding)
    clf, clf_hist = train_classifier(split, TrainConfig(epochs=SYNTH_CLF_EPOCHS, seed=SEEDS["classifier"]))
    ae, ae_hist = train_autoencoder(split, TrainConfig(epochs=SYNTH_AE_EPOCHS, seed=SEEDS["autoencoder"]))
    again = ModelBundle(clf, ae, m.separate)
    runs = {mode: noise_protocol(mode, again, SYNTH_PER_CLASS, SEEDS["maximization"], MaxConfig())
            for mode in ("direct", "latent")}
    second = _artifacts(tmp_path / "b", clf, clf_hist, ae, ae_hist, runs,
                        tsne(latent_codes(again, split.test + split.val), perplexity=30, iters=1000,
                             seed=SEEDS["maximization"]).embedding)
    differing = sorted(k for k in first if first[k] != second.get(k)) + sorted(set(second) - set(first))
    ok = not differing
    verdict("C9 determinism", ok, f"{len(first)} artifact files from repeated training, maximization and t-SNE; "
            f"{len(differing)} differ" + (f" (first: {differing[0]})" if differing else ""))
    assert ok
