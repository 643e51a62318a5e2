"""Cosine scoring, EER (overall and per trial scenario), language probing,
score fusion and score histograms."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import TaskIndicator
from .network import Dense, DualLoraModel, MergedModel
from .synthdata import Corpus, Trial
from .tensor import Tensor, relu, softmax_cross_entropy, zero_grads

PAIRINGS = (
    ("SS-DL", "DS-SL"),  # worst case
    ("SS-SL", "DS-SL"),
    ("SS-DL", "DS-DL"),
    ("SS-SL", "DS-DL"),
)


def pairing_name(target: str, nontarget: str) -> str:
    return f"{target} vs {nontarget}"


WORST_CASE_NAME = pairing_name(*PAIRINGS[0])


class EvaluationError(ValueError):
    pass


@dataclass
class ScoreSet:
    enroll: list[str]
    test: list[str]
    scores: np.ndarray
    labels: list[str]
    scenarios: list[str]

    def __len__(self) -> int:
        return len(self.enroll)

    @property
    def is_target(self) -> np.ndarray:
        return np.array([lab == "target" for lab in self.labels])

    def targets(self) -> np.ndarray:
        return self.scores[self.is_target]

    def nontargets(self) -> np.ndarray:
        return self.scores[~self.is_target]

    def rows(self):
        return zip(self.enroll, self.test, self.scores, self.labels, self.scenarios)

    def select(self, target_scenario: str, nontarget_scenario: str) -> "ScoreSet":
        keep = [i for i, (lab, sc) in enumerate(zip(self.labels, self.scenarios))
                if (lab == "target" and sc == target_scenario) or (lab == "nontarget" and sc == nontarget_scenario)]
        return self._take(keep)

    def _take(self, keep) -> "ScoreSet":
        return ScoreSet([self.enroll[i] for i in keep], [self.test[i] for i in keep], self.scores[keep],
                        [self.labels[i] for i in keep], [self.scenarios[i] for i in keep])

    def with_scores(self, scores: np.ndarray) -> "ScoreSet":
        return ScoreSet(list(self.enroll), list(self.test), np.asarray(scores, dtype=np.float64),
                        list(self.labels), list(self.scenarios))

    @classmethod
    def from_trials(cls, trials: list[Trial], scores) -> "ScoreSet":
        return cls([t.enroll for t in trials], [t.test for t in trials], np.asarray(scores, dtype=np.float64),
                   [t.label for t in trials], [t.scenario for t in trials])


# -- scoring -----------------------------------------------------------------


def embed_corpus(model, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Speaker embeddings for ``(n, T, D)`` features from a merged or adapted model."""
    out = []
    for start in range(0, features.shape[0], batch_size):
        x = Tensor(features[start:start + batch_size])
        if isinstance(model, DualLoraModel):
            e = model.embed(x, TaskIndicator.SPK)
        elif isinstance(model, MergedModel):
            e = model.embed(x)
        else:
            e = model(x)
        out.append(e.data)
    return np.concatenate(out, axis=0)


def cosine_scores(emb: np.ndarray, index: dict[str, int], trials: list[Trial]) -> np.ndarray:
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    unit = emb / np.maximum(norms, 1e-12)
    try:
        a = np.array([index[t.enroll] for t in trials], dtype=np.int64)
        b = np.array([index[t.test] for t in trials], dtype=np.int64)
    except KeyError as exc:
        raise EvaluationError(f"utterance {exc.args[0]} is not in the corpus") from None
    return np.einsum("ij,ij->i", unit[a], unit[b])


def score_trials(model, trials: list[Trial], corpus: Corpus) -> ScoreSet:
    """Cosine similarity of L2-normalized speaker embeddings for every trial."""
    emb = embed_corpus(model, corpus.features())
    return ScoreSet.from_trials(trials, cosine_scores(emb, corpus.index(), trials))


# -- EER ---------------------------------------------------------------------


def operating_points(targets, nontargets) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """FRR and FAR at thresholds -inf, every midpoint between distinct scores, +inf.

    A trial is accepted when its score is >= the threshold.
    """
    tgt = np.sort(np.asarray(targets, dtype=np.float64))
    non = np.sort(np.asarray(nontargets, dtype=np.float64))
    uniq = np.unique(np.concatenate([tgt, non]))
    thr = np.concatenate([[-np.inf], (uniq[:-1] + uniq[1:]) / 2.0, [np.inf]])
    frr = np.searchsorted(tgt, thr, side="left") / tgt.size
    far = 1.0 - np.searchsorted(non, thr, side="left") / non.size
    return thr, frr, far


def compute_eer(targets, nontargets) -> tuple[float, float]:
    """Equal error rate in percent and the threshold where FAR and FRR cross.

    Between the two operating points that bracket the crossing, FAR and FRR
    are interpolated linearly.
    """
    targets = np.asarray(targets, dtype=np.float64)
    nontargets = np.asarray(nontargets, dtype=np.float64)
    if targets.size == 0 or nontargets.size == 0:
        raise EvaluationError("EER needs at least one target and one nontarget score")
    thr, frr, far = operating_points(targets, nontargets)
    diff = frr - far
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0:
        return 100.0 * frr[i], float(thr[i])
    d0, d1 = diff[i - 1], diff[i]
    w = d0 / (d0 - d1)
    eer = frr[i - 1] + w * (frr[i] - frr[i - 1])
    lo, hi = thr[i - 1], thr[i]
    if np.isinf(lo):
        threshold = hi
    elif np.isinf(hi):
        threshold = lo
    else:
        threshold = lo + w * (hi - lo)
    return 100.0 * float(eer), float(threshold)


@dataclass
class EerReport:
    overall_eer: float
    threshold_at_eer: float
    per_scenario: dict[str, float | None] = field(default_factory=dict)
    counts: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def worst_case(self) -> float | None:
        return self.per_scenario.get(WORST_CASE_NAME)

    def to_tsv(self) -> str:
        lines = ["pairing\teer_percent\tn_target\tn_nontarget"]
        for name, eer in self.per_scenario.items():
            nt, nn = self.counts[name]
            lines.append(f"{name}\t{'absent' if eer is None else f'{eer:.6f}'}\t{nt}\t{nn}")
        nt, nn = self.counts["overall"]
        lines.append(f"overall\t{self.overall_eer:.6f}\t{nt}\t{nn}")
        return "\n".join(lines) + "\n"


def scenario_eer(scores: ScoreSet, pairings=PAIRINGS) -> EerReport:
    overall, threshold = compute_eer(scores.targets(), scores.nontargets())
    per: dict[str, float | None] = {}
    counts = {"overall": (int(scores.is_target.sum()), int((~scores.is_target).sum()))}
    for tgt_sc, non_sc in pairings:
        name = pairing_name(tgt_sc, non_sc)
        sub = scores.select(tgt_sc, non_sc)
        t, n = sub.targets(), sub.nontargets()
        counts[name] = (t.size, n.size)
        per[name] = compute_eer(t, n)[0] if t.size and n.size else None
    return EerReport(overall, threshold, per, counts)


# -- probing -----------------------------------------------------------------


@dataclass
class ProbeReport:
    lid_accuracy: float
    n_train: int
    n_test: int


def probe_lid(
    embeddings,
    labels,
    split_seed: int,
    n_classes: int | None = None,
    hidden: int = 32,
    steps: int = 200,
    lr: float = 0.01,
    groups=None,
) -> ProbeReport:
    """Held-out language-ID accuracy (percent) of a fresh one-hidden-layer probe.

    Embeddings are L2-normalized and standardized with training-split
    statistics; the probe is trained with ``steps`` full-batch Adam updates.
    With ``groups`` (e.g. speaker ids) the 80/20 split is made over groups, so
    held-out utterances come from unseen speakers and the probe cannot read a
    speaker's usual language off their identity.
    """
    emb = np.array(embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    C = int(n_classes if n_classes is not None else y.max() + 1)
    n = emb.shape[0]
    if n < 2 * C:
        raise EvaluationError(f"probe needs at least {2 * C} embeddings, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([split_seed, 0x9B0E]))
    if groups is None:
        order = rng.permutation(n)
        n_train = int(round(0.8 * n))
        tr, te = order[:n_train], order[n_train:]
    else:
        groups = np.asarray(groups)
        uniq = rng.permutation(np.unique(groups))
        n_train = int(round(0.8 * uniq.size))
        if n_train in (0, uniq.size):
            raise EvaluationError("group split needs at least two groups on each side")
        in_train = np.isin(groups, uniq[:n_train])
        tr, te = np.flatnonzero(in_train), np.flatnonzero(~in_train)
    missing = sorted(set(range(C)) - set(y[tr].tolist()))
    if missing:
        raise EvaluationError(f"language class(es) {missing} absent from the probe training split")
    emb = emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    mu, sd = emb[tr].mean(axis=0), emb[tr].std(axis=0) + 1e-8
    emb = (emb - mu) / sd

    l1 = Dense(emb.shape[1], hidden, rng, "probe.fc1", gain=2.0)
    l2 = Dense(hidden, C, rng, "probe.fc2")
    params = l1.parameters() + l2.parameters()
    m = [np.zeros_like(p.data) for p in params]
    v = [np.zeros_like(p.data) for p in params]
    x_tr = Tensor(emb[tr])
    b1, b2 = 0.9, 0.999
    for step in range(1, steps + 1):
        zero_grads(params)
        softmax_cross_entropy(l2(relu(l1(x_tr))), y[tr]).backward()
        for p, mi, vi in zip(params, m, v):
            mi *= b1
            mi += (1 - b1) * p.grad
            vi *= b2
            vi += (1 - b2) * p.grad ** 2
            p.data -= lr * (mi / (1 - b1 ** step)) / (np.sqrt(vi / (1 - b2 ** step)) + 1e-8)
    pred = l2(relu(l1(Tensor(emb[te])))).data.argmax(axis=1)
    return ProbeReport(100.0 * float((pred == y[te]).mean()), len(tr), len(te))


# -- fusion ------------------------------------------------------------------


def fuse_scores(score_sets: list[ScoreSet]) -> ScoreSet:
    """Equal-weight average of per-system standardized scores."""
    if not score_sets:
        raise EvaluationError("nothing to fuse")
    ref = score_sets[0]
    for k, s in enumerate(score_sets[1:], 1):
        if len(s) != len(ref):
            raise EvaluationError(f"score set {k} has {len(s)} rows, expected {len(ref)}")
        for i, (a, b) in enumerate(zip(ref.rows(), s.rows())):
            if (a[0], a[1], a[3], a[4]) != (b[0], b[1], b[3], b[4]):
                raise EvaluationError(f"score set {k} differs at row {i}: {b[0]} {b[1]} vs {a[0]} {a[1]}")
    z = []
    for s in score_sets:
        sd = s.scores.std()
        z.append((s.scores - s.scores.mean()) / (sd if sd > 0 else 1.0))
    return ref.with_scores(np.mean(z, axis=0))


# -- histogram -----------------------------------------------------------------


def export_score_histogram(scores: ScoreSet, bins: int, pairing: tuple[str, str] | None = None,
                           path: str | Path | None = None) -> list[tuple[float, float, int, int]]:
    """Per-bin target / nontarget counts over a shared set of bin edges."""
    if bins < 2:
        raise EvaluationError("need at least two bins")
    sub = scores if pairing is None else scores.select(*pairing)
    edges = np.histogram_bin_edges(sub.scores, bins=bins)
    tc, _ = np.histogram(sub.targets(), bins=edges)
    nc, _ = np.histogram(sub.nontargets(), bins=edges)
    table = [(float(edges[i]), float(edges[i + 1]), int(tc[i]), int(nc[i])) for i in range(bins)]
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_low", "bin_high", "target_count", "nontarget_count"])
            for lo, hi, t, n in table:
                w.writerow([repr(lo), repr(hi), t, n])
    return table


# -- files -------------------------------------------------------------------


def write_scores(scores: ScoreSet, path: str | Path) -> None:
    with open(path, "w") as fh:
        for e, t, s in zip(scores.enroll, scores.test, scores.scores):
            fh.write(f"{e} {t} {float(s)!r}\n")


def read_scores(path: str | Path, trials: list[Trial]) -> ScoreSet:
    """Attach labels and scenarios from ``trials`` to a score file (same row order)."""
    enroll, test, vals = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise EvaluationError(f"{path}:{lineno}: expected 'enroll test score'")
            enroll.append(parts[0])
            test.append(parts[1])
            vals.append(float(parts[2]))
    if len(enroll) != len(trials):
        raise EvaluationError(f"{path}: {len(enroll)} scores for {len(trials)} trials")
    for i, (e, t, tr) in enumerate(zip(enroll, test, trials)):
        if (e, t) != (tr.enroll, tr.test):
            raise EvaluationError(f"{path}: row {i + 1} ({e} {t}) does not match trial ({tr.enroll} {tr.test})")
    return ScoreSet(enroll, test, np.array(vals), [t.label for t in trials], [t.scenario for t in trials])
