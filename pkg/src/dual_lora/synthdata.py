"""Seeded linear-Gaussian cross-lingual speaker corpus and trial lists.

Every frame of an utterance by speaker ``s`` in language ``l`` is
``P_s @ u_s + P_l @ v_l + sigma * eps``. The entanglement knob ``rho`` is the
probability that an utterance is in the speaker's home language.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

FEATURE_MAGIC = "DLRA-FEAT v1"
SCENARIOS = ("SS-SL", "SS-DL", "DS-SL", "DS-DL")

# seed-stream tags
_MIXING, _SPEAKERS, _LANGUAGES, _UTTERANCE, _TRIALS, _SPLIT = range(6)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    n_speakers: int = 40
    n_languages: int = 4
    utts_per_speaker: int = 30
    frames_per_utt: int = 20
    feat_dim: int = 24
    entanglement: float = 0.85
    noise_sigma: float = 0.3
    seed: int = 0
    speaker_dim: int = 8
    language_dim: int = 4
    speaker_scale: float = 0.3
    language_scale: float = 1.0

    def __post_init__(self):
        problems = []
        if self.n_speakers < 2:
            problems.append("n_speakers must be >= 2")
        if self.n_languages < 2:
            problems.append("n_languages must be >= 2")
        if self.utts_per_speaker < 1 or self.frames_per_utt < 1 or self.feat_dim < 1:
            problems.append("utts_per_speaker, frames_per_utt and feat_dim must be positive")
        if not 0.0 <= self.entanglement <= 1.0:
            problems.append("entanglement must lie in [0, 1]")
        if self.noise_sigma < 0:
            problems.append("noise_sigma must be >= 0")
        if self.speaker_dim < 1 or self.language_dim < 1:
            problems.append("latent dims must be positive")
        if self.speaker_scale < 0 or self.language_scale < 0:
            problems.append("speaker_scale and language_scale must be >= 0")
        if problems:
            raise CorpusError("; ".join(problems))


@dataclass
class UtteranceRecord:
    utt_id: str
    speaker_id: int
    language_id: int
    features: np.ndarray  # (T, D)


@dataclass
class Corpus:
    records: list[UtteranceRecord]
    n_languages: int

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.utt_id for r in self.records]

    @property
    def speakers(self) -> np.ndarray:
        return np.array([r.speaker_id for r in self.records], dtype=np.int64)

    @property
    def languages(self) -> np.ndarray:
        return np.array([r.language_id for r in self.records], dtype=np.int64)

    def features(self) -> np.ndarray:
        return np.stack([r.features for r in self.records])

    def metadata(self) -> list[tuple[str, int, int]]:
        return [(r.utt_id, r.speaker_id, r.language_id) for r in self.records]

    def index(self) -> dict[str, int]:
        return {r.utt_id: i for i, r in enumerate(self.records)}

    def subset(self, speakers: Iterable[int]) -> "Corpus":
        keep = set(int(s) for s in speakers)
        return Corpus([r for r in self.records if r.speaker_id in keep], self.n_languages)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *key]))


def mixing_matrices(spec: CorpusSpec) -> tuple[np.ndarray, np.ndarray]:
    rng = _rng(spec.seed, _MIXING)
    P_s = rng.normal(0.0, 1.0 / np.sqrt(spec.speaker_dim), size=(spec.feat_dim, spec.speaker_dim))
    P_l = rng.normal(0.0, 1.0 / np.sqrt(spec.language_dim), size=(spec.feat_dim, spec.language_dim))
    return P_s * spec.speaker_scale, P_l * spec.language_scale


def generate_corpus(spec: CorpusSpec, stream: int = 0) -> Corpus:
    """Build the corpus described by ``spec``.

    ``stream`` selects an independent population of speakers (and their
    utterances) while keeping the mixing matrices and language latents of
    ``spec.seed``; the backbone warm-up data uses ``stream=1``.
    """
    P_s, P_l = mixing_matrices(spec)
    v = _rng(spec.seed, _LANGUAGES).normal(size=(spec.n_languages, spec.language_dim))
    lang_part = v @ P_l.T  # (C, D)
    C = spec.n_languages
    other = (1.0 - spec.entanglement) / (C - 1)
    records = []
    for s in range(spec.n_speakers):
        u = _rng(spec.seed, _SPEAKERS, stream, s).normal(size=spec.speaker_dim)
        spk_part = P_s @ u
        home = s % C
        probs = np.full(C, other)
        probs[home] = spec.entanglement
        for j in range(spec.utts_per_speaker):
            index = s * spec.utts_per_speaker + j
            rng = _rng(spec.seed, _UTTERANCE, stream, index)
            lang = int(rng.choice(C, p=probs))
            noise = rng.normal(size=(spec.frames_per_utt, spec.feat_dim))
            frames = spk_part + lang_part[lang] + spec.noise_sigma * noise
            records.append(UtteranceRecord(f"s{stream}spk{s:03d}_u{j:03d}", s, lang, frames))
    return Corpus(records, C)


def split_speakers(corpus: Corpus, seed: int, dev_fraction: float = 0.2) -> tuple[Corpus, Corpus]:
    """Speaker-disjoint train/dev split; dev takes ``dev_fraction`` of speakers."""
    speakers = np.unique(corpus.speakers)
    order = _rng(seed, _SPLIT).permutation(speakers)
    n_dev = max(1, int(round(dev_fraction * len(speakers))))
    dev = sorted(int(s) for s in order[:n_dev])
    train = sorted(int(s) for s in order[n_dev:])
    return corpus.subset(train), corpus.subset(dev)


# -- trials -------------------------------------------------------------------


@dataclass(frozen=True)
class Trial:
    enroll: str
    test: str
    label: str  # "target" | "nontarget"
    scenario: str


def scenario_of(spk_a: int, lang_a: int, spk_b: int, lang_b: int) -> str:
    return ("SS" if spk_a == spk_b else "DS") + "-" + ("SL" if lang_a == lang_b else "DL")


def build_trials(metadata: list[tuple[str, int, int]], per_scenario_count: int, seed: int) -> list[Trial]:
    """Sample up to ``per_scenario_count`` unordered pairs per scenario.

    Pairs are drawn without replacement; scenarios with fewer candidates than
    requested contribute all of them.
    """
    if per_scenario_count < 1:
        raise CorpusError("per_scenario_count must be positive")
    speakers = {m[1] for m in metadata}
    languages = {m[2] for m in metadata}
    if len(speakers) < 2 or len(languages) < 2:
        raise CorpusError("trials need at least two speakers and two languages")
    n = len(metadata)
    spk = np.array([m[1] for m in metadata])
    lang = np.array([m[2] for m in metadata])
    ia, ib = np.triu_indices(n, k=1)
    same_spk = spk[ia] == spk[ib]
    same_lang = lang[ia] == lang[ib]
    rng = _rng(seed, _TRIALS)
    trials = []
    for name, mask in (
        ("SS-SL", same_spk & same_lang),
        ("SS-DL", same_spk & ~same_lang),
        ("DS-SL", ~same_spk & same_lang),
        ("DS-DL", ~same_spk & ~same_lang),
    ):
        cand = np.flatnonzero(mask)
        if cand.size == 0:
            raise CorpusError(f"scenario {name} cannot be constructed from this metadata")
        if cand.size > per_scenario_count:
            cand = np.sort(rng.choice(cand, size=per_scenario_count, replace=False))
        label = "target" if name.startswith("SS") else "nontarget"
        trials.extend(Trial(metadata[ia[k]][0], metadata[ib[k]][0], label, name) for k in cand)
    return trials


def audit_trials(trials: list[Trial], metadata: list[tuple[str, int, int]]) -> int:
    """Count trials whose label or scenario disagrees with the metadata."""
    meta = {m[0]: (m[1], m[2]) for m in metadata}
    bad = 0
    for t in trials:
        (sa, la), (sb, lb) = meta[t.enroll], meta[t.test]
        expected = scenario_of(sa, la, sb, lb)
        label = "target" if sa == sb else "nontarget"
        if t.enroll == t.test or t.scenario != expected or t.label != label:
            bad += 1
    return bad


WORST_CASE = ("SS-DL", "DS-SL")


def filter_pairing(trials: list[Trial], target_scenario: str, nontarget_scenario: str) -> list[Trial]:
    return [t for t in trials if (t.label == "target" and t.scenario == target_scenario)
            or (t.label == "nontarget" and t.scenario == nontarget_scenario)]


# -- file formats ---------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_features(corpus: Corpus, path: str | Path) -> None:
    recs = corpus.records
    if not recs:
        raise CorpusError("refusing to write an empty corpus")
    T, D = recs[0].features.shape
    S = len({r.speaker_id for r in recs})
    with open(path, "w") as fh:
        fh.write(f"{FEATURE_MAGIC} {S} {corpus.n_languages} {T} {D}\n")
        for r in recs:
            fh.write(f"{r.utt_id} {r.speaker_id} {r.language_id}\n")
            for row in r.features:
                fh.write(" ".join(map(_fmt, row)) + "\n")


def read_features(path: str | Path) -> Corpus:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().split()
        if " ".join(header[:2]) != FEATURE_MAGIC or len(header) != 6:
            raise CorpusError(f"{path}: not a feature file (bad header)")
        _, C, T, D = (int(x) for x in header[2:])
        lines = fh.read().splitlines()
    records = []
    step = T + 1
    if len(lines) % step:
        raise CorpusError(f"{path}: truncated feature file")
    for k in range(0, len(lines), step):
        utt, spk, lang = lines[k].split()
        frames = np.array([[float(v) for v in ln.split()] for ln in lines[k + 1:k + step]])
        if frames.shape != (T, D):
            raise CorpusError(f"{path}: utterance {utt} has frames of shape {frames.shape}, expected {(T, D)}")
        records.append(UtteranceRecord(utt, int(spk), int(lang), frames))
    return Corpus(records, C)


def write_metadata(metadata: list[tuple[str, int, int]], path: str | Path) -> None:
    with open(path, "w") as fh:
        for utt, spk, lang in metadata:
            fh.write(f"{utt} {spk} {lang}\n")


def read_metadata(path: str | Path) -> list[tuple[str, int, int]]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                utt, spk, lang = line.split()
                out.append((utt, int(spk), int(lang)))
    return out


def write_trials(trials: list[Trial], path: str | Path) -> None:
    with open(path, "w") as fh:
        for t in trials:
            fh.write(f"{t.label} {t.enroll} {t.test} {t.scenario}\n")


def read_trials(path: str | Path) -> list[Trial]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4 or parts[0] not in ("target", "nontarget") or parts[3] not in SCENARIOS:
                raise CorpusError(f"{path}:{lineno}: malformed trial line")
            out.append(Trial(parts[1], parts[2], parts[0], parts[3]))
    return out



# -- bundles --------------------------------------------------------------------


@dataclass
class CorpusBundle:
    """Warm-up source speakers, the train/dev split and the dev trial list."""

    source: Corpus
    train: Corpus
    dev: Corpus
    dev_trials: list[Trial]


def build_bundle(spec: CorpusSpec, trials_per_scenario: int = 1000) -> CorpusBundle:
    full = generate_corpus(spec)
    train, dev = split_speakers(full, spec.seed)
    trials = build_trials(dev.metadata(), trials_per_scenario, spec.seed)
    return CorpusBundle(generate_corpus(spec, stream=1), train, dev, trials)


BUNDLE_PARTS = ("source", "train", "dev")


def write_bundle(bundle: CorpusBundle, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for part in BUNDLE_PARTS:
        corpus = getattr(bundle, part)
        write_features(corpus, directory / f"{part}.feat")
        write_metadata(corpus.metadata(), directory / f"{part}.meta")
    write_trials(bundle.dev_trials, directory / "dev.trials")


def read_bundle(directory: str | Path) -> CorpusBundle:
    directory = Path(directory)
    parts = {}
    for part in BUNDLE_PARTS:
        corpus = read_features(directory / f"{part}.feat")
        if read_metadata(directory / f"{part}.meta") != corpus.metadata():
            raise CorpusError(f"{directory / (part + '.meta')}: metadata disagrees with {part}.feat")
        parts[part] = corpus
    return CorpusBundle(parts["source"], parts["train"], parts["dev"], read_trials(directory / "dev.trials"))
