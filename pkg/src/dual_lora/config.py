"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment. Curriculum phases are
given as repeated ``phase = epochs:lambda1:lambda2`` lines or as one
comma-separated ``phases = 1:1.0:0, 1:0.2:0.2, ...`` list. Unknown keys,
bad values and violated invariants are reported with the key name and line
number.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .adapters import RankAsymmetryWarning, check_ranks
from .network import ModelConfig
from .synthdata import CorpusSpec
from .training import CurriculumSchedule, Phase, TrainConfig, TrainMode

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def _positive(x):
    return x > 0


def _non_negative(x):
    return x >= 0


def _unit(x):
    return 0.0 <= x <= 1.0


def _mode(x):
    TrainMode(x)
    return True


# key -> (type, default, validator, requirement text)
KEYS: dict[str, tuple[type, Any, Callable[[Any], bool] | None, str]] = {
    "seed": (int, 0, _non_negative, ">= 0"),
    # corpus
    "n_speakers": (int, 40, lambda x: x >= 2, ">= 2"),
    "n_languages": (int, 4, lambda x: x >= 2, ">= 2"),
    "utts_per_speaker": (int, 30, _positive, "> 0"),
    "frames_per_utt": (int, 20, _positive, "> 0"),
    "feat_dim": (int, 24, _positive, "> 0"),
    "entanglement": (float, 0.85, _unit, "in [0, 1]"),
    "noise_sigma": (float, 0.3, _non_negative, ">= 0"),
    "speaker_dim": (int, CorpusSpec.speaker_dim, _positive, "> 0"),
    "language_dim": (int, CorpusSpec.language_dim, _positive, "> 0"),
    "speaker_scale": (float, CorpusSpec.speaker_scale, _non_negative, ">= 0"),
    "language_scale": (float, CorpusSpec.language_scale, _non_negative, ">= 0"),
    "trials_per_scenario": (int, 1000, _positive, "> 0"),
    # model
    "width": (int, 64, _positive, "> 0"),
    "depth": (int, 4, lambda x: x >= 2, ">= 2"),
    "d_emb": (int, 32, _positive, "> 0"),
    "d_emb_lang": (int, 16, _positive, "> 0"),
    "r_spk": (int, 16, _positive, "> 0"),
    "r_lang": (int, 4, _positive, "> 0"),
    "alpha": (float, 8.0, _positive, "> 0"),
    "disc_proj": (int, 16, _positive, "> 0"),
    "disc_hidden": (int, 32, _positive, "> 0"),
    "eta": (float, 1.0, _non_negative, ">= 0"),
    # identity loss
    "subcenters": (int, 3, lambda x: x >= 1, ">= 1"),
    "margin": (float, 0.2, _non_negative, ">= 0"),
    "scale": (float, 32.0, _positive, "> 0"),
    # optimisation
    "epochs": (int, None, _positive, "> 0"),
    "lr_start": (float, 1e-2, _positive, "> 0"),
    "lr_end": (float, 1e-4, _positive, "> 0"),
    "momentum": (float, 0.9, lambda x: 0.0 <= x < 1.0, "in [0, 1)"),
    "batch_size": (int, 32, _positive, "> 0"),
    "warmup_epochs": (int, 10, _non_negative, ">= 0"),
    "warmup_lr": (float, 0.05, _positive, "> 0"),
    "mode": (str, "dual-lora", _mode, "one of no-adv, std-adv, dual-lora"),
    # paths
    "corpus_dir": (str, None, None, ""),
    "out_dir": (str, None, None, ""),
}


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, Any]
    phases: tuple[Phase, ...]
    source: str | None = None
    warnings: tuple[str, ...] = field(default=())

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def mode(self) -> TrainMode:
        return TrainMode(self.values["mode"])

    def corpus_spec(self) -> CorpusSpec:
        names = [f.name for f in dataclasses.fields(CorpusSpec)]
        return CorpusSpec(**{k: self.values[k] for k in names})

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(feat_dim=v["feat_dim"], width=v["width"], depth=v["depth"], d_emb=v["d_emb"],
                           d_emb_lang=v["d_emb_lang"], r_spk=v["r_spk"], r_lang=v["r_lang"], alpha=v["alpha"],
                           disc_proj=v["disc_proj"], disc_hidden=v["disc_hidden"], n_languages=v["n_languages"])

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(model=self.model_config(), schedule=CurriculumSchedule(self.phases), eta=v["eta"],
                           subcenters=v["subcenters"], margin=v["margin"], scale=v["scale"],
                           lr_start=v["lr_start"], lr_end=v["lr_end"], momentum=v["momentum"],
                           batch_size=v["batch_size"], warmup_epochs=v["warmup_epochs"],
                           warmup_lr=v["warmup_lr"], seed=v["seed"])

    def echo(self) -> str:
        """Effective configuration in the input syntax; parsing it reproduces this config."""
        lines = ["# effective configuration"]
        for key in KEYS:
            val = self.values[key]
            if key == "epochs" or val is None:
                continue
            lines.append(f"{key} = {val!r}" if isinstance(val, float) else f"{key} = {val}")
        for p in self.phases:
            lines.append(f"phase = {p.epochs}:{p.lambda1!r}:{p.lambda2!r}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "RunConfig":
        text = self.echo() + "".join(f"{k} = {v}\n" for k, v in changes.items())
        return parse_config_text(text, dedupe=True)


def _convert(key: str, raw: str, lineno: int):
    typ, _, check, need = KEYS[key]
    try:
        if typ is int:
            val = int(raw)
        elif typ is float:
            val = float(raw)
        else:
            val = raw
    except ValueError:
        raise ConfigError(f"line {lineno}: {key}: expected {typ.__name__}, got {raw!r}") from None
    try:
        ok = check is None or check(val)
    except ValueError:
        ok = False
    if not ok:
        raise ConfigError(f"line {lineno}: {key}: value {raw!r} must be {need}")
    return val


def _parse_phase(raw: str, lineno: int) -> Phase:
    parts = [p.strip() for p in raw.split(":")]
    try:
        if len(parts) != 3:
            raise ValueError
        ph = Phase(int(parts[0]), float(parts[1]), float(parts[2]))
    except ValueError:
        raise ConfigError(f"line {lineno}: phase: expected epochs:lambda1:lambda2, got {raw!r}") from None
    if ph.epochs < 1 or ph.lambda1 < 0 or ph.lambda2 < 0:
        raise ConfigError(f"line {lineno}: phase: epochs must be >= 1 and lambdas >= 0")
    return ph


def _default_phases(epochs: int | None) -> tuple[Phase, ...]:
    base = CurriculumSchedule().phases
    if epochs is None:
        return base
    if epochs < len(base):
        raise ConfigError(f"epochs: {epochs} is fewer than the {len(base)} curriculum phases")
    q, r = divmod(epochs, len(base))
    return tuple(Phase(q + (1 if i < r else 0), p.lambda1, p.lambda2) for i, p in enumerate(base))


def parse_config_text(text: str, source: str | None = None, dedupe: bool = False) -> RunConfig:
    values: dict[str, Any] = {}
    seen_at: dict[str, int] = {}
    phases: list[Phase] = []
    phase_line = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in ("phase", "phases"):
            phases.extend(_parse_phase(item, lineno) for item in raw.split(","))
            phase_line = lineno
            continue
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        if key in seen_at and not dedupe:
            raise ConfigError(f"line {lineno}: {key}: duplicate key (first set on line {seen_at[key]})")
        values[key] = _convert(key, raw, lineno)
        seen_at[key] = lineno
    for key, (_, default, _, _) in KEYS.items():
        values.setdefault(key, default)

    def where(key: str) -> str:
        return f"line {seen_at[key]}: " if key in seen_at else ""

    if phases:
        total = sum(p.epochs for p in phases)
        if values["epochs"] is not None and values["epochs"] != total:
            raise ConfigError(f"{where('epochs')}epochs: {values['epochs']} disagrees with the phases "
                              f"(line {phase_line}), which total {total}")
        phase_tuple = tuple(phases)
    else:
        phase_tuple = _default_phases(values["epochs"])
    values["epochs"] = sum(p.epochs for p in phase_tuple)
    if values["lr_end"] > values["lr_start"]:
        raise ConfigError(f"{where('lr_end')}lr_end: must not exceed lr_start")

    notes = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        check_ranks(values["r_spk"], values["r_lang"])
    for w in caught:
        if issubclass(w.category, RankAsymmetryWarning):
            notes.append(str(w.message))
            warnings.warn(str(w.message), RankAsymmetryWarning, stacklevel=2)
    if values["mode"] == TrainMode.STD_ADV.value and all(p.lambda2 == 0 for p in phase_tuple):
        notes.append("std-adv with lambda2 = 0 in every phase never trains the adversary")
    cfg = RunConfig(values, phase_tuple, source, tuple(notes))
    try:
        cfg.corpus_spec()
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def parse_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        cfg = parse_config_text(text, str(path))
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    log.info("effective configuration (%s):\n%s", path, cfg.echo())
    return cfg
