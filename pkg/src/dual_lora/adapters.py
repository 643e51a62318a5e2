"""Task-conditioned LoRA linear layers, gradient reversal and weight merging."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, Tensor, add, grl, linear, matmul, scale


class TaskIndicator(str, enum.Enum):
    SPK = "spk"
    LANG = "lang"


TASKS = (TaskIndicator.SPK, TaskIndicator.LANG)


class RankAsymmetryWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GrlConfig:
    eta: float = 1.0

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError(f"GRL eta must be non-negative, got {self.eta}")


def check_ranks(r_spk: int, r_lang: int) -> None:
    if r_spk <= 0 or r_lang <= 0:
        raise ValueError(f"LoRA ranks must be positive, got r_spk={r_spk}, r_lang={r_lang}")
    if r_spk <= r_lang:
        warnings.warn(
            f"r_spk={r_spk} <= r_lang={r_lang}: the speaker branch no longer has the larger rank",
            RankAsymmetryWarning,
            stacklevel=3,
        )


class LoraLinear:
    """Frozen ``W0`` (and optional bias) plus one (A, B) pair per task.

    ``A[t]`` has shape ``(r_t, d_in)`` and is drawn from N(0, 1/d_in); ``B[t]``
    is ``(d_out, r_t)`` and starts at zero, so every task's delta is exactly
    zero after construction.
    """

    def __init__(
        self,
        W0: np.ndarray,
        b0: np.ndarray | None = None,
        *,
        ranks: dict[TaskIndicator, int],
        alpha: float = 8.0,
        rng: np.random.Generator,
        name: str = "layer",
    ):
        W0 = np.asarray(W0, dtype=np.float64)
        if W0.ndim != 2:
            raise DimensionError(f"W0 must be a matrix, got shape {W0.shape}")
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        ranks = {TaskIndicator(t): int(r) for t, r in ranks.items()}
        check_ranks(ranks[TaskIndicator.SPK], ranks[TaskIndicator.LANG])
        d_out, d_in = W0.shape
        self.name = name
        self.alpha = float(alpha)
        self.rank = ranks
        self.W0 = Tensor(W0, requires_grad=False, name=f"{name}.W0")
        self.b0 = None if b0 is None else Tensor(b0, requires_grad=False, name=f"{name}.b0")
        self.A: dict[TaskIndicator, Tensor] = {}
        self.B: dict[TaskIndicator, Tensor] = {}
        for t in TASKS:
            r = ranks[t]
            self.A[t] = Tensor(rng.normal(0.0, np.sqrt(1.0 / d_in), size=(r, d_in)), True, f"{name}.A.{t.value}")
            self.B[t] = Tensor(np.zeros((d_out, r)), True, f"{name}.B.{t.value}")

    @property
    def d_in(self) -> int:
        return self.W0.shape[1]

    @property
    def d_out(self) -> int:
        return self.W0.shape[0]

    def scaling(self, t: TaskIndicator) -> float:
        return self.alpha / self.rank[TaskIndicator(t)]

    def adapter_parameters(self, t: TaskIndicator | None = None) -> list[Tensor]:
        tasks = TASKS if t is None else (TaskIndicator(t),)
        return [p for task in tasks for p in (self.A[task], self.B[task])]

    def delta(self, t: TaskIndicator) -> np.ndarray:
        t = TaskIndicator(t)
        return self.scaling(t) * (self.B[t].data @ self.A[t].data)

    def __call__(self, x: Tensor, t: TaskIndicator) -> Tensor:
        return lora_forward(self, x, t)


def lora_forward(layer: LoraLinear, x: Tensor, t: TaskIndicator) -> Tensor:
    """``W0 x (+ b0) + (alpha / r_t) * B_t (A_t x)`` using only task ``t``'s adapters."""
    t = TaskIndicator(t)
    if x.ndim != 2 or x.shape[1] != layer.d_in:
        raise DimensionError(f"{layer.name}: input {x.shape} does not match d_in={layer.d_in}")
    base = linear(x, layer.W0, layer.b0)
    low = matmul(linear(x, layer.A[t]), layer.B[t].T)
    return add(base, scale(low, layer.scaling(t)))


def merge_speaker_weights(layer: LoraLinear) -> np.ndarray:
    """Fold the speaker adapter into a plain weight: ``W0 + (alpha/r_spk) B_spk A_spk``.

    The language adapters are ignored and ``layer`` is left untouched.
    """
    return layer.W0.data + layer.delta(TaskIndicator.SPK)


def grl_forward(x: Tensor, cfg: GrlConfig) -> Tensor:
    return grl(x, cfg.eta)
