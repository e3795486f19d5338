"""Hard labels, uniform label smoothing and NFCS-derived soft labels.

Label distributions are ``numpy`` arrays ordered ``[p(no pain), p(pain)]``.
"""

import math

import numpy as np

from .errors import ContractError, DomainError

PAIN = "pain"
NO_PAIN = "no_pain"
CLASSES = (NO_PAIN, PAIN)

NFCS_MIN, NFCS_MAX = 0, 5
NFCS_PAIN_CUTOFF = 3
NFCS_CENTER = 2.5

LABEL_MODES = ("hard", "lsr", "nfcs_soft")


def class_index(label: str) -> int:
    try:
        return CLASSES.index(label)
    except ValueError:
        raise ContractError(f"unknown class label {label!r}; expected one of {CLASSES}") from None


def one_hot(label: str) -> np.ndarray:
    dist = np.zeros(2)
    dist[class_index(label)] = 1.0
    return dist


def _check_score(score):
    if isinstance(score, bool) or not NFCS_MIN <= score <= NFCS_MAX:
        raise DomainError(f"NFCS score {score!r} outside [{NFCS_MIN}, {NFCS_MAX}]")


def nfcs_sigmoid(score) -> float:
    """Pain membership probability ``1 / (1 + exp(-(score - 2.5)))``."""
    _check_score(score)
    return 1.0 / (1.0 + math.exp(-score + NFCS_CENTER))


def nfcs_soft_label(score) -> np.ndarray:
    s = nfcs_sigmoid(score)
    return np.array([1.0 - s, s])


def nfcs_hard_label(score) -> str:
    _check_score(score)
    return PAIN if score >= NFCS_PAIN_CUTOFF else NO_PAIN


def lsr_smooth(label: str, epsilon: float) -> np.ndarray:
    """Mix a one-hot label with the uniform distribution over two classes.

    The off class receives ``epsilon / 2`` and the true class the remainder, so
    ``lsr_smooth(PAIN, 0.2)`` is exactly ``[0.1, 0.9]``.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ContractError(f"smoothing epsilon {epsilon} outside [0, 1)")
    off = epsilon / 2.0
    dist = np.full(2, off)
    dist[class_index(label)] = 1.0 - off
    return dist


def target_distribution(label: str, nfcs, mode: str, epsilon: float = 0.0) -> np.ndarray:
    """Training target for one sample under a label mode.

    ``nfcs_soft`` requires a score; callers drop unscored samples beforehand.
    """
    if mode == "hard":
        return one_hot(label)
    if mode == "lsr":
        return lsr_smooth(label, epsilon)
    if mode == "nfcs_soft":
        if nfcs is None:
            raise ContractError("nfcs_soft mode needs an NFCS score")
        return nfcs_soft_label(nfcs)
    raise ContractError(f"unknown label mode {mode!r}; expected one of {LABEL_MODES}")
