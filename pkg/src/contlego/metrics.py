"""Continual-learning metrics and attention analytics computed from RunRecords.

All functions here are pure: they consume the accuracy tensor C[j][i][k]
(position j, test experience i, global epoch k) or captured attention maps,
and never touch model parameters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .harness import RunRecord, ScheduleError


class MetricsError(Exception):
    pass


NOT_REACHED = -1  # internal marker; callers see the sentinel value + flag


@dataclass(frozen=True)
class CLMetrics:
    TA: float
    GA: float
    FT: float
    FT_reached: bool  # False when either tau hit the phase_length+1 sentinel
    PM_corrected: float
    PM_literal: float
    alpha: float = 0.9

    def as_row(self) -> dict:
        return {
            "TA": self.TA,
            "GA": self.GA,
            "FT": self.FT,
            "FT_reached": int(self.FT_reached),
            "PM_corrected": self.PM_corrected,
            "PM_literal": self.PM_literal,
            "alpha": self.alpha,
        }


def tau(record: RunRecord, j: int, i: int, alpha: float = 0.9) -> int:
    """First global epoch within phase i where C_j^i crosses alpha.

    Returns NOT_REACHED (-1) if the curve never exceeds alpha in that phase.
    """
    window = record.phase_window(i)  # raises on bad phase index
    for k in window:
        if record.C(j, i, k) > alpha:
            return k
    return NOT_REACHED


def _last10(record: RunRecord, j: int, i: int, end_epoch: int) -> float:
    if end_epoch < 10:
        raise MetricsError(f"need >= 10 epochs before epoch {end_epoch} for the window mean")
    vals = record.accuracy[j - 1, i - 1, end_epoch - 10:end_epoch]
    if np.isnan(vals).any():
        raise MetricsError(f"missing eval values in epochs {end_epoch-9}..{end_epoch}")
    return float(vals.mean())


def task_accuracy(record: RunRecord, j: int = 4) -> float:
    """Mean accuracy on a_j of the last experience over the final 10 epochs."""
    return _last10(record, j, record.num_experiences, record.num_epochs)


def generalization_accuracy(record: RunRecord) -> float:
    """As task_accuracy but for the first beyond-training-length position a_5."""
    return task_accuracy(record, j=5)


def forward_transfer(record: RunRecord, alpha: float = 0.9) -> tuple[float, bool]:
    """tau_4^1 / tau_4^2 with taus counted as epochs into their phase.

    A tau that never crosses alpha is replaced by phase_length + 1 and the
    reached flag is cleared, keeping the ratio finite for sweep tables.
    """
    if record.num_experiences < 2:
        raise MetricsError("forward transfer needs at least two phases")
    e = record.epochs_per_experience
    reached = True
    taus = []
    for i in (1, 2):
        t = tau(record, 4, i, alpha)
        if t == NOT_REACHED:
            reached = False
            taus.append(e + 1)
        else:
            taus.append(t - record.phase_window(i).start + 1)
    return taus[0] / taus[1], reached


def performance_maintenance(record: RunRecord) -> tuple[float, float]:
    """(PM_corrected, PM_literal) for experience-1 a_4 accuracy.

    PM_corrected compares the last-10-epoch means of phases 1 and 2:
    (after - before) / (after + before), in [-1, 0] when accuracy drops.
    PM_literal evaluates the published expression verbatim: start-of-phase
    windows k=1..10 and k=101..110 with a leading 1/10 on the ratio.
    """
    if record.num_experiences < 2:
        raise MetricsError("performance maintenance needs at least two phases")
    e = record.epochs_per_experience
    before = _last10(record, 4, 1, record.phase_window(1).stop - 1)
    after = _last10(record, 4, 1, record.phase_window(2).stop - 1)
    if before + after == 0.0:
        corrected = -1.0
    else:
        corrected = (after - before) / (after + before)

    lit_b = record.accuracy[3, 0, 0:10]
    hi = min(e + 10, record.num_epochs)
    lit_a = record.accuracy[3, 0, e:hi]
    if np.isnan(lit_b).any() or np.isnan(lit_a).any():
        raise MetricsError("missing eval values in the literal PM windows")
    sb, sa = float(lit_b.sum()), float(lit_a.sum())
    literal = -1.0 if (sa + sb) == 0.0 else 0.1 * (sa - sb) / (sa + sb)
    return corrected, literal


def compute_cl_metrics(record: RunRecord, alpha: float = 0.9) -> CLMetrics:
    ft, reached = forward_transfer(record, alpha)
    pm_c, pm_l = performance_maintenance(record)
    return CLMetrics(
        TA=task_accuracy(record),
        GA=generalization_accuracy(record),
        FT=ft,
        FT_reached=reached,
        PM_corrected=pm_c,
        PM_literal=pm_l,
        alpha=alpha,
    )


# --------------------------------------------------------------------------
# attention analytics


def _clause_key_masks(clause_index: np.ndarray, num_clauses: int) -> list[np.ndarray]:
    return [clause_index == c for c in range(num_clauses)]


def preceding_clause_attention(attention: np.ndarray, clause_index: np.ndarray,
                               canonical: np.ndarray | None = None) -> np.ndarray:
    """Per-layer mean attention mass from clause-c queries onto clause-(c-1) keys.

    ``attention`` is (B, L, H, S, S) row-stochastic over keys; ``clause_index``
    is (B, S) giving each token's presentation clause; ``canonical`` is (B, T)
    mapping presentation clause -> canonical clause (identity when None).
    "Preceding" always means the canonical order c-1, regardless of shuffle.
    """
    B, L, H, S, _ = attention.shape
    clause_index = np.atleast_2d(clause_index)
    T = int(clause_index.max()) + 1
    if T < 2:
        raise MetricsError("preceding-clause score undefined for single-clause inputs")
    scores = np.zeros(L)
    count = 0
    for b in range(B):
        pres = clause_index[b]
        # canonical clause of each token
        canon_of = canonical[b][pres] if canonical is not None else pres
        ab = attention[b]  # (L, H, S, S)
        key_mass = np.stack([
            ab[..., canon_of == c].sum(axis=-1) for c in range(T)
        ])  # (T, L, H, S)
        for c in range(1, T):
            q_rows = np.flatnonzero(canon_of == c)
            # mean over query tokens of clause c and heads, per layer
            scores += key_mass[c - 1][:, :, q_rows].mean(axis=(1, 2))
            count += 1
    return scores / count


def first_clause_attention(attention: np.ndarray, clause_index: np.ndarray,
                           canonical: np.ndarray | None = None) -> np.ndarray:
    """(L, T) mean attention mass from clause-c queries onto clause-1 keys."""
    B, L, H, S, _ = attention.shape
    clause_index = np.atleast_2d(clause_index)
    T = int(clause_index.max()) + 1
    out = np.zeros((L, T))
    for b in range(B):
        pres = clause_index[b]
        canon_of = canonical[b][pres] if canonical is not None else pres
        first_mass = attention[b][..., canon_of == 0].sum(axis=-1)  # (L, H, S)
        for c in range(T):
            q_rows = np.flatnonzero(canon_of == c)
            out[:, c] += first_mass[:, :, q_rows].mean(axis=(1, 2))
    return out / B


def attention_cosine_similarity(att_a: np.ndarray, att_b: np.ndarray) -> np.ndarray:
    """Per-layer cosine similarity of head/example-averaged flattened patterns."""
    if att_a.shape != att_b.shape:
        raise MetricsError(f"attention shapes differ: {att_a.shape} vs {att_b.shape}")
    # (B, L, H, S, S) -> (L, S*S) averaged over batch and heads
    va = att_a.mean(axis=(0, 2)).reshape(att_a.shape[1], -1)
    vb = att_b.mean(axis=(0, 2)).reshape(att_b.shape[1], -1)
    na = np.linalg.norm(va, axis=1)
    nb = np.linalg.norm(vb, axis=1)
    denom = na * nb
    if (denom == 0).any():
        raise MetricsError("zero-norm attention pattern; cosine undefined")
    return (va * vb).sum(axis=1) / denom


@dataclass
class AttentionSummary:
    preceding_by_layer: np.ndarray  # (L,)
    first_clause_by_layer_clause: np.ndarray  # (L, T)

    def rows(self):
        out = []
        for l, v in enumerate(self.preceding_by_layer, start=1):
            out.append({"layer": l, "clause": "", "kind": "preceding", "score": float(v)})
        L, T = self.first_clause_by_layer_clause.shape
        for l in range(1, L + 1):
            for c in range(1, T + 1):
                out.append({
                    "layer": l, "clause": c, "kind": "first_clause",
                    "score": float(self.first_clause_by_layer_clause[l - 1, c - 1]),
                })
        return out


def summarize_attention(attention: np.ndarray, clause_index: np.ndarray,
                        canonical: np.ndarray | None = None) -> AttentionSummary:
    return AttentionSummary(
        preceding_by_layer=preceding_clause_attention(attention, clause_index, canonical),
        first_clause_by_layer_clause=first_clause_attention(attention, clause_index, canonical),
    )


# --------------------------------------------------------------------------
# table emission

METRICS_HEADER = ["model", "seed", "cell", "TA", "GA", "FT", "FT_reached",
                  "PM_corrected", "PM_literal", "alpha"]


def write_metrics_csv(path: str, rows: list[dict]):
    """One row per (model, seed, config cell); values repr'd for determinism."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([
                r["model"], r["seed"], r.get("cell", ""),
                repr(float(r["TA"])), repr(float(r["GA"])), repr(float(r["FT"])),
                int(r["FT_reached"]),
                repr(float(r["PM_corrected"])), repr(float(r["PM_literal"])),
                repr(float(r["alpha"])),
            ])


def write_attention_csv(path: str, summary: AttentionSummary):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["layer", "clause", "kind", "score"])
        w.writeheader()
        for row in summary.rows():
            w.writerow(row)
