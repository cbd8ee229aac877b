import numpy as np
import pytest

from contlego.harness import RunRecord, ScheduleError
from contlego.metrics import (
    MetricsError,
    NOT_REACHED,
    attention_cosine_similarity,
    compute_cl_metrics,
    first_clause_attention,
    forward_transfer,
    generalization_accuracy,
    performance_maintenance,
    preceding_clause_attention,
    tau,
    task_accuracy,
)


def make_record(acc, epochs_per=100):
    """acc: (positions, experiences, epochs) array."""
    P, I, K = acc.shape
    return RunRecord(
        accuracy=acc,
        eval_loss=np.zeros((I, K)),
        train_loss=np.zeros(K),
        lr_curve=np.zeros(K),
        experience_trained=np.repeat(np.arange(1, I + 1), epochs_per)[:K],
        epochs_per_experience=epochs_per,
        num_experiences=I,
        seed=0,
        config={},
    )


def blank(P=6, I=3, K=300):
    return np.zeros((P, I, K))


# --------------------------------------------------------------------------
# tau

def test_tau_immediate_crossing():
    acc = blank()
    acc[3, 0, :] = 1.0
    rec = make_record(acc)
    assert tau(rec, 4, 1) == 1


def test_tau_not_reached():
    acc = blank()
    acc[3, 0, :] = 0.5
    rec = make_record(acc)
    assert tau(rec, 4, 1) == NOT_REACHED


def test_tau_crossing_at_epoch_137_of_phase_2():
    acc = blank()
    acc[3, 1, :] = 0.5
    acc[3, 1, 136:] = 0.95  # global epoch 137 onward
    rec = make_record(acc)
    assert tau(rec, 4, 2) == 137


def test_tau_threshold_is_strict():
    acc = blank()
    acc[3, 0, :] = 0.9  # exactly alpha never counts
    rec = make_record(acc)
    assert tau(rec, 4, 1) == NOT_REACHED


def test_tau_bad_phase_index():
    rec = make_record(blank())
    with pytest.raises(ScheduleError):
        tau(rec, 4, 7)


# --------------------------------------------------------------------------
# TA / GA

def test_task_accuracy_constant_one():
    acc = blank()
    acc[3, 2, :] = 1.0
    assert task_accuracy(make_record(acc)) == 1.0


def test_task_accuracy_chance_level():
    acc = blank()
    acc[3, 2, :] = 0.5
    assert task_accuracy(make_record(acc)) == 0.5


def test_task_accuracy_last_ten_mean():
    acc = blank()
    acc[3, 2, -10:] = np.arange(0.91, 1.005, 0.01)
    assert abs(task_accuracy(make_record(acc)) - 0.955) < 1e-12


def test_generalization_accuracy_uses_a5():
    acc = blank()
    acc[3, 2, :] = 1.0  # a4 perfect
    acc[4, 2, :] = 0.5  # a5 at binary chance
    rec = make_record(acc)
    assert task_accuracy(rec) == 1.0
    assert generalization_accuracy(rec) == 0.5


def test_short_run_rejected():
    acc = np.ones((6, 1, 5))
    rec = make_record(acc, epochs_per=5)
    with pytest.raises(MetricsError):
        task_accuracy(rec)


# --------------------------------------------------------------------------
# FT

def test_forward_transfer_ratio():
    acc = blank()
    acc[3, 0, 49:100] = 1.0  # tau1 = 50 epochs into phase 1
    acc[3, 1, 109:200] = 1.0  # tau2 = global 110 -> 10 epochs into phase 2
    ft, reached = forward_transfer(make_record(acc))
    assert reached
    assert abs(ft - 5.0) < 1e-12


def test_forward_transfer_equal_taus_is_one():
    acc = blank()
    acc[3, 0, 24:100] = 1.0
    acc[3, 1, 124:200] = 1.0
    ft, reached = forward_transfer(make_record(acc))
    assert reached
    assert ft == 1.0


def test_forward_transfer_sentinel():
    acc = blank()
    acc[3, 0, 49:100] = 1.0  # tau1 = 50
    acc[3, 1, :] = 0.3  # phase 2 never crosses
    ft, reached = forward_transfer(make_record(acc))
    assert not reached
    assert abs(ft - 50 / 101) < 1e-12


# --------------------------------------------------------------------------
# PM

def test_pm_perfect_maintenance():
    acc = blank()
    acc[3, 0, :] = 0.8
    pc, _ = performance_maintenance(make_record(acc))
    assert pc == 0.0


def test_pm_complete_forgetting():
    acc = blank()
    acc[3, 0, :100] = 1.0
    acc[3, 0, 100:] = 0.0
    pc, _ = performance_maintenance(make_record(acc))
    assert pc == -1.0


def test_pm_small_drop():
    acc = blank()
    acc[3, 0, :100] = 1.0
    acc[3, 0, 100:] = 0.9
    pc, _ = performance_maintenance(make_record(acc))
    assert abs(pc - (0.9 - 1.0) / (0.9 + 1.0)) < 1e-12


def test_pm_zero_denominator_flagged_minus_one():
    acc = blank()
    pc, pl = performance_maintenance(make_record(acc))
    assert pc == -1.0
    assert pl == -1.0


def test_pm_literal_uses_start_windows_and_tenth():
    acc = blank()
    acc[3, 0, 0:10] = 0.2  # k = 1..10
    acc[3, 0, 100:110] = 0.6  # k = 101..110
    _, pl = performance_maintenance(make_record(acc))
    want = 0.1 * (6.0 - 2.0) / (6.0 + 2.0)
    assert abs(pl - want) < 1e-12


def test_compute_cl_metrics_bundle():
    acc = blank()
    acc[3, 0, 9:100] = 1.0
    acc[3, 0, 100:] = 0.1
    acc[3, 1, 109:] = 1.0
    acc[3, 2, :] = 0.97
    acc[4, 2, :] = 0.61
    m = compute_cl_metrics(make_record(acc))
    assert m.TA == pytest.approx(0.97)
    assert m.GA == pytest.approx(0.61)
    assert m.FT == pytest.approx(1.0)
    assert m.FT_reached
    assert m.PM_corrected == pytest.approx((0.1 - 1.0) / (0.1 + 1.0))


# --------------------------------------------------------------------------
# attention analytics, brute-force oracles

def brute_preceding(att, ci, canon):
    B, L, H, S, _ = att.shape
    T = ci.max() + 1
    scores = np.zeros(L)
    cnt = 0
    for b in range(B):
        co = canon[b][ci[b]]
        for c in range(1, T):
            for l in range(L):
                vals = []
                for h in range(H):
                    for q in range(S):
                        if co[q] != c:
                            continue
                        vals.append(sum(att[b, l, h, q, k]
                                        for k in range(S) if co[k] == c - 1))
                scores[l] += np.mean(vals)
            cnt += 1
    return scores / cnt


def brute_first(att, ci, canon):
    B, L, H, S, _ = att.shape
    T = ci.max() + 1
    out = np.zeros((L, T))
    for b in range(B):
        co = canon[b][ci[b]]
        for c in range(T):
            for l in range(L):
                vals = []
                for h in range(H):
                    for q in range(S):
                        if co[q] != c:
                            continue
                        vals.append(sum(att[b, l, h, q, k]
                                        for k in range(S) if co[k] == 0))
                out[l, c] += np.mean(vals)
    return out / B


def setup_attention(seed=0, B=3, L=2, H=2, S=12, T=4):
    rng = np.random.default_rng(seed)
    att = rng.random((B, L, H, S, S))
    att /= att.sum(axis=-1, keepdims=True)
    ci = np.tile(np.repeat(np.arange(T), S // T), (B, 1))
    canon = np.stack([rng.permutation(T) for _ in range(B)])
    return att, ci, canon


def test_preceding_matches_brute_force():
    att, ci, canon = setup_attention()
    got = preceding_clause_attention(att, ci, canon)
    want = brute_preceding(att, ci, canon)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_first_clause_matches_brute_force():
    att, ci, canon = setup_attention(seed=4)
    got = first_clause_attention(att, ci, canon)
    want = brute_first(att, ci, canon)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_identity_attention_scores():
    B, L, H, S, T = 2, 1, 1, 8, 4
    att = np.tile(np.eye(S), (B, L, H, 1, 1))
    ci = np.tile(np.repeat(np.arange(T), 2), (B, 1))
    canon = np.tile(np.arange(T), (B, 1))
    assert preceding_clause_attention(att, ci, canon) == pytest.approx(0.0)
    fc = first_clause_attention(att, ci, canon)
    np.testing.assert_allclose(fc[:, 0], 1.0)
    np.testing.assert_allclose(fc[:, 1:], 0.0)


def test_uniform_attention_scores():
    B, L, H, S, T = 2, 2, 1, 12, 4
    att = np.full((B, L, H, S, S), 1 / S)
    ci = np.tile(np.repeat(np.arange(T), 3), (B, 1))
    canon = np.tile(np.arange(T), (B, 1))
    np.testing.assert_allclose(preceding_clause_attention(att, ci, canon), 3 / S)
    np.testing.assert_allclose(first_clause_attention(att, ci, canon), 3 / S)


def test_all_mass_on_previous_clause_scores_one():
    B, L, H, T, per = 1, 1, 1, 3, 2
    S = T * per
    ci = np.tile(np.repeat(np.arange(T), per), (B, 1))
    canon = np.tile(np.arange(T), (B, 1))
    att = np.zeros((B, L, H, S, S))
    for q in range(S):
        c = ci[0][q]
        prev = max(c - 1, 0)
        cols = np.flatnonzero(ci[0] == prev)
        att[0, 0, 0, q, cols] = 1 / len(cols)
    np.testing.assert_allclose(preceding_clause_attention(att, ci, canon), 1.0)


def test_single_clause_rejected():
    att = np.full((1, 1, 1, 3, 3), 1 / 3)
    ci = np.zeros((1, 3), dtype=int)
    with pytest.raises(MetricsError):
        preceding_clause_attention(att, ci)


def test_cosine_identical_and_orthogonal():
    att, _, _ = setup_attention(seed=8)
    np.testing.assert_allclose(attention_cosine_similarity(att, att), 1.0)
    a = np.zeros((1, 1, 1, 2, 2))
    b = np.zeros((1, 1, 1, 2, 2))
    a[..., 0, 0] = 1.0
    b[..., 1, 1] = 1.0
    assert attention_cosine_similarity(a, b) == pytest.approx(0.0)


def test_cosine_small_perturbation_stays_high():
    att, _, _ = setup_attention(seed=2)
    rng = np.random.default_rng(0)
    noisy = att * (1 + 1e-3 * rng.standard_normal(att.shape))
    assert attention_cosine_similarity(att, noisy).min() > 0.999


def test_cosine_symmetry_and_scale_invariance():
    a, _, _ = setup_attention(seed=5)
    b, _, _ = setup_attention(seed=6)
    ab = attention_cosine_similarity(a, b)
    np.testing.assert_allclose(ab, attention_cosine_similarity(b, a))
    np.testing.assert_allclose(ab, attention_cosine_similarity(2.5 * a, 0.3 * b))


def test_cosine_shape_mismatch():
    a, _, _ = setup_attention()
    with pytest.raises(MetricsError):
        attention_cosine_similarity(a, a[:, :1])
