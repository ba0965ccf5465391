import csv
import math

import numpy as np
import pytest

from rldf.analysis import (
    DEFAULT_EDGES,
    LossReport,
    TokenStat,
    bin_probabilities,
    confidence_profile,
    correlate,
    entropy_nats,
    token_stats,
    utility_report,
    write_csv,
)
from rldf.diffusion import DecodeConfig, DenoiseTrajectory, SequenceState, UnmaskEvent, decode
from rldf.errors import UndefinedCorrelationError
from rldf.model import entropy, predict


def two_point_stats(probs):
    """Distributions (p, 1-p) with p >= 1/2: entropy falls as p rises."""
    out = []
    for i, p in enumerate(probs):
        h = -(p * math.log(p) + (1 - p) * math.log(1 - p)) if p < 1 else 0.0
        out.append(TokenStat(i, 1, p, h))
    return out


def test_monotone_pairs_give_rank_minus_one():
    r, rho = correlate(two_point_stats([0.5, 0.6, 0.75, 0.9, 0.99]))
    assert rho == pytest.approx(-1.0)
    assert -1 <= r < -0.9


def test_entropy_equal_to_minus_log_prob():
    stats = [TokenStat(i, 1, p, -math.log(p)) for i, p in enumerate([0.1, 0.3, 0.5, 0.8])]
    assert correlate(stats)[1] == pytest.approx(-1.0)


def test_correlation_errors():
    with pytest.raises(UndefinedCorrelationError):
        correlate(two_point_stats([0.6, 0.7]))
    with pytest.raises(UndefinedCorrelationError):
        correlate([TokenStat(i, 1, 0.5, 0.1 * i) for i in range(5)])


def test_correlations_stay_in_bounds():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(3, 30))
        r, rho = correlate([TokenStat(0, 1, float(p), float(h)) for p, h in rng.random((n, 2))])
        assert abs(r) <= 1 and abs(rho) <= 1


def test_histogram_top_bin_and_conservation():
    h = bin_probabilities([0.95] * 40)
    assert h.counts[-1] == 40 and h.total == 40 and h.high_fraction == 1.0
    rng = np.random.default_rng(1)
    u = 1.0 - rng.random(100_000)
    h = bin_probabilities(u)
    assert h.total == 100_000
    assert abs(h.counts[-1] / h.total - 0.10) <= 0.01
    assert abs(h.high_fraction - 0.10) <= 0.01
    assert h.edges == DEFAULT_EDGES
    assert bin_probabilities([1.0]).counts[-1] == 1


def test_recorded_entropies_match_model(peaked_model):
    rng = np.random.default_rng(2)
    tr = decode(peaked_model, (1, 2, 10, 3, 4), DecodeConfig(length=8), rng)
    for ev in tr.events:
        dist = predict(peaked_model, tr.state_at(ev.step))
        assert np.allclose(ev.entropies, entropy(dist[list(ev.positions)]), atol=1e-9, rtol=0)
        assert np.allclose(entropy_nats(dist), entropy(dist), atol=1e-9, rtol=0)
    stats = token_stats([tr])
    assert len(stats) == tr.length
    assert all(0 <= s.entropy <= math.log(16) and 0 < s.prob <= 1 for s in stats)


def test_token_stats_require_entropies():
    ev = UnmaskEvent(1, (0,), (0.5,))
    tr = DenoiseTrajectory((1,), (ev,), SequenceState((1,), (3,)), DecodeConfig(length=1))
    with pytest.raises(ValueError):
        token_stats([tr])


def traj_with(T, probs_per_step):
    events = [UnmaskEvent(T - j, (j,), (p,)) for j, p in enumerate(probs_per_step)]
    final = SequenceState((1,), tuple(range(T)))
    return DenoiseTrajectory((1,), tuple(events), final, DecodeConfig(length=T))


def test_confidence_profile_buckets_by_progress():
    rows = confidence_profile([traj_with(2, [0.2, 0.8]), traj_with(4, [0.1, 0.3, 0.5, 0.7])], n_buckets=4)
    # progress of the j-th event of T is (j + 0.5) / T
    assert [r["n"] for r in rows] == [1, 2, 1, 2]
    assert rows[0]["mean_prob"] == pytest.approx(0.1)
    assert rows[1]["mean_prob"] == pytest.approx(0.25)
    assert rows[3]["mean_prob"] == pytest.approx(0.75)
    assert rows[3]["q25"] <= rows[3]["mean_prob"] <= rows[3]["q75"]
    empty = confidence_profile([traj_with(1, [0.4])], n_buckets=4)
    assert empty[0]["n"] == 0 and math.isnan(empty[0]["mean_prob"])


def test_utility_report_groups_configurations():
    assert utility_report([]) == []
    reps = [LossReport("x0", True, 1.0, 0.0, 2.0, 0.5), LossReport("x0", True, 3.0, 0.0, 4.0, 0.3),
            LossReport("x_prev", False, 0.5, 0.0, 1.0, 0.1)]
    rows = utility_report(reps)
    assert rows[0] == {"target": "x0", "clipped": True, "n": 2, "mean_grad_norm": 3.0,
                       "mean_loss": 2.0, "mean_token_utility": pytest.approx(0.4)}
    assert rows[1]["target"] == "x_prev"


def test_csv_uses_six_significant_digits(tmp_path):
    path = tmp_path / "t.csv"
    write_csv(path, [{"a": 1 / 3, "b": 12345678.9, "c": True, "d": 7}])
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows == [["a", "b", "c", "d"], ["0.333333", "1.23457e+07", "True", "7"]]
    write_csv(tmp_path / "empty.csv", [], header=["x"])
    assert (tmp_path / "empty.csv").read_text().strip() == "x"
