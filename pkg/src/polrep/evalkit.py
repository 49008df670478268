"""Evaluation protocols: latent ordering, linear probes, imitation fidelity,
the steering benchmark, the projected-vs-naive path gap and 2-D PCA plot data."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.stats import rankdata, spearmanr

from .dataio import Dataset, sample_contexts
from .env import EnvConfig, knob_action, step_batch
from .steer import (SteeringQuery, Surrogate, decode_eval, primal_dual_run, steer)
from .trainer import Bundle


# --- latent ordering ---------------------------------------------------------

@dataclass
class OrderingReport:
    violation_rate: list
    spearman: list
    n_triplets: list
    n_anchors: int

    def rows(self):
        return [[k, self.violation_rate[k], self.spearman[k], self.n_triplets[k], self.n_anchors]
                for k in range(len(self.spearman))]


def _row_pearson(a, b):
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    den = np.sqrt((a ** 2).sum(axis=1) * (b ** 2).sum(axis=1))
    return np.where(den > 0, (a * b).sum(axis=1) / np.where(den > 0, den, 1), 0.0)


def anchor_spearman(z, labels, anchors=None):
    """Mean over anchors of the rank correlation between latent and label distances."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n = len(y)
    anchors = np.arange(n) if anchors is None else np.asarray(anchors)
    zd = np.sqrt(((z[anchors, None, :] - z[None, :, :]) ** 2).sum(-1))
    yd = np.abs(y[anchors, None] - y[None, :])
    keep = np.ones((len(anchors), n), dtype=bool)
    keep[np.arange(len(anchors)), anchors] = False
    zd = zd[keep].reshape(len(anchors), n - 1)
    yd = yd[keep].reshape(len(anchors), n - 1)
    return float(np.mean(_row_pearson(rankdata(zd, axis=1), rankdata(yd, axis=1))))


def ordering_metrics(z_per_task, returns, n_triplets=2000, rng=None, max_anchors=256):
    """Triplet violation rate and anchor-centred Spearman per task.

    A sampled triplet ``(i, j, l)`` with ``d_ij < d_il`` is violated when
    ``|z_i - z_j| >= |z_i - z_l|``; triplets with tied label distances are skipped.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    returns = np.asarray(returns, dtype=np.float64)
    n = len(returns)
    if n < 3:
        raise ValueError("ordering_metrics needs at least 3 embeddings")
    anchors = np.sort(rng.choice(n, size=min(n, max_anchors), replace=False))
    rates, rhos, counts = [], [], []
    for k, z in enumerate(z_per_task):
        z = np.asarray(z, dtype=np.float64)
        y = returns[:, k]
        trip = np.stack([rng.permutation(n)[:3] for _ in range(n_triplets)])
        i, j, l = trip.T
        dj, dl = np.abs(y[i] - y[j]), np.abs(y[i] - y[l])
        sj = np.linalg.norm(z[i] - z[j], axis=1)
        sl = np.linalg.norm(z[i] - z[l], axis=1)
        near_j = dj < dl
        near_l = dl < dj
        viol = (near_j & (sj >= sl)) | (near_l & (sl >= sj))
        valid = near_j | near_l
        counts.append(int(valid.sum()))
        rates.append(float(viol[valid].mean()) if valid.any() else 0.0)
        rhos.append(anchor_spearman(z, y, anchors))
    return OrderingReport(rates, rhos, counts, len(anchors))


# --- linear probe -----------------------------------------------------------------

def linear_probe(h_train, y_train, h_test, y_test, ridge=1e-6):
    """Ridge-regularized least squares with an unpenalized intercept.

    Returns ``(train_mse, test_mse)`` arrays with one entry per target column.
    """
    h_train = np.asarray(h_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64).reshape(len(h_train), -1)
    h_test = np.asarray(h_test, dtype=np.float64)
    y_test = np.asarray(y_test, dtype=np.float64).reshape(len(h_test), -1)
    if len(h_train) <= h_train.shape[1] + 1:
        raise ValueError("linear_probe needs more training points than dimensions + 1")
    h_mean, y_mean = h_train.mean(axis=0), y_train.mean(axis=0)
    Hc = h_train - h_mean
    W = np.linalg.solve(Hc.T @ Hc + ridge * np.eye(Hc.shape[1]), Hc.T @ (y_train - y_mean))

    def mse(h, y):
        return ((h - h_mean) @ W + y_mean - y) ** 2

    return mse(h_train, y_train).mean(axis=0), mse(h_test, y_test).mean(axis=0)


def encode_means(bundle: Bundle, dataset: Dataset, idx, seed=0, sample=False):
    """Posterior means (or samples) of one seeded context per trajectory."""
    rng = np.random.default_rng([seed, 11])
    contexts = sample_contexts(dataset, idx, bundle.config.context_length, rng)
    with torch.no_grad():
        post = bundle.model.encode(contexts)
        h = bundle.model.reparameterize(post, rng) if sample else post.mu
    return h.numpy().copy()


def probe_bundle(bundle: Bundle, dataset: Dataset, seed=0):
    """Linear probe from sampled representations to normalized returns, held-out knobs as test."""
    h_tr = encode_means(bundle, dataset, dataset.train_idx, seed, sample=True)
    h_te = encode_means(bundle, dataset, dataset.test_idx, seed, sample=True)
    return linear_probe(h_tr, dataset.normalized_returns(dataset.train_idx),
                        h_te, dataset.normalized_returns(dataset.test_idx))


def project_all(bundle: Bundle, h):
    with torch.no_grad():
        ht = torch.as_tensor(h)
        return [bundle.model.project(ht, k).numpy() for k in range(bundle.model.cfg.n_tasks)]


# --- imitation -----------------------------------------------------------------------

def relative_difference(realized, reference, eps=1.0):
    return np.abs(realized - reference) / (np.abs(reference) + eps)


def knob_policy_returns(knob, env_cfg: EnvConfig, n_eval=16, rng=None):
    """Mean returns of the true controller family, run in lockstep like ``decode_eval``."""
    rng = np.random.default_rng(0) if rng is None else rng
    states = np.zeros((n_eval, 2))
    returns = np.zeros((n_eval, 2))
    for _ in range(env_cfg.horizon):
        a = np.array([knob_action(knob, v, env_cfg) for v in states[:, 1]])
        a = a + rng.normal(0.0, env_cfg.noise_sigma, size=n_eval)
        states, r = step_batch(states, a, env_cfg)
        returns += r
    return returns.mean(axis=0)


def imitation_eval(bundle: Bundle, dataset: Dataset, idx, env_cfg: EnvConfig, n_eval=16,
                   seed=0, use_knob_policy=False):
    """Per-trajectory relative return differences ``|R~ - R| / (|R| + 1)``, shape (n, K)."""
    idx = np.asarray(idx)
    h = encode_means(bundle, dataset, idx, seed)
    out = np.zeros((len(idx), dataset.K))
    for row, (i, hi) in enumerate(zip(idx, h)):
        rng = np.random.default_rng([seed, 12, int(i)])
        if use_knob_policy:
            realized = knob_policy_returns(dataset.knobs[i], env_cfg, n_eval, rng)
        else:
            realized = decode_eval(hi, bundle.model, bundle.stats, env_cfg, n_eval, rng)
        out[row] = relative_difference(realized, dataset.returns[i].astype(np.float64))
    return out


# --- steering benchmark ------------------------------------------------------------

@dataclass
class SteeringBenchReport:
    success_rate: float  # S, percent
    target_error: float  # E_targ, percent
    constraint_violation: float  # E_cons, percent
    records: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["query", "target", "constraint", "success", "iterations", "pred_0", "pred_1",
                        "realized_0", "realized_1", "target_error", "constraint_violation"])
            for q, r in enumerate(self.records):
                w.writerow([q, repr(r["target"]), repr(r["constraint"]), int(r["success"]),
                            r["iterations"], *map(repr, r["predicted"]), *map(repr, r["realized"]),
                            repr(r["target_error"]), repr(r["constraint_violation"])])
            w.writerow(["summary", "", "", repr(self.success_rate), "", "", "", "", "",
                        repr(self.target_error), repr(self.constraint_violation)])


def return_curve(bank):
    """Per-knob mean returns of the bank, sorted by objective-0 return."""
    knobs = np.unique(bank.knobs)
    means = np.array([bank.returns[bank.knobs == w].mean(axis=0) for w in knobs])
    order = np.argsort(means[:, 0])
    return means[order]


def sample_queries(bank, n_queries, rng, **steer_kw):
    """Targets uniform over the middle 80% of the objective-0 range; energy bounds
    uniform between the lowest observed objective-1 return and the objective-1
    return the bank shows at the target."""
    curve = return_curve(bank)
    lo, hi = bank.returns[:, 0].min(), bank.returns[:, 0].max()
    span = hi - lo
    r1_min = bank.returns[:, 1].min()
    queries = []
    for _ in range(n_queries):
        target = float(rng.uniform(lo + 0.1 * span, hi - 0.1 * span))
        at_target = float(np.interp(target, curve[:, 0], curve[:, 1]))
        bound = float(rng.uniform(r1_min, at_target))
        h0 = bank.h[rng.integers(len(bank))].copy()
        queries.append(SteeringQuery(target, [(1, bound)], h0=h0, **steer_kw))
    return queries


def run_benchmark(bundle: Bundle, queries, env_cfg: EnvConfig, n_eval=16, seed=0):
    records = []
    for q_idx, q in enumerate(queries):
        rng = np.random.default_rng([seed, 13, q_idx])
        _, res = steer(q, bundle.model, bundle.bank, bundle.stats, env_cfg, n_eval, rng)
        records.append({
            "target": q.target,
            "constraint": q.constraints[0][1] if q.constraints else float("nan"),
            "success": res.success, "iterations": res.iterations,
            "predicted": [float(v) for v in res.predicted],
            "realized": [float(v) for v in res.realized],
            "target_error": res.target_error,
            "constraint_violation": res.constraint_violation,
        })
    S = 100.0 * np.mean([r["success"] for r in records])
    E_t = 100.0 * np.mean([r["target_error"] for r in records])
    E_c = 100.0 * np.mean([r["constraint_violation"] for r in records])
    return SteeringBenchReport(float(S), float(E_t), float(E_c), records)


def steering_benchmark(bundle: Bundle, env_cfg: EnvConfig, n_queries=50, seed=0, n_eval=16,
                       **steer_kw):
    rng = np.random.default_rng([seed, 14])
    return run_benchmark(bundle, sample_queries(bundle.bank, n_queries, rng, **steer_kw),
                         env_cfg, n_eval, seed)


# --- projected vs naive -------------------------------------------------------------

@dataclass
class PathGapReport:
    projected_gap: float
    naive_gap: float
    per_run: list

    @property
    def ratio(self):
        return self.naive_gap / max(self.projected_gap, 1e-12)


def path_gap(bundle: Bundle, query: SteeringQuery, env_cfg, n_points=8, n_eval=16, seed=0):
    """Mean |predicted - realized| objective-0 return over evenly spaced path iterates."""
    trace, _, _ = primal_dual_run(query, Surrogate(bundle.model), bundle.bank.h, bundle.stats)
    picks = np.unique(np.linspace(0, len(trace.h) - 1, n_points).round().astype(int))
    gaps = []
    for t in picks:
        rng = np.random.default_rng([seed, 15, int(t)])
        realized = decode_eval(trace.h[t], bundle.model, bundle.stats, env_cfg, n_eval, rng)
        pred = bundle.stats.denorm_return(trace.predicted[t])
        gaps.append(abs(pred[0] - realized[0]))
    return float(np.mean(gaps)), trace


def projection_ablation(bundle: Bundle, env_cfg: EnvConfig, n_runs=10, seed=0, n_eval=16,
                        **steer_kw):
    """Paired runs from identical queries and starts, with and without the tangent projector."""
    rng = np.random.default_rng([seed, 16])
    queries = sample_queries(bundle.bank, n_runs, rng, **steer_kw)
    per_run = []
    for q in queries:
        q_naive = SteeringQuery(**{**q.__dict__, "project": False})
        g_proj, _ = path_gap(bundle, q, env_cfg, n_eval=n_eval, seed=seed)
        g_naive, _ = path_gap(bundle, q_naive, env_cfg, n_eval=n_eval, seed=seed)
        per_run.append((g_proj, g_naive))
    arr = np.array(per_run)
    return PathGapReport(float(arr[:, 0].mean()), float(arr[:, 1].mean()), per_run)


# --- PCA plot data ----------------------------------------------------------------

def pca2d(embeddings):
    X = np.asarray(embeddings, dtype=np.float64)
    if len(X) < 3:
        raise ValueError("pca2d needs at least 3 embeddings")
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:2]
    # sign convention: largest-magnitude loading positive
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    coords = Xc @ (comps * signs[:, None]).T
    if coords.shape[1] < 2:
        coords = np.concatenate([coords, np.zeros((len(X), 2 - coords.shape[1]))], axis=1)
    return coords


def pc1_knob_spearman(embeddings, knobs):
    return abs(float(spearmanr(pca2d(embeddings)[:, 0], knobs).statistic))


def write_plot_csv(path, coords, returns, knobs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "R1", "R2", "knob"])
        for (x, y), r, k in zip(coords, returns, knobs):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(r[0])), repr(float(r[1])), repr(float(k))])


def write_plot_svg(path, coords, values, size=480, title=""):
    """Scatter of ``coords`` colored on a blue-to-red ramp by ``values``."""
    coords = np.asarray(coords, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    span = np.ptp(coords, axis=0)
    span[span == 0] = 1.0
    pts = (coords - coords.min(axis=0)) / span * (size - 40) + 20
    t = (v - v.min()) / (np.ptp(v) or 1.0)
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>',
             f'<text x="10" y="14" font-size="12">{title}</text>']
    for (x, y), c in zip(pts, t):
        r, b = int(255 * c), int(255 * (1 - c))
        lines.append(f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="2.5" fill="rgb({r},60,{b})"/>')
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
