"""Executable checks of the rate identities, bounds, operator identities,
gradients and invariances, each producing a machine-readable report.

Hard checks pass only with zero failures at their tolerance. Soft checks
publish a statistic next to the threshold it is judged against; all
tolerances and thresholds live in :data:`HARD_TOL` and :data:`SOFT_THRESHOLDS`.

CSV report columns: ``name, kind, trials, failures, worst, tolerance,
statistic, threshold, passed``. The JSON report additionally carries a
``details`` object per check and the ``overall`` flag.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import spearmanr

from . import autograd as ag
from .coding_rate import (
    RateConfig,
    coding_rate,
    coding_rate_dual,
    per_basis_rate,
    per_basis_rate_sum,
    projected_coding_rate,
    projected_rate_gradient,
)
from .datagen import SynthConfig, class_bases, gen_image
from .decoder import DecoderConfig, forward, init_params, perturb, predict_labels
from .matcore import derive_seed, qr_orthonormalize, rng
from .operators import concat_sa_decompose, mssa_update, recombine_terms
from .subspace import QbarSpec, closed_form_qbar_rate, kmeans, lowrank_quality, pca, proportional_counts

HARD_TOL = {
    "rate_identity": 1e-9,
    "bounds": 1e-9,
    "decomposition": 1e-12,
    "gradient": 1e-5,
    "gauge": 1e-10,
    "closed_form": 1e-9,
}
SOFT_THRESHOLDS = {
    "rz_ge_rq": 0.95,
    "sigma_sweep_spearman": 0.8,
    "lambda_counts_win_rate": 0.9,
    "probe_sign_agreement": 0.7,
}
# absolute floor on the relative-error denominator; keeps structurally zero
# gradients (finite-difference roundoff ~1e-10) from reading as large relative
# error, while staying well below real gradient norms (~1e-2 and up)
GRAD_FLOOR = 1e-3
FD_STEP = 1e-6

DEFAULT_TRIALS = {
    "rate_identity": 1000,
    "bounds": 1000,
    "decomposition": 500,
    "rz_ge_rq": 200,
    "gauge": 50,
    "gradients": 20,
    "lowrank_quality": 200,
    "sigma_sweep": 10,
    "lambda_counts": 100,
}


@dataclass
class CheckReport:
    name: str
    kind: str  # "hard" or "soft"
    trials: int
    failures: int
    worst: float
    tolerance: float
    passed: bool
    statistic: Optional[float] = None
    threshold: Optional[float] = None
    details: dict = field(default_factory=dict)

    def row(self):
        return {k: v for k, v in asdict(self).items() if k != "details"}


# --- individual checks --------------------------------------------------------


def check_rate_identities(trials=1000, seed=0, cfg=None):
    """Cholesky rate vs eigenvalue form vs dual (N x N) form."""
    cfg = cfg or RateConfig()
    gen = rng(seed)
    tol = HARD_TOL["rate_identity"]
    worst, failures = 0.0, 0
    for _ in range(trials):
        D, N = (int(v) for v in gen.integers(1, 65, size=2))
        Z = gen.standard_normal((D, N)) * gen.uniform(0.1, 3.0)
        r = coding_rate(Z, cfg)
        lam = np.clip(np.linalg.eigvalsh(Z @ Z.T), 0.0, None)
        eig = 0.5 * float(np.sum(np.log1p(cfg.scale(D, N) * lam)))
        err = max(abs(r - eig), abs(r - coding_rate_dual(Z, cfg)))
        worst = max(worst, err)
        failures += err > tol
    return CheckReport("rate_identity", "hard", trials, failures, worst, tol, failures == 0)


def upper_bound_gamma(Z, Pp):
    """1/2 M(M-1) times the largest pairwise ratio of projected variances."""
    M = Pp.shape[1]
    if M < 2:
        return 0.0
    var = np.sum((Pp.T @ Z) ** 2, axis=1) / Z.shape[1]
    if var.min() <= 0:
        return math.inf
    return 0.5 * M * (M - 1) * float(var.max() / var.min())


def check_bounds(trials=1000, seed=0, cfg=None, head_dims=(2, 4, 8)):
    """Lower bound with radius M*eps per basis, and upper bound with per-instance gamma."""
    cfg = cfg or RateConfig()
    gen = rng(seed)
    tol = HARD_TOL["bounds"]
    lower_fail = upper_fail = 0
    worst_lower = worst_upper = -math.inf
    for t in range(trials):
        M = head_dims[t % len(head_dims)]
        D = int(gen.integers(M, 33))
        N = int(gen.integers(2, 49))
        Z = gen.standard_normal((D, N)) * gen.uniform(0.1, 3.0, size=(D, 1))
        Pp = qr_orthonormalize(gen.standard_normal((D, M)))
        mid = projected_coding_rate(Z, Pp, cfg)
        wide = RateConfig(epsilon=M * cfg.epsilon)
        lower = sum(per_basis_rate(Z, Pp[:, i], wide) for i in range(M)) / M
        upper = per_basis_rate_sum(Z, Pp, cfg) + upper_bound_gamma(Z, Pp)
        worst_lower = max(worst_lower, lower - mid)
        worst_upper = max(worst_upper, mid - upper)
        lower_fail += lower > mid + tol
        upper_fail += mid > upper + tol
    failures = lower_fail + upper_fail
    return CheckReport(
        "bounds",
        "hard",
        trials,
        failures,
        max(worst_lower, worst_upper),
        tol,
        failures == 0,
        details={
            "lower_failures": lower_fail,
            "upper_failures": upper_fail,
            "max_lower_minus_rate": worst_lower,
            "max_rate_minus_upper": worst_upper,
        },
    )


def check_decomposition(trials=500, seed=0):
    gen = rng(seed)
    tol = HARD_TOL["decomposition"]
    worst, failures = 0.0, 0
    for _ in range(trials):
        D = int(gen.integers(1, 9))
        N = int(gen.integers(1, 17))
        C = int(gen.integers(1, 6))
        Z = 0.5 * gen.standard_normal((D, N))
        Q = 0.5 * gen.standard_normal((D, C))
        alpha = float(gen.uniform(-1.0, 1.0))
        dec = concat_sa_decompose(Z, Q, alpha)
        z, q = recombine_terms(Z, Q, alpha, dec.terms)
        err = max(np.max(np.abs(z - dec.z_next)), np.max(np.abs(q - dec.q_next)))
        worst = max(worst, float(err))
        failures += err > tol
    return CheckReport("decomposition", "hard", trials, failures, worst, tol, failures == 0)


def check_rz_ge_rq(trials=200, seed=0, cfg=None, synth=None):
    """Fraction of synthetic images whose k-means surrogate has R(Qbar) <= R(Z)."""
    cfg = cfg or RateConfig()
    synth = synth or SynthConfig(seed=derive_seed(seed, "rz_ge_rq.data") % 2**32)
    bases = class_bases(synth)
    hits, gaps = 0, []
    for t in range(trials):
        Z = gen_image(synth, bases, t).embeddings
        km = kmeans(Z, synth.classes, seed=derive_seed(seed, f"kmeans:{t}"))
        q = lowrank_quality(Z, QbarSpec.from_kmeans(km), cfg)
        hits += q.rate_z >= q.rate_qbar
        gaps.append(q.rate_z - q.rate_qbar)
    frac = hits / trials
    thr = SOFT_THRESHOLDS["rz_ge_rq"]
    return CheckReport(
        "rz_ge_rq",
        "soft",
        trials,
        trials - hits,
        float(-min(gaps)) if gaps else 0.0,
        0.0,
        frac >= thr,
        frac,
        thr,
        {"mean_gap": float(np.mean(gaps))},
    )


def _random_model(gen, variant, D=8, C=3, heads=2, head_dim=2, layers=1):
    config = DecoderConfig(
        variant=variant,
        sa_layers=layers,
        ca_layers=layers,
        heads=heads,
        head_dim=head_dim,
        num_classes=C,
        dim=D,
    )
    params = init_params(config, int(gen.integers(2**63)), q_scale=0.5)
    arrays = []
    for name, a in params.flatten():
        if name.endswith("alpha"):
            arrays.append(np.asarray(gen.uniform(-0.8, 0.8)))
        elif name.endswith("gain"):
            arrays.append(1.0 + 0.2 * gen.standard_normal(a.shape))
        elif name.endswith("bias"):
            arrays.append(0.1 * gen.standard_normal(a.shape))
        else:
            arrays.append(a)
    return config, params.with_arrays(arrays)


def check_gauge_invariance(trials=50, seed=0, noise_sigma=0.1):
    """Per-head orthogonal transforms must leave logits unchanged; whole-matrix
    rotations and Gaussian noise are only reported as label agreement."""
    gen = rng(seed)
    tol = HARD_TOL["gauge"]
    worst, failures = 0.0, 0
    agree = {"full_orthogonal": [], "gaussian_noise": []}
    for t in range(trials):
        variant = "CA" if t % 2 == 0 else "SA"
        config, params = _random_model(gen, variant, D=16, C=4, heads=2, head_dim=4, layers=2)
        Z = gen.standard_normal((16, 64))
        base = forward(Z, params, config).logits
        labels = predict_labels(base)
        s = int(gen.integers(2**63))
        pert = forward(Z, perturb(params, config, "per_head_orthogonal", s), config).logits
        err = float(np.max(np.abs(pert - base)))
        worst = max(worst, err)
        failures += err > tol or not np.array_equal(predict_labels(pert), labels)
        for kind in agree:
            other = perturb(params, config, kind, s, noise_sigma)
            lab = predict_labels(forward(Z, other, config).logits)
            agree[kind].append(float(np.mean(lab == labels)))
    details = {f"{k}_agreement": float(np.mean(v)) for k, v in agree.items()}
    details["noise_sigma"] = noise_sigma
    return CheckReport("gauge", "hard", trials, failures, worst, tol, failures == 0, details=details)


def _rel_err(fd, an):
    return float(np.linalg.norm(fd - an) / max(np.linalg.norm(fd), np.linalg.norm(an), GRAD_FLOOR))


def fd_gradient(f, x, step=FD_STEP):
    """Central differences of scalar ``f`` at array ``x``; step scales with |x|."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        h = step * max(1.0, abs(x[idx]))
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def decoder_param_gradient_errors(config, params, Z, labels):
    """[(name, rel err)] of autograd vs central differences for every tensor."""
    from .train import loss_graph

    names = [n for n, _ in params.flatten()]
    arrays = [np.array(a, dtype=np.float64) for _, a in params.flatten()]
    nodes = {n: ag.leaf(a, n) for n, a in zip(names, arrays)}
    _, grads = ag.value_and_grad(loss_graph(nodes, config, Z, labels), [nodes[n] for n in names])
    out = []
    for i, name in enumerate(names):

        def f(x, i=i):
            cur = {n: ag.leaf(a, n) for n, a in zip(names, arrays)}
            cur[names[i]] = ag.leaf(x, names[i])
            return float(loss_graph(cur, config, Z, labels).value)

        out.append((name, _rel_err(fd_gradient(f, arrays[i]), grads[i])))
    return out


def check_gradients(trials=20, seed=0, cfg=None):
    """Projected-rate gradient and full DEPICT-CA parameter gradients vs
    central differences. Also reports (without a threshold) the cosine between
    the softmax MSSA step and the exact rate gradient."""
    cfg = cfg or RateConfig()
    tol = HARD_TOL["gradient"]
    worst, failures = 0.0, 0
    rate_worst = model_worst = 0.0
    cosines = []
    for t in range(trials):
        gen = rng(derive_seed(seed, f"trial:{t}"))
        D, N, M = int(gen.integers(3, 9)), int(gen.integers(2, 17)), int(gen.integers(1, 4))
        M = min(M, D)
        Z = gen.standard_normal((D, N))
        Pp = qr_orthonormalize(gen.standard_normal((D, M)))
        fd = fd_gradient(lambda x: projected_coding_rate(x, Pp, cfg), Z)
        e = _rel_err(fd, projected_rate_gradient(Z, Pp, cfg))
        rate_worst = max(rate_worst, e)
        failures += e > tol
        step = mssa_update(Pp @ (Pp.T @ Z), Pp, 1.0, cfg, form="full")
        grad = projected_rate_gradient(Pp @ (Pp.T @ Z), Pp, cfg)
        denom = np.linalg.norm(step) * np.linalg.norm(grad)
        if denom > 0:
            cosines.append(float(np.sum(step * grad) / denom))

        config, params = _random_model(gen, "CA", D=8, C=3, heads=2, head_dim=2, layers=1)
        Zm = gen.standard_normal((8, 16))
        labels = gen.integers(0, 3, size=16)
        for _, e in decoder_param_gradient_errors(config, params, Zm, labels):
            model_worst = max(model_worst, e)
            failures += e > tol
    worst = max(rate_worst, model_worst)
    return CheckReport(
        "gradients",
        "hard",
        trials,
        failures,
        worst,
        tol,
        failures == 0,
        details={
            "rate_gradient_worst": rate_worst,
            "decoder_gradient_worst": model_worst,
            "mssa_vs_gradient_cosine_mean": float(np.mean(cosines)) if cosines else None,
            "mssa_vs_gradient_cosine_min": float(np.min(cosines)) if cosines else None,
        },
    )


def _random_composition(gen, N, C):
    cuts = np.sort(gen.choice(np.arange(1, N), size=C - 1, replace=False))
    return np.diff(np.concatenate([[0], cuts, [N]]))


def _lambda_vs_random(seed, trials, noise, cfg, C=4):
    synth = SynthConfig(
        subspace_dim=1,
        classes=C,
        min_classes=C,
        max_classes=C,
        noise=noise,
        seed=derive_seed(seed, "lambda.data") % 2**32,
    )
    bases = class_bases(synth)
    gen = rng(derive_seed(seed, f"lambda.counts:{noise}"))
    wins = 0
    for t in range(trials):
        Z = gen_image(synth, bases, t, centered=False).embeddings
        Z = Z / np.linalg.norm(Z, axis=0, keepdims=True)
        N = Z.shape[1]
        res = pca(Z, C, center=False)
        prop = proportional_counts(res.variances, N)
        rand = _random_composition(gen, N, C)
        g_prop = lowrank_quality(Z, QbarSpec(res.directions, prop, "principal_directions"), cfg).gap
        g_rand = lowrank_quality(Z, QbarSpec(res.directions, rand, "principal_directions"), cfg).gap
        wins += g_prop <= g_rand
    return wins / trials


def _sigma_sweep(seed, reps, cfg, D=16, N=64, C=4, sigmas=(0.5, 0.25, 0.1, 0.05)):
    gen = rng(derive_seed(seed, "sigma_sweep"))
    xs, ys = [], []
    labels = np.repeat(np.arange(C), N // C)
    for r in range(reps):
        basis = qr_orthonormalize(gen.standard_normal((D, C - 1)))
        centers = gen.standard_normal((D, 1)) + basis @ (2.0 * gen.standard_normal((C - 1, C)))
        noise = gen.standard_normal((D, len(labels)))
        for s in sigmas:
            Z = centers[:, labels] + s * noise
            km = kmeans(Z, C, seed=derive_seed(seed, f"sweep:{r}"))
            xs.append(s)
            ys.append(lowrank_quality(Z, QbarSpec.from_kmeans(km), cfg).gap)
    return float(spearmanr(xs, ys).correlation)


def check_sigma_sweep(trials=10, seed=0, cfg=None):
    """Spearman correlation between noise level and the k-means surrogate gap
    on clustered data that lies in a (C-1)-dim affine subspace at zero noise."""
    rho = _sigma_sweep(seed, trials, cfg or RateConfig())
    thr = SOFT_THRESHOLDS["sigma_sweep_spearman"]
    return CheckReport("sigma_sweep", "soft", trials, 0, 0.0, 0.0, rho >= thr, rho, thr)


def check_lambda_counts(trials=100, seed=0, cfg=None):
    """Eigenvalue-proportional replication counts vs uniformly random
    compositions of N, on unit-norm rank-C synthetic data (zero noise).
    Win rates under noise are reported alongside."""
    cfg = cfg or RateConfig()
    win = _lambda_vs_random(seed, trials, 0.0, cfg)
    noisy = {str(s): _lambda_vs_random(seed, trials, s, cfg) for s in (0.01, 0.1)}
    thr = SOFT_THRESHOLDS["lambda_counts_win_rate"]
    return CheckReport(
        "lambda_counts",
        "soft",
        trials,
        trials - round(win * trials),
        0.0,
        0.0,
        win >= thr,
        win,
        thr,
        {"win_rate_by_noise": noisy},
    )


def check_lowrank_quality(trials=200, seed=0, cfg=None, sweep_reps=10, count_trials=100):
    """Closed-form rate of replicated orthonormal columns (hard). The two
    trend statistics are attached as details; they are judged on their own
    by :func:`check_sigma_sweep` and :func:`check_lambda_counts`."""
    cfg = cfg or RateConfig()
    gen = rng(derive_seed(seed, "closed_form"))
    tol = HARD_TOL["closed_form"]
    worst, failures = 0.0, 0
    for _ in range(trials):
        D = int(gen.integers(1, 33))
        C = int(gen.integers(1, D + 1))
        N = int(gen.integers(C, 97))
        U = qr_orthonormalize(gen.standard_normal((D, C)))
        counts = gen.multinomial(N, gen.dirichlet(np.ones(C)))
        Qbar = np.repeat(U, counts, axis=1)
        err = abs(coding_rate(Qbar, cfg) - closed_form_qbar_rate(counts, D, N, cfg))
        worst = max(worst, err)
        failures += err > tol
    details = {}
    if sweep_reps:
        details["sigma_sweep_spearman"] = check_sigma_sweep(sweep_reps, seed, cfg).statistic
    if count_trials:
        details["lambda_counts_win_rate"] = check_lambda_counts(count_trials, seed, cfg).statistic
    return CheckReport(
        "lowrank_quality", "hard", trials, failures, worst, tol, failures == 0, details=details
    )


def probe_sign_agreement(changes):
    """Fraction of (layer, head) rows where sign(own-layer rate change) = -sign(alpha)."""
    rows = [(a, d) for *_, a, d in changes if a != 0 and d != 0]
    if not rows:
        return 0.0
    return sum(np.sign(d) == -np.sign(a) for a, d in rows) / len(rows)


# --- orchestration -----------------------------------------------------------


CHECKS = {
    "rate_identity": check_rate_identities,
    "bounds": check_bounds,
    "decomposition": check_decomposition,
    "rz_ge_rq": check_rz_ge_rq,
    "gauge": check_gauge_invariance,
    "gradients": check_gradients,
    "lowrank_quality": check_lowrank_quality,
    "sigma_sweep": check_sigma_sweep,
    "lambda_counts": check_lambda_counts,
}


def run_all(seed=0, trials=None):
    """Every check with its default trial count (overridable per name).

    Returns ``(reports, overall)`` where overall requires every hard check to pass.
    """
    trials = {**DEFAULT_TRIALS, **(trials or {})}
    reports = []
    for name, fn in CHECKS.items():
        kwargs = {"sweep_reps": 0, "count_trials": 0} if name == "lowrank_quality" else {}
        reports.append(fn(trials=trials[name], seed=derive_seed(seed, name), **kwargs))
    overall = all(r.passed for r in reports if r.kind == "hard")
    return reports, overall


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def reports_to_json(reports, overall):
    doc = {"overall": bool(overall), "checks": [_clean(asdict(r)) for r in reports]}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def reports_from_json(text):
    doc = json.loads(text)
    return [CheckReport(**c) for c in doc["checks"]], doc["overall"]


_CSV_FIELDS = ["name", "kind", "trials", "failures", "worst", "tolerance", "statistic", "threshold", "passed"]


def reports_to_csv(reports):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=_CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        row = _clean(r.row())
        w.writerow({k: _fmt(row[k]) for k in _CSV_FIELDS})
    return buf.getvalue()


def reports_from_csv(text):
    """Inverse of :func:`reports_to_csv` (details are not part of the CSV)."""
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        val = {k: (None if row[k] == "" else _parse(row[k])) for k in _CSV_FIELDS[2:]}
        val["name"], val["kind"] = row["name"], row["kind"]
        out.append(CheckReport(**val))
    return out


def _fmt(v):
    if v is None:
        return ""
    return v if isinstance(v, str) else repr(v)


def _parse(s):
    if s in ("True", "False"):
        return s == "True"
    if s in ("inf", "-inf", "nan"):
        return float(s)
    try:
        return int(s)
    except ValueError:
        return float(s)
