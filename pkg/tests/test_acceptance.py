"""Acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE <k> PASS|FAIL`` line as it finishes
(repeated in the pytest terminal summary) and then asserts the result. The
module also runs standalone: ``python tests/test_acceptance.py``.

The LineWorld grid shared by criteria 7 to 9 (5 policy instances x 5
repetitions x 4 methods x 3 validation sizes, plus a starter-tier Rec T=6
set) takes several minutes and is computed once per session.
"""
from __future__ import annotations

import json
import math
import sys
import time
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import oracles  # noqa: E402
from nets import random_net  # noqa: E402

from certbound.binary_kl import kl_inverse_lower, kl_inverse_upper, split_components  # noqa: E402
from certbound.certification import (  # noqa: E402
    CertificateReport,
    TrainConfig,
    clipped_losses,
    stage_objective,
)
from certbound.cli import report_payload, rollout_datasets, run_certification  # noqa: E402
from certbound.config import PipelineConfig  # noqa: E402
from certbound.metrics import RunRecord, aggregate, pearson, tightness  # noqa: E402
from certbound.predictor import (  # noqa: E402
    Architecture,
    GaussianNet,
    gaussian_kl,
    lrt_forward,
    lrt_preactivations,
    sampled_preactivations,
)
from certbound.rollout import TEST_STREAM, EnvSpec, PolicySpec, collect_dataset  # noqa: E402

pytestmark = pytest.mark.slow

LINE_BASE = PipelineConfig(env=EnvSpec(kind="line"), hidden_dims=(64, 64), train=TrainConfig())
CHAIN_BASE = PipelineConfig(env=EnvSpec(kind="chain"), hidden_dims=(64, 64), train=TrainConfig())
GRID_METHODS = (("nonrec-noninf", 1), ("nonrec-inf", 2), ("rec", 2), ("rec", 6))
GRID_LABELS = {("nonrec-noninf", 1): "NonRec-NonInf", ("nonrec-inf", 2): "NonRec-Inf",
               ("rec", 2): "Rec T=2", ("rec", 6): "Rec T=6"}
GRID_SIZES = (25, 50, 100)
INSTANCES = range(5)
REPS = range(5)

_LINES: list[str] = []


def _report(k: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {k:>2} {'PASS' if ok else 'FAIL'}  {detail}"
    _LINES.append(line)
    print(line, flush=True)


# ---------------------------------------------------------------- criteria


def criterion_1() -> tuple[bool, str]:
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        p = float(rng.uniform())
        eps = float(10 ** rng.uniform(-6, 0))
        worst = max(worst,
                    abs(kl_inverse_upper(p, eps) - oracles.grid_inverse(p, eps, upper=True)),
                    abs(kl_inverse_lower(p, eps) - oracles.grid_inverse(p, eps, upper=False)))
    closed = 0.0
    for eps in np.concatenate([np.geomspace(1e-8, 20, 200), [0.0]]):
        closed = max(closed,
                     abs(kl_inverse_upper(0.0, eps) - (1 - math.exp(-eps))),
                     abs(kl_inverse_lower(1.0, eps) - math.exp(-eps)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and closed <= 1e-9 and elapsed < 10
    return ok, f"max |bisect-grid|={worst:.2e}, closed-form err={closed:.1e}, {elapsed:.1f}s"


def criterion_2() -> tuple[bool, str]:
    # exact check: the split is computed in rational arithmetic on float-valued inputs
    rng = np.random.default_rng(202)
    a, b = -0.5, 1.0
    z = rng.uniform(a, b, 100_000)
    mu = rng.uniform(a, b, 100_000)
    fa, fb = Fraction(a), Fraction(b)
    bad_exact = 0
    bad_float = 0
    worst_ulps = 0.0
    for zi, mi in zip(z.tolist(), mu.tolist()):
        fz, fm = Fraction(zi), Fraction(mi)
        zp, zm = split_components(fz, fm, fa, fb)
        bad_exact += (fm + zp - zm) != fz
        p, m = split_components(zi, mi, a, b)
        err = abs((mi + p - m) - zi)
        if err:
            bad_float += 1
            worst_ulps = max(worst_ulps, err / math.ulp(max(abs(zi), abs(mi))))
    ok = bad_exact == 0
    return ok, (f"exact: {bad_exact}/100000 mismatches; float64 path: {bad_float} inexact, "
                f"worst {worst_ulps:.2f} ulp")


def criterion_3() -> tuple[bool, str]:
    rng = np.random.default_rng(303)
    arch = Architecture(2, (4, 3))
    n = 100_000
    checks = 0
    exceed = 0
    worst = 0.0
    for _ in range(20):
        net = random_net(arch, rng, logvar=(-3.0, -1.0))
        x = rng.normal(size=arch.input_dim)
        for za, zb in zip(lrt_preactivations(net, x, n, rng), sampled_preactivations(net, x, n, rng)):
            # standard error of the difference of the two independent estimates
            va, vb = za.var(axis=0, ddof=1), zb.var(axis=0, ddof=1)
            se_mean = np.sqrt(va / n + vb / n)
            m4a = ((za - za.mean(axis=0)) ** 4).mean(axis=0)
            m4b = ((zb - zb.mean(axis=0)) ** 4).mean(axis=0)
            se_var = np.sqrt((m4a - va**2) / n + (m4b - vb**2) / n)
            zs = np.concatenate([np.abs(za.mean(axis=0) - zb.mean(axis=0)) / se_mean, np.abs(va - vb) / se_var])
            checks += zs.size
            exceed += int(np.sum(zs > 3))
            worst = max(worst, float(zs.max()))
    ok = exceed == 0
    return ok, f"{checks} mean/variance comparisons, {exceed} beyond 3 SE (max {worst:.2f} SE)"


def _flat(net: GaussianNet, which: str) -> np.ndarray:
    parts = []
    for l in net.layers:
        w, b = (l.weight_mean, l.bias_mean) if which == "mean" else (l.weight_logvar, l.bias_logvar)
        parts += [w.ravel(), b.ravel()]
    return np.concatenate(parts)


def criterion_4() -> tuple[bool, str]:
    rng = np.random.default_rng(404)
    arch = Architecture(2, (3,))
    worst = 0.0
    for _ in range(20):
        q = random_net(arch, rng, logvar=(-2.0, 0.0))
        p = random_net(arch, rng, logvar=(-1.0, 0.5))
        mq, lq, mp, lp = _flat(q, "mean"), _flat(q, "lv"), _flat(p, "mean"), _flat(p, "lv")
        total = 0.0
        for _ in range(10):  # 10 chunks of 1e5 draws
            w = mq + np.exp(0.5 * lq) * rng.standard_normal((100_000, mq.size))
            logq = -0.5 * (((w - mq) ** 2) / np.exp(lq) + lq).sum(axis=1)
            logp = -0.5 * (((w - mp) ** 2) / np.exp(lp) + lp).sum(axis=1)
            total += float(np.sum(logq - logp))
        mc = total / 1_000_000
        exact = gaussian_kl(q, p)
        worst = max(worst, abs(mc - exact) / exact)
    return worst <= 0.02, f"max relative error {worst:.2e} over 20 pairs"


def criterion_5() -> tuple[bool, str]:
    arch = Architecture(3, (8, 8))
    worst = 0.0
    for seed, kappa in ((0, 0.0), (1, 0.5), (2, 0.5)):
        rng = np.random.default_rng(500 + seed)
        net, prior = random_net(arch, rng, logvar=(-5, -2)), random_net(arch, rng, logvar=(-5, -2))
        X = rng.normal(size=(16, arch.input_dim))
        y = rng.uniform(0, 1, 16)
        noise = [rng.standard_normal((16, o)) for _, o in arch.layer_shapes]
        kw = dict(n_bound=500, delta_eff=0.025 / 12, range_width=1 + kappa, prior_loss_mean=0.1, kappa=kappa)
        _, g = stage_objective(net, prior, X, y, noise, **kw)
        theta = net.to_vector()
        fd = np.empty_like(theta)
        h = 1e-5
        for j in range(theta.size):
            up, dn = theta.copy(), theta.copy()
            up[j] += h
            dn[j] -= h
            fd[j] = (stage_objective(GaussianNet.from_vector(arch, up), prior, X, y, noise, **kw)[0]
                     - stage_objective(GaussianNet.from_vector(arch, dn), prior, X, y, noise, **kw)[0]) / (2 * h)
        rel = float(np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd)))
        worst = max(worst, rel)
    return worst <= 1e-4, f"max relative error {worst:.2e} ({arch.n_params} parameters, 3 nets)"


def _oracle_pool(env: EnvSpec, policy: PolicySpec, n_samples: int):
    probe = collect_dataset(env, policy, 500, CHAIN_BASE.stride, seed=10**6, stream=TEST_STREAM)
    n_eps = int(math.ceil(1.1 * n_samples * probe.n_episodes / len(probe)))
    pool = collect_dataset(env, policy, n_eps, CHAIN_BASE.stride, seed=10**6, stream=TEST_STREAM)
    assert len(pool) >= n_samples
    return pool


def criterion_6(n_runs: int = 200) -> tuple[bool, str]:
    cfg = CHAIN_BASE.replace(method="rec", depth=6)
    policy = PolicySpec.for_instance(cfg.tier, cfg.instance)
    pool = _oracle_pool(cfg.env, policy, 100_000)
    t0 = time.perf_counter()
    violations = 0
    gaps = []
    for r in range(n_runs):
        valid = collect_dataset(cfg.env, policy, cfg.valid_episodes, cfg.stride, seed=r)
        report = run_certification(cfg, valid, None, seed=r)
        final = report.stages[-1].posterior
        oracle = pool.renormalized(valid.g_max)
        pred, _ = lrt_forward(final, oracle.features, np.random.default_rng([r, 6]))
        true_loss = float(np.mean(clipped_losses(pred, oracle.g_norm)))
        gaps.append(report.final_bound - true_loss)
        violations += report.final_bound < true_loss
    frac = violations / n_runs
    elapsed = time.perf_counter() - t0
    return frac <= 0.055, (f"{violations}/{n_runs} violations ({frac:.3f}), oracle n={len(pool)}, "
                           f"mean bound-true gap {np.mean(gaps):.3f}, {elapsed:.0f}s")


@lru_cache(maxsize=None)
def line_grid() -> tuple[RunRecord, ...]:
    records = []
    for tier in ("expert", "starter"):
        for inst in INSTANCES:
            cfg = LINE_BASE.replace(tier=tier, instance=inst)
            valid, test = rollout_datasets(cfg)
            sizes = GRID_SIZES if tier == "expert" else (100,)
            methods = GRID_METHODS if tier == "expert" else (("rec", 6),)
            for size in sizes:
                v = valid.first_episodes(size)
                te = test.renormalized(v.g_max)
                for tag, depth in methods:
                    for rep in REPS:
                        c = cfg.replace(method=tag, depth=depth, valid_episodes=size, seed=rep)
                        rep_ = run_certification(c, v, te, seed=rep)
                        records.append(RunRecord(inst, rep, tier, GRID_LABELS[(tag, depth)],
                                                 rep_.final_bound, rep_.train_loss, rep_.test_loss, size))
    return tuple(records)


def _grid_rows():
    return {row.key: row for row in aggregate(line_grid(), ("tier", "method", "episodes"))}


def criterion_7() -> tuple[bool, str]:
    rows = _grid_rows()
    m = {label: rows[("expert", label, 100)].bound_mean for label in GRID_LABELS.values()}
    ok = m["Rec T=6"] < m["Rec T=2"] < m["NonRec-NonInf"] and m["NonRec-Inf"] < m["NonRec-NonInf"]
    return ok, "mean bound " + ", ".join(f"{k}={v:.4f}" for k, v in m.items())


def criterion_8() -> tuple[bool, str]:
    rows = _grid_rows()
    ok = True
    parts = []
    for label in GRID_LABELS.values():
        t = [rows[("expert", label, s)].tightness_mean for s in GRID_SIZES]
        ok &= t[0] > t[1] > t[2]
        parts.append(f"{label}: " + ">".join(f"{x:.4f}" for x in t))
    return ok, "tightness 25>50>100  " + "; ".join(parts)


def criterion_9() -> tuple[bool, str]:
    recs = line_grid()

    def r_for(tier):
        sel = [x for x in recs if x.tier == tier and x.method == "Rec T=6" and x.episodes == 100]
        assert len(sel) == 25
        return pearson([x.bound for x in sel], [x.test_loss for x in sel])

    expert, starter = r_for("expert"), r_for("starter")
    ok = expert >= 0.6 and expert > starter
    return ok, f"Pearson Rec T=6: expert={expert:.3f}, starter={starter:.3f}"


def criterion_10() -> tuple[bool, str]:
    t = tightness(0.107, 0.045)
    cfg = LINE_BASE.replace(hidden_dims=(8,), train=TrainConfig(epochs=3), valid_episodes=20, test_episodes=10)
    valid, test = rollout_datasets(cfg)
    report = run_certification(cfg, valid, test, seed=0)
    payload = report_payload(report, cfg, instance=0, repetition=0, episodes=20)
    text = json.dumps(payload, sort_keys=True)
    back = json.loads(text)
    again = CertificateReport.from_dict(back)
    lossless = again.to_dict() == report.to_dict() and json.dumps(back, sort_keys=True) == text
    ok = abs(t - 0.062) <= 1e-12 and lossless
    return ok, f"tightness(0.107, 0.045)={t:.12g}, report round trip {'lossless' if lossless else 'LOSSY'}"


CRITERIA = {k: globals()[f"criterion_{k}"] for k in range(1, 11)}


@pytest.mark.parametrize("k", sorted(CRITERIA))
def test_criterion(k, capsys):
    ok, detail = CRITERIA[k]()
    with capsys.disabled():
        print()
        _report(k, ok, detail)
    assert ok, detail


if __name__ == "__main__":
    results = []
    for k, fn in CRITERIA.items():
        ok, detail = fn()
        _report(k, ok, detail)
        results.append(ok)
    sys.exit(0 if all(results) else 1)
