"""Built-in sampler distribution and gradient checks behind ``msgdas selftest``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensorcore as tc
from ..sampler import gumbel_noise, plackett_luce_pair_probs, sample_topk


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def check_exclusivity(trials: int = 2000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for k in (2, 4, 8):
        alpha = rng.normal(0, 3, size=(trials, 8))
        draws = sample_topk(alpha, k, float(rng.uniform(0.1, 10)), rng)
        idx = np.stack([d.index for d in draws], axis=1)
        bad += int((np.sort(idx, axis=1)[:, 1:] == np.sort(idx, axis=1)[:, :-1]).any(axis=1).sum())
    return CheckResult("sampler exclusivity", bad == 0, f"{bad} violations over {3 * trials} draw sets")


def check_plackett_luce(n: int = 200_000, seed: int = 1) -> CheckResult:
    alpha = np.log([1.0, 2.0, 3.0, 4.0])
    rng = np.random.default_rng(seed)
    draws = sample_topk(np.broadcast_to(alpha, (n, 4)), 2, 1.0, rng)
    counts = np.zeros((4, 4))
    np.add.at(counts, (draws[0].index, draws[1].index), 1)
    tv = 0.5 * np.abs(counts / n - plackett_luce_pair_probs(alpha)).sum()
    return CheckResult("ordered-pair distribution", bool(tv < 0.01), f"TV={tv:.4f} (< 0.01)")


def check_sorted_topk(trials: int = 300, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(trials):
        n = int(rng.integers(2, 6))
        k = int(rng.integers(1, n + 1))
        r = rng.normal(size=n)
        got = [int(d.index) for d in sample_topk(r, k, 1.0, noise=np.zeros(n))]
        bad += got != list(np.argsort(-r, kind="stable")[:k])
    return CheckResult("top-K equals sorted order", bad == 0, f"{bad} mismatches over {trials}")


def check_gumbel_moments(n: int = 1_000_000, seed: int = 3) -> CheckResult:
    g = gumbel_noise(n, np.random.default_rng(seed))
    ok = abs(g.mean() - np.euler_gamma) < 0.01 and abs(g.var() - np.pi ** 2 / 6) < 0.02
    return CheckResult("gumbel moments", bool(ok), f"mean={g.mean():.4f} var={g.var():.4f}")


def _gradchecks(seed: int = 4) -> list[tuple[str, float, float]]:
    rng = np.random.default_rng(seed)
    out = []
    with tc.float64_mode():
        x = tc.DTensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
        w = tc.DTensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        v = tc.DTensor(rng.normal(size=(2, 4, 6, 6)))
        out.append(("conv2d", tc.gradcheck(lambda: tc.sum_(tc.mul(tc.conv2d(x, w, 1, 1), v)), [x, w]), 1e-3))
        xd = tc.DTensor(rng.normal(size=(2, 3, 7, 7)), requires_grad=True)
        wd = tc.DTensor(rng.normal(size=(3, 1, 3, 3)), requires_grad=True)
        vd = tc.DTensor(rng.normal(size=(2, 3, 4, 4)))
        out.append(("depthwise dilated conv2d", tc.gradcheck(
            lambda: tc.sum_(tc.mul(tc.conv2d(xd, wd, 2, 2, 2, groups=3), vd)), [xd, wd]), 1e-3))
        for kind in ("avg", "max"):
            xp = tc.DTensor(rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) * 0.1, requires_grad=True)
            out.append((f"{kind} pool", tc.gradcheck(lambda: tc.sum_(tc.mul(tc.pool2d(xp, kind, 3, 1, 1), v.data[:, :3])),
                                                     [xp]), 1e-3))
        xb = tc.DTensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        vb = tc.DTensor(rng.normal(size=(4, 3, 3, 3)))
        out.append(("batch_norm", tc.gradcheck(lambda: tc.sum_(tc.mul(tc.batch_norm(xb), vb)), [xb]), 1e-3))
        logits = tc.DTensor(rng.normal(size=(5, 4)), requires_grad=True)
        out.append(("cross_entropy", tc.gradcheck(lambda: tc.cross_entropy(logits, [0, 1, 2, 3, 1]), [logits]), 1e-4))
        s = tc.DTensor(rng.normal(size=8), requires_grad=True)
        vs = rng.normal(size=8)
        out.append(("softmax", tc.gradcheck(lambda: tc.sum_(tc.mul(tc.softmax(s), vs)), [s]), 1e-4))
        alpha = tc.DTensor(rng.normal(size=8), requires_grad=True)
        noise = gumbel_noise(8, rng)

        def soft_path():
            draws = sample_topk(alpha, 3, 2.0, noise=noise)
            return tc.sum_(tc.mul(draws[2].soft, vs))

        out.append(("sampler soft path", tc.gradcheck(soft_path, [alpha]), 1e-4))
    return out


def run_selftest() -> list[CheckResult]:
    results = [check_exclusivity(), check_plackett_luce(), check_sorted_topk(), check_gumbel_moments()]
    for name, err, tol in _gradchecks():
        results.append(CheckResult(f"gradient {name}", bool(err < tol), f"rel err {err:.2e} (< {tol:g})"))
    return results
