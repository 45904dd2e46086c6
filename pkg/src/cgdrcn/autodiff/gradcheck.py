from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import UsageError
from .tensor import Tensor, backward


@dataclass
class Probe:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradcheckReport:
    probes: list[Probe] = field(default_factory=list)

    @property
    def per_param(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for p in self.probes:
            out[p.name] = max(out.get(p.name, 0.0), p.rel_err)
        return out

    @property
    def max_rel_err(self) -> float:
        return max((p.rel_err for p in self.probes), default=0.0)

    def worst(self) -> Probe | None:
        return max(self.probes, key=lambda p: p.rel_err, default=None)


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def _evaluate(build_loss, params: dict[str, np.ndarray], with_grad: bool):
    leaves = {k: Tensor(v, requires_grad=with_grad) for k, v in params.items()}
    loss = build_loss(leaves)
    if with_grad:
        backward(loss)
        return float(loss.data), {k: t.grad for k, t in leaves.items()}
    return loss.data[()], None


def gradcheck(
    build_loss: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    probe_count: int = 64,
    h: float = 1e-5,
    seed: int = 0,
    oracle_dtype=None,
) -> GradcheckReport:
    """Compare reverse-mode gradients against central differences.

    ``build_loss`` receives a dict of leaf tensors (same keys as ``params``)
    and returns a scalar tensor. Every parameter tensor gets at least one
    probe when ``probe_count`` allows; the remainder are spread by size.

    ``oracle_dtype`` (e.g. ``np.longdouble``) runs the finite-difference
    evaluations at a higher precision than the analytic pass. The central
    difference of an O(10) loss in float64 carries ~1e-15/h of rounding
    noise, which swamps coordinates whose gradient is ~1e-6.
    """
    work = {k: np.array(v, copy=True) for k, v in params.items()}
    f0, grads = _evaluate(build_loss, work, with_grad=True)
    f0_again, _ = _evaluate(build_loss, work, with_grad=False)
    if f0 != f0_again:
        raise UsageError(f"loss is not deterministic: {f0!r} != {f0_again!r}")
    if oracle_dtype is not None:
        work = {k: v.astype(oracle_dtype) for k, v in work.items()}

    rng = np.random.default_rng(seed)
    names = sorted(work)
    chosen = list(names[:probe_count])
    if probe_count > len(names):
        sizes = np.array([work[n].size for n in names], dtype=np.float64)
        extra = rng.choice(len(names), size=probe_count - len(names), p=sizes / sizes.sum())
        chosen += [names[i] for i in extra]

    report = GradcheckReport()
    for name in chosen:
        arr = work[name]
        flat = int(rng.integers(arr.size))
        idx = np.unravel_index(flat, arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        fp, _ = _evaluate(build_loss, work, with_grad=False)
        arr[idx] = orig - h
        fm, _ = _evaluate(build_loss, work, with_grad=False)
        arr[idx] = orig
        numeric = float((fp - fm) / (2 * h))
        g = grads[name]
        analytic = 0.0 if g is None else float(g[idx])
        report.probes.append(Probe(name, tuple(int(i) for i in idx), analytic, numeric,
                                   relative_error(analytic, numeric)))
    return report
