"""Cost accounting and verification drivers.

``count_params`` enumerates trainable scalars exactly; ``count_flops`` walks
the closed-form per-layer cost model (one multiply-accumulate = one FLOP;
elementwise/softmax/pool ops cost one per output element). The cost model has
an independent runtime oracle: the tensor primitives increment a counter when
executed, and the two must agree to the integer.

``scaling_bench`` evaluates the cost model over a token-count grid and fits a
log-log slope; ``gradcheck`` compares tape gradients against seeded central
finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (MHSA, MHSAConfig, SASERecogConfig, SASERecognition,
                        SEConfig, SqueezeExcite)
from .nn import Module


# ---------------------------------------------------------------------------
# cost reports
# ---------------------------------------------------------------------------

@dataclass
class CostEntry:
    name: str
    params: int
    flops: int | None
    output_shape: tuple[int, ...] | None


@dataclass
class CostReport:
    entries: list[CostEntry]
    total_params: int
    total_flops: int | None

    def to_dict(self) -> dict:
        return {
            "entries": [
                {"name": e.name, "params": e.params, "flops": e.flops,
                 "output_shape": list(e.output_shape) if e.output_shape else None}
                for e in self.entries
            ],
            "total_params": self.total_params,
            "total_flops": self.total_flops,
        }

    def csv_rows(self) -> list[list[str]]:
        rows = [["name", "params", "flops", "output_shape"]]
        for e in self.entries:
            shape = "x".join(str(s) for s in e.output_shape) if e.output_shape else ""
            rows.append([e.name, str(e.params), "" if e.flops is None else str(e.flops), shape])
        rows.append(["TOTAL", str(self.total_params),
                     "" if self.total_flops is None else str(self.total_flops), ""])
        return rows


def _param_entries(module: Module, prefix: str = "") -> list[CostEntry]:
    entries = []
    own = sum(t.size for t in module._params.values())
    if own:
        entries.append(CostEntry(prefix.rstrip(".") or "self", own, None, None))
    for name, child in module._children.items():
        entries.extend(_param_entries(child, prefix + name + "."))
    return entries


def count_params(module: Module) -> CostReport:
    """Exact enumeration of trainable scalars, grouped per named layer."""
    entries = _param_entries(module)
    return CostReport(entries, sum(e.params for e in entries), None)


def count_flops(module: Module, input_shape) -> CostReport:
    """Closed-form per-layer FLOPs for a batchless input shape."""
    raw, _ = module.cost(tuple(input_shape) if input_shape is not None else None)
    entries = [CostEntry(name, params, flops, tuple(shape) if shape else None)
               for name, params, flops, shape in raw]
    return CostReport(entries, sum(e.params for e in entries),
                      sum(e.flops for e in entries))


def counted_forward(module: Module, *inputs) -> tuple[T.Tensor, int]:
    """Run a forward pass with the runtime FLOP counter armed; this is the
    oracle the analytic model is checked against."""
    with T.no_grad(), T.flop_counter() as fc:
        out = module(*inputs)
    return out, fc.total


# ---------------------------------------------------------------------------
# complexity scaling
# ---------------------------------------------------------------------------

@dataclass
class ScalingCurve:
    mechanism: str
    channels: int
    points: list[tuple[int, int]]                 # (N, flops), N strictly increasing
    slope: float
    residual: float
    excluded_smallest: bool
    core_points: list[tuple[int, int]] = field(default_factory=list)
    core_slope: float | None = None

    def to_dict(self) -> dict:
        d = {"mechanism": self.mechanism, "channels": self.channels,
             "slope": self.slope, "residual": self.residual,
             "excluded_smallest": self.excluded_smallest}
        if self.core_slope is not None:
            d["core_slope"] = self.core_slope
        return d


def fit_loglog(ns, fs) -> tuple[float, float, bool]:
    """OLS slope of ln(f) on ln(n). The smallest size is dropped (constant-term
    contamination) when its residual against a fit of the remaining points
    exceeds 3x their RMS residual."""
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(fs, dtype=float))

    def ols(xv, yv):
        slope, intercept = np.polyfit(xv, yv, 1)
        resid = yv - (slope * xv + intercept)
        return slope, resid

    slope, resid = ols(x, y)
    excluded = False
    if len(x) > 3:
        slope_rest, resid_rest = ols(x[1:], y[1:])
        intercept_rest = (y[1:] - slope_rest * x[1:]).mean()
        r0 = abs(y[0] - (slope_rest * x[0] + intercept_rest))
        rms_rest = float(np.sqrt(np.mean(resid_rest ** 2)))
        if r0 > 3 * rms_rest + 1e-9:
            excluded = True
            slope, resid = slope_rest, resid_rest
    rms = float(np.sqrt(np.mean(resid ** 2)))
    return float(slope), rms, excluded


def _build_mechanism(name: str, channels: int) -> Module:
    if name == "mhsa":
        return MHSA(MHSAConfig(channels=channels, heads=4))
    if name == "sase_recog":
        return SASERecognition(SASERecogConfig(channels=channels, heads=4))
    if name == "se":
        return SqueezeExcite(SEConfig(channels=channels, reduction=min(16, channels)))
    raise ValueError(f"unknown mechanism {name!r}")


def scaling_bench(mechanism: str, channels: int, sizes) -> ScalingCurve:
    """FLOPs of one mechanism across spatial sizes, with fitted log-log slope.

    sizes: list of (H, W); token count N = H*W must be strictly increasing
    and there must be at least three sizes.
    """
    sizes = [tuple(s) for s in sizes]
    if len(sizes) < 3:
        raise ValueError("need at least 3 sizes to fit a slope")
    ns = [h * w for h, w in sizes]
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("token counts must be strictly increasing")
    mod = _build_mechanism(mechanism, channels)
    points, core_points = [], []
    for (h, w), n in zip(sizes, ns):
        report = count_flops(mod, (channels, h, w))
        points.append((n, report.total_flops))
        if isinstance(mod, MHSA):
            core_points.append((n, mod.core_flops((channels, h, w))))
    slope, residual, excluded = fit_loglog(ns, [f for _, f in points])
    core_slope = None
    if core_points:
        core_slope, _, _ = fit_loglog(ns, [f for _, f in core_points])
    return ScalingCurve(mechanism, channels, points, slope, residual, excluded,
                        core_points, core_slope)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    passed: bool
    tolerance: float
    max_rel_err: float
    per_group: dict[str, float]
    failure: str | None = None

    def to_dict(self) -> dict:
        return {"passed": self.passed, "tolerance": self.tolerance,
                "max_rel_err": self.max_rel_err, "per_group": self.per_group,
                "failure": self.failure}


def _as_shape_list(input_shapes):
    if isinstance(input_shapes[0], int):
        return [tuple(input_shapes)]
    return [tuple(s) for s in input_shapes]


def gradcheck(module: Module, input_shapes, seed: int, tolerance: float = 1e-4,
              max_samples_per_tensor: int = 64, forward_kwargs: dict | None = None) -> GradcheckReport:
    """Check tape gradients of sum(forward(inputs)) against central differences.

    f64 only. Primary step h = 1e-5 * max(1, |x|) per element; relative error
    is |a - n| / max(|a|, |n|, 1e-6). Elements that miss the tolerance at the
    primary step are re-evaluated at h/10 and h/100: a relu-kink inside the
    secant window vanishes under refinement, a wrong gradient does not.
    Tensors above the sampling budget are subsampled with a seeded choice.
    Gradcheck owns the tape: it resets it.
    """
    kwargs = forward_kwargs or {}
    rng = np.random.Generator(np.random.PCG64(seed))
    shapes = _as_shape_list(input_shapes)
    inputs = [T.Tensor(rng.standard_normal(s), requires_grad=True) for s in shapes]
    for _, p in module.parameters():
        if p.dtype != np.float64:
            raise ValueError("gradcheck requires float64 parameters")

    # project the output against a fixed random tensor so the scalar loss has
    # a non-degenerate gradient even when plain sums cancel (softmax rows,
    # batch-normalized maps)
    with T.no_grad():
        probe = module(*inputs, **kwargs)
    probe = probe[0] if isinstance(probe, tuple) else probe
    proj = T.Tensor(np.random.Generator(np.random.PCG64(seed ^ 0x9E3779B9))
                    .standard_normal(probe.shape))

    def run():
        out = module(*inputs, **kwargs)
        if isinstance(out, tuple):
            out = out[0]
        out = T.mul(out, proj)
        return out if out.size == 1 else out.sum()

    T.reset_tape()
    module.zero_grads()
    for x in inputs:
        x.zero_grad()
    loss = run()
    T.backward(loss)

    groups: list[tuple[str, T.Tensor]] = [(f"input{i}", x) for i, x in enumerate(inputs)]
    groups += list(module.parameters())

    per_group: dict[str, float] = {}
    worst = 0.0
    for name, t in groups:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(analytic)):
            return GradcheckReport(False, tolerance, float("inf"), per_group,
                                   failure=f"non-finite analytic gradient in {name}")
        flat = t.data.reshape(-1)
        n_elem = flat.size
        if n_elem > max_samples_per_tensor:
            idx = rng.choice(n_elem, size=max_samples_per_tensor, replace=False)
        else:
            idx = np.arange(n_elem)
        g_err = 0.0
        with T.no_grad():
            for i in idx:
                orig = float(flat[i])
                ana = float(analytic.reshape(-1)[i])
                h0 = 1e-5 * max(1.0, abs(orig))
                err = None
                for h in (h0, h0 / 10, h0 / 100):
                    flat[i] = orig + h
                    up = run().item()
                    flat[i] = orig - h
                    down = run().item()
                    flat[i] = orig
                    num = (up - down) / (2 * h)
                    if not math.isfinite(num):
                        return GradcheckReport(False, tolerance, float("inf"), per_group,
                                               failure=f"non-finite numeric gradient in {name}")
                    e = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
                    err = e if err is None else min(err, e)
                    if err <= tolerance:
                        break
                g_err = max(g_err, err)
        per_group[name] = float(g_err)
        worst = max(worst, float(g_err))
    T.reset_tape()
    return GradcheckReport(worst <= tolerance, tolerance, worst, per_group)
