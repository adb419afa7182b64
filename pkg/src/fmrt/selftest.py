"""Built-in verification suite: gradient checks, brute-force oracles, invariants.

Every check returns its largest observed error next to the tolerance. The
``fault`` argument swaps in a deliberately broken operation so that the suite
itself can be shown to catch regressions.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from .autodiff import ops
from .autodiff.gradcheck import check_gradients
from .autodiff.serialize import decode_weights, encode_weights
from .autodiff.tensor import Tensor, default_dtype, no_grad
from .awpe import AxisWisePositionEncoder
from .backbone import ResidualStage, keypoint_grid
from .coarse import dual_softmax, log_dual_softmax, mutual_nearest
from .fine import WindowPair, expectation_offset, refine, window_offsets
from .geometry.homography import RansacConfig, dlt, estimate_homography
from .geometry.metrics import auc, mma_from_errors
from .recformer import (
    FeaturePerceptionLayer,
    GlobalPerceptionAttention,
    InterleavedBlock,
    LocalPerceptionFFN,
    PerceptionWeightLayer,
    RecFormer,
    RecFormerLayer,
    linear_attention,
)
from .supervision import GroundTruthMatches, WarpSpec, coarse_loss, fine_loss, gt_matches

GRAD_TOL = 1e-3
ORACLE_TOL = 1e-6
ORACLE_INSTANCES = 100
FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    tol: float
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status}  {self.name:<28} max_err={self.max_error:.3e} tol={self.tol:.0e} ({self.seconds:.2f}s){extra}"


@dataclass
class SelftestReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[str]:
        return [r.name for r in self.results if not r.passed]

    def lines(self) -> List[str]:
        return [r.line() for r in self.results]


def _rand(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.sum(out * Tensor(weights))


def _grad_report(fn, params, inputs=()) -> Tuple[float, str]:
    report = check_gradients(fn, params, inputs=inputs, step=FD_STEP, tol=GRAD_TOL)
    n = sum(p.size for p in report.params)
    worst = max(report.params, key=lambda p: p.max_rel_error, default=None)
    detail = f"{n} entries" + (f", worst {worst.name}" if worst is not None else "")
    if not report.deterministic:
        return float("inf"), detail + ", non-deterministic"
    return report.max_rel_error, detail


def _module_check(module, build_inputs, fn) -> Callable[[np.random.Generator], Tuple[float, str]]:
    """Gradient check over every module parameter plus the float inputs."""

    def run(rng):
        with default_dtype(np.float64):
            m = module(rng)
            inputs = build_inputs(rng)
            weights = rng.standard_normal(fn(m, *inputs).shape)
            params = dict(m.named_parameters())
            params.update({f"input{i}": t for i, t in enumerate(inputs) if t.requires_grad})
            return _grad_report(lambda: _weighted_sum(fn(m, *inputs), weights), params)

    return run


# ------------------------------------------------------------ gradient checks
def _grad_dw_conv(rng):
    x = _rand(rng, 2, 3, 5, 6)
    k = _rand(rng, 3, 3, 3)
    w = rng.standard_normal((2, 3, 5, 6))
    return _grad_report(lambda: _weighted_sum(ops.dw_conv2d(x, k), w), {"x": x, "kernels": k})


def _grad_conv(rng):
    x = _rand(rng, 1, 2, 6, 6)
    wt = _rand(rng, 3, 2, 3, 3)
    b = _rand(rng, 3)
    w = rng.standard_normal((1, 3, 3, 3))
    return _grad_report(lambda: _weighted_sum(ops.conv2d(x, wt, b, stride=2, padding=1), w), {"x": x, "w": wt, "b": b})


def _grad_layer_norm(rng):
    x = _rand(rng, 4, 6)
    g = _rand(rng, 6)
    b = _rand(rng, 6)
    w = rng.standard_normal((4, 6))
    return _grad_report(lambda: _weighted_sum(ops.layer_norm(x, g, b), w), {"x": x, "gamma": g, "beta": b})


def _grad_backbone_stage(rng):
    with default_dtype(np.float64):
        stage = ResidualStage(1, 4, rng)
        x = Tensor(rng.uniform(0, 1, (1, 1, 8, 8)))
        w = rng.standard_normal((1, 4, 4, 4))
        return _grad_report(lambda: _weighted_sum(stage(x), w), dict(stage.named_parameters()))


def _grad_awpe(rng):
    with default_dtype(np.float64):
        enc = AxisWisePositionEncoder(8, rng)
        w = rng.standard_normal((8, 3, 4))
        return _grad_report(lambda: _weighted_sum(enc(3, 4), w), dict(enc.named_parameters()))


_HW = (3, 4)


def _seq(dim):
    return lambda rng: (_rand(rng, 2, _HW[0] * _HW[1], dim),)


def _seq_pair(dim):
    return lambda rng: (_rand(rng, 2, _HW[0] * _HW[1], dim), _rand(rng, 2, _HW[0] * _HW[1], dim))


def _grad_refine(rng):
    with default_dtype(np.float64):
        transformer = RecFormer(2, 1, rng)
        # Two-feature layer norm saturates at +-1 with the default eps and its
        # gradients drop to roundoff level; eps = 1 keeps the check well posed.
        for block in transformer.blocks:
            block.self_layer.pwl.norm.eps = block.cross_layer.pwl.norm.eps = 1.0
        k, c, w = 3, 2, 5
        wa = _rand(rng, k, c, w, w)
        wb = _rand(rng, k, c, w, w)
        shifts = rng.integers(-1, 2, (k, 2))
        windows = WindowPair(wa, wb, np.zeros((k, 2), int), np.zeros((k, 2), int), shifts, w)
        target = rng.standard_normal((k, 2))
        params = dict(transformer.named_parameters())
        params.update({"wa": wa, "wb": wb})
        report = _grad_report(lambda: fine_loss(refine(windows, transformer).sigma, target), params)
    return report


def _grad_coarse_loss(rng):
    s = _rand(rng, 5, 6)
    gt = GroundTruthMatches(np.array([[0, 1], [2, 2], [4, 0]]))
    # the log-domain positive term is what training uses
    return _grad_report(lambda: coarse_loss(dual_softmax(s), gt, log_g=log_dual_softmax(s)), {"scores": s})


def _grad_fine_loss(rng):
    sigma = _rand(rng, 6, 2)
    target = rng.standard_normal((6, 2))
    return _grad_report(lambda: fine_loss(sigma, target), {"sigma": sigma})


GRADIENT_CHECKS: Dict[str, Callable] = {
    "grad:dw_conv2d": _grad_dw_conv,
    "grad:conv2d": _grad_conv,
    "grad:layer_norm": _grad_layer_norm,
    "grad:backbone_stage": _grad_backbone_stage,
    "grad:awpe": _grad_awpe,
    "grad:fpl": _module_check(
        lambda rng: FeaturePerceptionLayer(8, rng), _seq(8), lambda m, u: ops.concat(m(u, _HW), axis=-1)
    ),
    "grad:gpal": _module_check(
        lambda rng: GlobalPerceptionAttention(8, rng), _seq_pair(8), lambda m, u, r: ops.concat(m(u, r, _HW), axis=-1)
    ),
    "grad:pwl": _module_check(lambda rng: PerceptionWeightLayer(8, rng), _seq_pair(4), lambda m, a, b: m(a, b)),
    "grad:lpffn": _module_check(lambda rng: LocalPerceptionFFN(4, rng), _seq_pair(4), lambda m, u, x: m(u, x, _HW)),
    "grad:recformer_layer": _module_check(lambda rng: RecFormerLayer(4, rng), _seq_pair(4), lambda m, u, r: m(u, r, _HW)),
    "grad:refine": _grad_refine,
    "grad:coarse_loss": _grad_coarse_loss,
    "grad:fine_loss": _grad_fine_loss,
}


# ------------------------------------------------------------------ oracles
def _instances(rng, check) -> float:
    worst = 0.0
    for _ in range(ORACLE_INSTANCES):
        worst = max(worst, float(check(rng)))
    return worst


def _oracle_dual_softmax(rng):
    def one(rng):
        n, m = rng.integers(1, 7, 2)
        s = rng.standard_normal((n, m)) * 3
        got = dual_softmax(Tensor(s)).data
        ref = np.empty_like(s)
        for i in range(n):
            for j in range(m):
                row = sum(np.exp(s[i, k] - s[i, j]) for k in range(m))
                col = sum(np.exp(s[k, j] - s[i, j]) for k in range(n))
                ref[i, j] = 1.0 / (row * col)
        return np.abs(got - ref).max()

    return _instances(rng, one), ""


def _oracle_mutual_nearest(rng):
    def one(rng):
        n, m = rng.integers(1, 7, 2)
        g = rng.integers(0, 4, (n, m)).astype(float)  # small integer range forces ties
        got = {tuple(p) for p in mutual_nearest(g)}
        ref = set()
        for i in range(n):
            j = min(range(m), key=lambda c: (-g[i, c], c))
            if min(range(n), key=lambda r: (-g[r, j], r)) == i:
                ref.add((i, j))
        return 0.0 if got == ref else 1.0

    return _instances(rng, one), ""


def _oracle_expectation(rng):
    def one(rng):
        w = int(rng.choice([3, 5, 7]))
        k = int(rng.integers(1, 5))
        p = rng.dirichlet(np.ones(w * w), size=k)
        got = expectation_offset(Tensor(p), w).data
        ref = np.zeros((k, 2))
        r = w // 2
        for q in range(k):
            for row in range(w):
                for col in range(w):
                    ref[q] += p[q, row * w + col] * np.array([col - r, row - r])
        return np.abs(got - ref).max()

    return _instances(rng, one), ""


def _oracle_coarse_loss(rng):
    def one(rng):
        n, m = rng.integers(2, 7, 2)
        g = rng.uniform(0, 1, (n, m))
        pairs = [(i, j) for i in range(n) for j in range(m) if rng.uniform() < 0.2]
        gt = GroundTruthMatches(np.array(pairs, dtype=np.int64).reshape(-1, 2))
        eps = 1e-6
        g = np.clip(g, eps, 1 - eps)
        pos = [np.log(g[i, j]) for i, j in pairs]
        neg = [np.log(1 - g[i, j]) for i in range(n) for j in range(m) if (i, j) not in pairs]
        ref = 0.0
        if pos:
            ref -= sum(pos) / len(pos)
        if neg:
            ref -= sum(neg) / len(neg)
        return abs(coarse_loss(Tensor(g), gt).item() - ref)

    return _instances(rng, one), ""


def _oracle_fine_loss(rng):
    def one(rng):
        k = int(rng.integers(1, 9))
        a, b = rng.standard_normal((k, 2)), rng.standard_normal((k, 2))
        ref = sum(np.hypot(*(a[q] - b[q])) for q in range(k)) / k
        return abs(fine_loss(Tensor(a), b).item() - ref)

    return _instances(rng, one), ""


def _oracle_mma(rng):
    def one(rng):
        errors = rng.exponential(3.0, int(rng.integers(1, 20)))
        th = list(range(1, 11))
        ref = [sum(1 for e in errors if e < t) / len(errors) for t in th]
        return np.abs(mma_from_errors(errors, th) - ref).max()

    return _instances(rng, one), ""


def auc_reference(errors, t: float) -> float:
    """Area under the step-free recall curve, integrated segment by segment."""
    es = sorted(errors)
    n = len(es)
    area, prev_e, prev_r = 0.0, 0.0, 0.0
    for k, e in enumerate(es, start=1):
        r = k / n
        if e >= t:
            break
        area += 0.5 * (prev_r + r) * (e - prev_e)
        prev_e, prev_r = e, r
    area += prev_r * (t - prev_e)
    return area / t


def _oracle_auc(rng):
    def one(rng):
        errors = rng.exponential(4.0, int(rng.integers(1, 15)))
        th = [1, 3, 5, 10]
        return np.abs(auc(errors, th) - [auc_reference(errors, t) for t in th]).max()

    return _instances(rng, one), ""


def _oracle_dw_conv(rng):
    def one(rng):
        c, h, w = rng.integers(1, 4), rng.integers(1, 6), rng.integers(1, 6)
        k = int(rng.choice([1, 3, 5]))
        x = rng.standard_normal((c, h, w))
        kern = rng.standard_normal((c, k, k))
        r = k // 2
        ref = np.zeros_like(x)
        for ch in range(c):
            for y in range(h):
                for xx in range(w):
                    for dy in range(-r, r + 1):
                        for dx in range(-r, r + 1):
                            if 0 <= y + dy < h and 0 <= xx + dx < w:
                                ref[ch, y, xx] += kern[ch, dy + r, dx + r] * x[ch, y + dy, xx + dx]
        return np.abs(ops.dw_conv2d(Tensor(x), Tensor(kern)).data - ref).max()

    return _instances(rng, one), ""


def _oracle_linear_attention(rng):
    def one(rng):
        n, m, d, dv = rng.integers(1, 8, 4)
        q, k, v = rng.standard_normal((n, d)), rng.standard_normal((m, d)), rng.standard_normal((m, dv))
        fq = np.where(q > 0, q + 1, np.exp(q))
        fk = np.where(k > 0, k + 1, np.exp(k))
        ref = (fq @ fk.T) @ v
        got = linear_attention(Tensor(q), Tensor(k), Tensor(v)).data
        return np.abs(got - ref).max() / max(1.0, np.abs(ref).max())

    return _instances(rng, one), ""


ORACLE_CHECKS: Dict[str, Callable] = {
    "oracle:dual_softmax": _oracle_dual_softmax,
    "oracle:mutual_nearest": _oracle_mutual_nearest,
    "oracle:expectation_offset": _oracle_expectation,
    "oracle:coarse_loss": _oracle_coarse_loss,
    "oracle:fine_loss": _oracle_fine_loss,
    "oracle:mma": _oracle_mma,
    "oracle:auc": _oracle_auc,
    "oracle:dw_conv2d": _oracle_dw_conv,
    "oracle:linear_attention": _oracle_linear_attention,
}


# --------------------------------------------------------------- invariants
def _inv_pwl_sum(rng):
    with default_dtype(np.float64):
        pwl = PerceptionWeightLayer(8, rng)
        a = pwl.branch_weights(Tensor(rng.standard_normal((3, 10, 4))), Tensor(rng.standard_normal((3, 10, 4)))).data
    return float(np.abs(a.sum(axis=-1) - 1).max()), ""


def _inv_zero_identity(rng):
    worst = 0.0
    u = Tensor(rng.standard_normal((12, 8)).astype(np.float32))
    r = Tensor(rng.standard_normal((12, 8)).astype(np.float32))
    worst = max(worst, float(np.abs(LocalPerceptionFFN(8, rng).zero_()(u, r, _HW).data - u.data).max()))
    worst = max(worst, float(np.abs(RecFormerLayer(8, rng).zero_()(u, r, _HW).data - u.data).max()))
    return worst, "exact"


def _inv_lpffn_channels(rng):
    dim = 6
    trace: List[int] = []
    u = Tensor(rng.standard_normal((12, dim)))
    LocalPerceptionFFN(dim, rng)(u, u, _HW, trace=trace)
    ok = trace == [2 * dim, 4 * dim, 8 * dim, dim]
    return (0.0 if ok else 1.0), "x".join(map(str, trace))


def _inv_step4(rng):
    with default_dtype(np.float64):
        block = InterleavedBlock(8, rng)
        fa = Tensor(rng.standard_normal((12, 8)))
        fb = Tensor(rng.standard_normal((12, 8)))
        out_a, out_b = block(fa, fb, _HW)
        a1 = block.self_layer(fa, fa, _HW)
        b1 = block.self_layer(fb, fb, _HW)
        a2 = block.cross_layer(a1, b1, _HW)
        ref_b = block.cross_layer(b1, a2, _HW)  # attends to the updated A
        stale_b = block.cross_layer(b1, a1, _HW)  # attends to the pre-cross A
    err = float(max(np.abs(out_a.data - a2.data).max(), np.abs(out_b.data - ref_b.data).max()))
    gap = float(np.abs(out_b.data - stale_b.data).max())
    if gap < 1e-9:
        err = float("inf")
    return err, f"stale-order gap {gap:.2e}"


def _inv_gt_labels(rng):
    size = (64, 64)
    kp = keypoint_grid(*size)
    ident = gt_matches(kp, kp, WarpSpec.identity(), size)
    bad = float(not np.array_equal(ident.pairs, np.stack([np.arange(64)] * 2, axis=1)))
    shifted = gt_matches(kp, kp, WarpSpec.translation(8, 0), size)
    expected = [(r * 8 + c, r * 8 + c + 1) for r in range(8) for c in range(7)]
    bad += float(shifted.as_set() != set(expected))
    return bad, f"{len(ident)} identity / {len(shifted)} shifted pairs"


def _inv_homography(rng):
    worst = 0.0
    for _ in range(20):
        H = np.eye(3) + rng.normal(0, 0.05, (3, 3)) * np.array([[1, 1, 20], [1, 1, 20], [1e-3, 1e-3, 0]])
        H /= H[2, 2]
        src = rng.uniform(0, 64, (30, 2))
        hom = np.c_[src, np.ones(30)] @ H.T
        dst = hom[:, :2] / hom[:, 2:]
        worst = max(worst, float(np.abs(dlt(src, dst) - H).max()))
        est, _ = estimate_homography(src, dst, RansacConfig(seed=int(rng.integers(1 << 30))))
        worst = max(worst, float(np.abs(est - H).max()))
    return worst, ""


def _inv_weights_roundtrip(rng):
    tensors = {"a": rng.standard_normal((2, 3)).astype(np.float32), "b.c": rng.standard_normal(5).astype(np.float32)}
    back = decode_weights(encode_weights(tensors))
    same = back.keys() == tensors.keys() and all(np.array_equal(back[k], tensors[k]) for k in tensors)
    return (0.0 if same else 1.0), ""


INVARIANT_CHECKS: Dict[str, Callable] = {
    "inv:pwl_weights_sum": (_inv_pwl_sum, 1e-12),
    "inv:zeroed_identity": (_inv_zero_identity, 0.0),
    "inv:lpffn_channels": (_inv_lpffn_channels, 0.0),
    "inv:step4_order": (_inv_step4, 1e-12),
    "inv:gt_labels": (_inv_gt_labels, 0.0),
    "inv:homography_exact": (_inv_homography, 1e-6),
    "inv:weights_roundtrip": (_inv_weights_roundtrip, 0.0),
}


# ----------------------------------------------------------- fault injection
def _broken_dw_conv2d(original):
    def dw_conv2d(x, kernels):
        out = original(x, kernels)
        inner = out._backward

        def backward(g):
            gx, gk = inner(g)
            return gx, gk[:, ::-1, :]  # kernel gradient flipped vertically

        out._backward = backward
        return out

    return dw_conv2d


FAULTS = {"dw_conv2d": _broken_dw_conv2d}


@contextlib.contextmanager
def injected_fault(name: Optional[str]) -> Iterator[None]:
    if name is None:
        yield
        return
    if name not in FAULTS:
        raise ValueError(f"unknown fault {name!r}; choose from {sorted(FAULTS)}")
    original = getattr(ops, name)
    setattr(ops, name, FAULTS[name](original))
    try:
        yield
    finally:
        setattr(ops, name, original)


def _table(groups) -> List[Tuple[str, Callable, float]]:
    out = []
    if "grad" in groups:
        out += [(n, fn, GRAD_TOL) for n, fn in GRADIENT_CHECKS.items()]
    if "oracle" in groups:
        out += [(n, fn, ORACLE_TOL) for n, fn in ORACLE_CHECKS.items()]
    if "inv" in groups:
        out += [(n, fn, tol) for n, (fn, tol) in INVARIANT_CHECKS.items()]
    return out


def check_names(groups=("grad", "oracle", "inv")) -> List[str]:
    return [name for name, _, _ in _table(groups)]


def run_selftest(
    seed: int = 0,
    fault: Optional[str] = None,
    groups=("grad", "oracle", "inv"),
    names: Optional[List[str]] = None,
    on_result: Optional[Callable[[CheckResult], None]] = None,
) -> SelftestReport:
    if names is not None:
        unknown = sorted(set(names) - set(check_names()))
        if unknown:
            raise ValueError(f"unknown checks {unknown}")
    report = SelftestReport()
    with injected_fault(fault):
        for name, fn, tol in _table(groups):
            if names is not None and name not in names:
                continue
            rng = np.random.default_rng([seed, sum(name.encode())])
            t0 = time.perf_counter()
            try:
                with default_dtype(np.float64), (no_grad() if name.startswith("oracle") else contextlib.nullcontext()):
                    err, detail = fn(rng)
                passed = bool(np.isfinite(err) and err <= tol)
            except Exception as exc:  # a crashing check is a failing check
                err, detail, passed = float("inf"), f"{type(exc).__name__}: {exc}", False
            result = CheckResult(name, passed, float(err), tol, time.perf_counter() - t0, detail)
            report.results.append(result)
            if on_result is not None:
                on_result(result)
    return report
