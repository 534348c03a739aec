"""Central finite-difference verification of reverse-mode gradients."""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from tensor_core import ops
from tensor_core.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
ERROR_FLOOR = 1e-6


@dataclass
class GroupResult:
    group: str
    worst_relative_error: float
    passed: bool
    entries: int


@dataclass
class GradCheckReport:
    tolerance: float
    results: List[GroupResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[GroupResult]:
        return [r for r in self.results if not r.passed]

    def extend(self, other: "GradCheckReport") -> None:
        self.results.extend(other.results)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), ERROR_FLOOR)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numerical_gradient(
    objective: Callable[[], Tensor],
    tensor: Tensor,
    step: float = DEFAULT_STEP,
    entries: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Central differences of ``objective`` with respect to ``tensor`` (in place, restored)."""
    grad = np.zeros(tensor.shape)
    flat = tensor.data.reshape(-1)
    positions = range(flat.size) if entries is None else entries
    with no_grad():
        for i in positions:
            original = flat[i]
            flat[i] = original + step
            upper = objective().item()
            flat[i] = original - step
            lower = objective().item()
            flat[i] = original
            grad.reshape(-1)[i] = (upper - lower) / (2.0 * step)
    return grad


def check_gradients(
    objective: Callable[[], Tensor],
    tensors: Mapping[str, Tensor],
    tolerance: float = DEFAULT_TOLERANCE,
    step: float = DEFAULT_STEP,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    for t in tensors.values():
        t.zero_grad()
    backward(objective())

    report = GradCheckReport(tolerance=tolerance)
    rng = rng or np.random.default_rng(0)
    for name, tensor in tensors.items():
        analytic = tensor.grad if tensor.grad is not None else np.zeros(tensor.shape)
        entries = None
        if max_entries is not None and tensor.size > max_entries:
            entries = np.sort(rng.choice(tensor.size, size=max_entries, replace=False))
        numeric = numerical_gradient(objective, tensor, step=step, entries=entries)
        if entries is not None:
            analytic = analytic.reshape(-1)[entries]
            numeric = numeric.reshape(-1)[entries]
        error = relative_error(analytic, numeric)
        report.results.append(GroupResult(name, error, error <= tolerance, analytic.size))
        logger.debug("gradcheck %s: worst relative error %.3e", name, error)
    return report


OpCase = Tuple[str, Callable[[Dict[str, Tensor]], Tensor], Dict[str, Tensor]]


def _leaf(rng: np.random.Generator, *shape: int, positive: bool = False) -> Tensor:
    data = rng.uniform(0.5, 2.0, size=shape) if positive else rng.normal(size=shape)
    return Tensor(data, requires_grad=True)


def op_cases(rng: np.random.Generator) -> List[OpCase]:
    """Small random instances of every differentiable op, two shapes each."""
    cases: List[OpCase] = []
    for m, k, n in ((2, 3, 4), (5, 1, 3)):
        cases.append((f"matmul {m}x{k}@{k}x{n}", lambda t: t["a"] @ t["b"],
                      {"a": _leaf(rng, m, k), "b": _leaf(rng, k, n)}))
    cases.append(("matmul batched 2x3x4@2x4x2", lambda t: t["a"] @ t["b"],
                  {"a": _leaf(rng, 2, 3, 4), "b": _leaf(rng, 2, 4, 2)}))
    for shape in ((3, 4), (2, 5)):
        cases.append((f"add {shape}", lambda t: t["a"] + t["b"], {"a": _leaf(rng, *shape), "b": _leaf(rng, *shape)}))
        cases.append((f"add bias {shape}", lambda t: t["a"] + t["b"],
                      {"a": _leaf(rng, *shape), "b": _leaf(rng, shape[-1])}))
        cases.append((f"sub {shape}", lambda t: t["a"] - t["b"], {"a": _leaf(rng, *shape), "b": _leaf(rng, *shape)}))
        cases.append((f"mul {shape}", lambda t: t["a"] * t["b"], {"a": _leaf(rng, *shape), "b": _leaf(rng, *shape)}))
        cases.append((f"div {shape}", lambda t: t["a"] / t["b"],
                      {"a": _leaf(rng, *shape), "b": _leaf(rng, *shape, positive=True)}))
        cases.append((f"mul scalar {shape}", lambda t: t["s"] * t["a"],
                      {"s": Tensor(rng.normal(), requires_grad=True), "a": _leaf(rng, *shape)}))
        cases.append((f"relu {shape}", lambda t: ops.relu(t["a"]), {"a": _leaf(rng, *shape)}))
        cases.append((f"gelu {shape}", lambda t: ops.gelu(t["a"]), {"a": _leaf(rng, *shape)}))
        cases.append((f"exp {shape}", lambda t: ops.exp(t["a"]), {"a": _leaf(rng, *shape)}))
        cases.append((f"log {shape}", lambda t: ops.log(t["a"]), {"a": _leaf(rng, *shape, positive=True)}))
        cases.append((f"power {shape}", lambda t: t["a"] ** -1.0, {"a": _leaf(rng, *shape, positive=True)}))
        cases.append((f"sum axis0 {shape}", lambda t: ops.sum(t["a"], axis=0), {"a": _leaf(rng, *shape)}))
        cases.append((f"mean axis1 {shape}", lambda t: ops.mean(t["a"], axis=1), {"a": _leaf(rng, *shape)}))
        cases.append((f"max {shape}", lambda t: ops.max(t["a"]), {"a": _leaf(rng, *shape)}))
        cases.append((f"max axis1 {shape}", lambda t: ops.max(t["a"], axis=1), {"a": _leaf(rng, *shape)}))
        cases.append((f"transpose {shape}", lambda t: t["a"].T, {"a": _leaf(rng, *shape)}))
        cases.append((f"reshape {shape}", lambda t: t["a"].reshape(-1), {"a": _leaf(rng, *shape)}))
        cases.append((f"softmax {shape}", lambda t: ops.softmax(t["a"], axis=-1), {"a": _leaf(rng, *shape)}))
        cases.append((f"softmax axis0 {shape}", lambda t: ops.softmax(t["a"], axis=0), {"a": _leaf(rng, *shape)}))
        cases.append((f"log_softmax {shape}", lambda t: ops.log_softmax(t["a"]), {"a": _leaf(rng, *shape)}))
        cases.append((f"layer_norm {shape}", lambda t: ops.layer_norm(t["x"], t["g"], t["b"]),
                      {"x": _leaf(rng, *shape), "g": _leaf(rng, shape[-1]), "b": _leaf(rng, shape[-1])}))
        cases.append((f"concat {shape}", lambda t: ops.concat([t["a"], t["b"]], axis=0),
                      {"a": _leaf(rng, *shape), "b": _leaf(rng, 1, shape[-1])}))
        cases.append((f"index {shape}", lambda t: t["a"][1:, :2], {"a": _leaf(rng, *shape)}))
        cases.append((f"embedding {shape}", lambda t: ops.embedding(t["w"], [0, len(t["w"]) - 1, 0]), {"w": _leaf(rng, *shape)}))
        cases.append((f"masked_fill {shape}", lambda t: ops.masked_fill(t["a"], np.triu(np.ones(t["a"].shape), 1), 0.0),
                      {"a": _leaf(rng, *shape)}))
        cases.append((f"cross_entropy {shape}", lambda t: ops.cross_entropy(t["a"], [0] * t["a"].shape[0]),
                      {"a": _leaf(rng, *shape)}))
    cases.append(("transpose batched 2x3x4", lambda t: t["a"].transpose(1, 0, 2), {"a": _leaf(rng, 2, 3, 4)}))
    return cases


def run_op_suite(tolerance: float = DEFAULT_TOLERANCE, seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for label, build, inputs in op_cases(rng):
        weights_rng = np.random.default_rng(rng.integers(2 ** 32))
        weights: Dict[str, np.ndarray] = {}

        def objective(build=build, inputs=inputs, weights_rng=weights_rng, weights=weights):
            out = build(inputs)
            if "w" not in weights:
                weights["w"] = weights_rng.normal(size=out.shape)
            return ops.sum(ops.mul(out, Tensor(weights["w"]))) if out.ndim else out

        sub = check_gradients(objective, inputs, tolerance=tolerance)
        for result in sub.results:
            result.group = f"{label} / {result.group}"
        report.extend(sub)
    return report
