"""Self-checks that need no data: reference shapes, gradients, Adam, reference metrics."""

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from mwcnn import model as M
from mwcnn.gradcheck import finite_diff_check
from mwcnn.metrics import ConfusionCounts, metrics
from mwcnn.train import AdamState, TrainConfig, adam_step

GRAD_TOLERANCE = {"conv": 1e-5, "dense": 1e-6, "maxpool": 1e-4, "relu": 1e-4, "dropout": 1e-4,
                  "softmax_xent": 1e-4, "network": 1e-4}

# published confusion counts and rates (percent) for the 8 s model
REFERENCE_COUNTS = ConfusionCounts(tp=441, tn=431, fp=34, fn=44)
REFERENCE_RATES = {"accuracy": (91.78, 0.02), "precision": (92.84, 0.01), "npv": (90.73, 0.02)}


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def check_shapes(floor_pooling=False):
    arch = M.build_arch(8, 1024, 64)
    if floor_pooling:
        arch = M.with_floor_pooling(arch)
    trace = M.shape_trace(arch)
    bad = [f"row {i}: expected {M.format_shape(want)}, got {M.format_shape(got)}"
           for i, (want, got) in enumerate(zip(M.REFERENCE_8S_SHAPES, trace), start=1) if want != got]
    if len(trace) != len(M.REFERENCE_8S_SHAPES):
        bad.append(f"{len(trace)} numbered layers, expected {len(M.REFERENCE_8S_SHAPES)}")
    return Check("shape trace (8 s, 1024 Hz, 64 ch)", not bad, "; ".join(bad) or "all 12 rows match")


def check_gradients(conv_grad_perturb=0.0):
    out = []
    for layer, tol in GRAD_TOLERANCE.items():
        res = finite_diff_check(layer, tolerance=tol, conv_perturb=conv_grad_perturb)
        out.append(Check(f"gradient {layer}", res.passed,
                         f"max rel error {res.max_rel_error:.3e} (tol {tol:g})"))
    return out


def adam_reference(steps, lr=Fraction(1, 1000), b1=Fraction(9, 10), b2=Fraction(999, 1000),
                   eps=1e-8):
    """Exact-arithmetic parameter trajectory for constant unit gradient from theta = 0."""
    theta, m, v, out = 0.0, Fraction(0), Fraction(0), []
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1)
        v = b2 * v + (1 - b2)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta -= float(lr * m_hat) / (float(v_hat) ** 0.5 + eps)
        out.append(theta)
    return out


def check_adam():
    cfg = TrainConfig()
    theta = [np.zeros(1)]
    state = AdamState.zeros(theta)
    got = []
    for _ in range(3):
        adam_step(theta, [np.ones(1)], state, cfg)
        got.append(float(theta[0][0]))
    want = adam_reference(3)
    err = max(abs(a - b) for a, b in zip(got, want))
    return Check("adam three unit-gradient steps", err <= 1e-12, f"max abs error {err:.1e}")


def check_metrics():
    m = metrics(REFERENCE_COUNTS)
    problems = []
    for name, (ref, tol) in REFERENCE_RATES.items():
        value = 100 * getattr(m, name)
        if abs(value - ref) > tol:
            problems.append(f"{name} {value:.4f}% vs {ref}% (tol {tol}pp)")
    detail = "; ".join(problems) or (
        f"accuracy {100 * m.accuracy:.2f}%, precision {100 * m.precision:.2f}%, npv {100 * m.npv:.2f}%"
    )
    return Check("metrics from reference counts", not problems, detail)


def run_checks(floor_pooling=False, conv_grad_perturb=0.0):
    """All checks; the keyword arguments inject faults to show the checks can fail."""
    return [check_shapes(floor_pooling), *check_gradients(conv_grad_perturb), check_adam(),
            check_metrics()]
