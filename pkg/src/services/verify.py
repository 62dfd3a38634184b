"""
Verification suites: named property checks over masks, gradients, the
expected-loss penalty and the rank statistics. Every check is seeded, so a
suite either always passes or always fails for a given code base.
"""
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from infrastructure.logger import log
from services.analysis.penalty import closed_form_penalty, general_trace_penalty, mc_expected_loss_gap
from services.analysis.ranking import chi2_sf, friedman_test, kendall_w_from_chi2, select_top_k
from services.autodiff import Tape, backward, finite_diff_grad, hessian_diag, relative_error
from services.regularizers.layers import dropconnect_forward, pernode_mask, pernodedrop_forward
from services.regularizers.masks import (FixedScope, Granularity, MaskMode, MaskSpec, Mode, RegularizerKind,
                                         RegularizerTag, Stir, expected_mask_value, mask_variance, sample_mask)
from services.tensor_core import RngStream, draw_normal, draw_uniform
from services.training.losses import LossKind, loss_node
from services.training.model import MaskedMLP, ModelConfig
from services.training.trainer import TrainRecord

SUITE_NAMES = ("masks", "gradients", "penalty", "stats")

# statistical checks are seeded; this bound keeps the family-wise false-failure
# rate of many simultaneous moment checks negligible
CLT_SIGMAS = 4.0
GRAD_TOLERANCE = 1e-5
RATES = (0.1, 0.5, 0.9)


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""


@dataclass
class VerifyReport:
    suite: str
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {"suite": self.suite, "passed": self.passed,
                "n_checks": len(self.checks), "n_failed": len(self.failures),
                "checks": [asdict(c) for c in self.checks]}

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path


def _check(results, suite, name, passed, detail=""):
    results.append(CheckResult(suite, name, bool(passed), detail))


def _spec(stir, p, **kwargs):
    return MaskSpec(stir=stir, drop_rate=p, **kwargs)


# ----------------------------------
# MASKS
# ----------------------------------
def _moment_check(spec, n, stream):
    """|mean − E[m]| and |var − Var(m)| in CLT standard errors."""
    m = sample_mask(spec, (n,), stream)
    mean, var = float(m.mean()), float(m.var(ddof=1))
    exp_mean, exp_var = expected_mask_value(spec), mask_variance(spec)
    mean_se = math.sqrt(exp_var / n) if exp_var > 0 else 1e-12
    fourth = float(np.mean((m - exp_mean) ** 4))
    var_se = math.sqrt(max(fourth - exp_var ** 2, 0.0) / n) or 1e-12
    return abs(mean - exp_mean) / mean_se, abs(var - exp_var) / var_se, mean, var


def check_masks(n: int = 100_000, seed: int = 0) -> list:
    results = []
    root = RngStream(seed).split("verify/masks")

    # 1. Mask moments for every stir and rate
    for stir in Stir:
        for p in RATES:
            spec = _spec(stir, p)
            z_mean, z_var, mean, var = _moment_check(spec, n, root.split(f"{stir.value}/{p}"))
            _check(results, "masks", f"moments[{stir.value},p={p}]",
                   z_mean <= CLT_SIGMAS and z_var <= CLT_SIGMAS,
                   f"mean={mean:.5f} (E={expected_mask_value(spec):.5f}, z={z_mean:.2f}), "
                   f"var={var:.5f} (E={mask_variance(spec):.5f}, z={z_var:.2f})")

    bern = sample_mask(_spec(Stir.BERNOULLI, 0.5), (1000,), root.split("binary"))
    _check(results, "masks", "bernoulli_is_binary", np.isin(bern, (0.0, 1.0)).all())

    # 2. Ones-weight probe: DropConnect shares one mask, PerNodeDrop masks per row
    batch, din, dout = 16, 8, 8
    x = np.ones((batch, din))
    spec = _spec(Stir.BERNOULLI, 0.5)
    dc = dropconnect_forward(x, np.ones((din, dout)), np.zeros(dout), spec, Mode.TRAIN, root.split("probe/dc"))
    _check(results, "masks", "dropconnect_batch_shared", np.all(dc == dc[0]),
           f"{len(np.unique(dc, axis=0))} distinct output rows")
    probe_stream = root.split("probe/pnd")
    pnd = pernodedrop_forward(x, np.eye(din), np.zeros(din), spec, Mode.TRAIN, stream=probe_stream.copy())
    mask = pernode_mask(spec, batch, din, din, stream=probe_stream.copy())
    _check(results, "masks", "pernodedrop_per_row_masks",
           np.array_equal(pnd, mask) and len(np.unique(mask, axis=0)) > 1,
           f"{len(np.unique(mask, axis=0))} distinct mask rows out of {batch}")

    # 3. Fixed masks depend on sample_id only
    fixed = _spec(Stir.BERNOULLI, 0.5, mode=MaskMode.FIXED, seed=seed)
    ids = np.arange(10)
    first = pernode_mask(fixed, 10, din, dout, ids)
    shuffled = pernode_mask(fixed, 10, din, dout, ids[::-1])
    _check(results, "masks", "fixed_masks_follow_sample_id", np.array_equal(first[::-1], shuffled))
    shared = pernode_mask(_spec(Stir.BERNOULLI, 0.5, mode=MaskMode.FIXED, fixed_scope=FixedScope.PER_MODEL),
                          4, din, dout)
    _check(results, "masks", "fixed_per_model_mask_shared", np.all(shared == shared[0]))

    # 4. Unbiasedness: mean of Train forwards equals the Eval forward (E[C] = (1−p)AB)
    n_draws = 10_000
    inst = root.split("unbiased")
    for stir in Stir:
        for granularity in Granularity:
            spec = _spec(stir, 0.5, granularity=granularity)
            xs = draw_normal(inst.split("x"), 0.0, 1.0, (4, 3))
            W = draw_normal(inst.split("W"), 0.0, 1.0, (3, 2))
            b = draw_normal(inst.split("b"), 0.0, 1.0, (2,))
            tiled = np.tile(xs, (n_draws, 1))
            train = pernodedrop_forward(tiled, W, b, spec, Mode.TRAIN,
                                        stream=inst.split(f"{stir.value}/{granularity.value}"))
            train = train.reshape(n_draws, 4, 2)
            evaluated = pernodedrop_forward(xs, W, b, spec, Mode.EVAL)
            se = train.std(axis=0, ddof=1) / math.sqrt(n_draws)
            z = np.abs(train.mean(axis=0) - evaluated) / np.maximum(se, 1e-12)
            _check(results, "masks", f"unbiased[{stir.value},{granularity.value}]", z.max() <= CLT_SIGMAS,
                   f"max z={z.max():.2f}")
    return results


# ----------------------------------
# GRADIENTS
# ----------------------------------
def gradient_error(kind: RegularizerKind, seed: int, batch: int = 6, input_dim: int = 4, n_classes: int = 3) -> float:
    """Relative error between backward() and central differences for one random 2-layer model (Train mode, frozen masks)."""
    root = RngStream(seed).split("verify/gradients")
    cfg = ModelConfig(input_dim, n_classes, (5,), kind, dense_units=4)
    model = MaskedMLP(cfg, stream=root.split("init"))
    # non-zero biases keep fully masked units away from the ReLU kink
    for name in [n for n in model.params if n.endswith(".b")]:
        model.params[name] = np.array(draw_normal(root.split(name), 0.0, 0.5, model.params[name].shape))
    x = draw_normal(root.split("x"), 0.0, 1.0, (batch, input_dim))
    y = np.eye(n_classes)[np.arange(batch) % n_classes]
    ids = np.arange(batch)
    mask_stream = root.split("masks")
    names = sorted(model.params)
    shapes = [model.params[n].shape for n in names]

    def unflatten(flat):
        out, start = {}, 0
        for name, shape in zip(names, shapes):
            size = int(np.prod(shape))
            out[name] = flat[start:start + size].reshape(shape)
            start += size
        return out

    def record(params, leaf):
        tape = Tape()
        nodes = {n: (tape.leaf if leaf else tape.constant)(params[n], n) for n in names}
        probs = model.graph(tape, nodes, tape.constant(x), Mode.TRAIN, ids, mask_stream.copy())
        return tape, nodes, loss_node(tape, probs, y, LossKind.CATEGORICAL_CE)

    tape, nodes, root_node = record(model.params, leaf=True)
    grads = backward(tape, root_node)
    analytic = np.concatenate([np.ravel(grads[nodes[n].id]) for n in names])
    flat = np.concatenate([model.params[n].ravel() for n in names])
    numeric = finite_diff_grad(lambda v: float(record(unflatten(v), leaf=False)[2].value), flat)
    return relative_error(analytic, numeric)


def gradient_kinds(p: float = 0.3, seed: int = 0) -> list:
    """One RegularizerKind per tag (PerNodeDrop in every stir/granularity/mode)."""
    kinds = [RegularizerKind(tag, MaskSpec(drop_rate=p, seed=seed))
             for tag in RegularizerTag if tag is not RegularizerTag.PERNODEDROP]
    for stir in Stir:
        for granularity in Granularity:
            for mode in MaskMode:
                spec = MaskSpec(stir=stir, drop_rate=p, granularity=granularity, mode=mode, seed=seed)
                kinds.append(RegularizerKind(RegularizerTag.PERNODEDROP, spec,
                                             name=f"PerNode{stir.value}_{granularity.value}_{mode.value}"))
    return kinds


def _primitive_checks(results, stream):
    a = draw_normal(stream.split("a"), 0.0, 1.0, (3, 4))
    w = draw_normal(stream.split("w"), 0.0, 1.0, (4, 2))
    mask = draw_uniform(stream.split("mask"), (3, 4, 2))
    recipes = {
        "exp": lambda t, n: t.exp(n),
        "log": lambda t, n: t.log(t.exp(n)),
        "sigmoid": lambda t, n: t.sigmoid(n),
        "softmax": lambda t, n: t.softmax(n),
        "matmul": lambda t, n: t.matmul(n, t.constant(w)),
        "masked_matmul": lambda t, n: t.masked_matmul(n, t.constant(w), mask),
    }
    for name, recipe in recipes.items():
        probe = Tape()
        weights = np.arange(1.0, 1.0 + recipe(probe, probe.constant(a)).value.size)

        def f(v, leaf=False):
            tape = Tape()
            node = tape.leaf(v) if leaf else tape.constant(v)
            out = recipe(tape, node)
            return tape, node, tape.sum(tape.scale(out, weights.reshape(out.value.shape)))

        tape, node, root = f(a, leaf=True)
        analytic = backward(tape, root)[node.id]
        numeric = finite_diff_grad(lambda v: float(f(v)[2].value), a)
        err = relative_error(analytic, numeric)
        _check(results, "gradients", f"primitive[{name}]", err < GRAD_TOLERANCE, f"rel err={err:.2e}")


def check_gradients(n_models: int = 6, seed: int = 0) -> list:
    results = []
    _primitive_checks(results, RngStream(seed).split("verify/primitives"))
    for kind in gradient_kinds(seed=seed):
        worst = max(gradient_error(kind, seed + i) for i in range(n_models))
        _check(results, "gradients", f"model[{kind.name}]", worst < GRAD_TOLERANCE, f"max rel err={worst:.2e}")
    return results


# ----------------------------------
# PENALTY
# ----------------------------------
def half_sq_norm(u):
    return 0.5 * float(np.sum(u * u))


def quadratic_loss(A, c):
    A, c = np.asarray(A, dtype=np.float64), np.asarray(c, dtype=np.float64)
    return lambda u: 0.5 * float((u - c) @ A @ (u - c))


def logistic_loss(X, y):
    X, y = np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.float64)
    return lambda u: float(np.mean(np.logaddexp(0.0, -y * (X @ u))))


def penalty_instance(stream, stir, dim=3):
    """Random positive-definite quadratic, weights and rate (or σ) for one stir type."""
    B = draw_normal(stream.split("B"), 0.0, 1.0, (dim, dim))
    A = B @ B.T + 0.5 * np.eye(dim)
    c = draw_normal(stream.split("c"), 0.0, 1.0, (dim,))
    W = draw_normal(stream.split("W"), 0.0, 1.0, (dim,))
    p = 0.1 + 0.7 * float(draw_uniform(stream.split("p"), ()))
    return quadratic_loss(A, c), W, MaskSpec(stir=stir, drop_rate=p)


def check_penalty(n_instances: int = 50, n_samples: int = 10_000, seed: int = 0) -> list:
    results = []
    root = RngStream(seed).split("verify/penalty")

    # 1. Closed-form anchors
    W = np.array([1.0, 2.0])
    bern = closed_form_penalty(W, hessian_diag(half_sq_norm, W * 0.5), MaskSpec(drop_rate=0.5))
    _check(results, "penalty", "bernoulli_anchor_0.625", abs(bern - 0.625) < 1e-6, f"{bern:.8f}")
    gauss = closed_form_penalty(W, hessian_diag(half_sq_norm, W), MaskSpec(Stir.GAUSSIAN, 0.5))
    _check(results, "penalty", "gaussian_anchor_2.5", abs(gauss - 2.5) < 1e-6, f"{gauss:.8f}")
    est = mc_expected_loss_gap(half_sq_norm, W, MaskSpec(drop_rate=0.5), n_samples, root.split("anchor"))
    _check(results, "penalty", "bernoulli_anchor_mc", abs(est.z_score) <= CLT_SIGMAS,
           f"mc={est.mc_gap:.4f}±{est.std_err:.4f}, closed={est.closed_form:.4f}")

    # 2. Quadratic losses: MC gap equals the closed form in expectation
    for stir in Stir:
        z_scores = []
        for i in range(n_instances):
            inst = root.split(f"quad/{stir.value}/{i}")
            loss_fn, W, spec = penalty_instance(inst, stir)
            z_scores.append(mc_expected_loss_gap(loss_fn, W, spec, n_samples, inst.split("masks")).z_score)
        z = np.abs(np.array(z_scores))
        within = float(np.mean(z <= 3.0))
        _check(results, "penalty", f"quadratic_agreement[{stir.value}]",
               z.max() <= 3.0,
               f"{within:.0%} of {n_instances} within 3 std errs, max |z|={z.max():.2f}")

    # 3. Second-order adequacy on a logistic loss at small rates
    stream = root.split("logistic")
    X = draw_normal(stream.split("X"), 0.0, 1.0, (40, 3))
    y = np.where(draw_uniform(stream.split("y"), (40,)) < 0.5, -1.0, 1.0)
    W = draw_normal(stream.split("W"), 0.0, 0.3, (3,))
    loss_fn = logistic_loss(X, y)
    for stir in Stir:
        for p in (0.1, 0.2, 0.3):
            est = mc_expected_loss_gap(loss_fn, W, MaskSpec(stir=stir, drop_rate=p), 20_000,
                                       stream.split(f"{stir.value}/{p}"), control_variate=True)
            rel = abs(est.mc_gap - est.closed_form) / abs(est.mc_gap)
            _check(results, "penalty", f"second_order[{stir.value},p={p}]", rel < 0.15, f"rel gap={rel:.3f}")

    # 4. General trace form reduces to the diagonal form
    B = draw_normal(root.split("H"), 0.0, 1.0, (3, 3))
    H = (B + B.T) / 2
    W = draw_normal(root.split("Wt"), 0.0, 1.0, (3,))
    spec = MaskSpec(drop_rate=0.3)
    general = general_trace_penalty(W, H, mask_variance(spec) * np.eye(3))
    diagonal = closed_form_penalty(W, np.diag(H), spec)
    _check(results, "penalty", "trace_form_reduces", abs(general - diagonal) < 1e-12,
           f"{general:.15f} vs {diagonal:.15f}")
    _check(results, "penalty", "zero_covariance", general_trace_penalty(W, H, np.zeros((3, 3))) == 0.0)
    return results


# ----------------------------------
# STATS
# ----------------------------------
def check_stats(seed: int = 0) -> list:
    results = []
    w = kendall_w_from_chi2(34.6, 5, 8)
    _check(results, "stats", "kendall_w_cross_check", abs(w - 0.989) < 5e-3, f"W={w:.4f}")
    p = chi2_sf(34.6, 7)
    _check(results, "stats", "chi2_tail_cross_check", p <= 2e-5, f"p={p:.3e}")

    tail_err = max(abs(chi2_sf(x, 2) - math.exp(-x / 2)) / math.exp(-x / 2) for x in (0.5, 3.0, 10.0, 40.0))
    _check(results, "stats", "chi2_two_dof_closed_form", tail_err < 1e-10, f"max rel err={tail_err:.2e}")

    concordant = np.tile(np.arange(8, dtype=np.float64), (5, 1))
    report = friedman_test(concordant)
    _check(results, "stats", "perfect_concordance",
           abs(report.friedman_chi2 - 35.0) < 1e-9 and abs(report.kendall_w - 1.0) < 1e-12,
           f"chi2={report.friedman_chi2:.4f}, W={report.kendall_w:.4f}")

    stream = RngStream(seed).split("verify/stats")
    blocks = draw_normal(stream.split("blocks"), 0.0, 1.0, (6, 5))
    base, transformed = friedman_test(blocks), friedman_test(np.exp(3.0 * blocks) + 7.0)
    _check(results, "stats", "rank_invariance",
           base.friedman_chi2 == transformed.friedman_chi2 and base.mean_ranks == transformed.mean_ranks)
    _check(results, "stats", "w_bounds", 0.0 <= base.kendall_w <= 1.0, f"W={base.kendall_w:.4f}")

    losses = draw_uniform(stream.split("records"), (40,))
    records = [TrainRecord(f"v{i % 4}", (i // 4) % 5 / 10, i // 20 + 1, float(v), 0.5, 0.3, 0.6, 0.0)
               for i, v in enumerate(losses)]
    oracle = []
    for name in sorted({r.variant for r in records}):
        group = sorted((r for r in records if r.variant == name), key=lambda r: (r.val_loss, r.epoch, r.drop_rate))
        oracle.extend(group[:3])
    _check(results, "stats", "top_k_sort_oracle", select_top_k(records, 3) == oracle)
    return results


SUITES = {
    "masks": check_masks,
    "gradients": check_gradients,
    "penalty": check_penalty,
    "stats": check_stats,
}


def run_verify(suite: str = "all", report_path=None) -> VerifyReport:
    """Runs one suite (or all of them, in order) and optionally writes the JSON report."""
    names = SUITE_NAMES if suite == "all" else (suite,)
    report = VerifyReport(suite)
    for name in names:
        log.info(f"[VERIFY] running suite '{name}'")
        checks = SUITES[name]()
        report.checks.extend(checks)
        failed = sum(not c.passed for c in checks)
        log.info(f"[VERIFY] {name}: {len(checks) - failed}/{len(checks)} checks passed")
    if report_path is not None:
        report.write(report_path)
    return report
