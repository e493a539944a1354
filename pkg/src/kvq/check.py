"""Self-verification suites run by ``kvq check``.

Ops are looked up on the ``kvq.tensor`` module at call time, so a patched op
is exercised by the gradient suite and reported by name.
"""

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import fwa
from . import tensor as T
from .backbone import BackboneConfig, backbone_forward, block_forward, init_block_params, subparams
from .gradcheck import grad_check
from .heads import aggregate_quality, ensemble_saliency, saliency_head, texture_head
from .losses import plcc_loss, rank_loss, total_loss, LossWeights
from .lpc import lpc_loss
from .metrics import auc, fixation_points, kl_div, nss, plcc, sauc, srcc
from .model import KVQModel
from .tensor import Tensor

H = 1e-5
TOL = 1e-6


@dataclass
class CaseResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SuiteResult:
    name: str
    cases: List[CaseResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def failed(self) -> List[CaseResult]:
        return [c for c in self.cases if not c.passed]


def _leaf(rng, shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.1) -> Tensor:
    mag = rng.uniform(margin, 1.0, size=shape)
    return Tensor(np.where(rng.uniform(size=shape) < 0.5, -mag, mag), requires_grad=True)


def _probe(out: Tensor, rng) -> Tensor:
    """Scalarize through a fixed random weighting so no gradient is trivially zero."""
    w = Tensor(rng.normal(size=out.shape))
    return T.sum(T.mul(out, w))


# -- gradient cases: name -> builder(rng) -> (f, inputs) -----------------------------

def _elementwise(op_name, low=-1.0, high=1.0):
    def build(rng):
        x = _leaf(rng, (3, 4), low, high)
        w = rng.normal(size=(3, 4))
        return (lambda a: _probe_fixed(getattr(T, op_name)(a), w)), [x]
    return build


def _binary(op_name, low=-1.0, high=1.0):
    def build(rng):
        a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4), low, high)
        w = rng.normal(size=(3, 4))
        return (lambda x, y: _probe_fixed(getattr(T, op_name)(x, y), w)), [a, b]
    return build


def _probe_fixed(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum(T.mul(out, Tensor(w.reshape(out.shape))))


def _case_power(rng):
    x = _leaf(rng, (3, 4), 0.5, 2.0)
    w = rng.normal(size=(3, 4))
    return (lambda a: _probe_fixed(T.power(a, 2.5), w)), [x]


def _case_relu(rng):
    x = _away_from_zero(rng, (3, 4))
    w = rng.normal(size=(3, 4))
    return (lambda a: _probe_fixed(T.relu(a), w)), [x]


def _case_sum(rng):
    x = _leaf(rng, (2, 3, 4))
    w = rng.normal(size=(2, 4))
    return (lambda a: _probe_fixed(T.sum(a, axis=1), w)), [x]


def _case_mean(rng):
    x = _leaf(rng, (2, 3, 4))
    w = rng.normal(size=(3,))
    return (lambda a: _probe_fixed(T.mean(a, axis=(0, 2)), w)), [x]


def _case_reshape(rng):
    x = _leaf(rng, (2, 6))
    w = rng.normal(size=(3, 4))
    return (lambda a: _probe_fixed(T.reshape(a, (3, 4)), w)), [x]


def _case_transpose(rng):
    x = _leaf(rng, (2, 3, 4))
    w = rng.normal(size=(4, 2, 3))
    return (lambda a: _probe_fixed(T.transpose(a, (2, 0, 1)), w)), [x]


def _case_swapaxes(rng):
    x = _leaf(rng, (2, 3, 4))
    w = rng.normal(size=(2, 4, 3))
    return (lambda a: _probe_fixed(T.swapaxes(a, -1, -2), w)), [x]


def _case_concat(rng):
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 2))
    w = rng.normal(size=(2, 5))
    return (lambda x, y: _probe_fixed(T.concat([x, y], axis=1), w)), [a, b]


def _case_stack(rng):
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 3))
    w = rng.normal(size=(2, 2, 3))
    return (lambda x, y: _probe_fixed(T.stack([x, y], axis=1), w)), [a, b]


def _case_gather(rng):
    x = _leaf(rng, (5, 3))
    idx = rng.integers(0, 5, size=(2, 4))
    w = rng.normal(size=(2, 4, 3))
    return (lambda a: _probe_fixed(T.gather(a, idx, axis=0), w)), [x]


def _case_index(rng):
    x = _leaf(rng, (4, 5))
    w = rng.normal(size=(2, 5))
    return (lambda a: _probe_fixed(T.index(a, slice(1, 3)), w)), [x]


def _case_matmul(rng):
    a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (2, 4, 2))
    w = rng.normal(size=(2, 3, 2))
    return (lambda x, y: _probe_fixed(T.matmul(x, y), w)), [a, b]


def _case_linear(rng):
    x, wt, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 3)), _leaf(rng, (3,))
    w = rng.normal(size=(2, 3, 3))
    return (lambda a, m, c: _probe_fixed(T.linear(a, m, c), w)), [x, wt, b]


def _case_softmax(rng):
    x = _leaf(rng, (3, 5), -2.0, 2.0)
    w = rng.normal(size=(3, 5))
    return (lambda a: _probe_fixed(T.softmax(a, axis=-1), w)), [x]


def _case_layer_norm(rng):
    x, g, b = _leaf(rng, (3, 6)), _leaf(rng, (6,), 0.5, 1.5), _leaf(rng, (6,))
    w = rng.normal(size=(3, 6))
    return (lambda a, gm, bt: _probe_fixed(T.layer_norm(a, gm, bt), w)), [x, g, b]


def _case_avgpool(rng):
    x = _leaf(rng, (4, 6))
    w = rng.normal(size=(2, 2))
    return (lambda a: _probe_fixed(T.avgpool(a, (2, 3), (0, 1)), w)), [x]


def _case_resample3d(rng):
    x = _leaf(rng, (2, 3, 2))
    w = rng.normal(size=(3, 5, 4))
    return (lambda a: _probe_fixed(T.resample3d(a, (3, 5, 4)), w)), [x]


def _case_composite_graph(rng):
    a, b = _leaf(rng, (4, 3)), _leaf(rng, (3, 4))
    w = rng.normal(size=(2, 2))
    return (lambda x, y: _probe_fixed(T.avgpool(T.softmax(T.matmul(x, y), axis=-1), (2, 2), (0, 1)), w)), [a, b]


_SMALL = dict(grid=(2, 4, 4), channels=8, window=(2, 2, 2), heads=2)


def _fwa_params(rng, c):
    return {k: Tensor(v.data * 10.0, requires_grad=True) for k, v in fwa.init_fwa_params(c, rng).items()}


def _case_fwa(rng):
    c = _SMALL["channels"]
    x = _leaf(rng, (1,) + _SMALL["grid"] + (c,))
    params = _fwa_params(rng, c)
    names = ("wq_c", "wv_c", "wq_i", "wo_c")
    w = rng.normal(size=x.shape)

    def f(xx, *ws):
        p = dict(params, **dict(zip(names, ws)))
        out, _ = fwa.fwa_forward(xx, p, _SMALL["window"], 2, _SMALL["heads"])
        return _probe_fixed(out, w)

    return f, [x] + [params[n] for n in names]


def _case_block(rng):
    c = _SMALL["channels"]
    x = _leaf(rng, (1,) + _SMALL["grid"] + (c,))
    params = init_block_params(c, 2, rng, np.float64)
    params = {k: Tensor(v.data + rng.normal(0, 0.3, v.shape), requires_grad=True) for k, v in params.items()}
    names = ("norm1.gamma", "attn.wk_c", "attn.wv_i", "mlp.fc1.weight")
    w = rng.normal(size=x.shape)

    def f(xx, *ws):
        p = dict(params, **dict(zip(names, ws)))
        out, _ = block_forward(xx, p, _SMALL["window"], 2, _SMALL["heads"])
        return _probe_fixed(out, w)

    return f, [x] + [params[n] for n in names]


_TINY_CFG = dict(patch_size=(2, 2, 2), channels=(4, 8), depths=(1, 1), heads=(1, 2),
                 window_size=(1, 2, 2), top_k=1, mlp_ratio=2, input_size=(2, 8, 16))


def _tiny_model(rng) -> KVQModel:
    model = KVQModel.init(BackboneConfig(**_TINY_CFG), seed=int(rng.integers(1 << 31)), dtype=np.float64)
    for k, v in model.params.items():
        model.params[k] = Tensor(v.data + rng.normal(0, 0.2, v.shape), requires_grad=True)
    return model


def _case_backbone(rng):
    model = _tiny_model(rng)
    video = _leaf(rng, (1, 2, 8, 16, 3), 0.0, 1.0)
    bb = subparams(model.params, "backbone")
    names = ("embed.weight", "stages.1.merge.reduction.weight")
    out_shape = (1, 1, 2, 4, 8)
    w = rng.normal(size=out_shape)

    def f(v, *ws):
        p = dict(bb, **dict(zip(names, ws)))
        out, _ = backbone_forward(v, p, model.cfg)
        return _probe_fixed(out, w)

    return f, [video] + [bb[n] for n in names]


def _case_heads(rng):
    feats = _leaf(rng, (2, 2, 3, 3, 4))
    tex = {"weight": _leaf(rng, (4, 1)), "bias": _leaf(rng, (1,))}
    sal = {"weight": _leaf(rng, (4, 1)), "bias": _leaf(rng, (1,))}
    sig = [Tensor(rng.uniform(0, 2, (2, 2, 3, 3)))]
    weights = _leaf(rng, (2,))
    w = rng.normal(size=(2,))

    def f(x, tw, sw, ew):
        q = texture_head(x, {"weight": tw, "bias": tex["bias"]})
        s = ensemble_saliency(saliency_head(x, {"weight": sw, "bias": sal["bias"]}), sig, ew)
        return _probe_fixed(aggregate_quality(s, q), w)

    return f, [feats, tex["weight"], sal["weight"], weights]


def _case_model(rng):
    model = _tiny_model(rng)
    video = _leaf(rng, (2, 2, 8, 16, 3), 0.0, 1.0)
    names = ("ensemble.weights", "texture.weight", "backbone.stages.0.blocks.0.attn.wq_c")
    w = rng.normal(size=(2,))

    def f(v, *ws):
        for n, p in zip(names, ws):
            model.params[n] = p
        return _probe_fixed(model(v).quality, w)

    return f, [video] + [model.params[n] for n in names]


def _case_lpc(rng):
    a, b = _leaf(rng, (2, 2, 3, 3)), _leaf(rng, (2, 2, 3, 3))
    return (lambda x, y: lpc_loss(x, y)), [a, b]


def _case_plcc_loss(rng):
    q = _leaf(rng, (6,))
    gt = rng.uniform(size=6)
    return (lambda x: plcc_loss(x, gt)), [q]


def _case_rank_loss(rng):
    # pairwise gaps kept well away from the hinge kink
    q = Tensor(np.cumsum(rng.uniform(0.1, 0.5, size=6))[rng.permutation(6)], requires_grad=True)
    gt = rng.uniform(size=6)
    return (lambda x: rank_loss(x, gt)), [q]


def _case_total_loss(rng):
    q = _leaf(rng, (5,))
    gt = rng.uniform(size=5)
    lp = _leaf(rng, (), 0.0, 1.0)
    weights = LossWeights(rank=0.7, lpc=1.3)
    return (lambda x, y: total_loss(plcc_loss(x, gt), rank_loss(x, gt), y, weights)), [q, lp]


GRADIENT_CASES: Dict[str, Callable] = {
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "div": _binary("div", 0.5, 2.0),
    "neg": _elementwise("neg"),
    "power": _case_power,
    "exp": _elementwise("exp"),
    "log": _elementwise("log", 0.5, 2.0),
    "sqrt": _elementwise("sqrt", 0.5, 2.0),
    "tanh": _elementwise("tanh"),
    "relu": _case_relu,
    "gelu": _elementwise("gelu", -3.0, 3.0),
    "sum": _case_sum,
    "mean": _case_mean,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "swapaxes": _case_swapaxes,
    "concat": _case_concat,
    "stack": _case_stack,
    "gather": _case_gather,
    "index": _case_index,
    "matmul": _case_matmul,
    "linear": _case_linear,
    "softmax": _case_softmax,
    "layer_norm": _case_layer_norm,
    "avgpool": _case_avgpool,
    "resample3d": _case_resample3d,
    "composite_graph": _case_composite_graph,
    "fwa_forward": _case_fwa,
    "block_forward": _case_block,
    "backbone_forward": _case_backbone,
    "heads_and_ensemble": _case_heads,
    "model_quality": _case_model,
    "lpc_loss": _case_lpc,
    "plcc_loss": _case_plcc_loss,
    "rank_loss": _case_rank_loss,
    "total_loss": _case_total_loss,
}

# composite cases probe a random subset of elements per input to bound runtime
PROBE_LIMIT = {"fwa_forward": 4, "block_forward": 4, "backbone_forward": 4, "model_quality": 3}


def gradient_suite(seeds: Sequence[int] = range(100), cases: Sequence[str] = None) -> SuiteResult:
    """Central differences (h=1e-5) against reverse mode for every case and seed."""
    start = time.perf_counter()
    result = SuiteResult("gradients")
    with T.default_dtype(np.float64):
        for name in cases or GRADIENT_CASES:
            build = GRADIENT_CASES[name]
            worst, bad_seed = 0.0, None
            for seed in seeds:
                rng = np.random.default_rng([seed, len(name)])
                f, inputs = build(rng)
                rep = grad_check(f, inputs, h=H, tol=TOL, max_elements=PROBE_LIMIT.get(name), rng=rng)
                if rep.max_rel_error > worst or not np.isfinite(rep.max_rel_error):
                    worst = rep.max_rel_error
                if not rep.passed and bad_seed is None:
                    bad_seed = seed
            passed = bad_seed is None
            detail = f"max rel err {worst:.2e} over {len(seeds)} seeds"
            if not passed:
                detail += f" (first failing seed {bad_seed})"
            result.cases.append(CaseResult("gradients", name, passed, detail))
    result.seconds = time.perf_counter() - start
    return result


# -- attention oracles --------------------------------------------------------------

def _windows_of(grid, window) -> List[List[Tuple[int, int, int]]]:
    """Coordinates of each window in raster order, slots in raster order."""
    t, h, w = grid
    wt, wh, ww = window
    out = []
    for a in range(0, t, wt):
        for b in range(0, h, wh):
            for c in range(0, w, ww):
                out.append([(a + i, b + j, c + k) for i in range(wt) for j in range(wh) for k in range(ww)])
    return out


def _dense_attention(xq, xkv, wq, wk, wv, wo, heads):
    """Plain multi-head attention in numpy: softmax(q k^T / sqrt(d)) v, heads concatenated, then wo."""
    c = xq.shape[-1]
    d = c // heads
    q, k, v = xq @ wq, xkv @ wk, xkv @ wv
    outs = []
    for hd in range(heads):
        sl = slice(hd * d, (hd + 1) * d)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(d)
        s = np.exp(s - s.max(axis=1, keepdims=True))
        s /= s.sum(axis=1, keepdims=True)
        outs.append(s @ v[:, sl])
    return np.concatenate(outs, axis=1) @ wo


def dense_iwa(x: np.ndarray, p: Dict[str, np.ndarray], window, heads: int) -> np.ndarray:
    """Reference intra-window attention on a single ``[T, H, W, C]`` map."""
    out = np.zeros_like(x)
    for coords in _windows_of(x.shape[:3], window):
        tokens = np.stack([x[c] for c in coords])
        res = _dense_attention(tokens, tokens, p["wq_i"], p["wk_i"], p["wv_i"], p["wo_i"], heads)
        for c, r in zip(coords, res):
            out[c] = r
    return out


def dense_cwa_all(x: np.ndarray, p: Dict[str, np.ndarray], window, heads: int) -> np.ndarray:
    """Reference cross-window attention with every other window routed (self masked)."""
    out = np.zeros_like(x)
    windows = _windows_of(x.shape[:3], window)
    for n, coords in enumerate(windows):
        own = np.stack([x[c] for c in coords])
        others = np.stack([x[c] for m, cs in enumerate(windows) if m != n for c in cs])
        res = _dense_attention(own, others, p["wq_c"], p["wk_c"], p["wv_c"], p["wo_c"], heads)
        for c, r in zip(coords, res):
            out[c] = r
    return out


def exhaustive_route(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-k per row by full sort on (score desc, index asc), diagonal excluded."""
    n = scores.shape[0]
    rows = []
    for i in range(n):
        cand = sorted((j for j in range(n) if j != i), key=lambda j: (-scores[i, j], j))
        rows.append(cand[:k])
    return np.array(rows, dtype=np.int64).reshape(n, k)


def attention_suite(instances: int = 200) -> SuiteResult:
    start = time.perf_counter()
    result = SuiteResult("attention")
    grid, c, window, heads = _SMALL["grid"], _SMALL["channels"], _SMALL["window"], _SMALL["heads"]
    n_w = int(np.prod([g // w for g, w in zip(grid, window)]))
    m = int(np.prod(window))
    worst_iwa = worst_cwa = worst_sum = worst_rows = worst_sig = 0.0
    route_ok = True
    with T.default_dtype(np.float64):
        for seed in range(20):
            rng = np.random.default_rng([seed, 7])
            x = rng.normal(size=grid + (c,))
            p = {k: rng.normal(0, 0.5, (c, c)) for k in ("wq_c", "wk_c", "wv_c", "wo_c", "wq_i", "wk_i", "wv_i", "wo_i")}
            pt = {k: Tensor(v) for k, v in p.items()}
            xt = Tensor(x[None])
            wp = fwa.partition_windows(xt, window)
            bundle = fwa.cws(wp, pt, n_w - 1)
            got_iwa = fwa.iwa(wp, pt, heads).data[0]
            got_cwa = fwa.cwa(wp, bundle, pt, heads).data[0]
            worst_iwa = max(worst_iwa, np.abs(got_iwa - dense_iwa(x, p, window, heads)).max())
            worst_cwa = max(worst_cwa, np.abs(got_cwa - dense_cwa_all(x, p, window, heads)).max())
            out, _ = fwa.fwa_forward(xt, pt, window, n_w - 1, heads)
            worst_sum = max(worst_sum, np.abs(out.data[0] - got_iwa - got_cwa).max())
            worst_rows = max(worst_rows, np.abs(bundle.patch_corr.data.sum(-1) - 1).max())
            worst_sig = max(worst_sig, abs(fwa.patch_significance(bundle).data.sum() - n_w * m))
        for seed in range(instances):
            rng = np.random.default_rng([seed, 11])
            n = int(rng.integers(2, 10))
            k = int(rng.integers(0, n))
            if seed % 4 == 0:
                scores = np.full((n, n), rng.uniform())
            else:
                scores = rng.integers(0, 4, size=(n, n)).astype(float) / 4
            if not np.array_equal(fwa.topk_route(scores, k), exhaustive_route(scores, k)):
                route_ok = False
    result.cases += [
        CaseResult("attention", "iwa_dense_oracle", worst_iwa < 1e-10, f"max abs diff {worst_iwa:.2e}"),
        CaseResult("attention", "cwa_dense_oracle", worst_cwa < 1e-10, f"max abs diff {worst_cwa:.2e}"),
        CaseResult("attention", "fwa_is_iwa_plus_cwa", worst_sum < 1e-12, f"max abs diff {worst_sum:.2e}"),
        CaseResult("attention", "patch_corr_rows_sum_to_one", worst_rows < 1e-6, f"max dev {worst_rows:.2e}"),
        CaseResult("attention", "significance_total", worst_sig < 1e-8, f"max dev {worst_sig:.2e}"),
        CaseResult("attention", "routing_exhaustive_sort", route_ok, f"{instances} instances"),
    ]
    result.seconds = time.perf_counter() - start
    return result


# -- metric and loss units -----------------------------------------------------------

def _close(a, b, tol=1e-9) -> bool:
    return abs(float(a) - float(b)) <= tol


def metrics_suite() -> SuiteResult:
    start = time.perf_counter()
    gt = np.array([0.2, 0.9, 0.4, 0.7, 0.1])
    fix = np.array([[0, 1], [1, 0]])
    ind = np.zeros((3, 3))
    ind[0, 1] = ind[1, 0] = 1.0
    unit_cases = {
        "plcc_loss_identity": lambda: _close(plcc_loss(gt, gt).item(), 0.0),
        "plcc_loss_affine": lambda: _close(plcc_loss(3.0 * gt + 2.0, gt).item(), 0.0),
        "plcc_loss_reversed": lambda: _close(plcc_loss(-gt, gt).item(), 1.0),
        "rank_loss_coordered": lambda: _close(rank_loss(gt * 2.0, gt).item(), 0.0),
        "rank_loss_single_violation": lambda: _close(rank_loss(np.array([0.0, 1.0]), np.array([2.0, 1.0])).item(), 1.0),
        "srcc_monotone": lambda: _close(srcc(gt, np.exp(gt)), 1.0),
        "srcc_reversed": lambda: _close(srcc(gt, -gt), -1.0),
        "srcc_rank_difference": lambda: _close(srcc([1, 2, 3, 4], [1, 3, 2, 4]), 1 - 6 * 2 / (4 * 15)),
        "plcc_linear": lambda: _close(plcc(gt, 2 * gt - 1), 1.0),
        "kl_self": lambda: _close(kl_div(ind + 0.1, ind + 0.1), 0.0),
        "kl_two_cell": lambda: _close(kl_div([0.75, 0.25], [0.5, 0.5]), 0.75 * np.log(1.5) + 0.25 * np.log(0.5), 1e-6),
        "sauc_separated": lambda: _close(sauc(ind * 5 + 1, fix, np.array([[2, 2], [0, 0]])), 1.0),
        "auc_all_ties": lambda: _close(auc(np.ones(3), np.ones(4)), 0.5),
        "nss_indicator": lambda: _close(nss(ind, fix), np.sqrt((9 - 2) / 2)),
        "fixation_constant_map": lambda: len(fixation_points(np.ones((2, 3)))) == 6,
    }
    result = SuiteResult("metrics")
    for name, fn in unit_cases.items():
        try:
            ok = bool(fn())
            detail = ""
        except Exception as exc:  # a raising unit counts as a failure, not a crash
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        result.cases.append(CaseResult("metrics", name, ok, detail))
    result.seconds = time.perf_counter() - start
    return result


def run_all(seeds: Sequence[int] = range(100)) -> List[SuiteResult]:
    return [gradient_suite(seeds), attention_suite(), metrics_suite()]


def format_results(results: Sequence[SuiteResult]) -> List[str]:
    lines = []
    for suite in results:
        n_ok = len(suite.cases) - len(suite.failed)
        lines.append(f"{suite.name}: {n_ok}/{len(suite.cases)} passed in {suite.seconds:.1f}s")
        for case in suite.failed:
            lines.append(f"  FAIL {suite.name}/{case.name}: {case.detail}")
    return lines
