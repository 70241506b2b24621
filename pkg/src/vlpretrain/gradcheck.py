"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .autograd import Tensor

# gradients whose norm falls below this are compared in absolute terms
ABS_FLOOR = 1e-7
# ...and so are tensors whose gradient is tiny next to the largest one in the same check,
# such as biases that a softmax makes structurally gradient-free
CASE_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> float:
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def numerical_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5,
                   coords: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x`` (perturbed in place).

    With ``coords`` only those entries are probed and a flat vector is returned.
    """
    if coords is None:
        coords = list(np.ndindex(x.shape))
        out_shape = x.shape
    else:
        out_shape = (len(coords),)
    g = np.zeros(len(coords))
    for i, c in enumerate(coords):
        orig = x[c]
        x[c] = orig + eps
        fp = f()
        x[c] = orig - eps
        fm = f()
        x[c] = orig
        g[i] = (fp - fm) / (2.0 * eps)
    return g.reshape(out_shape)


@dataclass
class CheckResult:
    name: str
    rel_error: float
    n_coords: int


def check_params(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5,
                 max_coords: int | None = None, rng: np.random.Generator | None = None) -> list[CheckResult]:
    """Compare backprop with finite differences for every tensor in ``params``.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call.  ``max_coords`` bounds the probed entries per tensor (sampled
    with ``rng``); ``None`` probes all of them.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    floor = max(ABS_FLOOR, CASE_FLOOR * max(np.linalg.norm(g) for g in analytic.values()))

    def f():
        return float(loss_fn().data)

    results = []
    for name, p in params.items():
        all_coords = list(np.ndindex(p.shape))
        if max_coords is not None and len(all_coords) > max_coords:
            pick = rng.choice(len(all_coords), size=max_coords, replace=False)
            coords = [all_coords[i] for i in sorted(pick)]
        else:
            coords = all_coords
        num = numerical_grad(f, p.data, eps, coords)
        ana = np.array([analytic[name][c] for c in coords])
        results.append(CheckResult(name, relative_error(ana, num, floor), len(coords)))
    for p in params.values():
        p.grad = None
    return results


# -- suite ------------------------------------------------------------------------------

def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    from . import autograd as ag

    return ag.tsum(ag.mul(out, Tensor(w)))


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, dict[str, Tensor]]]:
    """One small case per differentiable op: name -> (loss builder, inputs)."""
    from . import autograd as ag

    def t(*shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)

    def away_from_zero(*shape):
        x = rng.uniform(0.2, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
        return Tensor(x, requires_grad=True)

    W = {k: rng.standard_normal(s) for k, s in {"34": (3, 4), "234": (2, 3, 4), "3": (3,), "43": (4, 3),
                                                 "235": (2, 3, 5), "64": (6, 4), "54": (5, 4)}.items()}
    cases: dict[str, tuple[Callable, dict[str, Tensor]]] = {}

    a, b = t(3, 4), t(4)
    cases["add"] = (lambda a=a, b=b: _weighted(ag.add(a, b), W["34"]), {"a": a, "b": b})
    a, b = t(3, 4), t(3, 1)
    cases["sub"] = (lambda a=a, b=b: _weighted(ag.sub(a, b), W["34"]), {"a": a, "b": b})
    a, b = t(3, 4), t(1, 4)
    cases["mul"] = (lambda a=a, b=b: _weighted(ag.mul(a, b), W["34"]), {"a": a, "b": b})
    a = t(3, 4)
    cases["scale"] = (lambda a=a: _weighted(ag.scale(a, -1.7), W["34"]), {"a": a})
    a = t(3, 4, lo=-4, hi=4)
    cases["sigmoid"] = (lambda a=a: _weighted(ag.sigmoid(a), W["34"]), {"a": a})
    a = t(3, 4, lo=-3, hi=3)
    cases["gelu"] = (lambda a=a: _weighted(ag.gelu(a), W["34"]), {"a": a})
    a = away_from_zero(3, 4)
    cases["relu"] = (lambda a=a: _weighted(ag.relu(a), W["34"]), {"a": a})
    a = t(3, 4)
    drop_seed = int(rng.integers(2**31))
    cases["dropout"] = (lambda a=a: _weighted(ag.dropout(a, 0.3, "train", np.random.default_rng(drop_seed)),
                                              W["34"]), {"a": a})
    a = t(2, 6)
    cases["reshape"] = (lambda a=a: _weighted(ag.reshape(a, (3, 4)), W["34"]), {"a": a})
    a = t(3, 2, 4)
    cases["transpose"] = (lambda a=a: _weighted(ag.transpose(a, (1, 0, 2)), W["234"]), {"a": a})
    a, b = t(2, 4), t(1, 4)
    cases["concat"] = (lambda a=a, b=b: _weighted(ag.concat([a, b], 0), W["34"]), {"a": a, "b": b})
    a = t(4, 5)
    rows = np.array([0, 2, 2])
    cases["index"] = (lambda a=a: _weighted(ag.index(a, (rows, slice(1, 5))), W["34"]), {"a": a})
    a = t(5, 4)
    cases["take_rows"] = (lambda a=a: _weighted(ag.take_rows(a, np.array([4, 0, 4])), W["34"]), {"a": a})
    a = t(6, 4)
    ids = np.array([[1, 5, 1], [0, 2, 5]])
    cases["embedding_lookup"] = (lambda a=a: _weighted(ag.embedding_lookup(a, ids), W["234"]), {"a": a})
    a = t(3, 4)
    cases["tsum"] = (lambda a=a: _weighted(ag.tsum(a, axis=1), W["3"]), {"a": a})
    a = t(3, 4)
    cases["mean"] = (lambda a=a: ag.scale(ag.mean(ag.mul(a, a)), 3.0), {"a": a})
    a, b, c = t(3, 4), t(3, 4), t(3, 4)
    cases["add_n"] = (lambda a=a, b=b, c=c: _weighted(ag.add_n([a, b, c]), W["34"]), {"a": a, "b": b, "c": c})
    a, b = t(2, 3, 4), t(2, 4, 5)
    cases["matmul"] = (lambda a=a, b=b: _weighted(ag.matmul(a, b), W["235"]), {"a": a, "b": b})
    x, w, bb = t(2, 3, 4), t(4, 3), t(3)
    cases["linear"] = (lambda x=x, w=w, bb=bb: _weighted(ag.linear(x, w, bb), W["234"][:, :, :3]),
                       {"x": x, "w": w, "b": bb})
    x, g, bb = t(3, 4), t(4, lo=0.5, hi=1.5), t(4)
    cases["layer_norm"] = (lambda x=x, g=g, bb=bb: _weighted(ag.layer_norm(x, g, bb, 1e-12), W["34"]),
                           {"x": x, "gain": g, "bias": bb})
    a = t(3, 4, lo=-2, hi=2)
    smask = np.array([[True, True, False, True]] * 3)
    cases["softmax"] = (lambda a=a: _weighted(ag.softmax(a, -1, smask), W["34"]), {"a": a})
    a = t(3, 4, lo=-2, hi=2)
    labels = np.array([1, 0, 3])
    cases["softmax_ce"] = (lambda a=a: ag.softmax_ce(a, labels), {"logits": a})
    p = t(3, 4, lo=0.1, hi=0.9)
    y = (rng.random((3, 4)) < 0.5).astype(float)
    cases["binary_ce"] = (lambda p=p: ag.binary_ce(p, y), {"p": p})
    a, b = t(3, 4), t(3, 4)
    cases["l2_loss"] = (lambda a=a, b=b: ag.l2_loss(a, b), {"a": a, "b": b})
    return cases


def synthetic_pretrain_batch(cfg, rng: np.random.Generator, n_pairs: int = 4):
    """Random inputs for ``cfg`` with masked rows on the positive pairs only."""
    from .pretrain import PretrainBatch

    T, o = cfg.max_text_len, cfg.num_visual_tokens
    L = T + cfg.n_visual
    ids = rng.integers(5, cfg.vocab_size, size=(n_pairs, T))
    lengths = rng.integers(3, T + 1, size=n_pairs)
    mask = np.arange(T)[None, :] < lengths[:, None]
    ids[~mask] = 0
    itm = np.array([1.0, 0.0] * (n_pairs // 2) + [1.0] * (n_pairs % 2))
    mlm_rows, moc_rows = [], []
    for b in np.flatnonzero(itm == 1):
        mlm_rows += [b * L + p for p in rng.choice(np.arange(1, lengths[b]), size=2, replace=False)]
        moc_rows += [b * L + T + p for p in rng.choice(o, size=2, replace=False)]
    mlm_rows, moc_rows = np.array(mlm_rows), np.array(moc_rows)
    return PretrainBatch(
        text_ids=ids, text_mask=mask,
        features=rng.standard_normal((n_pairs, cfg.n_visual, cfg.visual_dim)),
        geometry=rng.uniform(0, 1, (n_pairs, cfg.n_visual, 5)),
        itm_labels=itm,
        mlm_rows=mlm_rows, mlm_targets=rng.integers(5, cfg.vocab_size, size=len(mlm_rows)),
        moc_rows=moc_rows, moc_targets=rng.integers(0, cfg.num_classes, size=len(moc_rows)),
        mrfr_rows=moc_rows, mrfr_targets=rng.standard_normal((len(moc_rows), cfg.visual_dim)),
        n_positive=int(np.sum(itm == 1)),
    )


def synthetic_group_logits(model, batch, G: int, P: int):
    """Fine-tuning logits [G, P] from the first ``G * P`` sequences of ``batch`` (no masking)."""
    from . import autograd as ag

    n = G * P
    hidden = model.forward(batch.text_ids[:n], batch.text_mask[:n], batch.features[:n], batch.geometry[:n], "eval")
    return ag.reshape(model.itm_logit(hidden), (G, P))


def model_cases(cfg, rng: np.random.Generator) -> dict[str, tuple[Callable, dict[str, Tensor]]]:
    """Every pre-training and fine-tuning loss of a model built from ``cfg``."""
    from .finetune import bce_finetune_loss, ce_finetune_loss, triplet_finetune_loss
    from .model import Model
    from .pretrain import TASKS, pretrain_losses

    model = Model.create(cfg, int(rng.integers(2**31)))
    # larger-than-default init so every path carries a gradient well above the comparison floor
    for p in model.params.values():
        p.data = p.data * 10.0 if p.data.ndim > 1 else p.data + rng.uniform(-0.1, 0.1, p.shape)
    batch = synthetic_pretrain_batch(cfg, rng, n_pairs=6)
    cases = {}
    for task in TASKS:
        cases[f"model/{task}"] = (lambda task=task: pretrain_losses(model, batch, (task,))[task], model.params)
    ft = {"binary": bce_finetune_loss, "ce": ce_finetune_loss, "triplet": triplet_finetune_loss}
    for name, fn in ft.items():
        cases[f"model/finetune_{name}"] = (lambda fn=fn: fn(synthetic_group_logits(model, batch, 2, 3)),
                                           model.params)
    return cases


def run_suite(cfg=None, seed: int = 0, eps: float = 1e-5, max_coords: int | None = 8,
              include_model: bool = True) -> list[CheckResult]:
    """Finite-difference check of every op and, optionally, every model loss.

    Op inputs are probed exhaustively; model parameters are probed at up to
    ``max_coords`` sampled entries per tensor.  Returns one result per
    (case, input) with ``name = "case:input"``.
    """
    from .model import ModelConfig
    from .rng import stream

    rng = stream(seed, "gradcheck")
    results = []
    for name, (fn, inputs) in op_cases(rng).items():
        for r in check_params(fn, inputs, eps):
            results.append(CheckResult(f"{name}:{r.name}", r.rel_error, r.n_coords))
    if include_model:
        cfg = cfg or ModelConfig.tiny()
        for name, (fn, params) in model_cases(cfg, rng).items():
            for r in check_params(fn, params, eps, max_coords, rng):
                results.append(CheckResult(f"{name}:{r.name}", r.rel_error, r.n_coords))
    return results
