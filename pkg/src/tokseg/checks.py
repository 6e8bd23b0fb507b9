"""
Self-contained property suite behind the ``check`` command.

Every check returns a ``CheckResult`` with the measured quantity and the
tolerance it was held to, so a report shows how much margin each property has.
``corrupt_shuffle_table`` swaps two entries of the shuffle table to prove the
index checks can fail.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .head import (FeatureBundle, MlpSharing, PipelineMode, bce_loss, dice_loss, fuse,
                   predict_mask, text_ce_loss, total_loss)
from .layers import Mlp, concat_identity, copy_to_chunks
from .masks import MaskVariant, TokenLayout, build_attention_mask, reachability
from .model import ModelConfig, SegModel, make_batch
from .shuffle import (GridFeatures, ShuffleSpec, inverse_table, pixel_shuffle_compress,
                      pixel_unshuffle_expand, scanning_compress, self_replicate_compress,
                      shuffle_table, upsample_nearest)
from .vocab import encode


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{status}  {self.name:<34} measured={self.measured:.3e}  tol={self.tolerance:.1e}{extra}"


def _result(name: str, measured: float, tol: float, detail: str = "", strict: bool = False):
    ok = measured < tol if strict else measured <= tol
    return CheckResult(name, bool(ok), float(measured), float(tol), detail)


# ---------------------------------------------------------------------------
# shuffle

def _table(h, w, s, corrupt):
    t = shuffle_table(h, w, s)
    if corrupt:
        t = t.copy()
        t[0] = t[1]
    return t


def check_index_bijection(corrupt: bool = False) -> CheckResult:
    worst = 0
    for hw in (2, 4, 8):
        t = _table(hw, hw, 2, corrupt)
        n = hw * hw
        if np.unique(t).size != n:
            worst = max(worst, n - np.unique(t).size)
            continue
        inv = inverse_table(t)
        worst = max(worst, int(np.count_nonzero(t[inv] != np.arange(n))),
                    int(np.count_nonzero(inv[t] != np.arange(n))))
    return _result("shuffle index bijection", worst, 0, "coordinates mapped wrongly")


def identity_mlps(d0: int, s: int) -> tuple[Mlp, Mlp]:
    """Concat-identity compression and split-identity expansion MLPs."""
    a = s * s
    return Mlp.affine(concat_identity(d0, a)), Mlp.affine(concat_identity(a * d0, 1))


def check_roundtrip(corrupt: bool = False, seeds: int = 10) -> CheckResult:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        for hw in (2, 4, 8):
            d0 = 2
            spec = ShuffleSpec(2, d0, 4 * d0)
            comp, expand = identity_mlps(d0, 2)
            x = rng.normal(size=(hw * hw, d0))
            F = GridFeatures(hw, hw, Tensor(x))
            t = _table(hw, hw, 2, corrupt)
            y = pixel_shuffle_compress(F, spec, comp, table=t)
            back = pixel_unshuffle_expand(y, spec, expand, table=t)
            worst = max(worst, float(np.abs(back.data.data - x).max()))
    return _result("shuffle roundtrip exact", worst, 0.0, "max abs deviation")


def check_constant_equivalence() -> CheckResult:
    rng = np.random.default_rng(3)
    spec = ShuffleSpec(2, 3, 5)
    mlp = Mlp(12, 5, rng)
    F = GridFeatures(4, 4, Tensor(np.tile(rng.normal(size=3), (16, 1))))
    a = upsample_nearest(pixel_shuffle_compress(F, spec, mlp), 2).data.data
    b = self_replicate_compress(F, spec, mlp).data.data
    return _result("constant-input replication", float(np.abs(a - b).max()), 0.0)


def check_scanning_corners() -> CheckResult:
    rng = np.random.default_rng(4)
    spec = ShuffleSpec(2, 3, 5)
    mlp = Mlp(12, 5, rng)
    F = GridFeatures(4, 4, Tensor(rng.normal(size=(16, 3))))
    scan = scanning_compress(F, spec, mlp).data.data.reshape(4, 4, 5)[::2, ::2].reshape(4, 5)
    shuf = pixel_shuffle_compress(F, spec, mlp).data.data
    return _result("scanning corners equal shuffle", float(np.abs(scan - shuf).max()), 0.0)


# ---------------------------------------------------------------------------
# gradients

def _primitive_cases(rng) -> list[tuple[str, Callable, list[Tensor]]]:
    def r(*shape):
        return Tensor(rng.normal(size=shape))

    def pos(*shape):
        return Tensor(rng.uniform(0.5, 2.0, size=shape))

    w = rng.normal(size=(3, 4))
    mask = rng.random((2, 3, 5)) < 0.7
    mask[..., 0] = True
    idx = rng.integers(0, 6, size=(2, 3))
    perm = rng.permutation(4)
    w_att = Tensor(rng.normal(size=(2, 3, 5)))
    w_cat = Tensor(rng.normal(size=(3, 7)))
    return [
        ("matmul", lambda a, b: ag.sum_axis(ag.mul(ag.matmul(a, b), Tensor(np.ones((2, 3, 4))))),
         [r(2, 3, 5), r(2, 5, 4)]),
        ("add", lambda a, b: ag.sum_axis(ag.mul(ag.add(a, b), Tensor(w))), [r(3, 4), r(3, 4)]),
        ("sub", lambda a, b: ag.sum_axis(ag.mul(ag.sub(a, b), Tensor(w))), [r(3, 4), r(3, 4)]),
        ("mul", lambda a, b: ag.sum_axis(ag.mul(a, b)), [r(3, 4), r(3, 4)]),
        ("div", lambda a, b: ag.sum_axis(ag.div(a, b)), [r(3, 4), pos(3, 4)]),
        ("scale", lambda a: ag.sum_axis(ag.mul(ag.scale(a, -1.7), Tensor(w))), [r(3, 4)]),
        ("add_bias", lambda a, b: ag.sum_axis(ag.mul(ag.add_bias(a, b), Tensor(w))), [r(3, 4), r(4)]),
        ("reshape", lambda a: ag.sum_axis(ag.mul(ag.reshape(a, (3, 4)), Tensor(w))), [r(2, 6)]),
        ("permute", lambda a: ag.sum_axis(ag.mul(ag.permute(a, (1, 0)), Tensor(w))), [r(4, 3)]),
        ("gather", lambda a: ag.sum_axis(ag.mul(ag.gather(a, perm, axis=1), Tensor(w))), [r(3, 4)]),
        ("softmax_lastdim", lambda a: ag.sum_axis(ag.mul(ag.softmax_lastdim(a, mask), w_att)),
         [r(2, 3, 5)]),
        ("log_softmax_lastdim", lambda a: ag.sum_axis(ag.mul(ag.log_softmax_lastdim(a), Tensor(w))),
         [r(3, 4)]),
        ("layernorm", lambda a, g, b: ag.sum_axis(ag.mul(ag.layernorm(a, g, b), Tensor(w))),
         [r(3, 4), r(4), r(4)]),
        ("gelu", lambda a: ag.sum_axis(ag.mul(ag.gelu(a), Tensor(w))), [r(3, 4)]),
        ("sigmoid", lambda a: ag.sum_axis(ag.mul(ag.sigmoid(a), Tensor(w))), [r(3, 4)]),
        ("softplus", lambda a: ag.sum_axis(ag.mul(ag.softplus(a), Tensor(w))), [r(3, 4)]),
        ("mean_axis", lambda a: ag.sum_axis(ag.mul(ag.mean_axis(a, 0), Tensor(w[0]))), [r(5, 4)]),
        ("sum_axis", lambda a: ag.sum_axis(ag.mul(ag.sum_axis(a, -1), Tensor(w[:, 0]))), [r(3, 4)]),
        ("embedding_lookup", lambda t: ag.sum_axis(ag.mul(ag.embedding_lookup(t, idx),
                                                          Tensor(np.ones((2, 3, 4))))),
         [r(6, 4)]),
        ("concat_lastdim", lambda a, b: ag.sum_axis(ag.mul(ag.concat_lastdim([a, b]), w_cat)),
         [r(3, 4), r(3, 3)]),
        ("split_lastdim", lambda a: ag.sum_axis(ag.mul(ag.split_lastdim(a, 2)[1], Tensor(w))),
         [r(3, 8)]),
    ]


PRIMITIVE_NAMES = tuple(name for name, _, _ in _primitive_cases(np.random.default_rng(0)))


def primitive_grad_errors(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    return {name: ag.grad_check(fn, inputs) for name, fn, inputs in _primitive_cases(rng)}


def tiny_config() -> ModelConfig:
    """4x4 patch grid, 2x2 compressed grid; sequences stay under 24 tokens."""
    return ModelConfig(image_size=16, patch=4, d0=8, d=8, enc_depth=1, enc_heads=2,
                       llm_depth=1, llm_heads=2, max_len=24)


def tiny_inputs(cfg: ModelConfig, seed: int = 0):
    rng = np.random.default_rng(seed)
    n_img = (cfg.grid // cfg.s) ** 2
    images = rng.random((2, cfg.image_size, cfg.image_size, 3))
    batch = make_batch(encode(["[BOS]", "<image>", ":"]),
                       [encode(["please", "segment", "the", "red", "circle"]),
                        encode(["how", "many", "objects", "are", "there", "?"])],
                       [True, False], [encode(["it", "is", "."]), encode(["two", "."])], n_img)
    return images, batch, rng


def pipeline_loss_fn(model: SegModel, mode, variant=MaskVariant.ImgBidirSeg, seed: int = 0):
    images, batch, rng = tiny_inputs(model.cfg, seed)
    side = {PipelineMode.CompressedBaseline: model.cfg.grid // model.cfg.s,
            PipelineMode.Full_RFA: model.cfg.grid * model.cfg.s}.get(PipelineMode(mode), model.cfg.grid)
    gt = (rng.random((1, side * side)) < 0.4).astype(np.float64)

    def fn(*_):
        out = model.forward(images, batch, mode, variant)
        text = text_ce_loss(out["text_logits"], batch.answers, batch.layouts)
        return total_loss(text, bce_loss(out["mask_logits"], gt), dice_loss(out["mask_logits"], gt))

    return fn


def pipeline_grad_error(mode, seed: int = 0, max_coords: int | None = 6) -> float:
    """Max relative FD error over (a random subset of) every parameter tensor."""
    model = SegModel(tiny_config(), seed=seed)
    fn = pipeline_loss_fn(model, mode, seed=seed)
    params = [p for p in model.parameters()]
    # only parameters that reach the loss in this mode
    probe = fn()
    used = ag.backward(probe)
    params = [p for p in params if p in used]
    return ag.grad_check(fn, params, eps=1e-5, max_coords=max_coords,
                         rng=np.random.default_rng(seed))


def check_primitive_grads() -> CheckResult:
    errs = primitive_grad_errors()
    name, worst = max(errs.items(), key=lambda kv: kv[1])
    return _result("primitive grad checks", worst, 1e-5, f"{len(errs)} ops, worst {name}")


def check_pipeline_grads() -> list[CheckResult]:
    out = []
    for mode in (PipelineMode.CompressedBaseline, PipelineMode.HR_RFR, PipelineMode.Full_RFA):
        out.append(_result(f"grad check {mode.value}", pipeline_grad_error(mode), 1e-5))
    return out


def check_softmax_rows() -> CheckResult:
    rng = np.random.default_rng(5)
    p = ag.softmax_lastdim(Tensor(rng.normal(size=(6, 9)) * 5)).data
    dev = float(np.abs(p.sum(axis=-1) - 1).max())
    return _result("softmax rows sum to one", dev if (p > 0).all() else math.inf, 1e-12)


# ---------------------------------------------------------------------------
# head

def naive_mask(F: np.ndarray, g: np.ndarray) -> np.ndarray:
    N, d = F.shape
    out = np.zeros(N)
    for i in range(N):
        acc = 0.0
        for j in range(d):
            acc += F[i, j] * g[j]
        out[i] = acc / math.sqrt(d)
    return out


def check_predict_mask(seeds: int = 5) -> CheckResult:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        F, g = rng.normal(size=(256, 64)), rng.normal(size=64)
        got = predict_mask(Tensor(F), Tensor(g)).data
        worst = max(worst, float(np.abs(got - naive_mask(F, g)).max()))
    return _result("mask head loop oracle", worst, 1e-12)


def check_loss_values() -> CheckResult:
    errs = [
        abs(bce_loss(Tensor(np.zeros(5)), np.array([1, 0, 1, 1, 0])).item() - math.log(2)),
        abs(dice_loss(Tensor(np.full(4, 60.0)), np.ones(4)).item() - 0.0),
        abs(dice_loss(Tensor(np.full(4, 60.0)), np.zeros(4)).item() - 0.8),
    ]
    lay = TokenLayout.from_string("TTAA")
    errs.append(abs(text_ce_loss(Tensor(np.zeros((4, 64))), [5, 6], lay).item() - math.log(64)))
    return _result("loss hand values", max(errs), 1e-12)


def collapse_bundle(seed: int = 0, d: int = 6, g1: int = 2):
    rng = np.random.default_rng(seed)
    spec = ShuffleSpec(2, d, d)
    g0 = g1 * 2
    F_V1 = Tensor(rng.normal(size=(g1 * g1, d)))
    b = FeatureBundle(F_V0=GridFeatures(g0, g0, Tensor(rng.normal(size=(g0 * g0, d)))),
                      F_V1=GridFeatures(g1, g1, F_V1),
                      F_V1HQ=GridFeatures(g0, g0, Tensor(rng.normal(size=(g0 * g0, d)))),
                      F_IMG=GridFeatures(g1, g1, Tensor(F_V1.data.copy())),
                      F_SEG=Tensor(rng.normal(size=d)))
    return b, spec, rng


def check_zero_residual() -> CheckResult:
    b, spec, rng = collapse_bundle()
    f = Mlp(spec.d, spec.alpha * spec.d, rng)
    full, _ = fuse(b, PipelineMode.Full_RFA, spec, MlpSharing.Shared2, f, f)
    ref = pixel_unshuffle_expand(b.F_V1HQ, spec, f).data.data
    rfr, _ = fuse(b, PipelineMode.HR_RFR, spec, MlpSharing.Shared2, f, f)
    dev = max(float(np.abs(full.data.data - ref).max()),
              float(np.abs(rfr.data.data - b.F_V1HQ.data.data).max()))
    return _result("zero-residual collapse", dev, 0.0)


def check_copy_chunks_upsample() -> CheckResult:
    rng = np.random.default_rng(6)
    spec = ShuffleSpec(2, 3, 3)
    F = GridFeatures(2, 3, Tensor(rng.normal(size=(6, 3))))
    a = pixel_unshuffle_expand(F, spec, Mlp.affine(copy_to_chunks(3, 4))).data.data
    b = upsample_nearest(F, 2).data.data
    return _result("copy-chunk expansion = upsample", float(np.abs(a - b).max()), 0.0)


# ---------------------------------------------------------------------------
# masks and information flow

# hand-enumerated visibility for the layout T T I I I S
HAND_TABLES = {
    MaskVariant.Causal: ["100000", "110000", "111000", "111100", "111110", "111111"],
    MaskVariant.ImgBidir: ["100000", "110000", "111110", "111110", "111110", "111111"],
    MaskVariant.ImgBidirSeg: ["100000", "110000", "111111", "111111", "111111", "111111"],
    MaskVariant.ImgBidirSegText: ["100000", "110000", "111111", "111111", "111111", "111111"],
    MaskVariant.FullBidir: ["111111"] * 6,
}


def hand_table(variant: MaskVariant) -> np.ndarray:
    return np.array([[c == "1" for c in row] for row in HAND_TABLES[variant]])


def random_layout(rng: np.random.Generator, max_len: int = 16) -> TokenLayout:
    L = int(rng.integers(3, max_len + 1))
    n_img = int(rng.integers(1, L - 1))
    start = int(rng.integers(0, L - n_img))
    roles = ["T"] * L
    for i in range(start, start + n_img):
        roles[i] = "I"
    # start + n_img <= L - 1, so at least one slot follows the image span
    roles[int(rng.integers(start + n_img, L))] = "S"
    return TokenLayout.from_string("".join(roles))


def check_mask_tables() -> CheckResult:
    lay = TokenLayout.from_string("TTIIIS")
    wrong = sum(int(np.count_nonzero(build_attention_mask(lay, v) != hand_table(v)))
                for v in MaskVariant)
    rng = np.random.default_rng(7)
    for _ in range(20):
        lay = random_layout(rng)
        masks = [build_attention_mask(lay, v, allow_missing_seg=True) for v in MaskVariant]
        for lo, hi in zip(masks, masks[1:]):
            wrong += int(np.count_nonzero(lo & ~hi))
        causal = np.tril(np.ones((len(lay), len(lay)), dtype=bool))
        wrong += sum(int(np.count_nonzero(causal & ~m)) for m in masks)
    return _result("mask truth tables and chain", wrong, 0, "mismatched entries")


def information_flow_deviation(variant: MaskVariant, pairs: int = 5, seed: int = 0,
                               depth: int = 2) -> float:
    """Largest change in q's hidden state when a key unreachable from q is perturbed."""
    cfg = ModelConfig(image_size=16, patch=4, d0=8, d=8, enc_depth=1, enc_heads=2,
                      llm_depth=depth, llm_heads=2, max_len=24)
    model = SegModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    lay = TokenLayout.from_string("TTTIIIITTTSAA")
    L = len(lay)
    mask = build_attention_mask(lay, variant)
    reach = reachability(mask, depth)
    hidden_pairs = np.argwhere(~reach)
    if hidden_pairs.size == 0:
        return 0.0
    x = rng.normal(size=(1, L, cfg.d))
    base, _ = model.llm(Tensor(x), mask[None])
    worst = 0.0
    for q, k in hidden_pairs[rng.choice(len(hidden_pairs), size=min(pairs, len(hidden_pairs)),
                                        replace=False)]:
        y = x.copy()
        y[0, k] = rng.normal(size=cfg.d) * 10
        out, _ = model.llm(Tensor(y), mask[None])
        worst = max(worst, float(np.abs(out.data[0, q] - base.data[0, q]).max()))
    return worst


def check_information_flow() -> CheckResult:
    worst = max(information_flow_deviation(v) for v in MaskVariant)
    return _result("information flow (unreachable keys)", worst, 0.0)


# ---------------------------------------------------------------------------

def all_checks(corrupt_shuffle_table: bool = False) -> list[Callable[[], CheckResult | list]]:
    return [
        lambda: check_index_bijection(corrupt_shuffle_table),
        lambda: check_roundtrip(corrupt_shuffle_table),
        check_constant_equivalence,
        check_scanning_corners,
        check_copy_chunks_upsample,
        check_softmax_rows,
        check_primitive_grads,
        check_pipeline_grads,
        check_predict_mask,
        check_loss_values,
        check_zero_residual,
        check_mask_tables,
        check_information_flow,
    ]


def run_checks(corrupt_shuffle_table: bool = False) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    results: list[CheckResult] = []
    for check in all_checks(corrupt_shuffle_table):
        r = check()
        results.extend(r if isinstance(r, list) else [r])
    return results, time.perf_counter() - t0


def report(results: list[CheckResult], elapsed: float) -> str:
    lines = [r.line() for r in results]
    n_ok = sum(r.passed for r in results)
    lines.append(f"{n_ok}/{len(results)} properties passed in {elapsed:.1f}s")
    return "\n".join(lines)
