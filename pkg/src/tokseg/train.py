"""
Run configuration, the training loop, evaluation and ablation grids.

A ``RunConfig`` serializes to flat ``section.key=value`` lines so that
ablation cells differ by a line or two and logs can embed the whole config.
"""

from __future__ import annotations

import dataclasses
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import checkpoint
from .data import Sample, generate_dataset, prompt_prefix_ids, read_dataset, write_pgm
from .errors import ConfigParse, DatasetMissing, NonFinite, ShapeMismatch
from .head import MlpSharing, PipelineMode, bce_loss, dice_loss, mask_side, text_ce_loss, total_loss
from .masks import MaskVariant
from .metrics import aggregate, binarize, downsample_mask, format_metrics_row, iou, upsample_mask
from .model import Batch, ModelConfig, SegModel, make_batch
from .vocab import SEG_ID

log = logging.getLogger(__name__)

RETENTIONS = ("self_replicate", "scanning")
UPSAMPLINGS = ("nearest", "bilinear")
OPTIMIZERS = ("adamw", "sgd")
SCHEDULES = ("cosine", "constant")
LOG_HEADER = "step,L_text,L_BCE,L_DICE,L_total"


@dataclass(frozen=True)
class PipelineConfig:
    mode: PipelineMode = PipelineMode.Full_RFA
    mask_variant: MaskVariant = MaskVariant.ImgBidirSeg
    sharing: MlpSharing = MlpSharing.Shared2
    retention: str = "self_replicate"
    upsampling: str = "nearest"


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adamw"
    lr: float = 2e-3
    steps: int = 2000
    batch_size: int = 8
    schedule: str = "cosine"
    warmup: int = 50
    weight_decay: float = 0.01
    seed: int = 0


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    test_seed: int = 1
    n_train: int = 2000
    n_test: int = 200
    max_objects: int = 4
    train_path: str = ""
    test_path: str = ""


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.0


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs/default"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        p, t = self.pipeline, self.train
        if p.retention not in RETENTIONS:
            raise ConfigParse(f"pipeline.retention must be one of {RETENTIONS}")
        if p.upsampling not in UPSAMPLINGS:
            raise ConfigParse(f"pipeline.upsampling must be one of {UPSAMPLINGS}")
        if t.optimizer not in OPTIMIZERS:
            raise ConfigParse(f"train.optimizer must be one of {OPTIMIZERS}")
        if t.schedule not in SCHEDULES:
            raise ConfigParse(f"train.schedule must be one of {SCHEDULES}")
        if t.lr < 0 or t.steps < 0 or t.batch_size < 1:
            raise ConfigParse("train.lr and train.steps must be >= 0, train.batch_size >= 1")

    def replace(self, **overrides) -> "RunConfig":
        """Copy with dotted overrides, e.g. ``replace(**{"train.seed": 2})``."""
        return parse_config(serialize_config(self), overrides)

    def to_text(self) -> str:
        return serialize_config(self)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return parse_config(text)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if hasattr(v, "value"):
        return str(v.value)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, typ, key: str):
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        return typ(raw)
    except ValueError as exc:
        raise ConfigParse(f"{key}: cannot read {raw!r} ({exc})") from None


def _field_types(cls) -> dict[str, type]:
    hints = {}
    defaults = cls()
    for f in dataclasses.fields(cls):
        hints[f.name] = type(getattr(defaults, f.name))
    return hints


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for section in dataclasses.fields(cfg):
        sub = getattr(cfg, section.name)
        for f in dataclasses.fields(sub):
            lines.append(f"{section.name}.{f.name}={_format_value(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Read ``section.key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    sections = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}
    values: dict[str, dict[str, str]] = {name: {} for name in sections}
    items = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParse(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        items.append((key.strip(), raw.strip(), f"line {lineno}"))
    for key, raw in (overrides or {}).items():
        items.append((key, _format_value(raw), "override"))
    for key, raw, where in items:
        section, dot, name = key.partition(".")
        if not dot or section not in sections:
            raise ConfigParse(f"{where}: unknown section in {key!r}")
        types = _field_types(sections[section])
        if name not in types:
            raise ConfigParse(f"{where}: unknown key {key!r}")
        values[section][name] = (raw, types[name], key)
    built = {}
    for section, factory in sections.items():
        kwargs = {n: _coerce(raw, typ, key) for n, (raw, typ, key) in values[section].items()}
        try:
            built[section] = dataclasses.replace(factory(), **kwargs)
        except (TypeError, ValueError, ShapeMismatch) as exc:
            raise ConfigParse(f"section {section}: {exc}") from None
    try:
        return RunConfig(**built)
    except ValueError as exc:
        raise ConfigParse(str(exc)) from None


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigParse(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


# ---------------------------------------------------------------------------
# data

def load_splits(cfg: RunConfig) -> tuple[list[Sample], list[Sample]]:
    d = cfg.data
    size = cfg.model.image_size

    def split(path: str, seed: int, n: int) -> list[Sample]:
        if path:
            if not Path(path, "index.tsv").exists():
                raise DatasetMissing(f"no dataset at {path}")
            return read_dataset(path)
        return generate_dataset(seed, n, size=size, max_objects=d.max_objects)

    return split(d.train_path, d.seed, d.n_train), split(d.test_path, d.test_seed, d.n_test)


def build_batch(samples: Sequence[Sample], cfg: ModelConfig) -> tuple[np.ndarray, Batch]:
    """Images scaled to [0, 1] and the token batch.

    Segmentation rows read ``[prefix][IMG][expression][SEG][it is .]``; the
    answer template's own [SEG] is the SEG position, so it is not repeated.
    """
    n_img = (cfg.grid // cfg.s) ** 2
    images = np.stack([s.image for s in samples]).astype(np.float64) / 255.0
    with_seg = [s.is_segmentation for s in samples]
    answers = [[t for t in s.answer_ids if t != SEG_ID] for s in samples]
    batch = make_batch(prompt_prefix_ids(), [s.expression_ids for s in samples], with_seg,
                       answers, n_img, cfg.vocab)
    return images, batch


def target_masks(samples: Sequence[Sample], rows: np.ndarray, side: int) -> np.ndarray:
    return np.stack([downsample_mask(samples[r].mask, side).reshape(-1) for r in rows]) \
        .astype(np.float64)


# ---------------------------------------------------------------------------
# training

@dataclass
class StepLosses:
    step: int
    text: float
    bce: float
    dice: float
    total: float

    def csv(self) -> str:
        return f"{self.step},{self.text:.10g},{self.bce:.10g},{self.dice:.10g},{self.total:.10g}"


def build_model(cfg: RunConfig) -> SegModel:
    p = cfg.pipeline
    return SegModel(cfg.model, seed=cfg.train.seed, sharing=p.sharing, retention=p.retention,
                    upsampling=p.upsampling)


def compute_losses(model: SegModel, samples: Sequence[Sample], cfg: RunConfig):
    """(total, text, bce, dice) tensors for one batch."""
    images, batch = build_batch(samples, cfg.model)
    out = model.forward(images, batch, cfg.pipeline.mode, cfg.pipeline.mask_variant)
    text = text_ce_loss(out["text_logits"], batch.answers, batch.layouts)
    if "mask_logits" in out:
        gt = target_masks(samples, out["seg_rows"], out["mask_side"])
        bce = bce_loss(out["mask_logits"], gt)
        dice = dice_loss(out["mask_logits"], gt)
    else:
        bce = dice = ag.Tensor(np.zeros(()))
    return total_loss(text, bce, dice), text, bce, dice


def _batch_order(n: int, steps: int, batch_size: int, seed: int) -> np.ndarray:
    """Epoch-wise shuffled sample indices, ``[steps, batch_size]``."""
    rng = np.random.default_rng([seed, 17])
    need = steps * batch_size
    chunks, have = [], 0
    while have < need:
        chunks.append(rng.permutation(n))
        have += n
    flat = np.concatenate(chunks)[:need] if chunks else np.zeros(0, dtype=np.intp)
    return flat.reshape(steps, batch_size)


def train(cfg: RunConfig, train_set: Sequence[Sample] | None = None,
          log_stream: io.TextIOBase | None = None) -> tuple[SegModel, list[StepLosses]]:
    """Optimize a fresh model. Parameters that a mode leaves unused get zero gradients."""
    if train_set is None:
        train_set, _ = load_splits(cfg)
    if not train_set:
        raise DatasetMissing("training set is empty")
    t = cfg.train
    model = build_model(cfg)
    params = model.parameters()
    no_decay = [p for name, p in model.named_parameters()
                if p.data.ndim < 2 or name.endswith((".pos", ".tok"))]
    opt = ag.AdamW(params, weight_decay=t.weight_decay, no_decay=no_decay) \
        if t.optimizer == "adamw" else None
    order = _batch_order(len(train_set), t.steps, t.batch_size, t.seed)
    history = []
    if log_stream is not None:
        log_stream.write("".join(f"# {line}\n" for line in serialize_config(cfg).splitlines()))
        log_stream.write(LOG_HEADER + "\n")
    for step in range(t.steps):
        batch = [train_set[i] for i in order[step]]
        try:
            loss, text, bce, dice = compute_losses(model, batch, cfg)
        except NonFinite as exc:
            raise NonFinite(f"step {step}: {exc}", step=step) from None
        grads = ag.backward(loss)
        for p in params:
            if p not in grads:
                grads[p] = np.zeros_like(p.data)
        if not all(np.isfinite(g).all() for g in grads.values()):
            raise NonFinite(f"step {step}: non-finite gradient", step=step)
        lr = ag.cosine_lr(t.lr, step, t.steps, t.warmup) if t.schedule == "cosine" else t.lr
        if opt is not None:
            opt.step(grads, lr)
        else:
            ag.sgd_step(params, grads, lr)
        rec = StepLosses(step, text.item(), bce.item(), dice.item(), loss.item())
        history.append(rec)
        if log_stream is not None:
            log_stream.write(rec.csv() + "\n")
        if step % 100 == 0:
            log.info("step %d loss %.4f", step, rec.total)
    return model, history


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalResult:
    ciou: float
    giou: float
    n_samples: int
    native: list[np.ndarray]  # per seg sample, binary mask at the mode's resolution
    full: list[np.ndarray]  # same, upsampled to image resolution


def predict_masks(model: SegModel, samples: Sequence[Sample], cfg: RunConfig,
                  batch_size: int = 32) -> list[np.ndarray]:
    """Mask logits ``[side, side]`` for every segmentation sample, in order."""
    seg = [s for s in samples if s.is_segmentation]
    out_maps = []
    with ag.no_grad():
        for i in range(0, len(seg), batch_size):
            chunk = seg[i:i + batch_size]
            images, batch = build_batch(chunk, cfg.model)
            out = model.forward(images, batch, cfg.pipeline.mode, cfg.pipeline.mask_variant)
            side = out["mask_side"]
            logits = out["mask_logits"].data.reshape(-1, side, side)
            out_maps.extend(logits)
    return out_maps


def evaluate(model: SegModel, samples: Sequence[Sample], cfg: RunConfig) -> EvalResult:
    seg = [s for s in samples if s.is_segmentation]
    maps = predict_masks(model, seg, cfg)
    size = cfg.model.image_size
    native, full, records = [], [], []
    for s, m in zip(seg, maps):
        b = binarize(m, cfg.eval.threshold)
        up = upsample_mask(b, size)
        native.append(b)
        full.append(up)
        records.append(iou(up, s.mask))
    ciou, giou = aggregate(records)
    return EvalResult(ciou, giou, len(records), native, full)


def dump_masks(result: EvalResult, directory) -> int:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, (a, b) in enumerate(zip(result.native, result.full)):
        write_pgm(d / f"{i:06d}_native.pgm", a.astype(np.uint8) * 255)
        write_pgm(d / f"{i:06d}_full.pgm", b.astype(np.uint8) * 255)
    return len(result.native)


def run_id(cfg: RunConfig) -> str:
    p = cfg.pipeline
    return f"{p.mode.value}-{p.mask_variant.value}-{p.sharing.value}-{p.retention}-s{cfg.train.seed}"


def metrics_row(cfg: RunConfig, result: EvalResult, split: str = "test") -> list[str]:
    p = cfg.pipeline
    return format_metrics_row(run_id(cfg), p.mode.value, p.mask_variant.value, cfg.train.seed,
                              split, result.ciou, result.giou, math.nan, result.n_samples)


def save_model(model: SegModel, path) -> None:
    checkpoint.save(path, model.state_dict())


def load_model(cfg: RunConfig, path) -> SegModel:
    model = build_model(cfg)
    state = checkpoint.load(path)
    expected = model.state_dict()
    for name, arr in expected.items():
        if name not in state or state[name].shape != arr.shape:
            raise ShapeMismatch(f"checkpoint tensor {name!r} does not match the config")
    model.load_state_dict(state)
    return model


@dataclass
class RunOutcome:
    cfg: RunConfig
    result: EvalResult
    history: list[StepLosses]


def run(cfg: RunConfig, out_dir=None, splits=None) -> RunOutcome:
    """Train, evaluate on the test split, and optionally write artifacts."""
    train_set, test_set = splits if splits is not None else load_splits(cfg)
    log_buf = io.StringIO()
    model, history = train(cfg, train_set, log_buf)
    result = evaluate(model, test_set, cfg)
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.txt").write_text(serialize_config(cfg))
        (d / "train_log.csv").write_text(log_buf.getvalue())
        save_model(model, d / "model.s1e")
        from .metrics import write_metrics_csv
        write_metrics_csv(d / "metrics.csv", [metrics_row(cfg, result)])
    return RunOutcome(cfg, result, history)


# ---------------------------------------------------------------------------
# ablation grids

AXES = ("pipeline", "mask", "sharing", "retention")


def axis_cells(base: RunConfig, axis: str) -> list[tuple[str, RunConfig]]:
    """Named variants along one ablation axis, everything else held at ``base``."""
    if axis == "pipeline":
        return [(m.value, base.replace(**{"pipeline.mode": m.value})) for m in PipelineMode]
    if axis == "mask":
        return [(v.value, base.replace(**{"pipeline.mask_variant": v.value})) for v in MaskVariant]
    if axis == "sharing":
        return [(s.value, base.replace(**{"pipeline.sharing": s.value})) for s in MlpSharing]
    if axis == "retention":
        return [("self_replicate", base.replace(**{"pipeline.retention": "self_replicate"})),
                ("scanning", base.replace(**{"pipeline.retention": "scanning"})),
                ("none", base.replace(**{"pipeline.mode": PipelineMode.CompressedBaseline.value}))]
    raise ConfigParse(f"unknown ablation axis {axis!r}; choose from {AXES}")


def _run_cell(cfg: RunConfig) -> tuple[float, float]:
    res = run(cfg).result
    return res.ciou, res.giou


def thread_cap() -> int:
    raw = os.environ.get("S1E_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigParse(f"S1E_THREADS must be an integer, got {raw!r}") from None


@dataclass
class CellStats:
    name: str
    cious: list[float]
    gious: list[float]

    @property
    def giou_mean(self) -> float:
        return float(np.mean(self.gious))

    @property
    def giou_sd(self) -> float:
        return float(np.std(self.gious, ddof=1)) if len(self.gious) > 1 else 0.0

    @property
    def ciou_mean(self) -> float:
        return float(np.mean(self.cious))

    @property
    def ciou_sd(self) -> float:
        return float(np.std(self.cious, ddof=1)) if len(self.cious) > 1 else 0.0


GRID_HEADER = "axis,variant,n_seeds,ciou_mean,ciou_sd,giou_mean,giou_sd"


def ablate(base: RunConfig, axis: str, seeds: Sequence[int], workers: int | None = None,
           cells: Sequence[tuple[str, RunConfig]] | None = None) -> list[CellStats]:
    """Train every variant of ``axis`` under each seed; cells share data and init seed."""
    cells = list(cells) if cells is not None else axis_cells(base, axis)
    jobs = [(name, c.replace(**{"train.seed": s})) for name, c in cells for s in seeds]
    workers = workers or thread_cap()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(_run_cell, [c for _, c in jobs]))
    else:
        scores = [_run_cell(c) for _, c in jobs]
    stats = {name: CellStats(name, [], []) for name, _ in cells}
    for (name, _), (ci, gi) in zip(jobs, scores):
        stats[name].cious.append(ci)
        stats[name].gious.append(gi)
    return [stats[name] for name, _ in cells]


def grid_csv(axis: str, stats: Sequence[CellStats]) -> str:
    lines = [GRID_HEADER]
    for s in stats:
        lines.append(f"{axis},{s.name},{len(s.gious)},{s.ciou_mean:.6f},{s.ciou_sd:.6f},"
                     f"{s.giou_mean:.6f},{s.giou_sd:.6f}")
    return "\n".join(lines) + "\n"
