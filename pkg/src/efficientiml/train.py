"""AdamW + cosine schedule training loop with deterministic batching."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, TrainConfig, apply_overrides, dump_config, parse_config_text
from .data import Manifest, Sample, augment, load_split, pad_to_multiple
from .loss import total_loss
from .metrics import MetricAccumulator
from .model import EfficientIML

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """A NaN/Inf appeared in a gradient or the loss."""


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_init`` then half-cosine decay to 0 at ``cfg.steps``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr_init * step / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr_init * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(params: dict, grads: dict, m: dict, v: dict, step: int, lr: float,
               cfg: TrainConfig, decay: dict | None = None) -> None:
    """One in-place AdamW update; ``step`` counts from 1.

    Weight decay is decoupled (``p -= lr * wd * p``) and applied only to the
    names for which ``decay`` is true (all, when ``decay`` is None).
    """
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
        if name not in m:
            m[name] = np.zeros_like(p)
            v[name] = np.zeros_like(p)
        m[name] *= b1
        m[name] += (1 - b1) * g
        v[name] *= b2
        v[name] += (1 - b2) * g * g
        if cfg.weight_decay and (decay is None or decay.get(name, True)):
            p -= lr * cfg.weight_decay * p
        p -= lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + cfg.eps)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def collate(samples: list[Sample]):
    """Stack samples, zero-padding each to a common multiple-of-64 size."""
    padded = [pad_to_multiple(s.image, s.mask) for s in samples]
    H = max(p[0].shape[0] for p in padded)
    W = max(p[0].shape[1] for p in padded)

    def fit(a):
        return np.pad(a, ((0, H - a.shape[0]), (0, W - a.shape[1]), (0, 0)))

    imgs = np.stack([fit(p[0]) for p in padded])
    masks = np.stack([fit(p[1]) for p in padded])
    valid = np.stack([fit(p[2]) for p in padded])
    return imgs, masks, valid


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Indices for ``step``: epoch-wise permutations seeded by (seed, epoch)."""
    bs = min(batch_size, n)
    per_epoch = max(1, n // bs)
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[k * bs : (k + 1) * bs]


def evaluate(model: EfficientIML, samples: list[Sample], batch_size: int = 4,
             threshold: float = 0.5, seed: int = 0) -> tuple[dict, list[np.ndarray]]:
    """Per-image metrics (padded inference, cropped back) and the probability maps."""
    acc = MetricAccumulator(threshold=threshold, seed=seed)
    probs = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        imgs, _, _ = collate(chunk)
        out = model.predict_proba(imgs)
        for s, p in zip(chunk, out):
            H, W = s.mask.shape[:2]
            p = p[:H, :W]
            probs.append(p)
            acc.add(s.id, p, s.mask)
    return acc.summary(), probs


@dataclass
class TrainResult:
    model: EfficientIML
    loss_trace: list[float] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    best_f1: float = -1.0
    best_path: Path | None = None
    last_path: Path | None = None


def model_state(model: EfficientIML) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.named_parameters()}


def config_from_checkpoint(ckpt: Checkpoint) -> RunConfig:
    cfg = RunConfig()
    apply_overrides(cfg, ckpt.config)
    return cfg.validate()


def load_model(path) -> tuple[EfficientIML, Checkpoint]:
    ckpt = load_checkpoint(path)
    cfg = config_from_checkpoint(ckpt)
    dtype = np.float64 if cfg.train.precision == "float64" else np.float32
    model = EfficientIML(cfg.model, dtype=dtype)
    model.load_state_dict(ckpt.params)
    return model, ckpt


def _format_record(rec: dict) -> str:
    return " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items())


def train(cfg: RunConfig, manifest: Manifest | None = None, samples: list[Sample] | None = None,
          out_dir=None, resume=None, log_fn: Callable[[str], None] | None = None,
          eval_samples: list[Sample] | None = None, split: str = "train",
          stop_after: int | None = None) -> TrainResult:
    """Train on a manifest split (``train`` by default) or on explicit ``samples``.

    Writes ``train.log``, ``last.ckpt`` and ``best.ckpt`` (best train-F1 at the
    eval cadence) into ``out_dir`` when given. A NaN loss raises
    :class:`NumericError` after pointing at the last good checkpoint.
    ``stop_after`` ends the run early (the schedule still spans ``train.steps``)
    so that it can be continued later with ``resume``.
    """
    cfg.validate()
    tc = cfg.train
    dtype = np.float64 if tc.precision == "float64" else np.float32
    if samples is None:
        if manifest is None:
            raise ValueError("train needs a manifest or samples")
        samples = load_split(manifest, split, tc.size or None)
    if eval_samples is None:
        eval_samples = samples
    model = EfficientIML(cfg.model, dtype=dtype)
    m_state: dict[str, np.ndarray] = {}
    v_state: dict[str, np.ndarray] = {}
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume) if not isinstance(resume, Checkpoint) else resume
        model.load_state_dict(ckpt.params)
        m_state = {k: a.astype(dtype) for k, a in ckpt.moments_m.items()}
        v_state = {k: a.astype(dtype) for k, a in ckpt.moments_v.items()}
        start = ckpt.step

    out = Path(out_dir) if out_dir else None
    logfile = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        logfile = open(out / "train.log", "a" if resume is not None else "w")

    def emit(line: str):
        if logfile:
            logfile.write(line + "\n")
            logfile.flush()
        if log_fn:
            log_fn(line)

    conf_text = dump_config(cfg)
    for line in conf_text.splitlines():
        emit("config " + line)
    conf_pairs = parse_config_text(conf_text)

    params = dict(model.named_parameters())
    decay = {k: p.ndim >= 2 for k, p in params.items()}
    result = TrainResult(model)

    def snapshot(step: int, path: Path, extra: dict | None = None):
        ck = Checkpoint(model_state(model), {k: a.copy() for k, a in m_state.items()},
                        {k: a.copy() for k, a in v_state.items()}, step, dict(conf_pairs),
                        {k: str(v) for k, v in (extra or {}).items()})
        save_checkpoint(path, ck)
        return ck

    try:
        stop = tc.steps if stop_after is None else min(tc.steps, stop_after)
        for step in range(start, stop):
            t0 = time.perf_counter()
            idx = batch_indices(len(samples), tc.batch_size, step, tc.seed)
            batch = [samples[i] for i in idx]
            if tc.augment:
                batch = [augment(s, [tc.seed, step, int(i)]) for s, i in zip(batch, idx)]
            imgs, masks, valid = collate(batch)
            valid_arg = None if valid.all() else valid
            model.zero_grad()
            pred = model.forward(imgs.astype(dtype))
            res = total_loss(pred, masks, cfg.loss, valid=valid_arg)
            if not math.isfinite(res.total):
                last = out / "last_good.ckpt" if out else None
                raise NumericError(f"loss became {res.total} at step {step}; last good checkpoint: {last}")
            model.backward(res.grad_logits, res.grad_final)
            # grads are fetched after backward: astype/load may have replaced the arrays
            grads = dict(model.named_grads())
            gnorm = clip_grad_norm(grads, tc.grad_clip)
            lr = cosine_lr(step, tc)
            adamw_step(params, grads, m_state, v_state, step + 1, lr, tc, decay)
            edge = sum(v for k, v in res.terms.items() if k.startswith("edge"))
            rec = {"step": step, "lr": lr, "loss": res.total, "loss_final": res.terms["bce_final"],
                   "loss_edge": edge, **res.terms, "grad_norm": gnorm,
                   "time_s": time.perf_counter() - t0}
            result.loss_trace.append(res.total)
            result.records.append(rec)
            if tc.log_every and (step % tc.log_every == 0 or step == tc.steps - 1):
                emit(_format_record(rec))
            done = step + 1
            if tc.eval_every and (done % tc.eval_every == 0 or done == stop):
                summary, _ = evaluate(model, eval_samples, tc.batch_size)
                summary["step"] = done
                result.evals.append(summary)
                emit("eval " + _format_record({k: v for k, v in summary.items() if v is not None}))
                if out:
                    snapshot(done, out / "last_good.ckpt")
                    if summary["f1"] > result.best_f1:
                        result.best_f1 = summary["f1"]
                        result.best_path = out / "best.ckpt"
                        snapshot(done, result.best_path, {"f1": summary["f1"]})
                elif summary["f1"] > result.best_f1:
                    result.best_f1 = summary["f1"]
        if out:
            result.last_path = out / "last.ckpt"
            snapshot(stop, result.last_path)
    finally:
        if logfile:
            logfile.close()
    return result
