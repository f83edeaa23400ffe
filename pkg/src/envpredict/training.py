"""Training regimes: iterated multi-frame rollout and single-frame input noise."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .architectures import control_windows, save_model
from .autodiff import AdamState, NonFiniteError, Tensor, adam_step, clip_global_norm
from .features import compute_norm_stats, sample_minibatch, split_corpus
from .losses import CGMParams, cgm_nll, mse_loss

REGIMES = ("iterated", "noise")


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "iterated"
    n_iter: int = 24
    sigma_db: float = 12.0
    batch: int = 16
    max_updates: int = 1000
    eval_every: int = 0
    eval_horizon: int = 200
    seed: int = 0
    head: str | None = None
    clip_norm: float | None = 5.0
    base_lr: float = 5e-4
    lr_decay: float = 1e-5
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        if self.sigma_db < 0:
            raise ValueError("sigma_db must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.max_updates < 0:
            raise ValueError("max_updates must be >= 0")

    def span(self, history):
        return history + (self.n_iter if self.regime == "iterated" else 1)


@dataclass
class RunLog:
    records: list = field(default_factory=list)
    seen_phrase_ids: set = field(default_factory=set)

    def add(self, **rec):
        self.records.append(rec)

    @property
    def updates(self):
        return [r for r in self.records if r["kind"] == "update"]

    @property
    def evals(self):
        return [r for r in self.records if r["kind"] == "eval"]

    def to_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path):
        Path(path).write_text(self.to_jsonl())


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``model`` holds the last good parameters."""

    def __init__(self, message, model, log):
        super().__init__(message)
        self.model = model
        self.log = log


# --------------------------------------------------------------------------
# losses on a batch


def _normalised(model, batch):
    norm = model.norm
    return (
        norm.norm_env(batch.envelopes),
        norm.norm_f0(batch.f0),
        norm.norm_loud(batch.loudness),
    )


def _controls(model, batch, f0n, loudn, n):
    cfg = model.config
    first = batch.context[0] + cfg.history
    return model.encode_controls(*control_windows(cfg, batch.phonemes, f0n, loudn, first, n))


def head_loss(out, target):
    if isinstance(out, CGMParams):
        return cgm_nll(out, target)
    return mse_loss(out, Tensor(target))


def point_estimate(out):
    """Frame fed back into the history: the output itself, or the top component's mean."""
    if not isinstance(out, CGMParams):
        return out
    onehot = np.zeros(out.logits.shape)
    np.put_along_axis(onehot, np.argmax(out.logits.data, axis=-1)[..., None], 1.0, axis=-1)
    return ad.reduce_sum(out.means * onehot, axis=-1)


def _check_span(model, batch, n):
    need = model.config.history + n
    if batch.span < need:
        raise ValueError(f"batch windows have {batch.span} frames, need {need}")


def teacher_forced_loss(model, batch, n_targets=1, env=None):
    """Loss of predicting ``n_targets`` frames, each from ground-truth history."""
    _check_span(model, batch, n_targets)
    h = model.config.history
    env_n, f0n, loudn = _normalised(model, batch)
    if env is not None:
        env_n = env
    ctrl = _controls(model, batch, f0n, loudn, n_targets)
    out = model.predict_frames(env_n[:, : h + n_targets - 1], ctrl)
    return head_loss(out, env_n[:, h : h + n_targets])


def iterated_loss(model, batch, n_iter, detach_rollout=False):
    """Seed with true history, predict ``n_iter`` frames feeding predictions back.

    The loss is the unweighted mean over all predicted frames; gradients
    flow through the whole rollout unless ``detach_rollout`` is set.
    """
    _check_span(model, batch, n_iter)
    h = model.config.history
    env_n, f0n, loudn = _normalised(model, batch)
    ctrl = _controls(model, batch, f0n, loudn, n_iter)
    hist = Tensor(env_n[:, :h])
    total = None
    for j in range(n_iter):
        out = model.predict_frames(hist, ctrl[:, j : j + 1])
        step = head_loss(out, env_n[:, h + j : h + j + 1])
        total = step if total is None else total + step
        if j + 1 < n_iter:
            frame = point_estimate(out)
            if detach_rollout:
                frame = frame.detach()
            hist = ad.concat([hist[:, 1:], frame], axis=1)
    return total * (1.0 / n_iter)


def noise_loss(model, batch, sigma_db, rng):
    """Single-frame loss with N(0, sigma_db) dB noise on the input history only."""
    _check_span(model, batch, 1)
    h = model.config.history
    env_db = batch.envelopes.copy()
    env_db[:, :h] += rng.normal(0.0, sigma_db, size=env_db[:, :h].shape)
    return teacher_forced_loss(model, batch, 1, env=model.norm.norm_env(env_db))


# --------------------------------------------------------------------------
# update steps


def apply_update(model, loss, state, clip_norm=5.0):
    value = float(loss.data)
    if not math.isfinite(value):
        raise NonFiniteError(f"loss is {value}")
    params = model.parameters()
    if not params:
        return value
    model.zero_grad()
    loss.backward()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    for k, g in grads.items():
        ad.check_finite(g, f"gradient of {k!r}")
    clip_global_norm(grads, clip_norm)
    adam_step(params, grads, state)
    return value


def train_step_iterated(model, batch, n_iter, state, clip_norm=5.0, detach_rollout=False):
    loss = iterated_loss(model, batch, n_iter, detach_rollout)
    return apply_update(model, loss, state, clip_norm)


def train_step_noise(model, batch, sigma_db, state, rng, clip_norm=5.0):
    loss = noise_loss(model, batch, sigma_db, rng)
    return apply_update(model, loss, state, clip_norm)


# --------------------------------------------------------------------------
# the loop


def _snapshot(model):
    return {k: p.data.copy() for k, p in model.parameters().items()}


def _restore(model, snap):
    for k, p in model.parameters().items():
        p.data[...] = snap[k]


def train(model, corpus, cfg, log_path=None):
    """Train ``model`` in place on the training split of ``corpus``.

    Returns ``(model, RunLog)``. Normalisation statistics come from the
    training split. Evaluations (held-out teacher-forced MSE and free-run
    drift) run every ``eval_every`` updates and after the last one.
    """
    from .evaluation import eval_teacher_forced, free_run_drift

    if cfg.head is not None and cfg.head != model.head:
        raise ValueError(f"train config head {cfg.head!r} != model head {model.head!r}")
    log = RunLog()
    if cfg.max_updates == 0:
        return model, log
    train_set, test_set = split_corpus(corpus)
    if not train_set:
        raise ValueError("training split is empty")
    model.norm = compute_norm_stats(train_set)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(base_lr=cfg.base_lr, decay=cfg.lr_decay)
    span = cfg.span(model.config.history)
    context = model.config.control_context
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    good = _snapshot(model)

    def evaluate(update):
        rec = {"kind": "eval", "update": update}
        if test_set:
            rec["tf_mse_db2"] = eval_teacher_forced(model, test_set).tf_mse
            horizon = cfg.eval_horizon
            long_enough = [s for s in test_set if len(s) >= model.config.history + horizon]
            if horizon > 0 and long_enough:
                curve = free_run_drift(model, long_enough, horizon)
                rec["drift_db"] = float(curve[-1])
        log.add(**rec)
        if ckpt_dir:
            save_model(model, ckpt_dir / f"update_{update:07d}.json")

    for update in range(1, cfg.max_updates + 1):
        batch = sample_minibatch(train_set, cfg.batch, span, rng, context)
        log.seen_phrase_ids.update(int(i) for i in batch.phrase_ids)
        lr = state.lr()
        try:
            if cfg.regime == "iterated":
                loss = train_step_iterated(model, batch, cfg.n_iter, state, cfg.clip_norm)
            else:
                loss = train_step_noise(model, batch, cfg.sigma_db, state, rng, cfg.clip_norm)
        except NonFiniteError as e:
            _restore(model, good)
            raise TrainingDiverged(f"update {update}: {e}", model, log) from e
        log.add(kind="update", update=update, lr=lr, loss=loss)
        if (cfg.eval_every and update % cfg.eval_every == 0) or update == cfg.max_updates:
            evaluate(update)
            good = _snapshot(model)
    if log_path is not None:
        log.write(log_path)
    return model, log
