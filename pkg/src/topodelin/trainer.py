"""Training loop for the shared-weight refinement pipeline.

Each scheduled phase trains at a fixed number of refinement steps K,
minimizing the iteration-weighted sum of per-step combined losses;
gradients flow through all K applications of the single shared network.
Incrementing K continues from the previous phase's weights with fresh
optimizer moments.  Per-epoch RNG is derived from (seed, phase, epoch) so
interrupted runs resume deterministically from the last saved epoch.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import engine, losses, metrics, unet
from .engine import Tensor
from .losses import LossConfig
from .unet import ConfigError, ModelParams, UNetConfig, empty_prediction


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradient encountered during optimization."""


class DataEmptyError(ValueError):
    pass


@dataclass(frozen=True)
class RefinementConfig:
    k_final: int = 3
    schedule: tuple = ()  # ((k, epochs), ...); empty -> (1..k_final) x epochs
    weights_shared: bool = True  # one network serves every step, by contract

    def __post_init__(self):
        if self.k_final < 1:
            raise ConfigError(f"k_final must be >= 1, got {self.k_final}")
        if not self.weights_shared:
            raise ConfigError("per-step weights are not supported; the same "
                              "single network serves every refinement step")
        ks = [k for k, _ in self.schedule]
        if ks and (ks != sorted(ks) or ks[-1] != self.k_final):
            raise ConfigError(
                f"schedule K values must be non-decreasing and end at "
                f"k_final={self.k_final}: {ks}")

    def resolved(self, epochs_per_phase):
        if self.schedule:
            return tuple(self.schedule)
        return tuple((k, epochs_per_phase) for k in range(1, self.k_final + 1))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 4          # per phase, when the schedule carries no counts
    patch_size: int = 64     # the paper-scale default of 450 is not desk-scale
    seed: int = 0
    augment_mirror_rotate: bool = False
    elastic_std: float = 0.0
    elastic_spacing: int = 8
    val_fraction: float = 0.1
    precision: str = "double"  # "single" halves the memory traffic
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.precision not in ("double", "single"):
            raise ConfigError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def fresh(cls, params):
        return cls(m={n: np.zeros_like(t.data) for n, t in params.tensors.items()},
                   v={n: np.zeros_like(t.data) for n, t in params.tensors.items()},
                   t=0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected Adam update; returns (new params, new state).

    The gradient map must cover exactly the parameter names.
    """
    names = set(params.tensors)
    gnames = set(grads)
    if names != gnames:
        raise ValueError(
            f"gradient map mismatch: missing={sorted(names - gnames)} "
            f"extra={sorted(gnames - names)}")
    t = state.t + 1
    new_tensors = {}
    new_m = {}
    new_v = {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, tensor in params.tensors.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_tensors[name] = Tensor(tensor.data - step, requires_grad=True,
                                   name=name)
        new_m[name] = m
        new_v[name] = v
    return (ModelParams(tensors=new_tensors, scheme=params.scheme,
                        seed=params.seed),
            AdamState(m=new_m, v=new_v, t=t))


# ---------------------------------------------------------------------------
# inference

def predict_refined(config, params, images, k):
    """Iterated predictions [ŷ¹..ŷᵏ] starting from the all-zero map.

    `images` is a (N,1,H,W) array or Tensor; batch statistics are those of
    this call's batch, so results are deterministic per batch composition.
    K = 0 returns an empty list (the final prediction is the zero map).
    """
    if k < 0:
        raise ConfigError(f"K must be >= 0, got {k}")
    dtype = next(iter(params.tensors.values())).dtype
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images, dtype=dtype))
    prev = empty_prediction(images.shape, dtype=images.dtype)
    outputs = []
    for _ in range(k):
        pred = unet.forward(config, params, images, prev)
        outputs.append(pred.data)
        prev = pred
    return outputs


def batch_tensors(samples, dtype=np.float64):
    images = np.stack([s.image for s in samples])[:, None].astype(dtype)
    gts = np.stack([s.gt for s in samples])[:, None].astype(dtype)
    return Tensor(images), Tensor(gts)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    config: UNetConfig
    params: ModelParams
    best_params: ModelParams
    best_quality: float
    best_threshold: float
    log_lines: list


def _epoch_rng(seed, phase_idx, epoch_idx):
    return np.random.default_rng(
        np.random.SeedSequence((seed, phase_idx, epoch_idx)))


def _refinement_step(model_cfg, params, extractor, loss_cfg, x, y, k_steps):
    prev = empty_prediction(x.shape, dtype=x.dtype)
    gt_stack = None
    if loss_cfg.mu > 0:  # the gt descriptor stack is constant over k
        gt_stack = extractor.describe(Tensor(y.data, _check=False))
    partials = []
    records = []
    for k in range(1, k_steps + 1):
        pred = unet.forward(model_cfg, params, x, prev)
        total, record = losses.combined_loss(pred, y, extractor, loss_cfg,
                                             k=k, gt_stack=gt_stack)
        partials.append(total)
        records.append(record)
        prev = pred
    ref = losses.weighted_partial_sum(partials)
    return ref, records


def _validation_quality(model_cfg, params, val_samples, k, rho):
    if not val_samples:
        return 0.5, 0.0
    images = np.stack([s.image for s in val_samples])[:, None]
    preds = predict_refined(model_cfg, params, images, k)
    final = preds[-1][:, 0] if preds else np.zeros_like(images[:, 0])
    probs = [final[i] for i in range(final.shape[0])]
    gts = [s.gt for s in val_samples]
    grid = np.linspace(0.1, 0.9, 9)
    return metrics.select_threshold(probs, gts, rho=rho, grid=grid)


def train(dataset, model_cfg, refine_cfg, train_cfg, out_dir=None,
          resume=False, rho=2.0, verbose=None):
    """Run the scheduled phases and return the best-validation checkpoint.

    Writes `last.tdlw` (+ optimizer state) after every epoch and
    `best.tdlw` whenever validation quality improves, when out_dir is set.
    The training log has one tab-separated line per epoch:
    epoch, phase K, refinement loss, bce, topo, validation quality.
    """
    if not dataset:
        raise DataEmptyError("training dataset is empty")
    for s in dataset:
        s.validate()
        if s.image.shape[0] != train_cfg.patch_size:
            raise ConfigError(
                f"sample {s.id!r} extent {s.image.shape} != patch size "
                f"{train_cfg.patch_size}")
    if train_cfg.patch_size % (1 << model_cfg.depth):
        raise ConfigError(
            f"patch size {train_cfg.patch_size} not divisible by "
            f"2^depth={1 << model_cfg.depth}")

    split_rng = np.random.default_rng(
        np.random.SeedSequence((train_cfg.seed, 0xDA7A)))
    order = split_rng.permutation(len(dataset))
    n_val = int(round(train_cfg.val_fraction * len(dataset)))
    val_samples = [dataset[i] for i in order[:n_val]]
    train_samples = [dataset[i] for i in order[n_val:]]
    if not train_samples:
        raise DataEmptyError("no training samples left after validation split")
    if train_cfg.augment_mirror_rotate:
        from .data import augment
        train_samples = [a for s in train_samples for a in augment(s)]

    extractor = None
    if train_cfg.loss.mu > 0:
        from .extractor import analytic_extractor
        extractor = analytic_extractor(dtype=train_cfg.dtype)

    schedule = refine_cfg.resolved(train_cfg.epochs)
    params = unet.init_params(model_cfg, seed=train_cfg.seed,
                              dtype=train_cfg.dtype)
    log_lines = []
    best_quality = -1.0
    best_threshold = 0.5
    best_params = params
    global_epoch = 0
    start_phase, start_epoch = 0, 0

    if resume and out_dir and os.path.exists(os.path.join(out_dir, "last.tdlw")):
        params, state_extra, meta = _load_last(os.path.join(out_dir, "last.tdlw"),
                                               dtype=train_cfg.dtype)
        start_phase = int(meta["phase_idx"])
        start_epoch = int(meta["epoch_idx"]) + 1
        global_epoch = int(meta["global_epoch"])
        best_quality = float(meta["best_quality"])
        best_threshold = float(meta["best_threshold"])
        if os.path.exists(os.path.join(out_dir, "best.tdlw")):
            _, best_params, _, _ = unet.load_checkpoint(
                os.path.join(out_dir, "best.tdlw"))
        log_path = os.path.join(out_dir, "train.log")
        if os.path.exists(log_path):
            with open(log_path) as fh:
                log_lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
        if start_epoch >= schedule[start_phase][1]:
            start_phase += 1
            start_epoch = 0
        resumed_state = state_extra
    else:
        resumed_state = None

    say = verbose or (lambda msg: None)
    for phase_idx in range(start_phase, len(schedule)):
        k_phase, n_epochs = schedule[phase_idx]
        state = resumed_state if (resumed_state is not None
                                  and phase_idx == start_phase) \
            else AdamState.fresh(params)
        resumed_state = None
        first_epoch = start_epoch if phase_idx == start_phase else 0
        for epoch_idx in range(first_epoch, n_epochs):
            rng = _epoch_rng(train_cfg.seed, phase_idx, epoch_idx)
            perm = rng.permutation(len(train_samples))
            ref_sum = bce_sum = topo_sum = 0.0
            n_batches = 0
            epoch_no = global_epoch + 1
            try:
                for lo in range(0, len(perm), train_cfg.batch_size):
                    batch = [train_samples[i]
                             for i in perm[lo:lo + train_cfg.batch_size]]
                    if train_cfg.elastic_std > 0:
                        from .data import elastic_deform
                        batch = [elastic_deform(s, train_cfg.elastic_spacing,
                                                train_cfg.elastic_std,
                                                seed=int(rng.integers(2 ** 31)))
                                 for s in batch]
                    x, y = batch_tensors(batch, dtype=train_cfg.dtype)
                    ref, records = _refinement_step(
                        model_cfg, params, extractor, train_cfg.loss, x, y,
                        k_phase)
                    grads = engine.backward(ref)
                    named = {name: grads[t]
                             for name, t in params.tensors.items() if t in grads}
                    params, state = adam_step(
                        params, named, state, train_cfg.learning_rate,
                        train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
                    ref_sum += ref.item()
                    bce_sum += records[-1].bce
                    topo_sum += records[-1].topo
                    n_batches += 1
                global_epoch += 1
                thr, quality = _validation_quality(model_cfg, params,
                                                   val_samples, k_phase, rho)
            except engine.NonFiniteError as exc:
                raise TrainingDiverged(
                    f"epoch {epoch_no} (phase K={k_phase}): {exc}")
            line = (f"{global_epoch}\t{k_phase}\t{ref_sum / n_batches:.6f}"
                    f"\t{bce_sum / n_batches:.6f}\t{topo_sum / n_batches:.6f}"
                    f"\t{quality:.4f}")
            log_lines.append(line)
            say(line)
            if epoch_idx == 0 and topo_sum > 0:
                say(f"# bce/topo magnitude ratio at K={k_phase}: "
                    f"{bce_sum / topo_sum:.3f}")
            if quality > best_quality:
                best_quality = quality
                best_threshold = thr
                best_params = ModelParams(
                    tensors={n: Tensor(t.data, requires_grad=True, name=n)
                             for n, t in params.tensors.items()},
                    scheme=params.scheme, seed=params.seed)
                if out_dir:
                    unet.save_checkpoint(
                        os.path.join(out_dir, "best.tdlw"), model_cfg,
                        best_params,
                        meta={"best_quality": f"{best_quality:.6f}",
                              "threshold": f"{best_threshold:.4f}"})
            if out_dir:
                _save_last(out_dir, model_cfg, params, state,
                           {"phase_idx": phase_idx, "epoch_idx": epoch_idx,
                            "global_epoch": global_epoch,
                            "best_quality": f"{best_quality:.6f}",
                            "best_threshold": f"{best_threshold:.4f}"})
                with open(os.path.join(out_dir, "train.log"), "w") as fh:
                    fh.write("".join(ln + "\n" for ln in log_lines))

    return TrainResult(config=model_cfg, params=params,
                       best_params=best_params, best_quality=best_quality,
                       best_threshold=best_threshold, log_lines=log_lines)


def _save_last(out_dir, model_cfg, params, state, meta):
    extra = {}
    for name, arr in state.m.items():
        extra[f"adam.m.{name}"] = arr
    for name, arr in state.v.items():
        extra[f"adam.v.{name}"] = arr
    meta = dict(meta)
    meta["adam.t"] = state.t
    unet.save_checkpoint(os.path.join(out_dir, "last.tdlw"), model_cfg, params,
                         extra_tensors=extra, meta=meta)


def _load_last(path, dtype=np.float64):
    _, params, extra, meta = unet.load_checkpoint(path, dtype=dtype)
    m = {}
    v = {}
    for name, arr in extra.items():
        if name.startswith("adam.m."):
            m[name[7:]] = arr
        elif name.startswith("adam.v."):
            v[name[7:]] = arr
    state = AdamState(m=m, v=v, t=int(meta.get("adam.t", 0)))
    return params, state, meta
