"""Contrastive pretraining: batch assembly, multi-view forward/backward, SGD, logging."""
from __future__ import annotations

import json
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .contrastive import DEFAULT_TAU, LossMode, ProjectionBatch, batch_loss_backward, similarity_matrices
from .errors import ConfigError, DataError, MissingDataError, NumericError
from .nn.checkpoint import checkpoint_save
from .nn.model import EncoderConfig, ModelState, ProjectorConfig, preset
from .nn.optim import OptimizerConfig, lr_at, step_state
from .views import ALL_PLANES, ViewSet, load_view_set, save_view_set


@dataclass
class PretrainConfig:
    plane_ids: tuple = ALL_PLANES
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    mode: LossMode = LossMode.CMC_INCLUSIVE
    tau: float = DEFAULT_TAU
    out_size: int = 224
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=lambda: preset("full")[0])
    projector: ProjectorConfig = field(default_factory=lambda: preset("full")[1])
    dtype: str = "float32"
    log_every: int = 1
    checkpoint_every: int = 0
    threads: int = None

    def __post_init__(self):
        self.plane_ids = tuple(sorted(set(int(p) for p in self.plane_ids)))
        self.mode = LossMode.parse(self.mode)
        if len(self.plane_ids) < 2:
            raise ConfigError("pretraining needs at least 2 planes")
        if self.encoder.input_size != self.out_size:
            self.encoder.input_size = self.out_size
            self.encoder.feature_shape()

    def new_state(self) -> ModelState:
        return ModelState.init(self.encoder, self.projector, self.plane_ids, self.seed, self.dtype)

    def to_dict(self):
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


@dataclass
class TrainLogRow:
    epoch: int
    step: int
    loss: float
    lr: float
    wall_ms: float


class ViewStore:
    """In-memory map ``lesion_id -> ViewSet`` with a directory-backed form."""

    def __init__(self, view_sets=()):
        self._sets = {}
        for vs in view_sets:
            self.add(vs)

    def add(self, vs: ViewSet):
        self._sets[vs.lesion_id] = vs

    def __contains__(self, lesion_id):
        return lesion_id in self._sets

    def __len__(self):
        return len(self._sets)

    def __getitem__(self, lesion_id) -> ViewSet:
        return self._sets[lesion_id]

    def ids(self):
        return sorted(self._sets)

    def view(self, lesion_id, plane_id) -> np.ndarray:
        vs = self._sets.get(lesion_id)
        if vs is None:
            raise MissingDataError(f"no views stored for lesion {lesion_id!r}")
        for v in vs.views:
            if v.plane_id == plane_id:
                return v.pixels
        raise MissingDataError(f"lesion {lesion_id!r} has no view for plane {plane_id}")

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for lid in self.ids():
            save_view_set(self._sets[lid], directory / f"{lid}.f32")
        return directory

    @classmethod
    def load(cls, directory) -> "ViewStore":
        directory = Path(directory)
        if not directory.is_dir():
            raise DataError(f"view directory not found: {directory}")
        return cls(load_view_set(p) for p in sorted(directory.glob("*.f32")))


def assemble_batch(store: ViewStore, lesion_ids, plane_ids, dtype=np.float32) -> list:
    """One ``[N, 1, H, W]`` array per plane, lesions in the given order."""
    lesion_ids = list(lesion_ids)
    if len(set(lesion_ids)) != len(lesion_ids):
        raise DataError("duplicate lesion ids in batch; a lesion cannot be its own negative")
    out = []
    for p in sorted(plane_ids):
        out.append(np.stack([store.view(lid, p) for lid in lesion_ids])[:, None].astype(dtype))
    return out


def forward_projections(state: ModelState, batch, train=True) -> np.ndarray:
    zs = []
    for p, x in zip(state.plane_ids, batch):
        zs.append(state.project(p, state.encode(p, x, train), train))
    return np.stack(zs)


def pretrain_step(state: ModelState, batch, config: PretrainConfig, return_projections=False):
    """One SGD step on the multi-view loss; returns ``(state, loss)`` with the pre-step loss."""
    if len(batch) != len(state.plane_ids):
        raise DataError(f"batch has {len(batch)} view tensors, model has {len(state.plane_ids)} planes")
    lr = lr_at(config.optimizer, state.epoch)
    z = forward_projections(state, batch, train=True)
    try:
        result, dz = batch_loss_backward(ProjectionBatch(z, tau=config.tau, check_norm=False), config.mode)
    except NumericError as exc:
        raise NumericError(f"loss evaluation failed at epoch {state.epoch} step {state.step}: {exc}",
                           dump={"similarities": similarity_matrices(np.nan_to_num(z))}) from exc
    if not np.isfinite(result.value):
        raise NumericError(f"non-finite loss at epoch {state.epoch} step {state.step}",
                           dump={"similarities": similarity_matrices(z)})
    for m, p in enumerate(state.plane_ids):
        dy = state.projectors[p].backward(dz[m].astype(state.dtype))
        state.encoders[p].backward(dy)
    step_state(state, state.grads(), config.optimizer, lr)
    if return_projections:
        return state, result.value, z
    return state, result.value


def _thread_limit(threads):
    if not threads:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(threads))


def pretrain(store: ViewStore, config: PretrainConfig, state: ModelState = None,
             log_path=None, checkpoint_dir=None, stop_epoch=None):
    """Run (or resume) the full schedule.

    Each epoch shuffles lesions with a seed derived from ``(seed, epoch)`` and
    drops the last incomplete batch. ``stop_epoch`` ends early after that
    many completed epochs, leaving a resumable state.
    """
    ids = store.ids()
    if len(ids) < 2:
        raise DataError("pretraining needs at least 2 lesions")
    state = state or config.new_state()
    if tuple(state.plane_ids) != config.plane_ids:
        raise ConfigError(f"state planes {state.plane_ids} differ from config planes {config.plane_ids}")
    n = min(config.optimizer.batch_size, len(ids))
    end = config.optimizer.epochs if stop_epoch is None else min(stop_epoch, config.optimizer.epochs)
    log = []
    log_fh = open(log_path, "a") if log_path else None
    try:
        with _thread_limit(config.threads):
            for epoch in range(state.epoch, end):
                state.epoch = epoch
                order = np.random.default_rng([config.seed, epoch]).permutation(len(ids))
                for b in range(len(ids) // n):
                    t0 = time.perf_counter()
                    batch_ids = [ids[k] for k in order[b * n:(b + 1) * n]]
                    batch = assemble_batch(store, batch_ids, state.plane_ids, state.dtype)
                    lr = lr_at(config.optimizer, epoch)
                    state, loss = pretrain_step(state, batch, config)
                    row = TrainLogRow(epoch, state.step, float(loss), lr, (time.perf_counter() - t0) * 1e3)
                    if state.step % config.log_every == 0:
                        log.append(row)
                        if log_fh:
                            log_fh.write(json.dumps(asdict(row)) + "\n")
                state.epoch = epoch + 1
                if checkpoint_dir and config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
                    checkpoint_save(state, Path(checkpoint_dir) / f"epoch{state.epoch:04d}.ckpt",
                                    extra={"pretrain": config.to_dict()})
        if checkpoint_dir:
            checkpoint_save(state, Path(checkpoint_dir) / "final.ckpt", extra={"pretrain": config.to_dict()})
    finally:
        if log_fh:
            log_fh.close()
    return state, log
