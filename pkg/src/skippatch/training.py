"""Adam and the two adversarial training loops.

One step ("epoch" in the configuration) draws one augmented batch, updates the
discriminator on real versus detached fake samples, then updates the generator
against the freshly updated discriminator with the non-saturating loss.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numba
import numpy as np

from . import autodiff as ad
from .architectures import (NOISE_CHANNELS, LayerGraph, build_discriminator, build_mask_generator,
                            build_unet_generator, forward, init_params)
from .autodiff import Tape, Tensor
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import EM_CROP_AREA, MASK_CROP_AREA, PairedDataset, augment, load_dataset, synth_corpus
from .rng import SeededRng

log = logging.getLogger(__name__)

VARIANTS = ("p16", "p70", "skip")
STAGES = ("mask", "em")
LOG_HEADER = ("step", "loss_d", "loss_g_bce", "loss_g_l1", "loss_g_total")

# stream tags keep training streams disjoint from corpus items (seed, i)
_GEN_INIT, _DISC_INIT, _LOOP = (7, 1), (7, 2), (7, 3)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "mask"
    resolution: int = 64
    batch_size: int = 1
    epochs: int = 1000
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    l1_weight: float = 100.0
    variant: str = "skip"
    crop_area: float | None = None
    seed: int = 42
    checkpoint_interval: int = 1000
    synthetic_n: int = 8
    manifest: str | None = None
    noise_side: int = 8
    unet_base: int = 16

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.crop_area is None:
            object.__setattr__(self, "crop_area", MASK_CROP_AREA if self.stage == "mask" else EM_CROP_AREA)
        if not 0 < self.crop_area <= 1:
            raise ValueError(f"crop_area must lie in (0, 1], got {self.crop_area}")
        for name in ("resolution", "batch_size", "epochs", "lr", "adam_eps", "checkpoint_interval",
                     "synthetic_n", "noise_side", "unet_base"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.l1_weight < 0:
            raise ValueError(f"l1_weight must be non-negative, got {self.l1_weight}")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        for key, val in values.items():
            _check_type(key, val, known[key].type)
        return cls(**values)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check_type(key, val, annotation: str) -> None:
    if val is None:
        if "None" not in annotation:
            raise ValueError(f"config key {key!r} may not be null")
        return
    if annotation.startswith("int"):
        ok = isinstance(val, int) and not isinstance(val, bool)
    elif annotation.startswith("float"):
        ok = isinstance(val, (int, float)) and not isinstance(val, bool)
    else:
        ok = isinstance(val, str)
    if not ok:
        raise ValueError(f"config key {key!r} has wrong type {type(val).__name__} (expected {annotation})")


# --- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, in place. Rejects the whole step on a non-finite gradient."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not _all_finite(g.reshape(-1)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        if name not in state.m:
            state.m[name] = np.zeros(g.shape)
            state.v[name] = np.zeros(g.shape)
        _adam_kernel(p.data.reshape(-1), np.ascontiguousarray(g).reshape(-1), state.m[name].reshape(-1),
                     state.v[name].reshape(-1), state.lr, state.beta1, state.beta2, state.eps, c1, c2)


@numba.njit(cache=True)
def _all_finite(a):
    for i in range(a.size):
        if not np.isfinite(a[i]):
            return False
    return True


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, lr, b1, b2, eps, c1, c2):
    # theta -= lr * (m / c1) / (sqrt(v / c2) + eps), with the corrections folded into scalars
    step = lr * np.sqrt(c2) / c1
    eps_hat = eps * np.sqrt(c2)
    for i in range(p.size):
        m[i] = b1 * m[i] + (1.0 - b1) * g[i]
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
        p[i] -= step * m[i] / (np.sqrt(v[i]) + eps_hat)


def _grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}


# --- training state -----------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    gen_graph: LayerGraph
    disc_graph: LayerGraph
    gen: dict[str, Tensor]
    disc: dict[str, Tensor]
    opt_g: AdamState
    opt_d: AdamState
    rng: SeededRng
    step: int = 0


def build_graphs(config: TrainConfig) -> tuple[LayerGraph, LayerGraph]:
    r = config.resolution
    if config.stage == "mask":
        return build_mask_generator(r, config.noise_side), build_discriminator(config.variant, 3, r)
    return build_unet_generator(r, config.unet_base), build_discriminator(config.variant, 4, r)


def init_state(config: TrainConfig) -> TrainState:
    gen_graph, disc_graph = build_graphs(config)
    seed = config.seed

    def adam():
        return AdamState(config.lr, config.beta1, config.beta2, config.adam_eps)

    return TrainState(config, gen_graph, disc_graph,
                      init_params(gen_graph, SeededRng([seed, *_GEN_INIT])),
                      init_params(disc_graph, SeededRng([seed, *_DISC_INIT])),
                      adam(), adam(), SeededRng([seed, *_LOOP]))


def to_checkpoint(state: TrainState) -> Checkpoint:
    meta = {
        "config": state.config.to_dict(),
        "step": state.step,
        "rng": state.rng.get_state(),
        "generator": state.gen_graph.name,
        "discriminator": state.disc_graph.name,
        "adam_steps": {"G": state.opt_g.step, "D": state.opt_d.step},
    }
    tensors: dict[str, np.ndarray] = {}
    for tag, params, opt in (("G", state.gen, state.opt_g), ("D", state.disc, state.opt_d)):
        for name, p in params.items():
            tensors[f"{tag}/{name}"] = p.data
        for name in params:
            if name in opt.m:
                tensors[f"adam{tag}.m/{name}"] = opt.m[name]
                tensors[f"adam{tag}.v/{name}"] = opt.v[name]
    return Checkpoint(meta, tensors)


def from_checkpoint(ckpt: Checkpoint) -> TrainState:
    try:
        config = TrainConfig.from_dict(ckpt.meta["config"])
        state = init_state(config)
        for tag, params, opt in (("G", state.gen, state.opt_g), ("D", state.disc, state.opt_d)):
            for name, p in params.items():
                arr = ckpt.tensors[f"{tag}/{name}"]
                if arr.shape != p.shape:
                    raise CheckpointError(f"{tag}/{name}: shape {arr.shape} != {p.shape}")
                p.data = arr.copy()
                if f"adam{tag}.m/{name}" in ckpt.tensors:
                    opt.m[name] = ckpt.tensors[f"adam{tag}.m/{name}"].copy()
                    opt.v[name] = ckpt.tensors[f"adam{tag}.v/{name}"].copy()
            opt.step = ckpt.meta["adam_steps"][tag]
        state.rng.set_state(ckpt.meta["rng"])
        state.step = ckpt.meta["step"]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks entry {exc}") from exc
    return state


# --- loops --------------------------------------------------------------------

@dataclass
class TrainResult:
    state: TrainState
    log: list[tuple[int, float, float, float, float]]

    @property
    def checkpoint(self) -> Checkpoint:
        return to_checkpoint(self.state)


def load_training_data(config: TrainConfig) -> PairedDataset:
    if config.manifest:
        return load_dataset(config.manifest, config.resolution)
    return synth_corpus(config.synthetic_n, config.resolution, config.seed)


def _sample_batch(state: TrainState, data: PairedDataset, with_images: bool):
    cfg = state.config
    masks, images = [], []
    for _ in range(cfg.batch_size):
        i = state.rng.integers(len(data))
        m, im = augment(data.masks[i], data.images[i] if with_images else None, cfg.crop_area, state.rng)
        masks.append(m)
        images.append(im)
    return np.stack(masks), (np.stack(images) if with_images else None)


def _disc_targets(state: TrainState) -> tuple[np.ndarray, np.ndarray]:
    side = state.config.resolution // 8
    shape = (state.config.batch_size, 1, side, side)
    return np.ones(shape), np.zeros(shape)


def mask_gan_step(state: TrainState, data: PairedDataset, update_g: bool = True,
                  update_d: bool = True) -> tuple[float, float, float, float]:
    cfg = state.config
    real, _ = _sample_batch(state, data, with_images=False)
    z = Tensor(state.rng.normal((cfg.batch_size, NOISE_CHANNELS, cfg.noise_side, cfg.noise_side)))
    ones, zeros = _disc_targets(state)

    with Tape() as tape_g:
        fake = forward(state.gen_graph, state.gen, z)
        with Tape() as tape_d:
            d_real = forward(state.disc_graph, state.disc, Tensor(real))
            d_fake = forward(state.disc_graph, state.disc, fake.detach())
            loss_d = ad.bce_loss(d_real, ones) + ad.bce_loss(d_fake, zeros)
        if update_d:
            tape_d.backward(loss_d)
            adam_step(state.disc, _grads(state.disc), state.opt_d)
        if update_g:
            loss_g = ad.bce_loss(forward(state.disc_graph, state.disc, fake), ones)
    if update_g:
        tape_g.backward(loss_g)
        adam_step(state.gen, _grads(state.gen), state.opt_g)
        g = loss_g.item()
    else:
        g = ad.bce_loss(forward(state.disc_graph, state.disc, fake.detach()), ones).item()
    state.step += 1
    return loss_d.item(), g, 0.0, g


def cgan_step(state: TrainState, data: PairedDataset, update_g: bool = True,
              update_d: bool = True) -> tuple[float, float, float, float]:
    cfg = state.config
    masks, images = _sample_batch(state, data, with_images=True)
    x, y = Tensor(masks), Tensor(images)
    ones, zeros = _disc_targets(state)

    with Tape() as tape_g:
        fake = forward(state.gen_graph, state.gen, x)
        with Tape() as tape_d:
            d_real = forward(state.disc_graph, state.disc, ad.concat_channels([x, y]))
            d_fake = forward(state.disc_graph, state.disc, ad.concat_channels([x, fake.detach()]))
            loss_d = ad.bce_loss(d_real, ones) + ad.bce_loss(d_fake, zeros)
        if update_d:
            tape_d.backward(loss_d)
            adam_step(state.disc, _grads(state.disc), state.opt_d)
        bce_g = ad.bce_loss(forward(state.disc_graph, state.disc, ad.concat_channels([x, fake])), ones)
        l1 = ad.l1_loss(fake, y)
        total = bce_g + l1 * cfg.l1_weight
    if update_g:
        tape_g.backward(total)
        adam_step(state.gen, _grads(state.gen), state.opt_g)
    state.step += 1
    return loss_d.item(), bce_g.item(), l1.item(), total.item()


def write_loss_log(rows: Iterable[tuple], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for step, *vals in rows:
            w.writerow([step] + [f"{v:.17g}" for v in vals])


def train(config: TrainConfig, out_dir: str | Path | None = None, resume: str | Path | None = None,
          data: PairedDataset | None = None, update_g: bool = True, update_d: bool = True) -> TrainResult:
    """Run ``config.epochs`` total steps of the stage selected by ``config.stage``.

    With ``resume`` the state (parameters, moments, RNG, step) is restored from a
    checkpoint and training continues up to ``config.epochs``. With ``out_dir``
    the run writes ``loss.csv`` (this run's steps), interval checkpoints
    ``ckpt_<step>.spgn`` and ``final.spgn``.
    """
    if resume is not None:
        state = from_checkpoint(load_checkpoint(resume))
        if state.config.stage != config.stage or state.gen_graph != build_graphs(config)[0]:
            raise TrainingError(f"checkpoint {resume} does not match the requested configuration")
        state.config = config
        state.opt_g.lr = state.opt_d.lr = config.lr
    else:
        state = init_state(config)
    data = data if data is not None else load_training_data(config)
    if data.resolution != config.resolution:
        raise TrainingError(f"dataset resolution {data.resolution} != configured {config.resolution}")
    step_fn = mask_gan_step if config.stage == "mask" else cgan_step
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rows = []
    attempt = state.step + 1
    try:
        while state.step < config.epochs:
            attempt = state.step + 1
            losses = step_fn(state, data, update_g, update_d)
            if not all(np.isfinite(losses)):
                raise FloatingPointError(f"non-finite loss {losses}")
            rows.append((state.step, *losses))
            if out is not None and state.step % config.checkpoint_interval == 0:
                save_checkpoint(to_checkpoint(state), out / f"ckpt_{state.step:06d}.spgn")
            if state.step % 100 == 0:
                log.info("step %d loss_d=%.4f loss_g=%.4f", state.step, losses[0], losses[3])
    except FloatingPointError as exc:
        if out is not None:
            write_loss_log(rows, out / "loss.csv")
        raise TrainingError(f"aborted at step {attempt}: {exc}") from exc
    if out is not None:
        write_loss_log(rows, out / "loss.csv")
        save_checkpoint(to_checkpoint(state), out / "final.spgn")
    return TrainResult(state, rows)


def compare_variants(config: TrainConfig, variants: Iterable[str], path: str | Path,
                     data: PairedDataset | None = None,
                     out_dir: str | Path | None = None) -> dict[str, TrainResult]:
    """Train each variant with the same seed and write a long-format loss comparison CSV.

    With ``out_dir`` each variant's run artifacts go to ``out_dir/<variant>``.
    """
    data = data if data is not None else load_training_data(config)
    results = {v: train(dataclasses.replace(config, variant=v),
                        None if out_dir is None else Path(out_dir) / v, data=data)
               for v in variants}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "variant") + LOG_HEADER[1:])
        for v, res in results.items():
            for step, *vals in res.log:
                w.writerow([step, v] + [f"{x:.17g}" for x in vals])
    return results
