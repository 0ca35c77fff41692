"""Alternating five-group optimization, batch pairing, swaps and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from icaps import ops
from icaps.capsnet import MarginLossParams, margin_loss, reconstruction_loss
from icaps.components import ModelState
from icaps.config import Config, LossWeights, ModelConfig, TrainConfig
from icaps.data import Dataset
from icaps.losses import (
    SwapBundle,
    loss_cg,
    loss_concept,
    loss_cr,
    loss_cs,
    loss_gan,
    loss_kl,
    loss_lgp,
    loss_rs,
)
from icaps.tensor import Tensor, backward

log = logging.getLogger(__name__)

# sub-update order within a step: critic/classifier first
UPDATE_ORDER = ("dg", "cc", "e", "g", "dcr")

# loss terms each group descends on
GROUP_TERMS = {
    "cc": ("L_M", "L_recon", "L_concept", "L_CG", "L_CS", "L_RS", "L_CR"),
    "e": ("L_recon", "L_KL", "L_CS", "L_RS", "L_CG"),
    "dg": ("L_DG", "L_CG", "L_CS", "L_LGP"),
    "g": ("L_G", "L_CG", "L_recon", "L_CS", "L_RS", "L_CR"),
    "dcr": ("L_CR",),
}

_TERM_WEIGHT = {
    "L_M": "margin", "L_recon": "recon", "L_concept": "concept", "L_CG": "cg", "L_CS": "cs",
    "L_RS": "rs", "L_CR": "cr", "L_KL": "kl", "L_DG": "dg", "L_LGP": "lgp", "L_G": "g",
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class PairedBatch:
    x_i: np.ndarray
    y_i: np.ndarray
    x_j: np.ndarray
    y_j: np.ndarray

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.x_i, self.x_j])

    @property
    def y(self) -> np.ndarray:
        return np.concatenate([self.y_i, self.y_j])


def pair_batch(ds: Dataset, rng: np.random.Generator, batch_size: int) -> PairedBatch:
    """Two equal sub-batches drawn from two distinct, randomly chosen classes."""
    half = batch_size // 2
    by_class = ds.class_indices()
    a, b = rng.choice(ds.n_classes, size=2, replace=False)
    for j in (a, b):
        if len(by_class[j]) < half:
            raise ValueError(f"class {j} has {len(by_class[j])} samples, need {half}")
    idx_i = rng.choice(by_class[a], size=half, replace=False)
    idx_j = rng.choice(by_class[b], size=half, replace=False)
    return PairedBatch(ds.images[idx_i], ds.labels[idx_i], ds.images[idx_j], ds.labels[idx_j])


@dataclass
class _Forward:
    bundle: SwapBundle
    caps_i: Tensor
    caps_j: Tensor
    post_i: object
    post_j: object


def _forward(state: ModelState, pair: PairedBatch, rng: np.random.Generator | None) -> _Forward:
    x_i, x_j = Tensor(pair.x_i), Tensor(pair.x_j)
    out_i, c_i = state.encode_class_relevant(x_i, pair.y_i)
    out_j, c_j = state.encode_class_relevant(x_j, pair.y_j)
    post_i, r_i = state.encode_residual(x_i, rng)
    post_j, r_j = state.encode_residual(x_j, rng)
    n = x_i.shape[0]
    # one generator pass over all four latent combinations
    imgs = state.generate(ops.concat([c_i, c_j, c_i, c_j]), ops.concat([r_i, r_j, r_j, r_i]))
    parts = [imgs[s * n : (s + 1) * n] for s in range(4)]
    bundle = SwapBundle(x_i, x_j, pair.y_i, pair.y_j, c_i, c_j, r_i, r_j, *parts)
    return _Forward(bundle, out_i.capsules, out_j.capsules, post_i, post_j)


def build_swap_bundle(pair: PairedBatch, state: ModelState, rng=None) -> SwapBundle:
    """Latents of both sub-batches and the two reconstructions plus two swaps."""
    return _forward(state, pair, rng).bundle


def _cr_terms(state: ModelState, pair: PairedBatch, rng: np.random.Generator, weight: float) -> Tensor:
    # traverse one random element of c per sample over [-1, 1]; r fixed at the encoder mean
    x = Tensor(pair.x)
    _, c = state.encode_class_relevant(x, pair.y)
    post, _ = state.encode_residual(x)
    n, dims = c.shape
    changed = rng.integers(0, dims, size=n)
    mask = np.zeros((n, dims), dtype=np.float32)
    mask[np.arange(n), changed] = 1.0
    va, vb = rng.uniform(-1.0, 1.0, size=(2, n, 1))
    keep = c * Tensor(1.0 - mask)
    c_a = keep + Tensor(mask * va)
    c_b = keep + Tensor(mask * vb)
    imgs = state.generate(ops.concat([c_a, c_b]), ops.concat([post.mu, post.mu]))
    probs = state.cr_discriminate(imgs[:n], imgs[n:])
    return loss_cr(probs, changed, weight)


def compute_terms(
    state: ModelState,
    pair: PairedBatch,
    weights: LossWeights,
    names,
    rng: np.random.Generator,
    cr_rng: np.random.Generator,
    cg_form: str = "signed",
) -> dict[str, Tensor]:
    """Evaluate the named loss terms on a fresh forward pass at the current parameters.

    Terms whose weight is zero are skipped.
    """
    names = [n for n in names if getattr(weights, _TERM_WEIGHT[n]) > 0]
    if not names:
        return {}
    fw = _forward(state, pair, rng)
    b = fw.bundle
    n = b.x_i.shape[0]
    terms: dict[str, Tensor] = {}
    need_logits = {"L_CG", "L_CS", "L_DG", "L_G"} & set(names)
    if need_logits:
        x_real = ops.concat([b.x_i, b.x_j])
        fakes = ops.concat([b.x_ci_ri, b.x_cj_rj, b.x_ci_rj, b.x_cj_ri])
        batch = ops.concat([x_real, fakes])
        scores, logits = state.discriminate_and_classify(batch)
        s_real, s_fake = scores[: 2 * n], scores[2 * n :]
        lg_x, lg_ii, lg_ij = logits[: 2 * n], logits[2 * n : 3 * n], logits[4 * n : 5 * n]
    for name in names:
        w = getattr(weights, _TERM_WEIGHT[name])
        if name == "L_M":
            mp = MarginLossParams(weight=w)
            terms[name] = 0.5 * (margin_loss(fw.caps_i, b.y_i, mp) + margin_loss(fw.caps_j, b.y_j, mp))
        elif name == "L_recon":
            recon = ops.concat([b.x_ci_ri, b.x_cj_rj])
            terms[name] = reconstruction_loss(recon, ops.concat([b.x_i, b.x_j]), w)
        elif name == "L_concept":
            terms[name] = loss_concept(b.c_i, b.c_j, w)
        elif name == "L_CG":
            terms[name] = loss_cg(lg_x, np.concatenate([b.y_i, b.y_j]), lg_ii, lg_ij, b.y_i, w, cg_form)
        elif name == "L_CS":
            terms[name] = loss_cs(lg_ii, lg_ij, w)
        elif name == "L_RS":
            post_swap, _ = state.encode_residual(b.x_cj_ri)
            terms[name] = loss_rs(fw.post_i.mu, post_swap.mu, w)
        elif name == "L_CR":
            terms[name] = _cr_terms(state, pair, cr_rng, w)
        elif name == "L_KL":
            mu = ops.concat([fw.post_i.mu, fw.post_j.mu])
            lv = ops.concat([fw.post_i.logvar, fw.post_j.logvar])
            terms[name] = loss_kl(type(fw.post_i)(mu, lv), w)
        elif name == "L_DG":
            terms[name] = loss_gan(s_real, s_fake, weights.g, w)[1]
        elif name == "L_G":
            terms[name] = loss_gan(s_real, s_fake, w, weights.dg)[0]
        elif name == "L_LGP":
            fakes = ops.concat([b.x_ci_ri, b.x_cj_rj, b.x_ci_rj, b.x_cj_ri])
            critic = lambda t: state.discriminate_and_classify(t)[0]  # noqa: E731
            terms[name] = loss_lgp(critic, fakes, w)
    return terms


def update_group(state, group, pair, weights, rng, cr_rng, step: int, cg_form: str = "signed") -> dict[str, float]:
    """One gradient step on ``group`` for the sum of its loss terms."""
    with state.trainable(group):
        opt = state.optimizers[group]
        opt.zero_grad()
        terms = compute_terms(state, pair, weights, GROUP_TERMS[group], rng, cr_rng, cg_form)
        values = {}
        for name, t in terms.items():
            v = t.item()
            if not math.isfinite(v):
                raise TrainingDiverged(f"non-finite {name} ({v}) in {group} update at step {step}")
            values[name] = v
        if terms:
            total = sum(terms.values(), Tensor(0.0))
            backward(total)
            opt.step()
    return values


class Trainer:
    """Owns the random streams and runs the alternating updates."""

    def __init__(
        self,
        state: ModelState,
        train_cfg: TrainConfig,
        weights: LossWeights,
        dataset: Dataset,
        log_path=None,
    ):
        self.state = state
        self.cfg = train_cfg
        self.weights = weights
        self.dataset = dataset
        pair_seed, noise_seed, cr_seed = np.random.SeedSequence(train_cfg.seed).spawn(3)
        self.pair_rng = np.random.default_rng(pair_seed)
        self.noise_rng = np.random.default_rng(noise_seed)
        self.cr_rng = np.random.default_rng(cr_seed)
        self.log_path = Path(log_path) if log_path else None
        self.history: list[dict] = []

    @property
    def steps_per_epoch(self) -> int:
        return max(1, len(self.dataset) // self.cfg.batch_size)

    def next_batch(self) -> PairedBatch:
        return pair_batch(self.dataset, self.pair_rng, self.cfg.batch_size)

    def train_step(self, pair: PairedBatch) -> dict:
        return train_step(
            pair, self.state, self.weights, self.noise_rng, self.cr_rng, self.cfg.critic_steps, self.cfg.cg_loss
        )

    def fit(self, epochs: int | None = None, out_dir=None) -> list[dict]:
        epochs = epochs or self.cfg.epochs
        out = Path(out_dir) if out_dir else None
        if out:
            out.mkdir(parents=True, exist_ok=True)
        for epoch in range(1, epochs + 1):
            for _ in range(self.steps_per_epoch):
                record = self.train_step(self.next_batch())
                record["epoch"] = epoch
                self.history.append(record)
                self._log(record)
            log.info("epoch %d: %s", epoch, _summary(self.history[-self.steps_per_epoch :]))
            if out and (epoch % self.cfg.checkpoint_interval == 0 or epoch == epochs):
                save_checkpoint(self.state, out / f"epoch{epoch:03d}.icap", self.weights)
        if out:
            save_checkpoint(self.state, out / "final.icap", self.weights)
        return self.history

    def _log(self, record: dict) -> None:
        if self.log_path:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


def train_step(pair, state, weights, rng, cr_rng, critic_steps: int = 1, cg_form: str = "signed") -> dict:
    """Run the five sub-updates in order; returns ``{"step", "<group>.<term>": value}``."""
    state.step += 1
    record: dict = {"step": state.step}
    for group in UPDATE_ORDER:
        reps = critic_steps if group == "dg" else 1
        for _ in range(reps):
            values = update_group(state, group, pair, weights, rng, cr_rng, state.step, cg_form)
        for name, v in values.items():
            record[f"{group}.{name}"] = v
        record[f"{group}.total"] = float(sum(values.values()))
    return record


def _summary(records: list[dict]) -> str:
    keys = ("cc.L_M", "cc.L_recon", "dg.L_DG", "dcr.L_CR")
    parts = []
    for k in keys:
        vals = [r[k] for r in records if k in r]
        if vals:
            parts.append(f"{k}={np.mean(vals):.4f}")
    return " ".join(parts)


# --- checkpoints -----------------------------------------------------------------

CKPT_MAGIC = b"ICAP"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointConfigError(CheckpointError):
    pass


def _tensor_records(state: ModelState):
    for name, p in state.named_parameters().items():
        yield f"param/{name}", p.data
    for group, opt in state.optimizers.items():
        names = [f"{group}.{n}" for n, _ in state.modules[group].named_parameters()]
        for name, m, v in zip(names, opt.m, opt.v):
            yield f"adam_m/{name}", m
            yield f"adam_v/{name}", v


def save_checkpoint(state: ModelState, path, weights: LossWeights | None = None) -> None:
    meta = {
        "model": Config(model=state.config).to_dict()["model"],
        "train": Config(train=state.train_config).to_dict()["train"],
        "weights": Config(weights=weights or LossWeights()).to_dict()["weights"],
        "step": state.step,
        "adam_t": {g: opt.t for g, opt in state.optimizers.items()},
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    records = list(_tensor_records(state))
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)) + blob)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            raw = name.encode()
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: corrupt or truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def dims(self, rank: int) -> tuple[int, ...]:
        return struct.unpack(f"<{rank}I", self.take(4 * rank))


def read_checkpoint_meta(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    rd = _Reader(raw, path)
    if rd.take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = rd.u32()
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    try:
        meta = json.loads(rd.take(rd.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt config block") from None
    tensors = {}
    for _ in range(rd.u32()):
        name = rd.take(rd.u32()).decode()
        rank = rd.u32()
        dims = rd.dims(rank)
        count = int(np.prod(dims))
        tensors[name] = np.frombuffer(rd.take(4 * count), "<f4").reshape(dims).astype(np.float32)
    if rd.pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes in checkpoint")
    return meta, tensors


def load_checkpoint(path, config: ModelConfig | None = None):
    """Rebuild a :class:`ModelState` (and its loss weights) bit-exactly from ``path``.

    With ``config`` given, a checkpoint built for a different model raises
    :class:`CheckpointConfigError`.
    """
    meta, tensors = read_checkpoint_meta(path)
    try:
        cfg = Config.from_dict({k: meta[k] for k in ("model", "train", "weights")})
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid config block ({exc})") from None
    if config is not None and Config(model=config).to_dict() != Config(model=cfg.model).to_dict():
        raise CheckpointConfigError(f"{path}: checkpoint model config differs from the requested one")
    state = ModelState(cfg.model, cfg.train)
    params = state.named_parameters()
    expected = {f"param/{n}" for n in params}
    if not expected <= set(tensors):
        raise CheckpointError(f"{path}: missing parameters {sorted(expected - set(tensors))[:3]}")
    for name, p in params.items():
        arr = tensors[f"param/{name}"]
        if arr.shape != p.shape:
            raise CheckpointConfigError(f"{path}: {name} has shape {arr.shape}, model needs {p.shape}")
        p.data = arr.copy()
    for group, opt in state.optimizers.items():
        names = [f"{group}.{n}" for n, _ in state.modules[group].named_parameters()]
        opt.m = [tensors[f"adam_m/{n}"].copy() for n in names]
        opt.v = [tensors[f"adam_v/{n}"].copy() for n in names]
        opt.t = int(meta["adam_t"][group])
    state.step = int(meta["step"])
    return state, cfg.weights
