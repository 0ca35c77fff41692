"""Informativeness, distinctness and explainability measurements on a trained model."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from icaps import ops
from icaps.components import ModelState
from icaps.data import Dataset
from icaps.nn import Adam, Linear, Module
from icaps.tensor import Tensor, no_grad


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def encode_dataset(state: ModelState, ds: Dataset, batch_size: int = 256):
    """Inference-mode latents ``(pred, conf, c, r_mean)`` for every sample."""
    preds, confs, cs, rs = [], [], [], []
    with no_grad():
        for sl in _batches(len(ds), batch_size):
            x = Tensor(ds.images[sl])
            out, c = state.encode_class_relevant(x)
            post, _ = state.encode_residual(x)
            norms = np.linalg.norm(out.capsules.data, axis=-1)
            preds.append(norms.argmax(axis=1))
            confs.append(norms.max(axis=1))
            cs.append(c.data)
            rs.append(post.mu.data)
    return np.concatenate(preds), np.concatenate(confs), np.concatenate(cs), np.concatenate(rs)


def accuracy_c(state: ModelState, ds: Dataset) -> float:
    """Fraction of samples whose longest class capsule matches the label."""
    if len(ds) == 0:
        raise ValueError("accuracy on an empty dataset")
    preds = encode_dataset(state, ds)[0]
    return float(np.mean(preds == ds.labels))


# --- probes ----------------------------------------------------------------------


@dataclass
class ProbeConfig:
    hidden: int = 64
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


class _MLP(Module):
    def __init__(self, rng, n_in: int, hidden: int, n_out: int):
        self.fc1 = Linear(rng, n_in, hidden)
        self.fc2 = Linear(rng, hidden, n_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(x)))


def probe_accuracy(train_x, train_y, test_x, test_y, n_classes: int, cfg: ProbeConfig | None = None) -> float:
    """Train a one-hidden-layer classifier on ``train_x`` and report test accuracy.

    Features are standardized with the training statistics.
    """
    cfg = cfg or ProbeConfig()
    train_x = np.asarray(train_x, dtype=np.float64).reshape(len(train_y), -1)
    test_x = np.asarray(test_x, dtype=np.float64).reshape(len(test_y), -1)
    mu, sd = train_x.mean(axis=0), train_x.std(axis=0)
    sd[sd < 1e-8] = 1.0
    train_x, test_x = (train_x - mu) / sd, (test_x - mu) / sd
    rng = np.random.default_rng(cfg.seed)
    net = _MLP(rng, train_x.shape[1], cfg.hidden, n_classes)
    opt = Adam(net.parameters(), lr=cfg.lr)
    y = np.asarray(train_y, dtype=np.int64)
    onehot = np.eye(n_classes)[y]
    for _ in range(cfg.epochs):
        order = rng.permutation(len(y))
        for sl in _batches(len(y), cfg.batch_size):
            idx = order[sl]
            opt.zero_grad()
            logp = ops.log_softmax(net(Tensor(train_x[idx])), axis=-1)
            loss = -ops.mean(ops.sum(logp * Tensor(onehot[idx]), axis=1))
            loss.backward()
            opt.step()
    with no_grad():
        pred = net(Tensor(test_x)).data.argmax(axis=1)
    return float(np.mean(pred == np.asarray(test_y)))


@dataclass
class ProbeResult:
    accuracy: float
    chance: float
    c_accuracy: float | None = None


def residual_probe(
    state: ModelState, train: Dataset, test: Dataset, cfg: ProbeConfig | None = None, with_c: bool = False
) -> ProbeResult:
    """Label accuracy of a small classifier trained on frozen residual means.

    With ``with_c`` the same probe is also trained on ``c`` for comparison.
    """
    k = train.n_classes
    _, _, c_tr, r_tr = encode_dataset(state, train)
    _, _, c_te, r_te = encode_dataset(state, test)
    acc = probe_accuracy(r_tr, train.labels, r_te, test.labels, k, cfg)
    c_acc = probe_accuracy(c_tr, train.labels, c_te, test.labels, k, cfg) if with_c else None
    return ProbeResult(acc, 1.0 / k, c_acc)


# --- mutual information ------------------------------------------------------------


def equal_frequency_bins(values, bins: int) -> np.ndarray:
    """Bin index per value using empirical quantile edges; tied values share a bin."""
    if bins < 2:
        raise ValueError("need at least 2 bins")
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    edges = np.quantile(v, np.linspace(0.0, 1.0, bins + 1)[1:-1])
    return np.searchsorted(edges, v, side="right")


def mutual_information(values, labels, bins: int = 20) -> float:
    """Plug-in MI in nats between binned ``values`` and discrete ``labels``."""
    labels = np.asarray(labels).reshape(-1)
    b = equal_frequency_bins(values, bins)
    if b.shape != labels.shape:
        raise ValueError(f"{b.size} values for {labels.size} labels")
    _, bi = np.unique(b, return_inverse=True)
    _, yi = np.unique(labels, return_inverse=True)
    joint = np.zeros((bi.max() + 1, yi.max() + 1))
    np.add.at(joint, (bi, yi), 1.0)
    return mi_from_table(joint)


def mi_from_table(joint) -> float:
    """MI of a (count or probability) contingency table, in nats."""
    p = np.asarray(joint, dtype=np.float64)
    p = p / p.sum()
    outer = p.sum(axis=1, keepdims=True) * p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(max(0.0, np.sum(p[nz] * np.log(p[nz] / outer[nz]))))


@dataclass
class MIEstimate:
    c: np.ndarray
    r: np.ndarray
    bins: int

    @property
    def mean_c(self) -> float:
        return float(self.c.mean())

    @property
    def mean_r(self) -> float:
        return float(self.r.mean())


def mi_report(state: ModelState, ds: Dataset, bins: int = 20) -> MIEstimate:
    """Per-dimension MI of ``c`` and of the residual mean against the labels."""
    _, _, c, r = encode_dataset(state, ds)
    mi = lambda z: np.array([mutual_information(z[:, d], ds.labels, bins) for d in range(z.shape[1])])  # noqa: E731
    return MIEstimate(mi(c), mi(r), bins)


# --- traversals and distinctness ---------------------------------------------------


@dataclass
class TraversalGrid:
    images: np.ndarray  # [L, S, c, h, w]
    elements: np.ndarray  # [L]
    values: np.ndarray  # [S]

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[:2]


def traversal_grid(state: ModelState, x, steps: int = 8, values=None) -> TraversalGrid:
    """Vary each element of ``c`` over ``[-1, 1]`` with ``r`` fixed at its posterior mean."""
    if steps < 2:
        raise ValueError("a traversal needs at least 2 steps")
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    vals = np.linspace(-1.0, 1.0, steps) if values is None else np.asarray(values, dtype=np.float64)
    with no_grad():
        _, c = state.encode_class_relevant(Tensor(x))
        post, _ = state.encode_residual(Tensor(x))
        dims = c.shape[1]
        cs = np.repeat(c.data, dims * len(vals), axis=0)
        cs = cs.reshape(dims, len(vals), dims)
        for l in range(dims):
            cs[l, :, l] = vals
        rs = np.repeat(post.mu.data, dims * len(vals), axis=0)
        imgs = state.generate(Tensor(cs.reshape(-1, dims)), Tensor(rs)).data
    return TraversalGrid(imgs.reshape((dims, len(vals)) + imgs.shape[1:]), np.arange(dims), vals)


def _abs_cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return float(min(1.0, abs(np.dot(a, b)) / (na * nb)))


def distinctness_score(grid: TraversalGrid | np.ndarray) -> float:
    """Largest |cosine| between any two rows' flattened step-to-step pixel deltas.

    Lower is more distinct.  A row whose deltas are all zero overlaps every row.
    """
    images = grid.images if isinstance(grid, TraversalGrid) else np.asarray(grid)
    if images.shape[1] < 2:
        raise ValueError("a traversal needs at least 2 steps")
    if images.shape[0] < 2:
        return 0.0
    deltas = np.diff(images.astype(np.float64), axis=1).reshape(images.shape[0], -1)
    return max(_abs_cos(deltas[a], deltas[b]) for a, b in itertools.combinations(range(len(deltas)), 2))


def mean_distinctness(state: ModelState, images: np.ndarray, steps: int = 8) -> float:
    """Distinctness averaged over traversals from several base samples."""
    return float(np.mean([distinctness_score(traversal_grid(state, x, steps)) for x in images]))


def cr_recovery_accuracy(state: ModelState, ds: Dataset, n: int = 500, seed: int = 0) -> float:
    """How often D_CR's argmax names the element changed between two generated images.

    Pairs are built like the training draws: one random element per sample set to
    two values from ``U[-1, 1]``, ``r`` at the posterior mean.  Chance is ``1 / L``.
    """
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(ds), size=min(n, len(ds)), replace=False)
    hits = 0
    with no_grad():
        for b in _batches(len(idx), 256):
            x = Tensor(ds.images[idx[b]])
            _, c = state.encode_class_relevant(x, ds.labels[idx[b]])
            post, _ = state.encode_residual(x)
            m, dims = c.shape
            changed = rng.integers(0, dims, size=m)
            va, vb = rng.uniform(-1.0, 1.0, size=(2, m))
            ca, cb = c.data.copy(), c.data.copy()
            ca[np.arange(m), changed] = va
            cb[np.arange(m), changed] = vb
            xa = state.generate(Tensor(ca), post.mu)
            xb = state.generate(Tensor(cb), post.mu)
            probs = state.cr_discriminate(xa, xb).data
            hits += int(np.sum(np.argmax(probs, axis=1) == changed))
    return hits / len(idx)


# --- swaps and explanations ----------------------------------------------------------


@dataclass
class SwapResult:
    """Reconstructions and swaps for a pair, with the latents that produced them."""

    x_ci_ri: np.ndarray
    x_cj_rj: np.ndarray
    x_cj_ri: np.ndarray
    x_ci_rj: np.ndarray
    latents: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def images(self) -> list[np.ndarray]:
        return [self.x_ci_ri, self.x_cj_rj, self.x_cj_ri, self.x_ci_rj]


def swap_grid(state: ModelState, x_i, x_j, y_i=None, y_j=None) -> SwapResult:
    """Generate ``(c_i, r_i), (c_j, r_j), (c_j, r_i), (c_i, r_j)`` for one or more pairs.

    Without labels the predicted classes are used; pairs of the same class are rejected.
    """
    x_i, x_j = np.asarray(x_i, dtype=np.float32), np.asarray(x_j, dtype=np.float32)
    if x_i.ndim == 3:
        x_i, x_j = x_i[None], x_j[None]
    with no_grad():
        out_i, c_i = state.encode_class_relevant(Tensor(x_i), y_i)
        out_j, c_j = state.encode_class_relevant(Tensor(x_j), y_j)
        lab_i = np.asarray(y_i).reshape(-1) if y_i is not None else out_i.predictions()
        lab_j = np.asarray(y_j).reshape(-1) if y_j is not None else out_j.predictions()
        if np.any(lab_i == lab_j):
            raise ValueError("swap pairs must come from different classes")
        _, r_i = state.encode_residual(Tensor(x_i))
        _, r_j = state.encode_residual(Tensor(x_j))
        n = len(x_i)
        cs = np.concatenate([c_i.data, c_j.data, c_j.data, c_i.data])
        rs = np.concatenate([r_i.data, r_j.data, r_i.data, r_j.data])
        imgs = state.generate(Tensor(cs), Tensor(rs)).data
    parts = [imgs[s * n : (s + 1) * n] for s in range(4)]
    latents = {
        "ci_ri": (c_i.data, r_i.data),
        "cj_rj": (c_j.data, r_j.data),
        "cj_ri": (c_j.data, r_i.data),
        "ci_rj": (c_i.data, r_j.data),
    }
    return SwapResult(*parts, latents=latents)


def swap_class_agreement(state: ModelState, ds: Dataset, n_pairs: int = 200, seed: int = 0) -> float:
    """Fraction of cross-class pairs where the shared classifier labels ``G(c_i, r_j)`` as ``y_i``."""
    rng = np.random.default_rng(seed)
    idx_i = rng.integers(0, len(ds), size=4 * n_pairs)
    idx_j = rng.integers(0, len(ds), size=4 * n_pairs)
    keep = ds.labels[idx_i] != ds.labels[idx_j]
    idx_i, idx_j = idx_i[keep][:n_pairs], idx_j[keep][:n_pairs]
    if len(idx_i) < n_pairs:
        raise ValueError("not enough cross-class pairs in the dataset")
    res = swap_grid(state, ds.images[idx_i], ds.images[idx_j], ds.labels[idx_i], ds.labels[idx_j])
    with no_grad():
        _, logits = state.discriminate_and_classify(Tensor(res.x_ci_rj))
    return float(np.mean(logits.data.argmax(axis=1) == ds.labels[idx_i]))


@dataclass
class ExplanationRecord:
    sample_id: int
    predicted: int
    confidence: float
    concepts: list[float]
    names: list[str] | None = None

    def to_dict(self) -> dict:
        out = {
            "sample_id": self.sample_id,
            "predicted_class": self.predicted,
            "confidence": self.confidence,
            "concepts": self.concepts,
        }
        if self.names is not None:
            out["concept_names"] = self.names
        return out


def explain_sample(state: ModelState, x, sample_id: int = 0, names: list[str] | None = None) -> ExplanationRecord:
    """Predicted class, its capsule length and the winning capsule's concept values."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    with no_grad():
        out, c = state.encode_class_relevant(Tensor(x))
    norms = np.linalg.norm(out.capsules.data[0], axis=-1)
    pred = int(norms.argmax())
    concepts = [float(v) for v in c.data[0]]
    if names is not None and len(names) != len(concepts):
        raise ValueError(f"{len(names)} concept names for {len(concepts)} concepts")
    return ExplanationRecord(sample_id, pred, float(norms[pred]), concepts, names)
