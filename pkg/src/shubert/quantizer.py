"""Offline k-means pseudo-labels for masked prediction.

Features are taken from an intermediate encoder layer on clean speech only,
clustered with Lloyd's algorithm (k-means++ seeding), and every frame is
assigned its nearest centroid.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch


@dataclass
class Codebook:
    centroids: np.ndarray
    feature_source: dict = field(default_factory=dict)
    objective_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def sq_distances(X: np.ndarray, C: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Exact squared Euclidean distances, N x K (no expansion trick, so ties stay ties)."""
    out = np.empty((X.shape[0], C.shape[0]))
    for s in range(0, X.shape[0], chunk):
        diff = X[s:s + chunk, None, :] - C[None, :, :]
        out[s:s + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def kmeans_pp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[int(rng.integers(len(X)))]]
    d2 = sq_distances(X, np.array(centers))[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(len(X)))
        else:
            idx = int(rng.choice(len(X), p=d2 / total))
        centers.append(X[idx])
        d2 = np.minimum(d2, sq_distances(X, X[idx][None])[:, 0])
    return np.array(centers, dtype=np.float64)


def fit_kmeans(features: np.ndarray, K: int, max_iters: int = 100, seed: int = 0, tol: float = 1e-6) -> Codebook:
    """Lloyd's algorithm; raises if the objective ever increases."""
    X = np.asarray(features, dtype=np.float64)
    N = X.shape[0]
    if K < 2:
        raise ValueError("K must be at least 2")
    if N < K:
        raise ValueError(f"need at least K={K} points, got {N}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    rng = np.random.default_rng(seed)
    C = kmeans_pp(X, K, rng)
    history: list[float] = []
    for _ in range(max_iters):
        d = sq_distances(X, C)
        assign = d.argmin(axis=1)
        best = d[np.arange(N), assign]
        obj = float(best.sum())
        if history and obj > history[-1] * (1 + 1e-12) + 1e-12:
            raise RuntimeError(f"k-means objective increased: {history[-1]} -> {obj}")
        history.append(obj)
        if len(history) > 1 and abs(history[-2] - obj) <= tol * max(abs(history[-2]), 1e-300):
            break
        if obj == 0.0:
            break
        newC = C.copy()
        counts = np.bincount(assign, minlength=K)
        sums = np.zeros_like(C)
        np.add.at(sums, assign, X)
        nonempty = counts > 0
        newC[nonempty] = sums[nonempty] / counts[nonempty, None]
        taken = set()
        for k in np.flatnonzero(~nonempty):
            # re-seed an empty cluster at the point farthest from its centroid
            order = np.argsort(-best, kind="stable")
            far = next(int(i) for i in order if int(i) not in taken)
            taken.add(far)
            newC[k] = X[far]
            best[far] = 0.0
        C = newC
    return Codebook(C, {}, history)


def assign_labels(features: np.ndarray, cb: Codebook) -> np.ndarray:
    """Nearest centroid per row; ties go to the lowest centroid index."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cb.dim:
        raise ValueError(f"feature dim {X.shape[-1]} does not match codebook dim {cb.dim}")
    return sq_distances(X, cb.centroids).argmin(axis=1).astype(np.int64)


def objective(features: np.ndarray, cb: Codebook) -> float:
    return float(sq_distances(np.asarray(features, dtype=np.float64), cb.centroids).min(axis=1).sum())


# --- feature extraction -----------------------------------------------------

@torch.no_grad()
def layer_features(model, waves: Sequence[np.ndarray], layer_index: int, batch_size: int = 16,
                   positions: bool | None = None) -> list[np.ndarray]:
    """Unmasked layer-``layer_index`` features of each waveform, self-enrolled."""
    out: list[np.ndarray | None] = [None] * len(waves)
    order = sorted(range(len(waves)), key=lambda i: len(waves[i]))
    dtype = model.dtype
    if positions is None:
        positions = model.cfg.quantizer.label_positions
    for s in range(0, len(order), batch_size):
        idx = order[s:s + batch_size]
        ws = [np.asarray(waves[i]) for i in idx]
        L = max(len(w) for w in ws)
        wav = torch.zeros(len(ws), L, dtype=dtype)
        for j, w in enumerate(ws):
            wav[j, : len(w)] = torch.from_numpy(w.astype(np.float64)).to(dtype)
        T = [model.n_frames(len(w)) for w in ws]
        valid = torch.zeros(len(ws), max(T), dtype=torch.bool)
        for j, t in enumerate(T):
            valid[j, :t] = True
        lengths = torch.tensor([len(w) for w in ws])
        e = model.embedder(wav, lengths)
        feats = model.encode_view(wav, valid, None, e, upto=layer_index, positions=positions)
        for j, i in enumerate(idx):
            out[i] = feats[j, : T[j]].double().numpy()
    return out


@dataclass
class LabelStore:
    labels: dict[str, np.ndarray]
    interferer_labels: dict[str, np.ndarray] = field(default_factory=dict)

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.labels):
            h.update(k.encode())
            h.update(self.labels[k].astype("<i8").tobytes())
            if k in self.interferer_labels:
                h.update(self.interferer_labels[k].astype("<i8").tobytes())
        return h.hexdigest()


def fit_codebook(model, examples, layer_index: int, K: int, max_iters: int = 100,
                 max_frames: int = 20000, seed: int = 0) -> Codebook:
    feats = layer_features(model, [ex.clean.samples for ex in examples], layer_index)
    X = np.concatenate(feats)
    rng = np.random.default_rng(seed)
    if len(X) > max_frames:
        X = X[np.sort(rng.choice(len(X), max_frames, replace=False))]
    cb = fit_kmeans(X, K, max_iters, seed)
    # centroids are stored as float32; label with exactly what gets written
    cb.centroids = cb.centroids.astype(np.float32).astype(np.float64)
    cb.feature_source = {"layer_index": layer_index, "seed": seed, "n_fit_frames": int(len(X))}
    return cb


def label_examples(model, examples, cb: Codebook, layer_index: int) -> LabelStore:
    """Labels for each clean target and, where present, each view-A interferer source."""
    feats = layer_features(model, [ex.clean.samples for ex in examples], layer_index)
    store = LabelStore({})
    for ex, f in zip(examples, feats):
        u = assign_labels(f, cb)
        if len(u) != len(ex.phone_labels):
            raise ValueError(f"example {ex.id}: {len(u)} frames but {len(ex.phone_labels)} phone labels")
        store.labels[ex.id] = u
    with_int = [ex for ex in examples if ex.interferer is not None]
    if with_int:
        ifeats = layer_features(model, [ex.interferer.samples for ex in with_int], layer_index)
        for ex, f in zip(with_int, ifeats):
            store.interferer_labels[ex.id] = assign_labels(f, cb)
    return store


def build_labels(examples, model, layer_index: int, K: int, max_iters: int = 100,
                 max_frames: int = 20000, seed: int = 0) -> tuple[LabelStore, Codebook]:
    cb = fit_codebook(model, examples, layer_index, K, max_iters, max_frames, seed)
    return label_examples(model, examples, cb, layer_index), cb


def label_entropy(labels: Mapping[str, np.ndarray], K: int) -> float:
    counts = np.bincount(np.concatenate(list(labels.values())), minlength=K).astype(float)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


# --- file formats -----------------------------------------------------------

def write_label_store(store: LabelStore, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for k in store.labels:
            rec = {"id": k, "labels": store.labels[k].tolist()}
            if k in store.interferer_labels:
                rec["interferer_labels"] = store.interferer_labels[k].tolist()
            fh.write(json.dumps(rec) + "\n")
    return path


def read_label_store(path: str | Path) -> LabelStore:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"label store not found: {path}")
    store = LabelStore({})
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        store.labels[r["id"]] = np.asarray(r["labels"], dtype=np.int64)
        if "interferer_labels" in r:
            store.interferer_labels[r["id"]] = np.asarray(r["interferer_labels"], dtype=np.int64)
    return store


def write_codebook(cb: Codebook, path: str | Path) -> Path:
    """4-byte little-endian header length, JSON header, then K*D little-endian float32 centroids."""
    path = Path(path)
    header = dict(cb.feature_source)
    header.update({"K": cb.k, "D_f": cb.dim, "dtype": "<f4"})
    blob = json.dumps(header, sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(cb.centroids.astype("<f4").tobytes())
    return path


def read_codebook(path: str | Path) -> Codebook:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<I", raw[:4])
    header = json.loads(raw[4:4 + n])
    C = np.frombuffer(raw[4 + n:], dtype="<f4").reshape(header["K"], header["D_f"]).astype(np.float64)
    src = {k: v for k, v in header.items() if k not in ("K", "D_f", "dtype")}
    return Codebook(C, src)
