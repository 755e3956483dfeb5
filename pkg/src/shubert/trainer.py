"""Dual-path pre-training loop, checkpoints and the metrics log."""
from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .config import RunConfig, TrainConfig, apply_dict
from .model import SHuBERT, build_model, forward_losses, make_batch

log = logging.getLogger(__name__)

METRIC_KEYS = ("step", "total", "ce_a", "ce_b", "cc_inv", "cc_red", "grad_norm", "lr", "wall_ms")


@dataclass
class TrainState:
    model: SHuBERT
    optimizer: torch.optim.Optimizer
    cfg: RunConfig
    step: int = 0
    skipped: int = 0


def make_optimizer(model: SHuBERT, tc: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(), lr=tc.lr, betas=(tc.beta1, tc.beta2), eps=tc.adam_eps,
        weight_decay=tc.weight_decay, foreach=False,
    )


def init_state(cfg: RunConfig, dtype=torch.float32) -> TrainState:
    model = build_model(cfg, cfg.train.seed, dtype)
    return TrainState(model, make_optimizer(model, cfg.train), cfg)


def lr_at(step: int, tc: TrainConfig) -> float:
    """Linear warmup over ``warmup_steps``, then constant."""
    if tc.warmup_steps > 0 and step < tc.warmup_steps:
        return tc.lr * (step + 1) / tc.warmup_steps
    return tc.lr


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 11, step])
    return rng.choice(n, size=min(batch_size, n), replace=False)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 23, step])


def train_step(state: TrainState, batch_examples: Sequence, labels: Mapping[str, np.ndarray]) -> dict:
    """One optimizer update on Eq.-style total loss; non-finite steps leave state untouched."""
    cfg, tc = state.cfg, state.cfg.train
    model, opt = state.model, state.optimizer
    t0 = time.perf_counter()
    rng = step_rng(tc.seed, state.step)
    lr = lr_at(state.step, tc)
    for g in opt.param_groups:
        g["lr"] = lr
    model.train()
    batch = make_batch(batch_examples, labels, cfg, rng, dtype=model.dtype)
    opt.zero_grad(set_to_none=True)
    try:
        out = forward_losses(model, batch, rng, one_path=tc.one_path)
        out.losses.total.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), tc.clip_norm if tc.clip_norm > 0 else float("inf"))
        if not torch.isfinite(grad_norm):
            raise FloatingPointError("non-finite gradient norm")
    except FloatingPointError as exc:
        log.warning("step %d skipped: %s", state.step, exc)
        opt.zero_grad(set_to_none=True)
        state.skipped += 1
        return {"step": state.step, "skipped": True, "reason": str(exc)}
    opt.step()
    metrics = {"step": state.step, **out.losses.as_floats(), "grad_norm": float(grad_norm), "lr": lr}
    state.step += 1
    metrics["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
    return metrics


def check_alignment(examples: Sequence, labels: Mapping[str, np.ndarray], model: SHuBERT) -> None:
    bad = []
    for ex in examples:
        u = labels.get(ex.id)
        if u is None or len(u) != model.n_frames(len(ex.clean)):
            bad.append(ex.id)
    if bad:
        raise ValueError(f"manifest/label mismatch for {len(bad)} examples: {bad[:10]}")


def run_pretrain(
    cfg: RunConfig,
    examples: Sequence,
    labels: Mapping[str, np.ndarray],
    out_dir: str | Path | None = None,
    state: TrainState | None = None,
    steps: int | None = None,
    on_step: Callable[[dict], None] | None = None,
    dtype=torch.float32,
) -> tuple[TrainState, list[dict]]:
    """Train up to ``steps`` total steps (default ``cfg.train.steps``), resuming from ``state``.

    With ``out_dir``, appends to ``metrics.jsonl`` (dropping rows at or after
    the starting step left by an earlier attempt), writes ``step_XXXXXX.ckpt``
    every ``checkpoint_every`` steps and always writes ``final.ckpt``.
    """
    tc = cfg.train
    state = state or init_state(cfg, dtype)
    target = tc.steps if steps is None else steps
    check_alignment(examples, labels, state.model)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.toml").write_text(cfg.to_toml())
        log_path = out / "metrics.jsonl"
        if log_path.exists():
            # rows from a previous attempt past the resume point are replaced, so
            # re-running a command reproduces the same log
            keep = [r for r in log_path.read_text().splitlines() if r and json.loads(r)["step"] < state.step]
            log_path.write_text("".join(r + "\n" for r in keep))
        log_fh = log_path.open("a")
    history: list[dict] = []
    try:
        if out is not None and state.step == 0:
            save_checkpoint(state, out / "step_000000.ckpt")
        while state.step < target:
            idx = batch_indices(tc.seed, state.step, len(examples), tc.batch_size)
            m = train_step(state, [examples[i] for i in idx], labels)
            if m.get("skipped"):
                if state.skipped > 100:
                    raise RuntimeError("too many skipped steps")
                # the skipped draw is retried with the next step's seed
                state.step += 1
                continue
            history.append(m)
            if log_fh is not None:
                log_fh.write(json.dumps({k: m[k] for k in METRIC_KEYS}) + "\n")
                log_fh.flush()
            if on_step is not None:
                on_step(m)
            if out is not None and tc.checkpoint_every > 0 and state.step % tc.checkpoint_every == 0:
                save_checkpoint(state, out / f"step_{state.step:06d}.ckpt")
        if out is not None:
            save_checkpoint(state, out / "final.ckpt")
    finally:
        if log_fh is not None:
            log_fh.close()
    return state, history


# --- checkpoint format --------------------------------------------------------
# 8-byte little-endian header length, UTF-8 JSON header, then raw little-endian
# tensor payloads at the offsets listed in the header.

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_TORCH = {v: k for k, v in _DTYPES.items()}


def _state_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    tensors = {f"model.{k}": v for k, v in state.model.state_dict().items()}
    names = {id(p): n for n, p in state.model.named_parameters()}
    for p, s in state.optimizer.state.items():
        for k, v in s.items():
            tensors[f"optim.{names[id(p)]}.{k}"] = torch.as_tensor(v)
    return tensors


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    tensors = _state_tensors(state)
    entries, payload, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().contiguous()
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": _DTYPES[t.dtype],
                        "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = {
        "format": "shubert-ckpt/1",
        "step": state.step,
        "skipped": state.skipped,
        "config": state.cfg.to_dict(),
        "config_digest": state.cfg.digest(),
        "rng": {"seed": state.cfg.train.seed, "next_step": state.step},
        "tensors": entries,
    }
    blob = json.dumps(header).encode()
    with path.open("wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in payload:
            fh.write(raw)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n])
    base = 8 + n
    tensors = {}
    for e in header["tensors"]:
        buf = raw[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=e["dtype"]).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)
    return header, tensors


def config_from_header(header: dict) -> RunConfig:
    data = {k: v for k, v in header["config"].items()}
    return apply_dict(RunConfig(), data)


def load_checkpoint(path: str | Path, cfg: RunConfig | None = None) -> TrainState:
    """Rebuild model and optimizer from a checkpoint; ``cfg`` overrides the stored run config
    (only fields that do not change parameter shapes should differ)."""
    header, tensors = read_checkpoint(path)
    cfg = cfg or config_from_header(header)
    model_sd = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    dtype = next(iter(model_sd.values())).dtype
    model = build_model(cfg, cfg.train.seed, dtype)
    model.load_state_dict(model_sd)
    opt = make_optimizer(model, cfg.train)
    by_name = dict(model.named_parameters())
    for k, v in tensors.items():
        if not k.startswith("optim."):
            continue
        pname, slot = k[len("optim."):].rsplit(".", 1)
        opt.state[by_name[pname]][slot] = v
    return TrainState(model, opt, cfg, header["step"], header.get("skipped", 0))
