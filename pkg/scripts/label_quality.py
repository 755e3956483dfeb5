"""How much do stage-0 pseudo-labels know about speaker, phone and position?

    python scripts/label_quality.py --n 150 [section.key=value ...]

Prints the empirical mutual information (nats) between cluster ids and each
ground-truth factor of the synthetic corpus.
"""
from __future__ import annotations

import argparse

import numpy as np

from shubert.config import RunConfig, apply_overrides
from shubert.mixsim import make_dataset
from shubert.model import build_model
from shubert.numerics import configure_threads
from shubert.quantizer import build_labels, label_entropy


def mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= joint.sum()
    pa, pb = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=150)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("overrides", nargs="*")
    args = ap.parse_args()
    configure_threads()
    cfg = apply_overrides(RunConfig(), args.overrides)
    examples = make_dataset(cfg.mix, args.seed, args.n, "train", cfg.frontend)
    q = cfg.quantizer
    store, _ = build_labels(examples, build_model(cfg, q.seed), q.layer_index, q.k, q.max_iters, q.max_frames, q.seed)
    U = np.concatenate([store.labels[ex.id] for ex in examples])
    phone = np.concatenate([ex.phone_labels for ex in examples])
    speaker = np.concatenate([np.full(len(ex.phone_labels), ex.target_speaker) for ex in examples])
    position = np.concatenate([np.arange(len(ex.phone_labels)) for ex in examples])
    print(f"label entropy  {label_entropy(store.labels, q.k):.3f} (max {np.log(q.k):.3f})")
    print(f"MI speaker     {mutual_information(U, speaker):.3f}")
    print(f"MI phone       {mutual_information(U, phone):.3f}")
    print(f"MI position    {mutual_information(U, position):.3f}")
    print(f"MI phone+spk   {mutual_information(U, phone * 1000 + speaker):.3f}")


if __name__ == "__main__":
    main()
