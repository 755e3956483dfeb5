"""Desk experiment: simulate, label, pre-train 2-path and 1-path, then probe both.

    python scripts/run_desk.py --out runs/desk --seed 0 [section.key=value ...]

Writes every stage's artifacts under --out (same layout as the CLI) and a
summary.json with the probe reports and loss-curve statistics.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import time
from pathlib import Path

import numpy as np

from shubert.config import RunConfig, apply_overrides
from shubert.evalsuite import invariance_metric, selectivity_probe
from shubert.mixsim import make_dataset, write_manifest
from shubert.model import build_model
from shubert.numerics import configure_threads
from shubert.quantizer import build_labels, label_entropy, label_examples, write_codebook, write_label_store
from shubert.trainer import run_pretrain

log = logging.getLogger("desk")


def probe(model, cfg, evalset, store) -> dict:
    p = cfg.probe
    rep = selectivity_probe(model, evalset, store.labels, store.interferer_labels, p.mask_seed, p.p_start,
                            p.span_length)
    rep.mean_view_cosine = invariance_metric(model, evalset)
    out = rep.to_dict()
    out["gap"] = out["target_masked_accuracy"] - out["interferer_masked_accuracy"]
    return out


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seed", type=int, required=True)
    ap.add_argument("--skip-one-path", action="store_true")
    ap.add_argument("overrides", nargs="*")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    configure_threads()

    cfg = apply_overrides(RunConfig(), args.overrides)
    cfg.seed = cfg.train.seed = args.seed
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfg.to_toml())

    t0 = time.perf_counter()
    train = make_dataset(cfg.mix, cfg.seed, cfg.mix.n_train, "train", cfg.frontend)
    evalset = make_dataset(cfg.mix, cfg.seed, cfg.mix.n_eval, "eval", cfg.frontend, mixture_type="two_talker")
    write_manifest(train, out / "data" / "train")
    write_manifest(evalset, out / "data" / "eval")
    log.info("data: %.1fs", time.perf_counter() - t0)

    q = cfg.quantizer
    label_model = build_model(cfg, q.seed)
    store, cb = build_labels(train, label_model, q.layer_index, q.k, q.max_iters, q.max_frames, q.seed)
    eval_store = label_examples(label_model, evalset, cb, q.layer_index)
    write_codebook(cb, out / "labels" / "codebook.bin")
    write_label_store(store, out / "labels" / "labels.jsonl")
    write_label_store(eval_store, out / "eval_labels" / "labels.jsonl")
    log.info("labels: entropy %.3f nats (max %.3f)", label_entropy(store.labels, q.k), np.log(q.k))

    summary = {"config_digest": cfg.digest(), "untrained": probe(build_model(cfg, cfg.train.seed), cfg, evalset,
                                                                  eval_store)}
    variants = [("two_path", False)] + ([] if args.skip_one_path else [("one_path", True)])
    for name, one_path in variants:
        c = copy.deepcopy(cfg)
        c.train.one_path = one_path
        t = time.perf_counter()

        def progress(m):
            if m["step"] % 100 == 0:
                log.info("%s step %d total %.4f ce_a %.4f cc_inv %.4f", name, m["step"], m["total"], m["ce_a"],
                         m["cc_inv"])

        state, hist = run_pretrain(c, train, store.labels, out_dir=out / name, on_step=progress)
        total = [m["total"] for m in hist]
        n = max(1, len(total) // 10)
        summary[name] = {
            "train_seconds": time.perf_counter() - t,
            "loss_first_10pct": float(np.mean(total[:n])),
            "loss_last_10pct": float(np.mean(total[-n:])),
            "probe": probe(state.model, c, evalset, eval_store),
        }
        log.info("%s: %s", name, json.dumps(summary[name]["probe"]))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
