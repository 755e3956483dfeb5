"""Command line entry point: simulate | labels | pretrain | probe | gradcheck.

Exit codes: 0 success, 1 validation or threshold failure, 2 usage error
(bad flags, unknown config keys, missing inputs).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from .config import ConfigError, RunConfig, apply_dict, apply_overrides, tomllib
from .numerics import configure_threads

log = logging.getLogger("shubert")

THRESHOLD_KEYS = {
    "min_target_accuracy": ("target_masked_accuracy", "min"),
    "max_interferer_accuracy": ("interferer_masked_accuracy", "max"),
    "min_gap": ("gap", "min"),
    "min_swap_consistency": ("swap_consistency", "min"),
    "min_view_cosine": ("mean_view_cosine", "min"),
}


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--config", type=Path, help="TOML config file")
    p.add_argument("--seed", type=int, help="seed (or top-level `seed` in the config file)")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("overrides", nargs="*", metavar="section.key=value", help="config overrides")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shubert", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write train/eval mixture manifests")
    _common(p, out_required=True)

    p = sub.add_parser("labels", help="fit k-means on layer features and write pseudo-labels")
    _common(p, out_required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", help="feature model checkpoint (default: random-init)")
    p.add_argument("--labels", type=Path, help="existing label dir: reuse its codebook and feature model")

    p = sub.add_parser("pretrain", help="dual-path pre-training")
    _common(p, out_required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint", type=Path, help="resume from this checkpoint")
    p.add_argument("--one-path", action="store_true", help="disable branch B and the CC loss")

    p = sub.add_parser("probe", help="selectivity and invariance probes")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint path or `random-init`")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--thresholds", type=Path, help="TOML/JSON file with min_*/max_* keys")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss on a tiny model")
    _common(p)
    p.add_argument("--exhaustive", action="store_true", help="perturb every scalar parameter")
    return parser


# --- helpers ----------------------------------------------------------------

def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    if args.config is not None:
        _need(args.config, "config file")
        apply_dict(cfg, tomllib.loads(args.config.read_text()))
    apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    if cfg.seed is None:
        raise UsageError("a seed is required: pass --seed or set a top-level `seed` in the config")
    return cfg


def _manifest_path(p: Path) -> Path:
    return _need(p / "manifest.jsonl" if p.is_dir() else p, "manifest")


def _labels_path(p: Path) -> Path:
    return _need(p / "labels.jsonl" if p.is_dir() else p, "label store")


def _write_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfg.to_toml())


def _emit(obj: dict, out: Path | None, name: str) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)


# --- subcommands --------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .mixsim import make_dataset, manifest_digest, write_manifest

    cfg = _resolve_config(args)
    _write_config(cfg, args.out)
    digests = {}
    for split, n, kind in (("train", cfg.mix.n_train, None), ("eval", cfg.mix.n_eval, "two_talker")):
        log.info("simulating %d %s examples", n, split)
        examples = make_dataset(cfg.mix, cfg.seed, n, split, cfg.frontend, mixture_type=kind)
        path = write_manifest(examples, args.out / split)
        digests[split] = manifest_digest(path)
    _emit({"seed": cfg.seed, "manifest_digests": digests}, args.out, "simulate.json")
    return 0


def cmd_labels(args) -> int:
    from .mixsim import read_manifest
    from .model import build_model
    from .quantizer import (build_labels, label_entropy, label_examples, read_codebook, write_codebook,
                            write_label_store)
    from .trainer import TrainState, load_checkpoint, make_optimizer, save_checkpoint

    examples = read_manifest(_manifest_path(args.manifest))
    if args.labels is not None:
        src = args.labels
        state = load_checkpoint(_need(src / "label_model.ckpt", "label feature model"))
        cfg = _resolve_config(args, state.cfg)
        cb = read_codebook(_need(src / "codebook.bin", "codebook"))
        layer = cb.feature_source.get("layer_index", cfg.quantizer.layer_index)
        store = label_examples(state.model, examples, cb, layer)
    else:
        cfg = _resolve_config(args)
        cfg.quantizer.seed = cfg.seed
        if args.checkpoint in (None, "random-init"):
            model = build_model(cfg, cfg.quantizer.seed)
            state = TrainState(model, make_optimizer(model, cfg.train), cfg)
        else:
            state = load_checkpoint(_need(Path(args.checkpoint), "checkpoint"))
            state.cfg = cfg
        q = cfg.quantizer
        store, cb = build_labels(examples, state.model, q.layer_index, q.k, q.max_iters, q.max_frames, q.seed)
    _write_config(cfg, args.out)
    write_codebook(cb, args.out / "codebook.bin")
    write_label_store(store, args.out / "labels.jsonl")
    save_checkpoint(state, args.out / "label_model.ckpt")
    _emit({
        "n_examples": len(store.labels),
        "n_interferer": len(store.interferer_labels),
        "K": cb.k,
        "entropy": label_entropy(store.labels, cb.k),
        "digest": store.digest(),
    }, args.out, "labels.json")
    return 0


def cmd_pretrain(args) -> int:
    from .mixsim import read_manifest
    from .quantizer import read_label_store
    from .trainer import load_checkpoint, run_pretrain

    cfg = _resolve_config(args)
    cfg.train.seed = cfg.seed
    if args.steps is not None:
        if args.steps < 0:
            raise UsageError("--steps must be >= 0")
        cfg.train.steps = args.steps
    if args.one_path:
        cfg.train.one_path = True
    examples = read_manifest(_manifest_path(args.manifest))
    store = read_label_store(_labels_path(args.labels))
    state = None
    if args.checkpoint is not None:
        state = load_checkpoint(_need(args.checkpoint, "checkpoint"), cfg)

    def progress(m):
        if m["step"] % 100 == 0:
            log.info("step %d total %.4f ce_a %.4f cc_inv %.4f", m["step"], m["total"], m["ce_a"], m["cc_inv"])

    state, hist = run_pretrain(cfg, examples, store.labels, out_dir=args.out, state=state, on_step=progress)
    last = {k: v for k, v in hist[-1].items() if k != "wall_ms"} if hist else {}
    _emit({"step": state.step, "skipped": state.skipped, "last": last}, args.out, "pretrain.json")
    return 0


def _check_thresholds(report: dict, path: Path) -> list[str]:
    text = _need(path, "thresholds file").read_text()
    try:
        spec = json.loads(text)
    except json.JSONDecodeError:
        spec = tomllib.loads(text)
    failures = []
    for key, bound in spec.items():
        if key not in THRESHOLD_KEYS:
            raise UsageError(f"unknown threshold {key!r}; expected one of {sorted(THRESHOLD_KEYS)}")
        field, kind = THRESHOLD_KEYS[key]
        value = report.get(field)
        if value is None:
            failures.append(f"{field} unavailable")
        elif (kind == "min" and value < bound) or (kind == "max" and value > bound):
            failures.append(f"{field}={value:.4f} violates {key}={bound}")
    return failures


def cmd_probe(args) -> int:
    from .evalsuite import invariance_metric, selectivity_probe
    from .mixsim import read_manifest
    from .model import build_model
    from .quantizer import read_label_store
    from .trainer import config_from_header, load_checkpoint, read_checkpoint

    if args.checkpoint == "random-init":
        cfg = _resolve_config(args)
        model = build_model(cfg, cfg.seed)
    else:
        path = _need(Path(args.checkpoint), "checkpoint")
        header, _ = read_checkpoint(path)
        base = config_from_header(header)
        if base.seed is None:
            base.seed = base.train.seed
        cfg = _resolve_config(args, base)
        model = load_checkpoint(path, cfg).model
    examples = read_manifest(_manifest_path(args.manifest))
    store = read_label_store(_labels_path(args.labels))
    p = cfg.probe
    rep = selectivity_probe(model, examples, store.labels, store.interferer_labels, p.mask_seed, p.p_start,
                            p.span_length)
    rep.mean_view_cosine = invariance_metric(model, examples)
    out = rep.to_dict()
    if out["interferer_masked_accuracy"] is not None:
        out["gap"] = out["target_masked_accuracy"] - out["interferer_masked_accuracy"]
    out["checkpoint"] = str(args.checkpoint)
    failures = _check_thresholds(out, args.thresholds) if args.thresholds else []
    out["threshold_failures"] = failures
    _emit(out, args.out, "probe.json")
    return 1 if failures else 0


def cmd_gradcheck(args) -> int:
    from .config import tiny_config
    from .evalsuite import gradcheck_model

    cfg = _resolve_config(args, tiny_config())
    report = gradcheck_model(cfg.seed, cfg, max_coords=None if args.exhaustive else 24)
    _emit({"seed": cfg.seed, **report.to_dict()}, args.out, "gradcheck.json")
    return 0 if report.passed else 1


COMMANDS = {
    "simulate": cmd_simulate,
    "labels": cmd_labels,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_threads()
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"shubert {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, RuntimeError) as exc:
        print(f"shubert {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
