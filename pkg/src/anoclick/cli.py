"""Command-line entry points.

Commands: build-bank, train, train-seg, evaluate-iis, evaluate-ad,
export, serve. Configuration comes from a YAML file plus dotted
key=value overrides and ANOCLICK_* environment variables.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

logger = logging.getLogger(__name__)

ENV_PREFIX = "ANOCLICK_"
ENV_KEYS = {"SEED": "seed", "DEVICE": "device", "CHECKPOINT": "checkpoint",
            "OUTPUT_DIR": "output_dir", "PORT": "service.port"}


def _set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg: dict = {}
    if path:
        cfg = yaml.safe_load(Path(path).read_text()) or {}
    for env_key, dotted in ENV_KEYS.items():
        value = os.environ.get(ENV_PREFIX + env_key)
        if value is not None:
            _set_dotted(cfg, dotted, _parse_value(value))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must be key=value, got: {item}")
        key, _, value = item.partition("=")
        _set_dotted(cfg, key, _parse_value(value))
    return cfg


def _model_config(cfg: dict):
    from .config import ModelConfig

    return ModelConfig.from_dict(cfg.get("model", {}))


def _train_config(cfg: dict):
    from .config import TrainConfig

    tc = TrainConfig.from_dict(cfg.get("train", {}))
    if "seed" in cfg:
        tc.seed = int(cfg["seed"])
    return tc


def _extractor(cfg: dict, model_config):
    from .extractors import build_extractor

    ex = cfg.get("extractor", {})
    return build_extractor(
        kind=ex.get("kind", "toy-conv"),
        image_size=model_config.image_size,
        dim=model_config.residual_dim,
        seed=int(ex.get("seed", 0)),
        stride=int(ex.get("stride",
                          model_config.image_size // model_config.residual_grid)),
        weights_path=ex.get("weights_path"),
    )


def _data_indices(cfg: dict, split: str):
    from .datasets import load_dataset

    data = cfg.get("data", {})
    root = data.get("root")
    layout = data.get("layout", "mvtec")
    categories = data.get("categories") or ["ksdd2"]
    return [load_dataset(root, layout, category=c, split=split) for c in categories]


def _banks_dir(cfg: dict) -> Path:
    return Path(cfg.get("banks_dir") or Path(cfg.get("output_dir", "out")) / "banks")


def cmd_build_bank(cfg: dict) -> int:
    from .bank import build_reference_bank, save_bank

    mc = _model_config(cfg)
    extractor = _extractor(cfg, mc)
    banks_dir = _banks_dir(cfg)
    banks_dir.mkdir(parents=True, exist_ok=True)
    seed = int(cfg.get("seed", 0))
    fraction = float(cfg.get("coreset_fraction", 1.0))
    for index in _data_indices(cfg, "train"):
        good = index.good_only()
        bank = build_reference_bank(good, extractor, coreset_fraction=fraction,
                                    seed=seed)
        path = banks_dir / f"{index.category}.bank"
        save_bank(bank, path)
        print(f"bank {index.category}: {len(bank)} vectors -> {path}")
    return 0


def _load_banks(cfg: dict):
    from .bank import load_bank

    banks = {}
    for path in sorted(_banks_dir(cfg).glob("*.bank")):
        bank = load_bank(path)
        banks[bank.category] = bank
    if not banks:
        raise FileNotFoundError(f"no reference banks under {_banks_dir(cfg)}")
    return banks


def _corpus(cfg: dict):
    from .prompts import load_prompt_corpus

    path = cfg.get("corpus")
    return load_prompt_corpus(path) if path else None


def _text_encoder(cfg: dict, mc):
    from .runtime import make_text_encoder

    return make_text_encoder(cfg.get("text_encoder", {}), mc.text_dim)


def cmd_train(cfg: dict, seg: bool = False) -> int:
    from .training import (
        prepare_synthetic_samples,
        prepare_training_samples,
        train_model,
    )

    mc = _model_config(cfg)
    if seg:
        mc.mode = "seg"
    tc = _train_config(cfg)
    extractor = _extractor(cfg, mc)
    banks = _load_banks(cfg)
    corpus = _corpus(cfg) if mc.use_language else None
    text_encoder = _text_encoder(cfg, mc) if mc.use_language else None

    samples = []
    supervision = cfg.get("supervision", "gt" if not seg else "synthetic")
    rng = np.random.default_rng(int(cfg.get("seed", 0)))
    split = cfg.get("data", {}).get("train_split", "test" if not seg else "train")
    for index in _data_indices(cfg, split):
        bank = banks[index.category]
        if seg and supervision == "synthetic":
            samples += prepare_synthetic_samples(index, bank, extractor, mc, rng)
        else:
            samples += prepare_training_samples(index, bank, extractor, mc)
    out_dir = Path(cfg.get("output_dir", "out")) / ("seg" if seg else "click")
    result = train_model(samples, corpus, mc, tc, out_dir,
                         text_encoder=text_encoder,
                         device=cfg.get("device", "cpu"))
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"fixed-batch loss: {result.fixed_batch_losses[0]:.4f} -> "
          f"{result.fixed_batch_losses[-1]:.4f}")
    return 0


def _runtime(cfg: dict):
    from .runtime import load_runtime

    rt_cfg = dict(cfg)
    rt_cfg.setdefault("banks_dir", str(_banks_dir(cfg)))
    return load_runtime(rt_cfg)


def cmd_evaluate_iis(cfg: dict) -> int:
    from .evaluate import evaluate_iis, merge_iis_results, write_table

    runtime = _runtime(cfg)
    ev = cfg.get("eval", {})
    budgets = tuple(ev.get("clicks", (2, 3, 5)))
    results = []
    for index in _data_indices(cfg, "test"):
        results.append(evaluate_iis(
            runtime, index, budgets=budgets,
            max_clicks=int(ev.get("max_clicks", 20)),
            iou_target=float(ev.get("iou_target", 0.8)),
            prompt_seed=int(cfg.get("seed", 0)),
        ))
    table = merge_iis_results(results, budgets=budgets)
    out = write_table(table, Path(cfg.get("output_dir", "out")) / "results_iis.txt")
    print(table, end="")
    print(f"written: {out}")
    return 0


def cmd_evaluate_ad(cfg: dict) -> int:
    from .evaluate import evaluate_ad, merge_ad_results, write_table

    runtime = _runtime(cfg)
    maps_dir = None
    if cfg.get("eval", {}).get("save_maps"):
        maps_dir = Path(cfg.get("output_dir", "out")) / "score_maps"
    results = []
    for index in _data_indices(cfg, "test"):
        results.append(evaluate_ad(runtime, index,
                                   prompt_seed=int(cfg.get("seed", 0)),
                                   maps_dir=maps_dir))
    table = merge_ad_results(results)
    out = write_table(table, Path(cfg.get("output_dir", "out")) / "results_ad.txt")
    print(table, end="")
    print(f"written: {out}")
    return 0


def cmd_export(cfg: dict) -> int:
    """Batch pseudo-labels: simulate k clicks per defective sample and
    export the resulting masks for downstream training."""
    from .clicks import AnomalyMask, simulate_next_click
    from .sessions import SessionManager

    runtime = _runtime(cfg)
    k = int(cfg.get("eval", {}).get("export_clicks", 5))
    manager = SessionManager(runtime, cfg.get("output_dir", "out"))
    total, ious = 0, []
    for index in _data_indices(cfg, "test"):
        manager.register_index(index)
    for entry in manager.list_images():
        if entry.defect_type == "good":
            continue
        session = manager.open_session(entry.image_id, with_gt=True)
        mask = AnomalyMask.empty(session.image.shape[:2],
                                 runtime.config.mask_threshold)
        last_iou = 0.0
        for t in range(k):
            click = simulate_next_click(mask, session.gt, index=t)
            if click is None:
                break
            mask, last_iou = manager.submit_click(session.session_id, click)
        if session.clicks:
            path = manager.export_label(session.session_id)
            total += 1
            ious.append(last_iou)
            print(f"exported {entry.image_id} -> {path}")
    if ious:
        print(f"exported {total} labels, mean IoU vs GT {float(np.mean(ious)):.3f}")
    return 0


def cmd_serve(cfg: dict) -> int:
    import uvicorn

    from .sessions import SessionManager
    from .server import create_app

    runtime = _runtime(cfg)
    service = cfg.get("service", {})
    manager = SessionManager(
        runtime,
        cfg.get("output_dir", "out"),
        idle_timeout=float(service.get("idle_timeout", 1800.0)),
    )
    for index in _data_indices(cfg, "test"):
        manager.register_index(index)
    app = create_app(manager)
    uvicorn.run(app, host=service.get("host", "127.0.0.1"),
                port=int(service.get("port", 8008)))
    return 0


COMMANDS = {
    "build-bank": cmd_build_bank,
    "train": lambda cfg: cmd_train(cfg, seg=False),
    "train-seg": lambda cfg: cmd_train(cfg, seg=True),
    "evaluate-iis": cmd_evaluate_iis,
    "evaluate-ad": cmd_evaluate_ad,
    "export": cmd_export,
    "serve": cmd_serve,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anoclick",
        description="Interactive anomaly labeling and automatic segmentation",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="YAML configuration file")
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--device")
    parser.add_argument("--checkpoint")
    parser.add_argument("--clicks", type=int, nargs="+",
                        help="click budgets for evaluate-iis")
    parser.add_argument("--port", type=int)
    parser.add_argument("overrides", nargs="*", metavar="key=value",
                        help="dotted config overrides")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_intermixed_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.output_dir:
            cfg["output_dir"] = args.output_dir
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.device:
            cfg["device"] = args.device
        if args.checkpoint:
            cfg["checkpoint"] = args.checkpoint
        if args.clicks:
            cfg.setdefault("eval", {})["clicks"] = args.clicks
        if args.port is not None:
            cfg.setdefault("service", {})["port"] = args.port
        return COMMANDS[args.command](cfg)
    except Exception as e:  # single-line machine-parsable failure
        print(f"error\t{type(e).__name__}\t{e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
