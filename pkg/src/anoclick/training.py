"""Training loops for the click-refinement and automatic-seg models,
plus checkpoint persistence."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .bank import ReferenceBank
from .clicks import (
    AnomalyMask,
    Click,
    encode_clicks,
    first_training_click,
    next_training_click,
)
from .config import ModelConfig, TrainConfig
from .datasets import DatasetIndex, load_image, load_mask
from .language import prompt_contrastive_loss
from .losses import normalized_focal_loss
from .model import AnomalyMaskNet, normalize_image
from .prompts import PromptCorpus
from .residuals import extract_features, residual_grid

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Checkpoint missing, corrupt, or structurally incompatible."""


class DivergedError(RuntimeError):
    """Training loss became non-finite."""


def save_checkpoint(path, model: AnomalyMaskNet, step: int, extras: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "step": int(step),
        "state": model.state_dict(),
        "extras": extras or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, expected_config: ModelConfig | None = None,
                    device: str = "cpu"):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint does not exist: {path}")
    payload = torch.load(path, map_location=device, weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {payload.get('format_version')}"
        )
    config = ModelConfig.from_dict(payload["model_config"])
    if expected_config is not None:
        if config.structural_fields() != expected_config.structural_fields():
            raise CheckpointError("checkpoint config does not match the requested model")
    model = AnomalyMaskNet(config)
    model.load_state_dict(payload["state"])
    model.eval()
    return model, int(payload["step"]), payload.get("extras", {})


def checkpoint_fingerprint(path) -> str:
    return hashlib.sha1(Path(path).read_bytes()).hexdigest()[:12]


@dataclass
class TrainingSample:
    image: np.ndarray       # (H, W, 3) float32 in [0, 1]
    gt: np.ndarray          # (H, W) bool
    residuals: np.ndarray   # (h, w, d) float32
    object_name: str
    defect: str


def prepare_training_samples(index: DatasetIndex, bank: ReferenceBank, extractor,
                             config: ModelConfig) -> list[TrainingSample]:
    """Load images, masks, and residual grids for every defective sample."""
    out = []
    for sample in index.samples:
        if sample.defect_type == "good" or sample.mask_path is None:
            continue
        image = load_image(sample.image_path, size=config.image_size)
        gt = load_mask(sample.mask_path, size=config.image_size)
        grid = extract_features(image, extractor)
        rg = residual_grid(grid, bank, config.window_radius, config.theta)
        out.append(TrainingSample(image=image, gt=gt, residuals=rg.residuals,
                                  object_name=index.category,
                                  defect=sample.defect_type))
    return out


def prepare_synthetic_samples(index: DatasetIndex, bank: ReferenceBank, extractor,
                              config: ModelConfig, rng: np.random.Generator,
                              per_image: int = 2) -> list[TrainingSample]:
    """Paste synthetic blob anomalies onto defect-free images."""
    from .synthetic import synthesize_anomaly

    out = []
    for sample in index.samples:
        if sample.defect_type != "good":
            continue
        base = load_image(sample.image_path, size=config.image_size)
        for _ in range(per_image):
            image, gt, defect = synthesize_anomaly(rng, base)
            grid = extract_features(image, extractor)
            rg = residual_grid(grid, bank, config.window_radius, config.theta)
            out.append(TrainingSample(image=image, gt=gt, residuals=rg.residuals,
                                      object_name=index.category, defect=defect))
    return out


class _PromptBank:
    """Pre-embedded corpus phrases with contrastive group ids."""

    def __init__(self, corpus: PromptCorpus, text_encoder, device: str):
        self.device = device
        self.by_key: dict[tuple[str, str], list[torch.Tensor]] = {}
        self.group_of: dict[tuple[str, str], int] = {}
        for gid, (key, phrases) in enumerate(sorted(corpus.entries.items())):
            self.group_of[key] = gid
            self.by_key[key] = [
                torch.from_numpy(text_encoder.encode(p)).to(device) for p in phrases
            ]
        self.corpus = corpus

    def sample(self, key: tuple[str, str], rng: np.random.Generator) -> torch.Tensor:
        phrases = self.by_key[key]
        return phrases[int(rng.integers(len(phrases)))]

    def resolve(self, object_name: str, defect: str) -> tuple[str, str]:
        return self.corpus.resolve_key(object_name, defect)

    def contrastive_batch(self, rng: np.random.Generator, n_groups: int = 4,
                          per_group: int = 2):
        keys = sorted(self.by_key.keys())
        chosen = [keys[i] for i in rng.choice(len(keys),
                                              size=min(n_groups, len(keys)),
                                              replace=False)]
        embeddings, gids = [], []
        for key in chosen:
            phrases = self.by_key[key]
            idx = rng.choice(len(phrases), size=min(per_group, len(phrases)),
                             replace=False)
            for i in idx:
                embeddings.append(phrases[int(i)])
                gids.append(self.group_of[key])
        return embeddings, torch.tensor(gids)


def _pad_tokens(token_list: list[torch.Tensor]):
    """Stack variable-length token sequences with a validity mask."""
    t_max = max(t.shape[0] for t in token_list)
    dim = token_list[0].shape[1]
    batch = token_list[0].new_zeros((len(token_list), t_max, dim))
    mask = torch.zeros(len(token_list), t_max, dtype=torch.bool)
    for i, t in enumerate(token_list):
        batch[i, : t.shape[0]] = t
        mask[i, : t.shape[0]] = True
    return batch, mask


def _forward_single(model: AnomalyMaskNet, sample: TrainingSample,
                    clicks: list[Click], prev: np.ndarray | None,
                    tokens: torch.Tensor | None, device: str) -> np.ndarray:
    cfg = model.config
    enc = encode_clicks(clicks, prev, (cfg.image_size, cfg.image_size),
                        cfg.click_radius)
    img = torch.from_numpy(normalize_image(sample.image))[None].to(device)
    aux = torch.from_numpy(np.stack([
        enc.positive_map, enc.negative_map, enc.previous_mask
    ]))[None].to(device)
    res = torch.from_numpy(sample.residuals)[None].to(device)
    with torch.no_grad():
        scores = model(img, aux, res, tokens=tokens)
    return scores[0].detach().cpu().numpy()


def _rollout_clicks(model: AnomalyMaskNet, sample: TrainingSample,
                    tokens: torch.Tensor | None, rng: np.random.Generator,
                    train_cfg: TrainConfig, device: str):
    """Simulate an annotation prefix with the current model (no gradients)."""
    cfg = model.config
    k = int(rng.integers(1, train_cfg.max_train_clicks + 1))
    first = first_training_click(rng, sample.gt)
    if first is None:
        return [], np.zeros_like(sample.gt, dtype=np.float32)
    clicks = [first]
    prev = np.zeros_like(sample.gt, dtype=np.float32)
    for j in range(1, k):
        scores = _forward_single(model, sample, clicks, prev, tokens, device)
        prev = scores.astype(np.float32)
        nxt = next_training_click(rng, AnomalyMask(prev, cfg.mask_threshold),
                                  sample.gt, jitter=train_cfg.click_jitter, index=j)
        if nxt is None:
            break
        clicks.append(nxt)
    return clicks, prev


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    fixed_batch_losses: list[float]
    final_loss: float


def _batch_tensors(model, batch, clicks_per_sample, prevs, device):
    cfg = model.config
    imgs, auxs, ress = [], [], []
    for sample, clicks, prev in zip(batch, clicks_per_sample, prevs):
        enc = encode_clicks(clicks, prev, (cfg.image_size, cfg.image_size),
                            cfg.click_radius)
        imgs.append(normalize_image(sample.image))
        auxs.append(np.stack([enc.positive_map, enc.negative_map, enc.previous_mask]))
        ress.append(sample.residuals)
    img = torch.from_numpy(np.stack(imgs)).to(device)
    aux = torch.from_numpy(np.stack(auxs)).to(device)
    res = torch.from_numpy(np.stack(ress)).to(device)
    gt = torch.from_numpy(np.stack([s.gt for s in batch]).astype(np.float32)).to(device)
    return img, aux, res, gt


def train_model(samples: list[TrainingSample], corpus: PromptCorpus | None,
                model_config: ModelConfig, train_config: TrainConfig,
                out_dir, text_encoder=None, device: str = "cpu",
                with_clicks: bool | None = None) -> TrainResult:
    """Shared loop: click-refinement (clicks rolled out per step) or
    automatic-seg (no clicks) depending on the model mode."""
    if not samples:
        raise ValueError("no training samples")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if with_clicks is None:
        with_clicks = model_config.mode == "click"

    torch.manual_seed(train_config.seed)
    rng = np.random.default_rng(train_config.seed)
    model = AnomalyMaskNet(model_config).to(device)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=train_config.lr,
                            weight_decay=train_config.weight_decay)

    use_language = model_config.use_language and corpus is not None
    prompt_bank = _PromptBank(corpus, text_encoder, device) if use_language else None

    def sample_tokens_nograd(sample: TrainingSample):
        """Frozen-encoder prompt tokens for rollouts (no grad needed)."""
        if prompt_bank is None:
            return None, None
        key = prompt_bank.resolve(sample.object_name, sample.defect)
        emb = prompt_bank.sample(key, rng)
        with torch.no_grad():
            return model.linguistic_encoder(emb), emb

    log_path = out_dir / "train_log.tsv"
    log_file = open(log_path, "a")
    print("step\tloss\tmask_loss\tprompt_loss\tlr", file=log_file, flush=True)

    # frozen evaluation batch: fixed samples, one deterministic click each
    # (none in clickless seg mode)
    eval_rng = np.random.default_rng(train_config.seed + 1)
    eval_n = min(train_config.batch_size, len(samples))
    eval_batch = samples[:eval_n]
    eval_clicks = []
    for s in eval_batch:
        c = first_training_click(eval_rng, s.gt) if with_clicks else None
        eval_clicks.append([c] if c is not None else [])
    eval_prevs = [np.zeros_like(s.gt, dtype=np.float32) for s in eval_batch]
    eval_embs = []
    if prompt_bank is not None:
        for s in eval_batch:
            key = prompt_bank.resolve(s.object_name, s.defect)
            eval_embs.append(prompt_bank.by_key[key][0])

    def fixed_batch_loss() -> float:
        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                img, aux, res, gt = _batch_tensors(model, eval_batch, eval_clicks,
                                                   eval_prevs, device)
                tokens = mask = None
                if prompt_bank is not None:
                    toks = [model.linguistic_encoder(e) for e in eval_embs]
                    tokens, mask = _pad_tokens(toks)
                pred = model(img, aux, res, tokens=tokens, token_mask=mask)
                return float(normalized_focal_loss(pred, gt,
                                                   model_config.focal_gamma))
        finally:
            model.train(was_training)

    fixed_losses = [fixed_batch_loss()]
    final_loss = float("nan")

    for step in range(1, train_config.steps + 1):
        idx = rng.choice(len(samples), size=min(train_config.batch_size, len(samples)),
                         replace=len(samples) < train_config.batch_size)
        batch = [samples[int(i)] for i in idx]

        clicks_per_sample, prevs, embs = [], [], []
        for s in batch:
            tokens, emb = sample_tokens_nograd(s)
            embs.append(emb)
            if with_clicks:
                clicks, prev = _rollout_clicks(model, s, tokens, rng,
                                               train_config, device)
            else:
                clicks, prev = [], np.zeros_like(s.gt, dtype=np.float32)
            clicks_per_sample.append(clicks)
            prevs.append(prev)

        img, aux, res, gt = _batch_tensors(model, batch, clicks_per_sample,
                                           prevs, device)
        tokens = mask = None
        if prompt_bank is not None:
            toks = [model.linguistic_encoder(e) for e in embs]
            tokens, mask = _pad_tokens(toks)
        pred = model(img, aux, res, tokens=tokens, token_mask=mask)
        mask_loss = normalized_focal_loss(pred, gt, model_config.focal_gamma)

        prompt_loss = torch.zeros((), device=pred.device)
        if prompt_bank is not None:
            c_embs, gids = prompt_bank.contrastive_batch(rng)
            pooled = torch.stack([
                model.linguistic_encoder(e).mean(dim=0) for e in c_embs
            ])
            prompt_loss = prompt_contrastive_loss(pooled, gids.to(device))

        loss = mask_loss + model_config.contrastive_weight * prompt_loss
        if not torch.isfinite(loss):
            raise DivergedError(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        final_loss = float(loss.detach())

        if step % train_config.log_every == 0 or step == train_config.steps:
            print(f"{step}\t{final_loss:.6f}\t{float(mask_loss.detach()):.6f}"
                  f"\t{float(prompt_loss.detach()):.6f}\t{train_config.lr:g}",
                  file=log_file, flush=True)
        if step % train_config.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint_{step:06d}.pt", model, step)
        if step % 50 == 0 or step == train_config.steps:
            fixed_losses.append(fixed_batch_loss())

    log_file.close()
    path = save_checkpoint(out_dir / "checkpoint.pt", model,
                           train_config.steps,
                           extras={"train_config": train_config.to_dict()})
    logger.info("training done: %s (fixed-batch loss %.4f -> %.4f)",
                path, fixed_losses[0], fixed_losses[-1])
    return TrainResult(checkpoint_path=path, log_path=log_path,
                       fixed_batch_losses=fixed_losses, final_loss=final_loss)
