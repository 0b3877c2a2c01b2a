"""Dataset-level evaluation harnesses producing the results tables."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clicks import run_click_protocol
from .datasets import DatasetIndex, load_image, load_mask
from .metrics import (
    aggregate_noc,
    auroc,
    average_precision,
    format_ad_table,
    format_iis_table,
    miou,
    pro,
)
from .runtime import ModelRuntime
from .segmode import DefectTypeSet, seg_forward

logger = logging.getLogger(__name__)


@dataclass
class IISResult:
    rows: dict            # category -> {budget: quadruple, "noc": float}
    table: str
    traces: dict          # category -> list of IoU traces


def evaluate_iis(runtime: ModelRuntime, index: DatasetIndex,
                 budgets=(2, 3, 5), max_clicks: int = 20,
                 iou_target: float = 0.8, prompt_seed: int = 0) -> IISResult:
    """Simulated-annotator evaluation of the click model on one category."""
    cfg = runtime.config
    budgets = tuple(sorted(budgets))
    rng = np.random.default_rng(prompt_seed)
    per_budget_scores = {k: [] for k in budgets}
    per_budget_preds = {k: [] for k in budgets}
    gts, traces = [], []

    for sample in index.defective().samples:
        image = load_image(sample.image_path, size=cfg.image_size)
        gt = load_mask(sample.mask_path, size=cfg.image_size)
        residuals = runtime.residuals_for(image, index.category)
        feature = runtime.linguistic_for(index.category, sample.defect_type, rng=rng)

        captured: dict[int, np.ndarray] = {}

        def on_step(count, scores):
            captured[count] = scores.copy()

        def predict(clicks, prev):
            return runtime.predict(image, clicks, prev, residuals, feature)

        trace, _ = run_click_protocol(predict, gt, max_clicks=max_clicks,
                                      iou_target=iou_target,
                                      threshold=cfg.mask_threshold,
                                      on_step=on_step)
        traces.append(trace)
        gts.append(gt)
        last = None
        for count in range(1, max_clicks + 1):
            last = captured.get(count, last)
            if count in per_budget_scores:
                per_budget_scores[count].append(last)
                per_budget_preds[count].append(last >= cfg.mask_threshold)

    if not gts:
        raise ValueError(f"no defective samples in {index.category}/{index.split}")

    cells: dict = {}
    for k in budgets:
        flat_scores = np.concatenate([s.ravel() for s in per_budget_scores[k]])
        flat_labels = np.concatenate([g.ravel() for g in gts])
        ap = average_precision(flat_scores, flat_labels)
        p_auroc = auroc(flat_scores, flat_labels)
        pros = [pro(s, g) for s, g in zip(per_budget_scores[k], gts) if g.any()]
        mean_iou = miou(per_budget_preds[k], gts)
        cells[k] = (ap, float(np.mean(pros)), p_auroc, mean_iou)
    noc_mean, noc_failed = aggregate_noc(traces, iou_target, cap=max_clicks)
    cells["noc"] = noc_mean
    cells["noc_failed"] = noc_failed

    rows = {index.category: cells}
    table = format_iis_table(
        {cat: {**vals} for cat, vals in rows.items()}, budgets=budgets
    )
    logger.info("IIS evaluation %s:\n%s", index.category, table)
    return IISResult(rows=rows, table=table, traces={index.category: traces})


@dataclass
class ADResult:
    rows: dict            # category -> (ap, pro, p_auroc, i_auroc)
    table: str


def evaluate_ad(runtime: ModelRuntime, index: DatasetIndex,
                defect_types: DefectTypeSet | None = None,
                prompt_seed: int = 0, maps_dir=None) -> ADResult:
    """Automatic-mode evaluation over a full test split of one category.

    With ``maps_dir`` set, each aggregate score map is saved as 16-bit PNG.
    """
    from .segmode import save_score_map

    cfg = runtime.config
    rng = np.random.default_rng(prompt_seed)
    if defect_types is None:
        if runtime.corpus is not None:
            types = [(o, d) for (o, d) in runtime.corpus.keys()
                     if o == index.category and d != "*"]
            defect_types = DefectTypeSet(types or [(index.category, "*")])
        else:
            defect_types = DefectTypeSet([(index.category, "defect")])

    pixel_scores, pixel_labels = [], []
    image_scores, image_labels = [], []
    pros = []
    for sample in index.samples:
        image = load_image(sample.image_path, size=cfg.image_size)
        residuals = runtime.residuals_for(image, index.category)
        result = seg_forward(image, residuals.residuals, defect_types,
                             runtime.model, runtime.corpus,
                             runtime.text_encoder, rng=rng)
        defective = sample.defect_type != "good"
        gt = (load_mask(sample.mask_path, size=cfg.image_size)
              if sample.mask_path else np.zeros(result.aggregate.shape, dtype=bool))
        pixel_scores.append(result.aggregate.ravel())
        pixel_labels.append(gt.ravel())
        image_scores.append(result.image_score)
        image_labels.append(defective)
        if gt.any():
            pros.append(pro(result.aggregate, gt))
        if maps_dir is not None:
            name = f"{index.category}__{sample.defect_type}__{sample.image_path.stem}.png"
            save_score_map(result.aggregate, Path(maps_dir) / name)

    flat_scores = np.concatenate(pixel_scores)
    flat_labels = np.concatenate(pixel_labels)
    row = (
        average_precision(flat_scores, flat_labels),
        float(np.mean(pros)) if pros else 0.0,
        auroc(flat_scores, flat_labels),
        auroc(image_scores, image_labels),
    )
    rows = {index.category: row}
    table = format_ad_table(rows)
    logger.info("AD evaluation %s:\n%s", index.category, table)
    return ADResult(rows=rows, table=table)


def merge_iis_results(results: list[IISResult], budgets=(2, 3, 5)) -> str:
    """One table over categories plus an unweighted mean row."""
    rows: dict = {}
    for r in results:
        rows.update(r.rows)
    if len(rows) > 1:
        mean_cells: dict = {}
        for k in budgets:
            mean_cells[k] = tuple(
                float(np.mean([rows[c][k][i] for c in rows])) for i in range(4)
            )
        mean_cells["noc"] = float(np.mean([rows[c]["noc"] for c in rows]))
        rows["mean"] = mean_cells
    return format_iis_table(rows, budgets=budgets)


def merge_ad_results(results: list[ADResult]) -> str:
    rows: dict = {}
    for r in results:
        rows.update(r.rows)
    if len(rows) > 1:
        rows["mean"] = tuple(
            float(np.mean([rows[c][i] for c in rows])) for i in range(4)
        )
    return format_ad_table(rows)


def write_table(table: str, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(table)
    return path
