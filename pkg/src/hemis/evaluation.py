"""Segmentation metrics, the all-subsets sweep and report emission."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .baselines import baseline_segment
from .data import derive_binary_maps
from .model import HemisParams, ModalityMask, all_subsets, segment

METHODS = ("HeMIS", "Mean", "MLP")
CATEGORIES_4 = ("Complete", "Core", "Enhancing")
CATEGORIES_2 = ("Lesion",)

# overlay colours per class; class 0 is left as background
PALETTE = {1: (0, 255, 0), 2: (255, 255, 0), 3: (255, 128, 0)}
LESION_PALETTE = {1: (255, 0, 0)}

# 4-connectivity for lesion components
_CROSS = ndimage.generate_binary_structure(2, 1)


def dice(pred, truth) -> float:
    """Dice overlap in percent; two empty maps agree perfectly (100)."""
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2 * int(np.logical_and(p, t).sum()) / total


def vd_tpr_fpr(pred, truth):
    """Volume difference, lesion-wise true and false positive rates, in percent.

    A truth component counts as detected when any predicted pixel touches it;
    a predicted component is a false positive when it touches no truth pixel.
    FPR is the fraction of predicted components that are false positives.
    """
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    t_vol = int(t.sum())
    if t_vol == 0:
        raise ValueError("volume difference is undefined for an empty truth map")
    vd = 100.0 * abs(int(p.sum()) - t_vol) / t_vol
    t_lab, n_t = ndimage.label(t, structure=_CROSS)
    p_lab, n_p = ndimage.label(p, structure=_CROSS)
    hit = np.unique(t_lab[p & t])
    tpr = 100.0 * hit[hit > 0].size / n_t
    if n_p == 0:
        fpr = 0.0
    else:
        touching = np.unique(p_lab[p & t])
        fpr = 100.0 * (n_p - touching[touching > 0].size) / n_p
    return vd, tpr, fpr


def category_maps(labels, n_classes: int) -> dict:
    """Binary maps per reporting category."""
    if n_classes == 2:
        return {"Lesion": np.asarray(labels) == 1}
    maps = derive_binary_maps(labels)
    return {"Complete": maps["complete"], "Core": maps["core"], "Enhancing": maps["enhancing"]}


@dataclass
class SubsetReport:
    masks: list
    categories: tuple
    methods: tuple
    dsc: dict  # (mask key, category, method) -> mean DSC
    n_cases: int
    modality_names: tuple = ()
    per_case: dict = field(default_factory=dict, repr=False)

    def value(self, mask, category, method) -> float:
        key = mask.key if isinstance(mask, ModalityMask) else mask
        return self.dsc[(key, category, method)]

    def row_winners(self, mask, category) -> str:
        """Method with the highest 2-decimal DSC; ties go to the earliest method."""
        vals = [round(self.value(mask, category, m), 2) for m in self.methods]
        return self.methods[int(np.argmax(vals))]

    def wins(self, category) -> dict:
        counts = {m: 0 for m in self.methods}
        for mask in self.masks:
            counts[self.row_winners(mask, category)] += 1
        return counts

    def ties_allowed_wins(self, category, method, against) -> int:
        """Rows where ``method`` is at least as good as ``against`` (2 decimals)."""
        return sum(round(self.value(m, category, method), 2) >= round(self.value(m, category, against), 2)
                   for m in self.masks)


def sweep_subsets(hemis: HemisParams, baseline: HemisParams, bundle, test_cases, masks=None) -> SubsetReport:
    """Evaluate HeMIS, mean filling and MLP imputation over every modality subset."""
    if not test_cases:
        raise ValueError("empty test split")
    n_mod = hemis.config.n_modalities
    n_classes = hemis.config.n_classes
    categories = CATEGORIES_2 if n_classes == 2 else CATEGORIES_4
    masks = list(masks) if masks is not None else all_subsets(n_mod)
    cases = sorted(test_cases, key=lambda c: c.case_id)
    images = np.stack([c.images for c in cases])
    truths = [category_maps(c.labels, n_classes) for c in cases]
    dsc, per_case = {}, {}
    for mask in masks:
        preds = {"HeMIS": segment(images, mask, hemis)}
        if baseline is not None:
            preds["Mean"] = baseline_segment(images, mask, baseline, "mean")
            preds["MLP"] = (preds["Mean"] if mask.is_full
                            else baseline_segment(images, mask, baseline, "mlp", bundle))
        for method, seg in preds.items():
            for i, truth in enumerate(truths):
                pm = category_maps(seg[i], n_classes)
                for cat in categories:
                    per_case[(mask.key, cat, method, cases[i].case_id)] = dice(pm[cat], truth[cat])
            for cat in categories:
                vals = [per_case[(mask.key, cat, method, c.case_id)] for c in cases]
                dsc[(mask.key, cat, method)] = float(np.mean(vals))
    methods = METHODS if baseline is not None else METHODS[:1]
    names = tuple(cases[0].modality_names)
    return SubsetReport(masks, categories, methods, dsc, len(cases), names, per_case)


def report_tsv(report: SubsetReport) -> str:
    """One line per (subset, category, method); ``*`` rows hold the wins tally,
    with the win count in the dsc column and the subset count in n_cases."""
    names = report.modality_names or tuple(f"M{i}" for i in range(report.masks[0].n))
    lines = ["\t".join([*names, "category", "method", "dsc", "n_cases"])]
    for mask in report.masks:
        presence = ["1" if a else "0" for a in mask.available]
        for cat in report.categories:
            for method in report.methods:
                lines.append("\t".join([*presence, cat, method, f"{report.value(mask, cat, method):.2f}",
                                        str(report.n_cases)]))
    stars = ["*"] * len(names)
    for cat in report.categories:
        for method, count in report.wins(cat).items():
            lines.append("\t".join([*stars, cat, method, str(count), str(len(report.masks))]))
    return "\n".join(lines) + "\n"


def report_markdown(report: SubsetReport) -> str:
    """Presence columns with hollow/filled dots, one DSC column per category and method."""
    names = report.modality_names or tuple(f"M{i}" for i in range(report.masks[0].n))
    cols = [f"{cat} {m}" for cat in report.categories for m in report.methods]
    lines = ["| " + " | ".join([*names, *cols]) + " |",
             "|" + "|".join([":-:"] * (len(names) + len(cols))) + "|"]
    for mask in report.masks:
        cells = ["•" if a else "◦" for a in mask.available]
        for cat in report.categories:
            best = report.row_winners(mask, cat)
            for m in report.methods:
                v = f"{report.value(mask, cat, m):.2f}"
                cells.append(f"**{v}**" if m == best and len(report.methods) > 1 else v)
        lines.append("| " + " | ".join(cells) + " |")
    total = len(report.masks)
    cells = [f"# Wins / {total}"] + [""] * (len(names) - 1)
    for cat in report.categories:
        w = report.wins(cat)
        cells.extend(str(w[m]) for m in report.methods)
    lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_report(report: SubsetReport, path: str | os.PathLike, format: str = "tsv") -> None:
    if format == "tsv":
        text = report_tsv(report)
    elif format == "markdown":
        text = report_markdown(report)
    else:
        raise ValueError(f"unknown report format {format!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def parse_report_tsv(text: str) -> dict:
    """Read a TSV report back into ``{(presence, category, method): dsc}`` plus wins."""
    lines = text.rstrip("\n").split("\n")
    header = lines[0].split("\t")
    n_mod = len(header) - 4
    rows, wins = {}, {}
    for line in lines[1:]:
        parts = line.split("\t")
        presence, (cat, method, dsc, _) = "".join(parts[:n_mod]), parts[n_mod:]
        if presence == "*" * n_mod:
            wins[(cat, method)] = int(dsc)
        else:
            rows[(presence, cat, method)] = float(dsc)
    return {"rows": rows, "wins": wins}


def overlay_pixels(image, pred, truth, palette=None) -> np.ndarray:
    """``(H, 2W, 3)`` uint8 panel pair: prediction left, truth right."""
    img = np.asarray(image, dtype=np.float64)
    pred, truth = np.asarray(pred), np.asarray(truth)
    if img.ndim != 2 or pred.shape != img.shape or truth.shape != img.shape:
        raise ValueError("image, prediction and truth must share one 2-D shape")
    palette = PALETTE if palette is None else palette
    lo, hi = img.min(), img.max()
    if hi > lo:
        gray = np.floor(255 * (img - lo) / (hi - lo) + 0.5).astype(np.int32)
    else:
        gray = np.zeros(img.shape, dtype=np.int32)
    panels = []
    for seg in (pred, truth):
        rgb = np.repeat(gray[..., None], 3, axis=-1)
        for cls, colour in palette.items():
            sel = seg == cls
            rgb[sel] = (gray[sel, None] + np.array(colour)) // 2
        panels.append(rgb)
    return np.concatenate(panels, axis=1).astype(np.uint8)


def render_overlay(image, pred, truth, path: str | os.PathLike, palette=None) -> None:
    """Write a binary PPM (P6) with class colours blended over the grayscale image."""
    px = overlay_pixels(image, pred, truth, palette)
    h, w, _ = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())
