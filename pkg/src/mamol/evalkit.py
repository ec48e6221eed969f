"""Confusion-matrix metrics and the experiment harnesses built on them.

Every metric is derived from a confusion matrix (rows = true class, columns =
predicted). Harnesses train one fresh model per cell, evaluate it under the
cell's test protocol, and write ``cells.csv`` plus ``summary.json`` under
``<output>/results/<experiment>/``.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import MissingConfig, RunConfig, to_dict
from .datagen import (
    MultimodalDataset,
    apply_availability,
    apply_missing_protocol,
    generate_synthetic,
    load_dataset,
    split_train_test,
)
from .errors import ValidationError
from .model import build_model
from .trainer import predict, train

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# metrics


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise ValidationError(f"label arrays differ in length: {y_true.size} vs {y_pred.size}")
    for name, y in (("true", y_true), ("predicted", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= num_classes):
            raise ValidationError(f"{name} label outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _check_cm(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValidationError(f"confusion matrix must be square, got shape {cm.shape}")
    if np.any(cm < 0):
        raise ValidationError("confusion matrix has negative counts")
    if cm.sum() == 0:
        raise ValidationError("confusion matrix is empty")
    return cm


def overall_accuracy(cm) -> float:
    cm = _check_cm(cm)
    return float(np.trace(cm) / cm.sum())


def cohens_kappa(cm) -> float:
    """(p_o - p_e) / (1 - p_e); 0 with a warning when p_e = 1."""
    cm = _check_cm(cm)
    n = int(cm.sum())
    p_o = np.trace(cm) / n
    # integer numerator keeps p_e exact for the degenerate check
    chance = int(np.dot(cm.sum(axis=1).astype(np.int64), cm.sum(axis=0).astype(np.int64)))
    if chance == n * n:
        warnings.warn("chance agreement is 1; kappa is undefined and reported as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    p_e = chance / (n * n)
    return float((p_o - p_e) / (1.0 - p_e))


def f1_per_class(cm) -> tuple[np.ndarray, np.ndarray]:
    """Per-class F1 and a flag for classes with neither support nor predictions (F1 set to 0)."""
    cm = _check_cm(cm)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    denom = (support + predicted).astype(np.float64)
    f1 = np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return f1, denom == 0


def f1_macro(cm) -> float:
    f1, _ = f1_per_class(cm)
    return float(f1.mean())


def metrics_from_cm(cm) -> dict[str, Any]:
    f1, empty = f1_per_class(cm)
    kappa = cohens_kappa(cm)
    return {
        "oa": overall_accuracy(cm),
        "kappa": kappa,
        "kappa_x100": 100.0 * kappa,
        "f1_macro": float(f1.mean()),
        "f1_per_class": f1.tolist(),
        "empty_classes": np.flatnonzero(empty).tolist(),
        "n": int(np.asarray(cm).sum()),
    }


# ---------------------------------------------------------------------------
# data preparation


def load_source(cfg: RunConfig, seed_offset: int = 0) -> MultimodalDataset:
    data = cfg.data
    if data.source == "manifest":
        return load_dataset(data.manifest)
    spec = dataclasses.replace(data.synthetic, seed=data.synthetic.seed + seed_offset)
    return generate_synthetic(spec)


def apply_missing(dataset: MultimodalDataset, missing: MissingConfig, seed: int) -> MultimodalDataset:
    if missing.mode == "availability":
        return apply_availability(dataset, missing.availability, seed)
    return apply_missing_protocol(
        dataset, missing.eta, missing.mode, missing.modality, seed, missing.split_rule
    )


def prepare_data(cfg: RunConfig, seed_offset: int = 0) -> tuple[MultimodalDataset, MultimodalDataset]:
    """Generate or load, split, then apply the train and test missing protocols."""
    full = load_source(cfg, seed_offset)
    split_seed = cfg.data.split_seed + seed_offset
    train_set, test_set = split_train_test(full, cfg.data.train_fraction, split_seed)
    train_set = apply_missing(train_set, cfg.data.train_missing, 2 * split_seed + 1)
    test_set = apply_missing(test_set, cfg.data.test_missing, 2 * split_seed + 2)
    return train_set, test_set


def seeded(cfg: RunConfig, seed: int) -> RunConfig:
    """Concrete run config for replicate ``seed``.

    The run offset ``cfg.seed + seed`` is added to the model init and batch
    seeds; :func:`prepare_data` takes the same offset for data, split and
    missing-pattern seeds. The returned config's ``seed`` is the offset.
    """
    offset = cfg.seed + seed
    out = copy.deepcopy(cfg)
    out.seed = offset
    out.model.init_seed = cfg.model.init_seed + offset
    out.train.seed = cfg.train.seed + offset
    return out


# ---------------------------------------------------------------------------
# cells


@dataclass
class Cell:
    """One (config, seed) training run plus the test protocols it is scored on."""

    experiment: str
    label: str
    config: RunConfig
    seed: int
    tags: dict[str, Any] = field(default_factory=dict)
    # extra test protocols, keyed by a tag value; the config's own test_missing is always scored
    test_protocols: dict[str, MissingConfig] = field(default_factory=dict)


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, list):
            out[key] = json.dumps(v)
        else:
            out[key] = v
    return out


def run_cell(cell: Cell) -> list[dict[str, Any]]:
    """Train one model and return one row per scored test protocol."""
    start = time.perf_counter()
    cfg = seeded(cell.config, cell.seed)
    # data depends on the offset only, so cells with one seed share data across variants
    train_set, test_set = prepare_data(cfg, cfg.seed)
    model = build_model(cfg.model, train_set.shapes, train_set.num_classes)
    result = train(model, train_set, cfg.train)
    summary = model.param_summary()
    protocols = {"": None, **cell.test_protocols}
    rows = []
    base = {k: v for k, v in _flatten(to_dict(cfg)).items() if not k.startswith("eval.")}
    for key, protocol in protocols.items():
        scored = test_set if protocol is None else apply_missing(
            test_set.with_patterns(np.ones_like(test_set.patterns)), protocol,
            2 * (cfg.data.split_seed + cfg.seed) + 2,
        )
        preds = predict(model, scored)
        cm = confusion_matrix(scored.labels, preds, scored.num_classes)
        m = metrics_from_cm(cm)
        row = {"experiment": cell.experiment, "label": cell.label, "seed": cell.seed, **cell.tags}
        if key:
            row["test_protocol"] = key
        row.update(base)
        if protocol is not None:
            row.update({f"data.test_missing.{k}": (json.dumps(v) if isinstance(v, list) else v)
                        for k, v in dataclasses.asdict(protocol).items()})
        row.update({
            "oa": m["oa"],
            "kappa_x100": m["kappa_x100"],
            "f1_macro": m["f1_macro"],
            "train_accuracy": result.train_accuracy,
            "trainable_params": summary["trainable"],
            "wall_seconds": round(time.perf_counter() - start, 3),
        })
        rows.append(row)
    log.info("cell %s/%s seed %d: oa %.4f", cell.experiment, cell.label, cell.seed, rows[0]["oa"])
    return rows


def run_cells(cells: Sequence[Cell], jobs: int = 1) -> list[dict[str, Any]]:
    """Run cells, in parallel worker processes when ``jobs > 1``; rows keep cell order."""
    if jobs < 1:
        raise ValidationError("jobs must be >= 1")
    if jobs == 1 or len(cells) <= 1:
        chunks = [run_cell(c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(run_cell, cells))
    return [row for chunk in chunks for row in chunk]


def write_cells_csv(rows: Sequence[dict[str, Any]], path: Path) -> None:
    columns: list[str] = []
    for row in rows:
        for k in row:
            if k not in columns:
                columns.append(k)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k, "")) for k in columns})
    path.write_text(buf.getvalue())


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _mean_table(rows, row_keys: Sequence[str], col_key: str, value: str = "oa") -> dict:
    """Nested {row label: {column: mean over seeds}} keyed in first-seen order."""
    groups: dict[str, dict[str, list[float]]] = {}
    for r in rows:
        rk = " / ".join(str(r[k]) for k in row_keys)
        groups.setdefault(rk, {}).setdefault(str(r[col_key]), []).append(float(r[value]))
    return {rk: {ck: float(np.mean(v)) for ck, v in cols.items()} for rk, cols in groups.items()}


def _write_results(out_dir: Path, rows, summary: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_cells_csv(rows, out_dir / "cells.csv")
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out_dir


def render_table(table: dict[str, dict[str, float]], scale: float = 100.0, corner: str = "") -> str:
    cols: list[str] = []
    for row in table.values():
        for c in row:
            if c not in cols:
                cols.append(c)
    width = max([len(corner)] + [len(r) for r in table]) + 2
    lines = [corner.ljust(width) + "".join(c.rjust(12) for c in cols)]
    for rk, row in table.items():
        cells = "".join((f"{scale * row[c]:.2f}" if c in row else "-").rjust(12) for c in cols)
        lines.append(rk.ljust(width) + cells)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# grids


def table_splits(rate: float, num_modalities: int = 2) -> dict[str, list[float]]:
    """Per-modality availability for the split columns at one missing rate.

    ``miss_j``: modality j is available on ``1 - rate`` of samples, others
    always. ``both``: every modality loses ``rate / M`` of samples, disjointly.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValidationError(f"missing rate must lie in [0, 1], got {rate}")
    splits = {}
    for j in range(num_modalities):
        avail = [1.0] * num_modalities
        avail[j] = 1.0 - rate
        splits[f"miss_{j}"] = avail
    splits["both"] = [1.0 - rate / num_modalities] * num_modalities
    return splits


def variant_config(base: RunConfig, variant: str, **model_overrides) -> RunConfig:
    cfg = copy.deepcopy(base)
    cfg.model = dataclasses.replace(cfg.model, variant=variant, **model_overrides)
    return cfg


def grid_cells(cfg: RunConfig) -> list[Cell]:
    grid = cfg.eval.grid
    m = cfg.data.synthetic.num_modalities if cfg.data.source == "synthetic" else None
    cells = []
    for rate in grid.missing_rates:
        splits = table_splits(rate, m or 2)
        for split in grid.splits:
            if split not in splits:
                raise ValidationError(f"unknown split {split!r}; expected one of {sorted(splits)}")
            missing = MissingConfig(mode="availability", availability=splits[split])
            for variant in grid.variants:
                c = variant_config(cfg, variant)
                c.data = dataclasses.replace(c.data, train_missing=missing, test_missing=copy.deepcopy(missing))
                for seed in grid.seeds:
                    cells.append(Cell("grid", variant, c, seed, {"rate": rate, "split": split}))
    return cells


def run_grid(cfg: RunConfig, output_dir: str | Path | None = None, jobs: int = 1) -> dict:
    """Rows = (rate, split), columns = variants; OA and kappa x100 means over seeds."""
    rows = run_cells(grid_cells(cfg), jobs)
    summary = {
        "oa": _mean_table(rows, ("rate", "split"), "label", "oa"),
        "kappa_x100": _mean_table(rows, ("rate", "split"), "label", "kappa_x100"),
        "f1_macro": _mean_table(rows, ("rate", "split"), "label", "f1_macro"),
    }
    if output_dir is not None:
        out = _write_results(Path(output_dir) / "results" / "grid", rows, summary)
        (out / "table.txt").write_text(render_table(summary["oa"], corner="rate / split"))
    return {"rows": rows, "summary": summary}


ABLATIONS: dict[str, tuple[str, dict]] = {
    "full": ("mamol", {}),
    "no_dynamic": ("mamol", {"use_dynamic": False}),
    "no_static": ("mamol", {"use_shared": False, "use_modality_specific": False}),
    "no_modality_specific": ("mamol", {"use_modality_specific": False}),
    "baseline": ("baseline_frozen", {}),
}


def ablation_cells(cfg: RunConfig, names: Sequence[str] | None = None) -> list[Cell]:
    ab = cfg.eval.ablation
    cells = []
    for rate in ab.missing_rates:
        for name in names or ABLATIONS:
            variant, overrides = ABLATIONS[name]
            c = variant_config(cfg, variant, **overrides)
            c.data = dataclasses.replace(
                c.data,
                train_missing=dataclasses.replace(c.data.train_missing, mode="both", eta=rate),
                test_missing=dataclasses.replace(c.data.test_missing, mode="both", eta=rate),
            )
            for seed in ab.seeds:
                cells.append(Cell("ablation", name, c, seed, {"rate": rate}))
    return cells


def run_ablation(cfg: RunConfig, output_dir: str | Path | None = None, jobs: int = 1,
                 names: Sequence[str] | None = None) -> dict:
    """OA per (configuration, missing rate) plus the average over rates."""
    rows = run_cells(ablation_cells(cfg, names), jobs)
    table = _mean_table(rows, ("label",), "rate", "oa")
    for row in table.values():
        row["avg"] = float(np.mean(list(row.values())))
    summary = {"oa": table, "kappa_x100": _mean_table(rows, ("label",), "rate", "kappa_x100")}
    if output_dir is not None:
        out = _write_results(Path(output_dir) / "results" / "ablation", rows, summary)
        (out / "table.txt").write_text(render_table(table, corner="configuration"))
    return {"rows": rows, "summary": summary}


def generalization_cells(cfg: RunConfig) -> list[Cell]:
    g = cfg.eval.generalization
    train_missing = MissingConfig(mode=g.train_mode, eta=g.train_eta, modality=g.modality)
    protocols = {
        f"{eta:g}": MissingConfig(mode=g.test_mode, eta=eta, modality=g.modality) for eta in g.test_etas
    }
    cells = []
    for variant in g.variants:
        c = variant_config(cfg, variant)
        c.data = dataclasses.replace(c.data, train_missing=train_missing, test_missing=copy.deepcopy(train_missing))
        for seed in g.seeds:
            cells.append(Cell("generalization", variant, c, seed, {}, protocols))
    return cells


def run_generalization(cfg: RunConfig, output_dir: str | Path | None = None, jobs: int = 1) -> dict:
    """Train once per (variant, seed) and sweep the test missing rate; curves = mean OA per rate."""
    rows = [r for r in run_cells(generalization_cells(cfg), jobs) if "test_protocol" in r]
    curves = _mean_table(rows, ("label",), "test_protocol", "oa")
    summary = {"oa": curves, "train_mode": cfg.eval.generalization.train_mode,
               "test_mode": cfg.eval.generalization.test_mode}
    if output_dir is not None:
        out = _write_results(Path(output_dir) / "results" / "generalization", rows, summary)
        write_curves_csv(curves, out / "curves.csv")
        (out / "curves.svg").write_text(curves_svg(curves))
    return {"rows": rows, "summary": summary}


def write_curves_csv(curves: dict[str, dict[str, float]], path: Path) -> None:
    lines = ["label,test_eta,oa"]
    for label, pts in curves.items():
        for eta, oa in pts.items():
            lines.append(f"{label},{eta},{oa!r}")
    path.write_text("\n".join(lines) + "\n")


def curves_svg(curves: dict[str, dict[str, float]], width: int = 480, height: int = 320) -> str:
    """Dependency-free line plot of OA against test missing rate."""
    pad = 48
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    xs = sorted({float(k) for pts in curves.values() for k in pts})
    ys = [v for pts in curves.values() for v in pts.values()]
    if not xs:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"/>\n'
    x0, x1 = xs[0], xs[-1] if xs[-1] > xs[0] else xs[0] + 1.0
    y0, y1 = min(ys), max(ys)
    if y1 - y0 < 1e-9:
        y0, y1 = y0 - 0.01, y1 + 0.01

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle">test missing rate</text>',
        f'<text x="14" y="{height / 2:.1f}" transform="rotate(-90 14 {height / 2:.1f})" text-anchor="middle">OA (%)</text>',
    ]
    for x in xs:
        parts.append(f'<text x="{px(x):.1f}" y="{height - pad + 14}" text-anchor="middle">{x:g}</text>')
    for y in (y0, (y0 + y1) / 2, y1):
        parts.append(f'<text x="{pad - 4}" y="{py(y) + 4:.1f}" text-anchor="end">{100 * y:.1f}</text>')
    for i, (label, pts) in enumerate(curves.items()):
        color = colors[i % len(colors)]
        coords = " ".join(f"{px(float(k)):.1f},{py(v):.1f}" for k, v in sorted(pts.items(), key=lambda kv: float(kv[0])))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 14 * i}" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# desk-scale analogs of head / last placements: (injection layers, expert count)
DEFAULT_PLACEMENTS: dict[str, tuple[list[int], int]] = {
    "head_2x2": ([1, 2], 2),
    "last_2x2": ([3, 4], 2),
    "last_1x5": ([4], 5),
}


def placement_cells(cfg: RunConfig, placements: dict[str, tuple[list[int], int]] | None = None,
                    variants: Sequence[str] = ("moe_rep", "moe_ada", "moe_task", "mamol"),
                    seeds: Sequence[int] = (0,)) -> list[Cell]:
    cells = []
    for name, (layers, n_exp) in (placements or DEFAULT_PLACEMENTS).items():
        for variant in variants:
            counts = {
                "mamol": {"num_dynamic_experts": n_exp, "top_k": min(cfg.model.top_k, n_exp)},
                "moe_ada": {"ada_num_experts": n_exp, "ada_top_k": min(cfg.model.ada_top_k, n_exp)},
                "moe_task": {"task_num_experts": n_exp, "task_top_k": min(cfg.model.task_top_k, n_exp)},
                "moe_rep": {"rep_num_experts": n_exp, "rep_top_k": min(cfg.model.rep_top_k, n_exp)},
            }.get(variant, {})
            c = variant_config(cfg, variant, injection_layers=list(layers), **counts)
            for seed in seeds:
                cells.append(Cell("placement", variant, c, seed, {"placement": name}))
    return cells


def placement_sweep(cfg: RunConfig, placements: dict[str, tuple[list[int], int]] | None = None,
                    output_dir: str | Path | None = None, jobs: int = 1,
                    variants: Sequence[str] = ("moe_rep", "moe_ada", "moe_task", "mamol"),
                    seeds: Sequence[int] = (0,)) -> dict:
    rows = run_cells(placement_cells(cfg, placements, variants, seeds), jobs)
    summary = {
        "oa": _mean_table(rows, ("label",), "placement", "oa"),
        "kappa_x100": _mean_table(rows, ("label",), "placement", "kappa_x100"),
    }
    if output_dir is not None:
        out = _write_results(Path(output_dir) / "results" / "placement", rows, summary)
        (out / "table.txt").write_text(render_table(summary["oa"], corner="variant"))
    return {"rows": rows, "summary": summary}
