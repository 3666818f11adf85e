"""Command implementations behind the CLI; each is importable and returns structured results."""

from __future__ import annotations

import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .. import numerics as nm
from ..isp import count_params, init_input_adapters, init_nilut, input_adapter_forward, sub
from ..model_adapters import init_model_adapter
from ..rawio import (
    BayerImage,
    demosaic_bilinear,
    encode_display,
    normalize_levels,
    read_pgm16,
    read_rawdesk,
    render_display,
)
from ..tasks.backbone import init_backbone, init_head
from ..tasks.metrics import per_class_iou
from .checkpoint import Checkpoint, load_checkpoint
from .config import MODES, RunConfig
from . import trainer as T

logger = logging.getLogger(__name__)

ABLATION_ROWS = (
    ("base", {"use_pk": False, "use_pm": False, "use_lut": False, "use_m": False}),
    ("+PK", {"use_pk": True, "use_pm": False, "use_lut": False, "use_m": False}),
    ("+PM", {"use_pk": True, "use_pm": True, "use_lut": False, "use_m": False}),
    ("+LUT", {"use_pk": True, "use_pm": True, "use_lut": True, "use_m": False}),
    ("+M", {"use_pk": True, "use_pm": True, "use_lut": True, "use_m": True}),
)


def read_raw(path) -> BayerImage:
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        return read_pgm16(path)
    return read_rawdesk(path)


# -- evaluation ----------------------------------------------------------------


def cmd_eval(checkpoint, overrides: Optional[dict] = None) -> dict:
    """Val metrics of a trained checkpoint on the data its config describes."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    cfg = RunConfig.from_dict({**ckpt.config, **(overrides or {})})
    plain = ckpt.meta.get("kind") == "pretrain"
    data = T.srgb_task_data(cfg) if plain else T.raw_task_data(cfg)
    ev = T.evaluate(ckpt.weights, data, cfg, plain=plain)
    return {"loss": ev["loss"], "miou": ev["miou"],
            "per_class_iou": per_class_iou(ev["pred"], data.labels[data.val_idx]).tolist()}


# -- ablation ------------------------------------------------------------------


@dataclass
class AblationRun:
    row: str
    mode: str
    seed: int
    miou: float
    config: dict


@dataclass
class AblationTable:
    rows: list
    modes: list
    seeds: list
    runs: list = field(default_factory=list)

    def scores(self, row: str, mode: str) -> list:
        return [r.miou for r in self.runs if r.row == row and r.mode == mode]

    def median(self, row: str, mode: str) -> float:
        return float(statistics.median(self.scores(row, mode)))

    def delta(self, row: str, mode: str) -> float:
        return self.median(row, mode) - self.median(self.rows[0], mode)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "modes": self.modes, "seeds": self.seeds,
                "median": {r: {m: self.median(r, m) for m in self.modes} for r in self.rows},
                "runs": [vars(r) for r in self.runs]}

    def format(self) -> str:
        head = f"{'row':8s}" + "".join(f"{m:>20s}" for m in self.modes)
        lines = [head]
        for r in self.rows:
            cells = []
            for m in self.modes:
                d = self.delta(r, m)
                cells.append(f"{100 * self.median(r, m):8.2f}" + ("" if r == self.rows[0] else f" ({100 * d:+.2f})"))
            lines.append(f"{r:8s}" + "".join(f"{c:>20s}" for c in cells))
        return "\n".join(lines)


_PRETRAIN_CACHE: dict = {}


def pretrained_for(cfg: RunConfig, cache_dir: Optional[Path] = None) -> dict:
    """Backbone + head pretrained on clean sRGB for ``cfg.seed`` (cached in memory and optionally on disk)."""
    key = (cfg.seed, cfg.dataset, cfg.n_scenes, cfg.data_seed, cfg.val_fraction, cfg.pretrain_epochs,
           cfg.batch_size, cfg.lr, cfg.optimizer)
    if key in _PRETRAIN_CACHE:
        return _PRETRAIN_CACHE[key]
    path = None
    if cache_dir is not None:
        tag = "_".join(str(k) for k in key).replace("/", "-")
        path = Path(cache_dir) / f"pretrain_{tag}.ckpt"
        if path.is_file():
            _PRETRAIN_CACHE[key] = load_checkpoint(path).weights
            return _PRETRAIN_CACHE[key]
    ckpt = T.pretrain_backbone(cfg, out=path)
    _PRETRAIN_CACHE[key] = ckpt.weights
    return ckpt.weights


def cmd_ablate(cfg: RunConfig, seeds: Sequence[int] = (0, 1, 2), modes: Sequence[str] = MODES,
               pretrain: bool = True, cache_dir: Optional[Path] = None,
               runner: Optional[Callable] = None, log: Optional[Callable] = None) -> AblationTable:
    """Cumulative toggle rows over ``modes`` and ``seeds``; every row shares data and seeds.

    Without ``cfg.pretrained`` and with ``pretrain`` set, each seed gets its
    own sRGB-pretrained backbone, reused by every row and mode.
    """
    runner = runner or (lambda c, pw: T.final_miou(T.train(c, pretrained=pw)))
    table = AblationTable([r for r, _ in ABLATION_ROWS], list(modes), list(seeds))
    for mode in modes:
        for seed in seeds:
            base = cfg.replace(mode=mode, seed=seed)
            pw = None
            if cfg.pretrained:
                pw = load_checkpoint(cfg.pretrained).weights
            elif pretrain:
                pw = pretrained_for(base, cache_dir)
            for row, toggles in ABLATION_ROWS:
                run_cfg = base.replace(**toggles)
                miou = runner(run_cfg, pw)
                table.runs.append(AblationRun(row, mode, seed, float(miou), run_cfg.to_dict()))
                if log:
                    log({"row": row, "mode": mode, "seed": seed, "miou": float(miou)})
    return table


# -- parameter accounting ------------------------------------------------------


def cmd_param_report(lut_dim: int = 32, lut_sweep: Sequence[int] = (16, 32, 64, 128)) -> dict:
    """Parameter counts of every block built from default constructors."""
    rng = np.random.default_rng(0)
    inp = init_input_adapters(rng, lut_dim=lut_dim)
    counts = {
        "PK": count_params(sub(inp, "pk")),
        "PM": count_params(sub(inp, "pm")),
        "LUT": count_params(sub(inp, "lut")),
        "M": count_params(init_model_adapter(rng)),
    }
    counts["input_adapters"] = counts["PK"] + counts["PM"] + counts["LUT"]
    counts["adapters_total"] = counts["input_adapters"] + counts["M"]
    counts["backbone"] = count_params(init_backbone(rng))
    counts["head"] = count_params(init_head(rng))
    counts["lut_sweep"] = {d: count_params(init_nilut(rng, d)) for d in lut_sweep}
    return counts


def format_param_report(counts: dict) -> str:
    def k(n):
        return f"{n / 1000:.2f}K"
    lines = [f"{name:16s}{counts[name]:>10d}  {k(counts[name])}"
             for name in ("PK", "PM", "LUT", "M", "input_adapters", "adapters_total", "backbone", "head")]
    lines.append("LUT width sweep:")
    lines += [f"  d={d:<4d}{n:>10d}  {k(n)}" for d, n in counts["lut_sweep"].items()]
    return "\n".join(lines)


# -- stage rendering -----------------------------------------------------------


def cmd_render_stages(raw_path, checkpoint, out_dir, mode: Optional[str] = None) -> dict:
    """Write ``I1.png`` .. ``I5.png``, ``montage.png`` and ``params.json`` for one RAW file.

    Raises :class:`CheckpointNotFoundError` when ``checkpoint`` is missing.
    """
    ckpt = load_checkpoint(checkpoint)
    cfg = RunConfig.from_dict(ckpt.config) if ckpt.config else RunConfig()
    mode = mode or cfg.mode
    raw = read_raw(raw_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with nm.precision("train"):
        trace = input_adapter_forward(raw, sub(ckpt.weights, "isp"), mode, cfg.use_pk, cfg.use_pm, cfg.use_lut)
    paths, panels = {}, []
    for k in range(1, 6):
        img = trace.stage_image(k)
        paths[f"I{k}"] = out_dir / f"I{k}.png"
        render_display(img, paths[f"I{k}"])
        panels.append(encode_display(img))
    gap = np.full((panels[0].shape[0], 2, 3), 255, dtype=np.uint8)
    row = [panels[0]]
    for p in panels[1:]:
        row += [gap, p]
    from PIL import Image

    paths["montage"] = out_dir / "montage.png"
    Image.fromarray(np.concatenate(row, axis=1)).save(paths["montage"], format="PNG")
    params = {"mode": mode, "means": [float(trace.stage_image(k).mean()) for k in range(1, 6)]}
    if trace.kernel_params is not None:
        params["kernel"] = trace.kernel_params.values()
    if trace.color_params is not None:
        params["color"] = trace.color_params.values()
    (out_dir / "params.json").write_text(json.dumps(params, indent=1))
    return {"paths": paths, "params": params}


# -- one-file tools --------------------------------------------------------------


def cmd_demosaic(raw_path, out_png, gamma: float = 1 / 2.2) -> np.ndarray:
    raw = read_raw(raw_path)
    img = demosaic_bilinear(normalize_levels(raw), raw.pattern)
    render_display(img, out_png, gamma)
    return img


def cmd_isp(raw_path, out_png, checkpoint: Optional[str] = None, mode: str = "normal",
            toggles: Optional[dict] = None, lut_dim: int = 32) -> dict:
    """Run the input adapters on one RAW file with checkpoint (or zero-init) weights."""
    if checkpoint:
        weights = sub(load_checkpoint(checkpoint).weights, "isp")
    else:
        weights = init_input_adapters(np.random.default_rng(0), lut_dim=lut_dim)
    toggles = toggles or {}
    with nm.precision("train"):
        trace = input_adapter_forward(read_raw(raw_path), weights, mode, toggles.get("use_pk", True),
                                      toggles.get("use_pm", True), toggles.get("use_lut", True))
    render_display(trace.stage_image(5), out_png)
    out = {"output": str(out_png)}
    if trace.kernel_params is not None:
        out["kernel"] = trace.kernel_params.values()
    if trace.color_params is not None:
        out["color"] = trace.color_params.values()
    return out

