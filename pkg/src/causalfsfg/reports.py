"""Cost accounting, heatmap export and metric tables."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig

FLOPS_PER_MAC = 2


@dataclass(frozen=True)
class LayerCost:
    name: str
    params: int
    macs: int  # per episode forward pass
    activations: int = 0  # output elements retained per episode


@dataclass(frozen=True)
class CostReport:
    params: int
    macs: int
    working_set_bytes: int
    layers: tuple = ()

    @property
    def params_k(self) -> float:
        return self.params / 1e3

    @property
    def gflops(self) -> float:
        return self.macs * FLOPS_PER_MAC / 1e9

    def summary(self) -> str:
        head = (f"# FLOPs counted as {FLOPS_PER_MAC} x multiply-accumulates of conv/linear/matmul "
                f"layers; working set is an analytic activation estimate, not a measurement\n")
        return (head + f"params_k={self.params_k:.2f} gflops={self.gflops:.4f} "
                f"working_set_gb={self.working_set_bytes / 1e9:.4f}")


def conv2d_cost(name, c_in, c_out, kernel, h_out, w_out, batch=1, bias=True) -> LayerCost:
    params = c_in * c_out * kernel * kernel + (c_out if bias else 0)
    macs = batch * h_out * w_out * c_out * c_in * kernel * kernel
    return LayerCost(name, params, macs, batch * c_out * h_out * w_out)


def linear_cost(name, d_in, d_out, tokens, bias=True) -> LayerCost:
    return LayerCost(name, d_in * d_out + (d_out if bias else 0), tokens * d_in * d_out,
                     tokens * d_out)


def model_layers(config: ModelConfig, n_way: int, k_shot: int, n_query: int) -> list[LayerCost]:
    bb = config.backbone
    batch = n_way * (k_shot + n_query)
    n_q = n_way * n_query
    layers = []
    s = bb.input_size
    widths = (bb.in_channels, *bb.channels)
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(conv2d_cost(f"backbone.{i}.conv", a, b, 3, s, s, batch))
        layers.append(LayerCost(f"backbone.{i}.bn", 2 * b, 0, batch * b * (s // 2) ** 2))
        s //= 2

    scales = bb.scale_shapes()
    c4, h, w = scales[-1]
    width = c4
    if config.use_imse:
        g = config.gamma
        d = g + 1
        hidden = config.ffn_mult * g
        for i, (c, hi, wi) in enumerate(scales):
            L = hi * wi
            n_tok = L + (1 if config.token_mode == "sequence" else 0)
            tok = batch * n_tok
            layers.append(conv2d_cost(f"imse.align.{i}", c, d, 1, hi, wi, batch))
            layers.append(LayerCost(f"imse.attn.{i}.norms", 4 * d, 0))
            layers.append(linear_cost(f"imse.attn.{i}.qkv", d, 3 * d, tok))
            layers.append(LayerCost(f"imse.attn.{i}.scores", 0, 2 * batch * n_tok * n_tok * d,
                                    batch * n_tok * n_tok))
            layers.append(linear_cost(f"imse.attn.{i}.ffn1", d, hidden, tok))
            layers.append(linear_cost(f"imse.attn.{i}.ffn2", hidden, d, tok))
        width = g
    L = h * w
    if config.use_imfr:
        k = config.mask_kernel
        layers.append(conv2d_cost("imfr.mask", 2, 1, k, h, w, n_q))
        layers.append(linear_cost("imfr.w_q", width, width, n_q * L, bias=False))
        layers.append(linear_cost("imfr.w_kv", width, 2 * width, n_way * L, bias=False))
        layers.append(LayerCost("imfr.attention", 0, 2 * n_q * n_way * L * L * width,
                                n_q * n_way * L * (L + width)))
    layers.append(LayerCost("metric.distance", 0, n_q * n_way * L * width, n_q * n_way))
    return layers


def count_params_flops(config, n_way: int = 5, k_shot: int = 1, n_query: int = 15,
                       bytes_per_element: int = 4) -> CostReport:
    """Exact parameter count and closed-form MACs for one episode.

    ``config`` is a ModelConfig or an explicit list of LayerCost records.
    """
    layers = (model_layers(config, n_way, k_shot, n_query) if isinstance(config, ModelConfig)
              else list(config))
    return CostReport(
        params=sum(l.params for l in layers),
        macs=sum(l.macs for l in layers),
        working_set_bytes=bytes_per_element * sum(l.activations for l in layers),
        layers=tuple(layers),
    )


# ---------------------------------------------------------------------------
# heatmaps


def normalize_map(a: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant map becomes 0.5 everywhere."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.full_like(a, 0.5)
    return (a - lo) / (hi - lo)


def upsample_nearest(a: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = a.shape
    rows = np.arange(size[0]) * h // size[0]
    cols = np.arange(size[1]) * w // size[1]
    return a[rows[:, None], cols[None, :]]


def _save_gray(a: np.ndarray, path: Path):
    from PIL import Image
    Image.fromarray(np.round(a * 255).astype(np.uint8), mode="L").save(path)


def _save_rgb(img: np.ndarray, path: Path):
    from PIL import Image
    arr = np.round(np.clip(img, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


@torch.no_grad()
def export_heatmaps(model, images: torch.Tensor, out_dir, prefix: str = "sample") -> dict:
    """Per sample: the input, channel-mean maps of the 4 scales and of the fused feature.

    Files are PPM (input) and PGM (maps) at input resolution, plus manifest.json.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    dtype = next(model.parameters()).dtype
    feats, extras = model.features(images.to(dtype))
    size = tuple(images.shape[-2:])
    manifest = {"samples": []}
    for i in range(len(images)):
        entry = {"index": i, "files": []}
        path = out_dir / f"{prefix}{i:03d}_input.ppm"
        _save_rgb(images[i].double().numpy(), path)
        entry["files"].append(path.name)
        rows = [(f"scale{j + 1}", m[i]) for j, m in enumerate(extras["scales"])]
        if model.imse is not None:
            rows.append(("intervened", feats[i]))
            entry["scale_weights"] = extras["scale_weights"][i].tolist()
        for name, fmap in rows:
            heat = upsample_nearest(normalize_map(fmap.mean(dim=0).double().numpy()), size)
            path = out_dir / f"{prefix}{i:03d}_{name}.pgm"
            _save_gray(heat, path)
            entry["files"].append(path.name)
        manifest["samples"].append(entry)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


# ---------------------------------------------------------------------------
# metric tables

FIELDS = ("name", "use_imse", "use_imfr", "mean_accuracy", "ci95_halfwidth", "n_episodes",
          "config_fingerprint")


def report_rows(reports) -> list[dict]:
    """Normalize an EvalReport, a list of them, or ablation rows into flat records."""
    if not isinstance(reports, (list, tuple)):
        reports = [reports]
    rows = []
    for i, r in enumerate(reports):
        if isinstance(r, dict) and "report" in r:
            rec = {"name": f"imse={int(r['use_imse'])},imfr={int(r['use_imfr'])}",
                   "use_imse": r["use_imse"], "use_imfr": r["use_imfr"], **r["report"].as_dict()}
        else:
            rec = {"name": f"report{i}", "use_imse": "", "use_imfr": "", **r.as_dict()}
        rows.append(rec)
    return rows


def export_metrics(reports, out_dir, formats=("csv", "json"), stem: str = "metrics") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = report_rows(reports)
    written = []
    for fmt in formats:
        path = out_dir / f"{stem}.{fmt}"
        if fmt == "json":
            path.write_text(json.dumps(rows, indent=2))
        elif fmt in ("csv", "tsv"):
            with open(path, "w", newline="") as f:
                writer = csv.DictWriter(f, FIELDS, delimiter="," if fmt == "csv" else "\t",
                                        lineterminator="\n")
                writer.writeheader()
                for r in rows:
                    writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                                     for k, v in r.items()})
        else:
            raise ValueError(f"unknown format {fmt!r}")
        written.append(path)
    return written


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f, delimiter="," if path.suffix == ".csv" else "\t"))
    for r in rows:
        for k in ("mean_accuracy", "ci95_halfwidth"):
            r[k] = float(r[k])
        r["n_episodes"] = int(r["n_episodes"])
        for k in ("use_imse", "use_imfr"):
            r[k] = {"True": True, "False": False}.get(r[k], r[k])
    return rows


def cost_as_dict(report: CostReport) -> dict:
    d = {"params": report.params, "params_k": report.params_k, "macs": report.macs,
         "gflops": report.gflops, "working_set_bytes": report.working_set_bytes,
         "flops_per_mac": FLOPS_PER_MAC}
    d["layers"] = [asdict(l) for l in report.layers]
    return d
