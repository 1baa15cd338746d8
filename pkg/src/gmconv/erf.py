"""Empirical receptive-field estimation and mask inspection.

The effective receptive field of a unit is measured the standard way: seed
the adjoint of the spatially central output unit (summed over channels)
with one, backpropagate to the input, and accumulate the absolute input
gradient over random probe images. Averaging and max-normalizing gives an
H x W influence map whose support always sits inside the theoretical
receptive field and whose spread is summarized by an intensity-weighted
radius.

Probe inputs default to unit-Gaussian noise; a stack of dataset images can
be supplied instead. Absolute values are accumulated (not signed
gradients) so maps stay comparable across nets with ReLUs.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import masks
from .layers import DynamicGMConvLayer, StaticGMConvLayer
from .tensor import GradTape, Tensor


@dataclass(frozen=True)
class ErfMap:
    """Normalized influence map plus the probe's provenance."""

    values: np.ndarray
    model_id: str
    layer_index: int
    unit: tuple[int, int]
    num_samples: int


def estimate_erf(
    model,
    layer_index: int,
    num_samples: int,
    rng: np.random.Generator | None = None,
    images: np.ndarray | None = None,
) -> ErfMap:
    """Measure the ERF of the central unit of one module's output.

    `layer_index` indexes `model.modules`; the probed module must produce
    a spatial (4D) output. `images`, when given, is an S x C x H x W
    stack cycled through for the probes; otherwise probes are fresh
    unit-Gaussian noise drawn from `rng`.
    """
    if not 0 <= layer_index < len(model.modules):
        raise ValueError(f"layer index {layer_index} out of range")
    if num_samples < 1:
        raise ValueError("need at least one probe sample")
    c, h, w = model.spec.input_shape
    if images is None and rng is None:
        rng = np.random.default_rng()

    acc = np.zeros((h, w))
    unit = (0, 0)
    for s in range(num_samples):
        if images is not None:
            xdat = np.asarray(images[s % len(images)], dtype=np.float64)
            if xdat.shape != (c, h, w):
                raise ValueError(
                    f"probe image shape {xdat.shape} does not match input {(c, h, w)}"
                )
            x = Tensor(xdat[None])
        else:
            x = Tensor(rng.normal(size=(1, c, h, w)))
        tape = GradTape()
        out = x
        for mod in model.modules[: layer_index + 1]:
            out = mod.forward(out, tape)
        if out.data.ndim != 4:
            raise ValueError(
                f"module {layer_index} has no spatial output (shape {out.data.shape})"
            )
        cy, cx = out.data.shape[2] // 2, out.data.shape[3] // 2
        unit = (cy, cx)
        seed = np.zeros_like(out.data)
        seed[0, :, cy, cx] = 1.0
        tape.backward(out, seed)
        acc += np.abs(x.grad[0]).sum(axis=0)

    mean = acc / num_samples
    peak = mean.max()
    if peak == 0.0:
        raise ValueError("influence map is identically zero; nothing to normalize")
    return ErfMap(mean / peak, model.spec.name, layer_index, unit, num_samples)


def erf_radius(erf) -> float:
    """Root of the intensity-weighted second moment about the centroid.

    Accepts an ErfMap or a bare non-negative grid. Scaling the map by any
    positive constant leaves the radius unchanged.
    """
    v = np.asarray(getattr(erf, "values", erf), dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"expected a 2D map, got shape {v.shape}")
    if np.any(v < 0):
        raise ValueError("influence values must be non-negative")
    total = v.sum()
    if total == 0.0:
        raise ValueError("all-zero map has no radius")
    ys, xs = np.indices(v.shape)
    cy = float((v * ys).sum() / total)
    cx = float((v * xs).sum() / total)
    second = float((v * ((ys - cy) ** 2 + (xs - cx) ** 2)).sum() / total)
    return float(np.sqrt(second))


def dump_layer_masks(model, out_dir: str) -> dict:
    """Write each masked layer's current mask grid (CSV + PGM) plus a JSON
    manifest of widths.

    Static layers record their raw and effective (clamped) sigma. Dynamic
    layers have no single mask; the dumped grid is their zero-descriptor
    prediction, and the manifest carries the module's shape and that
    baseline (sigma1, sigma2). A model with no masked layers yields an
    empty manifest.
    """
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for name, layer in model.masked_layer_items():
        k = layer.kernel_size
        if isinstance(layer, StaticGMConvLayer):
            raw = float(layer.sigma.data)
            mask = layer.current_mask()
            entry = {
                "layer": name,
                "kind": "static",
                "kernel_size": k,
                "sigma_raw": raw,
                "sigma_effective": masks.clamp_sigma(raw),
            }
        elif isinstance(layer, DynamicGMConvLayer):
            mod = layer.sigma_module
            zero = Tensor(np.zeros((1, mod.in_channels, 1, 1)))
            s1, s2 = mod.predict(zero)
            sig1, sig2 = float(s1.data[0]), float(s2.data[0])
            mask = masks.elliptic_mask(sig1, sig2, k)
            entry = {
                "layer": name,
                "kind": "dynamic",
                "kernel_size": k,
                "pattern": mod.pattern,
                "hidden_width": mod.hidden,
                "sigma1_zero_input": sig1,
                "sigma2_zero_input": sig2,
            }
        else:  # pragma: no cover - masked_layer_items only yields the above
            continue
        csv_name = f"{name}.csv"
        pgm_name = f"{name}.pgm"
        masks.export_mask(mask, os.path.join(out_dir, csv_name), "csv")
        masks.export_mask(mask, os.path.join(out_dir, pgm_name), "pgm")
        entry["csv"] = csv_name
        entry["pgm"] = pgm_name
        entries.append(entry)
    manifest = {"model": model.spec.name, "layers": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
