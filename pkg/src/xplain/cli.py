"""Command-line interface: analyze, grid, sweep, bbox, perturb, bench, make-model.

Exit codes: 0 success, 2 usage or configuration error, 3 load error,
4 compile or incompatibility error, 5 runtime or domain error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import statistics
import sys
import time

import numpy as np

from . import viz
from .analyzers import (
    Analyzer,
    MethodSpec,
    PATTERN_METHODS,
    PROPAGATION_METHODS,
    build_analyzer,
)
from .autodiff import NeuronSelector
from .errors import (
    ConfigError,
    DomainError,
    IncompatibilityError,
    LoadError,
    RegistrationError,
    ShapeError,
    XplainError,
)
from .model import Model, files_hash, forward, load_model, save_model, strip_softmax
from .propagation import Patterns, estimate_patterns_linear, load_patterns
from .saliency import Saliency, save_saliency
from .segmentation import SegmentationConfig, segment
from .tensor import Tensor, read_tensor, write_tensor
from .zoo import make_reference_model, seeded_input

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_LOAD = 3
EXIT_COMPILE = 4
EXIT_RUNTIME = 5


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xplain", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def add_model(p, repeat=False):
        kw = {"action": "append"} if repeat else {}
        p.add_argument("--model", required=True, **kw)
        p.add_argument("--weights", required=True, **kw)
        p.add_argument("--fold-bn", action="store_true")

    def add_method(p, repeat=False):
        kw = {"action": "append"} if repeat else {}
        p.add_argument("--method", default=None if repeat else "gradient", **kw)
        p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE")

    def add_common(p):
        p.add_argument("--neuron", default="max")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--dataset")
        p.add_argument("--patterns")

    p = sub.add_parser("analyze", help="one method, one input, saliency files out")
    add_model(p)
    add_method(p)
    add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--viz", choices=["heatmap", "graymap", "scale", "mask", "blend", "project"]
    )

    p = sub.add_parser("grid", help="inputs (or models) x methods comparison image")
    add_model(p, repeat=True)
    add_method(p, repeat=True)
    add_common(p)
    p.add_argument("--input", action="append", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="hyper-parameter sweep image plus tensors")
    add_model(p)
    add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--kind", choices=["ig_reference", "sg_scale"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("bbox", help="inside/outside attribution ratio")
    p.add_argument("--saliency", required=True)
    p.add_argument("--bbox", required=True, metavar="X,Y,W,H")

    p = sub.add_parser("perturb", help="prediction decay under block replacement")
    add_model(p)
    add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--saliency", required=True)
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", help="setup vs run timing, plan reuse vs rebuild")
    add_model(p)
    add_method(p, repeat=True)
    add_common(p)
    p.add_argument("-n", "--n", type=int, default=512)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--out", required=True)

    p = sub.add_parser("make-model", help="write a seeded reference model")
    p.add_argument("--kind", choices=["linear", "mlp", "cnn"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="path prefix; writes .json and .xwts")
    return ap


def _parse_params(pairs: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--param expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key] = value
    return out


def _parse_neuron(text: str) -> NeuronSelector:
    if text == "max":
        return NeuronSelector("max")
    try:
        return NeuronSelector("index", int(text))
    except ValueError as exc:
        raise ConfigError(f"--neuron expects 'max' or an integer, got {text!r}") from exc


def _load_input(path: str, model: Model) -> Tensor:
    if str(path).lower().endswith(".png"):
        arr01 = viz.read_png(path)
        if len(model.input_shape) != 4:
            raise LoadError("PNG inputs need an image-shaped model input")
        _, h, w, c = model.input_shape
        if arr01.shape[:2] != (h, w):
            raise LoadError(f"PNG size {arr01.shape[:2]} != model input ({h}, {w}); no resampling")
        if c == 1:
            arr01 = arr01.mean(axis=2, keepdims=True)
        elif c != 3:
            raise LoadError(f"cannot map RGB PNG onto {c} channels")
        lo, hi = model.input_range
        data = (lo + arr01 * (hi - lo)).astype(np.float32)
        return Tensor(data[None, ...])
    t = read_tensor(path)
    if t.shape != model.input_shape:
        raise ShapeError(f"input tensor shape {t.shape} != model input {model.input_shape}")
    return t


def _resolve_patterns(args, model: Model, method: str) -> Patterns | None:
    if method not in PATTERN_METHODS:
        return None
    if args.patterns:
        return load_patterns(args.patterns)
    if args.dataset:
        return estimate_patterns_linear(model, read_tensor(args.dataset))
    raise ConfigError(f"method {method!r} needs --patterns or --dataset")


def _render(sal: Saliency, mode: str, x: Tensor, model: Model) -> viz.RGBImage:
    if mode == "heatmap":
        return viz.to_heatmap(sal)
    if mode == "graymap":
        return viz.to_graymap(sal)
    if mode == "project":
        return viz.project(sal)
    x_raw = viz.raw_from_input(x, model.input_range)
    if mode == "scale":
        return viz.scale_input(sal, x_raw)
    if mode == "blend":
        return viz.blend_overlay(sal, x_raw)
    if mode == "mask":
        seg = segment(x.data[0], SegmentationConfig())
        return viz.mask_input(sal, seg, x_raw)
    raise ConfigError(f"unknown viz mode {mode!r}")


def cmd_analyze(args) -> int:
    model = strip_softmax(load_model(args.model, args.weights, fold_bn=args.fold_bn))
    x = _load_input(args.input, model)
    spec = MethodSpec.parse(args.method, _parse_params(args.param))
    sel = _parse_neuron(args.neuron)
    patterns = _resolve_patterns(args, model, spec.method)
    analyzer = build_analyzer(spec, model, sel, patterns=patterns, seed=args.seed)
    sal = analyzer.analyze(x)
    sal.model_hash = files_hash(args.model, args.weights)
    save_saliency(sal, f"{args.out}.xten", f"{args.out}.json")
    if args.viz:
        viz.write_png(_render(sal, args.viz, x, model), f"{args.out}.png")
    print(f"wrote {args.out}.xten (method={sal.method}, neuron={sal.neuron_index})")
    return EXIT_OK


def _grid_cell(analyzer: Analyzer, x: Tensor) -> np.ndarray:
    sal = analyzer.analyze(x)
    img = viz.project(sal) if analyzer.method == "patternnet" else viz.to_heatmap(sal)
    return img.pixels


def _tile(cells: list[list[np.ndarray]]) -> np.ndarray:
    max_h = max(c.shape[0] for row in cells for c in row)
    max_w = max(c.shape[1] for row in cells for c in row)
    rows = []
    for row in cells:
        padded = []
        for c in row:
            canvas = np.ones((max_h, max_w, 3))
            canvas[: c.shape[0], : c.shape[1]] = c
            padded.append(canvas)
        rows.append(np.concatenate(padded, axis=1))
    return np.concatenate(rows, axis=0)


def cmd_grid(args) -> int:
    models = args.model if isinstance(args.model, list) else [args.model]
    weights = args.weights if isinstance(args.weights, list) else [args.weights]
    if len(models) != len(weights):
        raise ConfigError("--model and --weights must be given the same number of times")
    methods = args.method or ["gradient"]
    inputs = args.input
    architecture_mode = len(models) > 1
    if architecture_mode and len(inputs) != 1:
        raise ConfigError("architecture mode (several models) takes exactly one --input")

    loaded = [strip_softmax(load_model(m, w, fold_bn=args.fold_bn)) for m, w in zip(models, weights)]
    sel = _parse_neuron(args.neuron)
    raw_params = _parse_params(args.param)
    warnings = 0
    cells: list[list[np.ndarray]] = []
    row_defs = (
        [(model, inputs[0]) for model in loaded]
        if architecture_mode
        else [(loaded[0], path) for path in inputs]
    )
    for model, input_path in row_defs:
        x = _load_input(input_path, model)
        row = []
        for name in methods:
            try:
                spec = MethodSpec.parse(name, raw_params)
                patterns = _resolve_patterns(args, model, spec.method)
                analyzer = build_analyzer(spec, model, sel, patterns=patterns, seed=args.seed)
                row.append(_grid_cell(analyzer, x))
            except XplainError as exc:
                warnings += 1
                print(f"warning: cell ({input_path}, {name}) failed: {exc}", file=sys.stderr)
                h, w = (model.input_shape[1], model.input_shape[2]) if len(model.input_shape) == 4 else (1, model.input_shape[1])
                cell = np.zeros((h, w, 3))
                cell[..., 0] = 0.5  # dark red marks a failed cell
                row.append(cell)
        cells.append(row)
    viz.write_png(viz.RGBImage(_tile(cells)), args.out)
    print(f"wrote {args.out} ({len(cells)} rows x {len(cells[0])} columns, {warnings} warnings)")
    return EXIT_OK


def cmd_sweep(args) -> int:
    model = strip_softmax(load_model(args.model, args.weights, fold_bn=args.fold_bn))
    x = _load_input(args.input, model)
    sel = _parse_neuron(args.neuron)
    raw_params = _parse_params(args.param)
    lo, hi = model.input_range
    cells: list[list[np.ndarray]] = []
    tensors: dict[tuple[int, int], Tensor] = {}
    if args.kind == "ig_reference":
        spec = MethodSpec.parse("integrated_gradients", raw_params)
        row = []
        for col, ref in enumerate(np.linspace(lo, hi, num=5)):
            cell_spec = MethodSpec(spec.method, {**spec.params, "reference": float(ref)})
            analyzer = build_analyzer(cell_spec, model, sel, seed=args.seed)
            sal = analyzer.analyze(x)
            tensors[(0, col)] = sal.tensor
            row.append(viz.to_heatmap(sal).pixels)
        cells.append(row)
    else:  # sg_scale
        spec = MethodSpec.parse("smoothgrad", raw_params)
        for r, post in enumerate(("abs", "square")):
            row = []
            for col in range(5):
                noise = (hi - lo) * col / 5
                cell_spec = MethodSpec(
                    spec.method, {**spec.params, "noise_scale": noise, "postprocess": post}
                )
                analyzer = build_analyzer(cell_spec, model, sel, seed=args.seed)
                sal = analyzer.analyze(x)
                tensors[(r, col)] = sal.tensor
                row.append(viz.to_heatmap(sal).pixels)
            cells.append(row)
    for (r, c), t in tensors.items():
        write_tensor(t, f"{args.out}_cell{r}_{c}.xten")
    viz.write_png(viz.RGBImage(_tile(cells)), f"{args.out}.png")
    print(f"wrote {args.out}.png and {len(tensors)} tensors")
    return EXIT_OK


def bbox_ratio(e: Saliency, bbox: tuple[int, int, int, int]) -> float:
    """Sum of |attribution| inside the box divided by the sum outside."""
    arr = np.abs(e.tensor.data)
    if arr.ndim == 4:
        arr = arr[0]
    if arr.ndim != 3:
        raise ConfigError("bbox ratio needs an image-shaped saliency")
    bx, by, bw, bh = bbox
    h, w = arr.shape[:2]
    if bw <= 0 or bh <= 0 or bx < 0 or by < 0 or bx + bw > w or by + bh > h:
        raise ConfigError(f"bbox {bbox} outside image bounds ({h}, {w})")
    if bw * bh >= h * w:
        raise ConfigError("bbox covers the whole image; outside region is empty")
    mask = np.zeros((h, w), dtype=bool)
    mask[by : by + bh, bx : bx + bw] = True
    inside = float(arr[mask].sum())
    outside = float(arr[~mask].sum())
    if outside == 0.0:
        if inside == 0.0:
            print("warning: zero attribution everywhere; ratio undefined", file=sys.stderr)
            return float("nan")
        return float("inf")
    return inside / outside


def cmd_bbox(args) -> int:
    try:
        parts = [int(v) for v in args.bbox.split(",")]
        if len(parts) != 4:
            raise ValueError
    except ValueError:
        raise ConfigError(f"--bbox expects X,Y,W,H integers, got {args.bbox!r}") from None
    sal = Saliency(read_tensor(args.saliency), "file")
    ratio = bbox_ratio(sal, tuple(parts))
    if math.isnan(ratio):
        print("nan")
    elif math.isinf(ratio):
        print("inf")
    else:
        print(f"{ratio:.6g}")
    return EXIT_OK


def perturbation_curve(
    model: Model, x: Tensor, sal: Saliency, patch: int, sel: NeuronSelector
) -> list[tuple[int, float, float]]:
    """Replace blocks in descending attribution order, tracking the output."""
    if sal.tensor.shape != x.shape:
        raise ShapeError(f"saliency shape {sal.tensor.shape} != input shape {x.shape}")
    if x.data.ndim != 4:
        raise ConfigError("perturbation curve needs an image-shaped input")
    _, h, w, _ = x.shape
    if patch < 1:
        raise ConfigError("patch must be >= 1")
    if patch > h and patch > w:
        raise ConfigError(f"patch {patch} larger than both image dims ({h}, {w})")
    out0 = forward(model, x)[model.output]
    index = sel.resolve(out0)
    blocks = []
    for i in range(0, h, patch):
        for j in range(0, w, patch):
            score = float(sal.tensor.data[:, i : i + patch, j : j + patch, :].sum())
            blocks.append((score, i, j))
    blocks.sort(key=lambda t: (-t[0], t[1], t[2]))
    lo = model.input_range[0]
    current = x.data.copy()
    rows = [(0, 0.0, float(out0.data[0, index]))]
    for step, (_, i, j) in enumerate(blocks, start=1):
        current[:, i : i + patch, j : j + patch, :] = lo
        value = forward(model, Tensor(current.copy()))[model.output].data[0, index]
        rows.append((step, step / len(blocks), float(value)))
    return rows


def cmd_perturb(args) -> int:
    model = strip_softmax(load_model(args.model, args.weights, fold_bn=args.fold_bn))
    x = _load_input(args.input, model)
    sal = Saliency(read_tensor(args.saliency), "file")
    rows = perturbation_curve(model, x, sal, args.patch, _parse_neuron(args.neuron))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "fraction_perturbed", "output_value"])
        for step, frac, value in rows:
            writer.writerow([step, f"{frac:.6f}", f"{value:.8g}"])
    print(f"wrote {args.out} ({len(rows)} rows)")
    return EXIT_OK


def run_bench(
    model: Model,
    methods: list[str],
    n: int,
    repeats: int,
    seed: int,
    raw_params: dict[str, str] | None = None,
) -> list[dict]:
    """Per method and repeat: setup time, plan-reuse run time, rebuild time."""
    if n < 1 or repeats < 1:
        raise ConfigError("n and repeats must be >= 1")
    inputs = [seeded_input(model, seed + i) for i in range(n)]
    sel = NeuronSelector("max")
    records = []
    for name in methods:
        spec = MethodSpec.parse(name, raw_params or {})
        for rep in range(repeats):
            t0 = time.perf_counter()
            analyzer = build_analyzer(spec, model, sel, seed=seed)
            t1 = time.perf_counter()
            for x in inputs:
                analyzer.analyze(x)
            t2 = time.perf_counter()
            for x in inputs:
                build_analyzer(spec, model, sel, seed=seed).analyze(x)
            t3 = time.perf_counter()
            records.append(
                {
                    "method": name,
                    "repeat": rep,
                    "n": n,
                    "setup_seconds": t1 - t0,
                    "run_seconds": t2 - t1,
                    "naive_seconds": t3 - t2,
                }
            )
    return records


def write_bench_csv(records: list[dict], path) -> None:
    fields = ["method", "repeat", "n", "setup_seconds", "run_seconds", "naive_seconds", "run_std"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        methods = []
        for r in records:
            if r["method"] not in methods:
                methods.append(r["method"])
            writer.writerow({**r, "run_std": ""})
        for name in methods:
            rows = [r for r in records if r["method"] == name]
            runs = [r["run_seconds"] for r in rows]
            writer.writerow(
                {
                    "method": name,
                    "repeat": "mean",
                    "n": rows[0]["n"],
                    "setup_seconds": statistics.mean(r["setup_seconds"] for r in rows),
                    "run_seconds": statistics.mean(runs),
                    "naive_seconds": statistics.mean(r["naive_seconds"] for r in rows),
                    "run_std": statistics.pstdev(runs),
                }
            )


def cmd_bench(args) -> int:
    model = strip_softmax(load_model(args.model, args.weights, fold_bn=args.fold_bn))
    methods = args.method or ["deconvnet", "lrp_epsilon", "lrp_composite"]
    records = run_bench(model, methods, args.n, args.repeats, args.seed, _parse_params(args.param))
    write_bench_csv(records, args.out)
    for name in dict.fromkeys(r["method"] for r in records):
        rows = [r for r in records if r["method"] == name]
        mean_run = statistics.mean(r["run_seconds"] for r in rows)
        mean_naive = statistics.mean(r["naive_seconds"] for r in rows)
        print(f"{name}: run {mean_run:.3f}s vs rebuild {mean_naive:.3f}s over n={args.n}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_make_model(args) -> int:
    model = make_reference_model(args.kind, args.seed)
    save_model(model, f"{args.out}.json", f"{args.out}.xwts")
    print(f"wrote {args.out}.json and {args.out}.xwts")
    return EXIT_OK


_COMMANDS = {
    "analyze": cmd_analyze,
    "grid": cmd_grid,
    "sweep": cmd_sweep,
    "bbox": cmd_bbox,
    "perturb": cmd_perturb,
    "bench": cmd_bench,
    "make-model": cmd_make_model,
}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LoadError as exc:
        print(f"load error: {exc}", file=sys.stderr)
        return EXIT_LOAD
    except (IncompatibilityError, RegistrationError) as exc:
        print(f"compile error: {exc}", file=sys.stderr)
        return EXIT_COMPILE
    except (DomainError, ShapeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except XplainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
