"""Command-line surface: ``regforge <subcommand> ...``.

Every subcommand writes one aggregated JSON report (plus per-image
heatmaps where relevant) under ``--out`` and prints the report path.
Paths recorded inside reports are relative to ``--out``.

Exit codes: 0 ok, 2 usage, 3 input error, 4 numeric fault, 5 invariant
violation. ``--json-errors`` prints failures as a JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .analysis import (
    cls_attention_map,
    decompose_attention,
    find_outliers,
    mean_cosine,
    norm_profile,
    patch_norm_map,
    recompute_attention_output,
    token_norms,
)
from .config import PRESETS, load_config
from .errors import InvariantViolation, RegforgeError
from .imageio import preprocess, read_image, render_heatmap, upsample_nearest, write_pgm, write_ppm
from .registers import (
    InterventionPlan,
    NeuronId,
    RegisterScanConfig,
    RegisterScanResult,
    derive_attention_bias,
    find_register_neurons,
    plan_shift,
    plan_test_time_register,
    plan_zero_out,
    run_plan,
    run_with_bias,
)
from .reports import RunManifest, write_json
from .runtime import (
    ATTN_KEYS,
    ATTN_QUERIES,
    ATTN_VALUES,
    ATTN_WEIGHTS,
    POST_ATTENTION,
    POST_MLP,
    REGISTER_INITS,
    TapSpec,
    embed_image,
    forward,
)
from .weights import load_model, load_remap


class UsageError(RegforgeError):
    exit_code = 2
    kind = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# shared plumbing


class Context:
    """Loaded model plus resolved analysis settings for one invocation."""

    def __init__(self, args):
        self.args = args
        for path in [*_images_arg(args), *(getattr(args, k, None) for k in ("model", "truth", "scan", "plan"))]:
            if path is not None and not os.path.exists(path):
                raise FileNotFoundError(f"no such file: {path}")
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.truth = None
        if getattr(args, "truth", None):
            with open(args.truth) as fh:
                self.truth = json.load(fh)["truth"]
        self.config = self.weights = None
        if getattr(args, "model", None):
            config = load_config(args.config) if args.config else None
            remap = load_remap(args.remap) if args.remap else None
            self.weights, self.config = load_model(args.model, config, remap)
        self.manifest = RunManifest(
            command=args.command, seed=args.seed, out_dir=str(self.out),
            model_path=getattr(args, "model", None),
            config_name=self.config.name if self.config else None,
            scan_path=getattr(args, "scan", None), plan_path=getattr(args, "plan", None),
            inputs=list(_images_arg(args)),
        )
        self.manifest.check()

    # analysis defaults: explicit flag, then ground-truth sidecar, then preset
    def setting(self, flag: str, truth_key: str | None, preset_attr: str | None):
        value = getattr(self.args, flag, None)
        if value is not None:
            return value
        if self.truth is not None and truth_key is not None:
            return len(self.truth["planted"]) if truth_key == "n_planted" else self.truth[truth_key]
        if self.config is not None and self.config.name in PRESETS and preset_attr is not None:
            return getattr(PRESETS[self.config.name][1], preset_attr)
        raise UsageError(f"--{flag.replace('_', '-')} is required for this model")

    @property
    def layer(self) -> int:
        return int(self.setting("layer", "analysis_layer", "outlier_layer"))

    @property
    def threshold(self) -> float:
        return float(self.setting("threshold", "threshold", "outlier_threshold"))

    def rel(self, path: Path) -> str:
        return os.path.relpath(path, self.out)

    def sequence(self, path: str):
        return embed_image(preprocess(read_image(path), self.config), self.config, self.weights)

    def map(self, fn, items):
        """Order-preserving map over a worker pool bounded by REGFORGE_THREADS."""
        items = list(items)
        workers = max(1, int(os.environ.get("REGFORGE_THREADS", "1") or 1))
        if workers == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))

    def heatmap(self, name: str, grid) -> str:
        size = self.config.image_size
        path = self.out / "heatmaps" / f"{name}.pgm"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_pgm(path, upsample_nearest(render_heatmap(grid, self.args.scale), size, size))
        return self.rel(path)

    def report(self, payload: dict, taps: TapSpec | None = None) -> Path:
        if taps is not None:
            self.manifest.taps = sorted([layer, site] for layer, site in taps.points)
        path = self.out / f"{self.args.report or self.args.command}.json"
        write_json(path, {"manifest": self.manifest, **payload})
        print(path)
        return path


def _images_arg(args) -> list[str]:
    images = getattr(args, "images", None) or []
    calibrate = getattr(args, "calibrate", None) or []
    return [*images, *calibrate]


def _stem(i: int, path: str) -> str:
    return f"{i:03d}_{Path(path).stem}"


def _neurons(ctx: Context) -> tuple[list[NeuronId], InterventionPlan | None]:
    args = ctx.args
    if getattr(args, "plan", None):
        with open(args.plan) as fh:
            plan = InterventionPlan.from_dict(json.load(fh)["plan"])
        return list(plan.neurons), plan
    if getattr(args, "scan", None):
        with open(args.scan) as fh:
            data = json.load(fh)
        return RegisterScanResult.from_dict(data["scan"]).neurons, None
    if getattr(args, "neurons", None):
        return [NeuronId(*map(int, n.split(","))) for n in args.neurons], None
    raise UsageError("give register neurons with --scan, --plan or --neurons")


def _parse_targets(seq, targets) -> list[int]:
    out = []
    for t in targets:
        try:
            r, c = (int(v) for v in t.split(","))
        except ValueError:
            raise UsageError(f"target {t!r} is not 'row,col'") from None
        out.append(seq.patch_index(r, c))
    return out


def _cosine(a, b) -> float:
    return mean_cosine(np.asarray(a)[None, :], np.asarray(b)[None, :])


def _cls_attention_argmax(trace, layer: int) -> dict:
    w = trace.get(layer, ATTN_WEIGHTS).mean(axis=0)[trace.cls_index, : len(trace.roles)]
    w = w.copy()
    w[trace.cls_index] = -1.0
    top = int(np.argmax(w))
    return {"token": top, "role": trace.roles[top][0], "weight": float(w[top])}


def _outlier_block(trace, ctx: Context, image: str) -> dict:
    norms = token_norms(trace, ctx.layer)
    outliers = find_outliers(trace, ctx.layer, ctx.threshold, image_id=image)
    patches = trace.patch_indices
    top = patches[int(np.argmax(norms[patches]))]
    block = {
        "outliers": outliers.to_dict(),
        "argmax_patch": {"token": top, "row": trace.roles[top][1], "col": trace.roles[top][2],
                         "norm": float(norms[top])},
        "norms": norms.tolist(),
    }
    if trace.register_indices:
        block["register_norms"] = [float(norms[i]) for i in trace.register_indices]
    return block


# --------------------------------------------------------------------------
# subcommands


def cmd_trace_norms(ctx: Context) -> None:
    cfg = ctx.config
    sites = [POST_ATTENTION, POST_MLP] + ([ATTN_WEIGHTS] if cfg.has_cls else [])
    taps = TapSpec.all(cfg, sites)

    def one(item):
        i, path = item
        _, trace = forward(ctx.sequence(path), cfg, ctx.weights, taps)
        maps = [ctx.heatmap(f"{_stem(i, path)}/norm_L{layer:02d}", patch_norm_map(trace, layer))
                for layer in range(cfg.n_layers)]
        return trace, maps

    results = ctx.map(one, enumerate(ctx.args.images))
    profile = norm_profile([t for t, _ in results]) if cfg.has_cls else None
    per_image = [
        {"image": path, "max_patch_norm": [float(token_norms(t, layer)[t.patch_indices].max())
                                           for layer in range(cfg.n_layers)], "heatmaps": maps}
        for path, (t, maps) in zip(ctx.args.images, results)
    ]
    ctx.report({"site": POST_MLP, "profile": profile, "images": per_image}, taps)


def cmd_find_outliers(ctx: Context) -> None:
    layer, thr = ctx.layer, ctx.threshold
    taps = TapSpec([(layer, POST_MLP)])

    def one(path):
        _, trace = forward(ctx.sequence(path), ctx.config, ctx.weights, taps)
        return find_outliers(trace, layer, thr, image_id=path, include_cls=ctx.args.include_cls)

    found = ctx.map(one, ctx.args.images)
    ctx.report({"layer": layer, "site": POST_MLP, "thresholds": {"outlier": thr},
                "outliers": [o.to_dict() for o in found]}, taps)


def cmd_scan_registers(ctx: Context) -> None:
    args = ctx.args
    scan_cfg = RegisterScanConfig(
        int(ctx.setting("top_layer", "ignite_layer", "top_layer")),
        int(ctx.setting("top_k", "n_planted", "top_k")),
        ctx.threshold, ctx.layer,
    )
    seqs = ctx.map(ctx.sequence, args.images)
    result = find_register_neurons(seqs, ctx.config, ctx.weights, scan_cfg)
    payload = {"scan": result.to_dict()}
    if args.emit_plan:
        prov = {"scan_images": list(args.images), "scan": result.to_dict()["config"]}
        if args.emit_plan == "shift":
            if not args.targets:
                raise UsageError("--emit-plan shift needs --targets")
            plan = plan_shift(result.neurons, _parse_targets(seqs[0], args.targets), prov)
        elif args.emit_plan == "register":
            plan = plan_test_time_register(result.neurons, args.count, args.init, args.seed, prov)
        else:
            plan = plan_zero_out(result.neurons, prov)
        plan_path = ctx.out / "plan.json"
        write_json(plan_path, {"manifest": ctx.manifest, "plan": plan})
        payload["plan_path"] = ctx.rel(plan_path)
    taps = TapSpec.at(range(scan_cfg.top_layer + 1), ["mlp_hidden_activation"]) | TapSpec(
        [(scan_cfg.outlier_measure_layer, POST_MLP)])
    ctx.report(payload, taps)


def cmd_shift(ctx: Context) -> None:
    args = ctx.args
    neurons, plan = _neurons(ctx)
    cfg = ctx.config
    last = cfg.n_layers - 1
    taps = TapSpec.at(range(cfg.n_layers), [POST_MLP]) | TapSpec([(last, ATTN_WEIGHTS)])
    if plan is not None and args.targets:
        raise UsageError("--plan and --targets are mutually exclusive")
    if plan is None and not args.targets:
        raise UsageError("shift needs --plan or --targets")

    rows = []
    for i, path in enumerate(args.images):
        seq = ctx.sequence(path)
        p = plan if plan is not None else plan_shift(neurons, _parse_targets(seq, args.targets))
        _, before = forward(seq, cfg, ctx.weights, taps)
        _, after = run_plan(p, seq, cfg, ctx.weights, taps)
        stem = _stem(i, path)
        rows.append({
            "image": path,
            "plan": p,
            "targets": list(p.targets),
            "before": _outlier_block(before, ctx, path),
            "after": _outlier_block(after, ctx, path),
            "trace_digest": after.digest(),
            "heatmaps": {
                "norm_before": ctx.heatmap(f"{stem}/norm_before", patch_norm_map(before, ctx.layer)),
                "norm_after": ctx.heatmap(f"{stem}/norm_after", patch_norm_map(after, ctx.layer)),
                "cls_attention_before": ctx.heatmap(f"{stem}/cls_attn_before", cls_attention_map(before, last)),
                "cls_attention_after": ctx.heatmap(f"{stem}/cls_attn_after", cls_attention_map(after, last)),
            },
        })
    ctx.report({"layer": ctx.layer, "thresholds": {"outlier": ctx.threshold}, "runs": rows}, taps)


def _register_plan(ctx: Context) -> InterventionPlan:
    neurons, plan = _neurons(ctx)
    if plan is not None:
        if plan.mode != "test_time_register":
            raise UsageError(f"plan mode {plan.mode!r} is not a test-time register plan")
        return plan
    return plan_test_time_register(neurons, ctx.args.count, ctx.args.init, ctx.args.seed)


def cmd_add_register(ctx: Context) -> None:
    cfg = ctx.config
    plan = _register_plan(ctx)
    last = cfg.n_layers - 1
    taps = TapSpec([(ctx.layer, POST_MLP), (last, ATTN_WEIGHTS)])

    def one(item):
        i, path = item
        seq = ctx.sequence(path)
        out0, before = forward(seq, cfg, ctx.weights, taps)
        out1, after = run_plan(plan, seq, cfg, ctx.weights, taps)
        b, a = _outlier_block(before, ctx, path), _outlier_block(after, ctx, path)
        reg_norms = a.get("register_norms", [])
        row = {
            "image": path,
            "before": b,
            "after": a,
            "emptied": not a["outliers"]["positions"],
            "register_above_threshold": any(n >= ctx.threshold for n in reg_norms),
            "trace_digest": after.digest(),
        }
        if cfg.has_cls:
            row["cls_attention_top_before"] = _cls_attention_argmax(before, last)
            row["cls_attention_top_after"] = _cls_attention_argmax(after, last)
            row["cls_output_cosine"] = _cosine(out0[seq.cls_index], out1[seq.cls_index])
            row["heatmaps"] = {"cls_attention_after": ctx.heatmap(f"{_stem(i, path)}/cls_attn_registers",
                                                                  cls_attention_map(after, last))}
        return row

    rows = ctx.map(one, enumerate(ctx.args.images))
    n = len(rows)
    summary = {
        "images": n,
        "emptied_fraction": sum(r["emptied"] for r in rows) / n,
        "register_above_threshold_fraction": sum(r["register_above_threshold"] for r in rows) / n,
    }
    ctx.report({"plan": plan, "layer": ctx.layer, "thresholds": {"outlier": ctx.threshold},
                "absorption": summary, "runs": rows}, taps)


def cmd_zero(ctx: Context) -> None:
    cfg = ctx.config
    neurons, _ = _neurons(ctx)
    plan = plan_zero_out(neurons)
    taps = TapSpec([(ctx.layer, POST_MLP)])

    def one(path):
        seq = ctx.sequence(path)
        out0, before = forward(seq, cfg, ctx.weights, taps)
        out1, after = run_plan(plan, seq, cfg, ctx.weights, taps)
        row = {"image": path, "before": _outlier_block(before, ctx, path),
               "after": _outlier_block(after, ctx, path)}
        if cfg.has_cls:
            row["cls_output_cosine"] = _cosine(out0[seq.cls_index], out1[seq.cls_index])
        return row

    ctx.report({"plan": plan, "layer": ctx.layer, "thresholds": {"outlier": ctx.threshold},
                "runs": ctx.map(one, ctx.args.images)}, taps)


def cmd_attn_bias(ctx: Context) -> None:
    cfg = ctx.config
    neurons, _ = _neurons(ctx)
    cal = ctx.map(ctx.sequence, ctx.args.calibrate)
    bias = derive_attention_bias(cal, cfg, ctx.weights, neurons, from_layer=ctx.args.from_layer)
    bias_path = write_json(ctx.out / "attention_bias.json", {"manifest": ctx.manifest, "bias": bias})
    taps = TapSpec.at(range(cfg.n_layers), [POST_MLP])
    reg_plan = plan_test_time_register(neurons, 1, "zeros")

    def one(path):
        seq = ctx.sequence(path)
        out_b, trace = run_with_bias(seq, cfg, ctx.weights, neurons, bias, taps)
        out_r, _ = run_plan(reg_plan, seq, cfg, ctx.weights)
        patches = trace.patch_indices
        max_norms = [float(token_norms(trace, layer)[patches].max()) for layer in range(cfg.n_layers)]
        row = {"image": path, "max_patch_norm": max_norms,
               "any_patch_above_threshold": any(n >= ctx.threshold for n in max_norms)}
        if cfg.has_cls:
            c = seq.cls_index
            row["cls_relative_error_vs_register"] = float(
                np.linalg.norm(out_b[c] - out_r[c]) / np.linalg.norm(out_r[c]))
        return row

    ctx.report({"bias_path": ctx.rel(bias_path), "calibration_size": bias.calibration_size,
                "thresholds": {"outlier": ctx.threshold}, "runs": ctx.map(one, ctx.args.images)}, taps)


def cmd_decompose(ctx: Context) -> None:
    args = ctx.args
    cfg = ctx.config
    layer = cfg.n_layers - 1 if args.layer is None else args.layer
    taps = TapSpec.at([layer], [ATTN_WEIGHTS, ATTN_QUERIES, ATTN_KEYS, ATTN_VALUES])
    rows = []
    for path in args.images:
        seq = ctx.sequence(path)
        if args.count:
            neurons, _ = _neurons(ctx)
            plan = plan_test_time_register(neurons, args.count, args.init, args.seed)
            _, trace = run_plan(plan, seq, cfg, ctx.weights, taps)
            registers = trace.register_indices
        else:
            if args.registers is None:
                raise UsageError("decompose needs --registers or --count")
            _, trace = forward(seq, cfg, ctx.weights, taps)
            registers = args.registers
        rep = decompose_attention(trace, layer, registers)
        err = float(np.abs(rep.total - recompute_attention_output(trace, layer)).max())
        rows.append({"image": path, "report": rep, "max_reconstruction_error": err})
    ctx.report({"layer": layer, "runs": rows}, taps)


def cmd_make_planted(ctx: Context) -> None:
    from .synthetic import PlantSpec, generate_planted_model, make_images, save_planted

    args = ctx.args
    spec_dict = {}
    if args.spec:
        with open(args.spec) as fh:
            spec_dict = json.load(fh)
    spec_dict["seed"] = args.seed
    model = generate_planted_model(PlantSpec.from_dict(spec_dict))
    weights_path, truth_path = ctx.out / "model.safetensors", ctx.out / "truth.json"
    save_planted(model, weights_path, truth_path)
    images = []
    for i, im in enumerate(make_images(model, args.n_images, seed=args.seed)):
        path = ctx.out / "images" / f"img_{i:03d}.ppm"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_ppm(path, im.pixels)
        images.append({"path": ctx.rel(path), "trigger_patches": [list(t) for t in im.trigger_patches],
                       "expected_outliers": list(im.outliers)})
    ctx.report({"weights": ctx.rel(weights_path), "truth": ctx.rel(truth_path),
                "spec": model.spec, "ground_truth": model.truth, "images": images})


def cmd_self_test(ctx: Context) -> None:
    from .selftest import run_self_test

    results = run_self_test()
    for r in results:
        print(f"{'PASS' if r['ok'] else 'FAIL'} {r['check']}: {r['detail']}")
    ctx.report({"results": results})
    failed = [r["check"] for r in results if not r["ok"]]
    if failed:
        raise InvariantViolation(f"self-test failed: {', '.join(failed)}")


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", default="regforge-out", help="output directory (default: regforge-out)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--report", help="report file stem (default: subcommand name)")
    common.add_argument("--json-errors", action="store_true", help="print errors as JSON on stderr")

    model = _Parser(add_help=False)
    model.add_argument("--model", required=True, help="weight container")
    model.add_argument("--config", help="preset name or ModelConfig JSON (default: embedded in container)")
    model.add_argument("--remap", help="JSON sidecar mapping canonical names to container names")
    model.add_argument("--truth", help="planted-model ground truth JSON supplying analysis defaults")
    model.add_argument("--layer", type=int, help="layer whose post-MLP residual defines outliers "
                       "(decompose: attention layer, default last)")
    model.add_argument("--threshold", type=float, help="outlier norm threshold")
    model.add_argument("--scale", choices=("linear", "log"), default="linear", help="heatmap scale")

    source = _Parser(add_help=False)
    source.add_argument("--scan", help="scan-registers report supplying the neurons")
    source.add_argument("--plan", help="intervention plan JSON to replay")
    source.add_argument("--neurons", nargs="+", metavar="LAYER,NEURON")

    register = _Parser(add_help=False)
    register.add_argument("--count", type=int, default=1)
    register.add_argument("--init", choices=REGISTER_INITS, default="zeros")

    p = _Parser(prog="regforge", description="Register-neuron analysis for vision transformers.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("trace-norms", parents=[common, model], help="per-layer patch norm profile")
    s.add_argument("images", nargs="+")
    s.set_defaults(fn=cmd_trace_norms)

    s = sub.add_parser("find-outliers", parents=[common, model], help="high-norm patch tokens")
    s.add_argument("images", nargs="+")
    s.add_argument("--include-cls", action="store_true")
    s.set_defaults(fn=cmd_find_outliers)

    s = sub.add_parser("scan-registers", parents=[common, model, register], help="rank register neurons")
    s.add_argument("images", nargs="+")
    s.add_argument("--top-layer", type=int)
    s.add_argument("--top-k", type=int)
    s.add_argument("--emit-plan", choices=("shift", "register", "zero"))
    s.add_argument("--targets", nargs="+", metavar="ROW,COL")
    s.set_defaults(fn=cmd_scan_registers)

    s = sub.add_parser("shift", parents=[common, model, source], help="move outliers to chosen patches")
    s.add_argument("images", nargs="+")
    s.add_argument("--targets", nargs="+", metavar="ROW,COL")
    s.set_defaults(fn=cmd_shift)

    s = sub.add_parser("add-register", parents=[common, model, source, register], help="test-time registers")
    s.add_argument("images", nargs="+")
    s.set_defaults(fn=cmd_add_register)

    s = sub.add_parser("zero", parents=[common, model, source], help="zero the register neurons")
    s.add_argument("images", nargs="+")
    s.set_defaults(fn=cmd_zero)

    s = sub.add_parser("attn-bias", parents=[common, model, source], help="register-free attention biases")
    s.add_argument("images", nargs="+")
    s.add_argument("--calibrate", nargs="+", required=True, help="calibration images")
    s.add_argument("--from-layer", type=int, default=0)
    s.set_defaults(fn=cmd_attn_bias)

    s = sub.add_parser("decompose", parents=[common, model, source], help="split attention output")
    s.add_argument("images", nargs="+")
    s.add_argument("--registers", type=int, nargs="+", help="token indices treated as registers")
    s.add_argument("--count", type=int, default=0, help="append this many test-time registers instead")
    s.add_argument("--init", choices=REGISTER_INITS, default="zeros")
    s.set_defaults(fn=cmd_decompose)

    s = sub.add_parser("make-planted", parents=[common], help="write a planted model, truth and images")
    s.add_argument("--spec", help="PlantSpec JSON")
    s.add_argument("--images", dest="n_images", type=int, default=8, help="number of images to render")
    s.set_defaults(fn=cmd_make_planted)

    s = sub.add_parser("self-test", parents=[common], help="run the invariant suite")
    s.set_defaults(fn=cmd_self_test)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    json_errors = "--json-errors" in argv
    try:
        args = build_parser().parse_args(argv)
        args.fn(Context(args))
        return 0
    except RegforgeError as exc:
        return _fail(exc.exit_code, exc.to_json(), json_errors)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        return _fail(3, {"error": "input", "message": f"{type(exc).__name__}: {exc}"}, json_errors)


def _fail(code: int, payload: dict, json_errors: bool) -> int:
    payload = {**payload, "exit_code": code}
    if json_errors:
        print(json.dumps(payload), file=sys.stderr)
    else:
        print(f"regforge: {payload['error']}: {payload['message']}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
