"""Command line entry point: ``mixnet <command> [options]``.

Exit codes
----------
0  success
1  unexpected internal error
2  invalid configuration or arguments
3  missing input file
4  training diverged (non-finite loss)
5  gradient check failed
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import fisher_ratio, pca_project, scatter_csv, separation_report, tap_layer
from .layers import grad_check
from .linalg import make_rng
from .synth import ClassHierarchy, FrameDataset, SynthConfig, generate
from .training import (
    VARIANTS,
    ModelConfig,
    TrainConfig,
    TrainingDiverged,
    build_collapse_reference,
    build_model,
    build_stack,
    evaluate,
    fit_pipeline,
    load_checkpoint,
    pretrain_aux,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3, 4, 5

EXIT_CODE_HELP = """exit codes:
  0  success
  1  unexpected internal error
  2  invalid configuration or arguments
  3  missing input file
  4  training diverged (non-finite loss)
  5  gradient check failed

environment:
  MIXNET_SEED  overrides the config's top-level seed
"""


class ConfigError(ValueError):
    pass


class MissingFile(FileNotFoundError):
    pass


SECTIONS = {
    "synth": {f.name for f in dataclasses.fields(SynthConfig)} - {"seed"},
    "model": {f.name for f in dataclasses.fields(ModelConfig)},
    "train": {f.name for f in dataclasses.fields(TrainConfig)} - {"seed", "threads"},
    "hierarchy": {"counts", "names"},
    "io": {"out_dir"},
}


def default_config() -> dict:
    synth = SynthConfig().to_dict()
    del synth["seed"]
    tc = TrainConfig().to_dict()
    del tc["seed"], tc["threads"]
    return {
        "seed": 42,
        "synth": synth,
        "model": {"variant": "mixnet4"},
        "train": tc,
        "hierarchy": ClassHierarchy().to_dict(),
        "io": {"out_dir": "mixnet-run"},
    }


def validate_config(cfg: dict) -> dict:
    """Reject unknown sections/keys and return the fully resolved config."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    resolved = default_config()
    for section, keys in SECTIONS.items():
        given = cfg.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"section {section!r} must be an object")
        bad = set(given) - keys
        if bad:
            raise ConfigError(f"unknown keys in {section!r}: {sorted(bad)}")
        if section == "model":
            resolved["model"] = dict(given)
            resolved["model"].setdefault("variant", "mixnet4")
        else:
            resolved[section].update(given)
    if "seed" in cfg:
        if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
            raise ConfigError("seed must be an integer")
        resolved["seed"] = cfg["seed"]
    if os.environ.get("MIXNET_SEED"):
        try:
            resolved["seed"] = int(os.environ["MIXNET_SEED"])
        except ValueError:
            raise ConfigError("MIXNET_SEED must be an integer") from None
    try:
        build_objects(resolved)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    h = ClassHierarchy.from_dict(resolved["hierarchy"])
    resolved["model_resolved"] = model_config(resolved, h).to_dict()
    return resolved


def model_config(resolved, hierarchy: ClassHierarchy) -> ModelConfig:
    m = dict(resolved["model"])
    variant = m.pop("variant")
    m.setdefault("frame_dim", resolved["synth"]["dim"])
    m.setdefault("n_classes", hierarchy.n_sub)
    m.setdefault("n_gate_classes", hierarchy.n_broad)
    return ModelConfig.preset(variant, **m)


def build_objects(resolved):
    seed = resolved["seed"]
    h = ClassHierarchy.from_dict(resolved["hierarchy"])
    scfg = SynthConfig(seed=seed, **resolved["synth"])
    tc = TrainConfig(seed=seed, threads=resolved.get("threads", 1), **resolved["train"])
    return scfg, h, model_config(resolved, h), tc


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = json.loads(json.dumps(cfg))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        path, value = item.split("=", 1)
        parts = path.split(".")
        if len(parts) == 1 and parts[0] == "seed":
            cfg["seed"] = parse_value(value)
            continue
        if len(parts) != 2:
            raise ConfigError(f"--set path must be section.key, got {path!r}")
        cfg.setdefault(parts[0], {})
        if not isinstance(cfg[parts[0]], dict):
            raise ConfigError(f"section {parts[0]!r} must be an object")
        cfg[parts[0]][parts[1]] = parse_value(value)
    return cfg


def load_config(args) -> dict:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingFile(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    else:
        cfg = {}
    cfg = apply_overrides(cfg, args.set)
    if getattr(args, "out_dir", None):
        cfg.setdefault("io", {})["out_dir"] = args.out_dir
    resolved = validate_config(cfg)
    resolved["threads"] = args.threads
    return resolved


def config_hash(resolved) -> str:
    return hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()


def provenance(resolved) -> dict:
    return {"tool_version": __version__, "config_hash": config_hash(resolved),
            "seed": resolved["seed"], "config": resolved}


def out_dir(resolved) -> Path:
    p = Path(resolved["io"]["out_dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def write_json(path: Path, obj):
    # json writes floats with repr: shortest string that round-trips exactly
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n")


def load_split(resolved, split) -> FrameDataset:
    path = out_dir(resolved) / "data" / f"{split}.frames"
    if not path.exists():
        raise MissingFile(f"dataset not found: {path} (run `mixnet synth` first)")
    return FrameDataset.load(path)


def _checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_synth(resolved, args):
    scfg, h, _, _ = build_objects(resolved)
    d = out_dir(resolved) / "data"
    d.mkdir(parents=True, exist_ok=True)
    prov = provenance(resolved)
    summary = {}
    for split, ds in zip(("train", "cv", "test"), generate(scfg, h)):
        ds.meta = {"split": split, "tool_version": __version__,
                   "config_hash": prov["config_hash"], "seed": prov["seed"]}
        ds.save(d / f"{split}.frames")
        summary[split] = {"frames": ds.n_frames, "utterances": int(ds.lengths.size),
                          "broad_fractions": (np.bincount(ds.broad, minlength=h.n_broad) / ds.n_frames).tolist()}
    write_json(out_dir(resolved) / "synth_report.json", {**prov, "splits": summary})
    return summary


def cmd_pretrain(resolved, args):
    _, _, mcfg, tc = build_objects(resolved)
    if not mcfg.is_mixnet:
        raise ConfigError(f"variant {mcfg.variant!r} has no auxiliary classifier")
    tr, cv = load_split(resolved, "train"), load_split(resolved, "cv")
    model = fit_pipeline(build_model(mcfg, resolved["seed"]), tr)
    model, report = pretrain_aux(model, tr, cv, tc)
    prov = provenance(resolved)
    save_checkpoint(model, out_dir(resolved) / "aux.ckpt", {k: prov[k] for k in ("tool_version", "config_hash", "seed")})
    result = {**prov, "aux_report": report.to_dict(), "aux_param_count": model.aux_param_count}
    write_json(out_dir(resolved) / "aux_report.json", result)
    return result


def cmd_train(resolved, args):
    _, _, mcfg, tc = build_objects(resolved)
    tr, cv = load_split(resolved, "train"), load_split(resolved, "cv")
    aux_report = None
    aux_path = out_dir(resolved) / "aux.ckpt"
    if mcfg.is_mixnet and aux_path.exists() and not args.fresh_aux:
        model, manifest = _checkpoint(aux_path)
        if model.config != mcfg:
            raise ConfigError(f"{aux_path} was built for a different model config")
    else:
        model = fit_pipeline(build_model(mcfg, resolved["seed"]), tr)
        if model.aux is not None:
            model, report = pretrain_aux(model, tr, cv, tc)
            aux_report = report.to_dict()
    model, report = train(model, tr, cv, tc)
    prov = provenance(resolved)
    save_checkpoint(model, out_dir(resolved) / "model.ckpt", {k: prov[k] for k in ("tool_version", "config_hash", "seed")})
    result = {**prov, "train_report": report.to_dict(), "aux_report": aux_report,
              "param_count": model.param_count, "aux_param_count": model.aux_param_count}
    write_json(out_dir(resolved) / "train_report.json", result)
    return result


def cmd_eval(resolved, args):
    model, _ = _checkpoint(args.checkpoint)
    ds = load_split(resolved, args.split)
    rep = evaluate(model, ds)
    result = {**provenance(resolved), "split": args.split, "eval_report": rep.to_dict()}
    write_json(out_dir(resolved) / f"eval_{args.split}.json", result)
    return result


def cmd_analyze(resolved, args):
    model, _ = _checkpoint(args.checkpoint)
    ds = load_split(resolved, args.split)
    if args.utterances:
        ds = ds.select_utterances(args.utterances)
    x, broad, sub = tap_layer(model, ds, 0)
    y, _, _ = tap_layer(model, ds, args.layer)
    sep_in, sep_layer = separation_report(x, broad), separation_report(y, broad)
    pts, ratio, _ = pca_project(y, 2)
    d = out_dir(resolved)
    (d / f"scatter_layer{args.layer}.csv").write_text(scatter_csv(pts, broad, sub))
    pts0, ratio0, _ = pca_project(x, 2)
    (d / "scatter_layer0.csv").write_text(scatter_csv(pts0, broad, sub))
    result = {
        **provenance(resolved),
        "layer": args.layer,
        "fisher_ratio_input": fisher_ratio(x, broad),
        "fisher_ratio_layer": fisher_ratio(y, broad),
        "separation_input": json.loads(sep_in.to_json()),
        "separation_layer": json.loads(sep_layer.to_json()),
        "pca_explained_variance_input": ratio0.tolist(),
        "pca_explained_variance_layer": ratio.tolist(),
    }
    write_json(d / f"analysis_layer{args.layer}.json", result)
    return result


def gradcheck_config(variant: str) -> ModelConfig:
    """Small dims (<= 8) for finite-difference checks."""
    return ModelConfig.preset(
        variant, n_classes=5, frame_dim=3, hidden_layers=2, hidden_width=6, n_gate_classes=3,
        lowrank_dim=4, band=2, eigen_experts=3, eigen_width=5, aux_width=4, aux_layers=1,
        feature_context=1 if variant in ("baseline", "eigen_dmoe") else 0,
    )


def cmd_gradcheck(resolved, args):
    variants = VARIANTS if args.variant == "all" else (args.variant,)
    results, worst = {}, 0.0
    for k, v in enumerate(variants):
        stack = build_stack(gradcheck_config(v), make_rng(resolved["seed"] + k))
        rep = grad_check(stack, make_rng(resolved["seed"] + 100 + k), tolerance=args.tolerance)
        results[v] = {"passed": rep.passed, "worst_error": rep.worst_error,
                      "worst_name": rep.worst_name, "n_checked": rep.n_checked}
        worst = max(worst, rep.worst_error)
    result = {**provenance(resolved), "tolerance": args.tolerance, "worst_error": worst,
              "passed": all(r["passed"] for r in results.values()), "variants": results}
    write_json(out_dir(resolved) / "gradcheck_report.json", result)
    return result


def cmd_params(resolved, args):
    _, h, mcfg, _ = build_objects(resolved)
    seed = resolved["seed"]
    model = build_model(mcfg, seed)
    table = {}
    for v in VARIANTS:
        overrides = {k: val for k, val in resolved["model"].items() if k != "variant"}
        overrides.setdefault("frame_dim", resolved["synth"]["dim"])
        overrides.setdefault("n_classes", h.n_sub)
        overrides.setdefault("n_gate_classes", h.n_broad)
        try:
            cfg = ModelConfig.preset(v, **overrides)
        except ValueError:
            continue
        m = build_model(cfg, seed)
        table[v] = {"params": m.param_count, "aux_params": m.aux_param_count}
    result = {**provenance(resolved), "variant": mcfg.variant, "params": model.param_count,
              "aux_params": model.aux_param_count, "layers": [repr(l) for l in model.stack.layers],
              "all_variants": table}
    if mcfg.is_mixnet:
        ref = build_collapse_reference(mcfg)
        result["collapse_reference_params"] = ref.param_count
    write_json(out_dir(resolved) / "params_report.json", result)
    return result


COMMANDS = {
    "synth": (cmd_synth, "generate train/cv/test datasets"),
    "pretrain-aux": (cmd_pretrain, "pretrain the broad-class gate classifier"),
    "train": (cmd_train, "train the acoustic model (pretrains the aux if no aux.ckpt)"),
    "eval": (cmd_eval, "frame accuracy and confusion matrices of a checkpoint"),
    "analyze": (cmd_analyze, "class separation at a layer, with PCA scatter CSV"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient check of small stacks"),
    "params": (cmd_params, "trainable parameter counts"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable; VALUE parsed as JSON)")
    common.add_argument("--out-dir", help="output directory (overrides io.out_dir)")
    common.add_argument("--threads", type=int, default=1,
                        help="order-preserving data-parallel gradient threads (default 1)")

    parser = argparse.ArgumentParser(
        prog="mixnet", description="MixNet mixture-of-experts frame classifiers.",
        epilog=EXIT_CODE_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"mixnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                           epilog=EXIT_CODE_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
        if name == "train":
            p.add_argument("--fresh-aux", action="store_true",
                           help="pretrain a new aux classifier even if aux.ckpt exists")
        if name in ("eval", "analyze"):
            p.add_argument("--checkpoint", required=True, help="MIXNET-CKPT v1 file")
            p.add_argument("--split", default="test", choices=("train", "cv", "test"),
                           help="dataset split (default test)")
        if name == "analyze":
            p.add_argument("--layer", type=int, default=1, help="layer index to tap (default 1)")
            p.add_argument("--utterances", type=int, default=10,
                           help="number of utterances to analyze (default 10; 0 = all)")
        if name == "gradcheck":
            p.add_argument("--variant", default="all", choices=VARIANTS + ("all",),
                           help="variant to check (default all)")
            p.add_argument("--tolerance", type=float, default=1e-6,
                           help="max relative error (default 1e-6)")
    return parser


def _fail(code, exc):
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        resolved = load_config(args)
        # divergence is detected explicitly; keep stderr machine-readable
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            result = COMMANDS[args.command][0](resolved, args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (MissingFile, FileNotFoundError) as exc:
        return _fail(EXIT_MISSING, exc)
    except TrainingDiverged as exc:
        return _fail(EXIT_DIVERGED, exc)
    except Exception as exc:  # noqa: BLE001
        return _fail(EXIT_INTERNAL, exc)
    if args.command == "gradcheck" and not result["passed"]:
        return _fail(EXIT_GRADCHECK, RuntimeError(
            f"gradient check failed: worst relative error {result['worst_error']:.3g}"))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
