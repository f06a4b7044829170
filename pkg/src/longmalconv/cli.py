"""Command line entry point: train, eval, predict, explain, bench, gen-data.

Option values resolve as: flag on the command line, else the value in the
--config JSON file (keys are the option names with underscores, or a
manifest.json from an earlier run), else the built-in default. The resolved
values go into manifest.json, so `--config <out>/manifest.json` repeats a run.

Exit codes: 0 ok, 1 usage/config error, 2 data or checkpoint error,
3 numeric failure (NaN/inf).
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import report
from .data import DataError, DatasetIndex, FileTokens, SyntheticSpec, generate_synthetic, load_index
from .models import ARCHS, Model, ModelConfig, validate_bounds
from .numerics import InputError, NumericError
from .training import CheckpointError, TrainConfig, evaluate, load_checkpoint, train

log = logging.getLogger("longmalconv")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "common": {"seed": 0, "workers": 1, "config": None, "out": None, "verbose": False},
    "train": {"data": None, "test": None, "model": "malconv-gcg", "mode": "lowmem", "epochs": 20,
              "batch": 16, "lr": 1e-3, "weight_decay": 1e-2, "scale": "desk", "channels": None,
              "kernel": None, "stride": None, "embed_dim": None, "merge_regions": False,
              "concat": False, "force": False},
    "eval": {"data": None, "ckpt": None, "mode": "lowmem", "force": False},
    "predict": {"ckpt": None, "files": None, "mode": "lowmem", "force": False},
    "explain": {"ckpt": None, "file": None},
    "bench": {"model": "malconv", "scale": "full", "lengths": "2^16,2^20,2^24", "mode": "lowmem",
              "dense_check": True, "force": False},
    "gen_data": {"spec": None, "task": None, "n": None, "n_test": None, "len_min": None,
                 "len_max": None},
}

MODEL_OVERRIDES = ("channels", "kernel", "stride", "embed_dim")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _length(text: str) -> int:
    text = text.strip()
    if "^" in text:
        base, exp = text.split("^")
        return int(base) ** int(exp)
    return int(text)


def _lengths(text: str) -> list[int]:
    try:
        out = [_length(t) for t in str(text).split(",") if t.strip()]
    except ValueError as e:
        raise UsageError(f"bad --lengths {text!r}") from e
    if not out or min(out) < 1:
        raise UsageError("--lengths needs positive lengths")
    return out


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False, argument_default=S)
    common.add_argument("--seed", type=int, help="RNG seed (default 0)")
    common.add_argument("--workers", type=int, help="threads for the chunk scan (default 1, deterministic)")
    common.add_argument("--config", help="JSON file of option values, or a manifest.json")
    common.add_argument("--out", help="output directory (manifest.json and reports go here)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    p = _Parser(prog="longmalconv", description="Byte-level CNN malware classifiers on very long inputs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], argument_default=S, help="train a model")
    t.add_argument("--data", help="labels CSV (path,label) for training")
    t.add_argument("--test", help="optional labels CSV evaluated after every epoch")
    t.add_argument("--model", choices=ARCHS, help="architecture (default malconv-gcg)")
    t.add_argument("--mode", choices=("dense", "lowmem"), help="default lowmem")
    t.add_argument("--epochs", type=int, help="default 20")
    t.add_argument("--batch", type=int, help="default 16")
    t.add_argument("--lr", type=float, help="AdamW learning rate (default 1e-3)")
    t.add_argument("--weight-decay", type=float, help="decoupled weight decay (default 1e-2)")
    t.add_argument("--scale", choices=("desk", "full"), help="channel widths (default desk)")
    for name in MODEL_OVERRIDES:
        t.add_argument(f"--{name.replace('_', '-')}", type=int, help="override; checked against search bounds")
    t.add_argument("--merge-regions", action="store_true", help="merge nearby winner regions")
    t.add_argument("--concat", action="store_true", help="concatenate regions instead of exact mode")
    t.add_argument("--force", action="store_true", help="allow dense mode on inputs over 2^24 bytes")

    e = sub.add_parser("eval", parents=[common], argument_default=S, help="accuracy and AUC on a labels CSV")
    e.add_argument("--data", help="labels CSV")
    e.add_argument("--ckpt", help="checkpoint file")
    e.add_argument("--mode", choices=("dense", "lowmem"))
    e.add_argument("--force", action="store_true")

    pr = sub.add_parser("predict", parents=[common], argument_default=S, help="score files")
    pr.add_argument("--ckpt", help="checkpoint file")
    pr.add_argument("files", nargs="*", help="input files")
    pr.add_argument("--mode", choices=("dense", "lowmem"))
    pr.add_argument("--force", action="store_true")

    x = sub.add_parser("explain", parents=[common], argument_default=S,
                       help="per-channel winner offsets and gate values for one file")
    x.add_argument("--ckpt", help="checkpoint file")
    x.add_argument("file", nargs="?", help="input file")

    b = sub.add_parser("bench", parents=[common], argument_default=S,
                       help="time and peak activation memory against input length")
    b.add_argument("--model", choices=ARCHS, help="default malconv")
    b.add_argument("--scale", choices=("desk", "full"), help="default full")
    b.add_argument("--lengths", help="comma list, '2^k' allowed (default 2^16,2^20,2^24)")
    b.add_argument("--mode", choices=("dense", "lowmem", "both"), help="default lowmem")
    b.add_argument("--no-dense-check", dest="dense_check", action="store_false",
                   help="skip the dense vs lowmem logit comparison at the shortest length")
    b.add_argument("--force", action="store_true", help="allow dense mode beyond 2^24")

    g = sub.add_parser("gen-data", parents=[common], argument_default=S, help="write a synthetic corpus")
    g.add_argument("--spec", help="SyntheticSpec JSON")
    g.add_argument("--task", choices=("A", "B"))
    g.add_argument("--n", type=int, help="number of samples")
    g.add_argument("--n-test", type=int, help="samples held out into test.csv")
    g.add_argument("--len-min", type=int)
    g.add_argument("--len-max", type=int)
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < explicit flags."""
    cmd = args.command.replace("-", "_")
    cfg = {**DEFAULTS["common"], **DEFAULTS[cmd]}
    given = {k: v for k, v in vars(args).items() if k != "command"}
    path = given.get("config")
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {path}: {e}") from e
        if "resolved_config" in loaded:
            loaded = loaded["resolved_config"]
        loaded.pop("_given", None)
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise UsageError(f"unknown keys in {path}: {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update(given)
    cfg["_given"] = sorted(given)
    return cfg


def _build_id() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0:
            return rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def _stamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _out_dir(cfg: dict) -> Path | None:
    if not cfg.get("out"):
        return None
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out}: {e}") from e
    return out


def _dense_guard(cfg: dict, lengths) -> None:
    if cfg.get("mode") in ("dense", "both") and not cfg.get("force"):
        big = [n for n in lengths if n > report.DENSE_LIMIT]
        if big:
            raise UsageError(f"dense mode on a {max(big)}-byte input would hold every activation in "
                             f"memory; use lowmem or pass --force")


def _load_model(cfg: dict) -> Model:
    _require(cfg, "ckpt")
    return load_checkpoint(cfg["ckpt"]).model()


def _file_tokens(path, model: Model) -> FileTokens:
    return FileTokens(path, min_length=model.window)


# --------------------------------------------------------------------------
# commands; each returns (payload for the manifest, list of output paths)


def cmd_train(cfg: dict, out: Path | None):
    _require(cfg, "data")
    index = load_index(cfg["data"], "train")
    test = load_index(cfg["test"], "test") if cfg.get("test") else None
    _dense_guard(cfg, [r.byte_length for r in index.records])
    base = ModelConfig.desk(cfg["model"]) if cfg["scale"] == "desk" else ModelConfig.full(cfg["model"])
    overrides = {k: cfg[k] for k in MODEL_OVERRIDES if cfg.get(k) is not None}
    mcfg = ModelConfig(**{**base.to_dict(), **overrides})
    if overrides:
        validate_bounds(mcfg)
    tcfg = TrainConfig(batch_size=cfg["batch"], epochs=cfg["epochs"], lr=cfg["lr"],
                       weight_decay=cfg["weight_decay"], seed=cfg["seed"], mode=cfg["mode"],
                       merge_regions=cfg["merge_regions"], exact=not cfg["concat"], workers=cfg["workers"])
    model = Model.create(mcfg, cfg["seed"])
    res = train(index, model, tcfg, out, test)
    for rec in res.log:
        print(json.dumps(rec, sort_keys=True))
    return {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "skipped": res.skipped}, \
        [str(p) for p in res.checkpoints] + ([str(out / "train_log.jsonl")] if out else [])


def cmd_eval(cfg: dict, out: Path | None):
    _require(cfg, "data")
    model = _load_model(cfg)
    index = load_index(cfg["data"])
    _dense_guard(cfg, [r.byte_length for r in index.records])
    from .models import LowmemOptions
    ev = evaluate(index, model, cfg["mode"], LowmemOptions(workers=cfg["workers"]))
    summary = {"accuracy": ev["accuracy"], "auc": ev["auc"], "n": len(ev["scores"])}
    print(json.dumps(summary, sort_keys=True))
    outputs = []
    if out:
        path = out / "scores.tsv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("path\tlabel\tscore\n")
            for p, y, s in zip(ev["paths"], ev["labels"], ev["scores"]):
                fh.write(f"{p}\t{y}\t{s:.7g}\n")
        outputs.append(str(path))
    return summary, outputs


def cmd_predict(cfg: dict, out: Path | None):
    _require(cfg, "files")
    model = _load_model(cfg)
    from .models import LowmemOptions
    sources = [_file_tokens(f, model) for f in cfg["files"]]
    _dense_guard(cfg, [len(s) for s in sources])
    print("path\tscore")
    scores = {}
    for f, src in zip(cfg["files"], sources):
        scores[f] = model.predict_proba(src, cfg["mode"], LowmemOptions(workers=cfg["workers"]))
        print(f"{f}\t{scores[f]:.7g}")
    return {"scores": scores}, []


def cmd_explain(cfg: dict, out: Path | None):
    _require(cfg, "file")
    model = _load_model(cfg)
    from .models import LowmemOptions
    exp = model.explain(_file_tokens(cfg["file"], model), LowmemOptions(workers=cfg["workers"]))
    print(report.explain_text(exp))
    outputs = []
    if out:
        for name, fn in (("explain.tsv", report.write_explain_tsv), ("regions.tsv", report.write_regions_tsv),
                         ("explain.png", report.plot_explanation)):
            fn(exp, out / name)
            outputs.append(str(out / name))
    return {"channels": exp.channels, "regions": len(exp.regions)}, outputs


def cmd_bench(cfg: dict, out: Path | None):
    lengths = sorted(_lengths(cfg["lengths"]))
    _dense_guard(cfg, lengths)
    arch = cfg["model"]
    mcfg = ModelConfig.full(arch) if cfg["scale"] == "full" else ModelConfig.desk(arch)
    model = Model.create(mcfg, cfg["seed"])
    modes = ("lowmem", "dense") if cfg["mode"] == "both" else (cfg["mode"],)
    workspace = report.weight_workspace(model)
    rows = []
    for mode in modes:
        for n in lengths:
            row = report.bench_length(model, n, mode, cfg["seed"], workers=cfg["workers"], workspace=workspace)
            log.info("%s T=%d step %.2fs scan %.2fs activations %d B", mode, n, row.step_seconds,
                     row.scan_seconds, row.activation_bytes)
            rows.append(row)
    summary: dict = {"lengths": lengths, "workspace_bytes": workspace}
    dense = [r for r in rows if r.mode == "dense"]
    if len(dense) >= 2:
        summary["dense_memory_growth"] = report.memory_growth(dense)
    low = [r for r in rows if r.mode == "lowmem"]
    if low:
        summary["memory_ratio"] = report.memory_ratio(low)
        summary["memory_invariant"] = summary["memory_ratio"] <= 1.1
        if len(low) >= 3:
            fit = report.fit_scan_time([r.length for r in low], [r.scan_seconds for r in low])
            summary.update(scan_seconds_per_byte=fit.slope, scan_r2=fit.r2, linear_scan=fit.r2 > 0.95)
        else:
            fit = None
        if not summary["memory_invariant"]:
            log.warning("lowmem activation memory varies by %.2fx across lengths", summary["memory_ratio"])
        if fit is not None and not summary["linear_scan"]:
            log.warning("scan time is not linear in length (R^2 %.3f)", fit.r2)
        if fit is not None:
            log.info("scan time slope %.3g s/byte, R^2 %.4f", fit.slope, fit.r2)
    else:
        fit = None
    if cfg["dense_check"] and lengths[0] <= 2 ** 16:
        from .data import RandomTokens
        src = RandomTokens(lengths[0], cfg["seed"], min_length=model.window)
        a, b = model.forward(src, "dense"), model.forward(src, "lowmem")
        summary["dense_lowmem_abs_diff"] = abs(a - b)
        log.info("dense vs lowmem logit at T=%d: |diff| = %.3g", lengths[0], abs(a - b))

    w = sys.stdout
    w.write("length\tmode\tstep_seconds\tscan_seconds\tactivation_bytes\tpeak_bytes\n")
    for r in rows:
        w.write(f"{r.length}\t{r.mode}\t{r.step_seconds:.4f}\t{r.scan_seconds:.4f}\t{r.activation_bytes}\t"
                f"{r.peak_bytes}\n")
    outputs = []
    if out:
        report.write_bench_tsv(rows, out / "bench.tsv")
        report.plot_bench(rows, out / "bench.png", fit)
        (out / "table1.md").write_text(report.table1_markdown(rows) + "\n", encoding="utf-8")
        with open(out / "bench_summary.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        outputs = [str(out / n) for n in ("bench.tsv", "bench.png", "table1.md", "bench_summary.json")]
    return summary, outputs


def cmd_gen_data(cfg: dict, out: Path | None):
    _require(cfg, "out")
    spec_fields = SyntheticSpec.from_json(cfg["spec"]).to_dict() if cfg.get("spec") else {}
    for key, field_name in (("task", "task"), ("n", "n_samples"), ("n_test", "n_test"),
                            ("len_min", "len_min"), ("len_max", "len_max")):
        if cfg.get(key) is not None:
            spec_fields[field_name] = cfg[key]
    if "seed" in cfg["_given"] or "seed" not in spec_fields:
        spec_fields["seed"] = cfg["seed"]
    spec = SyntheticSpec(**spec_fields)
    rep = generate_synthetic(spec, out)
    print(json.dumps({k: v for k, v in rep.items() if k != "spec"}, sort_keys=True))
    outputs = [str(out / "labels.csv"), str(out / "report.json")]
    if spec.n_test:
        outputs += [str(out / "train.csv"), str(out / "test.csv")]
    return {"spec": spec.to_dict()}, outputs


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "explain": cmd_explain,
            "bench": cmd_bench, "gen-data": cmd_gen_data}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
    except UsageError as e:
        print(f"longmalconv: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if cfg["verbose"] else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    started, t0 = _stamp(), time.perf_counter()
    np.seterr(invalid="ignore", over="ignore")  # NaNs are detected explicitly
    try:
        out = _out_dir(cfg)
        result, outputs = COMMANDS[args.command](cfg, out)
        code = EXIT_OK
    except (UsageError, InputError) as e:
        log.error("%s", e)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as e:
        log.error("%s", e)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    manifest = {
        "command": args.command,
        "argv": argv,
        "resolved_config": {k: v for k, v in cfg.items() if k not in ("config", "_given")},
        "seed": cfg["seed"],
        "build": _build_id(),
        "started": started,
        "finished": _stamp(),
        "wall_seconds": round(time.perf_counter() - t0, 3),
        "outputs": outputs,
        "result": result,
    }
    text = json.dumps(manifest, indent=2, sort_keys=True, default=str)
    if out:
        (out / "manifest.json").write_text(text + "\n", encoding="utf-8")
    else:
        log.info("manifest %s", json.dumps(manifest, sort_keys=True, default=str))
    return code


if __name__ == "__main__":
    sys.exit(main())
