"""Command-line entry points: data generation, training, evaluation and verification runs."""
import argparse
import copy
import json
import os
import statistics
import sys
import time

import torch

from .data import CLASS_NAMES, GeneratorSpec, load_split, read_manifest, write_dataset
from .errors import ArgMambaError, ConfigError
from .metrics import iou_per_class, oa, report
from .network import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .training import NonFiniteLossError, TrainSettings, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_RUNTIME = 0, 1, 2, 3

DEFAULTS = {
    "model": {"base_channels": 8, "state_dim": 4},
    "train": {"lr": 1e-4, "lr_min": 1e-6, "epochs": 50, "batch": 8, "schedule": "cosine", "seed": 0},
    "data": {"root": "data/micro", "split": "train", "val_split": "val", "seed": 7,
             "counts": {"train": 8, "val": 2}, "generator": {}},
    "bench": {"sizes": [32, 64, 128], "repeats": 20, "channels": 8, "state_dim": 8, "max_ratio": 40.0},
    "output_dir": "runs/default",
}


FREE_FORM = ("model", "counts", "generator")


class UsageError(Exception):
    pass


class VerificationFailure(Exception):
    pass


def _merge(base, override, path="config"):
    if not isinstance(override, dict):
        raise ConfigError(f"{path} must be a JSON object")
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown key {path}.{key}")
        # free-form sub-documents are validated by their owners
        if isinstance(base[key], dict) and key not in FREE_FORM:
            out[key] = _merge(base[key], val, f"{path}.{key}")
        else:
            out[key] = copy.deepcopy(val)
    return out


def resolve_config(path=None, seed=None, output_dir=None):
    """Defaults overlaid with the JSON file at ``path`` and command-line overrides."""
    user = {}
    if path:
        if not os.path.isfile(path):
            raise UsageError(f"config file not found: {path}")
        with open(path) as f:
            user = json.load(f)
    cfg = _merge(DEFAULTS, user)
    cfg["model"] = ModelConfig.from_dict({**DEFAULTS["model"], **cfg["model"]}).to_dict()
    GeneratorSpec.from_dict(cfg["data"]["generator"])
    if cfg["train"]["schedule"] != "cosine":
        raise ConfigError(f"only the cosine schedule is supported, got {cfg['train']['schedule']!r}")
    if seed is not None:
        cfg["train"]["seed"] = seed
        cfg["data"]["seed"] = seed
    if output_dir is not None:
        cfg["output_dir"] = output_dir
    return cfg


def _write_json(path, doc):
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def _prepare_output(cfg, force, marker):
    out = cfg["output_dir"]
    if os.path.exists(os.path.join(out, marker)) and not force:
        raise FileExistsError(f"{out} already holds {marker} (use --force to overwrite)")
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "config.json"), cfg)
    return out


def _settings(cfg, epochs=None):
    t = cfg["train"]
    return TrainSettings(lr=t["lr"], lr_min=t["lr_min"], epochs=epochs or t["epochs"], batch=t["batch"],
                         seed=t["seed"])


def _eval_samples(cfg):
    root, val = cfg["data"]["root"], cfg["data"]["val_split"]
    if val and val in read_manifest(root)["splits"]:
        return load_split(root, val)
    return load_split(root, cfg["data"]["split"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate_data(cfg, args):
    d = cfg["data"]
    spec = GeneratorSpec.from_dict(d["generator"])
    manifest = write_dataset(d["root"], d["counts"], spec, seed=d["seed"], force=args.force)
    _write_json(os.path.join(d["root"], "run_config.json"), cfg)
    sizes = ", ".join(f"{k}: {len(v)}" for k, v in manifest["splits"].items())
    print(f"wrote {d['root']} ({sizes}; {spec.H}x{spec.W}, seed {d['seed']})")


def cmd_train(cfg, args):
    out = _prepare_output(cfg, args.force, "history.jsonl")
    samples = load_split(cfg["data"]["root"], cfg["data"]["split"])
    val = _eval_samples(cfg)
    model = build_model(ModelConfig.from_dict(cfg["model"]), seed=cfg["train"]["seed"])
    hist_path = os.path.join(out, "history.jsonl")
    open(hist_path, "w").close()
    best = {"miou": -1.0}

    def on_epoch(record, m):
        with open(hist_path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        miou = record.get("val_miou")
        if miou is not None and miou == miou and miou > best["miou"]:
            best.update(miou=miou, epoch=record["epoch"])
            save_checkpoint(os.path.join(out, "best.ckpt"), m, extra={"epoch": record["epoch"], "val_miou": miou})
        print(f"epoch {record['epoch']:4d}  lr {record['lr']:.2e}  loss {record['train_loss']:.4f}"
              + (f"  val mIoU {miou:.4f}" if miou is not None else ""))

    try:
        train(model, samples, _settings(cfg), val_samples=val, on_epoch=on_epoch)
    except NonFiniteLossError as e:
        _write_json(os.path.join(out, "nan_dump.json"),
                    {"error": str(e), "epoch": e.epoch, "batch_ids": e.batch_ids, "split": cfg["data"]["split"]})
        raise
    save_checkpoint(os.path.join(out, "last.ckpt"), model, extra={"epoch": cfg["train"]["epochs"] - 1})
    if "epoch" not in best:
        save_checkpoint(os.path.join(out, "best.ckpt"), model, extra={"epoch": cfg["train"]["epochs"] - 1})
    print(f"checkpoints in {out}")


def cmd_eval(cfg, args):
    if not args.checkpoint or not os.path.isfile(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    out = _prepare_output(cfg, True, "metrics.json")
    model, _ = load_checkpoint(args.checkpoint)
    split = args.split or cfg["data"]["split"]
    cm = evaluate(model, load_split(cfg["data"]["root"], split))
    doc = report(cm, CLASS_NAMES[:model.cfg.num_classes])
    doc["split"] = split
    doc["checkpoint"] = os.path.abspath(args.checkpoint)
    _write_json(os.path.join(out, "metrics.json"), doc)
    print(f"{split}: OA {doc['oa']:.4f}  mIoU {doc['miou']:.4f}  mean F1 {doc['mean_f1']:.4f}")


def cmd_gradcheck(cfg, args):
    from .gradcheck import run_suite

    out = _prepare_output(cfg, True, "gradcheck.json")
    results = run_suite(seed=cfg["train"]["seed"])
    for r in results:
        print(r.line())
    _write_json(os.path.join(out, "gradcheck.json"),
                [{"name": r.name, "error": r.error, "tol": r.tol, "passed": r.passed} for r in results])
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationFailure(f"gradient check failed: {', '.join(failed)}")


def _median_ms(fn, repeats, min_ms=None):
    """Median per-call time over ``repeats`` samples.

    When one call is too short for the timer, each sample times a growing
    batch of calls and reports the per-call average.
    """
    if min_ms is None:
        min_ms = 1000 * 1e3 * time.get_clock_info("perf_counter").resolution
    fn()
    inner = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        if (time.perf_counter() - t0) * 1e3 >= min_ms or inner >= 4096:
            break
        inner *= 2
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        times.append((time.perf_counter() - t0) * 1e3 / inner)
    return statistics.median(times)


def bench_scan(sizes, repeats, channels, state_dim, seed=0):
    """Median forward times of an MS-SSM block and ARGFM over square maps."""
    from .blocks import ms_ssm_block
    from .fusion import ARGFM

    torch.manual_seed(seed)
    block = ms_ssm_block(channels, state_dim=state_dim).eval()
    fuse = ARGFM(channels, state_dim).eval()
    rows = []
    with torch.no_grad():
        for s in sizes:
            x, y = torch.randn(1, channels, s, s), torch.randn(1, channels, s, s)
            for name, fn in (("ms_ssm", lambda: block(x)), ("argfm", lambda: fuse(x, y))):
                rows.append((name, s * s, _median_ms(fn, repeats)))
    return rows


def cmd_bench_scan(cfg, args):
    b = cfg["bench"]
    out = _prepare_output(cfg, True, "bench.csv")
    rows = bench_scan(sorted(b["sizes"]), b["repeats"], b["channels"], b["state_dim"], cfg["train"]["seed"])
    with open(os.path.join(out, "bench.csv"), "w") as f:
        f.write("component,tokens,median_ms\n")
        for name, tokens, ms in rows:
            f.write(f"{name},{tokens},{ms:.4f}\n")
            print(f"{name:8s} {tokens:7d} tokens  {ms:9.3f} ms")
    ms = {t: v for n, t, v in rows if n == "ms_ssm"}
    lo, hi = min(ms), max(ms)
    ratio = ms[hi] / ms[lo]
    print(f"ms_ssm time ratio {hi}/{lo} tokens: {ratio:.2f} (limit {b['max_ratio']})")
    if hi // lo == 16 and ratio >= b["max_ratio"]:
        raise VerificationFailure(f"MS-SSM scaling ratio {ratio:.2f} >= {b['max_ratio']}")


ABLATION_GRID = [(False, False), (True, False), (False, True), (True, True)]


def ablation_table(rows):
    lines = ["| MS-SSM | ARGFM | OA (%) | mIoU (%) |", "|:---:|:---:|:---:|:---:|"]
    for r in rows:
        lines.append(f"| {'✓' if r['use_ms_ssm'] else ''} | {'✓' if r['use_argfm'] else ''} "
                     f"| {100 * r['oa']:.2f} | {100 * r['miou']:.2f} |")
    return "\n".join(lines) + "\n"


def cmd_ablate(cfg, args):
    out = _prepare_output(cfg, args.force, "ablation.md")
    samples = load_split(cfg["data"]["root"], cfg["data"]["split"])
    val = _eval_samples(cfg)
    rows = []
    for ms, fuse in ABLATION_GRID:
        mcfg = ModelConfig.from_dict({**cfg["model"], "use_ms_ssm": ms, "use_argfm": fuse})
        model = build_model(mcfg, seed=cfg["train"]["seed"])
        train(model, samples, _settings(cfg))
        cm = evaluate(model, val)
        rows.append({"use_ms_ssm": ms, "use_argfm": fuse, "oa": oa(cm), "miou": iou_per_class(cm)[1]})
        print(f"ms_ssm={ms!s:5s} argfm={fuse!s:5s}  OA {rows[-1]['oa']:.4f}  mIoU {rows[-1]['miou']:.4f}")
    table = ablation_table(rows)
    with open(os.path.join(out, "ablation.md"), "w") as f:
        f.write(table)
    _write_json(os.path.join(out, "ablation.json"), rows)
    print(table, end="")


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench-scan": cmd_bench_scan,
    "ablate": cmd_ablate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="argmamba", description="Optical + DSM segmentation toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="RunConfig JSON file")
        s.add_argument("--output-dir", help="override output_dir")
        s.add_argument("--seed", type=int, help="override train and data seeds")
        s.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if name == "eval":
            s.add_argument("--checkpoint", required=True)
            s.add_argument("--split", help="dataset split to score (default data.split)")
    return p


def main(argv=None):
    threads = os.environ.get("ARGM_THREADS")
    try:
        if threads:
            if not threads.isdigit():
                raise UsageError(f"ARGM_THREADS must be a positive integer, got {threads!r}")
            torch.set_num_threads(max(1, int(threads)))
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args.config, args.seed, args.output_dir)
        COMMANDS[args.command](cfg, args)
        return EXIT_OK
    except (UsageError, ConfigError, FileExistsError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationFailure as e:
        print(f"verification failed: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except (ArgMambaError, NonFiniteLossError, OSError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
