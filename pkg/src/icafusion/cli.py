"""Batch command line: ``icafusion {train,fuse,eval,ablate,toy}``.

Settings are layered: built-in defaults, then the YAML file given with
``--config`` (or ``ICAF_CONFIG``), then ``ICAF_SEED`` / ``ICAF_DEVICE`` / ``ICAF_VARIANT`` /
``ICAF_OUT_DIR`` environment variables, then command-line flags.  Every run
writes the resulting effective configuration to ``<out-dir>/config.yaml``;
feeding that file back with ``--config`` repeats the run.

Exit codes: 0 success, 2 configuration or usage error, 3 data error
(missing, unreadable or mismatched inputs, damaged checkpoints),
4 numerical abort (non-finite loss).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import metrics
from .data import (
    IMAGE_SUFFIXES,
    PatchSet,
    build_dataset,
    denormalize,
    find_pairs,
    load_pair,
    normalize,
    patchset_from_arrays,
    read_gray,
)
from .discriminator import CriticSpec
from .errors import ConfigError, DataError, IntegrityError, NumericalError, VersionError
from .generator import VARIANT_LABELS, VARIANTS, GeneratorSpec, build_variant
from .synthetic import toy_pairs, write_toy_dataset
from .trainer import CHECKPOINT_NAME, LOSS_CSV_NAME, TrainConfig, fuse_arrays, load_generator, train

log = logging.getLogger("icafusion")

SCHEMA_VERSION = 1
CONFIG_NAME = "config.yaml"
MANIFEST_NAME = "manifest.txt"
ABLATION_NAME = "ablation.csv"
ENV_PREFIX = "ICAF_"

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

DATA_DEFAULTS = dict(dir=None, size=128, stride=12, shuffle_seed=0, toy_pairs=0, toy_size=64, toy_seed=0)
ABLATE_DEFAULTS = dict(variants=list(VARIANTS), eval_pairs=None)
_SECTIONS = ("schema_version", "data", "train", "generator", "critic", "ablate")


@dataclasses.dataclass
class RunConfig:
    data: dict
    train: TrainConfig
    generator: GeneratorSpec
    critic: CriticSpec
    ablate: dict

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "data": dict(self.data),
            "train": self.train.to_dict(),
            "generator": self.generator.to_dict(),
            "critic": self.critic.to_dict(),
            "ablate": dict(self.ablate),
        }

    def write(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _section(raw: dict, name: str, allowed) -> dict:
    value = raw.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    unknown = set(value) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    return dict(value)


def _coerce_train(values: dict) -> dict:
    """Cast YAML scalars to the field types of TrainConfig (YAML reads ``1e-4`` as text)."""
    defaults = TrainConfig()
    out = {}
    for key, value in values.items():
        default = getattr(defaults, key, None)
        try:
            if isinstance(default, float) and not isinstance(value, bool):
                value = float(value)
            elif isinstance(default, int) and not isinstance(default, bool) and value is not None:
                value = int(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train.{key}: cannot read {value!r} as {type(default).__name__}") from exc
        out[key] = value
    return out


def read_config_file(path) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} does not exist") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config schema_version {version}, this program reads {SCHEMA_VERSION}")
    return raw


def build_run_config(raw: dict, overrides: dict | None = None) -> RunConfig:
    """Merge a parsed config mapping with flag/env overrides and validate every section.

    ``overrides`` maps ``"section.key"`` to a value; ``None`` values are ignored.
    """
    raw = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, key = dotted.split(".")
        raw.setdefault(section, {})
        raw[section] = dict(raw[section] or {})
        raw[section][key] = value

    data = {**DATA_DEFAULTS, **_section(raw, "data", DATA_DEFAULTS)}
    train_cfg = TrainConfig.from_dict(_coerce_train(_section(raw, "train",
                                                             [f.name for f in dataclasses.fields(TrainConfig)])))

    gen_fields = [f.name for f in dataclasses.fields(GeneratorSpec)]
    gen = _section(raw, "generator", gen_fields + ["widths"])
    widths = gen.pop("widths", None)
    if widths is not None:
        gen.setdefault("encoder_widths", widths)
        gen.setdefault("decoder_widths", tuple(reversed(widths))[:3])
    spec = GeneratorSpec.from_dict(gen)
    # The variant name fixes which attention stages exist.
    spec = build_variant(spec.variant, spec)

    crit = _section(raw, "critic", [f.name for f in dataclasses.fields(CriticSpec)])
    crit.setdefault("input_size", (int(data["size"]), int(data["size"])))
    critic = CriticSpec.from_dict(crit)

    ablate = {**ABLATE_DEFAULTS, **_section(raw, "ablate", ABLATE_DEFAULTS)}
    bad = [v for v in ablate["variants"] if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown ablation variants {bad}; choose from {', '.join(VARIANTS)}")
    return RunConfig(data, train_cfg, spec, critic, ablate)


def _env(name: str):
    return os.environ.get(ENV_PREFIX + name)


def _env_int(name: str):
    value = _env(name)
    if value is None:
        return None
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"{ENV_PREFIX}{name}={value!r} is not an integer") from exc


def run_config_from_args(args) -> RunConfig:
    config_path = args.config or _env("CONFIG")
    raw = read_config_file(config_path) if config_path else {}
    seed = args.seed if args.seed is not None else _env_int("SEED")
    overrides = {
        "train.seed": seed,
        "train.device": args.device or _env("DEVICE"),
        "generator.variant": getattr(args, "variant", None) or _env("VARIANT"),
        "train.epochs": getattr(args, "epochs", None),
        "train.batch_size": getattr(args, "batch", None),
        "train.max_steps": getattr(args, "max_steps", None),
        "data.dir": getattr(args, "data_dir", None),
        "data.toy_pairs": getattr(args, "toy", None),
    }
    if getattr(args, "data_dir", None):
        overrides["data.toy_pairs"] = 0
    return build_run_config(raw, overrides)


# ----------------------------------------------------------------- helpers


def _out_dir(args) -> Path:
    value = args.out_dir or _env("OUT_DIR")
    if not value:
        raise ConfigError("an output directory is required (--out-dir or ICAF_OUT_DIR)")
    return Path(value)


def _claim(path: Path, overwrite: bool) -> None:
    """Refuse to replace an existing output unless ``overwrite``; otherwise clear it."""
    if not path.exists():
        return
    if not overwrite:
        raise ConfigError(f"{path} already exists; pass --overwrite to replace it")
    if path.is_dir():
        shutil.rmtree(path)
    else:
        path.unlink()


def load_dataset(cfg: RunConfig, manifest_path=None) -> PatchSet:
    d = cfg.data
    size, stride = int(d["size"]), int(d["stride"])
    if d["dir"]:
        return build_dataset(d["dir"], d["shuffle_seed"], size, stride, manifest_path)
    if int(d["toy_pairs"]) > 0:
        pairs = toy_pairs(int(d["toy_pairs"]), int(d["toy_size"]), int(d["toy_seed"]))
        ps = patchset_from_arrays([(p.identifier, p.ir, p.vis) for p in pairs], size, stride)
        if manifest_path is not None:
            ps.write_manifest(manifest_path)
        return ps
    raise ConfigError("no training data: set data.dir (--data-dir) or data.toy_pairs (--toy)")


def _fmt(x: float) -> str:
    return repr(float(x))


def write_metric_csv(path, rows, mean: metrics.MetricReport, label: str = "identifier") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([label, *metrics.METRIC_NAMES])
        for name, report in rows:
            w.writerow([name, *map(_fmt, report.values())])
        w.writerow(["mean", *map(_fmt, mean.values())])


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_losses(csv_path, png_path) -> None:
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [int(r["step"]) for r in rows]
    for key in ("l_content", "l_g", "l_d_ir", "l_d_vis"):
        ax.plot(steps, [float(r[key]) for r in rows], label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def plot_metric_table(labels, reports, png_path) -> None:
    """One small bar chart per metric, bars labelled by row."""
    plt = _pyplot()
    names = metrics.METRIC_NAMES
    fig, axes = plt.subplots(2, 4, figsize=(14, 6))
    for ax, name in zip(axes.ravel(), names):
        ax.bar(range(len(labels)), [getattr(r, name) for r in reports])
        ax.set_title(name.upper() if name != "qabf" else "Qabf")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def _save_png(arr: np.ndarray, path) -> None:
    Image.fromarray(arr, mode="L").save(path)


# ----------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = run_config_from_args(args)
    out = _out_dir(args)
    resume = args.resume and (out / CHECKPOINT_NAME).exists()
    if not resume:
        for name in (CHECKPOINT_NAME, LOSS_CSV_NAME, CONFIG_NAME, MANIFEST_NAME, "losses.png"):
            _claim(out / name, args.overwrite)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(cfg, None if resume else out / MANIFEST_NAME)
    cfg.write(out / CONFIG_NAME)
    state = train(cfg.train, dataset, cfg.generator, cfg.critic, out_dir=out, resume=resume,
                  progress=not args.quiet)
    if args.plot:
        plot_losses(out / LOSS_CSV_NAME, out / "losses.png")
    print(f"trained {state.step} steps on {len(dataset)} patches; checkpoint: {out / CHECKPOINT_NAME}")
    return EXIT_OK


def _fuse_one(net, ir_path, vis_path) -> np.ndarray:
    pair = load_pair(ir_path, vis_path)
    return denormalize(fuse_arrays(net, normalize(pair.ir), normalize(pair.vis)))


def cmd_fuse(args) -> int:
    net = load_generator(args.checkpoint).to(args.device or _env("DEVICE") or "cpu")
    out = Path(args.out)
    if args.pairs_dir:
        pairs, unpaired = find_pairs(args.pairs_dir)
        for p in unpaired:
            log.warning("unpaired file skipped: %s", p.name)
        if not pairs:
            raise DataError(f"no <id>_ir / <id>_vis pairs in {args.pairs_dir}")
        targets = [out / f"{ident}.png" for ident, _, _ in pairs]
        for t in targets:
            _claim(t, args.overwrite)
        out.mkdir(parents=True, exist_ok=True)
        for (ident, p_ir, p_vis), target in zip(pairs, targets):
            _save_png(_fuse_one(net, p_ir, p_vis), target)
        print(f"fused {len(pairs)} pairs into {out}")
        return EXIT_OK
    if not (args.ir and args.vis):
        raise ConfigError("give --ir and --vis, or --pairs-dir")
    _claim(out, args.overwrite)
    out.parent.mkdir(parents=True, exist_ok=True)
    _save_png(_fuse_one(net, args.ir, args.vis), out)
    print(f"wrote {out}")
    return EXIT_OK


def _index_images(directory, suffix: str) -> dict[str, Path]:
    """Map identifier to file, stripping an optional ``_<suffix>`` from stems."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"directory {directory} does not exist")
    out = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        stem = p.stem
        if stem.endswith("_" + suffix):
            stem = stem[: -len(suffix) - 1]
        elif suffix != "fused" and (stem.endswith("_ir") or stem.endswith("_vis")):
            continue
        out[stem] = p
    return out


def cmd_eval(args) -> int:
    fused, ir, vis = _index_images(args.fused, "fused"), _index_images(args.ir, "ir"), _index_images(args.vis, "vis")
    matched = sorted(set(fused) & set(ir) & set(vis))
    for ident in sorted((set(fused) | set(ir) | set(vis)) - set(matched)):
        log.warning("identifier %s lacks a fused, infrared or visible image; skipped", ident)
    if not matched:
        raise DataError("no identifier has all of fused, infrared and visible images")
    out = Path(args.out)
    _claim(out, args.overwrite)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for ident in matched:
        f, a, b = read_gray(fused[ident]), read_gray(ir[ident]), read_gray(vis[ident])
        rows.append((ident, metrics.evaluate(f, a, b)))
    mean = metrics.mean_report(r for _, r in rows)
    write_metric_csv(out, rows, mean)
    if args.plot:
        plot_metric_table([i for i, _ in rows], [r for _, r in rows], out.with_suffix(".png"))
    print(f"evaluated {len(rows)} images; {out}")
    return EXIT_OK


def evaluate_generator(net, dataset: PatchSet, limit: int | None = None):
    """Fuse every source pair of ``dataset`` at full size and score it."""
    rows = []
    for ident in sorted(dataset.sources)[:limit]:
        pair = dataset.sources[ident]
        fused = denormalize(fuse_arrays(net, pair.ir, pair.vis))
        rows.append((ident, metrics.evaluate(fused, denormalize(pair.ir), denormalize(pair.vis))))
    return rows, metrics.mean_report(r for _, r in rows)


def run_ablation(cfg: RunConfig, out: Path, progress: bool = False) -> dict[str, metrics.MetricReport]:
    """Train and score each configured variant under one config; returns mean reports by variant."""
    dataset = load_dataset(cfg, out / MANIFEST_NAME)
    results = {}
    for variant in [v for v in VARIANT_LABELS if v in cfg.ablate["variants"]]:
        vdir = out / variant
        spec = build_variant(variant, cfg.generator)
        vcfg = dataclasses.replace(cfg, generator=spec)
        vdir.mkdir(parents=True, exist_ok=True)
        vcfg.write(vdir / CONFIG_NAME)
        log.info("training variant %s", variant)
        state = train(cfg.train, dataset, spec, cfg.critic, out_dir=vdir, progress=progress)
        rows, mean = evaluate_generator(state.generator.eval(), dataset, cfg.ablate["eval_pairs"])
        write_metric_csv(vdir / "metrics.csv", rows, mean)
        results[variant] = mean
    return results


def write_ablation_table(path, results: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", *metrics.METRIC_NAMES])
        for variant, report in results.items():
            w.writerow([VARIANT_LABELS[variant], *map(_fmt, report.values())])


def cmd_ablate(args) -> int:
    cfg = run_config_from_args(args)
    out = _out_dir(args)
    for name in (ABLATION_NAME, CONFIG_NAME, MANIFEST_NAME, "ablation.png", *VARIANTS):
        _claim(out / name, args.overwrite)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / CONFIG_NAME)
    results = run_ablation(cfg, out, progress=not args.quiet)
    write_ablation_table(out / ABLATION_NAME, results)
    if args.plot:
        plot_metric_table([VARIANT_LABELS[v] for v in results], list(results.values()), out / "ablation.png")
    print(f"ablation table: {out / ABLATION_NAME}")
    return EXIT_OK


def cmd_toy(args) -> int:
    out = _out_dir(args)
    for i in range(args.pairs):
        for kind in ("ir", "vis"):
            _claim(out / f"toy{i:03d}_{kind}.png", args.overwrite)
    seed = args.seed if args.seed is not None else (_env_int("SEED") or 0)
    write_toy_dataset(out, args.pairs, args.size, seed)
    print(f"wrote {args.pairs} synthetic pairs to {out}")
    return EXIT_OK


# ----------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, variant: bool = True) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="training seed (overrides train.seed)")
    p.add_argument("--device", help="torch device, e.g. cpu or cuda:0")
    p.add_argument("--out-dir", help="output directory")
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    p.add_argument("--quiet", action="store_true", help="no progress lines on stderr")
    p.add_argument("--plot", action="store_true", help="also write PNG plots")
    if variant:
        p.add_argument("--variant", choices=VARIANTS, help="generator variant")
    p.add_argument("--data-dir", help="directory of <id>_ir.* / <id>_vis.* pairs")
    p.add_argument("--toy", type=int, metavar="N", help="train on N synthetic pairs instead of --data-dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--max-steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icafusion", description=__doc__.split("\n\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a fusion generator")
    _common(p)
    p.add_argument("--resume", action="store_true", help="continue from <out-dir>/checkpoint.icaf")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="fuse image pairs with a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--ir")
    p.add_argument("--vis")
    p.add_argument("--pairs-dir", help="fuse every <id>_ir / <id>_vis pair in this directory")
    p.add_argument("--out", required=True, help="output PNG, or output directory with --pairs-dir")
    p.add_argument("--device")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="score fused images with the eight fusion metrics")
    p.add_argument("--fused", required=True, help="directory of <id>.png (or <id>_fused.png)")
    p.add_argument("--ir", required=True, help="directory of <id>.* or <id>_ir.*")
    p.add_argument("--vis", required=True, help="directory of <id>.* or <id>_vis.*")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score all seven attention variants")
    _common(p, variant=False)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("toy", help="write a synthetic infrared/visible dataset")
    p.add_argument("--out-dir")
    p.add_argument("--pairs", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_toy)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s: %(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, IntegrityError, VersionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
