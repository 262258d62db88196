"""Command line front end: train, eval, sweep-pick and prep-images.

Exit status is 0 only when every requested artifact was written.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import struct
import sys
import time
import typing
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import metalearn as ml
from . import models
from .diffcore import GROUPS, ParamSet
from .episodes import DatasetError, Splits, load_image_source, make_synthetic_source

logger = logging.getLogger("gpml")

MAGIC = b"GPML"
FORMAT_VERSION = 1
SCHEMA_VERSION = 1
SWEEP_CAPS = range(6)
LOG_FIELDS = ["episode", "meta_loss", "val_acc", "lr", "picked_mean_k"]

# Published experimental setup values; printed by --paper-defaults.
PUBLISHED_DEFAULTS = {
    "beta (outer lr)": 1e-3,
    "gamma (graph lr)": 1e-3,
    "lr decay": "x0.1 after 1/3 and 2/3 of the episodes",
    "total_episodes": 30000,
    "alpha_prop": 0.99,
    "k_nn": 20,
    "eval episodes": 600,
    "q_query": 15,
    "n_way": 5,
    "k_shot": "1 or 5",
    "full-scale meta-batch": 64,
    "image sizes": "84x84 (miniImageNet, CUB), 32x32 (CIFAR-FS, FC100)",
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "mean", "ci95", "episodes", "config_hash", "timestamp",
                 "warnings"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "mean": {"type": "number", "minimum": 0, "maximum": 1},
        "ci95": {"type": "number", "minimum": 0},
        "episodes": {"type": "integer", "minimum": 1},
        "config_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "timestamp": {"type": "string"},
        "warnings": {"type": "array", "items": {"type": "string"}},
        "algorithm": {"type": "string"},
        "gp_enabled": {"type": "boolean"},
    },
}


class HarnessError(Exception):
    pass


class ConfigError(HarnessError):
    pass


# ---------------------------------------------------------------- run spec

@dataclass(frozen=True)
class RunSpec:
    config: ml.MetaConfig
    dataset: str = "synthetic"
    data_root: str = ""
    manifest: str = ""
    data_seed: int = 0
    synthetic_dim: int = 20
    synthetic_classes: int = 50
    synthetic_items: int = 40
    synthetic_spread: float = 0.5
    width: int = 64
    hidden: tuple[int, ...] = (64, 64)
    out: str = "runs"

    def to_pairs(self) -> list[tuple[str, str]]:
        pairs = [(f.name, _format_value(getattr(self, f.name)))
                 for f in fields(self) if f.name not in ("config", "out")]
        pairs += [(k, _format_value(v)) for k, v in self.config.to_dict().items()]
        return sorted(pairs)


RUN_KEYS = [f.name for f in fields(RunSpec) if f.name != "config"]


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def _field_types(cls) -> dict:
    return typing.get_type_hints(cls)


def _parse_value(key: str, raw: str, hint):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if args and type(None) in args and origin is not tuple:
        if raw.lower() in ("none", ""):
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    try:
        if origin is tuple:
            inner = args[0]
            return tuple(inner(x) for x in raw.split(",") if x.strip())
        if hint is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return hint(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def read_config_file(path: str | Path) -> dict[str, str]:
    """UTF-8 ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_config_file(spec: RunSpec, path: Path) -> None:
    lines = [f"{k}={v}" for k, v in spec.to_pairs()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_runspec(file_values: dict[str, str], flag_values: dict) -> RunSpec:
    """Merge built-in defaults, config-file values and explicit flags (in that order)."""
    meta_types = _field_types(ml.MetaConfig)
    run_types = _field_types(RunSpec)
    meta, run = {}, {}
    for key, raw in file_values.items():
        if key in meta_types:
            meta[key] = _parse_value(key, raw, meta_types[key])
        elif key in RUN_KEYS:
            run[key] = _parse_value(key, raw, run_types[key])
        else:
            raise ConfigError(f"unknown config key: {key}")
    for key, value in flag_values.items():
        if value is None:
            continue
        (meta if key in meta_types else run)[key] = value
    try:
        config = ml.MetaConfig(**meta)
        spec = RunSpec(config=config, **run)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if spec.dataset not in ("synthetic", "images"):
        raise ConfigError(f"unknown dataset {spec.dataset!r}")
    if spec.dataset == "images" and not (spec.data_root and spec.manifest):
        raise ConfigError("dataset=images needs data_root and manifest")
    return spec


def config_hash(config: ml.MetaConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------- data / model

def load_splits(spec: RunSpec) -> Splits:
    if spec.dataset == "synthetic":
        return make_synthetic_source(spec.synthetic_dim, spec.synthetic_classes,
                                     spec.synthetic_items, spec.synthetic_spread, spec.data_seed)
    return load_image_source(spec.data_root, spec.manifest)


def initial_params(spec: RunSpec, splits: Splits) -> ParamSet:
    if spec.dataset == "synthetic":
        bb = models.BackboneSpec("mlp", (spec.synthetic_dim,), hidden=spec.hidden)
    else:
        src = splits.train
        shape = src.fetch(src.classes[0], np.array([0])).shape[1:]
        try:
            bb = models.BackboneSpec("conv4", tuple(shape), width=spec.width)
        except ValueError as exc:
            raise ConfigError(f"images of shape {tuple(shape)}: {exc}") from exc
    head = models.HeadSpec(bb.embedding_dim, spec.config.n_way)
    graph = models.GraphModuleSpec(channels=spec.width, hidden=spec.width)
    return models.init_params(bb, head, graph, seed=spec.config.seed)


# ---------------------------------------------------------------- params file

def save_params(params: ParamSet, path: str | Path) -> None:
    """Binary layout (all little-endian): b"GPML", u32 version, u32 count, then per
    parameter u32 name length, utf-8 name, u8 group tag, u32 rank, u64 dims, f64 values.
    """
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name in params:
        raw = name.encode("utf-8")
        value = np.ascontiguousarray(params[name], dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<BI", GROUPS.index(params.groups[name]), value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(value.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: str | Path) -> ParamSet:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise HarnessError(f"cannot read params file {path}: {exc}") from exc
    try:
        if data[:4] != MAGIC:
            raise HarnessError(f"{path}: not a params file (bad magic)")
        version, count = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise HarnessError(f"{path}: unsupported format version {version}")
        pos = 12
        values, groups = {}, {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            tag, rank = struct.unpack_from("<BI", data, pos)
            pos += 5
            shape = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(data):
                raise HarnessError(f"{path}: truncated at parameter {name!r}")
            values[name] = np.frombuffer(data, "<f8", size, pos).reshape(shape).astype(np.float64)
            groups[name] = GROUPS[tag]
            pos += 8 * size
        if pos != len(data):
            raise HarnessError(f"{path}: {len(data) - pos} trailing bytes")
        return ParamSet(values, groups)
    except (struct.error, IndexError, UnicodeDecodeError, ValueError) as exc:
        raise HarnessError(f"{path}: corrupt params file ({exc})") from exc


# ---------------------------------------------------------------- reports

def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, REPORT_SCHEMA)


def make_report(result: ml.EvalResult, config: ml.MetaConfig) -> dict:
    report = {
        "schema_version": SCHEMA_VERSION,
        "mean": result.mean,
        "ci95": result.ci95,
        "episodes": result.episodes,
        "config_hash": config_hash(config),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "warnings": list(result.warnings),
        "algorithm": config.algorithm,
        "gp_enabled": config.gp_enabled,
    }
    validate_report(report)
    return report


def emit_report(report: dict, path: Path) -> None:
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_log(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for row in rows:
            writer.writerow(["" if row[k] is None else repr(row[k]) if isinstance(row[k], float)
                             else row[k] for k in LOG_FIELDS])


def write_sweep(rows: list[tuple[int, float, float]], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cap", "mean_acc", "ci95"])
        for cap, mean, ci in rows:
            writer.writerow([cap, repr(mean), repr(ci)])


# ---------------------------------------------------------------- commands

def _spec_from_args(args) -> RunSpec:
    file_values = read_config_file(args.config) if args.config else {}
    flags = {k: v for k, v in vars(args).items() if k in FLAG_KEYS}
    return build_runspec(file_values, flags)


def _out_dir(spec: RunSpec) -> Path:
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    spec = _spec_from_args(args)
    if args.episodes is not None:
        spec = replace(spec, config=ml.with_overrides(spec.config, total_episodes=args.episodes))
    out = _out_dir(spec)
    splits = load_splits(spec)
    params = initial_params(spec, splits)
    write_config_file(spec, out / "config.txt")
    result = ml.meta_train(params, spec.config, splits.train, splits.val)
    write_log(result.log, out / "train_log.csv")
    if result.aborted:
        print(f"training aborted: {result.message}", file=sys.stderr)
        return 1
    save_params(result.params, out / "params.bin")
    last = result.log[-1] if result.log else {}
    val = last.get("val_acc")
    print(f"trained {spec.config.algorithm} gp={spec.config.gp_enabled} "
          f"episodes={spec.config.total_episodes} "
          f"meta_loss={last.get('meta_loss', float('nan')):.4f} "
          f"val_acc={'n/a' if val is None else f'{val:.4f}'} -> {out}")
    return 0


def _params_path(args, spec: RunSpec) -> Path:
    return Path(args.params) if args.params else Path(spec.out) / "params.bin"


def cmd_eval(args) -> int:
    spec = _spec_from_args(args)
    params = load_params(_params_path(args, spec))
    splits = load_splits(spec)
    result = ml.meta_test(params, spec.config, splits.test, args.episodes)
    report = make_report(result, spec.config)
    out = _out_dir(spec)
    path = Path(args.report) if args.report else out / "report.json"
    emit_report(report, path)
    print(f"{spec.config.algorithm} gp={spec.config.gp_enabled}: "
          f"{100 * result.mean:.2f} +- {100 * result.ci95:.2f} over {result.episodes} episodes")
    return 0


def sweep_pick(params: ParamSet, config: ml.MetaConfig, source, episodes: int,
               caps=SWEEP_CAPS) -> list[tuple[int, float, float]]:
    rows = []
    for cap in caps:
        res = ml.meta_test(params, ml.with_overrides(config, gp_enabled=True, pick_cap=cap),
                           source, episodes)
        rows.append((cap, res.mean, res.ci95))
    return rows


def cmd_sweep_pick(args) -> int:
    spec = _spec_from_args(args)
    params = load_params(_params_path(args, spec))
    splits = load_splits(spec)
    rows = sweep_pick(params, spec.config, splits.test, args.episodes)
    out = _out_dir(spec)
    path = Path(args.csv) if args.csv else out / "sweep.csv"
    write_sweep(rows, path)
    for cap, mean, ci in rows:
        print(f"cap={cap}  {100 * mean:.2f} +- {100 * ci:.2f}")
    return 0


def prep_images(src: Path, dst: Path, size: int) -> int:
    """Resize every image under ``src/<class>/`` to ``size`` x ``size`` RGB PNG."""
    from PIL import Image

    count = 0
    classes = sorted(d for d in src.iterdir() if d.is_dir())
    if not classes:
        raise HarnessError(f"{src}: no class directories")
    for cdir in classes:
        target = dst / cdir.name
        target.mkdir(parents=True, exist_ok=True)
        for f in sorted(cdir.iterdir()):
            if not f.is_file():
                continue
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB").resize((size, size), Image.BICUBIC)
                    im.save(target / (f.stem + ".png"), format="PNG")
            except OSError as exc:
                raise HarnessError(f"{f}: cannot convert ({exc})") from exc
            count += 1
    return count


def cmd_prep_images(args) -> int:
    n = prep_images(Path(args.src), Path(args.dst), args.size)
    print(f"wrote {n} images of {args.size}x{args.size} to {args.dst}")
    return 0


# ---------------------------------------------------------------- parser

FLAG_KEYS = {
    "algorithm", "gp_enabled", "alpha", "beta", "gamma", "inner_steps", "retrain_steps",
    "retrain_lr", "meta_batch", "alpha_prop", "k_nn", "n_way", "k_shot", "q_query", "seed",
    "pseudo_source", "picking", "pick_cap", "retrain_groups", "val_every", "val_episodes",
    "dataset", "data_root", "manifest", "data_seed", "out",
}


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run")
    g.add_argument("--config", help="key=value file (flags override it)")
    g.add_argument("--out", help="output directory (default: runs)")
    g.add_argument("--dataset", choices=["synthetic", "images"])
    g.add_argument("--data-root", dest="data_root")
    g.add_argument("--manifest")
    g.add_argument("--data-seed", dest="data_seed", type=int)
    g.add_argument("--seed", type=int)

    m = p.add_argument_group("meta-learning")
    m.add_argument("--algo", dest="algorithm", choices=sorted(ml.INNER_GROUPS))
    m.add_argument("--gp", dest="gp_enabled", action="store_true", default=None)
    m.add_argument("--no-gp", dest="gp_enabled", action="store_false")
    m.add_argument("--lr", dest="beta", type=float, help="outer step size (default 1e-3)")
    m.add_argument("--graph-lr", dest="gamma", type=float, help="graph step size (default 1e-3)")
    m.add_argument("--alpha", type=float, help="inner step size")
    m.add_argument("--inner-steps", dest="inner_steps", type=int)
    m.add_argument("--retrain-steps", dest="retrain_steps", type=int)
    m.add_argument("--retrain-lr", dest="retrain_lr", type=float)
    m.add_argument("--retrain-groups", dest="retrain_groups", choices=["algorithm", "both"])
    m.add_argument("--meta-batch", dest="meta_batch", type=int)
    m.add_argument("--alpha-prop", dest="alpha_prop", type=float, help="default 0.99")
    m.add_argument("--k-nn", dest="k_nn", type=int, help="default 20")
    m.add_argument("--way", dest="n_way", type=int)
    m.add_argument("--shot", dest="k_shot", type=int)
    m.add_argument("--query", dest="q_query", type=int, help="default 15")
    m.add_argument("--pseudo-source", dest="pseudo_source", choices=["propagation", "classifier"])
    m.add_argument("--picking", choices=["adaptive", "all"])
    m.add_argument("--pick-cap", dest="pick_cap", type=int)
    m.add_argument("--val-every", dest="val_every", type=int)
    m.add_argument("--val-episodes", dest="val_episodes", type=int)


class _PaperDefaults(argparse.Action):
    def __init__(self, option_strings, dest, **kwargs):
        super().__init__(option_strings, dest, nargs=0, default=argparse.SUPPRESS, **kwargs)

    def __call__(self, parser, namespace, values, option_string=None):
        for k, v in PUBLISHED_DEFAULTS.items():
            print(f"{k}: {v}")
        parser.exit(0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpml", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gpml {__version__}")
    parser.add_argument("--paper-defaults", action=_PaperDefaults,
                        help="print the published setup values used as defaults and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train and save params + log")
    _common(p)
    p.add_argument("--episodes", type=int, help="training episodes (default 30000)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="meta-test saved params, write a JSON report")
    _common(p)
    p.add_argument("--params", help="params file (default: <out>/params.bin)")
    p.add_argument("--episodes", type=int, default=600)
    p.add_argument("--report", help="report path (default: <out>/report.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-pick", help="accuracy vs. picked items per class, caps 0..5")
    _common(p)
    p.add_argument("--params")
    p.add_argument("--episodes", type=int, default=600)
    p.add_argument("--csv", help="CSV path (default: <out>/sweep.csv)")
    p.set_defaults(func=cmd_sweep_pick)

    p = sub.add_parser("prep-images", help="resize raw class folders to square PNGs")
    p.add_argument("src")
    p.add_argument("dst")
    p.add_argument("--size", type=int, choices=[84, 32], default=84)
    p.set_defaults(func=cmd_prep_images)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "episodes", None) is not None and args.episodes < (0 if args.command == "train" else 1):
        print("error: --episodes out of range", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (HarnessError, DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
