"""Command-line entry points: datagen, train, eval, predict, bench.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Configuration precedence is defaults < ``--config`` JSON file < flags; the
effective configuration is written as ``config.json`` into every output directory.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .errors import ConfigError, UsageError, VoxgraspError

SECTIONS = ("datagen", "model", "train", "eval")


def _section_classes():
    from .datagen import DatagenConfig
    from .network import ModelConfig
    from .training import TrainConfig

    return {"datagen": DatagenConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalSetup}


@dataclasses.dataclass(frozen=True)
class EvalSetup:
    """Evaluation limits and the scene distribution to evaluate on."""

    mode: str = "single"
    scenes: int = 20
    seed: int = 1000
    objects: int = 4
    graspable: bool = False  # restrict to the graspable primitive set
    q_min: float = 0.5
    band: float = 0.8
    mu: float = 0.4

    def __post_init__(self):
        problems = []
        if self.mode not in ("single", "multi"):
            problems.append("eval.mode must be single or multi")
        if self.scenes < 1:
            problems.append("eval.scenes must be >= 1")
        if problems:
            raise ConfigError("invalid eval config", problems)


class RunConfig:
    """All module configs, merged from defaults, a JSON file and flag overrides."""

    def __init__(self, values: dict | None = None):
        classes = _section_classes()
        values = values or {}
        problems = []
        for key in values:
            if key not in SECTIONS:
                problems.append(f"unknown section {key!r}")
        built = {}
        for name in SECTIONS:
            cls = classes[name]
            given = values.get(name, {})
            if not isinstance(given, dict):
                problems.append(f"section {name!r} must be an object")
                continue
            known = {f.name for f in dataclasses.fields(cls)}
            for k in given:
                if k not in known:
                    problems.append(f"unknown key {name}.{k}")
            kwargs = {k: v for k, v in given.items() if k in known}
            for key in ("channels", "kinds"):
                if isinstance(kwargs.get(key), list):
                    kwargs[key] = tuple(kwargs[key])
            try:
                built[name] = cls(**kwargs)
            except ConfigError as exc:
                problems.extend(f"{name}: {p}" for p in exc.problems)
            except (TypeError, ValueError) as exc:
                problems.append(f"{name}: {exc}")
        if problems:
            raise ConfigError("invalid configuration", problems)
        self.sections = built

    def __getitem__(self, name):
        return self.sections[name]

    def to_dict(self) -> dict:
        out = {}
        for name, obj in self.sections.items():
            d = dataclasses.asdict(obj)
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> RunConfig:
        """Defaults, then ``path`` (if any), then ``overrides`` ``{section: {key: value}}``."""
        merged = {}
        if path is not None:
            try:
                merged = json.loads(Path(path).read_text())
            except OSError as exc:
                raise ConfigError("cannot read config file", [f"{path}: {exc.strerror}"]) from exc
            except json.JSONDecodeError as exc:
                raise ConfigError("config file is not valid JSON", [f"{path}: {exc}"]) from exc
            if not isinstance(merged, dict):
                raise ConfigError("config file must hold an object", [str(path)])
        for section, kv in (overrides or {}).items():
            merged.setdefault(section, {})
            if isinstance(merged[section], dict):
                merged[section].update(kv)
        return cls(merged)

    def echo(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.json").write_text(self.to_json())


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get("VOXGRASP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"VOXGRASP_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _overrides(args, table) -> dict:
    """Collect ``{section: {key: value}}`` from flags that were given."""
    out = {}
    for dest, (section, key) in table.items():
        val = getattr(args, dest, None)
        if val is not None:
            out.setdefault(section, {})[key] = val
    return out


# -- commands -------------------------------------------------------------------


def cmd_datagen(args) -> int:
    from .datagen import generate_dataset, write_dataset

    table = {"scenes": ("datagen", "scenes"), "kind": ("datagen", "kind"), "seed": ("datagen", "seed"),
             "scale_lo": ("datagen", "scale_lo"), "scale_hi": ("datagen", "scale_hi"),
             "objects": ("datagen", "objects"), "resolution": ("datagen", "resolution")}
    cfg = RunConfig.load(args.config, _overrides(args, table))
    dg = cfg["datagen"]
    threads = resolve_threads(args.threads)
    records = generate_dataset(dg, threads)
    write_dataset(records, args.out)
    cfg.echo(args.out)
    cand = sum(r.stats.get("candidates", 0) for r in records)
    pruned = sum(r.stats.get("pruned", 0) for r in records)
    flagged = sum(r.flagged for r in records)
    share = 100.0 * pruned / cand if cand else 0.0
    print(f"scenes {len(records)}  flagged {flagged}  candidates {cand}  pruned {pruned} ({share:.1f}%)  "
          f"oracle calls {cand - pruned}")
    if records and all(not r.labels for r in records):
        print("error: no scene produced any label", file=sys.stderr)
        return 2
    return 0


def cmd_train(args) -> int:
    from .training import train

    table = {"contrast_weight": ("train", "contrast_weight"), "epochs": ("train", "epochs"),
             "steps": ("train", "steps"), "seed": ("train", "seed")}
    cfg = RunConfig.load(args.config, _overrides(args, table))
    if not Path(args.data).is_dir():
        raise UsageError(f"dataset directory {args.data} does not exist")
    cfg.echo(args.out)

    def log(m):
        if not args.quiet:
            print(f"step {m['step']:5d}  lr {m['lr']:.3e}  l_grasp {m['l_grasp']:.4f}  "
                  f"l_contrast {m['l_contrast']:.4f}  l_total {m['l_total']:.4f}", flush=True)

    res = train(args.data, cfg["train"], cfg["model"], args.out, resume=args.resume, log=log)
    if res.validation:
        v = res.validation[-1]
        print(f"final validation: bce {v['bce']:.4f} accuracy {v['accuracy']:.3f} rot {v['rot']:.4f}; "
              f"best epoch {res.best_epoch}")
    return 0


def _eval_parts(cfg: RunConfig):
    from .evalsim import EvalConfig, GRASPABLE_KINDS, GRASPABLE_SCALE, eval_scenes
    from .scenegen import KINDS

    es = cfg["eval"]
    dg = cfg["datagen"]
    ev = EvalConfig(mode=es.mode, q_min=es.q_min, band=es.band, mu=es.mu, table_margin=dg.table_margin,
                    clearance=dg.clearance, max_width=dg.max_width, finger_depth=dg.finger_depth)
    kinds, scale = (GRASPABLE_KINDS, GRASPABLE_SCALE) if es.graspable else (KINDS, (dg.scale_lo, dg.scale_hi))
    scenes = eval_scenes(es.scenes, es.mode, es.seed, es.objects, scale, kinds,
                         table_height=dg.table_height, workspace_size=dg.workspace_size)
    return ev, scenes


def cmd_eval(args) -> int:
    from .evalsim import ModelPlanner, OraclePlanner, evaluate, format_metrics, metrics, write_attempt_meshes, write_episode_csv
    from .training import load_model

    table = {"mode": ("eval", "mode"), "scenes": ("eval", "scenes"), "seed": ("eval", "seed"),
             "graspable": ("eval", "graspable"), "objects": ("eval", "objects")}
    cfg = RunConfig.load(args.config, _overrides(args, table))
    if args.oracle:
        planner = OraclePlanner(seed=cfg["eval"].seed)
        model_cfg = None
    else:
        if args.checkpoint is None:
            raise UsageError("eval needs --checkpoint (or --oracle)")
        store, model_cfg = load_model(args.checkpoint)
    ev, scenes = _eval_parts(cfg)
    dg = cfg["datagen"]
    if model_cfg is not None:
        if model_cfg.resolution != dg.resolution:
            dg = dataclasses.replace(dg, resolution=model_cfg.resolution)
        planner = ModelPlanner(store, model_cfg, ev, dg.table_height)
    episodes = evaluate(scenes, planner, ev, dg, threads=resolve_threads(args.threads))
    m = metrics(episodes)
    out = Path(args.out)
    cfg.echo(out)
    write_episode_csv(episodes, out / "episodes.csv")
    write_attempt_meshes(episodes, out / "grasps")
    (out / "metrics.json").write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
    print(format_metrics(m))
    print((out / "episodes.csv").read_text(), end="")
    return 0


def cmd_predict(args) -> int:
    from .network import predict
    from .training import load_model
    from .volume import read_tsdf, write_prediction_volume

    store, model_cfg = load_model(args.checkpoint)
    grid = read_tsdf(args.tsdf)
    if grid.resolution != model_cfg.resolution:
        raise ConfigError("resolution mismatch",
                          [f"tsdf is {grid.resolution}^3 but the model expects {model_cfg.resolution}^3"])
    pred = predict(store, grid, model_cfg)
    write_prediction_volume(pred.channels(), grid.voxel_size, args.out)
    print(f"wrote {args.out}: max quality {float(pred.quality.max()):.4f}")
    return 0


def cmd_bench(args) -> int:
    from . import tensor as T
    from .network import ModelConfig, empower_transformer, init_params
    from .scenegen import make_scene, render_views
    from .volume import GridConfig, orbit_cameras, tsdf_fuse

    n = args.size
    rng = np.random.default_rng(0)
    if args.op == "conv3":
        x = T.Tensor(rng.standard_normal((8, n, n, n)))
        w = T.Tensor(rng.standard_normal((8, 8, 3, 3, 3)))
        fn = lambda: T.conv3(x, w)  # noqa: E731
        voxels = n**3
    elif args.op == "attention":
        cfg = ModelConfig.toy(resolution=4 * n)
        p = init_params(cfg)
        x = T.Tensor(rng.standard_normal((cfg.channels[-1], n, n, n)))
        fn = lambda: empower_transformer(p, x, cfg.parts, cfg.attention_block)  # noqa: E731
        voxels = n**3
    else:
        scene = make_scene("single", 1, rng_seed=0)
        images = render_views(scene, orbit_cameras())
        fn = lambda: tsdf_fuse(images, GridConfig(n))  # noqa: E731
        voxels = n**3
    fn()
    reps = max(1, args.repeat)
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    dt = (time.perf_counter() - t0) / reps
    print(json.dumps({"op": args.op, "size": n, "seconds": dt, "voxels_per_second": voxels / dt}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker cap (default: VOXGRASP_THREADS or all cores)")
    p = _Parser(prog="voxgrasp", description="Volumetric 6-DoF grasp detection toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("datagen", parents=[common], help="generate a labelled dataset")
    d.add_argument("--out", required=True)
    d.add_argument("--config")
    d.add_argument("--scenes", type=int)
    d.add_argument("--kind", choices=("single", "pile", "packed"))
    d.add_argument("--objects", type=int)
    d.add_argument("--resolution", type=int)
    d.add_argument("--seed", type=int)
    d.add_argument("--scale-lo", dest="scale_lo", type=float)
    d.add_argument("--scale-hi", dest="scale_hi", type=float)
    d.set_defaults(func=cmd_datagen)

    t = sub.add_parser("train", parents=[common], help="train a model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--contrast-weight", dest="contrast_weight", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="closed-loop declutter evaluation")
    e.add_argument("--out", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--oracle", action="store_true", help="use the ground-truth oracle planner")
    e.add_argument("--config")
    e.add_argument("--scenes", type=int)
    e.add_argument("--mode", choices=("single", "multi"))
    e.add_argument("--objects", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--graspable", action="store_const", const=True, default=None)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", parents=[common], help="predict grasp volumes for one TSDF file")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--tsdf", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    b = sub.add_parser("bench", parents=[common], help="time a kernel")
    b.add_argument("--op", choices=("conv3", "attention", "fusion"), required=True)
    b.add_argument("--size", type=int, default=16)
    b.add_argument("--repeat", type=int, default=3)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for prob in exc.problems:
            print(f"  - {prob}", file=sys.stderr)
        return 1
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (VoxgraspError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
