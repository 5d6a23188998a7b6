"""Command-line entry point: ``mvp <subcommand> [flags]``.

Settings come from an optional ``key = value`` config file (``#`` starts a
comment) and are overridden by command-line flags.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from mvp.augment import aug_bench
from mvp.checkpoint import load_backbone, load_checkpoint, save_backbone, save_checkpoint
from mvp.data import SyntheticSpec, load_dataset, nearest_mean_accuracy, synth_generate
from mvp.episodes import SamplerSpec, sample_episode, write_episode_dump
from mvp.pipeline import RunConfig, derive_seed, evaluate, meta_train
from mvp.prompts import init_prompts, trainable_param_count
from mvp.report import emit_bench, emit_report, summary_line
from mvp.vit import PRESETS, ViTConfig, count_backbone_params, init_backbone

log = logging.getLogger("mvp")

DESK_VIT = RunConfig().vit
COMMANDS = ("meta-train", "finetune-eval", "param-count", "aug-bench", "sample-episodes", "synth-gen")

_INT_KEYS = {"seed", "maxway", "maxshot", "queries_per_class", "prompt_tokens", "episodes",
             "finetune_steps", "eval_tasks", "backbone_seed", "image_size", "patch_size",
             "embed_dim", "num_layers", "num_heads", "mlp_ratio", "n_classes",
             "samples_per_class", "trials", "n"}
_FLOAT_KEYS = {"meta_lr", "momentum", "noise"}
_LIST_KEYS = {"lr_grid", "alpha_grid"}
_STR_KEYS = {"preset", "precision", "target", "backbone", "prompts", "out"}
_BOOL_KEYS = {"plain_nll"}
_PATHS_KEYS = {"sources"}
KNOWN_KEYS = _INT_KEYS | _FLOAT_KEYS | _LIST_KEYS | _STR_KEYS | _BOOL_KEYS | _PATHS_KEYS


class ConfigError(ValueError):
    pass


def read_config(path) -> dict:
    """Parse ``key = value`` lines into typed settings."""
    settings = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip().replace("-", "_"), value.strip()
        if not sep or not key:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        settings[key] = _convert(key, value, f"{path}:{lineno}")
    return settings


def _convert(key: str, value: str, where: str):
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
        if key in _LIST_KEYS:
            return tuple(float(v) for v in value.split(",") if v.strip())
        if key in _BOOL_KEYS:
            if value.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("1", "true", "yes")
        if key in _PATHS_KEYS:
            return tuple(v.strip() for v in value.split(",") if v.strip())
        return value
    except ValueError:
        raise ConfigError(f"{where}: bad value {value!r} for {key}") from None


def build_config(settings: dict) -> RunConfig:
    preset = settings.get("preset", "desk")
    if preset == "desk":
        vit = DESK_VIT
    elif preset in PRESETS:
        vit = PRESETS[preset]
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    over = {}
    if "image_size" in settings:
        over.update(image_height=settings["image_size"], image_width=settings["image_size"])
    if "patch_size" in settings:
        over.update(patch_height=settings["patch_size"], patch_width=settings["patch_size"])
    for key in ("embed_dim", "num_layers", "num_heads", "mlp_ratio"):
        if key in settings:
            over[key] = settings[key]
    vit = replace(vit, **over) if over else vit

    base = RunConfig()
    sampler = SamplerSpec(
        max_way=settings.get("maxway", base.sampler.max_way),
        max_shot=settings.get("maxshot", base.sampler.max_shot),
        queries_per_class=settings.get("queries_per_class", base.sampler.queries_per_class),
        seed=settings.get("seed", base.seed))
    fields = {k: settings[k] for k in ("prompt_tokens", "episodes", "meta_lr", "momentum",
                                       "finetune_steps", "lr_grid", "alpha_grid", "eval_tasks",
                                       "seed", "backbone_seed", "plain_nll", "precision",
                                       "sources", "target") if k in settings}
    if "backbone" in settings:
        fields["backbone_path"] = settings["backbone"]
    return RunConfig(vit=vit, sampler=sampler, **fields)


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--maxway", type=int, help="upper bound of sampled way (>= 5)")
    common.add_argument("--maxshot", type=int, help="upper bound of sampled shot (>= 1)")
    common.add_argument("--prompt-tokens", type=int, help="prompt tokens per layer")
    common.add_argument("--out", help="output directory")
    common.add_argument("--preset", choices=["desk", *PRESETS], help="backbone geometry")
    common.add_argument("--data", action="append", help="dataset path (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mvp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    sub.add_parser("meta-train", parents=[common], help="episodic meta-training of prompts")
    p = sub.add_parser("finetune-eval", parents=[common], help="per-task fine-tuning and evaluation")
    p.add_argument("--prompts", help="prompt checkpoint (default: <out>/prompts.ckpt)")
    p.add_argument("--tasks", type=int, help="number of evaluation tasks")
    sub.add_parser("param-count", parents=[common], help="print the trainable parameter count")
    p = sub.add_parser("aug-bench", parents=[common], help="time RPR against the pixel baseline")
    p.add_argument("--trials", type=int, default=1000)
    p = sub.add_parser("sample-episodes", parents=[common], help="dump sampled episodes")
    p.add_argument("-n", type=int, default=10, help="number of episodes")
    p = sub.add_parser("synth-gen", parents=[common], help="write a synthetic packed dataset")
    p.add_argument("--n-classes", type=int)
    p.add_argument("--samples-per-class", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--noise", type=float)
    return parser


def parse_cli(argv=None) -> tuple[str, RunConfig, argparse.Namespace]:
    """Parse arguments into (subcommand, merged RunConfig, raw namespace).

    Usage errors exit with status 2 after printing usage.
    """
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        settings = read_config(args.config) if args.config else {}
        for flag, key in (("seed", "seed"), ("maxway", "maxway"), ("maxshot", "maxshot"),
                          ("prompt_tokens", "prompt_tokens"), ("preset", "preset")):
            if getattr(args, flag) is not None:
                settings[key] = getattr(args, flag)
        args.settings = settings
        cfg = build_config(settings)
    except (ConfigError, ValueError, OSError) as err:
        parser.error(str(err))
    return args.command, cfg, args


# -- commands ------------------------------------------------------------------------


def _out_dir(args) -> Path:
    out = Path(args.out or args.settings.get("out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _backbone(cfg: RunConfig, out: Path, create: bool):
    path = Path(cfg.backbone_path) if cfg.backbone_path else out / "backbone.ckpt"
    if path.exists():
        weights = load_backbone(path)
        if weights.cfg != cfg.vit:
            raise ConfigError(f"{path}: backbone geometry {weights.cfg} differs from config {cfg.vit}")
        return weights.astype(cfg.dtype)
    if cfg.backbone_path:
        raise FileNotFoundError(path)
    weights = init_backbone(cfg.vit, cfg.backbone_seed, cfg.dtype)
    if create:
        save_backbone(weights, path, cfg.backbone_seed)
    return weights


def cmd_meta_train(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    paths = args.data or list(cfg.sources)
    if not paths:
        raise ConfigError("meta-train needs --data or 'sources' in the config")
    sources = [load_dataset(p) for p in paths]
    exclude = [load_dataset(cfg.target).dataset_id] if cfg.target else []
    weights = _backbone(cfg, out, create=True)
    bank = init_prompts(cfg.vit, cfg.prompt_tokens, derive_seed(cfg.seed, 0), cfg.dtype)
    bank, trace = meta_train(sources, cfg, bank, weights, exclude)
    save_checkpoint(bank, out / "prompts.ckpt", cfg.digest())
    emit_report(trace, out / "loss_trace.csv", cfg.seed, cfg.digest())
    if trace:
        print(f"episodes {len(trace)}  first-loss {trace[0].loss:.4f}  last-loss {trace[-1].loss:.4f}")
    print(f"wrote {out / 'prompts.ckpt'} and {out / 'loss_trace.csv'}")
    return 0


def cmd_finetune_eval(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    paths = args.data or ([cfg.target] if cfg.target else [])
    if len(paths) != 1:
        raise ConfigError("finetune-eval needs exactly one target (--data or 'target')")
    target = load_dataset(paths[0])
    weights = _backbone(cfg, out, create=False)
    ckpt = Path(args.prompts or args.settings.get("prompts") or out / "prompts.ckpt")
    if ckpt.exists():
        bank = load_checkpoint(ckpt).astype(cfg.dtype)
    else:
        log.warning("%s not found; evaluating freshly initialised prompts", ckpt)
        bank = init_prompts(cfg.vit, cfg.prompt_tokens, derive_seed(cfg.seed, 0), cfg.dtype)
    report = evaluate(target, bank, weights, cfg, args.tasks)
    emit_report(report, out / "eval.csv")
    print(summary_line(report))
    return 0


def cmd_param_count(cfg: RunConfig, args) -> int:
    print(trainable_param_count(cfg.vit, cfg.prompt_tokens))
    if args.verbose:
        print(f"backbone {count_backbone_params(cfg.vit)}", file=sys.stderr)
    return 0


def cmd_aug_bench(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    vit = cfg.vit if args.preset or "preset" in args.settings else PRESETS["tiny"]
    rows = aug_bench(vit, args.trials, cfg.seed)
    emit_bench(rows, out / "aug_bench.csv", cfg.seed, cfg.digest())
    for r in rows:
        print(f"{r.way}-way {r.shot:2d}-shot  rpr {r.rpr_seconds * 1e3:8.3f} ms  "
              f"pixel {r.pixel_seconds * 1e3:8.3f} ms  x{r.ratio:.2f}")
    return 0


def cmd_sample_episodes(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    paths = args.data or list(cfg.sources)
    if len(paths) != 1:
        raise ConfigError("sample-episodes needs exactly one dataset (--data)")
    data = load_dataset(paths[0])
    rng = np.random.default_rng(cfg.seed)
    tasks = [sample_episode(data, cfg.sampler, rng, i) for i in range(args.n)]
    write_episode_dump(tasks, out / "episodes.csv")
    print(f"wrote {len(tasks)} episodes to {out / 'episodes.csv'}")
    return 0


def cmd_synth_gen(cfg: RunConfig, args) -> int:
    s = args.settings
    spec = SyntheticSpec(
        n_classes=args.n_classes or s.get("n_classes", 8),
        samples_per_class=args.samples_per_class or s.get("samples_per_class", 40),
        image_size=args.image_size or s.get("image_size", cfg.vit.image_height),
        noise=args.noise if args.noise is not None else s.get("noise", SyntheticSpec.noise),
        seed=cfg.seed)
    target = Path(args.out or s.get("out", "out"))
    manifest = synth_generate(spec, target)
    msg = f"wrote {len(manifest)} samples in {manifest.num_classes} classes to {manifest.root}"
    if spec.noise == 0:
        msg += f"; nearest-mean accuracy {nearest_mean_accuracy(manifest):.3f}"
    print(msg)
    return 0


_DISPATCH = {"meta-train": cmd_meta_train, "finetune-eval": cmd_finetune_eval,
             "param-count": cmd_param_count, "aug-bench": cmd_aug_bench,
             "sample-episodes": cmd_sample_episodes, "synth-gen": cmd_synth_gen}


def main(argv=None) -> int:
    command, cfg, args = parse_cli(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _DISPATCH[command](cfg, args)
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(f"mvp {command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
