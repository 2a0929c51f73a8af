"""Command-line entry point: ``granogen <subcommand> [options]``.

Every run resolves one JSON configuration (defaults, then ``--preset``,
then ``--config``, then flags), prints it to stderr as a single
``resolved-config {...}`` line and can write it with ``--dump-config``.
Feeding that file back with ``--config`` reproduces the run.

Failures print ``error stage=<subcommand> code=<kind> message=<text>`` to
stderr and exit with 2 (config), 3 (data) or 4 (numeric).
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

DEFAULTS: dict = {
    "seed": 0,
    "threads": 1,
    "schedule": {"T": 1000, "kind": "squaredcos"},
    "net": {
        "channel_blocks": [8, 16, 32, 32],
        "convs_per_block": 2,
        "up_mode": "nearest_conv",
        "time_embed_dim": 32,
        "norm_groups": 4,
    },
    "train": {
        "lr": 1e-4,
        "batch_size": 8,
        "weight_decay": 1e-2,
        "warmup_epochs": 5,
        "epochs": 160,
        "lam": 2.0,
        "masked_only": False,
        "max_steps": None,
    },
    "sampler": {"steps": 50, "eta": 0.0, "method": "ddim", "clip": True},
    "synth": {
        "dims": [16, 64, 64],
        "pitch": None,
        "grain_kind": "sphere",
        "min_diam": 0.025,
        "max_diam": 0.05,
        "target_phi": 0.64,
        "min_gap": 0,
        "trials": 8,
        "scenes": 16,
        "block_dims": [16, 32, 32],
    },
    "seam": {"axis": "x", "depth": 32, "overlap": 16, "context": 8},
    "segment": {
        "min_distance": 3.0,
        "min_height": 1.5,
        "valley_weight": 0.5,
        "erosion_steps": 0,
        "smoothing_iters": 0,
        "export_format": "tri_list",
    },
    "stats": {"tolerance": 1},
    "pipeline": {"samples": 4},
}

PRESETS: dict[str, dict] = {
    "desk": {
        "train": {"lr": 2e-3, "warmup_epochs": 1, "epochs": 100, "max_steps": 1600},
    },
}


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            if isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must not be an object")
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(preset: str | None = None, config_path: str | None = None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        cfg = _merge(cfg, PRESETS[preset])
    if config_path is not None:
        try:
            text = Path(config_path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


# builders from the resolved config


def _schedule(cfg):
    from granogen.sched import make_schedule

    return make_schedule(int(cfg["schedule"]["T"]), cfg["schedule"]["kind"])


def _plan(cfg, sched):
    from granogen.sched import make_plan

    s = cfg["sampler"]
    return make_plan(sched, int(s["steps"]), float(s["eta"]), s["method"])


def _unet(cfg, in_channels):
    from granogen.denoiser import UNetConfig

    return UNetConfig(in_channels=in_channels, **{**cfg["net"], "channel_blocks": tuple(cfg["net"]["channel_blocks"])})


def _scene_spec(cfg):
    from granogen.synth import SceneSpec

    s = cfg["synth"]
    return SceneSpec(
        dims=tuple(s["dims"]), pitch=s["pitch"], grain_kind=s["grain_kind"], min_diam=s["min_diam"],
        max_diam=s["max_diam"], target_phi=s["target_phi"], seed=int(cfg["seed"]), min_gap=s["min_gap"],
        trials=s["trials"],
    )


def _seam(cfg):
    from granogen.assembly import SeamSpec

    s = cfg["seam"]
    return SeamSpec(s["axis"], int(s["depth"]), int(s["overlap"]), int(s["context"]))


def _load_grids(path):
    from granogen.voxcore import decode_entry, iter_archive

    entries = list(iter_archive(path))
    return entries, [decode_entry(e) for e in entries]


# subcommands


def cmd_synth(cfg, args):
    from granogen.synth import make_dataset

    entries = make_dataset(_scene_spec(cfg), int(cfg["synth"]["scenes"]), tuple(cfg["synth"]["block_dims"]), args.out)
    print(f"wrote {len(entries)} blocks to {args.out}")


def cmd_voxelize(cfg, args):
    from granogen.ingest import parse_mesh, signed_distance, voxelize
    from granogen.voxcore import encode_entry, write_archive

    text = Path(args.mesh).read_text()
    fmt = args.format or ("grid_xml_subset" if args.mesh.endswith((".vtu", ".xml")) else "tri_list")
    mesh = parse_mesh(text, fmt)
    v = mesh.vertices
    pad = args.pitch
    bounds = (tuple(v.min(axis=0) - pad), tuple(v.max(axis=0) + pad))
    grid = voxelize(mesh, args.pitch, bounds)
    meta = {"source": Path(args.mesh).name, "phi": float(grid.data.mean())}
    entries = [encode_entry(grid, "grid", meta)]
    if args.sdf:
        entries.append(encode_entry(signed_distance(grid), "sdf", {"source": Path(args.mesh).name}, existing={"grid"}))
    write_archive(args.out, entries)
    print(f"voxelized {len(mesh.triangles)} triangles into {grid.dims} at pitch {args.pitch}")


def _train(cfg, grids, mode, out, loss_csv=None):
    import torch

    from granogen.denoiser import TrainConfig, build_net, save_checkpoint, train

    sched = _schedule(cfg)
    net = build_net(_unet(cfg, 3 if mode == "inpainting" else 1), seed=int(cfg["seed"]))
    torch.manual_seed(int(cfg["seed"]))
    tc = TrainConfig(seed=int(cfg["seed"]), **cfg["train"])
    report = train(net, grids, tc, sched, mode=mode)
    save_checkpoint(out, net, seed=int(cfg["seed"]), epoch=len(report.epoch_losses), extra={"mode": mode, "steps": report.steps})
    loss_csv = loss_csv or str(out) + ".loss.csv"
    with open(loss_csv, "w") as fh:
        fh.write("step,lr,loss\n")
        for i, (lr, loss) in enumerate(zip(report.lrs, report.step_losses)):
            fh.write(f"{i},{lr!r},{loss!r}\n")
    return net, report


def cmd_train(cfg, args):
    _, grids = _load_grids(args.archive)
    if not grids:
        raise DataError("training archive is empty")
    _, report = _train(cfg, grids, args.mode, args.out, args.loss_csv)
    print(f"trained {report.steps} steps, final loss {report.step_losses[-1]:.6f}")


def _sample(cfg, ckpt, count, dims):
    from granogen.denoiser import load_checkpoint
    from granogen.repaint import sample_unconditional

    net, _ = load_checkpoint(ckpt)
    sched = _schedule(cfg)
    grids = sample_unconditional(
        net, sched, _plan(cfg, sched), dims, batch=count, seed=int(cfg["seed"]), clip=cfg["sampler"]["clip"]
    )
    return grids


def cmd_sample(cfg, args):
    from granogen.voxcore import encode_entry, write_archive

    dims = tuple(args.dims) if args.dims else tuple(cfg["synth"]["block_dims"])
    grids = _sample(cfg, args.checkpoint, args.count, dims)
    entries = [encode_entry(g, f"sample_{i:04d}", {"phi": float(g.data.mean()), "seed": int(cfg["seed"]), "index": i})
               for i, g in enumerate(grids)]
    write_archive(args.out, entries)
    print(f"wrote {len(entries)} samples to {args.out}")


def _stitch(cfg, grids, ckpt):
    from granogen.assembly import stitch_sequence
    from granogen.denoiser import load_checkpoint

    net, _ = load_checkpoint(ckpt)
    sched = _schedule(cfg)
    spec = _seam(cfg)
    return stitch_sequence(grids, spec, net, sched, _plan(cfg, sched), int(cfg["seed"]), cfg["sampler"]["clip"]), spec


def cmd_stitch(cfg, args):
    from granogen.voxcore import encode_entry, write_archive

    _, grids = _load_grids(args.archive)
    n = args.blocks if args.blocks is not None else len(grids)
    if n < 2 or n > len(grids):
        raise DataError(f"need between 2 and {len(grids)} blocks, asked for {n}")
    out, spec = _stitch(cfg, grids[:n], args.checkpoint)
    depth = out.dims[spec.index]
    meta = {"blocks": n, "axis": spec.axis, "block_depth": spec.depth, "overlap": spec.overlap,
            "context": spec.context, "output_depth": depth, "phi": float(out.data.mean())}
    write_archive(args.out, [encode_entry(out, "stitched", meta)])
    print(f"stitched {n} blocks along {spec.axis}: output depth {depth}")


def _segment(cfg, grid):
    from granogen.segment import export_grains, refine_grains, segment

    s = cfg["segment"]
    labels = segment(grid, s["min_distance"], s["min_height"], None, s["valley_weight"])
    grains = refine_grains(labels, int(s["erosion_steps"]), int(s["smoothing_iters"]))
    mesh = export_grains(grains, s["export_format"]) if len(grains) else b""
    return labels, grains, mesh


def _pick(grids, entries, entry_id):
    if entry_id is None:
        return grids[0]
    for e, g in zip(entries, grids):
        if e.id == entry_id:
            return g
    raise DataError(f"no entry {entry_id!r} in archive")


def cmd_segment(cfg, args):
    entries, grids = _load_grids(args.archive)
    if not grids:
        raise DataError("archive is empty")
    labels, grains, mesh = _segment(cfg, _pick(grids, entries, args.entry))
    np.save(args.labels, labels.labels)
    Path(args.mesh).write_bytes(mesh)
    print(f"segmented {labels.count} grains ({grains.dropped} dropped)")


def _dashboard(cfg, grid, labels, provenance):
    from granogen.segment import refine_grains
    from granogen.stats import report

    s = cfg["segment"]
    grains = refine_grains(labels, int(s["erosion_steps"]), int(s["smoothing_iters"])) if labels is not None else None
    return report(grid, labels, grains, int(cfg["stats"]["tolerance"]), provenance)


def cmd_stats(cfg, args):
    from granogen.segment import LabelGrid

    entries, grids = _load_grids(args.archive)
    if not grids:
        raise DataError("archive is empty")
    grid = _pick(grids, entries, args.entry)
    if args.labels:
        lab = np.load(args.labels)
        if lab.shape != grid.dims:
            raise DataError(f"labels shape {lab.shape} does not match grid {grid.dims}")
        labels = LabelGrid(lab, grid.pitch, grid.origin)
    else:
        labels = _segment(cfg, grid)[0]
    rep = _dashboard(cfg, grid, labels, {"archive": Path(args.archive).name, "seed": int(cfg["seed"])})
    Path(args.out).write_text(rep.to_json())
    Path(args.csv or str(Path(args.out).with_suffix(".csv"))).write_text(rep.to_csv())
    print(f"phi {rep.packing_density:.4f}, {rep.grain_count} grains")


def cmd_pipeline(cfg, args):
    from granogen.synth import make_dataset
    from granogen.voxcore import decode_entry, encode_entry, write_archive

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    entries = make_dataset(_scene_spec(cfg), int(cfg["synth"]["scenes"]), tuple(cfg["synth"]["block_dims"]),
                           work / "dataset.tar")
    grids = [decode_entry(e) for e in entries]
    if not grids:
        raise DataError("synthesis produced no blocks")
    _train(cfg, grids, "unconditional", work / "unconditional.ckpt")
    _train(cfg, grids, "inpainting", work / "inpainting.ckpt")
    n = int(cfg["pipeline"]["samples"])
    samples = _sample(cfg, work / "unconditional.ckpt", n, tuple(cfg["synth"]["block_dims"]))
    write_archive(work / "samples.tar", [encode_entry(g, f"sample_{i:04d}", {"phi": float(g.data.mean())})
                                         for i, g in enumerate(samples)])
    big, spec = _stitch(cfg, samples, work / "inpainting.ckpt")
    write_archive(work / "stitched.tar", [encode_entry(big, "stitched", {"output_depth": big.dims[spec.index]})])
    labels, _, mesh = _segment(cfg, big)
    np.save(work / "labels.npy", labels.labels)
    (work / "grains.txt").write_bytes(mesh)
    rep = _dashboard(cfg, big, labels, {"pipeline": True, "seed": int(cfg["seed"])})
    (work / "dashboard.json").write_text(rep.to_json())
    (work / "dashboard.csv").write_text(rep.to_csv())
    print(f"pipeline done: phi {rep.packing_density:.4f}, {rep.grain_count} grains -> {work / 'dashboard.json'}")


COMMANDS = {
    "synth": cmd_synth,
    "voxelize": cmd_voxelize,
    "train": cmd_train,
    "sample": cmd_sample,
    "stitch": cmd_stitch,
    "segment": cmd_segment,
    "stats": cmd_stats,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (unknown keys are rejected)")
    common.add_argument("--preset", choices=sorted(PRESETS), help="bundled defaults")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, help="torch intra-op threads (1 = bitwise deterministic)")
    common.add_argument("--dump-config", help="write the resolved config here")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="granogen", description="Diffusion-based granular assembly generator")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="synthesize a training archive")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int)

    s = sub.add_parser("voxelize", parents=[common], help="voxelize a triangle mesh")
    s.add_argument("mesh")
    s.add_argument("--out", required=True)
    s.add_argument("--pitch", type=float, required=True)
    s.add_argument("--format", choices=["tri_list", "grid_xml_subset"])
    s.add_argument("--sdf", action="store_true", help="also store the signed distance field")

    s = sub.add_parser("train", parents=[common], help="train a denoiser")
    s.add_argument("archive")
    s.add_argument("--mode", choices=["unconditional", "inpainting"], default="unconditional")
    s.add_argument("--out", required=True)
    s.add_argument("--loss-csv")
    s.add_argument("--max-steps", type=int)

    s = sub.add_parser("sample", parents=[common], help="generate blocks")
    s.add_argument("checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--dims", type=int, nargs=3)
    s.add_argument("--steps", type=int)

    s = sub.add_parser("stitch", parents=[common], help="join blocks by inpainting their overlaps")
    s.add_argument("archive")
    s.add_argument("checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--blocks", type=int)
    s.add_argument("--overlap", type=int)
    s.add_argument("--depth", type=int)
    s.add_argument("--context", type=int)
    s.add_argument("--axis", choices=["z", "y", "x"])
    s.add_argument("--steps", type=int)

    s = sub.add_parser("segment", parents=[common], help="label grains and export meshes")
    s.add_argument("archive")
    s.add_argument("--entry")
    s.add_argument("--labels", required=True, help="output .npy label map")
    s.add_argument("--mesh", required=True, help="output polyhedra text file")

    s = sub.add_parser("stats", parents=[common], help="assembly statistics dashboard")
    s.add_argument("archive")
    s.add_argument("--entry")
    s.add_argument("--labels", help=".npy label map (segmented on the fly if omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--csv")

    s = sub.add_parser("pipeline", parents=[common], help="synth, train, sample, stitch, segment, stats")
    s.add_argument("--workdir", required=True)
    return p


def _overrides(args) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.threads is not None:
        o["threads"] = args.threads
    if getattr(args, "scenes", None) is not None:
        o.setdefault("synth", {})["scenes"] = args.scenes
    if getattr(args, "max_steps", None) is not None:
        o.setdefault("train", {})["max_steps"] = args.max_steps
    if getattr(args, "steps", None) is not None:
        o.setdefault("sampler", {})["steps"] = args.steps
    for flag, key in (("overlap", "overlap"), ("depth", "depth"), ("context", "context"), ("axis", "axis")):
        if getattr(args, flag, None) is not None:
            o.setdefault("seam", {})[key] = getattr(args, flag)
    return o


def _classify(exc: Exception) -> tuple[int, str]:
    from granogen.denoiser import TrainingError
    from granogen.voxcore import ArchiveError

    if isinstance(exc, ConfigError):
        return EXIT_CONFIG, "config"
    if isinstance(exc, (TrainingError, FloatingPointError, ArithmeticError)):
        return EXIT_NUMERIC, "numeric"
    if isinstance(exc, (DataError, ArchiveError, OSError, ValueError, KeyError)):
        return EXIT_DATA, "data"
    return 1, "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.preset, args.config, _overrides(args))
        # validate every section up front so config mistakes exit with code 2
        try:
            sched = _schedule(cfg)
            _plan(cfg, sched)
            _unet(cfg, 1)
            _scene_spec(cfg)
            _seam(cfg)
            from granogen.denoiser import TrainConfig

            TrainConfig(**cfg["train"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        echo = json.dumps(cfg, sort_keys=True)
        print(f"resolved-config {echo}", file=sys.stderr)
        if args.dump_config:
            Path(args.dump_config).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        import torch

        torch.set_num_threads(max(1, int(cfg["threads"])))
        COMMANDS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error line
        code, kind = _classify(exc)
        message = str(exc).replace("\n", " ")
        print(f"error stage={args.command} code={kind} message={message}", file=sys.stderr)
        if args.verbose:
            raise
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
