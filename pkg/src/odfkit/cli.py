"""``odfkit`` command line.

Exit codes: 0 success, 1 validation error (bad flags or inputs), 2 computation
failure.  Errors go to stderr as one JSON object per line so scripts can parse
them; tables go to stdout as CSV.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .errors import OdfError, ParseError
from .features import (DEFAULT_ALPHAS_DEG, DEFAULT_RANKS, ConeBank, odf_brute_force, odf_cloud,
                       resolve_workers)
from .alignment import pivot_ri_xy, pivot_ri_xyz
from .geometry import PointCloud, build_knn_index, icosphere_directions, normalize_to_unit_sphere
from .io.clouds import read_point_cloud
from .io.glyphs import export_glyphs
from .io.odffile import write_odf
from .io.synthetic import SyntheticDatasetSpec, generate_synthetic_dataset

log = logging.getLogger("odfkit")

_ALIGN = {"none": "none", "rixy": "ri_xy", "rixyz": "ri_xyz"}


class ValidationError(Exception):
    """Bad flags or inputs; exit code 1."""


class ComputationError(Exception):
    """The computation ran but failed (mismatch, divergence); exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


# -- shared helpers ------------------------------------------------------------

def _int_list(text):
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("list must not be empty")
    return vals


def _float_list(text):
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("list must not be empty")
    return vals


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def make_bank(level=1, ranks=DEFAULT_RANKS, alphas_deg=DEFAULT_ALPHAS_DEG) -> ConeBank:
    try:
        return ConeBank(icosphere_directions(level), tuple(math.radians(a) for a in alphas_deg),
                        tuple(ranks))
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def bank_metadata(bank: ConeBank):
    return {"level": bank.direction_set.level,
            "alphas_deg": [math.degrees(a) for a in bank.alphas],
            "ranks": list(bank.ranks)}


def bank_from_metadata(meta):
    b = meta.get("bank", {})
    return make_bank(b.get("level", 1), b.get("ranks", DEFAULT_RANKS),
                     b.get("alphas_deg", DEFAULT_ALPHAS_DEG))


def _load_cloud(path, normalize=True) -> PointCloud:
    if not Path(path).is_file():
        raise ValidationError(f"no such file: {path}")
    cloud = read_point_cloud(path)
    return normalize_to_unit_sphere(cloud) if normalize else cloud


def parse_dataset(text):
    """``synth`` or ``synth:seed=29,samples=100,points=512,noise=0.01``, or a directory.

    A directory holds ``train/<class>/*`` and ``test/<class>/*`` cloud files;
    class ids follow sorted class-directory names.
    Returns ``(train_clouds, test_clouds, class_names)``.
    """
    if text == "synth" or text.startswith("synth:"):
        kwargs = {}
        keys = {"seed": ("seed", int), "samples": ("samples_per_class", int),
                "points": ("points", int), "noise": ("noise", float)}
        body = text[len("synth:"):] if ":" in text else ""
        for item in filter(None, body.split(",")):
            key, _, value = item.partition("=")
            if key not in keys:
                raise ValidationError(f"unknown synthetic dataset key {key!r}")
            name, conv = keys[key]
            try:
                kwargs[name] = conv(value)
            except ValueError:
                raise ValidationError(f"bad value for {key}: {value!r}") from None
        try:
            ds = generate_synthetic_dataset(SyntheticDatasetSpec(**kwargs))
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
        return ds.train, ds.test, ds.class_names
    root = Path(text)
    if not root.is_dir():
        raise ValidationError(f"dataset must be 'synth[:...]' or a directory, got {text!r}")
    names = sorted(p.name for p in (root / "train").iterdir() if p.is_dir()) \
        if (root / "train").is_dir() else []
    if len(names) < 2:
        raise ValidationError(f"{root}/train must contain at least two class directories")
    splits = []
    for split in ("train", "test"):
        clouds = []
        for label, name in enumerate(names):
            for f in sorted((root / split / name).glob("*")):
                if f.is_file():
                    c = _load_cloud(f)
                    clouds.append(PointCloud(c.points, c.colors, label))
        splits.append(clouds)
    return splits[0], splits[1], names


# -- subcommands ---------------------------------------------------------------

def cmd_directions(args):
    dirs = icosphere_directions(args.level).directions
    text = "".join(" ".join(format(x, ".17g") for x in d) + "\n" for d in dirs)
    if args.out:
        Path(args.out).write_text(text, encoding="ascii")
    else:
        sys.stdout.write(text)
    print(f"directions,{len(dirs)}", file=sys.stderr if not args.out else sys.stdout)
    return 0


def cmd_features(args):
    bank = make_bank(args.level, args.ranks, args.alphas_deg)
    cloud = _load_cloud(args.input)
    if len(cloud) <= bank.max_rank:
        raise ValidationError(
            f"cloud has {len(cloud)} points; neighbor rank {bank.max_rank} needs more")
    t = time.perf_counter()
    field_ = odf_cloud(cloud, bank, _ALIGN[args.align], workers=args.workers)
    elapsed = time.perf_counter() - t
    write_odf(args.out, field_)
    n, d, s = field_.shape
    print("points,directions,scales,cones,seconds")
    print(f"{n},{d},{s},{bank.n_cones},{elapsed:.6f}")
    return 0


def oracle_sweep(seeds, max_points, bank, alignments=("none", "ri_xy", "ri_xyz"), perturb=False,
                 workers=None):
    """Compare the fast extractor with the per-cone oracle on seeded clouds.

    Yields ``(seed, n_points, alignment, mismatches)`` where ``mismatches``
    lists ``(point, cone)`` pairs.  ``perturb`` nudges one fast value to prove
    the comparison can fail.
    """
    pivots = {"none": None, "ri_xy": pivot_ri_xy, "ri_xyz": pivot_ri_xyz}
    lo = bank.max_rank + 1
    for seed in range(seeds):
        rng = np.random.Generator(np.random.PCG64(seed))
        n = int(rng.integers(lo, max(lo, max_points) + 1))
        cloud = PointCloud(rng.normal(size=(n, 3)))
        index = build_knn_index(cloud)
        for mode in alignments:
            field_ = odf_cloud(cloud, bank, mode, workers=workers, dtype=np.float64)
            fast = field_.values.copy()
            if perturb and seed == 0:
                fast[0, 0, 0] += 1.0 / bank.ranks[0]
            bad = []
            for i in range(n):
                # Frames come from the single-point pivot routines, not the batch path.
                frame = None if pivots[mode] is None else pivots[mode](cloud, index, i).rotation
                ref = odf_brute_force(cloud, i, bank, frame)
                for l, s in zip(*np.nonzero(fast[i] != ref)):
                    bad.append((i, int(l) * bank.n_scales + int(s)))
            yield seed, n, mode, bad


def cmd_oracle_check(args):
    bank = make_bank(args.level)
    if args.max_points <= bank.max_rank:
        raise ValidationError(f"--max-points must exceed the largest rank {bank.max_rank}")
    print(f"# cones,{bank.n_cones}")
    print("seed,points,alignment,mismatches")
    failed = []
    for seed, n, mode, bad in oracle_sweep(args.seeds, args.max_points, bank,
                                           perturb=args.perturb, workers=args.workers):
        print(f"{seed},{n},{mode},{len(bad)}")
        failed += [(seed, mode, i, c) for i, c in bad]
    if failed:
        seed, mode, i, c = failed[0]
        raise ComputationError(f"{len(failed)} mismatches; first at seed={seed} alignment={mode} "
                               f"point={i} cone={c}")
    return 0


def _train_model(args, train_clouds, class_names, rotation):
    from .net.model import NetConfig
    from .net.train import TrainConfig, train

    bank = make_bank(args.level)
    net_cfg = NetConfig(n_classes=len(class_names), mode=args.mode, n_scales=bank.n_scales,
                        n_directions=bank.n_directions)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                      learning_rate=args.learning_rate, lr_schedule=args.lr_schedule,
                      seed=args.seed, rotation=rotation,
                      views=args.views)
    t = time.perf_counter()
    result = train(cfg, train_clouds, net_cfg, bank, args.workers)
    log.info("trained %s/%s in %.1fs", args.mode, rotation, time.perf_counter() - t)
    meta = {"bank": bank_metadata(bank), "class_names": list(class_names),
            "alignment": net_cfg.alignment,
            "train": {**asdict(cfg), "scale_range": list(cfg.scale_range),
                      "vote_scale_range": list(cfg.vote_scale_range)}}
    return result, bank, meta


def cmd_train(args):
    from .net.checkpoint import save_checkpoint
    from .net.train import evaluate

    train_clouds, test_clouds, names = parse_dataset(args.dataset)
    result, bank, meta = _train_model(args, train_clouds, names, args.rotation)
    save_checkpoint(args.ckpt, result.net, meta)
    acc, _ = evaluate(result.net, test_clouds, bank, args.rotation, args.seed,
                      workers=args.workers)
    print("epoch,loss")
    for e, loss in enumerate(result.epoch_losses):
        print(f"{e},{loss:.6f}")
    print(f"# train_accuracy,{result.train_accuracy:.4f}")
    print(f"# test_accuracy,{acc:.4f}")
    return 0


def _load_model(path):
    from .net.checkpoint import load_checkpoint

    if not path:
        raise ValidationError("a checkpoint is required (--ckpt)")
    if not Path(path).is_file():
        raise ValidationError(f"no such checkpoint: {path}")
    net, meta = load_checkpoint(path)
    align = meta.get("alignment")
    if align is not None:
        if align not in _ALIGN.values():
            raise ValidationError(f"checkpoint names unknown alignment {align!r}")
        net.config = replace(net.config, odf_alignment=align)
    return net, meta, bank_from_metadata(meta)


def cmd_eval(args):
    from .net.train import SCENARIOS, evaluate

    train_clouds, test_clouds, names = parse_dataset(args.dataset)
    if args.ckpt:
        net, meta, bank = _load_model(args.ckpt)
        if net.config.n_classes != len(names):
            raise ValidationError(f"checkpoint has {net.config.n_classes} classes, "
                                  f"dataset has {len(names)}")
        single, voted = evaluate(net, test_clouds, bank, "none", args.seed, votes=args.votes,
                                 workers=args.workers)
        print("metric,accuracy")
        print(f"single_shot,{single:.4f}")
        print(f"voting_{args.votes},{voted if voted is not None else single:.4f}")
    if args.scenarios:
        models = {}
        rows = []
        for name, train_rot, test_rot in SCENARIOS:
            if train_rot not in models:
                result, bank, _ = _train_model(args, train_clouds, names, train_rot)
                models[train_rot] = result.net
            acc, _ = evaluate(models[train_rot], test_clouds, bank, test_rot, args.seed + 1,
                              workers=args.workers)
            rows.append((name, args.mode, acc))
        accs = [r[2] for r in rows]
        print("scenario,mode,accuracy")
        for name, mode, acc in rows:
            print(f"{name},{mode},{acc:.4f}")
        print(f"# std,{float(np.std(accs)):.6f}")
    if not args.ckpt and not args.scenarios:
        raise ValidationError("eval needs --ckpt, --scenarios or both")
    return 0


def _selection(text, n):
    if text is None:
        return list(np.linspace(0, n - 1, num=min(8, n)).round().astype(int))
    sel = list(_int_list(text))
    bad = [i for i in sel if not 0 <= i < n]
    if bad:
        raise ValidationError(f"selected points {bad} out of range for {n} points")
    return sel


def cmd_glyphs(args):
    if args.ckpt:
        net, _, bank = _load_model(args.ckpt)
        align = net.config.alignment
    else:
        bank, align = make_bank(args.level), _ALIGN[args.align]
    cloud = _load_cloud(args.input)
    if len(cloud) <= bank.max_rank:
        raise ValidationError(f"cloud has {len(cloud)} points; rank {bank.max_rank} needs more")
    field_ = odf_cloud(cloud, bank, align, workers=args.workers)
    sel = _selection(args.points, len(cloud))
    count = export_glyphs(cloud, field_.values, sel, args.out, bank.direction_set, field_.frames,
                          args.length)
    print(f"segments,{count}")
    return 0


def cmd_contrib(args):
    from .net.model import prepare_input
    from .net.train import contribution_map

    net, _, bank = _load_model(args.ckpt)
    cloud = _load_cloud(args.input)
    if len(cloud) <= max(bank.max_rank, net.config.k):
        raise ValidationError(f"cloud has {len(cloud)} points; the model needs more")
    cmap = contribution_map(net, prepare_input(cloud, net.config, bank, args.workers))
    if cmap.degenerate:
        log.warning("every pooled channel is tied; contribution scores are degenerate")
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["index", "score"])
        for i, s in enumerate(cmap.counts):
            w.writerow([i, int(s)])
    finally:
        if args.out:
            out.close()
    return 0


def cmd_bench(args):
    bank = make_bank(args.level)
    rng = np.random.Generator(np.random.PCG64(args.seed))
    if args.points <= bank.max_rank:
        raise ValidationError(f"--points must exceed the largest rank {bank.max_rank}")
    cloud = normalize_to_unit_sphere(PointCloud(rng.normal(size=(args.points, 3))))
    multi = args.workers if args.workers and args.workers > 1 else 8
    print("workers,points,cones,total_s,per_point_us")
    results = {}
    for w in (1, multi):
        best = math.inf
        for _ in range(args.repeats):
            t = time.perf_counter()
            field_ = odf_cloud(cloud, bank, "none", workers=w)
            best = min(best, time.perf_counter() - t)
        results[w] = field_.values
        print(f"{w},{args.points},{bank.n_cones},{best:.6f},{1e6 * best / args.points:.3f}")
    same = np.array_equal(results[1].view(np.uint32), results[multi].view(np.uint32))
    print(f"# bit_identical,{int(same)}")
    if not same:
        raise ComputationError("multi-worker output differs from single-worker output")
    return 0


def cmd_ablation(args):
    """Accuracy for each tessellation level and alignment, trained from scratch."""
    from .net.model import NetConfig
    from .net.train import TrainConfig, evaluate, train

    train_clouds, test_clouds, names = parse_dataset(args.dataset)
    print("level,directions,alignment,accuracy")
    for level in args.levels:
        bank = make_bank(level)
        for align in args.aligns:
            net_cfg = NetConfig(n_classes=len(names), n_scales=bank.n_scales,
                                n_directions=bank.n_directions, odf_alignment=_ALIGN[align])
            cfg = TrainConfig(epochs=args.epochs, seed=args.seed, views=args.views)
            net = train(cfg, train_clouds, net_cfg, bank, args.workers).net
            acc, _ = evaluate(net, test_clouds, bank, "none", args.seed, workers=args.workers)
            print(f"{level},{bank.n_directions},{align},{acc:.4f}")
    return 0


# -- parser --------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="odfkit", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=_positive, default=None,
                   help="parallel workers (default: $ODF_WORKERS or 1)")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def level(sp):
        sp.add_argument("--level", type=int, choices=(0, 1, 2), default=1)

    sp = sub.add_parser("directions", help="write the icosphere direction set as XYZ text")
    level(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_directions)

    sp = sub.add_parser("features", help="compute and save the ODF field of a cloud")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--align", choices=sorted(_ALIGN), default="none")
    level(sp)
    sp.add_argument("--ranks", type=_int_list, default=DEFAULT_RANKS)
    sp.add_argument("--alphas-deg", type=_float_list, default=DEFAULT_ALPHAS_DEG)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_features)

    sp = sub.add_parser("oracle-check", help="fast extractor versus the per-cone oracle")
    sp.add_argument("--seeds", type=_positive, default=20)
    sp.add_argument("--max-points", type=_positive, default=256)
    level(sp)
    sp.add_argument("--perturb", action="store_true", help="inject a fault (self-test)")
    sp.set_defaults(func=cmd_oracle_check)

    def training(sp):
        sp.add_argument("--dataset", default="synth")
        sp.add_argument("--mode", choices=("standard", "xyz"), default="standard")
        sp.add_argument("--epochs", type=_positive, default=30)
        sp.add_argument("--batch-size", type=_positive, default=16)
        sp.add_argument("--learning-rate", type=float, default=0.01)
        sp.add_argument("--lr-schedule", choices=("constant", "cosine"), default="constant")
        sp.add_argument("--views", type=_positive, default=4)
        level(sp)

    sp = sub.add_parser("train", help="train the classifier and save a checkpoint")
    training(sp)
    sp.add_argument("--rotation", choices=("none", "z", "so3"), default="none")
    sp.add_argument("--ckpt", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="test accuracy and the rotation-scenario table")
    training(sp)
    sp.add_argument("--ckpt")
    sp.add_argument("--votes", type=_positive, default=1)
    sp.add_argument("--scenarios", action="store_true",
                    help="train z and SO3 models and print the scenario table")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("glyphs", help="export ODF glyphs as OBJ line geometry")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--ckpt")
    sp.add_argument("--align", choices=sorted(_ALIGN), default="none")
    level(sp)
    sp.add_argument("--points", help="comma-separated point indices (default: 8 spread out)")
    sp.add_argument("--length", type=float, default=0.1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_glyphs)

    sp = sub.add_parser("contrib", help="per-point max-pool contribution scores as CSV")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--ckpt")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_contrib)

    sp = sub.add_parser("bench", help="time ODF extraction, single and multi worker")
    sp.add_argument("--points", type=_positive, default=1024)
    sp.add_argument("--repeats", type=_positive, default=3)
    level(sp)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("ablation", help="accuracy per tessellation level and alignment")
    sp.add_argument("--dataset", default="synth")
    sp.add_argument("--levels", type=_int_list, default=(0, 1, 2))
    sp.add_argument("--aligns", type=lambda t: tuple(t.split(",")), default=("none", "rixy"))
    sp.add_argument("--epochs", type=_positive, default=10)
    sp.add_argument("--views", type=_positive, default=2)
    sp.set_defaults(func=cmd_ablation)
    return p


def _echo_config(args):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg["workers"] = resolve_workers(args.workers)
    print("config " + json.dumps(cfg, sort_keys=True, default=list), file=sys.stderr)


def _fail(kind, message, code):
    print(json.dumps({"error": kind, "code": code, "message": message}), file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "aligns", None):
            unknown = set(args.aligns) - set(_ALIGN)
            if unknown:
                raise ValidationError(f"unknown alignments {sorted(unknown)}")
        if getattr(args, "levels", None) and set(args.levels) - {0, 1, 2}:
            raise ValidationError("levels must be 0, 1 or 2")
    except ValidationError as exc:
        return _fail("validation", str(exc), 1)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    _echo_config(args)
    try:
        return args.func(args)
    except (ValidationError, ParseError, FileNotFoundError) as exc:
        return _fail("validation", str(exc), 1)
    except (ComputationError, OdfError, FloatingPointError) as exc:
        return _fail("computation", str(exc), 2)
    except ValueError as exc:
        return _fail("validation", str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
