"""Command-line entry point: synth, train, match, eval and extract."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import geomeval as ge
from . import synthgen as sg
from . import train as tr
from .config import ConfigError, RunConfig, build_config, describe_keys, format_config, parse_assignments, \
    read_config_file
from .layers import export_attention, record_attention
from .match2d import read_matches, write_matches
from .numerics import CheckpointError, no_grad
from .numerics.checkpoint import atomic_write_bytes
from .pipeline import TP3M, match_pair

log = logging.getLogger("tp3m")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# helpers -----------------------------------------------------------------------

def load_config(args) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    return build_config(file_values, parse_assignments(args.set))


def _with(cfg: RunConfig, **sections) -> RunConfig:
    return dataclasses.replace(cfg, **sections)


def load_image(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise CliError("io", f"image not found: {p}")
    try:
        img = sg.read_pgm(p)
    except (ValueError, IndexError) as e:
        raise CliError("io", f"cannot read {p}: {e}") from None
    if img.shape[0] % 8 or img.shape[1] % 8:
        raise CliError("input", f"image size {img.shape[1]}x{img.shape[0]} of {p} is not divisible by 8")
    return img


def load_checkpoint(path) -> TP3M:
    p = Path(path)
    if not p.is_file():
        raise CliError("io", f"checkpoint not found: {p}")
    try:
        model, _ = tr.load_model(p)
    except (CheckpointError, KeyError, ValueError) as e:
        raise CliError("checkpoint", f"{p}: {e}") from None
    return model


def dataset_ids(data: Path) -> list[dict]:
    manifest = data / "manifest.json"
    if not manifest.is_file():
        raise CliError("io", f"dataset manifest not found: {manifest}")
    return json.loads(manifest.read_text())["samples"]


# subcommands -------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> None:
    if args.count < 1:
        raise CliError("input", "--count must be >= 1")
    spec = cfg.synth
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError("io", f"cannot create {out}: {e.strerror}") from None
    gen = sg.gen_planar if args.mode == "planar" else sg.gen_3d
    entries = []
    for k in range(args.count):
        seed = args.seed + k
        sample = gen(seed, spec)
        sg.validate(sample)
        sid = f"scene_{k:04d}"
        sg.write_sample(sample, out / sid)
        entries.append({"id": sid, "mode": sample.mode, "seed": seed})
        log.info("wrote %s", sid)
    manifest = {"format": "tp3m-dataset v1", "mode": args.mode, "seed": args.seed,
                "spec": sg.spec_dict(spec), "samples": entries}
    atomic_write_bytes(out / "manifest.json", (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())


def cmd_train(args, cfg: RunConfig) -> None:
    data = Path(args.data)
    if not data.is_dir():
        raise CliError("io", f"dataset directory not found: {data}")
    tcfg = cfg.train
    if args.epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    model_cfg = dataclasses.replace(cfg.model, init_seed=tcfg.seed)
    ckpt = Path(args.ckpt)
    resume = None
    if args.resume:
        resume = Path(args.resume)
        if not resume.is_file():
            raise CliError("io", f"checkpoint not found: {resume}")
        try:
            blob = tr.read_config_blob(tr.ckpt.load(resume))
        except (CheckpointError, KeyError, ValueError) as e:
            raise CliError("checkpoint", f"{resume}: {e}") from None
        saved = {k: v for k, v in blob["model"].items() if k != "init_seed"}
        wanted = {k: v for k, v in dataclasses.asdict(model_cfg).items() if k != "init_seed"}
        if saved != wanted:
            raise CliError("checkpoint", f"resume shape mismatch: checkpoint model {saved} vs requested {wanted}")
    try:
        samples = tr.load_dataset(data)
    except (FileNotFoundError, ValueError) as e:
        raise CliError("input", str(e)) from None
    res = tr.train(samples, tcfg, model_cfg, cfg.match, resume=resume, out_dir=ckpt.parent or Path("."),
                   ckpt_name=ckpt.name)
    if res.curve:
        log.info("final loss line: %s", res.curve[-1])


def _match_header(mode: str, cfg: RunConfig, extra: dict | None = None) -> dict:
    h = {"mode": mode}
    h.update(extra or {})
    h["config"] = format_config(cfg)
    return h


def _run_match(model: TP3M, img_a, img_b, refs, cfg: RunConfig):
    cfg = _with(cfg, model=model.cfg)
    res = match_pair(model, img_a, img_b, refs, cfg.match)
    extra = {"n_matches": len(res.matches)}
    if res.reference_status:
        extra["references"] = ",".join(res.reference_status)
    return res.matches, _match_header(res.mode, cfg, extra)


def cmd_match(args, cfg: RunConfig) -> None:
    model = load_checkpoint(args.ckpt)
    if args.data:
        if not args.out_dir:
            raise CliError("usage", "--data requires --out-dir")
        data = Path(args.data)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for e in dataset_ids(data):
            d = data / e["id"]
            img_a, img_b = load_image(d / "a.pgm"), load_image(d / "b.pgm")
            refs = [] if args.no_ref else [load_image(d / "c.pgm")]
            ms, header = _run_match(model, img_a, img_b, refs, cfg)
            write_matches(out / f"{e['id']}.tsv", ms, header)
        return
    if not (args.src and args.dst and args.out):
        raise CliError("usage", "need --src, --dst and --out (or --data with --out-dir)")
    img_a, img_b = load_image(args.src), load_image(args.dst)
    if img_a.shape != img_b.shape:
        raise CliError("input", f"images differ in size: {img_a.shape} vs {img_b.shape}")
    refs = [load_image(r) for r in (args.ref or [])]
    for r in refs:
        if r.shape != img_a.shape:
            raise CliError("input", f"reference size {r.shape} differs from source {img_a.shape}")
    ms, header = _run_match(model, img_a, img_b, refs, cfg)
    write_matches(args.out, ms, header)


def cmd_eval(args, cfg: RunConfig) -> None:
    data, mdir = Path(args.data), Path(args.matches_dir)
    entries = dataset_ids(data)
    missing = [e["id"] for e in entries if not (mdir / f"{e['id']}.tsv").is_file()]
    if missing:
        raise CliError("input", "missing match files for: " + ",".join(missing))
    rows, per_pair, skipped = [], [], []
    for e in entries:
        sample = sg.load_sample(data / e["id"])
        ms = read_matches(mdir / f"{e['id']}.tsv")
        if args.task == "homography":
            if sample.H_ab is None or not sample.homography_evaluable:
                skipped.append(e["id"])
                continue
            r = ge.evaluate_homography_pair(ms.src, ms.dst, sample.H_ab, sample.shape, cfg.ransac,
                                            cfg.eval.homography_precision_px)
        else:
            if sample.degenerate_epipolar:
                skipped.append(e["id"])
                continue
            R, t = sample.relative_pose("b")
            r = ge.evaluate_pose_pair(ms.src, ms.dst, sample.K, R, t, cfg.ransac, cfg.eval.precision_tau)
        r["mode"] = ms.meta.get("mode", "unknown")
        rows.append(r)
        per_pair.append((e["id"], r))
    if not rows:
        raise CliError("input", f"no pair in {data} is evaluable for task {args.task}")
    summary = ge.summarize(args.task, rows)
    summary["skipped"] = len(skipped)
    ge.write_report(args.out, args.task, per_pair, summary, {"config": format_config(cfg)})
    for k, v in summary.items():
        print(f"{k}\t{v}")


def cmd_extract(args, cfg: RunConfig) -> None:
    model = load_checkpoint(args.ckpt)
    img = load_image(args.image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with no_grad(), record_attention() as rec:
        if args.pair:
            other = load_image(args.pair)
            if other.shape != img.shape:
                raise CliError("input", f"images differ in size: {img.shape} vs {other.shape}")
            match_pair(model, img, other, [], cfg.match)
        pyr = model.pyramid(img)  # last, so self-attention weights belong to --image
    sg.write_pgm(out / "edge.pgm", pyr.edge_map.data)
    for spec in args.attention or []:
        layer, _, head = spec.partition(":")
        try:
            h = int(head or 0)
            if not 0 <= h < model.cfg.heads:
                raise ValueError(f"head {h} out of range 0..{model.cfg.heads - 1}")
            export_attention(rec, layer, h, out / f"attn_{layer}_h{h}.bin")
        except (KeyError, ValueError) as e:
            raise CliError("input", str(e).strip("'\"")) from None


# argument parsing --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    keys = "config keys (set with --config FILE or --set key=value):\n" + describe_keys()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file; flags override it")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="tp3m", description=__doc__, epilog=keys,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common], epilog=keys,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    s = add("synth", "generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", choices=("planar", "3d"), default="planar")

    t = add("train", "train on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--ckpt", required=True, help="checkpoint to write; loss curves go next to it")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")

    m = add("match", "match an image pair, or every pair of a dataset")
    m.add_argument("--src")
    m.add_argument("--dst")
    m.add_argument("--ref", action="append", help="reference view(s); omit for the 2D-only path")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--out")
    m.add_argument("--data", help="dataset directory (uses a/b/c of each scene)")
    m.add_argument("--out-dir")
    m.add_argument("--no-ref", action="store_true", help="with --data: ignore the reference views")

    e = add("eval", "score match files against dataset ground truth")
    e.add_argument("--data", required=True)
    e.add_argument("--matches-dir", required=True)
    e.add_argument("--task", choices=("homography", "pose"), required=True)
    e.add_argument("--out", required=True, help="directory for report.txt and summary.json")

    x = add("extract", "write the edge map and attention weights of an image")
    x.add_argument("--image", required=True)
    x.add_argument("--ckpt", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--pair", help="second image, to record cross-attention layers as well")
    x.add_argument("--attention", action="append", metavar="LAYER[:HEAD]",
                   help="attention layer to export, e.g. self3:0 or cross3_ab:1")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "match": cmd_match, "eval": cmd_eval, "extract": cmd_extract}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
        COMMANDS[args.command](args, cfg)
    except CliError as e:
        print(f"tp3m: error: {e.kind}: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"tp3m: error: config: {e}", file=sys.stderr)
        return 1
    except (sg.InsufficientCovisibility, sg.DegenerateHomographyError, ValueError, OSError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"tp3m: error: {args.command}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
