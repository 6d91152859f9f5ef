"""Command-line entry point: ``poseprior <command> [--config FILE] [--key.path VALUE ...]``."""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any

import torch

from . import metrics
from .data import CorpusSpec, PoseRecord, load_poses, save_poses, stack_poses, synth_corpus
from .denoiser import DenoiserConfig, PoseDiffuser, load_checkpoint, save_checkpoint
from .diffusion import make_schedule, sample
from .numcore import RngStream
from .skeleton import KinematicTree, forward_kinematics
from .tasks import complete_pose, denoise_pose, perturb_pose, refine_pose, render_observation, smplify_fit
from .train import TrainConfig, train

log = logging.getLogger("poseprior")

COMMANDS = ("gen-data", "train", "sample", "fit", "complete", "denoise", "eval")

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "model": {"latent_dim": 64, "blocks": 4, "heads": 4},
    "schedule": {"T": 1000},
    "corpus": {"size": 512, "test_size": 64, "latent_rank": 8},
    "training": {"batch_size": 32, "steps": 3000, "lr": 1e-3, "p_uncond": 0.1},
    "sampling": {"steps": 20, "guidance_scale": 1.0},
    "paths": {"corpus": "out/corpus.pdps", "checkpoint": "out/model.pdck", "output": "out"},
}


class UsageError(Exception):
    pass


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _set_path(cfg: dict, dotted: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise UsageError(f"cannot override {dotted}: {k} is not a section")
    node[keys[-1]] = value


def resolve_config(config_path: str | None, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_path:
        text = Path(config_path).read_text()
        try:
            cfg = _merge(cfg, json.loads(text))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{config_path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    it = iter(overrides)
    for flag in it:
        if not flag.startswith("--") or "." not in flag:
            raise UsageError(f"unrecognized argument {flag}")
        try:
            value = next(it)
        except StopIteration:
            raise UsageError(f"{flag} needs a value") from None
        _set_path(cfg, flag[2:], value)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _output_dir(cfg: dict) -> Path:
    out = Path(cfg["paths"]["output"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(cfg: dict, command: str, outputs: list[Path]) -> None:
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "config": cfg,
        "outputs": [str(p) for p in outputs],
    }
    (_output_dir(cfg) / f"{command}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_model(cfg: dict, tree: KinematicTree) -> PoseDiffuser:
    return load_checkpoint(cfg["paths"]["checkpoint"], tree)


def _split(records: list[PoseRecord], split: str) -> list[PoseRecord]:
    chosen = [r for r in records if r.split == split]
    if not chosen:
        raise RuntimeError(f"corpus has no {split!r} records")
    return chosen


def write_obj(poses: torch.Tensor, tree: KinematicTree, path: Path) -> None:
    """Wavefront-style dump: one ``o`` object per pose, joints as vertices, bones as lines."""
    with torch.no_grad():
        joints = forward_kinematics(poses, None, tree)
    lines = []
    base = 1
    for i, js in enumerate(joints):
        lines.append(f"o pose_{i}")
        lines.extend(f"v {x!r} {y!r} {z!r}" for x, y, z in js.tolist())
        lines.extend(f"l {base + p} {base + j}" for j, p in enumerate(tree.parent) if p >= 0)
        base += len(js)
    path.write_text("\n".join(lines) + "\n")


def _records(poses: torch.Tensor, captions=None, split="generated") -> list[PoseRecord]:
    return [PoseRecord(i, p, None if captions is None else captions[i], split) for i, p in enumerate(poses)]


def cmd_gen_data(cfg, args, tree):
    c = cfg["corpus"]
    spec = CorpusSpec(c["size"], cfg["seed"], c.get("latent_rank", 8), c.get("test_size", 0))
    path = Path(cfg["paths"]["corpus"])
    path.parent.mkdir(parents=True, exist_ok=True)
    save_poses(synth_corpus(spec), path)
    return [path]


def cmd_train(cfg, args, tree):
    records = _split(load_poses(cfg["paths"]["corpus"]), "train")
    m = cfg["model"]
    model = PoseDiffuser(DenoiserConfig(m["latent_dim"], m["blocks"], m["heads"]), tree, seed=cfg["seed"])
    t = cfg["training"]
    tcfg = TrainConfig(t["batch_size"], t["steps"], t["lr"], t["p_uncond"])
    history = train(model, records, make_schedule(cfg["schedule"]["T"]), tcfg, RngStream(cfg["seed"]).spawn(1), tree)
    ckpt = Path(cfg["paths"]["checkpoint"])
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt)
    loss_csv = _output_dir(cfg) / "train_loss.csv"
    with open(loss_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows((i, repr(v)) for i, v in enumerate(history))
    return [ckpt, loss_csv]


def cmd_sample(cfg, args, tree):
    model = _load_model(cfg, tree)
    s = cfg["sampling"]
    context = model.context([args.caption]) if args.caption else None
    with torch.no_grad():
        poses = sample(
            model, make_schedule(cfg["schedule"]["T"]), args.n, RngStream(cfg["seed"]).spawn(2),
            context=context, steps=s["steps"], guidance_scale=s["guidance_scale"], tree=tree,
        )  # fmt: skip
    out = Path(args.out) if args.out else _output_dir(cfg) / "samples.pdps"
    save_poses(_records(poses, [args.caption] * args.n if args.caption else None), out)
    outputs = [out]
    if args.obj:
        write_obj(poses, tree, Path(args.obj))
        outputs.append(Path(args.obj))
    return outputs


def _test_poses(cfg, n):
    records = _split(load_poses(cfg["paths"]["corpus"]), "test")[:n]
    return stack_poses(records)


def cmd_fit(cfg, args, tree):
    model = _load_model(cfg, tree)
    schedule = make_schedule(cfg["schedule"]["T"])
    gt = _test_poses(cfg, args.n)
    init = perturb_pose(gt, args.noise, RngStream(cfg["seed"]).spawn(3))
    obs = render_observation(gt, tree)
    if args.method == "refine":
        fitted = refine_pose(init, obs, model, schedule, tree)
    else:
        fitted = smplify_fit(obs, init, None, model, schedule, tree, iters=args.iters).pose
    rows = []
    with torch.no_grad():
        jg, ji, jf = (forward_kinematics(p, None, tree) for p in (gt, init, fitted))
    for i in range(len(gt)):
        rows.append(("pa_mpjpe", f"init_{i}", f"gt_{i}", metrics.pa_mpjpe(ji[i], jg[i])))
        rows.append(("pa_mpjpe", f"fit_{i}", f"gt_{i}", metrics.pa_mpjpe(jf[i], jg[i])))
    out = _output_dir(cfg)
    save_poses(_records(fitted.detach(), split="fit"), out / "fit.pdps")
    metrics.write_metric_csv(rows, out / "fit_metrics.csv")
    return [out / "fit.pdps", out / "fit_metrics.csv"]


def cmd_complete(cfg, args, tree):
    from .tasks import make_scenario

    model = _load_model(cfg, tree)
    gt = _test_poses(cfg, args.n)
    obs = make_scenario(args.scenario, gt, tree)
    done = complete_pose(obs, model, make_schedule(cfg["schedule"]["T"]), tree, RngStream(cfg["seed"]).spawn(4))
    with torch.no_grad():
        err = ((forward_kinematics(done, None, tree) - obs.joints).norm(dim=-1) * obs.mask).sum() / obs.mask.sum()
    train_poses = stack_poses(_split(load_poses(cfg["paths"]["corpus"]), "train"))
    rows = [
        ("observed_joint_error_m", args.scenario, "gt", float(err)),
        ("d_nn", args.scenario, "corpus", metrics.d_nn(done.detach(), train_poses)),
    ]
    out = _output_dir(cfg)
    save_poses(_records(done.detach(), split="complete"), out / f"complete_{args.scenario}.pdps")
    metrics.write_metric_csv(rows, out / f"complete_{args.scenario}.csv")
    return [out / f"complete_{args.scenario}.pdps", out / f"complete_{args.scenario}.csv"]


def cmd_denoise(cfg, args, tree):
    model = _load_model(cfg, tree)
    gt = _test_poses(cfg, args.n)
    noisy = perturb_pose(gt, args.noise, RngStream(cfg["seed"]).spawn(5))
    clean = denoise_pose(noisy, model, make_schedule(cfg["schedule"]["T"]))
    dq_noisy, dq_clean = metrics.delta_q(noisy, gt, tree), metrics.delta_q(clean, gt, tree)
    rows = [
        ("delta_q", "noisy", "gt", float(dq_noisy.mean())),
        ("delta_q", "denoised", "gt", float(dq_clean.mean())),
        ("j2j_mm", "denoised", "gt", float(metrics.j2j(clean, gt, tree).mean())),
    ]
    out = _output_dir(cfg)
    save_poses(_records(clean, split="denoised"), out / "denoised.pdps")
    metrics.write_metric_csv(rows, out / "denoise_metrics.csv")
    return [out / "denoised.pdps", out / "denoise_metrics.csv"]


def cmd_eval(cfg, args, tree):
    a = stack_poses(load_poses(args.a))
    b = stack_poses(load_poses(args.b)) if args.b else None
    if args.metric in ("fid", "dnn") and b is None:
        raise UsageError(f"--metric {args.metric} needs --b")
    value = {
        "fid": lambda: metrics.fid(a, b, tree),
        "apd": lambda: metrics.apd(a, tree),
        "dnn": lambda: metrics.d_nn(a, b),
    }[args.metric]()
    print(f"{args.metric} {value!r}")
    out = _output_dir(cfg) / f"eval_{args.metric}.csv"
    metrics.write_metric_csv([(args.metric, str(args.a), str(args.b or ""), value)], out)
    return [out]


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "fit": cmd_fit,
    "complete": cmd_complete,
    "denoise": cmd_denoise,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poseprior", description=__doc__)
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int)
    parser.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data")
    sub.add_parser("train")
    p = sub.add_parser("sample")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--caption")
    p.add_argument("--out")
    p.add_argument("--obj", help="also write FK joints as a wavefront-style point dump")
    p = sub.add_parser("fit")
    p.add_argument("--method", choices=("refine", "smplify"), default="refine")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--iters", type=int, default=200)
    p = sub.add_parser("complete")
    p.add_argument("--scenario", choices=("occ_arm", "occ_legs", "end_effectors"), default="occ_arm")
    p.add_argument("--n", type=int, default=8)
    p = sub.add_parser("denoise")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.5, help="per-joint rotation noise in radians")
    p = sub.add_parser("eval")
    p.add_argument("--metric", choices=("fid", "apd", "dnn"), required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b")
    return parser


def _split_overrides(argv: list[str]) -> tuple[list[str], list[str]]:
    """Pull ``--section.key value`` pairs out so they may appear anywhere."""
    plain, overrides = [], []
    it = iter(argv)
    for arg in it:
        if arg.startswith("--") and "." in arg:
            overrides.append(arg)
            value = next(it, None)
            if value is not None:
                overrides.append(value)
        else:
            plain.append(arg)
    return plain, overrides


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv, overrides = _split_overrides(list(sys.argv[1:] if argv is None else argv))
    if not any(a in COMMANDS for a in argv):
        parser.print_usage(sys.stderr)
        print("poseprior: error: missing or unknown command", file=sys.stderr)
        return 2
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, rest + overrides)
        if args.seed is not None:
            cfg["seed"] = args.seed
    except UsageError as exc:
        print(f"poseprior: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"poseprior: error: cannot read config: {exc}", file=sys.stderr)
        return 2
    log.info("command %s seed %s config %s", args.command, cfg["seed"], json.dumps(cfg, sort_keys=True))
    tree = KinematicTree()
    try:
        outputs = HANDLERS[args.command](cfg, args, tree)
        _write_manifest(cfg, args.command, outputs)
    except UsageError as exc:
        print(f"poseprior: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # one-line diagnostic for any runtime failure
        log.debug("failure", exc_info=True)
        print(f"poseprior: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
