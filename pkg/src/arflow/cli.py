"""Command line entry point: ``arflow <command> ...``.

Commands: make-corpus, train, generate, eval, sweep, replay. Every command
writes ``run_manifest.json`` into its output directory with the config
snapshot, the seed, the command line, any flag overrides and the sha256 of
every file it produced. ``arflow replay`` reruns a manifest into a fresh
directory and checks that the outputs match byte for byte.

Flags override the config file. Every flag has a config key (``--nfe`` is
``gen.nfe``, ``--steps`` is ``train.steps`` and so on) and ``--set
section.key=value`` reaches the rest.

Exit codes: 0 success, 1 replay mismatch, 2 configuration error,
3 numeric failure (NaN/inf), 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .config import ConfigError, config_from_flat, load_config, tomllib
from .evaluation import SWEEP_AXES, run_eval, run_sweep
from .generation import generate_batch, write_csv, write_pgm
from .params import CheckpointError
from .tasks import CorpusError, Example, load_corpus, make_corpus, make_examples, save_corpus
from .training import RunConfig, Trainer, load_model

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4
RUN_MANIFEST = "run_manifest.json"

# flag name -> config key
FLAG_KEYS = {
    "seed": "train.seed",
    "steps": "train.steps",
    "nfe": "gen.nfe",
    "cfg_scale": "gen.cfg_scale",
    "sigma2": "gen.sigma2",
    "threshold": "gen.threshold",
}


class UsageError(ConfigError):
    pass


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, command, argv, cfg, seed, outputs, checkpoints=(), overrides=None):
    """Record a run. The artifact hash is a sha1 over the sorted (path, sha256) list."""
    out_dir = Path(out_dir)
    files = sorted({Path(p).resolve().relative_to(out_dir.resolve()).as_posix() for p in outputs})
    entries = [{"path": f, "sha256": _sha256(out_dir / f)} for f in files]
    digest = hashlib.sha1("".join(f"{e['path']}\0{e['sha256']}\n" for e in entries).encode()).hexdigest()
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": cfg.to_dict() if cfg is not None else None,
        "overrides": overrides or {},
        "seed": seed,
        "artifact_hash": digest,
        "checkpoints": [str(c) for c in checkpoints],
        "outputs": entries,
    }
    (out_dir / RUN_MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def _scalar(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def resolve_config(args, base=None):
    """Config file (if any) on top of ``base``, then ``--set`` pairs, then dedicated flags."""
    cfg = base or RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    overrides = {}
    for pair in getattr(args, "set", None) or []:
        if "=" not in pair:
            raise UsageError(f"--set expects section.key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = _scalar(value.strip())
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    if overrides:
        cfg = config_from_flat(overrides, cfg)
    return cfg, overrides


def _ids(text, n):
    if text is None:
        return list(range(n))
    out = []
    for part in text.split(","):
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    bad = [i for i in out if not 0 <= i < n]
    if bad:
        raise UsageError(f"instance ids out of range [0, {n}): {bad}")
    return out


def _symbols(text):
    try:
        return np.array([int(s) for s in text.replace(",", " ").split()], dtype=np.int64)
    except ValueError as exc:
        raise UsageError(f"--text must be integer symbols, got {text!r}") from exc


# commands ------------------------------------------------------------------


def cmd_make_corpus(args, argv):
    cfg, overrides = resolve_config(args)
    instances = make_corpus(cfg.task, args.n, args.seed)
    out = Path(args.out)
    save_corpus(out, cfg.task, instances, args.seed, force=args.force)
    outputs = [out / "manifest.json"] + sorted((out / "frames").iterdir())
    write_manifest(out, "make-corpus", argv, cfg, args.seed, outputs, overrides=overrides)
    print(f"wrote {len(instances)} instances to {out}")


def cmd_train(args, argv):
    spec, instances, _ = load_corpus(args.corpus)
    out = Path(args.out)
    if args.resume:
        tr = Trainer.resume(args.resume, instances, out)
        cfg, overrides = resolve_config(args, tr.cfg)
        tr.cfg = cfg
    else:
        cfg, overrides = resolve_config(args)
        if cfg.task != spec:
            cfg = RunConfig(spec, cfg.model, cfg.train, cfg.gen)
        tr = Trainer(cfg, instances, out)
    log = tr.fit(callback=_progress if args.verbose else None)
    outputs = [out / "metrics.csv"] + sorted(out.glob("*.ckpt"))
    write_manifest(out, "train", argv, cfg, cfg.train.seed, outputs, checkpoints=[out / "final.ckpt"],
                   overrides=overrides)
    last = log.records[-1] if log.records else {}
    print(f"trained to step {tr.step}; final loss {last.get('loss_total', float('nan')):.4f}; {out / 'final.ckpt'}")


def _progress(tr, rec):
    if tr.step % tr.cfg.train.log_every == 0:
        print(f"step {rec['step']:6d}  loss {rec['loss_total']:.4f}", file=sys.stderr)


def _examples_for(args, spec):
    if args.text is not None:
        text = _symbols(args.text)
        prompt = None
        if args.prompt:
            try:
                prompt = np.loadtxt(args.prompt, delimiter=",", ndmin=2)
            except ValueError as exc:
                raise CorpusError(f"{args.prompt}: unreadable prompt frames ({exc})") from exc
        return [Example(text, prompt, np.zeros((0, spec.frame_dim)), text, -1, None, "text")]
    if not args.corpus:
        raise UsageError("generate needs --corpus or --text")
    _, instances, _ = load_corpus(args.corpus)
    examples = make_examples(spec, instances, args.setting, seed=args.pair_seed)
    return [examples[i] for i in _ids(args.ids, len(examples))]


def cmd_generate(args, argv):
    model, base = load_model(args.checkpoint)
    cfg, overrides = resolve_config(args, base)
    g = cfg.gen
    examples = _examples_for(args, cfg.task)
    rng = np.random.default_rng(cfg.train.seed)
    scale = 1.0 if args.no_guidance else g.cfg_scale
    frames = generate_batch(model, examples, nfe=g.nfe, cfg_scale=scale, sigma2=g.sigma2,
                            threshold=g.threshold, max_len_factor=g.max_len_factor, rng=rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for n, f in enumerate(frames):
        outputs.append(write_csv(out / f"utt{n:04d}.csv", f))
        outputs.append(write_pgm(out / f"utt{n:04d}.pgm", f))
    write_manifest(out, "generate", argv, cfg, cfg.train.seed, outputs, checkpoints=[args.checkpoint],
                   overrides=overrides)
    print(f"generated {len(frames)} sequences (nfe={g.nfe}, w={scale}, sigma2={g.sigma2}) into {out}")


def cmd_eval(args, argv):
    model, base = load_model(args.checkpoint)
    cfg, overrides = resolve_config(args, base)
    spec, instances, _ = load_corpus(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "eval.csv"
    if path.exists():
        path.unlink()
    settings = ("continuation", "cross") if args.setting == "both" else (args.setting,)
    results = run_eval(model, instances, spec, nfe=cfg.gen.nfe, w=cfg.gen.cfg_scale, sigma2=cfg.gen.sigma2,
                       settings=settings, seed=cfg.train.seed, csv_path=path, label=Path(args.checkpoint).stem,
                       threshold=cfg.gen.threshold, max_len_factor=cfg.gen.max_len_factor)
    write_manifest(out, "eval", argv, cfg, cfg.train.seed, [path], checkpoints=[args.checkpoint],
                   overrides=overrides)
    for r in results:
        print(f"{r.setting:12s} mse {r.mse:.4f}  corr {r.corr:.3f}  mode_acc {r.mode_acc:.3f}  "
              f"len_err {r.len_err:.2f}")


def _label(axis, cfg, path):
    if axis == "prior":
        return cfg.model.prior
    if axis == "mechanism":
        return cfg.model.mechanism
    if axis == "netscale":
        return f"fm_hidden={cfg.model.fm_hidden}"
    return Path(path).stem


def cmd_sweep(args, argv):
    if args.axis not in SWEEP_AXES:
        raise UsageError(f"--axis must be one of {SWEEP_AXES}")
    try:
        grid = [_scalar(g) for g in args.grid.split(",") if g] if args.grid else []
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.axis in ("nfe", "cfg", "sigma2") and not grid:
        raise UsageError(f"--grid is required for axis {args.axis}")
    checkpoints = []
    base = None
    for ck in args.checkpoint:
        _, cfg = load_model(ck)
        base = base or cfg
        checkpoints.append((str(ck), _label(args.axis, cfg, ck)))
    cfg, overrides = resolve_config(args, base)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    settings = ("continuation", "cross") if args.setting == "both" else (args.setting,)
    results = run_sweep(args.axis, checkpoints, grid, args.corpus, path, settings=settings,
                        defaults=(cfg.gen.nfe, cfg.gen.cfg_scale, cfg.gen.sigma2), seed=cfg.train.seed,
                        workers=args.workers)
    write_manifest(out, "sweep", argv, cfg, cfg.train.seed, [path], checkpoints=[c for c, _ in checkpoints],
                   overrides=overrides)
    for r in results:
        print(f"{r.model:16s} {r.setting:12s} nfe={r.nfe:<3d} w={r.w:<4g} s2={r.sigma2:<5g} mse {r.mse:.4f}  "
              f"mode_acc {r.mode_acc:.3f}")


def cmd_replay(args, argv):
    """Rerun a recorded command into ``--out`` and compare every output hash."""
    try:
        manifest = json.loads(Path(args.manifest).read_text())
    except ValueError as exc:
        raise CorpusError(f"{args.manifest}: not a run manifest ({exc})") from exc
    old = list(manifest["argv"])
    if "--out" not in old:
        raise UsageError(f"{args.manifest}: recorded command has no --out")
    i = old.index("--out")
    new = old[:i + 1] + [str(args.out)] + old[i + 2:]
    code = main(new)
    if code != EXIT_OK:
        return code
    fresh = json.loads((Path(args.out) / RUN_MANIFEST).read_text())
    want = {e["path"]: e["sha256"] for e in manifest["outputs"]}
    got = {e["path"]: e["sha256"] for e in fresh["outputs"]}
    bad = sorted(p for p in want.keys() | got.keys() if want.get(p) != got.get(p))
    if bad:
        print(f"replay differs in {len(bad)} file(s): {', '.join(bad[:5])}", file=sys.stderr)
        return EXIT_MISMATCH
    print(f"replay reproduced {len(want)} file(s); artifact hash {fresh['artifact_hash']}")
    return EXIT_OK


# parser --------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="arflow", description="Coarse-to-fine flow matching on toy sequence tasks.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="TOML file of section.key = value lines")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--out", required=True, help="output directory")

    def gen_flags(sp):
        sp.add_argument("--nfe", type=int, help="Euler steps per stage (gen.nfe, default 3)")
        sp.add_argument("--cfg-scale", dest="cfg_scale", type=float, help="guidance weight w (gen.cfg_scale, default 1.6)")
        sp.add_argument("--sigma2", type=float, help="prior variance around the previous frame (gen.sigma2)")
        sp.add_argument("--threshold", type=float, help="stop probability threshold (gen.threshold)")
        sp.add_argument("--seed", type=int, help="sampling seed (train.seed)")

    sp = sub.add_parser("make-corpus", help="render a synthetic corpus to disk")
    common(sp)
    sp.add_argument("--n", type=int, default=1000, help="number of instances")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    sp.set_defaults(func=cmd_make_corpus)

    sp = sub.add_parser("train", help="train a model on a corpus")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--steps", type=int, help="total optimizer steps (train.steps)")
    sp.add_argument("--seed", type=int, help="train.seed")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("-v", "--verbose", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", help="generate frame sequences (CSV + PGM per sequence)")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", help="take text and prompts from this corpus")
    sp.add_argument("--ids", help="instance ids, e.g. 0,3,5-9 (default: all)")
    sp.add_argument("--setting", choices=("continuation", "cross"), default="continuation")
    sp.add_argument("--pair-seed", dest="pair_seed", type=int, default=0, help="seed for cross-setting prompt pairing")
    sp.add_argument("--text", help="symbols to speak, e.g. '1 4 2 7' (instead of --corpus)")
    sp.add_argument("--prompt", help="CSV of prompt frames for --text")
    sp.add_argument("--no-guidance", dest="no_guidance", action="store_true", help="conditional field only")
    gen_flags(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("eval", help="oracle metrics on a held-out corpus")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--setting", choices=("continuation", "cross", "both"), default="both")
    gen_flags(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="evaluate a grid of settings or a set of checkpoints")
    common(sp)
    sp.add_argument("--checkpoint", required=True, action="append", help="repeat to compare checkpoints")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sp.add_argument("--grid", help="comma-separated values; NFE values for checkpoint axes")
    sp.add_argument("--setting", choices=("continuation", "cross", "both"), default="continuation")
    sp.add_argument("--workers", type=int, help="worker processes (default: ARFLOW_WORKERS or CPU count)")
    gen_flags(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("replay", help="rerun a run manifest and check outputs are identical")
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_replay)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        code = args.func(args, argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CorpusError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
