"""Command-line entry point: ``choreoflow <command> [options]``.

Exit status is 0 on success, 1 on a domain error (message on stderr) and
2 on a usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ChoreoflowError

log = logging.getLogger("choreoflow")


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _schema(args):
    from .schema import find_schema

    return find_schema(args.schema)


def _motion_paths(path: str) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        files = sorted(p.rglob("*.dfm"))
        if not files:
            raise ChoreoflowError(f"no .dfm files under {p}")
        return files
    return [p]


# ---------------------------------------------------------------- commands


def cmd_schema_check(args) -> int:
    from .schema import dim_layout, load_schema

    path = Path(args.path)
    if path.exists():
        s = load_schema(path.read_bytes())
    else:
        s = _schema(argparse.Namespace(schema=args.path))
    lay = dim_layout(s, "continuous")
    _emit({
        "name": s.name, "version": s.version, "joints": len(s.joints), "depth": len(s.depth_levels),
        "native_pose_dim": s.native_pose_dim, "active_rotation_dim": s.active_rotation_dim,
        "continuous_dim": s.continuous_dim, "hash": s.hash.hex(),
        "groups": {k: int(len(v)) for k, v in lay.groups().items()},
    })
    return 0


def cmd_encode(args) -> int:
    from .io import read_motion
    from .representation import encode_sequence, normalize, stats_from_dict

    s = _schema(args)
    m = read_motion(args.input, s, strict=args.strict)
    c = encode_sequence(m, s)
    if args.stats:
        c = normalize(c, stats_from_dict(json.loads(Path(args.stats).read_text())))
    np.savez(args.out, frames=c.frames, identity=c.identity, fps=np.float64(c.fps),
             normalized=np.bool_(c.normalized), schema=np.str_(s.name))
    return 0


def cmd_decode(args) -> int:
    from .io import write_motion
    from .representation import ContinuousMotion, decode_sequence, denormalize, stats_from_dict

    s = _schema(args)
    with np.load(args.input) as z:
        c = ContinuousMotion(s.name, float(z["fps"]), z["frames"], bool(z["normalized"]), z["identity"])
    if c.normalized:
        if not args.stats:
            raise ChoreoflowError("input is normalized; pass --stats to denormalize")
        c = denormalize(c, stats_from_dict(json.loads(Path(args.stats).read_text())))
    m = decode_sequence(c, s)
    write_motion(m, args.out, s)
    fb = m.diagnostics.total if m.diagnostics is not None else 0
    if fb:
        print(f"warning: {fb} degenerate rotations replaced by identity", file=sys.stderr)
    return 0


def cmd_stats_fit(args) -> int:
    from .io import read_motion
    from .representation import MotionCodec

    s = _schema(args)
    motions = [read_motion(p, s, strict=args.strict) for p in _motion_paths(args.data)]
    codec = MotionCodec(s, args.mode).fit(motions)
    doc = {"mode": args.mode, "schema": s.name, "stats": codec.stats.to_dict()}
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_train(args) -> int:
    import torch

    from .flow import TrainConfig, init_training, train_loop
    from .io import save_checkpoint
    from .synth import read_corpus

    s = _schema(args)
    if args.config:
        cfg = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        cfg = TrainConfig()
    for key in ("steps", "batch_size", "lr", "seed", "preset", "representation", "dtype", "ema_decay"):
        v = getattr(args, key)
        if v is not None:
            setattr(cfg, key, v)
    cfg.checkpoint_every = args.checkpoint_every
    torch.use_deterministic_algorithms(True)
    motions, anns, _ = read_corpus(args.corpus, s)
    state, data = init_training(motions, anns, cfg, s)
    out = Path(args.out)
    logf = open(args.log, "w") if args.log else None

    def on_step(rec):
        if logf:
            logf.write(json.dumps(rec, sort_keys=True) + "\n")
        if rec["step"] % max(1, args.print_every) == 0:
            log.info("step %d loss %.4f vel %.4f", rec["step"], rec["total"], rec["vel"])

    try:
        train_loop(state, data, on_step=on_step,
                   on_checkpoint=lambda st: save_checkpoint(st, out.with_suffix(f".step{st.step}.ckpt")))
    finally:
        if logf:
            logf.close()
    save_checkpoint(state, out)
    _emit({"steps": state.step, "final_loss": state.history[-1]["total"] if state.history else None,
           "checkpoint": str(out)})
    return 0


def cmd_sample(args) -> int:
    import torch

    from .choreo import load_annotation
    from .flow import SamplerConfig, sample
    from .io import load_checkpoint, write_motion

    state = load_checkpoint(args.checkpoint)
    if args.ema:
        state.ema.copy_to(state.model)
    schema = state.codec.schema
    ann = load_annotation(args.annotation)
    if args.identity:
        identity = np.asarray(json.loads(Path(args.identity).read_text()), dtype=np.float64)
    else:
        identity = np.zeros(state.model.cfg.identity_dim)
    torch.use_deterministic_algorithms(True)
    m = sample(state.model, ann, identity, args.frames, SamplerConfig(args.steps, args.cfg, args.seed),
               state.codec, args.fps)
    write_motion(m, args.out, schema)
    return 0


def cmd_eval(args) -> int:
    from .io import read_motion
    from .kinematics import forward_kinematics
    from .metrics import aistpp_report, load_predicates

    if args.protocol != "aistpp":
        raise ChoreoflowError(
            f"protocol {args.protocol!r} is not supported: it needs a learned text-motion encoder; use aistpp"
        )
    s = _schema(args)
    preds = load_predicates(args.predicates) if args.predicates else None

    def load(d):
        ms = [read_motion(p, s, strict=args.strict) for p in _motion_paths(d)]
        return [forward_kinematics(m, s).positions for m in ms], [m.fps for m in ms]

    rp, rf = load(args.real)
    gp, gf = load(args.gen)
    report = aistpp_report(rp, gp, rf, gf, s, preds, args.pairs, args.seed)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_choreo_validate(args) -> int:
    from .choreo import load_vocabulary, validate_annotation

    vocab = load_vocabulary(args.vocab) if args.vocab else None
    errors = 0
    for path in args.files:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            _emit({"file": path, "severity": "error", "message": f"invalid JSON: {e}"})
            errors += 1
            continue
        diags = validate_annotation(doc, vocab)
        for d in diags:
            _emit({"file": path, **d.to_dict()})
        errors += sum(d.severity == "error" for d in diags)
    if errors:
        print(f"error: {errors} validation error(s)", file=sys.stderr)
        return 1
    return 0


def cmd_choreo_tokens(args) -> int:
    from .choreo import TokenLayout, extract_tokens, load_annotation, load_vocabulary

    vocab = load_vocabulary(args.vocab) if args.vocab else None
    layout = TokenLayout(vocab)
    _emit({"tokens": extract_tokens(load_annotation(args.file), layout, args.l_max), "vocab_size": layout.size})
    return 0


def cmd_qc_plan(args) -> int:
    from .choreo import qc_plan

    plan = qc_plan(args.total, args.batches, args.n, args.seed)
    for b in plan.to_dict()["batches"]:
        _emit(b)
    return 0


def cmd_qc_eval(args) -> int:
    from .choreo import qc_evaluate

    text = Path(args.scores).read_text() if args.scores != "-" else sys.stdin.read()
    doc = json.loads(text)
    batches = doc if isinstance(doc, list) and doc and isinstance(doc[0], dict) else [{"scores": doc}]
    failed = 0
    for i, b in enumerate(batches):
        rep = qc_evaluate(b["scores"], args.threshold, args.rate, b.get("batch_id", i), b.get("sampled"))
        out = rep.to_dict()
        _emit(out)
        print(rep.verdict)
        failed += rep.verdict != "pass"
    return 1 if failed else 0


def cmd_synth_dataset(args) -> int:
    from .synth import SynthConfig, synth_dataset, write_corpus

    s = _schema(args)
    cfg = SynthConfig(per_class=args.per_class, frames=args.frames, fps=args.fps)
    corpus = synth_dataset(s, args.seed, cfg)
    out = write_corpus(corpus, args.out, s)
    _emit({"out": str(out), "motions": len(corpus.motions), "separation": corpus.separation})
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="choreoflow", description="Choreography-conditioned motion flow matching.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_schema(sp, default="mhr260"):
        sp.add_argument("--schema", default=default, help="bundled schema name or path (default: %(default)s)")
        sp.add_argument("--strict", action="store_true", help="treat schema hash mismatches as errors")

    sc = sub.add_parser("schema", help="skeleton schema tools").add_subparsers(dest="action", required=True)
    sp = sc.add_parser("check", help="parse a schema and print its dimensions")
    sp.add_argument("path", help="schema file or bundled name")
    sp.set_defaults(func=cmd_schema_check)

    sp = sub.add_parser("encode", help="native motion file to continuous .npz")
    with_schema(sp)
    sp.add_argument("input")
    sp.add_argument("--out", required=True)
    sp.add_argument("--stats", help="normalization stats JSON; output is normalized when given")
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("decode", help="continuous .npz to native motion file")
    with_schema(sp)
    sp.add_argument("input")
    sp.add_argument("--out", required=True)
    sp.add_argument("--stats", help="stats JSON, required for normalized input")
    sp.set_defaults(func=cmd_decode)

    st = sub.add_parser("stats", help="normalization statistics").add_subparsers(dest="action", required=True)
    sp = st.add_parser("fit", help="fit statistics over a motion directory")
    with_schema(sp)
    sp.add_argument("--data", required=True, help="directory of .dfm files or a single file")
    sp.add_argument("--mode", choices=("hybrid", "zscore136"), default="hybrid")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_stats_fit)

    sp = sub.add_parser("train", help="train on a corpus written by synth-dataset")
    with_schema(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--config", help="training config JSON")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--ema-decay", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--preset", choices=("desk", "ablation", "full"))
    sp.add_argument("--representation", choices=("hybrid", "zscore136"))
    sp.add_argument("--dtype", choices=("float32", "float64"))
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.add_argument("--log", help="write per-step JSON lines here")
    sp.add_argument("--print-every", type=int, default=100)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="generate a motion from an annotation")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--annotation", required=True)
    sp.add_argument("--frames", type=int, required=True)
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--cfg", type=float, default=1.0, help="guidance scale (default: %(default)s)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--fps", type=float, default=30.0)
    sp.add_argument("--identity", help="JSON list of identity coefficients")
    sp.add_argument("--ema", action="store_true", help="sample with EMA weights")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("eval", help="distribution metrics between two motion directories")
    with_schema(sp)
    sp.add_argument("--protocol", default="aistpp")
    sp.add_argument("--real", required=True)
    sp.add_argument("--gen", required=True)
    sp.add_argument("--predicates", help="geometric predicate JSON")
    sp.add_argument("--pairs", type=int, help="random pairs for diversity; exhaustive when omitted")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    ch = sub.add_parser("choreo", help="annotation tools").add_subparsers(dest="action", required=True)
    sp = ch.add_parser("validate", help="validate annotation JSON files")
    sp.add_argument("files", nargs="+")
    sp.add_argument("--vocab")
    sp.set_defaults(func=cmd_choreo_validate)
    sp = ch.add_parser("tokens", help="print the token sequence of an annotation")
    sp.add_argument("file")
    sp.add_argument("--vocab")
    sp.add_argument("--l-max", type=int, default=256)
    sp.set_defaults(func=cmd_choreo_tokens)

    qc = sub.add_parser("qc", help="annotation quality control").add_subparsers(dest="action", required=True)
    sp = qc.add_parser("plan", help="batch split and sampling plan")
    sp.add_argument("--total", type=int, required=True)
    sp.add_argument("--batches", type=int, required=True)
    sp.add_argument("--n", type=int, default=30)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_qc_plan)
    sp = qc.add_parser("eval", help="score sampled items; exits 1 when any batch fails")
    sp.add_argument("scores", help="JSON list of scores, or list of {batch_id, scores}; '-' reads stdin")
    sp.add_argument("--threshold", type=int, default=3)
    sp.add_argument("--rate", type=float, default=0.95)
    sp.set_defaults(func=cmd_qc_eval)

    sp = sub.add_parser("synth-dataset", help="write the synthetic two-class corpus")
    with_schema(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--per-class", type=int, default=100)
    sp.add_argument("--frames", type=int, default=48)
    sp.add_argument("--fps", type=float, default=24.0)
    sp.set_defaults(func=cmd_synth_dataset)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ChoreoflowError, ValueError, OSError, KeyError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
