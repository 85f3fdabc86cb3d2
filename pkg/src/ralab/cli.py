"""Command-line surface tying the modules together.

Subcommands: gen-data, train, decode, bench, gradcheck, eval-wer, matrix.
Config files are plain ``key = value`` text (one per line, # comments);
command-line flags override config values.  Unknown flags exit with usage
text and code 2, runtime failures with code 1.
"""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from . import checkpoint as ckpt_io
from .bench import (BenchConfig, bench_throughput, encoder_encode_fn,
                    load_checkpoint, save_checkpoint)
from .direction import DirDropPolicy, LayerSchedule
from .encoder import ATTENTION_KINDS, EncoderConfig, EncoderModel
from .evaluation import (DecodeJob, direction_matrix, edit_distance_align,
                         length_generalization_matrix, longform_decode,
                         report_row, write_report_csv)
from .synthdata import TaskSpec, make_splits, read_dataset, write_dataset
from .training import TrainConfig, finetune_attention_only, gradcheck, train


def parse_config_file(path: str) -> dict[str, str]:
    out = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            out[key.replace("_", "-")] = val
    return out


def _config_argv(cfg: dict[str, str], parser: argparse.ArgumentParser) -> list[str]:
    """Turn config entries into argv tokens so argparse applies types and
    later (real) CLI flags win."""
    known = {opt for a in parser._actions for opt in a.option_strings}
    argv = []
    for key, val in cfg.items():
        flag = f"--{key}"
        if flag not in known and f"--no-{key}" not in known:
            raise ValueError(f"config key {key!r} not valid for this command")
        if val.lower() in ("true", "false"):
            argv.append(flag if val.lower() == "true" else f"--no-{key}")
        else:
            argv.extend([flag, val])
    return argv


def _add_task_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--vocab-size", type=int, default=32)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--frames-per-token", type=int, default=4)
    p.add_argument("--pairs", type=int, default=4)
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--task-seed", type=int, default=100)


def _task_spec(args) -> TaskSpec:
    return TaskSpec(vocab_size=args.vocab_size, feature_dim=args.feature_dim,
                    frames_per_token=args.frames_per_token,
                    key_value_pairs=args.pairs, noise_std=args.noise_std,
                    seed=args.task_seed)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--attention", choices=ATTENTION_KINDS, default="rwkv")
    p.add_argument("--bidirectional", action=argparse.BooleanOptionalAction,
                   default=False)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=128)
    p.add_argument("--conv-kernel", type=int, default=7)
    p.add_argument("--left-window", type=int, default=16)
    p.add_argument("--right-window", type=int, default=16)
    p.add_argument("--n-global", type=int, default=1)
    p.add_argument("--ra-chunk", type=int, default=16)
    p.add_argument("--model-seed", type=int, default=0)


def _encoder_config(args, spec: TaskSpec) -> EncoderConfig:
    return EncoderConfig(
        n_layers=args.layers, d_model=args.d_model, n_heads=args.heads,
        d_ff=args.d_ff, conv_kernel=args.conv_kernel,
        attention_kind=args.attention, bidirectional=args.bidirectional,
        vocab_size=spec.vocab_size, d_in=spec.feature_dim,
        left_window=args.left_window, right_window=args.right_window,
        n_global=args.n_global, ra_chunk=args.ra_chunk)


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="ralab",
                                  description="long-sequence encoder lab")
    sub = top.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--regime", choices=["SF", "LF", "LFXL"], default="SF")
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--salt", type=int, default=1)
    _add_task_flags(g)

    t = sub.add_parser("train", help="train or fine-tune an encoder")
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="dataset path (no .manifest suffix)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--init", help="checkpoint to start from")
    t.add_argument("--dirdrop", choices=["off", "r2l", "both"], default="off")
    t.add_argument("--dirdrop-p", type=float, default=0.2)
    t.add_argument("--freeze-non-attention", action=argparse.BooleanOptionalAction,
                   default=False)
    t.add_argument("--lr", type=float, default=2.5e-3)
    t.add_argument("--warmup", type=int, default=150)
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--batch-frames", type=int, default=4096)
    t.add_argument("--seed", type=int, default=1)
    t.add_argument("--log", help="metrics CSV path")
    _add_task_flags(t)
    _add_model_flags(t)

    d = sub.add_parser("decode", help="chunked long-form decoding")
    d.add_argument("--config")
    d.add_argument("--model", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--chunk-size", type=int, required=True)
    d.add_argument("--schedule", default=None,
                   help="l2r | r2l | bi | alt | first_bi:K | last_bi:K[@alt]")
    d.add_argument("--batch", type=int, default=4)
    d.add_argument("--report", help="CSV output path")

    b = sub.add_parser("bench", help="encoder throughput (MPS)")
    b.add_argument("--config")
    b.add_argument("--model", required=True)
    b.add_argument("--chunk-sizes", default="2000,9000,20000,40000")
    b.add_argument("--batch", type=int, default=4)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--frames", type=int, default=40_000)
    b.add_argument("--schedule", default=None)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--report", help="CSV output path")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient report")
    gc.add_argument("--fragment", default="all")
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--seed", type=int, default=0)

    w = sub.add_parser("eval-wer", help="score hypothesis file against reference")
    w.add_argument("ref", help="reference file, one utterance per line")
    w.add_argument("hyp", help="hypothesis file, one utterance per line")
    w.add_argument("--report", help="CSV output path")

    m = sub.add_parser("matrix", help="length-generalization or direction matrix")
    m.add_argument("--config")
    m.add_argument("--mode", choices=["length", "direction"], required=True)
    m.add_argument("--models", required=True,
                   help="comma-separated name=checkpoint pairs")
    m.add_argument("--data", required=True)
    m.add_argument("--chunk-sizes", default=None)
    m.add_argument("--schedules", default="l2r,r2l,alt,bi")
    m.add_argument("--batch", type=int, default=4)
    m.add_argument("--report", required=True)
    return top


def _cmd_gen_data(args) -> int:
    spec = _task_spec(args)
    data = make_splits(spec, args.regime, args.n, salt=args.salt)
    write_dataset(args.out, data)
    frames = sum(u.duration_frames for u in data)
    print(f"wrote {len(data)} utterances ({frames} frames) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    spec = _task_spec(args)
    data = read_dataset(args.data)
    if args.init:
        model = load_checkpoint(args.init)
    else:
        model = EncoderModel(_encoder_config(args, spec),
                             np.random.default_rng(args.model_seed))
    cfg = TrainConfig(lr_peak=args.lr, warmup_steps=args.warmup,
                      max_steps=args.steps, batch_frames=args.batch_frames,
                      dirdrop=DirDropPolicy(args.dirdrop, args.dirdrop_p),
                      freeze_non_attention=args.freeze_non_attention,
                      seed=args.seed, log_path=args.log)
    runner = finetune_attention_only if args.freeze_non_attention else train
    ck = runner(model, data, cfg, ckpt_path=args.out)
    print(f"trained {ck.step} steps, final loss {ck.metrics[-1][2]:.4f}, "
          f"checkpoint {args.out}")
    return 0


def _parse_schedule(text, n_layers):
    return None if not text else LayerSchedule.parse(text, n_layers)


def _cmd_decode(args) -> int:
    model = load_checkpoint(args.model)
    data = read_dataset(args.data)
    schedule = _parse_schedule(args.schedule, model.cfg.n_layers)
    report, _ = longform_decode(DecodeJob(model, data, args.chunk_size,
                                          args.batch, schedule))
    row = report_row(report, model=args.model, schedule=args.schedule or "default",
                     chunk_size=args.chunk_size)
    if args.report:
        write_report_csv(args.report, [row])
    print(f"wer {report.wer:.4f}  S={report.substitutions} I={report.insertions} "
          f"D={report.deletions} ref={report.ref_len}")
    return 0


def _cmd_bench(args) -> int:
    model = load_checkpoint(args.model)
    chunk_sizes = [int(c) for c in args.chunk_sizes.split(",") if c]
    schedule = _parse_schedule(args.schedule, model.cfg.n_layers)
    rng = np.random.default_rng(args.seed)
    feats = rng.normal(size=(args.frames, model.cfg.d_in)).astype(np.float32)
    cfg = BenchConfig(chunk_sizes=chunk_sizes, batch_size=args.batch,
                      warmup_queries=args.warmup, repeats=args.repeats,
                      total_frames=args.frames)
    report = bench_throughput(encoder_encode_fn(model, schedule), feats, cfg)
    rows = []
    for cell in report.cells:
        rows.append({
            "chunk_size": cell.chunk_size,
            "wall_seconds": None if cell.failed else round(cell.wall_seconds, 6),
            "audio_minutes": round(cell.audio_minutes, 6),
            "mps": None if cell.failed else round(cell.mps, 4),
            "mps_min": None if cell.failed else round(cell.mps_min, 4),
            "mps_max": None if cell.failed else round(cell.mps_max, 4),
        })
        shown = "-" if cell.failed else f"{cell.mps:.3f}"
        print(f"chunk {cell.chunk_size}: MPS {shown}")
    if report.exponent is not None:
        print(f"complexity exponent {report.exponent:.3f} "
              f"+/- {report.exponent_stderr:.3f}")
    if args.report:
        cols = ["chunk_size", "wall_seconds", "audio_minutes", "mps", "mps_min", "mps_max"]
        with open(args.report, "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=cols)
            wr.writeheader()
            for row in rows:
                wr.writerow({c: ("-" if row[c] is None else row[c]) for c in cols})
    return 0


def _cmd_gradcheck(args) -> int:
    report = gradcheck(args.fragment, tolerance=args.tolerance, seed=args.seed)
    worst = 0.0
    for fragment, errs in report.items():
        frag_max = max(errs.values())
        worst = max(worst, frag_max)
        status = "ok" if frag_max < args.tolerance else "FAIL"
        print(f"{fragment}: max rel err {frag_max:.3e} [{status}]")
    return 0 if worst < args.tolerance else 1


def _read_token_file(path: str) -> list[list[str]]:
    with open(path) as f:
        return [line.split() for line in f]


def _cmd_eval_wer(args) -> int:
    refs = _read_token_file(args.ref)
    hyps = _read_token_file(args.hyp)
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    from .evaluation import ErrorReport
    total = ErrorReport()
    for ref, hyp in zip(refs, hyps):
        total = total.add(edit_distance_align(ref, hyp))
    if args.report:
        write_report_csv(args.report, [report_row(total, model="eval-wer")])
    print(f"wer {total.wer:.4f}  S={total.substitutions} I={total.insertions} "
          f"D={total.deletions} ref={total.ref_len}")
    return 0


def _cmd_matrix(args) -> int:
    models = {}
    for part in args.models.split(","):
        name, _, path = part.partition("=")
        if not path:
            raise ValueError(f"--models entry {part!r} is not name=path")
        models[name] = load_checkpoint(path)
    data = read_dataset(args.data)
    rows = []
    if args.mode == "length":
        chunk_sizes = [int(c) for c in (args.chunk_sizes or "").split(",") if c]
        if not chunk_sizes:
            raise ValueError("--chunk-sizes required for --mode length")
        table = length_generalization_matrix(models, data, chunk_sizes, args.batch)
        for (name, chunk), rep in table.items():
            rows.append(report_row(rep, model=name, chunk_size=chunk))
    else:
        chunk = None
        if args.chunk_sizes:
            chunk = int(args.chunk_sizes.split(",")[0])
        for name, model in models.items():
            schedules = {s: LayerSchedule.parse(s, model.cfg.n_layers)
                         for s in args.schedules.split(",") if s}
            table = direction_matrix(model, data, schedules, chunk_size=chunk,
                                     batch_size=args.batch)
            for sched, rep in table.items():
                rows.append(report_row(rep, model=name, schedule=sched,
                                       chunk_size=chunk))
    write_report_csv(args.report, rows)
    for row in rows:
        print(f"{row['model']} {row['schedule']} chunk={row['chunk_size']}: "
              f"wer {row['wer']}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "decode": _cmd_decode,
    "bench": _cmd_bench,
    "gradcheck": _cmd_gradcheck,
    "eval-wer": _cmd_eval_wer,
    "matrix": _cmd_matrix,
}


def cli(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        # splice config-derived tokens in front of the real flags before the
        # single parse, so config can satisfy required args and CLI still wins
        if argv and argv[0] in _COMMANDS and "--config" in argv[1:]:
            i = argv.index("--config")
            if i + 1 >= len(argv):
                raise ValueError("--config needs a path")
            cfg = parse_config_file(argv[i + 1])
            conf_tokens = _config_argv(cfg, _subparser_for(parser, argv[0]))
            argv = [argv[0]] + conf_tokens + argv[1:]
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit as e:
        return int(e.code or 0)
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _subparser_for(parser: argparse.ArgumentParser, command: str):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
