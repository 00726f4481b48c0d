"""``stablemask`` command line: defaults, train, eval, probe, bench, generate, verify.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime or
numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import OUT_ENV, ConfigError, RunConfig, parse_lengths
from .model import load_checkpoint, save_checkpoint, Transformer
from .tasks import (POSITION_TASKS, TASK_KINDS, TaskSpec, corpus_batches, decode_bytes,
                    encode_text, eval_accuracy, gen_soft_copy_last, position_batches,
                    position_eval_set, soft_copy_last_batches)
from .training import AdamWState, eval_loss, metrics_line, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
TASK_LABELS = {"pos-mapping": "Task (1)", "pos-identify": "Task (2)", "odd-even": "Task (3)"}


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, indent=1) if getattr(args, "json", False) else text)


def _overrides(args) -> dict:
    """Map the shared flags onto ``section.key`` config overrides."""
    ov = {"train.seed": args.seed, "output.dir": args.out, "mask.mask": args.mask,
          "model.pe": args.pe, "mask.gamma": args.gamma}
    if args.headwise_gamma:
        ov["mask.headwise_gamma"] = True
    for item in args.set or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        ov[key.strip()] = val
    return ov


def _batches(cfg: RunConfig, spec: TaskSpec):
    t = cfg.train
    if spec.kind in POSITION_TASKS:
        return position_batches(spec, t.batch_size, cfg.task.at_tokens)
    if spec.kind == "soft-copy-last":
        return soft_copy_last_batches(t.seq_len, spec.vocab, t.batch_size)
    ids = encode_text(Path(cfg.task.corpus).read_text(encoding="utf-8"))
    return corpus_batches(ids, t.seq_len, t.batch_size)


# -- commands ----------------------------------------------------------------

def cmd_defaults(args) -> int:
    print(RunConfig().to_ini(), end="")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, _overrides(args))
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    spec, tc = cfg.task_spec(), cfg.train_config()
    model = Transformer(cfg.model_config(), seed=tc.seed)
    (out / "config.ini").write_text(cfg.to_ini())
    state = AdamWState()
    records = []
    every = cfg.train.checkpoint_every
    with open(out / "metrics.jsonl", "w") as fh:
        for rec in train(model, _batches(cfg, spec), tc, state):
            records.append(rec)
            fh.write(metrics_line(rec) + "\n")
            if args.verbose and (rec["step"] + 1) % max(tc.total_steps // 10, 1) == 0:
                print(f"step {rec['step'] + 1:6d}  loss {rec['loss']:.4f}  lr {rec['lr']:.2e}",
                      file=sys.stderr)
            if every and (rec["step"] + 1) % every == 0:
                save_checkpoint(out / f"checkpoint_{rec['step'] + 1}.npz", model, rec["step"] + 1,
                                tc.seed, state.as_dict(), {"run": cfg.to_dict()})
    save_checkpoint(out / "checkpoint.npz", model, tc.total_steps, tc.seed, state.as_dict(),
                    {"run": cfg.to_dict()})
    if cfg.output.plots:
        from .plotting import loss_curve
        loss_curve(records, out / "loss.png")
    summary = {"out": str(out), "steps": tc.total_steps, "final_loss": records[-1]["loss"],
               "n_params": model.n_params()}
    if spec.kind in POSITION_TASKS:
        summary["accuracy"] = eval_accuracy(model, position_eval_set(spec.kind, spec.eval_lengths,
                                                                      spec.n_max))
    _emit(args, summary, "\n".join(f"{k}: {v}" for k, v in summary.items()))
    return EXIT_OK


def _run_of(meta: dict) -> RunConfig:
    run = meta.get("extra", {}).get("run")
    cfg = RunConfig()
    if run:
        for sec, vals in run.items():
            for k, v in vals.items():
                cfg.set(f"{sec}.{k}", v)
    return cfg


def _label(model) -> str:
    c = model.config
    return f"{c.pe}+stablemask" if c.mask == "stablemask" else c.pe


def cmd_eval(args) -> int:
    rows, table = [], {}
    for path in args.checkpoints:
        model, meta, _ = load_checkpoint(path)
        cfg = _run_of(meta)
        kind = args.task or cfg.task.kind
        if kind not in TASK_KINDS:
            raise ConfigError(f"unknown task {kind!r}")
        label = args.label or _label(model)
        if kind in POSITION_TASKS:
            lengths = parse_lengths(args.lengths) if args.lengths else parse_lengths(cfg.task.eval_lengths)
            samples = position_eval_set(kind, lengths, cfg.task.n_max)
            acc = eval_accuracy(model, samples, args.mode)
            rows.append({"checkpoint": str(path), "method": label, "task": kind, "accuracy": acc})
            table.setdefault(label, {})[TASK_LABELS[kind]] = acc
        else:
            cfg.task.kind = kind
            spec = cfg.task_spec()
            loss = eval_loss(model, _batches(cfg, spec), args.batches)
            rows.append({"checkpoint": str(path), "method": label, "task": kind,
                         "loss": loss, "ppl": float(np.exp(loss))})
    text = []
    if table:
        cols = [c for c in TASK_LABELS.values() if any(c in r for r in table.values())]
        text.append("PE | " + " | ".join(cols))
        for method, accs in table.items():
            cells = [f"{100 * accs[c]:.1f}%" if c in accs else "-" for c in cols]
            text.append(f"{method} | " + " | ".join(cells))
    for r in rows:
        if "ppl" in r:
            text.append(f"{r['method']} | {r['task']} | loss {r['loss']:.4f} | ppl {r['ppl']:.3f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        keys = sorted({k for r in rows for k in r})
        with open(out / "eval.csv", "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=keys)
            wr.writeheader()
            wr.writerows(rows)
        if table:
            from .plotting import accuracy_bars
            accuracy_bars(table, out / "eval.png")
    _emit(args, {"rows": rows}, "\n".join(text))
    return EXIT_OK


def _probe_inputs(model, cfg: RunConfig, count: int, seed: int) -> np.ndarray:
    n = min(cfg.model.max_len, model.config.max_len)
    rng = np.random.default_rng(seed)
    if cfg.task.kind == "soft-copy-last":
        return np.stack([gen_soft_copy_last(n, model.config.vocab_size, rng) for _ in range(count)])
    if cfg.task.kind == "char-lm" and cfg.task.corpus and Path(cfg.task.corpus).exists():
        ids = encode_text(Path(cfg.task.corpus).read_text(encoding="utf-8"))
        starts = rng.integers(0, max(len(ids) - n, 1), size=count)
        return np.stack([ids[s:s + n] for s in starts])
    if cfg.task.kind in POSITION_TASKS:
        spec = cfg.task_spec()
        return np.stack([position_eval_set(cfg.task.kind, [n], spec.n_max)[0].input_tokens] * count)
    return rng.integers(0, model.config.vocab_size, size=(count, n))


def cmd_probe(args) -> int:
    from . import plotting, probes
    model, meta, _ = load_checkpoint(args.checkpoint)
    cfg = _run_of(meta)
    out = Path(args.out or cfg.out_dir() / "probe")
    out.mkdir(parents=True, exist_ok=True)
    tokens = _probe_inputs(model, cfg, args.samples, args.seed)
    payload = {"kind": args.kind, "files": []}
    if args.kind == "da":
        if cfg.task.kind != "soft-copy-last":
            raise ConfigError("the DA probe needs a softCopyLast model (exact MI ratios)")
        rep = probes.da_scan(model, list(tokens), args.epsilon)
        rep.save(out / "da.json")
        with open(out / "da.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["layer", "head", "flag_rate"] + [f"mass_{k}" for k in rep.class_mass])
            for l in range(rep.flag_rate.shape[0]):
                for h in range(rep.flag_rate.shape[1]):
                    wr.writerow([l, h, repr(float(rep.flag_rate[l, h]))]
                                + [repr(float(v[l, h])) for v in rep.class_mass.values()])
        trend = np.column_stack([np.arange(1, tokens.shape[1] + 1),
                                 rep.first_token_mass.mean(axis=(0, 1))])
        plotting.first_token_plot({_label(model): trend}, out / "da_first_token.png")
        payload.update(overall_rate=rep.overall_rate, files=["da.json", "da.csv", "da_first_token.png"])
    elif args.kind == "mask-ratio":
        alpha = probes.mask_ratio_curve(model, tokens)
        np.savetxt(out / "mask_ratio.csv", np.column_stack([np.arange(1, len(alpha) + 1), alpha]),
                   delimiter=",", header="position,alpha", comments="", fmt=["%d", "%.17g"])
        plotting.mask_ratio_plot({_label(model): alpha}, out / "mask_ratio.png")
        payload.update(alpha=alpha.tolist(), files=["mask_ratio.csv", "mask_ratio.png"])
    elif args.kind == "first-token":
        trend = probes.first_token_trend(model, tokens)
        np.savetxt(out / "first_token.csv", trend, delimiter=",", header="position,mass",
                   comments="", fmt=["%d", "%.17g"])
        plotting.first_token_plot({_label(model): trend}, out / "first_token.png")
        payload.update(trend=trend[:, 1].tolist(), files=["first_token.csv", "first_token.png"])
    else:
        from .tensor import no_grad
        with no_grad():
            _, traces = model.forward(tokens[0], capture=True)
        probes.dump_attention(traces, out / "attention.csv")
        plotting.attention_heatmaps(traces, out / "attention.png")
        payload["files"] = ["attention.csv", "attention.png"]
    payload["out"] = str(out)
    _emit(args, payload, "\n".join([f"probe {args.kind}: wrote to {out}"]
                                   + [f"  {f}" for f in payload["files"]]))
    return EXIT_OK


def _pairs(text: str) -> list[tuple[int, int]]:
    out = []
    for part in text.split(","):
        a, sep, b = part.strip().partition("x")
        if not sep:
            raise ConfigError(f"tiling {part!r} should look like 16x32")
        out.append((int(a), int(b)))
    return out


def cmd_bench(args) -> int:
    from .plotting import bench_plot
    from .streamed import bench, write_bench_csv
    if args.gamma is not None and not args.gamma > 0:
        raise ConfigError("gamma must be > 0")
    ns = parse_lengths(args.n)
    shapes = [(n, args.d) for n in ns]
    tilings = _pairs(args.tilings) + [(0, 0)]
    out = Path(args.out or os.environ.get(OUT_ENV) or "runs") / "bench"
    out.mkdir(parents=True, exist_ok=True)
    rows = write_bench_csv(bench(shapes, tilings, args.gamma or 0.5, args.seed, args.repeats),
                           out / "bench.csv")
    bench_plot(rows, out / "bench.png")
    worst = max(r["max_diff"] for r in rows)
    text = ["n,d,Br,Bc,wall_ms,naive_ms,max_diff"] + [
        f"{r['n']},{r['d']},{r['Br']},{r['Bc']},{r['wall_ms']:.3f},{r['naive_ms']:.3f},{r['max_diff']:.3e}"
        for r in rows]
    _emit(args, {"rows": rows, "max_diff": worst, "out": str(out)}, "\n".join(text))
    return EXIT_OK if worst < 1e-10 else EXIT_RUNTIME


def cmd_generate(args) -> int:
    from .inference import DecodeConfig, generate
    model, meta, _ = load_checkpoint(args.checkpoint)
    if args.tokens:
        prompt = [int(t) for t in args.tokens.split(",")]
    else:
        prompt = encode_text(args.prompt or "\n").tolist()
    if max(prompt) >= model.config.vocab_size or min(prompt) < 0:
        raise ConfigError("prompt token outside the model vocabulary")
    dc = DecodeConfig(args.max_new, args.temperature, args.window, args.seed, args.reindex_rope)
    toks = generate(model, prompt, dc)
    text = decode_bytes(toks) if model.config.vocab_size == 256 and not args.tokens else \
        " ".join(map(str, toks))
    _emit(args, {"tokens": toks, "text": text}, text)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all
    results = run_all()
    ok = all(r.passed for r in results)
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<20s} max_err={r.max_err:.3e}  "
             f"{r.seconds:.2f}s {r.detail}".rstrip() for r in results]
    _emit(args, {"passed": ok, "checks": [r.to_json() for r in results]}, "\n".join(lines))
    return EXIT_OK if ok else EXIT_RUNTIME


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./runs)")

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--config", default=None, help="INI file with [model] [mask] [train] [task] [output]")
    run.add_argument("--mask", choices=["vanilla", "stablemask"], default=None)
    run.add_argument("--pe", choices=["rope", "alibi", "ape-learn", "ape-sin", "none"], default=None)
    run.add_argument("--gamma", type=float, default=None)
    run.add_argument("--headwise-gamma", action="store_true")
    run.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                     help="override any config key (repeatable)")

    p = argparse.ArgumentParser(prog="stablemask", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("defaults", help="print the default config as INI")

    t = sub.add_parser("train", parents=[common, run], help="train a model")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="accuracy / perplexity table")
    e.add_argument("checkpoints", nargs="+")
    e.add_argument("--task", choices=TASK_KINDS, default=None)
    e.add_argument("--lengths", default=None, help="e.g. 4-32")
    e.add_argument("--mode", choices=["exact", "token"], default="exact")
    e.add_argument("--label", default=None)
    e.add_argument("--batches", type=int, default=20)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("probe", parents=[common], help="attention diagnostics")
    pr.add_argument("checkpoint")
    pr.add_argument("--kind", choices=["da", "mask-ratio", "first-token", "dump"], default="mask-ratio")
    pr.add_argument("--samples", type=int, default=64)
    pr.add_argument("--epsilon", type=float, default=0.05)
    pr.set_defaults(func=cmd_probe)

    b = sub.add_parser("bench", parents=[common], help="blocked vs dense attention timing")
    b.add_argument("--n", default="64,128,256")
    b.add_argument("--d", type=int, default=32)
    b.add_argument("--tilings", default="16x16,32x64")
    b.add_argument("--gamma", type=float, default=None)
    b.add_argument("--repeats", type=int, default=3)
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("generate", parents=[common], help="incremental decoding")
    g.add_argument("checkpoint")
    g.add_argument("--prompt", default=None, help="text prompt (byte-level models)")
    g.add_argument("--tokens", default=None, help="comma-separated token ids")
    g.add_argument("--max-new", type=int, default=32)
    g.add_argument("--temperature", type=float, default=None)
    g.add_argument("--window", type=int, default=None)
    g.add_argument("--reindex-rope", action="store_true")
    g.set_defaults(func=cmd_generate)

    v = sub.add_parser("verify", parents=[common], help="run the invariant suite")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "defaults":
        return cmd_defaults(args)
    if getattr(args, "seed", None) is None and args.command != "train":
        args.seed = 0
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, RuntimeError, ArithmeticError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
