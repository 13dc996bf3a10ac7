"""Command-line entry point: ``edgevit <command> ...``.

Exit codes: 0 success, 1 I/O failure, 2 target pruning rate unreachable,
3 malformed input file, 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from ._kernels import backend_name
from .adaptive import PruneConfig
from .container import load_model, save_model
from .data import SubTask, SyntheticSpec, batches, build_subtask_split, load_dataset, make_synthetic
from .errors import FormatError, UnreachableTarget
from .model import ModelConfig, forward, init_model
from .oneshot import slice_classifier, train_depth_probes
from .pipeline import RecoveryConfig, derive, random_prune
from .score import KINDS, score_groups, score_similarity, top_activating_samples
from .train import TrainRun, evaluate, train

EXIT_OK, EXIT_UNREACHABLE, EXIT_FORMAT, EXIT_USAGE = 0, 2, 3, 64

log = logging.getLogger("edgevit")


class _Parser(argparse.ArgumentParser):
    # no prefix matching: ``--v`` must not resolve against ``--version``/``--verbose``
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _thread_limit():
    """Apply NUWA_THREADS to the BLAS pools; returns (requested, effective)."""
    raw = os.environ.get("NUWA_THREADS")
    from threadpoolctl import threadpool_info, threadpool_limits
    if raw:
        threadpool_limits(int(raw))
    pools = threadpool_info()
    effective = max((p.get("num_threads", 1) for p in pools), default=1)
    return (int(raw) if raw else None), effective


def _dataset(path):
    return make_synthetic(SyntheticSpec()) if path is None else load_dataset(path)


def _write_json(doc, path):
    text = json.dumps(doc, indent=1, default=_json_default)
    if path is None or path == "-":
        print(text)
    else:
        with open(path, "w") as f:
            f.write(text + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _write_csv(rows, header, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    if path is None or path == "-":
        sys.stdout.write(buf.getvalue())
    else:
        with open(path, "w") as f:
            f.write(buf.getvalue())


# ----------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    spec = SyntheticSpec(seed=args.seed, num_classes=args.num_classes,
                         samples_per_class=args.samples_per_class, image_size=args.image_size)
    spec.dump(args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    ds = _dataset(args.data)
    size = ds.images.shape[-1]
    cfg = ModelConfig.uniform(size, args.patch_size, args.depth, args.embed_dim, args.heads,
                              args.qk, args.v, args.expansion, ds.num_classes)
    model = init_model(cfg, seed=args.seed)
    tr, ev = ds.part("train"), ds.part("eval")
    run = TrainRun(epochs=args.epochs, batch_size=args.batch_size, seed=args.seed, lr=args.lr,
                   weight_decay=args.weight_decay)
    model, run = train(model, *tr.xy, run=run, eval_images=ev.images, eval_labels=ev.labels)
    save_model(model, args.out)
    report = {"run": run.to_json(), "config": cfg.to_dict(), "data": ds.normalization,
              "train_accuracy": evaluate(model, *tr.xy),
              "eval_accuracy": evaluate(model, *ev.xy)}
    if args.report:
        _write_json(report, args.report)
    log.info("train accuracy %.4f eval accuracy %.4f", report["train_accuracy"],
             report["eval_accuracy"])
    return EXIT_OK


def _prune_config(args) -> PruneConfig:
    g_qkv, g_exp, g_emb = PruneConfig.gammas_from_ratio(args.gamma_qkv, args.gamma_ratio)
    return PruneConfig(alpha=args.alpha, metric=args.metric, rho_depth=args.rho_depth,
                       rho_head=args.rho_head, gamma_qkv=g_qkv, gamma_exp=g_exp,
                       gamma_emb=g_emb, max_iterations=args.max_iterations,
                       svd_mode=args.svd_mode, decay=args.decay)


def _recovery(args) -> RecoveryConfig:
    return RecoveryConfig(epochs=args.recovery_epochs, lr=args.lr, weight_decay=args.weight_decay,
                          batch_size=args.batch_size)


def _finish_derivation(fn, args):
    try:
        edge, report = fn()
        code = EXIT_OK if report.reached else EXIT_UNREACHABLE
    except UnreachableTarget as exc:
        edge, report, code = exc.model, exc.report, EXIT_UNREACHABLE
        log.error("%s", exc)
    if edge is not None:
        save_model(edge, args.out)
    if args.report and report is not None:
        doc = report.to_json() if hasattr(report, "to_json") else report
        _write_json(doc, args.report)
    return code


def cmd_derive(args) -> int:
    if not 0 <= args.alpha < 1:
        raise _UsageError("--alpha must lie in [0, 1)")
    base = load_model(args.model)
    ds = _dataset(args.data)
    task = SubTask.load(args.task)
    cfg = _prune_config(args)
    return _finish_derivation(lambda: derive(base, ds, task, cfg, _recovery(args), args.seed), args)


def cmd_random_prune(args) -> int:
    if not 0 <= args.alpha < 1:
        raise _UsageError("--alpha must lie in [0, 1)")
    base = load_model(args.model)
    ds = _dataset(args.data)
    task = SubTask.load(args.task)
    return _finish_derivation(
        lambda: random_prune(base, ds, task, args.alpha, args.metric, _recovery(args), args.seed),
        args)


def bench_latency(model, batch: int, repeats: int, warmup: int, seed: int = 0) -> dict:
    cfg = model.config
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, 3, cfg.image_size, cfg.image_size)).astype(np.float32)
    for _ in range(warmup):
        forward(model, x)
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        forward(model, x)
        times.append((time.perf_counter() - t) * 1e3)
    q1, med, q3 = np.percentile(times, [25, 50, 75])
    return {"batch": batch, "repeats": repeats, "warmup": warmup, "median_ms": float(med),
            "iqr_ms": float(q3 - q1), "p25_ms": float(q1), "p75_ms": float(q3),
            "samples_ms": [float(t) for t in times]}


def cmd_bench(args) -> int:
    if args.repeats < 1 or args.batch < 1 or args.warmup < 0:
        raise _UsageError("--repeats and --batch must be >= 1, --warmup >= 0")
    model = load_model(args.model)
    requested, effective = _thread_limit()
    stats = bench_latency(model, args.batch, args.repeats, args.warmup, args.seed)
    stats.update({"model": args.model, "threads_requested": requested,
                  "threads_effective": effective, "cpu_count": os.cpu_count(),
                  "kernel_backend": backend_name()})
    _write_json(stats, args.report)
    return EXIT_OK


def _task_data(model, ds, task):
    tr, ev = build_subtask_split(ds, task)
    return slice_classifier(model, task), tr, ev


def cmd_analyze(args) -> int:
    model = load_model(args.model)
    ds = _dataset(args.data)
    tasks = [SubTask.load(p) for p in args.task] if args.task else \
        [SubTask([int(c) for c in model.class_ids])]
    mode = args.mode
    if mode == "scores":
        maps = []
        for task in tasks:
            sliced, tr, _ = _task_data(model, ds, task)
            maps.append(score_groups(sliced, batches(*tr.xy, 32), args.kind,
                                     task_id=",".join(map(str, task.classes))))
        if args.format == "csv":
            rows = [(m.task_id, l if l is not None else "", i, repr(float(s)))
                    for m in maps for (l, i), s in zip(m.keys, m.scores)]
            _write_csv(rows, ["task", "layer", "index", "score"], args.out)
        else:
            _write_json({"kind": args.kind, "maps": [m.to_json() for m in maps]}, args.out)
    elif mode == "similarity":
        maps = []
        for task in tasks:
            sliced, tr, _ = _task_data(model, ds, task)
            maps.append(score_groups(sliced, batches(*tr.xy, 32), args.kind))
        matrix = [[score_similarity(a, b) for b in maps] for a in maps]
        _write_json({"kind": args.kind, "tasks": [t.classes for t in tasks], "matrix": matrix},
                    args.out)
    elif mode == "neurons":
        targets = _parse_neurons(args.neurons, model)
        out = {}
        for layer, neuron in targets:
            out[f"{layer}:{neuron}"] = top_activating_samples(model, ds.images, layer, neuron,
                                                              args.k)
        if args.format == "csv":
            _write_csv([(k, rank, i) for k, ids in out.items() for rank, i in enumerate(ids)],
                       ["neuron", "rank", "sample"], args.out)
        else:
            _write_json({"k": args.k, "samples": out,
                         "labels": {k: [int(ds.labels[i]) for i in v] for k, v in out.items()}},
                        args.out)
    elif mode == "depth-probes":
        task = tasks[0]
        tr, ev = build_subtask_split(ds, task)
        probes = train_depth_probes(model, task, tr.xy, ev.xy, epochs=args.probe_epochs,
                                    seed=args.seed)
        if args.save_probed:
            probed = model.copy()
            probed.aux.update(probes.to_aux())
            save_model(probed, args.save_probed)
        if args.format == "csv":
            _write_csv([(l + 1, repr(a)) for l, a in enumerate(probes.accuracies)],
                       ["depth", "accuracy"], args.out)
        else:
            _write_json(probes.to_json(), args.out)
    return EXIT_OK


def _parse_neurons(spec, model):
    if not spec:
        return [(l, 0) for l in range(model.config.depth) if model.config.expansion_sizes[l]]
    out = []
    for item in spec.split(","):
        try:
            l, i = item.split(":")
            out.append((int(l), int(i)))
        except ValueError:
            raise _UsageError(f"--neurons expects layer:index pairs, got {item!r}") from None
    return out


class _UsageError(Exception):
    pass


# ------------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="edgevit", description="Derive task-specific edge ViTs from a base ViT.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset spec")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--num-classes", type=int, default=10)
    s.add_argument("--samples-per-class", type=int, default=200)
    s.add_argument("--image-size", type=int, default=32)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a base model")
    s.add_argument("--data", help="CIFAR-10 directory or synthetic spec JSON (default: built-in spec)")
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.add_argument("--depth", type=int, default=2)
    s.add_argument("--embed-dim", type=int, default=32)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--qk", type=int, default=32)
    s.add_argument("--v", type=int, default=32)
    s.add_argument("--expansion", type=int, default=64)
    s.add_argument("--patch-size", type=int, default=4)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--weight-decay", type=float, default=0.05)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_train)

    def pruning_args(s):
        s.add_argument("--model", required=True)
        s.add_argument("--data")
        s.add_argument("--task", required=True, help="sub-task JSON {\"classes\": [...]}")
        s.add_argument("--alpha", type=float, required=True)
        s.add_argument("--metric", choices=("params", "flops"), default="params")
        s.add_argument("--out", required=True)
        s.add_argument("--report")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--recovery-epochs", type=int, default=5)
        s.add_argument("--lr", type=float, default=1e-4)
        s.add_argument("--weight-decay", type=float, default=0.05)
        s.add_argument("--batch-size", type=int, default=64)

    s = sub.add_parser("derive", help="derive an edge model for a sub-task")
    pruning_args(s)
    s.add_argument("--rho-depth", type=float, default=0.95)
    s.add_argument("--rho-head", type=float, default=0.90)
    s.add_argument("--gamma-qkv", type=float, default=0.01)
    s.add_argument("--gamma-ratio", default="1:5:2.5")
    s.add_argument("--svd-mode", choices=("product", "joint"), default="product")
    s.add_argument("--decay", choices=("subtractive", "multiplicative"), default="subtractive")
    s.add_argument("--max-iterations", type=int, default=200)
    s.set_defaults(fn=cmd_derive)

    s = sub.add_parser("random-prune", help="random structured pruning baseline")
    pruning_args(s)
    s.set_defaults(fn=cmd_random_prune)

    s = sub.add_parser("bench", help="forward-pass latency")
    s.add_argument("--model", required=True)
    s.add_argument("--batch", type=int, default=32)
    s.add_argument("--repeats", type=int, default=20)
    s.add_argument("--warmup", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("analyze", help="importance scores, similarities, neurons, depth probes")
    s.add_argument("--model", required=True)
    s.add_argument("--data")
    s.add_argument("--mode", required=True, choices=("scores", "similarity", "neurons", "depth-probes"))
    s.add_argument("--task", action="append", help="sub-task JSON; repeat for several")
    s.add_argument("--kind", choices=KINDS, default="head")
    s.add_argument("--neurons", help="comma list of layer:index pairs")
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--probe-epochs", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--save-probed", help="write the model with probes attached")
    s.add_argument("--format", choices=("json", "csv"), default="json")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command != "bench":
            _thread_limit()
        return args.fn(args)
    except FormatError as exc:
        print(f"edgevit: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except _UsageError as exc:
        print(f"edgevit: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except json.JSONDecodeError as exc:
        print(f"edgevit: format error: malformed JSON ({exc})", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"edgevit: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
