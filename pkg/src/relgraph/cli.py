"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 validation error (bad config or
checkpoint), 3 runtime failure.  Errors are one machine-parsable line on
stderr: `relgraph: code=<n> msg="..."`.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .autodiff import ShapeError
from .checkpoint import CheckpointError, load_checkpoint
from .config import TrainConfig
from .downstream import DownstreamConfig, VocabMismatchError, run_downstream
from .graphdump import GraphDumpError, heatmap_from_dump, write_graph_dump
from .graphs import predict_graphs
from .training import NonFiniteLossError, train
from .transfer import frozen_params


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(code: int, msg: str) -> int:
    print(f'relgraph: code={code} msg="{msg}"', file=sys.stderr)
    return code


def _apply_overrides(d: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return d


def _load_config(path: str | None, overrides: list[str], cls):
    data = {}
    if path:
        with open(path) as fh:
            data = json.load(fh)
    _apply_overrides(data, overrides)
    return cls.from_dict(data)


def _read_text(source: str) -> str:
    if os.path.exists(source):
        with open(source, encoding="utf-8") as fh:
            return fh.read()
    return source


def _cmd_train(args) -> int:
    config = _load_config(args.config, args.set, TrainConfig)
    corpus = _read_text(args.corpus)
    train(config, corpus, checkpoint_path=args.out, metrics_path=args.metrics)
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_extract(args) -> int:
    params, config, vocab = load_checkpoint(args.checkpoint)
    if vocab is None:
        raise CheckpointError(f"{args.checkpoint}: no vocabulary stored")
    text = _read_text(args.input)
    ids = np.asarray(vocab.encode(text), dtype=np.int64)
    if ids.size == 0:
        raise ShapeError("input produced no tokens")
    cfg = config.model
    fstack, bstack = predict_graphs(ids[None], frozen_params(params), cfg)
    for stack in (fstack, bstack):
        mats = stack.numpy()[:, :, 0]      # (L, n_h, T, T)
        out = f"{args.out}.{stack.direction}"
        write_graph_dump(mats, stack.direction, out)
        print(f"wrote {out}")
    sidecar = f"{args.out}.tokens.json"
    with open(sidecar, "w") as fh:
        json.dump({"tokens": [vocab.id_to_token[i] for i in ids]}, fh)
    print(f"wrote {sidecar}")
    return 0


def _cmd_transfer(args) -> int:
    config = _load_config(args.config, args.set, DownstreamConfig)
    report = run_downstream(config, args.checkpoint, report_path=args.out)
    print(json.dumps({k: report[k] for k in ("mode", "mean", "stddev")}))
    return 0


def _cmd_heatmap(args) -> int:
    img = heatmap_from_dump(args.dump, args.layer, args.head, args.scale)
    with open(args.out, "wb") as fh:
        fh.write(img)
    print(f"wrote {args.out}")
    return 0


def _cmd_check_gradients(args) -> int:
    """Finite-difference check of every differentiable operation on a
    tiny configuration."""
    from .gradcheck import gradient_suite
    reports = gradient_suite()
    ok = all(r.passed for r in reports.values())
    print(json.dumps({name: {"status": "pass" if r.passed else "fail",
                             "max_rel_error": r.max_rel_error}
                      for name, r in reports.items()}))
    return 0 if ok else 3


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relgraph")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pretrain on an unlabeled corpus")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--corpus", required=True, help="corpus file or literal text")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--metrics", help="NDJSON metrics output path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("extract-graphs", help="dump affinity matrices for an input")
    p.add_argument("--input", required=True, help="input file or literal text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="dump path prefix")
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("transfer", help="run the downstream harness")
    p.add_argument("--config", help="DownstreamConfig JSON")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--checkpoint", help="pretraining checkpoint (glomo mode)")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=_cmd_transfer)

    p = sub.add_parser("render-heatmap", help="render a dump as a PPM image")
    p.add_argument("--dump", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--head", type=int, required=True)
    p.add_argument("--scale", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_heatmap)

    p = sub.add_parser("check-gradients", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_check_gradients)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail(1, str(exc))
    except (CheckpointError, GraphDumpError, VocabMismatchError,
            ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        return _fail(2, str(exc))
    except NonFiniteLossError as exc:
        return _fail(3, str(exc))


if __name__ == "__main__":
    sys.exit(main())
