"""``byomkit`` command line.

Exit codes: 0 success, 1 invalid input (bad flags, incompatible or corrupt
artifacts, fingerprint mismatch), 2 unreadable/unwritable files.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from byomkit import byom, desk_lab
from byomkit.checkpoint_store import (
    Checkpoint,
    SparseDelta,
    fingerprint,
    read_any,
    read_checkpoint,
    read_lora,
    read_sparse_delta,
    write_checkpoint,
    write_lora,
    write_sparse_delta,
)
from byomkit.errors import BadSpec, ByomError, IoFailure
from byomkit.merging import MergeSpec, merge

log = logging.getLogger("byomkit")

METHOD_FLAGS = {
    "task-arithmetic": "task_arithmetic",
    "weighted-average": "weighted_average",
    "ties": "ties",
    "per-param-weighted": "per_param_weighted",
}


class UsageError(ByomError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_count(text: str) -> int:
    """``"113.5M"`` -> 113500000; accepts k/M/G suffixes and plain integers."""
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*([kKmMgG]?)\s*", text)
    if not m:
        raise argparse.ArgumentTypeError(f"not a parameter count: {text!r}")
    scale = {"": 1, "k": 10**3, "m": 10**6, "g": 10**9}[m.group(2).lower()]
    return int(round(float(m.group(1)) * scale))


def parse_layer(text: str):
    m = re.fullmatch(r"(\d+)x(\d+)", text.strip())
    if not m:
        raise argparse.ArgumentTypeError(f"layer must look like D_OUTxD_IN, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _fraction(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def _out_dir(path: str) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {p}: {exc}") from exc
    return p


def _stems(paths: Sequence[str]) -> List[str]:
    stems = [Path(p).stem for p in paths]
    if len(set(stems)) != len(stems):
        stems = [f"task{i:02d}_{s}" for i, s in enumerate(stems)]
    return stems


def _fmt_m(n: int) -> str:
    return f"{n / 1e6:.1f}M"


def _print_account(acc: byom.ParamAccount) -> None:
    print(f"params ({acc.method}): {_fmt_m(acc.total)} ({acc.total}) stored values; "
          f"{_fmt_m(acc.on_disk)} ({acc.on_disk}) on disk")


def _merge_spec(args, n_tasks: int) -> MergeSpec:
    method = METHOD_FLAGS[args.method]
    spec = MergeSpec(method, lam=args.lam, trim_ratio=args.trim_ratio)
    if method == "weighted_average":
        if not args.weights:
            raise BadSpec("--weights is required for weighted-average")
        try:
            spec.weights = [float(w) for w in args.weights]
        except ValueError:
            raise BadSpec("--weights must be numbers for weighted-average") from None
    elif method == "per_param_weighted":
        if not args.weights:
            raise BadSpec("--weights must list one weight checkpoint per task")
        spec.weight_maps = [read_checkpoint(p) for p in args.weights]
    spec.validate(n_tasks)
    return spec


def _add_merge_flags(p: argparse.ArgumentParser, required: bool) -> None:
    flag = "--method" if required else "--merge-method"
    p.add_argument(flag, dest="method", choices=sorted(METHOD_FLAGS), required=required,
                   default=None if required else "task-arithmetic")
    p.add_argument("--lambda", dest="lam", type=float, default=0.3)
    p.add_argument("--trim-ratio", type=_fraction, default=0.2)
    p.add_argument("--weights", nargs="+", default=None,
                   help="per-task scalars (weighted-average) or weight .ckpt paths (per-param-weighted)")


def _add_dry_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dry-run-account", action="store_true",
                   help="only print parameter accounting from declared sizes")
    p.add_argument("--base-params", type=parse_count)
    p.add_argument("--task-params", type=parse_count)
    p.add_argument("--num-tasks", type=int)


# --- subcommands ----------------------------------------------------------


def cmd_merge(args) -> int:
    tasks = [read_checkpoint(p) for p in args.tasks]
    spec = _merge_spec(args, len(tasks))
    if args.base is None:
        if spec.method != "weighted_average":
            raise BadSpec(f"--base is required for {args.method}")
        base = tasks[0]
    else:
        base = read_checkpoint(args.base)
    merged = merge(base, tasks, spec)
    write_checkpoint(args.out, merged)
    lam = f" lambda={spec.lam}" if spec.method in ("task_arithmetic", "ties") else ""
    base_fp = fingerprint(base) if args.base else "-"
    print(f"merged {args.method}{lam} tasks={len(tasks)} base={base_fp} out={fingerprint(merged)}")
    return 0


def _dry_run_pruned(args, method: str) -> int:
    missing = [f for f in ("base_params", "task_params", "num_tasks") if getattr(args, f) is None]
    if missing:
        raise BadSpec("--dry-run-account needs " + ", ".join("--" + m.replace("_", "-") for m in missing))
    acc = byom.account_from_sizes(args.base_params, args.task_params, args.num_tasks, args.keep, method)
    _print_account(acc)
    return 0


def _write_deltas(pruned: byom.PrunedTaskSet, task_paths, out_dir: Path) -> None:
    for stem, delta in zip(_stems(task_paths), pruned.deltas):
        path = out_dir / f"{stem}.sdelta"
        write_sparse_delta(path, delta)
        log.info("%s: kept %d values -> %s", stem, delta.kept(), path)


def _require_inputs(args) -> None:
    if args.base is None or not args.tasks or args.out_dir is None:
        raise BadSpec("--base, --tasks and --out-dir are required")


def cmd_post_prune(args) -> int:
    if args.dry_run_account:
        return _dry_run_pruned(args, "post_pruning")
    _require_inputs(args)
    base = read_checkpoint(args.base)
    tasks = [read_checkpoint(p) for p in args.tasks]
    pruned = byom.post_prune(base, tasks, args.keep, args.scope.replace("-", "_"))
    _write_deltas(pruned, args.tasks, _out_dir(args.out_dir))
    _print_account(byom.param_account(pruned))
    return 0


def cmd_byom_fft(args) -> int:
    if args.dry_run_account:
        return _dry_run_pruned(args, "byom_fft")
    _require_inputs(args)
    base = read_checkpoint(args.base)
    tasks = [read_checkpoint(p) for p in args.tasks]
    spec = _merge_spec(args, len(tasks))
    pruned = byom.byom_fft(base, tasks, args.keep, spec, args.scope.replace("-", "_"))
    out = _out_dir(args.out_dir)
    write_checkpoint(out / "merged.ckpt", pruned.base)
    _write_deltas(pruned, args.tasks, out)
    print(f"merged base {fingerprint(pruned.base)} ({pruned.merge_provenance}) -> {out / 'merged.ckpt'}")
    _print_account(byom.param_account(pruned))
    return 0


def cmd_byom_lora(args) -> int:
    if args.dry_run_account:
        if args.source_rank is None or not args.layer:
            raise BadSpec("--dry-run-account needs --source-rank and at least one --layer")
        if not (1 <= args.rank <= args.source_rank):
            raise BadSpec(f"--rank must lie in [1, {args.source_rank}]")
        full = truncated = 0
        for d_out, d_in in args.layer:
            before = byom.lora_layer_params(d_out, d_in, args.source_rank, truncated=False)
            after = byom.lora_layer_params(d_out, d_in, args.rank, truncated=True)
            full, truncated = full + before, truncated + after
            print(f"layer {d_out}x{d_in}: r={args.source_rank} {before} -> q={args.rank} {after} "
                  f"params, saving {before / after:.2f}x")
        print(f"adapter total per task: {full} -> {truncated}, saving {full / truncated:.2f}x")
        if args.base_params is not None and args.num_tasks is not None:
            acc = byom.lora_account_from_sizes(args.base_params, args.layer, args.num_tasks, args.rank)
            _print_account(acc)
        return 0

    if args.base is None or not args.adapters or args.out_dir is None:
        raise BadSpec("--base, --adapters and --out-dir are required")
    base = read_checkpoint(args.base)
    adapters = [read_lora(p) for p in args.adapters]
    out = _out_dir(args.out_dir)
    compressed = byom.byom_lora(base, adapters, args.rank)
    ablation = byom.ablation_separate_factor_approx(adapters, args.rank, base) if args.ablation_separate_factors else None
    written = ablation if ablation is not None else compressed
    for stem, src, ad in zip(_stems(args.adapters), adapters, written.adapters):
        write_lora(out / f"{stem}.lora", ad)
        for name in src.factors:
            d_out, d_in = src.factors[name][0].shape[0], src.factors[name][1].shape[0]
            before = byom.lora_layer_params(d_out, d_in, src.rank, truncated=False)
            after = byom.lora_layer_params(d_out, d_in, args.rank, truncated=True)
            print(f"{stem} {name}: {d_out}x{d_in} r={src.rank} {before} -> q={args.rank} {after} "
                  f"params, saving {before / after:.2f}x")
        log.info("%s: wrote %s", stem, out / f"{stem}.lora")
    for i, (stem, src) in enumerate(zip(_stems(args.adapters), adapters)):
        err = byom.lora_reconstruction_error(src, compressed.adapters[i])
        if ablation is not None:
            abl = byom.lora_reconstruction_error(src, ablation.adapters[i])
            print(f"{stem} reconstruction error: truncated-svd {err:.6g}  separate-factors {abl:.6g}")
        else:
            print(f"{stem} reconstruction error: {err:.6g}")
    _print_account(byom.param_account(compressed))
    return 0


def cmd_materialize(args) -> int:
    if (args.delta is None) == (args.adapter is None):
        raise BadSpec("give exactly one of --delta or --adapter")
    if args.delta is not None:
        delta = read_sparse_delta(args.delta)
        if args.base is None:
            if delta.base_kind != "zero":
                raise BadSpec("--base is required for this delta")
            base = Checkpoint({k: np.zeros(s, dtype=np.float32) for k, s in delta.shapes.items()})
        else:
            base = read_checkpoint(args.base)
        model = byom.apply_sparse_delta(base, delta)
    else:
        if args.base is None:
            raise BadSpec("--base is required")
        model = byom.apply_lora(read_checkpoint(args.base), read_lora(args.adapter))
    write_checkpoint(args.out, model)
    print(f"materialized {fingerprint(model)} -> {args.out}")
    return 0


def cmd_info(args) -> int:
    art = read_any(args.path)
    if isinstance(art, Checkpoint):
        print("kind: checkpoint")
        for k, v in art.metadata.items():
            print(f"meta {k}: {v}")
        print(f"tensors: {len(art.tensors)}")
        for name, t in art.tensors.items():
            print(f"  {name} {list(t.shape)} {t.size}")
        print(f"params: {art.num_params()}")
        print(f"fingerprint: {fingerprint(art)}")
    elif isinstance(art, SparseDelta):
        print("kind: sparse_delta")
        print(f"keep_ratio: {art.keep_ratio}")
        print(f"base_kind: {art.base_kind}")
        print(f"base_fingerprint: {art.base_fingerprint}")
        print(f"merge_provenance: {art.merge_provenance}")
        print(f"tensors: {len(art.shapes)}")
        for name, shape in art.shapes.items():
            print(f"  {name} {list(shape)} kept {art.values[name].size}")
        print(f"kept: {art.kept()}")
        print(f"fingerprint: {fingerprint({n: art.values[n] for n in art.shapes})}")
    else:
        print(f"kind: lora ({art.variant})")
        print(f"rank: {art.rank}")
        print(f"base_fingerprint: {art.base_fingerprint}")
        print(f"tensors: {len(art.factors)}")
        for name, parts in art.factors.items():
            shapes = " ".join(str(list(p.shape)) for p in parts)
            print(f"  {name} {shapes} stored {art.stored_params(name)}")
        flat = {f"{n}::{i}": p for n, parts in art.factors.items() for i, p in enumerate(parts)}
        print(f"fingerprint: {fingerprint(flat)}")
    return 0


def cmd_eval(args) -> int:
    cfg = desk_lab.load_config(args.config)
    reports = desk_lab.run_interference_suite(cfg)
    desk_lab.emit_csv(reports, args.out)
    rows = sum(len(r.tasks) for r in reports)
    print(f"wrote {rows} rows from {len(reports)} reports -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="byomkit", allow_abbrev=False,
                    description="Build multi-task models from finetuned checkpoints without data.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log one line per task")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("merge", allow_abbrev=False, help="merge task checkpoints into one")
    _add_merge_flags(p, required=True)
    p.add_argument("--base")
    p.add_argument("--tasks", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    for name, func, help_text in (
        ("post-prune", cmd_post_prune, "sparse task vectors over the pretrained base"),
        ("byom-fft", cmd_byom_fft, "merge, then sparse task deltas over the merged base"),
    ):
        p = sub.add_parser(name, allow_abbrev=False, help=help_text)
        p.add_argument("--keep", type=_fraction, required=True, help="kept fraction, e.g. 0.10")
        p.add_argument("--base")
        p.add_argument("--tasks", nargs="+")
        p.add_argument("--out-dir")
        p.add_argument("--scope", choices=["global", "per-tensor"], default="global")
        if name == "byom-fft":
            _add_merge_flags(p, required=False)
        _add_dry_run_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("byom-lora", allow_abbrev=False, help="rank-truncate LoRA adapters")
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--base")
    p.add_argument("--adapters", nargs="+")
    p.add_argument("--out-dir")
    p.add_argument("--ablation-separate-factors", action="store_true")
    p.add_argument("--dry-run-account", action="store_true")
    p.add_argument("--source-rank", type=int)
    p.add_argument("--layer", type=parse_layer, action="append", help="D_OUTxD_IN, repeatable")
    p.add_argument("--base-params", type=parse_count)
    p.add_argument("--num-tasks", type=int)
    p.set_defaults(func=cmd_byom_lora)

    p = sub.add_parser("materialize", allow_abbrev=False, help="apply a delta or adapter to its base")
    p.add_argument("--base")
    p.add_argument("--delta")
    p.add_argument("--adapter")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_materialize)

    p = sub.add_parser("info", allow_abbrev=False, help="describe any artifact")
    p.add_argument("path")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("eval", allow_abbrev=False, help="run the desk interference suite")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        return args.func(args)
    except IoFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ByomError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
