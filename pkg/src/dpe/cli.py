"""Command-line driver: ``dpe {synth,train,eval,ablate,sizes,sensitivity,inspect}``.

Data goes to files and standard output, diagnostics to standard error.  Every
command writes a JSON manifest next to its outputs recording the resolved
configuration, input digests and output paths.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (SENSITIVITY_INV_TEMPERATURES, SENSITIVITY_IPS_WEIGHTS, benchmark_config, probe_reference,
                    rows_to_csv, run_ablation, summarize_ablation, sweep_ensemble_size, sweep_sensitivity)
from .config import DIVERSIFICATION_ALIASES, SAMPLING_ALIASES, TrainConfig, config_from_mapping, parse_kv
from .ensemble import load_model, nearest_samples, save_model, similarity_matrix, train_ensemble
from .metrics import evaluate
from .store import load_store, save_store
from .synth import SynthSpec, generate_synthetic

log = logging.getLogger("dpe")


class UsageError(Exception):
    """Bad flag value; reported with exit status 2."""


# -- helpers --------------------------------------------------------------

def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(path: Path, command: str, started: float, inputs: list[Path], outputs: list[Path],
                    cfg: TrainConfig | None = None, spec: SynthSpec | None = None, extra=None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "argv": sys.argv[1:],
        "config": None if cfg is None else cfg.to_kv().splitlines(),
        "synth_spec": None if spec is None else _spec_dict(spec),
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "duration_s": round(time.perf_counter() - started, 3),
    }
    if extra:
        manifest.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2) + "\n")


def _spec_dict(spec: SynthSpec) -> dict:
    return {
        "dim": spec.dim,
        "class_means": spec.class_means.tolist(),
        "attribute_offsets": spec.attribute_offsets.tolist(),
        "noise_std": spec.noise_std,
        "proportions": spec.proportions.tolist(),
        "n_train": np.atleast_1d(spec.n_train).tolist(),
        "n_test": spec.n_test,
        "seed": spec.seed,
    }


def _floats(text: str, flag: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated numbers, got {text!r}") from None


def _ints(text: str, flag: str) -> list[int]:
    vals = _floats(text, flag)
    if any(v != int(v) for v in vals):
        raise UsageError(f"{flag}: expected integers, got {text!r}")
    return [int(v) for v in vals]


def _load(path, flag: str):
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file {p}")
    return p, load_store(p)


# -- configuration --------------------------------------------------------

_CONFIG_FLAGS = ("seed", "n_members", "inv_temperature", "ips_weight", "learning_rate", "epochs",
                 "batch_size", "sampling", "diversification")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training configuration (flags override --config)")
    g.add_argument("--config", help="key=value file")
    g.add_argument("--preset", choices=("default", "synthetic"), default="default",
                   help="base values before --config and flags are applied")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-members", type=int)
    g.add_argument("--inv-temperature", type=float)
    g.add_argument("--ips-weight", type=float)
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--sampling", choices=sorted(SAMPLING_ALIASES))
    g.add_argument("--diversification", choices=("none", *sorted(DIVERSIFICATION_ALIASES)))
    g.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")


def resolve_config(args) -> TrainConfig:
    base = benchmark_config() if args.preset == "synthetic" else TrainConfig()
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"--config: no such file {path}")
        values.update(parse_kv(path.read_text(), str(path)))
    for name in _CONFIG_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = str(v)
    try:
        return config_from_mapping(values, base)
    except ValueError as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


# -- commands -------------------------------------------------------------

def cmd_synth(args) -> int:
    started = time.perf_counter()
    kw = {"seed": args.seed if args.seed is not None else 0}
    if args.noise_std is not None:
        kw["noise_std"] = args.noise_std
    if args.proportions is not None:
        props = _floats(args.proportions, "--proportions")
        kw["proportions"] = np.array([props, props])
    if args.n_train is not None:
        n = _ints(args.n_train, "--n-train")
        kw["n_train"] = n[0] if len(n) == 1 else tuple(n)
    if args.n_test is not None:
        kw["n_test"] = args.n_test
    try:
        spec = SynthSpec(**kw)
    except ValueError as exc:
        flag = {"proportions": "--proportions", "noise_std": "--noise-std", "n_train": "--n-train",
                "n_test": "--n-test"}
        names = [f for k, f in flag.items() if k in str(exc)]
        raise UsageError(f"{names[0] if names else 'synth'}: {exc}") from None
    train, test = generate_synthetic(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".csv" if args.format == "csv" else ".dpef"
    paths = [out / f"train{ext}", out / f"test{ext}"]
    save_store(train, paths[0])
    save_store(test, paths[1])
    _write_manifest(out / "manifest.json", "synth", started, [], paths, spec=spec)
    print(f"train={paths[0]} n={train.n_samples}")
    print(f"test={paths[1]} n={test.n_samples}")
    return 0


def cmd_train(args) -> int:
    started = time.perf_counter()
    cfg = resolve_config(args)
    path, store = _load(args.features, "--features")
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)

    def report(j, member, trace):
        print(f"member={j} final_loss={float(trace[-1])!r} scale={member.scale!r}", flush=True)

    model = train_ensemble(store, cfg, on_member=report)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    _write_manifest(out.with_name(out.name + ".manifest.json"), "train", started, [path], [out], cfg=cfg)
    return 0


def _write_report(report, out: Path) -> list[Path]:
    out.parent.mkdir(parents=True, exist_ok=True)
    txt, tab = out.with_suffix(".txt"), out.with_suffix(".csv")
    txt.write_text(report.to_text())
    tab.write_text(report.to_csv())
    return [txt, tab]


def cmd_eval(args) -> int:
    started = time.perf_counter()
    if args.model is None:
        raise UsageError("--model is required")
    model_path = Path(args.model)
    model = load_model(model_path)
    path, store = _load(args.test_features, "--test-features")
    report = evaluate(model, store)
    if report.group_source == "class":
        print("warning: store has no group labels; worst-group accuracy is over classes", file=sys.stderr)
    print(f"worst_group_accuracy={report.worst_group_accuracy!r}")
    print(f"balanced_accuracy={report.balanced_accuracy!r}")
    print(f"overall_accuracy={report.overall_accuracy!r}")
    if args.out:
        out = Path(args.out)
        written = _write_report(report, out)
        _write_manifest(out.with_name(out.stem + ".manifest.json"), "eval", started, [model_path, path], written)
    return 0


def _out_dir(args) -> Path:
    if args.out_dir is None:
        raise UsageError("--out-dir is required")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_ablate(args) -> int:
    started = time.perf_counter()
    cfg = resolve_config(args)
    if cfg.diversification != "sampling_plus_ips":
        raise UsageError("--diversification: ablate runs all arms; leave it at sampling+ips")
    tr_path, train = _load(args.features, "--features")
    te_path, test = _load(args.test_features, "--test-features")
    out = _out_dir(args)
    sizes = _ints(args.sizes, "--sizes")
    if args.n_seeds < 1:
        raise UsageError("--n-seeds must be positive")
    seeds = [cfg.seed + i for i in range(args.n_seeds)]
    try:
        rows = run_ablation(train, test, cfg, seeds, sizes)
    except ValueError as exc:
        if "sizes" in str(exc):
            raise UsageError(f"--sizes: {exc}") from None
        raise
    summary = summarize_ablation(rows)
    probe = [probe_reference(train, test, cfg, s) for s in seeds]
    table, summ = out / "ablation.csv", out / "summary.csv"
    table.write_text(rows_to_csv(rows))
    lines = ["arm,n_members,mean_worst_group_accuracy"]
    lines += [f"{arm},{n},{v!r}" for (arm, n), v in summary.items()]
    lines.append(f"linear_probe,0,{float(np.mean([p.worst_group_accuracy for p in probe]))!r}")
    summ.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    _write_manifest(out / "manifest.json", "ablate", started, [tr_path, te_path], [table, summ], cfg=cfg,
                    extra={"seeds": seeds, "sizes": sizes})
    return 0


def cmd_sizes(args) -> int:
    started = time.perf_counter()
    cfg = resolve_config(args)
    tr_path, train = _load(args.features, "--features")
    te_path, test = _load(args.test_features, "--test-features")
    out = _out_dir(args)
    try:
        rows = sweep_ensemble_size(train, test, cfg, _ints(args.sizes, "--sizes"))
    except ValueError as exc:
        if "sizes" in str(exc):
            raise UsageError(f"--sizes: {exc}") from None
        raise
    table = out / "sizes.csv"
    table.write_text(rows_to_csv(rows))
    sys.stdout.write(table.read_text())
    _write_manifest(out / "manifest.json", "sizes", started, [tr_path, te_path], [table], cfg=cfg)
    return 0


def cmd_sensitivity(args) -> int:
    started = time.perf_counter()
    cfg = resolve_config(args)
    tr_path, train = _load(args.features, "--features")
    te_path, test = _load(args.test_features, "--test-features")
    out = _out_dir(args)
    inv_t = _floats(args.inv_temperatures, "--inv-temperatures")
    alphas = _floats(args.ips_weights, "--ips-weights")
    if not inv_t or not alphas:
        raise UsageError("--inv-temperatures and --ips-weights must be non-empty")
    rows = sweep_sensitivity(train, test, cfg, inv_t, alphas)
    table = out / "sensitivity.csv"
    table.write_text(rows_to_csv(rows))
    sys.stdout.write(table.read_text())
    wga = [r.worst_group_accuracy for r in rows]
    print(f"wga_range={max(wga) - min(wga)!r}")
    _write_manifest(out / "manifest.json", "sensitivity", started, [tr_path, te_path], [table], cfg=cfg)
    return 0


def cmd_inspect(args) -> int:
    if args.model is None:
        raise UsageError("--model is required")
    model = load_model(args.model)
    if not 0 <= args.member < model.n_members:
        raise UsageError(f"--member {args.member} outside [0, {model.n_members})")
    if not 0 <= args.class_ < model.n_classes:
        raise UsageError(f"--class {args.class_} outside [0, {model.n_classes})")
    if args.features is not None:
        _, store = _load(args.features, "--features")
        if not 1 <= args.top_k <= store.n_samples:
            raise UsageError(f"--top-k {args.top_k} outside [1, {store.n_samples}]")
        idx, dist = nearest_samples(model, args.member, args.class_, store, args.top_k)
        print("rank,index,distance,label,group")
        for r, (i, d) in enumerate(zip(idx, dist)):
            g = int(store.groups[i]) if store.has_groups else ""
            print(f"{r},{int(i)},{float(d)!r},{int(store.labels[i])},{g}")
    if args.similarity:
        sim = similarity_matrix(model, args.class_)
        print(f"# cosine similarity of class {args.class_} prototypes across {model.n_members} members")
        for row in sim:
            print(",".join(f"{v:.6f}" for v in row))
    return 0


# -- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-member progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic train/test stores")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--proportions", help="per-class attribute fractions, e.g. 0.8,0.1,0.1")
    p.add_argument("--n-train", help="training samples per class, one value or one per class")
    p.add_argument("--n-test", type=int, help="test samples per group")
    p.add_argument("--format", choices=("dpef", "csv"), default="dpef")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train an ensemble and save it")
    p.add_argument("--features", help="training store")
    p.add_argument("--out", help="model path (.dpem)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a saved model on a store")
    p.add_argument("--model")
    p.add_argument("--test-features")
    p.add_argument("--out", help="report path stem; writes .txt and .csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare diversification arms over seeds and ensemble sizes")
    p.add_argument("--features")
    p.add_argument("--test-features")
    p.add_argument("--out-dir")
    p.add_argument("--n-seeds", type=int, default=20)
    p.add_argument("--sizes", default="1,5,15")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sizes", help="worst-group accuracy against ensemble size")
    p.add_argument("--features")
    p.add_argument("--test-features")
    p.add_argument("--out-dir")
    p.add_argument("--sizes", default="1,2,5,10,15,25,40")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sizes)

    p = sub.add_parser("sensitivity", help="grid over inverse temperature and similarity weight")
    p.add_argument("--features")
    p.add_argument("--test-features")
    p.add_argument("--out-dir")
    p.add_argument("--inv-temperatures", default=",".join(f"{v:g}" for v in SENSITIVITY_INV_TEMPERATURES))
    p.add_argument("--ips-weights", default=",".join(f"{v:g}" for v in SENSITIVITY_IPS_WEIGHTS))
    _add_config_flags(p)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("inspect", help="nearest samples to a prototype and member similarity")
    p.add_argument("--model")
    p.add_argument("--features", help="store to rank against")
    p.add_argument("--member", type=int, default=0)
    p.add_argument("--class", dest="class_", type=int, default=0)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--similarity", action="store_true", help="print the member cosine-similarity matrix")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if getattr(args, "print_config", False):
            sys.stdout.write(resolve_config(args).to_kv())
            return 0
        return args.func(args)
    except UsageError as exc:
        print(f"dpe {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"dpe {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
