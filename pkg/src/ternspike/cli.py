"""Command-line interface: ``ternspike {train,eval,convert,analyze,energy,selftest}``."""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import tensor as tn
from .analysis import capacity_report, membrane_profile, merge_spike_counts
from .config import RunConfig
from .data import DatasetHandle, load_dataset
from .energy import estimate, parse_counts, report_from_counts
from .errors import TernSpikeError
from .network import PRESETS
from .reparam import ConversionReport, fold_amplitudes, verify_equivalence
from .training import Checkpoint, evaluate, train

log = logging.getLogger("ternspike")


def _write_table(path, header, rows) -> None:
    text = "\t".join(header) + "\n" + "".join("\t".join(str(c) for c in r) + "\n" for r in rows)
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _dataset(args) -> DatasetHandle:
    return load_dataset(args.dataset, args.data)


def _test_split(args, data: DatasetHandle):
    images, labels = data.test.images, data.test.labels
    if getattr(args, "limit", None):
        images, labels = images[: args.limit], labels[: args.limit]
    return images, labels


# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = cfg.override(
        preset=args.preset,
        neuron=args.neuron,
        timesteps=args.timesteps,
        dataset=args.dataset,
        data_dir=args.data,
        train_limit=args.limit,
        checkpoint=args.out,
        metrics=args.metrics,
        **{
            "train.epochs": args.epochs,
            "train.batch_size": args.batch_size,
            "train.learning_rate": args.lr,
            "train.optimizer": args.optimizer,
            "train.seed": args.seed,
            "train.max_steps": args.max_steps,
            "train.val_fraction": args.val_fraction,
        },
    )
    data = load_dataset(cfg.dataset, cfg.data_dir)
    spec = cfg.network_spec(data.input_shape, data.num_classes)
    train_data = data.train.subset(cfg.train_limit) if cfg.train_limit else data.train
    ckpt = train(spec, train_data, cfg.train, callback=lambda e: log.info("%s", e))
    test = evaluate(ckpt, data.test.images, data.test.labels)
    ckpt.notes["run_config"] = cfg.to_dict()
    ckpt.notes["test"] = {"accuracy": test["accuracy"], "loss": test["loss"], "mean_sparsity": test["mean_sparsity"]}
    ckpt.save(cfg.checkpoint)
    if cfg.metrics:
        keys = sorted({k for e in ckpt.history for k in e})
        _write_table(cfg.metrics, keys, [[e.get(k, "") for k in keys] for e in ckpt.history])
    print(f"checkpoint\t{cfg.checkpoint}\ttest_accuracy\t{test['accuracy']:.4f}\tmean_sparsity\t{test['mean_sparsity']:.4f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    data = _dataset(args)
    m = evaluate(ckpt, *_test_split(args, data))
    rows = [("accuracy", f"{m['accuracy']:.6f}"), ("loss", f"{m['loss']:.6f}"), ("mean_sparsity", f"{m['mean_sparsity']:.6f}")]
    rows += [(f"sparsity[{k}]", f"{v:.6f}") for k, v in m["sparsity"].items()]
    _write_table(args.out, ("metric", "value"), rows)
    return 0


def cmd_convert(args) -> int:
    ckpt = Checkpoint.load(args.inp)
    report = ConversionReport()
    converted = fold_amplitudes(ckpt, report)
    if args.data:
        probe = _dataset(args).test.images[: args.probe_size]
    else:
        rng = np.random.default_rng(args.seed)
        probe = rng.standard_normal((args.probe_size,) + ckpt.spec.input_shape).astype(np.float32)
    verify_equivalence(ckpt, converted, probe, args.tolerance, report, strict=False)
    converted.save(args.out)
    text = report.to_text()
    if args.report:
        Path(args.report).write_text(text)
    sys.stdout.write(text)
    ok = report.max_deviation <= args.tolerance and all(report.pattern_match.values()) and all(report.alphabet_ok.values())
    if not ok:
        print(f"error: verification failed; first divergence: {report.first_divergence}", file=sys.stderr)
        return 1
    return 0


def cmd_analyze(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    data = _dataset(args)
    images, _ = _test_split(args, data)
    net = ckpt.network()
    with tn.no_grad():
        _, rec = net(images[: args.probe_size], record=True)
    prof = membrane_profile(rec, bins=args.bins, post_reset=args.post_reset)
    prefix = args.out_prefix
    hist_rows = []
    for h in prof["histograms"]:
        for i, c in enumerate(h.counts):
            hist_rows.append((h.layer, h.timestep, i, f"{h.edges[i]:.6g}", f"{h.edges[i + 1]:.6g}", int(c)))
    _write_table(f"{prefix}histograms.tsv", ("layer", "timestep", "bin", "lo", "hi", "count"), hist_rows)
    stats = merge_spike_counts([rec])
    rows = [
        (n, f"{mu:.6g}", f"{sd:.6g}", f"{stats[n]['pos']:.6g}", f"{stats[n]['neg']:.6g}", f"{stats[n]['zero']:.6g}", f"{stats[n]['entropy']:.6g}")
        for n, (mu, sd) in prof["layers"].items()
    ]
    _write_table(f"{prefix}layers.tsv", ("layer", "membrane_mean", "membrane_std", "rate_pos", "rate_neg", "rate_zero", "entropy_bits"), rows)
    cap = [(c.layer, "x".join(map(str, c.shape)), c.binary_bits, f"{c.ternary_bits:.6g}", c.real_bits) for c in capacity_report(ckpt.spec)]
    _write_table(f"{prefix}capacity.tsv", ("layer", "shape", "binary_bits", "ternary_bits", "real32_bits"), cap)
    _write_table(None, ("layer", "membrane_mean", "membrane_std", "rate_pos", "rate_neg", "rate_zero", "entropy_bits"), rows)
    return 0


TABLE4 = {"binary": "table4-binary.txt", "ternary": "table4-ternary.txt"}


def cmd_energy(args) -> int:
    if args.counts or args.table4:
        if args.table4:
            text = resources.files("ternspike.resources").joinpath(TABLE4[args.table4]).read_text()
        else:
            text = Path(args.counts).read_text()
        report = report_from_counts(parse_counts(text))
    elif args.ckpt:
        ckpt = Checkpoint.load(args.ckpt)
        data = _dataset(args)
        m = evaluate(ckpt, *_test_split(args, data))
        report = estimate(ckpt.spec, m["sparsity"])
    else:
        print("error: energy needs --counts, --table4, or --ckpt with --data", file=sys.stderr)
        return 2
    sys.stdout.write(report.to_text())
    return 0


def cmd_selftest(args) -> int:
    from . import selftest

    return 0 if selftest.run() else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ternspike", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp):
        sp.add_argument("--data", help="dataset directory (default: $TERNSPIKE_DATA)")
        sp.add_argument("--dataset", default="mnist", choices=("mnist", "fashion-mnist", "cifar10"))
        sp.add_argument("--limit", type=int, help="use only the first N samples")

    t = sub.add_parser("train", help="train a network and write a checkpoint")
    t.add_argument("--config", help="JSON run configuration")
    t.add_argument("--preset", choices=PRESETS)
    t.add_argument("--neuron", choices=("binary", "ternary", "trainable-ternary", "trainable_ternary"))
    t.add_argument("-T", "--timesteps", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--optimizer", choices=("sgd", "adam"))
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--val-fraction", type=float)
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--metrics", help="per-epoch metrics TSV path")
    t.add_argument("--data")
    t.add_argument("--dataset", choices=("mnist", "fashion-mnist", "cifar10"))
    t.add_argument("--limit", type=int, help="train on the first N training samples")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", help="metrics TSV path (default: stdout)")
    data_args(e)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("convert", help="fold trainable amplitudes into weights")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--report", help="write the conversion report here as well")
    c.add_argument("--probe-size", type=int, default=256)
    c.add_argument("--tolerance", type=float, default=1e-5)
    c.add_argument("--seed", type=int, default=0, help="seed of the random probe used without --data")
    data_args(c)
    c.set_defaults(func=cmd_convert)

    a = sub.add_parser("analyze", help="membrane histograms, spike statistics, capacity")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--bins", type=int, default=64)
    a.add_argument("--post-reset", action="store_true", help="profile post-reset membranes")
    a.add_argument("--probe-size", type=int, default=256)
    a.add_argument("--out-prefix", default="analysis-")
    data_args(a)
    a.set_defaults(func=cmd_analyze)

    en = sub.add_parser("energy", help="inference energy estimate")
    src = en.add_mutually_exclusive_group()
    src.add_argument("--counts", help="'key = value' counts file")
    src.add_argument("--table4", choices=sorted(TABLE4), help="built-in published counts")
    src.add_argument("--ckpt", help="measure sparsity of this checkpoint on --data")
    data_args(en)
    en.set_defaults(func=cmd_energy)

    s = sub.add_parser("selftest", help="run the built-in oracle checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (TernSpikeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
