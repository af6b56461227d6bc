"""
Command line interface: `attree {gen,split,train,eval,sample,export,inspect} ...`

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.
"""
import argparse
import dataclasses
import json
import logging
import pandas
import pathlib
import scipy.stats
import sys
import typing

from . import __version__
from . import data
from . import export
from . import information
from . import model as bm
from . import persistence
from . import preprocessing
from . import sampling
from . import structure
from . import topology
from .sources import patterns, polytree

_log = logging.getLogger(__file__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclasses.dataclass
class RunManifest:
    config: typing.Dict[str, typing.Any]
    dataset: typing.Dict[str, typing.Any]
    seed: typing.Optional[int]
    outputs: typing.Dict[str, str]
    format_version: int = persistence.FORMAT_VERSION
    version: str = __version__

    def write(self, path: pathlib.Path):
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, default=str) + "\n", encoding="utf-8")
        return


def _parse_refresh(value: str) -> typing.Tuple[structure.RefreshPolicy, int]:
    if value == "sweep":
        return structure.RefreshPolicy.SWEEP, 1
    kind, _, interval = value.partition(":")
    if kind != "steps" or not (interval.isascii() and interval.isdigit()) or int(interval) < 1:
        raise argparse.ArgumentTypeError(f"expected `steps:K` with K ≥ 1 or `sweep`, got '{value}'")
    return structure.RefreshPolicy.STEPS, int(interval)


def _write_batch(batch: data.DataBatch, out: pathlib.Path, permute_seed: typing.Optional[int]):
    if permute_seed is not None:
        batch, permutation = preprocessing.permute_variables(batch, permute_seed)
        pandas.DataFrame(
            {"column": range(batch.n), "variable": permutation}
        ).to_csv(out.with_suffix(out.suffix + ".perm.csv"), index=False)
    data.write_batch(batch, out)
    print(f"{batch.count} {batch.n}")
    return


def cmd_gen(args) -> int:
    if args.kind == "patterns":
        batch = data.generate(
            "patterns",
            total_bits=args.bits, left_random=args.left, right_random=args.right,
            num_patterns=args.num, seed=args.seed,
        )
    elif args.kind == "polytree":
        if args.spec is not None and args.preset is not None:
            raise ValueError("Give either --spec or --preset, not both.")
        preset = args.preset or ("chain" if args.spec is None else None)
        batch = data.generate(
            "polytree",
            count=args.count, spec_path=args.spec,
            preset=preset,
            r=args.r, seed=args.seed,
        )
    elif args.kind == "idx":
        batch = data.generate(
            "idx",
            images_path=args.images, labels_path=args.labels,
            threshold=args.threshold, pad_to=args.pad_to,
        )
    else:
        batch = data.generate("returns", csv_path=args.csv)
    _write_batch(batch, args.out, args.permute_seed)
    return EXIT_OK


def cmd_split(args) -> int:
    batch = data.read_batch(args.data)
    train, test = preprocessing.split_train_test(batch, args.fraction, args.seed)
    data.write_batch(train, args.out_train)
    data.write_batch(test, args.out_test)
    print(f"{train.count} {test.count}")
    return EXIT_OK


def cmd_train(args) -> int:
    batch = data.read_batch(args.data)
    test = data.read_batch(args.test) if args.test else None
    init = structure.InitialTopology(args.init)
    if init == structure.InitialTopology.FILE and args.init_model is None:
        raise ValueError("--init file needs --init-model.")
    refresh, interval = args.refresh
    cfg = structure.TrainConfig(
        chi=args.chi,
        learning_rate=args.lr,
        combined_updates=args.combined_updates,
        candidate_updates=args.candidate_updates,
        max_iterations=args.iters,
        batch_size=args.batch_size,
        refresh=refresh,
        refresh_interval=interval,
        seed=args.seed,
        structure_fixed=args.fixed_structure,
        initial_topology=init,
        initial_model_path=args.init_model,
        eval_interval=args.eval_interval,
        snapshot_interval=args.snapshot_interval,
        checkpoint_interval=args.checkpoint_interval,
        checkpoint_path=args.out_model if args.checkpoint_interval else None,
        log_interval=args.log_interval,
        threads=args.threads,
    )
    m, report = structure.train(batch, cfg, test=test)

    outputs = {"model": str(args.out_model)}
    persistence.save_model(m, args.out_model)
    if args.out_report:
        export.write_report_csv(report, args.out_report)
        outputs["report"] = str(args.out_report)
    if args.out_bmi:
        export.write_bmi_csv(report.edge_bmi, args.out_bmi)
        outputs["bmi"] = str(args.out_bmi)
    if args.out_dot:
        args.out_dot.write_text(topology.to_dot(m.topology, report.edge_bmi), encoding="utf-8")
        outputs["dot"] = str(args.out_dot)
    if args.out_best:
        persistence.save_model(report.best_model, args.out_best)
        outputs["best"] = str(args.out_best)
    if report.structure_snapshots:
        snapshot_dir = args.snapshot_dir or args.out_model.parent
        snapshot_dir.mkdir(parents=True, exist_ok=True)
        for i, t in report.structure_snapshots:
            (snapshot_dir / f"tree_{i:06d}.dot").write_text(topology.to_dot(t, {}, name=f"iteration_{i}"), encoding="utf-8")
        outputs["snapshots"] = str(snapshot_dir)
    manifest = RunManifest(
        config={ f.name : getattr(cfg, f.name) for f in dataclasses.fields(cfg) },
        dataset={"train": str(args.data), "test": str(args.test) if args.test else None, "n": batch.n, "count": batch.count},
        seed=args.seed,
        outputs=outputs,
    )
    manifest.write(args.out_model.with_name(args.out_model.name + ".json"))
    if report.iterations:
        print(f"final train NLL {report.nll_history[-1]:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    m = persistence.load_model(args.model)
    batch = data.read_batch(args.data)
    if batch.n != m.n:
        raise data.FormatError(f"The model has {m.n} variables, the data has {batch.n}.")
    print(f"{bm.nll(m, batch, threads=args.threads):.6f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    m = persistence.load_model(args.model)
    samples = sampling.sample_batch(m, args.count, args.seed)
    data.write_batch(data.DataBatch(samples), args.out)
    return EXIT_OK


def cmd_export(args) -> int:
    m = persistence.load_model(args.model)
    if args.dot:
        if args.bmi:
            bmi = export.read_bmi_csv(args.bmi)
            unknown = set(bmi) - set(m.topology.edge_age)
            if unknown:
                raise data.FormatError(f"{args.bmi}: edges {sorted(unknown)} are not part of the model.")
        elif m.n <= bm.MAX_ENUMERATION_VARIABLES:
            bmi = information.bmi_exact_all(m)
        else:
            _log.warning("No BMI file given and n=%i is too large for exact values; edges stay gray.", m.n)
            bmi = {}
        labels, colors = export.read_labels(args.labels) if args.labels else ({}, {})
        args.dot.write_text(topology.to_dot(m.topology, bmi, labels, colors), encoding="utf-8")
    if args.rank_csv:
        export.write_rank_csv(topology.center_distance_ranking(m.topology, args.center), args.rank_csv)
    return EXIT_OK


def cmd_inspect(args) -> int:
    m = persistence.load_model(args.model)
    print(f"variables      {m.n}")
    print(f"chi            {m.chi}")
    print(f"root edge      {m.root_edge[0]} {m.root_edge[1]}")
    print(f"Z              {m.partition_function:.10g}")
    print(f"isometry error {bm.isometry_error(m):.3g}")
    if m.n <= bm.MAX_ENUMERATION_VARIABLES:
        print(f"entropy        {scipy.stats.entropy(bm.exact_probabilities(m)):.6f}")
    for (u, v), d in sorted(m.bond_dimensions().items()):
        print(f"bond {u} {v} {d}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attree", description="Adaptive tensor tree Born machines.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug output")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = commands.add_parser("gen", help="generate or convert a data set")
    gen.set_defaults(fn=cmd_gen)
    kinds = gen.add_subparsers(dest="kind", required=True, parser_class=_Parser)
    kind_parsers = {
        kind : kinds.add_parser(kind, help=source.description)
        for kind, source in sorted(data.SUPPORTED_SOURCES.items())
    }
    for p in kind_parsers.values():
        p.add_argument("--out", type=pathlib.Path, required=True)
        p.add_argument("--permute-seed", type=int, default=None, help="randomly permute the columns")
    defaults = patterns.PatternSpec()
    kind_parsers["patterns"].add_argument("--bits", type=int, default=defaults.total_bits)
    kind_parsers["patterns"].add_argument("--left", type=int, default=defaults.left_random)
    kind_parsers["patterns"].add_argument("--right", type=int, default=defaults.right_random)
    kind_parsers["patterns"].add_argument("--num", type=int, default=defaults.num_patterns)
    kind_parsers["patterns"].add_argument("--seed", type=int, default=None)
    kind_parsers["polytree"].add_argument("--spec", type=pathlib.Path, default=None)
    kind_parsers["polytree"].add_argument("--preset", choices=sorted(polytree.PRESETS), default=None, help="defaults to chain without --spec")
    kind_parsers["polytree"].add_argument("--count", type=int, required=True)
    kind_parsers["polytree"].add_argument("--r", type=float, default=None, help="override the correlation rate")
    kind_parsers["polytree"].add_argument("--seed", type=int, default=None)
    kind_parsers["idx"].add_argument("--images", type=pathlib.Path, required=True)
    kind_parsers["idx"].add_argument("--labels", type=pathlib.Path, default=None)
    kind_parsers["idx"].add_argument("--threshold", type=int, default=127)
    kind_parsers["idx"].add_argument("--pad-to", type=int, default=32)
    kind_parsers["returns"].add_argument("--csv", type=pathlib.Path, required=True)

    split = commands.add_parser("split", help="random train/test split of a batch file")
    split.set_defaults(fn=cmd_split)
    split.add_argument("--data", type=pathlib.Path, required=True)
    split.add_argument("--fraction", type=float, default=0.5)
    split.add_argument("--seed", type=int, default=None)
    split.add_argument("--out-train", type=pathlib.Path, required=True)
    split.add_argument("--out-test", type=pathlib.Path, required=True)

    train = commands.add_parser("train", help="optimize a tensor tree on a batch file")
    train.set_defaults(fn=cmd_train)
    train.add_argument("--data", type=pathlib.Path, required=True)
    train.add_argument("--test", type=pathlib.Path, default=None)
    train.add_argument("--chi", type=int, required=True)
    train.add_argument("--lr", type=float, default=0.001)
    train.add_argument("--iters", type=int, default=3000)
    train.add_argument("--combined-updates", type=int, default=1)
    train.add_argument("--candidate-updates", type=int, default=10)
    train.add_argument("--init", choices=[i.value for i in structure.InitialTopology], default="random")
    train.add_argument("--init-model", type=pathlib.Path, default=None)
    train.add_argument("--fixed-structure", action="store_true")
    train.add_argument("--batch-size", type=int, default=None)
    train.add_argument("--refresh", type=_parse_refresh, default=(structure.RefreshPolicy.STEPS, 1000), help="steps:K or sweep")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--eval-interval", type=int, default=1)
    train.add_argument("--snapshot-interval", type=int, default=0, help="write the tree as DOT every K iterations")
    train.add_argument("--snapshot-dir", type=pathlib.Path, default=None, help="defaults to the directory of --out-model")
    train.add_argument("--checkpoint-interval", type=int, default=0)
    train.add_argument("--threads", type=int, default=1, help="threads for the test-set evaluation")
    train.add_argument("--log-interval", type=int, default=100)
    train.add_argument("--out-model", type=pathlib.Path, required=True)
    train.add_argument("--out-report", type=pathlib.Path, default=None)
    train.add_argument("--out-dot", type=pathlib.Path, default=None)
    train.add_argument("--out-bmi", type=pathlib.Path, default=None)
    train.add_argument("--out-best", type=pathlib.Path, default=None)

    evaluate = commands.add_parser("eval", help="print the NLL of a batch file in nats")
    evaluate.set_defaults(fn=cmd_eval)
    evaluate.add_argument("--model", type=pathlib.Path, required=True)
    evaluate.add_argument("--data", type=pathlib.Path, required=True)
    evaluate.add_argument("--threads", type=int, default=1)

    sample = commands.add_parser("sample", help="draw samples from a model")
    sample.set_defaults(fn=cmd_sample)
    sample.add_argument("--model", type=pathlib.Path, required=True)
    sample.add_argument("--count", type=int, required=True)
    sample.add_argument("--seed", type=int, default=None)
    sample.add_argument("--out", type=pathlib.Path, required=True)

    exp = commands.add_parser("export", help="DOT rendering and centre-distance ranking")
    exp.set_defaults(fn=cmd_export)
    exp.add_argument("--model", type=pathlib.Path, required=True)
    exp.add_argument("--dot", type=pathlib.Path, default=None)
    exp.add_argument("--labels", type=pathlib.Path, default=None, help="CSV with columns variable,label,color")
    exp.add_argument("--bmi", type=pathlib.Path, default=None, help="CSV with columns u,v,bmi written by train")
    exp.add_argument("--rank-csv", type=pathlib.Path, default=None)
    exp.add_argument("--center", choices=[c.value for c in topology.CenterKind], default="centroid")

    inspect = commands.add_parser("inspect", help="print a summary of a model file")
    inspect.set_defaults(fn=cmd_inspect)
    inspect.add_argument("--model", type=pathlib.Path, required=True)
    return parser


def main(argv: typing.Optional[typing.Sequence[str]]=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as ex:
        return ex.code
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        return args.fn(args)
    except (data.FormatError, OSError) as ex:
        print(f"attree: {ex}", file=sys.stderr)
        return EXIT_DATA
    except ArithmeticError as ex:
        print(f"attree: numerical failure: {ex}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError) as ex:
        print(f"attree: {ex}", file=sys.stderr)
        return EXIT_USAGE
