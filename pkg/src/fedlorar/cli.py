"""Command line entry point: ``fedlorar <verb> [options]``.

Exit codes: 0 success, 2 invalid config, 3 runtime error, 4 transport failure.
Set ``FEDLORAR_LOG`` (DEBUG, INFO, WARNING, ...) to control log verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import FedLorarError, InvalidConfig, InvalidSpec, WireError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_TRANSPORT = 0, 2, 3, 4

log = logging.getLogger("fedlorar")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--algo", choices=["fedavg", "fedopt", "fedprox"])
    p.add_argument("--weighting", choices=["size", "equal", "lr", "lorar"])
    p.add_argument("--transport", choices=["inproc", "tcp"])
    p.add_argument("--rounds", type=int)
    p.add_argument("--eval-every", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedlorar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic population and write it as text files")
    _common(p)
    for verb, text in [
        ("finetune", "train one model per client"),
        ("centralized", "train one model on the merged data"),
        ("federated", "run federated training"),
    ]:
        _common(sub.add_parser(verb, help=text))

    p = sub.add_parser("serve", help="run the FL server for remote clients")
    _common(p)
    p.add_argument("--bind", default="127.0.0.1:7890", help="host:port to listen on")
    p.add_argument("--port-file", type=Path, help="write the bound port here once listening")

    p = sub.add_parser("client", help="run one FL client against a server")
    _common(p)
    p.add_argument("--server", required=True, help="host:port of the server")
    p.add_argument("--client-id", type=int, required=True)
    p.add_argument("--connect-timeout", type=float, default=30.0, help="seconds to keep retrying the server")

    p = sub.add_parser("plot-data", help="write loss and dev-curve CSVs from run directories")
    p.add_argument("runs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("compare", help="print a per-client comparison table across runs")
    p.add_argument("runs", nargs="+", type=Path)
    p.add_argument("--names", help="comma-separated client column names")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {
        "seed": args.seed,
        "output_dir": args.out,
        "algo.kind": args.algo,
        "algo.weighting": args.weighting,
        "transport": args.transport,
        "algo.rounds": args.rounds,
        "eval_every": args.eval_every,
    }
    return load_config(args.config, **{k: v for k, v in overrides.items() if v is not None})


def _dispatch(args: argparse.Namespace) -> int:
    from . import experiment
    from .metrics import format_table

    if args.verb == "plot-data":
        runs = {}
        for d in args.runs:
            label, _ = experiment.load_report(d)
            runs[label if label not in runs else f"{label}_{d.name}"] = experiment.load_records(d)
        for path in experiment.emit_plot_data(runs, args.out):
            print(path)
        return EXIT_OK
    if args.verb == "compare":
        rows = [experiment.load_report(d) for d in args.runs]
        names = args.names.split(",") if args.names else None
        if names is None and len(rows[0][1].per_client) == 8:
            from .datagen import TEXT2SQL_CLIENT_NAMES

            names = list(TEXT2SQL_CLIENT_NAMES)
        print(format_table(rows, names))
        return EXIT_OK

    config = config_from_args(args)
    out = Path(config.output_dir)

    if args.verb == "gen-data":
        from .datagen import generate_population, save_population

        save_population(generate_population(config.population), out)
        print(out)
        return EXIT_OK
    if args.verb == "finetune":
        report = experiment.run_finetune(config)
        experiment.write_paradigm_outputs(config, "finetune", report, out)
        print(format_table([("Finetuning", report)]))
        return EXIT_OK
    if args.verb == "centralized":
        report = experiment.run_centralized(config)
        experiment.write_paradigm_outputs(config, "centralized", report, out)
        print(format_table([("Centralized", report)]))
        return EXIT_OK
    if args.verb == "federated":
        report, _ = experiment.run_federated_experiment(config, out_dir=out)
        print(format_table([(experiment.run_label(config), report)]))
        return EXIT_OK
    if args.verb == "serve":
        return _serve(config, args, out)
    if args.verb == "client":
        from .engine import population_sizes
        from .transport import run_client

        population = experiment.load_or_generate(config)
        by_id = {d.client_id: d for d in population}
        if args.client_id not in by_id:
            raise InvalidConfig(f"no client {args.client_id} in the population")
        rounds = run_client(
            args.server, args.client_id, by_id[args.client_id], config.algo, config.seed,
            config.model, population_sizes(population), connect_timeout=args.connect_timeout,
        )
        log.info("client %d finished after %d rounds", args.client_id, rounds)
        return EXIT_OK
    raise AssertionError(args.verb)


def _serve(config: ExperimentConfig, args: argparse.Namespace, out: Path) -> int:
    from . import experiment
    from .engine import population_sizes, records_to_jsonl
    from .metrics import evaluate_all, format_table
    from .transport import run_server

    population = experiment.load_or_generate(config)

    def announce(addr):
        log.info("listening on %s:%d", *addr)
        if args.port_file:
            args.port_file.write_text(str(addr[1]))

    result = run_server(
        args.bind, config.algo, population_sizes(population), config.seed, config.model,
        dev_population=population, eval_every=config.eval_every, on_listening=announce,
    )
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_all(config.model, result.best, population)
    (out / "rounds.jsonl").write_text(records_to_jsonl(result.records))
    experiment._write_json(out / "manifest.json", experiment.manifest(config, "federated"))
    experiment._write_json(out / "report.json", {"label": experiment.run_label(config), **report.to_dict()})
    experiment.emit_plot_data({experiment.run_label(config): result.records}, out)
    print(format_table([(experiment.run_label(config), report)]))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("FEDLORAR_LOG", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (InvalidConfig, InvalidSpec) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (WireError, ConnectionError) as exc:
        print(f"transport failure: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (FedLorarError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
