"""The three learning paradigms and their on-disk outputs.

A federated run directory holds::

    manifest.json        resolved config, seed, package version, source digest
    rounds.jsonl         one RoundRecord per line
    dev_curve.csv        round, merged-dev MicroAvg
    loss_client_<id>.csv step, round, loss (per-epoch mean training loss)
    report.json          test EvalReport of the best global model
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import subprocess
import sys
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, models
from .config import ExperimentConfig
from .datagen import ClientDataset, Split, generate_population, load_population, merge
from .engine import RoundRecord, records_to_jsonl, run_federated
from .errors import InvalidConfig
from .metrics import ClientScore, EvalReport, evaluate_all
from .optim import init_state, raw_step
from .tensor import ParamVector, as_vector

log = logging.getLogger(__name__)

TRAIN_STREAM = 0x5EED


def load_or_generate(config: ExperimentConfig) -> list[ClientDataset]:
    if config.data_dir:
        population = load_population(config.data_dir)
    else:
        population = generate_population(config.population)
    for d in population:
        if d.input_dim != config.model.input_dim or d.num_classes != config.model.num_classes:
            raise InvalidConfig(
                f"client {d.client_id} data has input_dim={d.input_dim}, num_classes={d.num_classes}; "
                f"the model expects {config.model.input_dim}, {config.model.num_classes}"
            )
    return population


def source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def manifest(config: ExperimentConfig, paradigm: str) -> dict:
    return {
        "paradigm": paradigm,
        "seed": config.seed,
        "config": config.to_flat(),
        "code_version": {"package": __version__, "source_sha256": source_digest()},
    }


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


# -- centralized training used by finetune and centralized ------------------

def train_supervised(
    config: ExperimentConfig,
    init_w: ParamVector,
    train: Split,
    select,
) -> tuple[ParamVector, float]:
    """Minibatch training for ``config.max_epochs`` epochs with best-checkpoint selection.

    ``select(w)`` scores a checkpoint on held-out data; the highest score wins
    and ties keep the earlier checkpoint. The initial model is a candidate too.
    """
    model, opt = config.model, config.algo.client_opt
    rng = np.random.default_rng(np.random.SeedSequence([config.seed % 2**64, TRAIN_STREAM]))
    X, y = train.inputs, train.targets
    n = len(y)
    w = np.array(init_w, dtype=np.float64)
    best_w, best_score = as_vector(w), select(as_vector(w))
    state = init_state(opt)
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            _, grad = models.raw_loss_and_grad(model, w, X[idx], y[idx])
            state, w = raw_step(opt, state, w, grad)
        if (epoch + 1) % config.eval_every_epochs == 0 or epoch == config.max_epochs - 1:
            candidate = as_vector(w)
            score = select(candidate)
            if score > best_score:
                best_w, best_score = candidate, score
    return best_w, best_score


def run_finetune(config: ExperimentConfig, population: Sequence[ClientDataset] | None = None) -> EvalReport:
    """One model per client from the shared initialization, selected on that client's dev split."""
    if not config.model.is_classifier:
        raise InvalidConfig("finetune needs a classification model")
    population = load_or_generate(config) if population is None else population
    init_w = models.init_params(config.model, config.seed)
    scores = []
    for d in sorted(population, key=lambda d: d.client_id):
        best, _ = train_supervised(config, init_w, d.train, lambda w, d=d: models.accuracy(config.model, w, d.dev))
        correct = models.count_correct(config.model, best, d.test.inputs, d.test.targets)
        scores.append(ClientScore.from_counts(d.client_id, len(d.test), correct))
        log.info("finetuned client %d: test acc %.2f", d.client_id, scores[-1].accuracy * 100)
    return EvalReport.from_scores(scores)


def run_centralized(config: ExperimentConfig, population: Sequence[ClientDataset] | None = None) -> EvalReport:
    """One model on the merged training data, selected by merged-dev MicroAvg."""
    if not config.model.is_classifier:
        raise InvalidConfig("centralized needs a classification model")
    population = load_or_generate(config) if population is None else population
    merged = merge(population)
    init_w = models.init_params(config.model, config.seed)
    best, _ = train_supervised(
        config, init_w, merged.train, lambda w: evaluate_all(config.model, w, population, split="dev").micro_avg
    )
    return evaluate_all(config.model, best, population)


# -- federated ----------------------------------------------------------------

def loss_rows(records: Sequence[RoundRecord]) -> dict[int, list[tuple[int, int, float]]]:
    """Per-client (step, round, loss) rows; a step is one local epoch."""
    rows: dict[int, list[tuple[int, int, float]]] = {}
    for r in records:
        for cid, losses in zip(r.client_ids, r.epoch_losses):
            series = rows.setdefault(cid, [])
            for value in losses:
                series.append((len(series), r.round_index, value))
    return rows


def dev_rows(records: Sequence[RoundRecord]) -> list[tuple[int, float]]:
    return [(r.round_index, r.dev_metrics["micro_avg"]) for r in records if r.dev_metrics]


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def emit_plot_data(runs: dict[str, Sequence[RoundRecord]], out_dir: str | Path) -> list[Path]:
    """Write ``loss_client_<id>.csv`` and ``dev_curve.csv`` for one or more runs.

    With several runs, loss files get a ``<label>_`` prefix and the dev curve
    has one MicroAvg column per run label.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    single = len(runs) == 1
    for label, records in runs.items():
        for cid, rows in sorted(loss_rows(records).items()):
            name = f"loss_client_{cid}.csv" if single else f"{label}_loss_client_{cid}.csv"
            path = out_dir / name
            path.write_text(_csv_text(["step", "round", "loss"], rows))
            written.append(path)
    curves = {label: dict(dev_rows(records)) for label, records in runs.items()}
    rounds = sorted({t for c in curves.values() for t in c})
    labels = list(runs)
    rows = [[t] + [curves[l].get(t, "") for l in labels] for t in rounds]
    path = out_dir / "dev_curve.csv"
    path.write_text(_csv_text(["round"] + (["dev_micro_avg"] if single else labels), rows))
    written.append(path)
    return written


def read_loss_csv(path: str | Path) -> list[tuple[int, int, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [(int(s), int(t), float(v)) for s, t, v in reader]


def read_dev_curve(path: str | Path) -> dict[str, list[tuple[int, float]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        out: dict[str, list[tuple[int, float]]] = {h: [] for h in header[1:]}
        for row in reader:
            for h, cell in zip(header[1:], row[1:]):
                if cell != "":
                    out[h].append((int(row[0]), float(cell)))
    return out


def run_label(config: ExperimentConfig) -> str:
    algo = config.algo
    suffix = "" if algo.weighting.kind == "size" else f"_{algo.weighting.kind}"
    return f"{algo.kind}{suffix}"


def run_federated_experiment(
    config: ExperimentConfig,
    population: Sequence[ClientDataset] | None = None,
    out_dir: str | Path | None = None,
) -> tuple[EvalReport, list[Path]]:
    """Run FL per ``config`` (in-process or over TCP) and write the run directory."""
    population = load_or_generate(config) if population is None else population
    out = Path(out_dir if out_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.transport == "tcp":
        result = _run_over_tcp(config, population)
    else:
        result = run_federated(config.algo, population, config.seed, config.eval_every, model=config.model)
    report = evaluate_all(config.model, result.best, population)

    paths = [out / "manifest.json", out / "rounds.jsonl", out / "report.json"]
    _write_json(paths[0], manifest(config, "federated"))
    paths[1].write_text(records_to_jsonl(result.records))
    _write_json(paths[2], {"label": run_label(config), **report.to_dict()})
    paths += emit_plot_data({run_label(config): result.records}, out)
    return report, paths


def write_paradigm_outputs(config: ExperimentConfig, paradigm: str, report: EvalReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "manifest.json", manifest(config, paradigm))
    _write_json(out / "report.json", {"label": paradigm, **report.to_dict()})
    return [out / "manifest.json", out / "report.json"]


def _run_over_tcp(config: ExperimentConfig, population: Sequence[ClientDataset]):
    """Run the server here and one ``fedlorar client`` subprocess per client."""
    from .engine import population_sizes
    from .transport import run_server

    procs: list[subprocess.Popen] = []
    with tempfile.TemporaryDirectory(prefix="fedlorar-") as tmp:
        cfg_path = Path(tmp) / "effective.cfg"
        cfg_path.write_text(config.dumps())

        def spawn(addr):
            host, port = addr
            for d in population:
                cmd = [
                    sys.executable, "-m", "fedlorar", "client",
                    "--config", str(cfg_path),
                    "--server", f"{host}:{port}",
                    "--client-id", str(d.client_id),
                ]
                procs.append(subprocess.Popen(cmd, env=dict(os.environ)))

        try:
            result = run_server(
                ("127.0.0.1", 0),
                config.algo,
                population_sizes(population),
                config.seed,
                config.model,
                dev_population=population,
                eval_every=config.eval_every,
                on_listening=spawn,
            )
        finally:
            for p in procs:
                try:
                    p.wait(timeout=30)
                except subprocess.TimeoutExpired:
                    p.kill()
    failed = [p.returncode for p in procs if p.returncode != 0]
    if failed:
        from .errors import ClientDisconnected

        raise ClientDisconnected(f"{len(failed)} client processes exited with errors")
    return result


def load_records(run_dir: str | Path) -> list[RoundRecord]:
    from .engine import records_from_jsonl

    return records_from_jsonl((Path(run_dir) / "rounds.jsonl").read_text())


def load_report(run_dir: str | Path) -> tuple[str, EvalReport]:
    data = json.loads((Path(run_dir) / "report.json").read_text())
    return data.get("label", Path(run_dir).name), EvalReport.from_dict(data)
