# experiment.py
#
# Experiment documents: default resolution, the resolved-config record written
# next to every run, and the CSV/JSON artifact writers. File formats are
# documented in CONFIG.md.

import copy
import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from estimator import encoder_covariances
from lqr import RiccatiSolution
from model import (
    PAYLOAD_KINDS,
    ConfigError,
    CostWeights,
    LinearGaussianModel,
    Payload,
    dump_model_document,
    parse_model_document,
)
from policy import controller_from_config, scheduler_from_config
from simulate import MonteCarloSummary, PolicySpec, SearchResult, SimulationTrace, SweepRow
from voi import (
    DEFAULT_GRID_BOUNDS,
    DEFAULT_GRID_POINTS,
    MismatchGrid,
    QuadratureSpec,
    VoiTable,
    build_voi_table,
    table_columns,
    table_header,
    table_rows,
)

DEFAULT_OUT_DIR = "runs"
DEFAULT_SEEDS = 100

DEFAULTS = {
    "scheduler": {"kind": "voi-quadratic"},
    "controller": {"kind": "certainty-equivalent"},
    "channel": {"payload": "estimate"},
    "grid": {"points": DEFAULT_GRID_POINTS, "bounds": DEFAULT_GRID_BOUNDS},
    "quadrature": {"rule": "auto", "nodes": None},
    "simulation": {"seed": 0, "n_seeds": DEFAULT_SEEDS},
    "search": {"thresholds": [], "asymmetric": [], "method": "auto"},
}


def get_out_dir() -> str:
    """Get the output root from the VOI_OUT_DIR env var, or default."""
    return os.environ.get("VOI_OUT_DIR") or DEFAULT_OUT_DIR


def get_ledger_path(out_dir: str) -> str:
    """VOI_LEDGER_DB, or ledger.db inside the output directory."""
    return os.environ.get("VOI_LEDGER_DB") or os.path.join(out_dir, "ledger.db")


@dataclass
class ExperimentConfig:
    """An experiment document with every default filled in."""

    model: LinearGaussianModel
    costs: CostWeights
    scheduler: dict
    controller: dict
    channel: dict
    grid: dict
    quadrature: dict
    simulation: dict
    compare: dict
    sweep: dict
    search: dict
    out_dir: str
    source: str | None = None

    @property
    def payload_kind(self) -> str:
        return self.channel["payload"]

    @property
    def base_seed(self) -> int:
        return int(self.simulation["seed"])

    @property
    def n_seeds(self) -> int:
        return int(self.simulation["n_seeds"])

    @property
    def seed_list(self) -> list[int]:
        return [self.base_seed + i for i in range(self.n_seeds)]

    def to_dict(self) -> dict:
        document = dump_model_document(self.model, self.costs)
        document.update(
            scheduler=self.scheduler,
            controller=self.controller,
            channel=self.channel,
            grid=self.grid,
            quadrature=self.quadrature,
            simulation=self.simulation,
            compare=self.compare,
            sweep=self.sweep,
            search=self.search,
            out=self.out_dir,
        )
        return document

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    # -------------------------------------------------------------------------
    # Builders
    # -------------------------------------------------------------------------
    def table_factory(self):
        grid_doc, quadrature_doc = self.grid, self.quadrature

        def build(model: LinearGaussianModel, ric: RiccatiSolution) -> VoiTable:
            covariances = encoder_covariances(model)
            grid = MismatchGrid.for_model(
                model, covariances, points=int(grid_doc["points"]), bounds=float(grid_doc["bounds"])
            )
            nodes = quadrature_doc.get("nodes")
            quadrature = QuadratureSpec(rule=quadrature_doc["rule"], nodes=None if nodes is None else int(nodes))
            return build_voi_table(model, ric, grid=grid, quadrature=quadrature, covariances=covariances)

        return build

    def build_scheduler(self, ric: RiccatiSolution, spec: dict | None = None):
        return scheduler_from_config(spec or self.scheduler, self.model, ric, table_factory=self.table_factory())

    def build_policies(self, ric: RiccatiSolution) -> list[PolicySpec]:
        """The ``compare.policies`` list; identical scheduler blocks share one scheduler (and table)."""
        policies = []
        schedulers = {}
        for entry in self.compare["policies"]:
            scheduler_doc = entry.get("scheduler", self.scheduler)
            controller_doc = entry.get("controller", self.controller)
            name = entry.get("name") or scheduler_doc.get("name") or scheduler_doc.get("kind")
            key = json.dumps(scheduler_doc, sort_keys=True)
            if key not in schedulers:
                schedulers[key] = self.build_scheduler(ric, scheduler_doc)
            policies.append(
                PolicySpec(
                    name=name,
                    scheduler=schedulers[key],
                    controller=controller_from_config(controller_doc, ric),
                )
            )
        return policies


def _merged(defaults: dict, override) -> dict:
    if override is None:
        return copy.deepcopy(defaults)
    if not isinstance(override, dict):
        raise ConfigError(f"expected an object, got {type(override).__name__}")
    merged = copy.deepcopy(defaults)
    merged.update(override)
    return merged


def resolve_config(
    document: dict,
    out_dir: str | None = None,
    seeds: int | None = None,
    lambdas: list | None = None,
    source: str | None = None,
) -> ExperimentConfig:
    """Parse the model and fill in every optional block; command-line overrides win."""
    model, costs = parse_model_document(document)
    sections = {name: _merged(defaults, document.get(name)) for name, defaults in DEFAULTS.items()}

    if sections["channel"]["payload"] not in PAYLOAD_KINDS:
        raise ConfigError(f"channel.payload must be one of {PAYLOAD_KINDS}, got '{sections['channel']['payload']}'")
    if seeds is not None:
        sections["simulation"]["n_seeds"] = seeds
    if int(sections["simulation"]["n_seeds"]) < 1:
        raise ConfigError("simulation.n_seeds must be positive")

    compare = _merged(
        {
            "policies": [
                {"name": sections["scheduler"].get("kind", "voi-quadratic"), "scheduler": sections["scheduler"]},
                {"name": "periodic-1", "scheduler": {"kind": "periodic", "period": 1}},
            ]
        },
        document.get("compare"),
    )
    sweep = _merged({"lambdas": [costs.lam]}, document.get("sweep"))
    if lambdas is not None:
        sweep["lambdas"] = list(lambdas)
    if not sweep["lambdas"] or any(float(lam) <= 0 for lam in sweep["lambdas"]):
        raise ConfigError(f"sweep.lambdas must be a non-empty list of positive values, got {sweep['lambdas']}")

    return ExperimentConfig(
        model=model,
        costs=costs,
        compare=compare,
        sweep=sweep,
        out_dir=out_dir or document.get("out") or get_out_dir(),
        source=source,
        **sections,
    )


# -----------------------------------------------------------------------------
# Writers
# -----------------------------------------------------------------------------
def write_json(path: str, payload) -> str:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def write_resolved_config(out_dir: str, config: ExperimentConfig) -> str:
    os.makedirs(out_dir, exist_ok=True)
    return write_json(os.path.join(out_dir, "resolved-config.json"), config.to_dict())


def write_seeds(out_dir: str, seeds: list, **extra) -> str:
    """Seed ledger: the exact seeds used, enough to regenerate every rollout.

    Commands that draw no random numbers write an empty list.
    """
    return write_json(os.path.join(out_dir, "seeds.json"), {"seeds": list(seeds), **extra})


def trace_columns(trace: SimulationTrace, verbose: bool = False) -> list[str]:
    n, p, m = trace.x.shape[1], trace.y.shape[1], trace.u.shape[1]
    columns = ["k", *[f"x{i}" for i in range(n)], *[f"y{i}" for i in range(p)], *[f"u{i}" for i in range(m)]]
    columns += ["sigma", "z_kind", *[f"z{i}" for i in range(n)]]
    columns += [*[f"xcheck{i}" for i in range(n)], *[f"xhat{i}" for i in range(n)], *[f"etilde{i}" for i in range(n)]]
    columns.append("voi")
    if verbose:
        columns += [f"E{i}{i}" for i in range(n)]
    return columns


def _symbol_cells(symbol, n: int) -> list:
    if isinstance(symbol, Payload):
        return [symbol.kind, *symbol.value.tolist()]
    return ["erasure", *[""] * n]


def trace_rows(trace: SimulationTrace, verbose: bool = False):
    """Rows k = 0..N+1; the terminal row carries only x(N+1) and z(N+1)."""
    N = trace.horizon
    n, p, m = trace.x.shape[1], trace.y.shape[1], trace.u.shape[1]
    for k in range(N + 1):
        row = [k, *trace.x[k].tolist(), *trace.y[k].tolist(), *trace.u[k].tolist(), int(trace.sigma[k])]
        row += _symbol_cells(trace.z[k], n)
        row += [*trace.xcheck[k].tolist(), *trace.xhat[k].tolist(), *trace.e_tilde[k].tolist(), float(trace.voi[k])]
        if verbose:
            row += np.diag(trace.E[k]).tolist()
        yield row
    blank = [""] * (p + m + 1)
    tail = [""] * (3 * n + 1 + (n if verbose else 0))
    yield [N + 1, *trace.x[N + 1].tolist(), *blank, *_symbol_cells(trace.z[N + 1], n), *tail]


def write_trace_csv(path: str, trace: SimulationTrace, verbose: bool = False) -> str:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(trace_columns(trace, verbose))
        writer.writerows(trace_rows(trace, verbose))
    return path


def trace_summary(trace: SimulationTrace) -> dict:
    return {
        "seed": trace.seed,
        "horizon": trace.horizon,
        "transmissions": trace.transmissions,
        "R": trace.R_emp,
        "J": trace.J_emp,
        "Phi": trace.Phi_emp,
        "Psi": trace.Psi_emp,
    }


def write_riccati_csv(path: str, ric: RiccatiSolution) -> str:
    """One row per stage k = 0..N+1 with S, L, Gamma flattened row-major and theta."""
    N = ric.horizon
    n, m = ric.S.shape[1], ric.L.shape[1]
    columns = ["k", *[f"S{i}{j}" for i in range(n) for j in range(n)]]
    columns += [f"L{i}{j}" for i in range(m) for j in range(n)]
    columns += [f"Gamma{i}{j}" for i in range(n) for j in range(n)]
    columns.append("theta")
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for k in range(N + 2):
            gains = ric.L[k].ravel().tolist() if k <= N else [""] * (m * n)
            theta = float(ric.theta[k]) if k <= N else ""
            writer.writerow([k, *ric.S[k].ravel().tolist(), *gains, *ric.Gamma[k].ravel().tolist(), theta])
    return path


def write_voi_table(out_dir: str, table: VoiTable, extra: dict | None = None) -> tuple[str, str]:
    csv_path = os.path.join(out_dir, "voi-table.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(table_columns(table))
        writer.writerows(table_rows(table))
    json_path = write_json(os.path.join(out_dir, "voi-table.json"), {**table_header(table), **(extra or {})})
    logging.info(f"VoI table written to {csv_path}")
    return csv_path, json_path


def write_summary(out_dir: str, summary: MonteCarloSummary, extra: dict | None = None) -> str:
    payload = summary.to_dict()
    if extra:
        payload.update(extra)
    return write_json(os.path.join(out_dir, "summary.json"), payload)


SWEEP_COLUMNS = ["lambda", "R", "R_stderr", "J", "J_stderr", "Phi", "Phi_stderr", "transmissions"]


def write_sweep_csv(path: str, rows: list[SweepRow]) -> str:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow([row.lam, row.R, row.R_stderr, row.J, row.J_stderr, row.Phi, row.Phi_stderr, row.transmissions])
    return path


def write_search(out_dir: str, result: SearchResult) -> str:
    return write_json(os.path.join(out_dir, "search.json"), result.to_dict())
