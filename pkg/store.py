# store.py
#
# SQLite ledger of experiment runs and their per-seed metrics. Every command
# that produces Monte Carlo numbers records the run here so `status` can list
# what has been computed and where the artifacts live.

import datetime
import enum
import logging
import time

import peewee

# Define a constant for the database retry delay
DB_RETRY_DELAY_SECONDS = 1


# -----------------------------------------------------------------------------
# Run status
# -----------------------------------------------------------------------------
class RunStatus(enum.Enum):
    RUNNING = 0
    DONE = 1
    FAILED = 2


# -----------------------------------------------------------------------------
# PeeWee models
# -----------------------------------------------------------------------------
db = peewee.DatabaseProxy()


class ExperimentRun(peewee.Model):
    """
    Represents the 'experiment_run' table.

    Fields:
    - command: CLI subcommand that produced the run (simulate, compare, sweep).
    - config_hash: SHA-256 of the resolved config JSON.
    - out_dir: Directory holding the run's artifacts.
    - base_seed, n_seeds: The seed ledger; seeds are base_seed + i.
    - status: RunStatus value.
    - created: When the run started.
    """

    command = peewee.TextField(null=False)
    config_hash = peewee.TextField(null=False, index=True)
    out_dir = peewee.TextField(null=False)
    base_seed = peewee.IntegerField(null=False)
    n_seeds = peewee.IntegerField(null=False)
    status = peewee.IntegerField(null=False, default=RunStatus.RUNNING.value)
    created = peewee.DateTimeField(null=False, default=datetime.datetime.now)

    class Meta:
        database = db
        table_name = "experiment_run"

    @property
    def status_enum(self):
        return RunStatus(self.status)


class SeedMetric(peewee.Model):
    """Per-seed accumulators of one policy within a run."""

    run = peewee.ForeignKeyField(ExperimentRun, backref="metrics", on_delete="CASCADE")
    policy = peewee.TextField(null=False)
    seed = peewee.IntegerField(null=False)
    R = peewee.FloatField(null=False)
    J = peewee.FloatField(null=False)
    Phi = peewee.FloatField(null=False)
    Psi = peewee.FloatField(null=False)
    transmissions = peewee.IntegerField(null=False)

    class Meta:
        database = db
        table_name = "seed_metric"
        indexes = ((("run", "policy", "seed"), True),)


def _retry_locked(operation):
    """Run ``operation`` until SQLite stops reporting a locked database."""
    while True:
        try:
            return operation()
        except peewee.OperationalError as err:
            if "database is locked" in str(err):
                time.sleep(DB_RETRY_DELAY_SECONDS)
                continue
            raise


# -----------------------------------------------------------------------------
# The ledger
# -----------------------------------------------------------------------------
class ExperimentLedger:
    """
    Ledger of experiment runs backed by SQLite in WAL mode.
    """

    def __init__(self, db_path="ledger.db"):
        """
        Args:
            db_path (str): The path to the SQLite database file.
        """
        self.db = peewee.SqliteDatabase(db_path, pragmas={"journal_mode": "wal", "foreign_keys": 1})
        db.initialize(self.db)

    def create(self):
        """Create the tables if they do not exist."""
        self.db.connect(reuse_if_open=True)
        if not ExperimentRun.table_exists():
            logging.info("Creating tables 'experiment_run' and 'seed_metric'...")
        self.db.create_tables([ExperimentRun, SeedMetric], safe=True)

    def start_run(self, command: str, config_hash: str, out_dir: str, base_seed: int, n_seeds: int) -> ExperimentRun:
        return _retry_locked(
            lambda: ExperimentRun.create(
                command=command,
                config_hash=config_hash,
                out_dir=out_dir,
                base_seed=base_seed,
                n_seeds=n_seeds,
            )
        )

    def record_metrics(self, run: ExperimentRun, per_seed: dict):
        """
        Store per-seed metrics.

        Args:
            run (ExperimentRun): The run the metrics belong to.
            per_seed (dict): policy name -> list of SeedMetrics.
        """
        rows = [
            {
                "run": run.id,
                "policy": policy,
                "seed": m.seed,
                "R": m.R,
                "J": m.J,
                "Phi": m.Phi,
                "Psi": m.Psi,
                "transmissions": m.transmissions,
            }
            for policy, metrics in per_seed.items()
            for m in metrics
        ]
        if not rows:
            return

        def insert():
            with self.db.atomic():
                for start in range(0, len(rows), 500):
                    SeedMetric.insert_many(rows[start : start + 500]).execute()

        _retry_locked(insert)

    def finish_run(self, run: ExperimentRun, status: RunStatus = RunStatus.DONE):
        def update():
            ExperimentRun.update(status=status.value).where(ExperimentRun.id == run.id).execute()

        _retry_locked(update)

    def runs(self, limit: int = 20):
        """Most recent runs first."""
        return _retry_locked(lambda: list(ExperimentRun.select().order_by(ExperimentRun.id.desc()).limit(limit)))

    def metric_counts(self) -> dict:
        """run id -> number of stored seed rows."""
        query = SeedMetric.select(SeedMetric.run, peewee.fn.COUNT(SeedMetric.id).alias("rows")).group_by(SeedMetric.run)
        return _retry_locked(lambda: {row.run_id: row.rows for row in query})

    def metrics(self, run: ExperimentRun, policy: str):
        return _retry_locked(
            lambda: list(
                SeedMetric.select()
                .where((SeedMetric.run == run.id) & (SeedMetric.policy == policy))
                .order_by(SeedMetric.seed)
            )
        )

    def __enter__(self):
        """Context manager entry point. Opens the database connection."""
        try:
            self.db.connect(reuse_if_open=True)
        except peewee.OperationalError:
            pass
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        """Context manager exit point. Closes the database connection."""
        try:
            self.db.close()
        except peewee.OperationalError:
            pass
