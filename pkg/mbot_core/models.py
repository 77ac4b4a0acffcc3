# mbot_core/models.py - Optional run registry for CLI runs and experiment records
import json
import logging
from datetime import datetime

from sqlalchemy import (
    Boolean,
    Column,
    DateTime,
    Float,
    ForeignKey,
    Index,
    Integer,
    String,
    Text,
    create_engine,
    func,
)
from sqlalchemy.orm import declarative_base, relationship, sessionmaker

logger = logging.getLogger(__name__)

Base = declarative_base()


class Run(Base):
    """One CLI invocation, mirroring its manifest.json"""
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True)
    subcommand = Column(String(50), nullable=False)
    argv = Column(Text, nullable=False)  # JSON list
    seed = Column(String(40))  # 64-bit seeds overflow some backends' integers
    versions = Column(Text)  # JSON object
    started_at = Column(DateTime, default=datetime.utcnow)
    wall_clock_seconds = Column(Float)
    outputs = Column(Text)  # JSON list
    exit_status = Column(Integer, default=0)

    records = relationship("ExperimentRow", back_populates="run", cascade="all, delete-orphan")

    __table_args__ = (
        Index("idx_runs_subcommand", "subcommand"),
        Index("idx_runs_started", "started_at"),
    )


class ExperimentRow(Base):
    __tablename__ = "experiment_records"

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    n = Column(Integer, nullable=False)
    m = Column(Integer, nullable=False)
    k = Column(Integer, nullable=False)
    rep = Column(Integer, nullable=False)
    seed = Column(String(40))
    estimate = Column(Float)
    reference = Column(Float)
    abs_error = Column(Float)
    bound = Column(Float)
    within_bound = Column(Boolean)
    reference_feasible = Column(Boolean, default=True)
    reference_kind = Column(String(20))

    run = relationship("Run", back_populates="records")

    __table_args__ = (Index("idx_records_grid", "run_id", "n", "m", "k"),)


def _nan_to_none(value):
    return None if value is None or value != value else float(value)


class DatabaseManager:
    """Run registry backed by any SQLAlchemy URL"""

    def __init__(self, connection_string):
        options = {"echo": False}
        if not connection_string.startswith("sqlite"):
            options.update(pool_pre_ping=True, pool_recycle=3600, pool_size=5, max_overflow=10)
        self.engine = create_engine(connection_string, **options)

        # Create all tables
        Base.metadata.create_all(self.engine)

        Session = sessionmaker(bind=self.engine)
        self.session = Session()

    def get_session(self):
        """Get database session"""
        return self.session

    def close(self):
        """Close database connection"""
        self.session.close()
        self.engine.dispose()

    def record_run(self, manifest) -> int:
        """Store a RunManifest and return the new run id"""
        session = self.get_session()
        try:
            run = Run(
                subcommand=manifest.subcommand,
                argv=json.dumps(list(manifest.argv)),
                seed=None if manifest.seed is None else str(manifest.seed),
                versions=json.dumps(manifest.versions, sort_keys=True),
                started_at=manifest.started_at,
                wall_clock_seconds=manifest.wall_clock_seconds,
                outputs=json.dumps(list(manifest.outputs)),
                exit_status=manifest.exit_status,
            )
            session.add(run)
            session.commit()
            logger.info(f"Recorded run {run.id} ({manifest.subcommand})")
            return run.id
        except Exception as e:
            session.rollback()
            logger.error(f"Failed to record run: {e}")
            raise

    def record_experiments(self, run_id: int, records) -> int:
        """Store ExperimentRecords under an existing run"""
        session = self.get_session()
        try:
            rows = [
                ExperimentRow(
                    run_id=run_id,
                    n=r.n, m=r.m, k=r.k, rep=r.rep, seed=str(r.seed),
                    estimate=_nan_to_none(r.estimate),
                    reference=_nan_to_none(r.reference),
                    abs_error=_nan_to_none(r.abs_error),
                    bound=_nan_to_none(r.bound),
                    within_bound=bool(r.within_bound),
                    reference_feasible=bool(r.reference_feasible),
                    reference_kind=r.reference_kind,
                )
                for r in records
            ]
            session.add_all(rows)
            session.commit()
            return len(rows)
        except Exception as e:
            session.rollback()
            logger.error(f"Failed to record experiment rows for run {run_id}: {e}")
            raise

    def get_run_stats(self) -> dict:
        """Counts of runs per subcommand and of stored records"""
        session = self.get_session()
        per_command = dict(session.query(Run.subcommand, func.count(Run.id)).group_by(Run.subcommand).all())
        return {
            "total_runs": session.query(Run).count(),
            "failed_runs": session.query(Run).filter(Run.exit_status != 0).count(),
            "runs_by_subcommand": per_command,
            "experiment_records": session.query(ExperimentRow).count(),
            "records_within_bound": session.query(ExperimentRow).filter_by(within_bound=True).count(),
        }


def get_database_manager(url):
    """DatabaseManager for ``url``, or None when the registry is disabled"""
    if not url:
        return None
    return DatabaseManager(url)
