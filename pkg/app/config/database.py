"""
Results Store Connection

Sweep result rows are persisted through SQLAlchemy so they can be queried
later (by config hash) from the API or re-exported as CSV.

SQLAlchemy basics used here:
---------------------------
1. Engine: the physical connection (pool) to the results database
2. Session: a unit of work; commit() / rollback()
3. Base: declarative base every ORM table inherits from

The default URL is a local SQLite file; any SQLAlchemy URL works.
"""

from contextlib import contextmanager

from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

from app.config.settings import settings


def _connect_args(url: str) -> dict:
    # SQLite connections are shared between the FastAPI threadpool workers
    if url.startswith("sqlite"):
        return {"check_same_thread": False}
    return {}


# =============================================================================
# ENGINE / SESSION FACTORY
# =============================================================================

results_engine = create_engine(
    settings.results_db_url,
    connect_args=_connect_args(settings.results_db_url),
    pool_pre_ping=True,
    echo=settings.debug,
)

ResultsSessionLocal = sessionmaker(
    autocommit=False,
    autoflush=False,
    bind=results_engine,
)

# Base class of every results-store table
ResultsBase = declarative_base()


def create_results_tables(engine=None) -> None:
    """
    Creates the results tables if they do not exist yet.

    Args:
        engine: engine to use (defaults to the configured results engine)
    """
    # Import registers the table on ResultsBase.metadata
    from app.models import sweep_result  # noqa: F401

    ResultsBase.metadata.create_all(bind=engine or results_engine)


@contextmanager
def results_session():
    """
    Provides a results-store session as a context manager.

    Usage:
        with results_session() as db:
            result_repository.save_rows(db, config_hash, rows)

    Yields:
        Session: SQLAlchemy session, closed on exit
    """
    db = ResultsSessionLocal()
    try:
        yield db
    finally:
        db.close()


# =============================================================================
# DEPENDENCY INJECTION
# =============================================================================

def get_results_db():
    """
    FastAPI dependency yielding a results-store session.

    Usage:
        @router.get("/rows")
        def rows(db: Session = Depends(get_results_db)):
            ...

    Yields:
        Session: SQLAlchemy session, closed when the request finishes
    """
    db = ResultsSessionLocal()
    try:
        yield db
    finally:
        db.close()
