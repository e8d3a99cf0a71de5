import numpy as np
import pytest
from fastapi.testclient import TestClient
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import StaticPool

from app.config.database import create_results_tables, get_results_db
from app.main import app
from app.models.kernel import PointCloud
from app.models.torus import DensityModel, Mode


@pytest.fixture
def one_mode_1d():
    """f = 1 + 0.5 cos(2 pi x)."""
    return DensityModel(dim=1, modes=(Mode(amp=0.5, freq=(1,)),))


@pytest.fixture
def one_mode_2d():
    return DensityModel(dim=2, modes=(Mode(amp=0.3, freq=(1, 0)),))


@pytest.fixture
def small_cloud():
    return PointCloud(np.array([[0.0], [0.1], [0.25], [0.6]]))


@pytest.fixture
def random_cloud():
    rng = np.random.default_rng(7)
    return PointCloud(rng.random((300, 2)))


@pytest.fixture
def db_session():
    """In-memory results store shared by every connection of the test."""
    engine = create_engine(
        "sqlite://",
        connect_args={"check_same_thread": False},
        poolclass=StaticPool,
    )
    create_results_tables(engine)
    Session = sessionmaker(autocommit=False, autoflush=False, bind=engine)
    session = Session()
    try:
        yield session
    finally:
        session.close()
        engine.dispose()


@pytest.fixture
def client(db_session):
    # no context manager: the lifespan would create the file-backed store
    def override():
        yield db_session

    app.dependency_overrides[get_results_db] = override
    try:
        yield TestClient(app)
    finally:
        app.dependency_overrides.clear()
