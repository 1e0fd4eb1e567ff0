"""
Global pytest configuration and fixtures for the hrapr test-suite.

This file contains shared fixtures and configuration that can be used
across all test modules in the project.
"""

import logging
from datetime import datetime
from pathlib import Path

import pytest

from config.config_manager import get_config
from hrapr.synthbench import SceneSpec, generate_scene, scene_database
from utils.logger import LOG_FORMAT


def pytest_addoption(parser):
    """Add custom command line options for pytest"""
    parser.addoption(
        "--preset",
        action="store",
        default="indoor",
        help="Run preset for tests that use one: indoor, outdoor"
    )
    parser.addoption(
        "--seed",
        action="store",
        type=int,
        default=42,
        help="Seed of the synthetic scenes used by the test-suite"
    )


def pytest_configure(config):
    """Configure pytest with custom markers and settings"""
    config.addinivalue_line("markers", "smoke: mark test as smoke test")
    config.addinivalue_line("markers", "regression: mark test as regression test")
    config.addinivalue_line("markers", "api: mark test as library-level test")
    config.addinivalue_line("markers", "integration: mark test as integration test")
    config.addinivalue_line("markers", "slow: mark test as slow running")
    config.addinivalue_line("markers", "performance: mark test as timing or storage check")

    # Create reports directory
    reports_dir = Path("reports")
    reports_dir.mkdir(exist_ok=True)
    (reports_dir / "logs").mkdir(exist_ok=True)
    (reports_dir / "html").mkdir(exist_ok=True)
    (reports_dir / "json").mkdir(exist_ok=True)


@pytest.fixture(scope="session")
def config():
    """Global configuration fixture"""
    return get_config()


@pytest.fixture(scope="session")
def preset(request):
    """Preset name fixture"""
    return request.config.getoption("--preset")


@pytest.fixture(scope="session")
def seed(request):
    """Scene seed fixture"""
    return request.config.getoption("--seed")


@pytest.fixture(scope="session")
def run_config(config, preset):
    """Resolved run configuration of the selected preset"""
    return config.resolve(preset=preset)


@pytest.fixture(scope="session")
def small_spec(seed):
    """A scene small enough for unit tests"""
    return SceneSpec(seed=seed, dim=256, num_train=300, num_test_near=40, num_test_far=40)


@pytest.fixture(scope="session")
def small_scene(small_spec):
    return generate_scene(small_spec)


@pytest.fixture(scope="session")
def small_db(small_scene):
    return scene_database(small_scene)


@pytest.fixture(scope="session")
def default_scene(seed):
    """The full-size default scene used by the acceptance runs"""
    return generate_scene(SceneSpec(seed=seed))


@pytest.fixture(scope="session")
def default_db(default_scene):
    return scene_database(default_scene, cell_size=0.5)


@pytest.fixture(scope="function")
def logger():
    """Logger fixture for tests"""
    test_logger = logging.getLogger('hrapr.tests')
    test_logger.setLevel(logging.INFO)

    logs_dir = Path("reports/logs")
    logs_dir.mkdir(parents=True, exist_ok=True)

    if not test_logger.handlers:
        log_file = logs_dir / f"test_execution_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(logging.INFO)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        test_logger.addHandler(file_handler)

    return test_logger
