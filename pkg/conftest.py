"""
Shared pytest configuration
Registers the slow marker and the testing context
"""
import pytest

from lowramp import create_context


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='Run acceptance tests that take minutes')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: acceptance run that takes minutes')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope='session', autouse=True)
def testing_context():
    """Testing profile: no log files"""
    return create_context('testing')
