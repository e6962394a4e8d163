import pytest

from txdoc.schema import builtin_transactional_schema


@pytest.fixture(scope="session")
def schema():
    return builtin_transactional_schema()
