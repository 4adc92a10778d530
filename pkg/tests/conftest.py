import pytest

from trace_strategist.actions import default_action_library
from trace_strategist.ingest import RawEvent
from trace_strategist.processes import default_process_library


@pytest.fixture(scope="session")
def action_lib():
    return default_action_library()


@pytest.fixture(scope="session")
def process_lib(action_lib):
    return default_process_library(action_lib)


def ev(ts, stream, kind, target, student="a1", session="S1"):
    return RawEvent(ts, student, session, stream, kind, target)
