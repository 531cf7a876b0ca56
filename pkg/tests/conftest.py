import pytest

from fedsim.population import DatasetSpec, DeviceShard, Population, Utterance, generate_population

_CRITERIA: list[tuple[int, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(number, passed, detail)."""

    def record(number: int, passed: bool, detail: str = "") -> None:
        _CRITERIA.append((number, bool(passed), detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_CRITERIA, key=lambda c: c[0]):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {detail}")


def make_population(devices: dict[str, list[tuple[int, tuple[int, ...]]]], vocab_size=6, days=(0, 360)):
    shards = tuple(
        DeviceShard(d, tuple(Utterance(d, day, tuple(toks)) for day, toks in utts))
        for d, utts in devices.items()
    )
    return Population(shards, vocab_size, days)


@pytest.fixture(scope="session")
def small_population():
    return generate_population(
        DatasetSpec(device_count=60, vocab_size=12, months=12, max_count=200, zipf_exponent=1.5, seed=3)
    )
