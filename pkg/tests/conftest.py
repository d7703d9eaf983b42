import numpy as np
import pytest
from hypothesis import settings

from darkscope.ingest import PacketRecord, Protocol, SYN, ip_to_int

settings.register_profile("repo", deadline=None, max_examples=60)
settings.load_profile("repo")


def syn(ts, src="10.0.0.1", dst="192.0.2.1", port=23, seq=None, ip_id=0, size=40):
    """A TCP SYN record; seq defaults to something that is not the Mirai marker."""
    if seq is None:
        seq = (ip_to_int(dst) + 1) % 2**32
    return PacketRecord(ts, src, dst, Protocol.TCP, 40000, port, size, ip_id, SYN, seq)


def udp(ts, src="10.0.0.2", dst="192.0.2.9", port=53, size=60):
    return PacketRecord(ts, src, dst, Protocol.UDP, 5353, port, size)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_scenario(tmp_path_factory):
    """Three small synthetic days written to disk once per session."""
    from darkscope.scenario import ScenarioSpec, generate

    spec = ScenarioSpec(days=3, seed=7, population={
        "MiraiTelnet": 8, "SmbWorm": 40, "CwmpSsh": 30, "DnsAmp": 25, "EphemeralUdpSpray": 20})
    root = tmp_path_factory.mktemp("scenario")
    return generate(spec, root)


SMALL_MLP = {"latent_dim": 4, "hidden_dims": [16], "epochs": 5, "batch_size": 32}


# acceptance verdicts, printed once at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
