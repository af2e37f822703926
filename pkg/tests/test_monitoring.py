import numpy as np
import pytest

from app.core import monitoring
from app.core.config import Settings
from app.services.simulation import init_state, run_round
from app.services.synthetic import generate_all


@pytest.fixture
def recorded(monkeypatch):
    calls = []
    monkeypatch.setattr(monitoring, "_active", True)
    monkeypatch.setattr(monitoring.newrelic.agent, "application", lambda: "app")
    monkeypatch.setattr(
        monitoring.newrelic.agent,
        "record_custom_metric",
        lambda name, value, application=None: calls.append((name, value, application)),
    )
    return calls


class TestInitMonitoring:
    def test_disabled_without_key(self, monkeypatch):
        started = []
        monkeypatch.setattr(monitoring, "_active", False)
        monkeypatch.setattr(monitoring.newrelic.agent, "initialize", lambda *a, **k: started.append(a))
        assert monitoring.init_monitoring(Settings(new_relic_license_key="")) is False
        assert started == []

    def test_starts_agent_with_key(self, monkeypatch, tmp_path):
        started = []
        monkeypatch.setattr(monitoring, "_active", False)
        for name in ("NEW_RELIC_LICENSE_KEY", "NEW_RELIC_APP_NAME"):
            monkeypatch.setenv(name, "unset")
            monkeypatch.delenv(name)
        monkeypatch.setattr(monitoring.newrelic.agent, "initialize", lambda *a, **k: started.append(a))
        settings = Settings(new_relic_license_key="abc123", new_relic_config_file=tmp_path / "missing.ini")
        assert monitoring.init_monitoring(settings) is True
        assert started == [(None,)]
        assert monitoring.os.environ["NEW_RELIC_LICENSE_KEY"] == "abc123"
        assert monitoring.os.environ["NEW_RELIC_APP_NAME"] == "TreeFed-Simulator"


class TestRecordDuration:
    def test_inactive_records_nothing(self, monkeypatch):
        calls = []
        monkeypatch.setattr(monitoring, "_active", False)
        monkeypatch.setattr(monitoring.newrelic.agent, "record_custom_metric", lambda *a, **k: calls.append(a))
        monitoring.record_duration("Round", 1.0)
        assert calls == []

    def test_metric_name(self, recorded):
        monitoring.record_duration("Fold", 2.5)
        assert recorded == [("Custom/TreeFed/Fold", 2.5, "app")]

    @pytest.mark.asyncio
    async def test_round_duration_reported(self, recorded, config):
        state = init_state(config, generate_all(config.data.domains))
        state = await run_round(state, config)
        rounds = [(name, value) for name, value, _ in recorded if name == "Custom/TreeFed/Round"]
        assert len(rounds) == 1
        assert rounds[0][1] == pytest.approx(state.logs[-1].wall_time_s)
        assert np.isfinite(rounds[0][1])
