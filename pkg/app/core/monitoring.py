import logging
import os

import newrelic.agent

from app.core.config import Settings

logger = logging.getLogger(__name__)

METRIC_PREFIX = "Custom/TreeFed"

_active = False


def init_monitoring(settings: Settings) -> bool:
    """Start the New Relic agent when a license key is configured."""
    global _active
    if _active:
        return True
    if not settings.new_relic_license_key:
        logger.debug("New Relic disabled: no license key")
        return False
    os.environ.setdefault("NEW_RELIC_LICENSE_KEY", settings.new_relic_license_key)
    os.environ.setdefault("NEW_RELIC_APP_NAME", settings.new_relic_app_name)
    config_file = settings.new_relic_config_file
    newrelic.agent.initialize(str(config_file) if config_file and config_file.exists() else None)
    _active = True
    logger.info(f"New Relic agent started for '{settings.new_relic_app_name}'")
    return True


def record_duration(name: str, seconds: float) -> None:
    # no-op until init_monitoring succeeds
    if not _active:
        return
    newrelic.agent.record_custom_metric(
        f"{METRIC_PREFIX}/{name}", seconds, application=newrelic.agent.application()
    )


def shutdown_monitoring(timeout: float = 5.0) -> None:
    """Flush pending metrics; short-lived CLI runs exit before the harvest cycle."""
    global _active
    if not _active:
        return
    newrelic.agent.shutdown_agent(timeout=timeout)
    _active = False
