"""
Logfire observability wiring.

Configured once at CLI start-up. With send_to_logfire='if-token-present' it is
a silent no-op when no LOGFIRE_TOKEN is set. ``span`` degrades to a null
context when Logfire is unavailable.
"""

import logging
from contextlib import nullcontext

logger = logging.getLogger(__name__)

_configured = False
_logfire = None


def configure_logfire(service_name: str = "deepssm") -> None:
    """Configure Logfire. Idempotent; safe without a token."""
    global _configured, _logfire
    if _configured:
        return
    try:
        import logfire
    except ImportError:
        logger.warning("logfire not installed; observability disabled")
        _configured = True
        return

    logfire.configure(send_to_logfire="if-token-present", service_name=service_name, console=False)
    _logfire = logfire
    _configured = True
    logger.info("Logfire configured (sends only when LOGFIRE_TOKEN is present)")


def span(name: str, **attributes):
    """Logfire span around a unit of work, or a null context before configuration."""
    if _logfire is None:
        return nullcontext()
    return _logfire.span(name, **attributes)
